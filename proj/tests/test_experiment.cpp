// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "fedrand/experiment.hpp"

using namespace fedrand;
namespace fs = std::filesystem;

namespace {

ExperimentSpec tiny_spec(std::uint64_t seed = 7) {
  ExperimentSpec spec;
  spec.model = ModelDims{32, 16, 2, 4};
  spec.data = DataParams{4, 30, 10, 12, 0.5};
  spec.mia = MiaParams{60, {0.0, 10.0}, {0.5}};
  spec.fed.num_clients = 4;
  spec.fed.participants_per_round = 2;
  spec.fed.rounds = 3;
  spec.seed = seed;
  return spec;
}

std::string slurp(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  REQUIRE(is);
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name)
      : path(fs::temp_directory_path() / ("fedrand_test_" + name)) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST_CASE("experiment specs round-trip through json") {
  ExperimentSpec spec = tiny_spec();
  spec.fed.method = Method::FedPer;
  spec.fed.fedper_shared_layers = 1;
  spec.fed.ablations.no_normalization = true;
  spec.seeds = {1, 2, 3};
  const json j = spec;
  const ExperimentSpec back = j.get<ExperimentSpec>();
  REQUIRE(json(back).dump() == j.dump());
  REQUIRE(spec_hash(back) == spec_hash(spec));

  ExperimentSpec other = tiny_spec();
  other.fed.rho = 0.25;
  REQUIRE(spec_hash(other) != spec_hash(spec));
}

TEST_CASE("invalid specs are rejected before any compute") {
  ExperimentSpec spec = tiny_spec();
  spec.fed.participants_per_round = spec.fed.num_clients + 1;
  REQUIRE_THROWS_AS(run_experiment(spec), ConfigError);

  ExperimentSpec bad_rank = tiny_spec();
  bad_rank.model.lora_rank = bad_rank.model.embed_dim;
  REQUIRE_THROWS_AS(run_experiment(bad_rank), ConfigError);

  ExperimentSpec bad_mia = tiny_spec();
  bad_mia.mia.count_per_side = 10000;
  REQUIRE_THROWS_AS(run_experiment(bad_mia), ConfigError);
}

TEST_CASE("a run produces a complete, self-consistent result") {
  ExperimentSpec spec = tiny_spec();
  ExperimentResult result = run_experiment(spec);
  REQUIRE(result.fed.history.size() == spec.fed.rounds);
  REQUIRE(result.final_server_eval_loss == result.fed.history.back().server_eval_loss);
  REQUIRE(result.client_eval_count >= 1);
  REQUIRE(result.cost.ratio_vs_fedavg == 0.75);
  REQUIRE(!result.server_attack.empty());
  REQUIRE(result.reconstructions.size() == spec.fed.num_clients);
  for (const auto& r : result.server_attack) {
    REQUIRE(r.auroc_value >= 0.0);
    REQUIRE(r.auroc_value <= 1.0);
    REQUIRE(r.n_members == spec.mia.count_per_side);
  }
}

TEST_CASE("persisted runs are byte-identical across reruns") {
  ExperimentSpec spec = tiny_spec(99);
  TempDir d1("rerun_a"), d2("rerun_b");
  run_and_persist(spec, d1.path);
  run_and_persist(spec, d2.path);
  for (const char* name :
       {artifacts::kSpecFile, artifacts::kTraceFile, artifacts::kPartitionFile,
        artifacts::kInterceptionsFile, artifacts::kMiaSplitFile, artifacts::kServerCkpt}) {
    INFO(name);
    REQUIRE(slurp(d1.path / name) == slurp(d2.path / name));
  }
  // every intercepted checkpoint too
  for (const auto& entry : fs::directory_iterator(d1.path / artifacts::kInterceptedDir)) {
    const auto rel = entry.path().filename();
    REQUIRE(slurp(entry.path()) ==
            slurp(d2.path / artifacts::kInterceptedDir / rel));
  }
}

TEST_CASE("run artifacts are complete and the report is marked last") {
  ExperimentSpec spec = tiny_spec(3);
  TempDir dir("artifacts");
  run_and_persist(spec, dir.path);
  for (const char* name :
       {artifacts::kSpecFile, artifacts::kTraceFile, artifacts::kPartitionFile,
        artifacts::kInterceptionsFile, artifacts::kMiaSplitFile, artifacts::kServerCkpt,
        artifacts::kReportJson, artifacts::kReportText}) {
    INFO(name);
    REQUIRE(fs::exists(dir.path / name));
  }
  std::ifstream is(dir.path / artifacts::kReportJson);
  const json report = json::parse(is);
  REQUIRE(report.at("schema") == "fedrand/report/v1");
  REQUIRE(report.at("seed") == spec.seed);
  REQUIRE(report.at("config_hash") == spec_hash(spec));
  REQUIRE(report.contains("final_server_eval_loss"));
  REQUIRE(report.contains("mia"));
  REQUIRE(report.contains("wall_seconds"));

  // trace header carries the schema version and the same hash
  std::ifstream ts(dir.path / artifacts::kTraceFile);
  std::string header_line;
  std::getline(ts, header_line);
  const json header = json::parse(header_line);
  REQUIRE(header.at("schema") == "fedrand/trace/v1");
  REQUIRE(header.at("config_hash") == spec_hash(spec));
}

TEST_CASE("offline attack over a fedavg run reconstructs every participant exactly") {
  ExperimentSpec spec = tiny_spec(11);
  spec.fed.method = Method::FedAvg;
  TempDir dir("attack_fedavg");
  ExperimentResult live = run_and_persist(spec, dir.path);
  OfflineAttackResult offline = attack_run_dir(dir.path);
  REQUIRE(offline.tamper_check_ok);
  REQUIRE(offline.config_hash == live.config_hash);
  REQUIRE(offline.reconstructable_clients == live.reconstructable_clients);
  for (const auto& rec : offline.reconstructions) {
    if (rec.ok) REQUIRE(rec.staleness_gap == 0);
  }
  // offline scenario (a) equals the in-run attack bit for bit
  REQUIRE(offline.server_attack.size() == live.server_attack.size());
  for (std::size_t i = 0; i < offline.server_attack.size(); ++i) {
    REQUIRE(offline.server_attack[i].auroc_value == live.server_attack[i].auroc_value);
  }
}

TEST_CASE("offline attack matches the live fedrand attack and reports staleness") {
  ExperimentSpec spec = tiny_spec(13);
  spec.fed.rounds = 6;
  TempDir dir("attack_fedrand");
  ExperimentResult live = run_and_persist(spec, dir.path);
  OfflineAttackResult offline = attack_run_dir(dir.path);
  REQUIRE(offline.tamper_check_ok);
  REQUIRE(offline.reconstructable_clients == live.reconstructable_clients);
  for (std::size_t i = 0; i < offline.reconstructions.size(); ++i) {
    REQUIRE(offline.reconstructions[i].ok == live.reconstructions[i].ok);
    REQUIRE(offline.reconstructions[i].staleness_gap == live.reconstructions[i].staleness_gap);
  }
  for (std::size_t i = 0; i < offline.client_attack.size(); ++i) {
    REQUIRE(offline.client_attack[i].auroc_value == live.client_attack[i].auroc_value);
  }
}

TEST_CASE("offline attack names the missing artifact") {
  TempDir dir("attack_missing");
  REQUIRE_THROWS_MATCHES(attack_run_dir(dir.path), IoError,
                         Catch::Matchers::MessageMatches(
                             Catch::Matchers::ContainsSubstring("spec.json")));
  // a spec alone is not enough either
  {
    std::ofstream os(dir.path / artifacts::kSpecFile);
    os << json(tiny_spec()).dump();
  }
  REQUIRE_THROWS_MATCHES(attack_run_dir(dir.path), IoError,
                         Catch::Matchers::MessageMatches(
                             Catch::Matchers::ContainsSubstring("interceptions.jsonl")));
}

TEST_CASE("comparison rows carry exact comm ratios and zero stddev for one seed") {
  ExperimentSpec spec = tiny_spec(17);
  spec.model.num_layers = 4;  // fedper4 needs four layers
  auto rows = compare_methods(spec, standard_variants(), {17});
  REQUIRE(rows.size() == 5);
  REQUIRE(rows[0].label == "fedavg");
  REQUIRE(rows[0].comm_ratio == 1.0);
  REQUIRE(rows[0].server_loss_stddev == 0.0);
  REQUIRE(rows[1].label == "fedrand");
  REQUIRE(rows[1].comm_ratio == 0.75);
  REQUIRE(rows[2].comm_ratio == 0.5);   // fedper2 of L=4 layers
  REQUIRE(rows[3].label == "fedper4");
  REQUIRE(rows[3].comm_ratio == 1.0);   // fedper4 of L=4 layers
  REQUIRE(rows[4].label == "fedpara");
  const std::string table = compare_table_text(rows);
  REQUIRE_THAT(table, Catch::Matchers::ContainsSubstring("fedavg"));
  REQUIRE_THAT(table, Catch::Matchers::ContainsSubstring("comm"));
}

TEST_CASE("the ablation preset reproduces the expected row structure") {
  auto variants = ablation_variants();
  REQUIRE(variants.size() == 5);
  REQUIRE(variants[0].label == "rho=0.3");
  REQUIRE(variants[1].label == "rho=0.7");
  REQUIRE(variants[2].label == "no_past_params");
  REQUIRE(variants[3].label == "no_normalization");
  REQUIRE(variants[4].label == "fedrand");
  ExperimentSpec probe = tiny_spec();
  variants[0].apply(probe);
  REQUIRE(probe.fed.rho == 0.3);
  variants[2].apply(probe);
  REQUIRE(probe.fed.ablations.no_past_params);
  variants[3].apply(probe);
  REQUIRE(probe.fed.ablations.no_normalization);
}
