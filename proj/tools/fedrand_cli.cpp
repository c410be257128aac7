// SPDX-License-Identifier: Apache-2.0
//
// Command-line front end: run one federation experiment, compare methods
// across seeds, or replay the membership-inference attack over a persisted
// run directory.

#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "fedrand/fedrand.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitInvariant = 3;
constexpr int kExitIo = 4;

struct CliOptions {
  std::string config_file;
  std::string method;
  double rho = 0.5;
  std::size_t rounds = 30;
  std::size_t clients = 12;
  std::size_t participants = 4;
  std::size_t rank = 8;
  double dirichlet = 0.5;
  std::uint64_t seed = 1;
  std::vector<std::uint64_t> seeds;
  std::size_t epochs = 1;
  std::size_t batch_size = 8;
  double lr = 3e-4;
  std::string out;
  std::vector<std::string> ablations;
  std::size_t fedper_layers = 2;
  std::size_t per_class = 200;
  std::size_t num_classes = 6;
  std::size_t seq_len = 24;
  std::size_t mia_count = 300;
};

void add_spec_flags(CLI::App* cmd, CliOptions& opt) {
  cmd->add_option("--config", opt.config_file, "JSON spec file; flags override its values")
      ->check(CLI::ExistingFile);
  cmd->add_option("--method", opt.method, "fedrand|fedavg|fedper|fedpara");
  cmd->add_option("--rho", opt.rho, "probability of adopting the A family");
  cmd->add_option("--rounds", opt.rounds, "federation rounds R");
  cmd->add_option("--clients", opt.clients, "total clients K");
  cmd->add_option("--participants", opt.participants, "clients per round K'");
  cmd->add_option("--rank", opt.rank, "LoRA rank");
  cmd->add_option("--dirichlet", opt.dirichlet, "Dirichlet concentration for partitioning");
  cmd->add_option("--seed", opt.seed, "master seed");
  cmd->add_option("--epochs", opt.epochs, "local epochs E");
  cmd->add_option("--batch-size", opt.batch_size, "local batch size b");
  cmd->add_option("--lr", opt.lr, "learning rate");
  cmd->add_option("--ablation", opt.ablations,
                  "no-normalization | no-past-params | send-both-halves (repeatable)");
  cmd->add_option("--fedper-layers", opt.fedper_layers, "shared top layers for fedper");
  cmd->add_option("--per-class", opt.per_class, "training sequences per class");
  cmd->add_option("--classes", opt.num_classes, "number of data classes");
  cmd->add_option("--seq-len", opt.seq_len, "token sequence length");
  cmd->add_option("--mia-count", opt.mia_count, "member/non-member samples per side");
}

fedrand::ExperimentSpec build_spec(const CLI::App* cmd, const CliOptions& opt) {
  fedrand::ExperimentSpec spec;
  if (!opt.config_file.empty()) {
    std::ifstream is(opt.config_file);
    if (!is) throw fedrand::IoError("cannot open config file: " + opt.config_file);
    try {
      spec = nlohmann::json::parse(is).get<fedrand::ExperimentSpec>();
    } catch (const nlohmann::json::exception& e) {
      throw fedrand::ConfigError("bad config file " + opt.config_file + ": " + e.what());
    }
  }
  auto passed = [cmd](const std::string& name) { return cmd->count(name) > 0; };
  if (passed("--method")) spec.fed.method = fedrand::method_from_name(opt.method);
  if (passed("--rho")) spec.fed.rho = opt.rho;
  if (passed("--rounds")) spec.fed.rounds = opt.rounds;
  if (passed("--clients")) spec.fed.num_clients = opt.clients;
  if (passed("--participants")) spec.fed.participants_per_round = opt.participants;
  if (passed("--rank")) spec.model.lora_rank = opt.rank;
  if (passed("--dirichlet")) spec.data.dirichlet_alpha = opt.dirichlet;
  if (passed("--seed")) spec.seed = opt.seed;
  if (passed("--epochs")) spec.fed.local_epochs = opt.epochs;
  if (passed("--batch-size")) spec.fed.batch_size = opt.batch_size;
  if (passed("--lr")) spec.fed.lr = opt.lr;
  if (passed("--fedper-layers")) spec.fed.fedper_shared_layers = opt.fedper_layers;
  if (passed("--per-class")) spec.data.per_class = opt.per_class;
  if (passed("--classes")) spec.data.num_classes = opt.num_classes;
  if (passed("--seq-len")) spec.data.seq_len = opt.seq_len;
  if (passed("--mia-count")) spec.mia.count_per_side = opt.mia_count;
  for (const std::string& a : opt.ablations) {
    if (a == "no-normalization") {
      spec.fed.ablations.no_normalization = true;
    } else if (a == "no-past-params") {
      spec.fed.ablations.no_past_params = true;
    } else if (a == "send-both-halves") {
      spec.fed.ablations.send_both_halves = true;
    } else {
      throw fedrand::ConfigError("unknown ablation '" + a + "'");
    }
  }
  spec.validate();
  return spec;
}

int cmd_run(const CLI::App* cmd, const CliOptions& opt) {
  fedrand::ExperimentSpec spec = build_spec(cmd, opt);
  if (opt.out.empty()) throw fedrand::ConfigError("run: --out directory is required");
  fedrand::ExperimentResult result = fedrand::run_and_persist(spec, opt.out);
  std::cout << fedrand::report_text(result);
  std::cout << "artifacts written to " << opt.out << "\n";
  return kExitOk;
}

int cmd_compare(const CLI::App* cmd, const CliOptions& opt, const std::string& preset) {
  fedrand::ExperimentSpec spec = build_spec(cmd, opt);
  std::vector<std::uint64_t> seeds = opt.seeds;
  if (seeds.empty()) seeds = spec.sweep_seeds();
  const auto variants =
      preset == "ablation" ? fedrand::ablation_variants() : fedrand::standard_variants();
  const auto rows = fedrand::compare_methods(spec, variants, seeds);
  std::cout << fedrand::compare_table_text(rows);
  if (!opt.out.empty()) {
    std::filesystem::create_directories(opt.out);
    const auto lines = fedrand::compare_records(rows);
    std::ofstream os(std::filesystem::path(opt.out) / "comparison.jsonl",
                     std::ios::binary | std::ios::trunc);
    if (!os) throw fedrand::IoError("cannot write comparison records under " + opt.out);
    for (const auto& line : lines) os << line.dump() << '\n';
    std::ofstream ts(std::filesystem::path(opt.out) / "comparison.txt",
                     std::ios::binary | std::ios::trunc);
    ts << fedrand::compare_table_text(rows);
  }
  return kExitOk;
}

int cmd_attack(const std::string& run_dir) {
  fedrand::OfflineAttackResult result = fedrand::attack_run_dir(run_dir);
  std::cout << fedrand::attack_report_text(result);
  const std::filesystem::path dir(run_dir);
  std::ofstream js(dir / fedrand::artifacts::kAttackJson, std::ios::binary | std::ios::trunc);
  if (!js) throw fedrand::IoError("cannot write attack report under " + run_dir);
  js << fedrand::attack_report_json(result).dump(2) << '\n';
  std::ofstream ts(dir / fedrand::artifacts::kAttackText, std::ios::binary | std::ios::trunc);
  ts << fedrand::attack_report_text(result);
  if (!result.tamper_check_ok) {
    std::cerr << "warning: config hash mismatch between spec.json and trace header\n";
    return kExitInvariant;
  }
  return kExitOk;
}

int cmd_report(const std::string& run_dir) {
  const std::filesystem::path path = std::filesystem::path(run_dir) / fedrand::artifacts::kReportJson;
  std::ifstream is(path);
  if (!is) throw fedrand::IoError("no completed report at " + path.string());
  const auto j = nlohmann::json::parse(is);
  std::cout << "run " << j.value("method", "?") << " seed " << j.value("seed", 0ull) << " ("
            << j.value("rounds", 0ull) << " rounds)\n";
  std::cout << "  config hash            " << j.value("config_hash", "?") << "\n";
  std::cout << "  final server eval loss " << j.value("final_server_eval_loss", 0.0) << "\n";
  if (j.contains("client_eval_loss")) {
    const auto& c = j["client_eval_loss"];
    std::cout << "  client eval loss       " << c.value("mean", 0.0) << " ("
              << c.value("stddev", 0.0) << ") over " << c.value("count", 0ull) << " clients\n";
  }
  if (j.contains("comm")) {
    std::cout << "  comm ratio vs fedavg   " << j["comm"].value("ratio_vs_fedavg", 1.0) << "\n";
  }
  if (j.contains("mia")) {
    std::cout << "  mia auroc:\n";
    for (const auto& r : j["mia"]) {
      std::cout << "    " << r.value("target", "?") << " K=" << r.value("k", 0.0)
                << " q=" << r.value("q", 0.0) << " span=" << r.value("span", "?")
                << " auroc=" << r.value("auroc", 0.0) << "\n";
    }
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"fedrand: deterministic federated LoRA simulator with an MIA harness"};
  app.require_subcommand(1);

  CliOptions opt;
  std::string preset = "standard";
  std::string run_dir;

  CLI::App* run = app.add_subcommand("run", "run one experiment and persist its artifacts");
  add_spec_flags(run, opt);
  run->add_option("--out", opt.out, "output directory")->required();

  CLI::App* compare = app.add_subcommand("compare", "sweep methods across seeds");
  add_spec_flags(compare, opt);
  compare->add_option("--seeds", opt.seeds, "seed list for the sweep");
  compare->add_option("--preset", preset, "standard | ablation")
      ->check(CLI::IsMember({"standard", "ablation"}));
  compare->add_option("--out", opt.out, "directory for comparison records");

  CLI::App* attack = app.add_subcommand("attack", "replay the MIA over a persisted run");
  attack->add_option("--run", run_dir, "run directory")->required();

  CLI::App* report = app.add_subcommand("report", "re-print the report of a persisted run");
  report->add_option("--run", run_dir, "run directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }

  try {
    if (run->parsed()) return cmd_run(run, opt);
    if (compare->parsed()) return cmd_compare(compare, opt, preset);
    if (attack->parsed()) return cmd_attack(run_dir);
    if (report->parsed()) return cmd_report(run_dir);
  } catch (const fedrand::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const fedrand::ArgumentError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const fedrand::IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return kExitIo;
  } catch (const fedrand::Error& e) {
    std::cerr << "invariant violation: " << e.what() << "\n";
    return kExitInvariant;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitInvariant;
  }
  return kExitOk;
}
