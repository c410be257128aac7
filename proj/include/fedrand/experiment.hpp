// SPDX-License-Identifier: Apache-2.0
#ifndef FEDRAND_EXPERIMENT_HPP
#define FEDRAND_EXPERIMENT_HPP

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "fedrand/checkpoint.hpp"
#include "fedrand/data.hpp"
#include "fedrand/errors.hpp"
#include "fedrand/mia.hpp"
#include "fedrand/model.hpp"
#include "fedrand/protocol.hpp"
#include "fedrand/rng.hpp"

namespace fedrand {

using nlohmann::json;

struct DataParams {
  std::size_t num_classes = 6;
  std::size_t per_class = 200;
  std::size_t eval_per_class = 50;
  std::size_t seq_len = 24;
  double dirichlet_alpha = 0.5;
};

struct MiaParams {
  std::size_t count_per_side = 300;
  std::vector<double> k_percents{0.0, 10.0};
  std::vector<double> qs{0.5, 1.0};
};

// Everything that defines one experiment. Serializing and re-running a spec
// with the same seed reproduces every artifact byte for byte.
struct ExperimentSpec {
  FederationConfig fed;
  ModelDims model;
  DataParams data;
  MiaParams mia;
  std::uint64_t seed = 1;
  std::vector<std::uint64_t> seeds;  // sweep list for compare; empty means {seed}

  std::vector<std::uint64_t> sweep_seeds() const {
    return seeds.empty() ? std::vector<std::uint64_t>{seed} : seeds;
  }

  void validate() const {
    fed.validate(model.num_layers);
    if (model.vocab_size < 4 * data.num_classes) {
      throw ConfigError("spec: vocab size " + std::to_string(model.vocab_size) +
                        " too small for " + std::to_string(data.num_classes) + " classes");
    }
    if (model.lora_rank >= model.embed_dim) {
      throw ConfigError("spec: LoRA rank must be below the embedding dim");
    }
    if (data.seq_len < 4) throw ConfigError("spec: sequence length must be >= 4");
    if (!(data.dirichlet_alpha > 0.0)) {
      throw ConfigError("spec: dirichlet concentration must be positive");
    }
    if (data.per_class == 0 || data.eval_per_class == 0) {
      throw ConfigError("spec: per-class counts must be positive");
    }
    if (mia.count_per_side == 0 ||
        mia.count_per_side > data.num_classes * data.per_class) {
      throw ConfigError("spec: MIA count per side must be in [1, |corpus|]");
    }
  }

  CorpusParams corpus_params() const {
    return {data.num_classes, data.per_class, data.seq_len, model.vocab_size};
  }
};

// ---------------------------------------------------------------------------
// JSON round-trips
// ---------------------------------------------------------------------------

inline void to_json(json& j, const Ablations& a) {
  j = json{{"no_normalization", a.no_normalization},
           {"no_past_params", a.no_past_params},
           {"send_both_halves", a.send_both_halves}};
}
inline void from_json(const json& j, Ablations& a) {
  a.no_normalization = j.value("no_normalization", false);
  a.no_past_params = j.value("no_past_params", false);
  a.send_both_halves = j.value("send_both_halves", false);
}

inline void to_json(json& j, const FederationConfig& c) {
  j = json{{"clients", c.num_clients},
           {"participants", c.participants_per_round},
           {"rounds", c.rounds},
           {"rho", c.rho},
           {"lr", c.lr},
           {"epochs", c.local_epochs},
           {"batch_size", c.batch_size},
           {"weight_decay", c.weight_decay},
           {"init_std", c.init_std},
           {"method", method_name(c.method)},
           {"fedper_shared_layers", c.fedper_shared_layers},
           {"ablations", c.ablations}};
}
inline void from_json(const json& j, FederationConfig& c) {
  c.num_clients = j.at("clients").get<std::size_t>();
  c.participants_per_round = j.at("participants").get<std::size_t>();
  c.rounds = j.at("rounds").get<std::size_t>();
  c.rho = j.at("rho").get<double>();
  c.lr = j.at("lr").get<double>();
  c.local_epochs = j.at("epochs").get<std::size_t>();
  c.batch_size = j.at("batch_size").get<std::size_t>();
  c.weight_decay = j.value("weight_decay", 1e-6);
  c.init_std = j.value("init_std", 0.02);
  c.method = method_from_name(j.at("method").get<std::string>());
  c.fedper_shared_layers = j.value("fedper_shared_layers", std::size_t{2});
  if (j.contains("ablations")) c.ablations = j.at("ablations").get<Ablations>();
}

inline void to_json(json& j, const ModelDims& m) {
  j = json{{"vocab_size", m.vocab_size},
           {"embed_dim", m.embed_dim},
           {"num_layers", m.num_layers},
           {"lora_rank", m.lora_rank}};
}
inline void from_json(const json& j, ModelDims& m) {
  m.vocab_size = j.at("vocab_size").get<std::size_t>();
  m.embed_dim = j.at("embed_dim").get<std::size_t>();
  m.num_layers = j.at("num_layers").get<std::size_t>();
  m.lora_rank = j.at("lora_rank").get<std::size_t>();
}

inline void to_json(json& j, const DataParams& d) {
  j = json{{"num_classes", d.num_classes},
           {"per_class", d.per_class},
           {"eval_per_class", d.eval_per_class},
           {"seq_len", d.seq_len},
           {"dirichlet", d.dirichlet_alpha}};
}
inline void from_json(const json& j, DataParams& d) {
  d.num_classes = j.at("num_classes").get<std::size_t>();
  d.per_class = j.at("per_class").get<std::size_t>();
  d.eval_per_class = j.at("eval_per_class").get<std::size_t>();
  d.seq_len = j.at("seq_len").get<std::size_t>();
  d.dirichlet_alpha = j.at("dirichlet").get<double>();
}

inline void to_json(json& j, const MiaParams& m) {
  j = json{{"count_per_side", m.count_per_side}, {"k_percents", m.k_percents}, {"qs", m.qs}};
}
inline void from_json(const json& j, MiaParams& m) {
  m.count_per_side = j.at("count_per_side").get<std::size_t>();
  m.k_percents = j.at("k_percents").get<std::vector<double>>();
  m.qs = j.at("qs").get<std::vector<double>>();
}

inline void to_json(json& j, const ExperimentSpec& s) {
  j = json{{"federation", s.fed}, {"model", s.model}, {"data", s.data},
           {"mia", s.mia},       {"seed", s.seed}};
  if (!s.seeds.empty()) j["seeds"] = s.seeds;
}
inline void from_json(const json& j, ExperimentSpec& s) {
  s.fed = j.at("federation").get<FederationConfig>();
  s.model = j.at("model").get<ModelDims>();
  s.data = j.at("data").get<DataParams>();
  s.mia = j.at("mia").get<MiaParams>();
  s.seed = j.at("seed").get<std::uint64_t>();
  s.seeds = j.value("seeds", std::vector<std::uint64_t>{});
}

inline void to_json(json& j, const AttackRecord& r) {
  j = json{{"target", r.target},       {"k", r.k_percent},
           {"q", r.q},                 {"span", r.span},
           {"auroc", r.auroc_value},   {"n_members", r.n_members},
           {"n_nonmembers", r.n_nonmembers}};
}
inline void from_json(const json& j, AttackRecord& r) {
  r.target = j.at("target").get<std::string>();
  r.k_percent = j.at("k").get<double>();
  r.q = j.at("q").get<double>();
  r.span = j.at("span").get<std::string>();
  r.auroc_value = j.at("auroc").get<double>();
  r.n_members = j.at("n_members").get<std::size_t>();
  r.n_nonmembers = j.at("n_nonmembers").get<std::size_t>();
}

// Hash of the canonical spec serialization; keys are sorted by construction.
inline std::string spec_hash(const ExperimentSpec& spec) {
  return to_hex(checksum_string(json(spec).dump()));
}

// ---------------------------------------------------------------------------
// Run results
// ---------------------------------------------------------------------------

struct ReconstructionSummary {
  int client = -1;
  bool ok = false;
  long a_round = -1;
  long b_round = -1;
  long staleness_gap = 0;
  std::string failure_reason;
};

struct ExperimentResult {
  ExperimentSpec spec;
  std::string config_hash;
  FederationResult fed;
  double final_server_eval_loss = 0.0;
  double client_eval_mean = 0.0;
  double client_eval_stddev = 0.0;
  std::size_t client_eval_count = 0;
  CommCost cost;
  std::vector<AttackRecord> server_attack;
  std::vector<AttackRecord> client_attack;  // averaged over reconstructable clients
  std::size_t reconstructable_clients = 0;
  std::vector<ReconstructionSummary> reconstructions;
  double wall_seconds = 0.0;
};

namespace detail {

inline std::pair<double, double> mean_stddev(const std::vector<double>& xs) {
  if (xs.empty()) return {0.0, 0.0};
  double mean = 0.0;
  for (double x : xs) mean += x;
  mean /= static_cast<double>(xs.size());
  double var = 0.0;
  for (double x : xs) var += (x - mean) * (x - mean);
  var /= static_cast<double>(xs.size());
  return {mean, std::sqrt(var)};
}

inline double median(std::vector<double> xs) {
  if (xs.empty()) throw ArgumentError("median of empty set");
  std::sort(xs.begin(), xs.end());
  const std::size_t n = xs.size();
  return (n % 2 == 1) ? xs[n / 2] : 0.5 * (xs[n / 2 - 1] + xs[n / 2]);
}

// Averages AUROC cell-by-cell across per-client attack tables.
inline std::vector<AttackRecord> average_attack_records(
    const std::vector<std::vector<AttackRecord>>& tables, const std::string& target) {
  std::vector<AttackRecord> out;
  if (tables.empty()) return out;
  out = tables.front();
  for (auto& r : out) {
    r.target = target;
    r.auroc_value = 0.0;
  }
  for (const auto& table : tables) {
    for (std::size_t i = 0; i < table.size(); ++i) out[i].auroc_value += table[i].auroc_value;
  }
  for (auto& r : out) r.auroc_value /= static_cast<double>(tables.size());
  return out;
}

// Audits run artifacts against the protocol's privacy contract.
inline void audit_privacy(const ExperimentSpec& spec, const FederationResult& fed) {
  if (spec.fed.method != Method::FedRand) return;
  if (spec.fed.ablations.send_both_halves) return;
  std::map<std::pair<std::size_t, int>, std::set<char>> families;
  for (const auto& entry : fed.interceptions) {
    auto& fams = families[{entry.round, entry.client}];
    fams.insert(entry.family);
    if (fams.size() > 1) {
      throw ProtocolError("privacy invariant violated: client " +
                          std::to_string(entry.client) + " sent both families in round " +
                          std::to_string(entry.round));
    }
  }
}

}  // namespace detail

// Builds all deterministic inputs of a run from the master seed.
struct RunInputs {
  TokenCorpusGenerator generator;
  Corpus train;
  Corpus eval;
  std::vector<ClientDataset> partition;
  std::shared_ptr<const BaseWeights> base;
  MiaSplit mia_split;
};

inline RunInputs prepare_inputs(const ExperimentSpec& spec) {
  RngStream master(spec.seed);
  TokenCorpusGenerator gen(master.child("data"), spec.corpus_params());
  Corpus train = gen.generate("train", spec.data.per_class);
  Corpus eval = gen.generate("eval", spec.data.eval_per_class);
  auto partition = dirichlet_partition(train, spec.fed.num_clients, spec.data.dirichlet_alpha,
                                       master.child("partition"));
  auto base = BaseWeights::random(master.child("model"), spec.model);
  MiaSplit split = make_mia_split(train, gen, spec.mia.count_per_side, master.child("mia"));
  return RunInputs{std::move(gen), std::move(train),     std::move(eval),
                   std::move(partition), std::move(base), std::move(split)};
}

inline ExperimentResult run_experiment(const ExperimentSpec& spec) {
  spec.validate();
  const auto t0 = std::chrono::steady_clock::now();

  ExperimentResult result;
  result.spec = spec;
  result.config_hash = spec_hash(spec);

  RunInputs inputs = prepare_inputs(spec);
  RngStream master(spec.seed);
  result.fed = run_federation(spec.fed, inputs.train, inputs.partition, inputs.eval, inputs.base,
                              spec.model.lora_rank, master.child("federation"));
  detail::audit_privacy(spec, result.fed);

  result.final_server_eval_loss = result.fed.history.back().server_eval_loss;
  result.cost = comm_cost(spec.fed.method, spec.fed, spec.model);

  // Per-client personalized models, evaluated on the shared eval set.
  std::vector<std::size_t> eval_ids(inputs.eval.size());
  for (std::size_t i = 0; i < eval_ids.size(); ++i) eval_ids[i] = i;
  const Batch eval_batch = batch_view(inputs.eval, eval_ids);
  std::vector<double> client_losses;
  for (const auto& state : result.fed.clients) {
    auto weights = client_model_weights(*inputs.base, state, spec.fed.method);
    if (weights) client_losses.push_back(loss_with_weights(*inputs.base, *weights, eval_batch));
  }
  auto [cmean, cstd] = detail::mean_stddev(client_losses);
  result.client_eval_mean = cmean;
  result.client_eval_stddev = cstd;
  result.client_eval_count = client_losses.size();

  // Scenario (a): the server attacks with its aggregated model.
  AttackOptions options;
  options.k_percents = spec.mia.k_percents;
  options.qs = spec.mia.qs;
  result.server_attack = attack_model(
      *inputs.base, server_model_weights(*inputs.base, result.fed.server), inputs.mia_split,
      options, "server");

  // Scenario (b): the server stitches client models from the interception log.
  std::vector<std::vector<AttackRecord>> client_tables;
  for (const auto& state : result.fed.clients) {
    Reconstruction rec = reconstruct_client(result.fed.interceptions, state.client_id,
                                            spec.model.num_layers, spec.fed.method);
    ReconstructionSummary summary;
    summary.client = state.client_id;
    summary.ok = rec.ok;
    summary.a_round = rec.a_round;
    summary.b_round = rec.b_round;
    summary.staleness_gap = rec.staleness_gap;
    summary.failure_reason = rec.failure_reason;
    result.reconstructions.push_back(summary);
    if (!rec.ok) continue;
    ModelParams stitched{inputs.base, rec.adapters};
    client_tables.push_back(attack_model(*inputs.base, stitched.effective_weights(),
                                         inputs.mia_split, options, "client"));
  }
  result.reconstructable_clients = client_tables.size();
  result.client_attack = detail::average_attack_records(client_tables, "client");

  result.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return result;
}

// ---------------------------------------------------------------------------
// Artifact persistence
// ---------------------------------------------------------------------------

namespace artifacts {

constexpr const char* kSpecFile = "spec.json";
constexpr const char* kTraceFile = "trace.jsonl";
constexpr const char* kPartitionFile = "partition.jsonl";
constexpr const char* kInterceptionsFile = "interceptions.jsonl";
constexpr const char* kInterceptedDir = "intercepted";
constexpr const char* kMiaSplitFile = "mia_split.jsonl";
constexpr const char* kServerCkpt = "final_server.ckpt";
constexpr const char* kClientsDir = "clients";
constexpr const char* kReportJson = "report.json";
constexpr const char* kReportText = "report.txt";
constexpr const char* kAttackJson = "attack_report.json";
constexpr const char* kAttackText = "attack_report.txt";

}  // namespace artifacts

namespace detail {

inline std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open for writing: " + path.string());
  return os;
}

inline void write_lines(const std::filesystem::path& path, const std::vector<json>& lines) {
  auto os = open_out(path);
  for (const auto& j : lines) os << j.dump() << '\n';
  if (!os) throw IoError("write failed: " + path.string());
}

inline std::vector<json> read_lines(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("missing artifact: " + path.string());
  std::vector<json> out;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    out.push_back(json::parse(line));
  }
  return out;
}

inline NamedMatrices adapters_to_named(const AdapterStack& stack) {
  NamedMatrices named;
  for (std::size_t l = 0; l < stack.size(); ++l) {
    named.emplace(layer_name(l) + ".A", stack[l].a);
    named.emplace(layer_name(l) + ".B", stack[l].b);
  }
  return named;
}

inline AdapterStack named_to_adapters(const NamedMatrices& named, std::size_t num_layers) {
  AdapterStack stack;
  stack.reserve(num_layers);
  for (std::size_t l = 0; l < num_layers; ++l) {
    auto a = named.find(layer_name(l) + ".A");
    auto b = named.find(layer_name(l) + ".B");
    if (a == named.end() || b == named.end()) {
      throw IoError("checkpoint is missing adapter entries for layer " + std::to_string(l));
    }
    stack.push_back({a->second, b->second});
  }
  return stack;
}

inline std::string intercept_ref(const InterceptionRecord& entry) {
  std::ostringstream name;
  name << artifacts::kInterceptedDir << "/r" << std::setw(4) << std::setfill('0') << entry.round
       << "_c" << std::setw(3) << std::setfill('0') << entry.client << "_" << entry.family
       << ".ckpt";
  return name.str();
}

}  // namespace detail

inline json report_json(const ExperimentResult& result) {
  json j;
  j["schema"] = "fedrand/report/v1";
  j["seed"] = result.spec.seed;
  j["method"] = method_name(result.spec.fed.method);
  j["config_hash"] = result.config_hash;
  j["rounds"] = result.spec.fed.rounds;
  j["final_server_eval_loss"] = result.final_server_eval_loss;
  j["client_eval_loss"] = {{"mean", result.client_eval_mean},
                           {"stddev", result.client_eval_stddev},
                           {"count", result.client_eval_count}};
  j["comm"] = {{"per_round_down", result.cost.per_round_down},
               {"per_round_up", result.cost.per_round_up},
               {"ratio_vs_fedavg", result.cost.ratio_vs_fedavg},
               {"total_down", result.fed.ledger.total_down()},
               {"total_up", result.fed.ledger.total_up()}};
  j["mia"] = json::array();
  for (const auto& r : result.server_attack) j["mia"].push_back(r);
  for (const auto& r : result.client_attack) j["mia"].push_back(r);
  j["reconstructable_clients"] = result.reconstructable_clients;
  j["reconstruction"] = json::array();
  for (const auto& r : result.reconstructions) {
    j["reconstruction"].push_back({{"client", r.client},
                                   {"ok", r.ok},
                                   {"a_round", r.a_round},
                                   {"b_round", r.b_round},
                                   {"staleness_gap", r.staleness_gap},
                                   {"reason", r.failure_reason}});
  }
  j["wall_seconds"] = result.wall_seconds;
  return j;
}

inline std::string report_text(const ExperimentResult& result) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(4);
  os << "run summary (" << method_name(result.spec.fed.method) << ", seed " << result.spec.seed
     << ")\n";
  os << "  rounds                 " << result.spec.fed.rounds << "\n";
  os << "  final server eval loss " << result.final_server_eval_loss << "\n";
  os << "  client eval loss       " << result.client_eval_mean << " (" << result.client_eval_stddev
     << ") over " << result.client_eval_count << " clients\n";
  os << "  comm ratio vs fedavg   " << result.cost.ratio_vs_fedavg << "\n";
  os << "  reconstructable        " << result.reconstructable_clients << "/"
     << result.spec.fed.num_clients << " clients\n";
  os << "  mia auroc:\n";
  auto emit = [&os](const std::vector<AttackRecord>& records) {
    for (const auto& r : records) {
      os << "    " << std::left << std::setw(7) << r.target << " K=" << std::setw(5)
         << r.k_percent << " q=" << std::setw(4) << r.q << " span=" << std::setw(7) << r.span
         << " auroc=" << r.auroc_value << "\n";
    }
  };
  emit(result.server_attack);
  emit(result.client_attack);
  return os.str();
}

// Writes every artifact of a finished run. The JSON report lands last and
// atomically; its presence marks the run complete.
inline void write_run_artifacts(const ExperimentResult& result, const RunInputs& inputs,
                                const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir / artifacts::kInterceptedDir, ec);
  fs::create_directories(dir / artifacts::kClientsDir, ec);
  if (ec) throw IoError("cannot create run directory: " + dir.string());

  {  // resolved spec, the provenance record
    auto os = detail::open_out(dir / artifacts::kSpecFile);
    os << json(result.spec).dump(2) << '\n';
  }

  {  // round trace
    std::vector<json> lines;
    lines.push_back({{"schema", "fedrand/trace/v1"},
                     {"seed", result.spec.seed},
                     {"method", method_name(result.spec.fed.method)},
                     {"config_hash", result.config_hash}});
    for (const auto& r : result.fed.history) {
      json participants = json::array();
      json sides = json::object();
      json losses = json::object();
      for (const auto& p : r.participants) {
        participants.push_back(p.client);
        if (p.a >= 0) sides[std::to_string(p.client)] = p.a;
        losses[std::to_string(p.client)] = p.train_loss;
      }
      lines.push_back({{"round", r.round},
                       {"participants", participants},
                       {"a", sides},
                       {"train_loss", losses},
                       {"server_eval_loss", r.server_eval_loss},
                       {"comm_down", r.comm_down},
                       {"comm_up", r.comm_up}});
    }
    detail::write_lines(dir / artifacts::kTraceFile, lines);
  }

  {  // corpus partition export
    std::vector<json> lines;
    lines.push_back({{"schema", "fedrand/partition/v1"},
                     {"clients", result.spec.fed.num_clients},
                     {"dirichlet", result.spec.data.dirichlet_alpha}});
    for (const auto& client : inputs.partition) {
      for (std::size_t idx : client.indices) {
        const auto& seq = inputs.train.sequences[idx];
        lines.push_back(
            {{"client_id", client.client_id}, {"class", seq.label}, {"tokens", seq.tokens}});
      }
    }
    detail::write_lines(dir / artifacts::kPartitionFile, lines);
  }

  {  // interception log + value files
    std::vector<json> lines;
    lines.push_back({{"schema", "fedrand/interceptions/v1"},
                     {"config_hash", result.config_hash}});
    for (const auto& entry : result.fed.interceptions) {
      const std::string ref = detail::intercept_ref(entry);
      NamedMatrices named;
      for (std::size_t i = 0; i < entry.matrices.size(); ++i) {
        named.emplace(layer_name(entry.first_layer + i), entry.matrices[i]);
      }
      save_checkpoint(dir / ref, named);
      lines.push_back({{"round", entry.round},
                       {"client", entry.client},
                       {"family", std::string(1, entry.family)},
                       {"first_layer", entry.first_layer},
                       {"checksum", to_hex(entry.checksum)},
                       {"ref", ref}});
    }
    detail::write_lines(dir / artifacts::kInterceptionsFile, lines);
  }

  {  // member / non-member split
    std::vector<json> lines;
    lines.push_back({{"schema", "fedrand/mia_split/v1"},
                     {"count_per_side", result.spec.mia.count_per_side}});
    for (std::size_t i = 0; i < inputs.mia_split.members.size(); ++i) {
      lines.push_back({{"side", "member"},
                       {"id", inputs.mia_split.member_ids[i]},
                       {"tokens", inputs.mia_split.members[i]}});
    }
    for (std::size_t i = 0; i < inputs.mia_split.nonmembers.size(); ++i) {
      lines.push_back({{"side", "nonmember"}, {"id", i}, {"tokens", inputs.mia_split.nonmembers[i]}});
    }
    detail::write_lines(dir / artifacts::kMiaSplitFile, lines);
  }

  save_checkpoint(dir / artifacts::kServerCkpt,
                  detail::adapters_to_named(result.fed.server.adapters));
  for (const auto& state : result.fed.clients) {
    if (state.cache) {
      save_checkpoint(dir / artifacts::kClientsDir /
                          ("client_" + std::to_string(state.client_id) + ".ckpt"),
                      detail::adapters_to_named(*state.cache));
    } else if (state.fedpara) {
      NamedMatrices named = detail::adapters_to_named(state.fedpara->global);
      NamedMatrices priv = detail::adapters_to_named(state.fedpara->priv);
      for (auto& [k, v] : priv) named.emplace("private." + k, std::move(v));
      save_checkpoint(dir / artifacts::kClientsDir /
                          ("client_" + std::to_string(state.client_id) + ".ckpt"),
                      named);
    }
  }

  {  // human-readable summary, then the completion-marking JSON report
    auto os = detail::open_out(dir / artifacts::kReportText);
    os << report_text(result);
  }
  const fs::path tmp = dir / (std::string(artifacts::kReportJson) + ".tmp");
  {
    auto os = detail::open_out(tmp);
    os << report_json(result).dump(2) << '\n';
  }
  fs::rename(tmp, dir / artifacts::kReportJson, ec);
  if (ec) throw IoError("cannot finalize report: " + ec.message());
}

inline ExperimentResult run_and_persist(const ExperimentSpec& spec,
                                        const std::filesystem::path& dir) {
  ExperimentResult result = run_experiment(spec);
  RunInputs inputs = prepare_inputs(spec);
  write_run_artifacts(result, inputs, dir);
  return result;
}

// ---------------------------------------------------------------------------
// Offline attack over a persisted run directory
// ---------------------------------------------------------------------------

struct OfflineAttackResult {
  std::string config_hash;
  bool tamper_check_ok = false;
  std::vector<AttackRecord> server_attack;
  std::vector<AttackRecord> client_attack;
  std::size_t reconstructable_clients = 0;
  std::vector<ReconstructionSummary> reconstructions;
};

inline OfflineAttackResult attack_run_dir(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  if (!fs::exists(dir / artifacts::kSpecFile)) {
    throw IoError("attack: missing " + (dir / artifacts::kSpecFile).string());
  }
  if (!fs::exists(dir / artifacts::kInterceptionsFile)) {
    throw IoError("attack: missing " + (dir / artifacts::kInterceptionsFile).string());
  }
  if (!fs::exists(dir / artifacts::kServerCkpt)) {
    throw IoError("attack: missing " + (dir / artifacts::kServerCkpt).string());
  }
  if (!fs::exists(dir / artifacts::kMiaSplitFile)) {
    throw IoError("attack: missing " + (dir / artifacts::kMiaSplitFile).string());
  }

  std::ifstream spec_is(dir / artifacts::kSpecFile);
  ExperimentSpec spec = json::parse(spec_is).get<ExperimentSpec>();
  spec.validate();

  OfflineAttackResult out;
  out.config_hash = spec_hash(spec);

  // Tamper check: the persisted trace header must carry the same config hash
  // as the spec we just re-serialized.
  const auto trace_lines = detail::read_lines(dir / artifacts::kTraceFile);
  out.tamper_check_ok =
      !trace_lines.empty() && trace_lines.front().value("config_hash", "") == out.config_hash;

  // The attacker rebuilds only public knowledge: base weights from the seed,
  // the published split, the intercepted values.
  RngStream master(spec.seed);
  auto base = BaseWeights::random(master.child("model"), spec.model);

  MiaSplit split;
  for (const auto& line : detail::read_lines(dir / artifacts::kMiaSplitFile)) {
    if (!line.contains("side")) continue;
    const auto tokens = line.at("tokens").get<TokenSeq>();
    if (line.at("side") == "member") {
      split.member_ids.push_back(line.at("id").get<std::size_t>());
      split.members.push_back(tokens);
    } else {
      split.nonmembers.push_back(tokens);
    }
  }
  if (split.members.empty() || split.nonmembers.empty()) {
    throw IoError("attack: split file has no usable records");
  }

  InterceptionLog log;
  for (const auto& line : detail::read_lines(dir / artifacts::kInterceptionsFile)) {
    if (!line.contains("round")) continue;
    InterceptionRecord entry;
    entry.round = line.at("round").get<std::size_t>();
    entry.client = line.at("client").get<int>();
    entry.family = line.at("family").get<std::string>().at(0);
    entry.first_layer = line.at("first_layer").get<std::size_t>();
    const std::string ref = line.at("ref").get<std::string>();
    NamedMatrices named = load_checkpoint(dir / ref);
    for (const auto& [name, m] : named) {
      (void)name;
      entry.matrices.push_back(m);
    }
    entry.checksum = checksum(named);
    const std::string logged = line.at("checksum").get<std::string>();
    if (to_hex(entry.checksum) != logged) {
      throw IoError("attack: checksum mismatch for " + ref);
    }
    log.push_back(std::move(entry));
  }

  AttackOptions options;
  options.k_percents = spec.mia.k_percents;
  options.qs = spec.mia.qs;

  NamedMatrices server_named = load_checkpoint(dir / artifacts::kServerCkpt);
  AdapterStack server_adapters = detail::named_to_adapters(server_named, spec.model.num_layers);
  ServerState server;
  server.adapters = server_adapters;
  out.server_attack =
      attack_model(*base, server_model_weights(*base, server), split, options, "server");

  std::vector<std::vector<AttackRecord>> client_tables;
  for (std::size_t k = 0; k < spec.fed.num_clients; ++k) {
    Reconstruction rec =
        reconstruct_client(log, static_cast<int>(k), spec.model.num_layers, spec.fed.method);
    ReconstructionSummary summary;
    summary.client = static_cast<int>(k);
    summary.ok = rec.ok;
    summary.a_round = rec.a_round;
    summary.b_round = rec.b_round;
    summary.staleness_gap = rec.staleness_gap;
    summary.failure_reason = rec.failure_reason;
    out.reconstructions.push_back(summary);
    if (!rec.ok) continue;
    ModelParams stitched{base, rec.adapters};
    client_tables.push_back(
        attack_model(*base, stitched.effective_weights(), split, options, "client"));
  }
  out.reconstructable_clients = client_tables.size();
  out.client_attack = detail::average_attack_records(client_tables, "client");
  return out;
}

inline json attack_report_json(const OfflineAttackResult& result) {
  json j;
  j["schema"] = "fedrand/attack/v1";
  j["config_hash"] = result.config_hash;
  j["tamper_check_ok"] = result.tamper_check_ok;
  j["mia"] = json::array();
  for (const auto& r : result.server_attack) j["mia"].push_back(r);
  for (const auto& r : result.client_attack) j["mia"].push_back(r);
  j["reconstructable_clients"] = result.reconstructable_clients;
  j["reconstruction"] = json::array();
  for (const auto& r : result.reconstructions) {
    j["reconstruction"].push_back({{"client", r.client},
                                   {"ok", r.ok},
                                   {"a_round", r.a_round},
                                   {"b_round", r.b_round},
                                   {"staleness_gap", r.staleness_gap},
                                   {"reason", r.failure_reason}});
  }
  return j;
}

inline std::string attack_report_text(const OfflineAttackResult& result) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(4);
  os << "membership inference attack report\n";
  os << "  config hash   " << result.config_hash << (result.tamper_check_ok ? "  (verified)" : "  (MISMATCH)")
     << "\n";
  os << "  reconstructable clients: " << result.reconstructable_clients << "\n";
  for (const auto& r : result.reconstructions) {
    os << "    client " << std::setw(2) << r.client << ": ";
    if (r.ok) {
      os << "stitched A@r" << r.a_round << " with B@r" << r.b_round << " (staleness gap "
         << r.staleness_gap << ")";
    } else {
      os << "unreconstructable - " << r.failure_reason;
    }
    os << "\n";
  }
  os << "  auroc table:\n";
  auto emit = [&os](const std::vector<AttackRecord>& records) {
    for (const auto& r : records) {
      os << "    " << std::left << std::setw(7) << r.target << " K=" << std::setw(5)
         << r.k_percent << " q=" << std::setw(4) << r.q << " span=" << std::setw(7) << r.span
         << " auroc=" << r.auroc_value << "\n";
    }
  };
  emit(result.server_attack);
  emit(result.client_attack);
  return os.str();
}

// ---------------------------------------------------------------------------
// Method comparison sweeps
// ---------------------------------------------------------------------------

struct CompareVariant {
  std::string label;
  std::function<void(ExperimentSpec&)> apply;
};

inline std::vector<CompareVariant> standard_variants() {
  return {
      {"fedavg", [](ExperimentSpec& s) { s.fed.method = Method::FedAvg; }},
      {"fedrand", [](ExperimentSpec& s) { s.fed.method = Method::FedRand; }},
      {"fedper2",
       [](ExperimentSpec& s) {
         s.fed.method = Method::FedPer;
         s.fed.fedper_shared_layers = 2;
       }},
      {"fedper4",
       [](ExperimentSpec& s) {
         s.fed.method = Method::FedPer;
         s.fed.fedper_shared_layers = 4;
       }},
      {"fedpara", [](ExperimentSpec& s) { s.fed.method = Method::FedPara; }},
  };
}

inline std::vector<CompareVariant> ablation_variants() {
  return {
      {"rho=0.3",
       [](ExperimentSpec& s) {
         s.fed.method = Method::FedRand;
         s.fed.rho = 0.3;
       }},
      {"rho=0.7",
       [](ExperimentSpec& s) {
         s.fed.method = Method::FedRand;
         s.fed.rho = 0.7;
       }},
      {"no_past_params",
       [](ExperimentSpec& s) {
         s.fed.method = Method::FedRand;
         s.fed.ablations.no_past_params = true;
       }},
      {"no_normalization",
       [](ExperimentSpec& s) {
         s.fed.method = Method::FedRand;
         s.fed.ablations.no_normalization = true;
       }},
      {"fedrand", [](ExperimentSpec& s) { s.fed.method = Method::FedRand; }},
  };
}

struct CompareRow {
  std::string label;
  std::size_t num_seeds = 0;
  double server_loss_mean = 0.0, server_loss_stddev = 0.0;
  double client_loss_mean = 0.0, client_loss_stddev = 0.0;
  double comm_ratio = 1.0;
  double server_auroc_k0 = 0.0, server_auroc_k10 = 0.0;
  double client_auroc_k0 = 0.0, client_auroc_k10 = 0.0;
  bool has_client_auroc = false;
  std::vector<double> server_losses;  // per seed, for downstream statistics
};

namespace detail {

inline double find_auroc(const std::vector<AttackRecord>& records, double k, double q,
                         const std::string& span) {
  for (const auto& r : records) {
    if (r.k_percent == k && r.q == q && r.span == span) return r.auroc_value;
  }
  return std::numeric_limits<double>::quiet_NaN();
}

}  // namespace detail

inline std::vector<CompareRow> compare_methods(const ExperimentSpec& base_spec,
                                               const std::vector<CompareVariant>& variants,
                                               const std::vector<std::uint64_t>& seeds) {
  if (seeds.empty()) throw ConfigError("compare: need at least one seed");
  std::vector<CompareRow> rows;
  for (const auto& variant : variants) {
    CompareRow row;
    row.label = variant.label;
    row.num_seeds = seeds.size();
    std::vector<double> server_losses, client_losses, sk0, sk10, ck0, ck10;
    for (std::uint64_t seed : seeds) {
      ExperimentSpec spec = base_spec;
      spec.seeds.clear();
      variant.apply(spec);
      spec.seed = seed;
      ExperimentResult r = run_experiment(spec);
      server_losses.push_back(r.final_server_eval_loss);
      client_losses.push_back(r.client_eval_mean);
      row.comm_ratio = r.cost.ratio_vs_fedavg;
      sk0.push_back(detail::find_auroc(r.server_attack, 0.0, 0.5, "full"));
      sk10.push_back(detail::find_auroc(r.server_attack, 10.0, 0.5, "full"));
      if (!r.client_attack.empty()) {
        ck0.push_back(detail::find_auroc(r.client_attack, 0.0, 0.5, "full"));
        ck10.push_back(detail::find_auroc(r.client_attack, 10.0, 0.5, "full"));
      }
    }
    std::tie(row.server_loss_mean, row.server_loss_stddev) = detail::mean_stddev(server_losses);
    std::tie(row.client_loss_mean, row.client_loss_stddev) = detail::mean_stddev(client_losses);
    row.server_auroc_k0 = detail::mean_stddev(sk0).first;
    row.server_auroc_k10 = detail::mean_stddev(sk10).first;
    row.has_client_auroc = !ck0.empty();
    if (row.has_client_auroc) {
      row.client_auroc_k0 = detail::mean_stddev(ck0).first;
      row.client_auroc_k10 = detail::mean_stddev(ck10).first;
    }
    row.server_losses = std::move(server_losses);
    rows.push_back(std::move(row));
  }
  return rows;
}

inline std::string compare_table_text(const std::vector<CompareRow>& rows) {
  std::ostringstream os;
  os << std::left << std::setw(18) << "method" << std::right << std::setw(16) << "server loss"
     << std::setw(16) << "client loss" << std::setw(8) << "comm" << std::setw(10) << "srv K=0"
     << std::setw(10) << "srv K=10" << std::setw(10) << "cli K=0" << std::setw(10) << "cli K=10"
     << "\n";
  os << std::string(98, '-') << "\n";
  for (const auto& r : rows) {
    std::ostringstream sl, cl;
    sl << std::fixed << std::setprecision(4) << r.server_loss_mean << " (" << std::setprecision(3)
       << r.server_loss_stddev << ")";
    cl << std::fixed << std::setprecision(4) << r.client_loss_mean << " (" << std::setprecision(3)
       << r.client_loss_stddev << ")";
    os << std::left << std::setw(18) << r.label << std::right << std::setw(16) << sl.str()
       << std::setw(16) << cl.str() << std::fixed << std::setprecision(2) << std::setw(8)
       << r.comm_ratio << std::setprecision(4) << std::setw(10) << r.server_auroc_k0
       << std::setw(10) << r.server_auroc_k10;
    if (r.has_client_auroc) {
      os << std::setw(10) << r.client_auroc_k0 << std::setw(10) << r.client_auroc_k10;
    } else {
      os << std::setw(10) << "-" << std::setw(10) << "-";
    }
    os << "\n";
  }
  return os.str();
}

inline std::vector<json> compare_records(const std::vector<CompareRow>& rows) {
  std::vector<json> lines;
  lines.push_back({{"schema", "fedrand/compare/v1"}});
  for (const auto& r : rows) {
    json j = {{"label", r.label},
              {"seeds", r.num_seeds},
              {"server_loss_mean", r.server_loss_mean},
              {"server_loss_stddev", r.server_loss_stddev},
              {"client_loss_mean", r.client_loss_mean},
              {"client_loss_stddev", r.client_loss_stddev},
              {"comm_ratio", r.comm_ratio},
              {"server_auroc_k0", r.server_auroc_k0},
              {"server_auroc_k10", r.server_auroc_k10},
              {"server_losses", r.server_losses}};
    if (r.has_client_auroc) {
      j["client_auroc_k0"] = r.client_auroc_k0;
      j["client_auroc_k10"] = r.client_auroc_k10;
    }
    lines.push_back(std::move(j));
  }
  return lines;
}

}  // namespace fedrand

#endif  // FEDRAND_EXPERIMENT_HPP
