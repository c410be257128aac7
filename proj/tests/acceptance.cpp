// SPDX-License-Identifier: Apache-2.0
//
// Acceptance suite: one pass/fail line per criterion, nonzero exit if any
// criterion fails. Exact/analytic criteria run first, then the directional
// desk-scale experiments.

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>
#include <vector>

#include "fedrand/fedrand.hpp"

using namespace fedrand;
namespace fs = std::filesystem;

namespace {

double median(std::vector<double> xs) {
  std::sort(xs.begin(), xs.end());
  const std::size_t n = xs.size();
  return (n % 2 == 1) ? xs[n / 2] : 0.5 * (xs[n / 2 - 1] + xs[n / 2]);
}

std::string slurp(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("missing file: " + path.string());
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

// Default desk-scale task: the protocol defaults over the default corpus.
ExperimentSpec default_spec(std::uint64_t seed) {
  ExperimentSpec spec;
  spec.seed = seed;
  spec.mia.count_per_side = 60;  // these runs are scored on losses, keep MIA light
  spec.mia.qs = {0.5};
  return spec;
}

// Memorization-amplified task: five local epochs over small client shards.
ExperimentSpec amplified_spec(std::uint64_t seed) {
  ExperimentSpec spec;
  spec.seed = seed;
  spec.fed.local_epochs = 5;
  spec.fed.rounds = 20;
  spec.data.per_class = 60;
  spec.data.eval_per_class = 20;
  spec.mia.count_per_side = 200;
  spec.mia.qs = {0.5};
  return spec;
}

// Runs are shared between criteria through this cache.
std::map<std::string, ExperimentResult>& run_cache() {
  static std::map<std::string, ExperimentResult> cache;
  return cache;
}

const ExperimentResult& cached_run(const ExperimentSpec& spec) {
  const std::string key = spec_hash(spec);
  auto it = run_cache().find(key);
  if (it == run_cache().end()) {
    it = run_cache().emplace(key, run_experiment(spec)).first;
  }
  return it->second;
}

double client_auroc_k10(const ExperimentResult& result) {
  for (const auto& r : result.client_attack) {
    if (r.k_percent == 10.0 && r.q == 0.5 && r.span == "full") return r.auroc_value;
  }
  throw Error("no client-scenario AUROC at K=10, q=0.5");
}

// --- criterion 1 -----------------------------------------------------------
bool criterion_comm_ratio(std::ostream& os) {
  FederationConfig config;
  const ModelDims dims{64, 32, 4, 8};
  bool ok = comm_cost(Method::FedRand, config, dims).ratio_vs_fedavg == 0.75;
  ok = ok && comm_cost(Method::FedAvg, config, dims).ratio_vs_fedavg == 1.0;
  for (std::size_t n = 1; n <= dims.num_layers; ++n) {
    config.fedper_shared_layers = n;
    ok = ok && comm_cost(Method::FedPer, config, dims).ratio_vs_fedavg ==
                   static_cast<double>(n) / static_cast<double>(dims.num_layers);
  }
  os << "fedrand/fedavg = 0.75, fedper(N)/fedavg = N/L";
  return ok;
}

// --- criterion 2 -----------------------------------------------------------
bool criterion_normalization(std::ostream& os) {
  RngStream root(424242);
  double worst = 0.0;
  for (std::uint64_t trial = 0; trial < 1000; ++trial) {
    RngStream s = root.child(trial);
    const std::size_t k_prime = 1 + s.next_below(12);
    std::vector<ClientContribution> contribs;
    std::uint64_t a_n = 0, b_n = 0;
    for (std::size_t i = 0; i < k_prime; ++i) {
      ClientContribution c;
      c.client_id = static_cast<int>(i);
      c.a = s.next_double() < 0.5 ? 1 : 0;
      c.n = 1 + s.next_below(997);
      (c.a == 1 ? a_n : b_n) += c.n;
      FactorFamily ones{Matrix(1, 1, {1.0})};
      if (c.a == 1) c.a_fam = ones;
      else c.b_fam = ones;
      contribs.push_back(std::move(c));
    }
    AdapterStack server;
    server.push_back({Matrix(1, 1, {-5.0}), Matrix(1, 1, {9.0})});
    AdapterStack next = aggregate_fedrand(server, contribs, false);
    if (a_n > 0) {
      worst = std::max(worst, std::fabs(next[0].a(0, 0) - 1.0));
    } else if (next[0].a != server[0].a) {
      os << "A fallback failed to keep the server family";
      return false;
    }
    if (b_n > 0) {
      worst = std::max(worst, std::fabs(next[0].b(0, 0) - 1.0));
    } else if (next[0].b != server[0].b) {
      os << "B fallback failed to keep the server family";
      return false;
    }
  }
  os << "worst |coefficient sum - 1| = " << worst;
  return worst < 1e-12;
}

// --- criterion 3 -----------------------------------------------------------
bool criterion_fedavg_equivalence(std::ostream& os) {
  RngStream master(303);
  const ModelDims dims{32, 16, 2, 4};
  TokenCorpusGenerator gen(master.child("data"), CorpusParams{4, 48, 12, dims.vocab_size});
  const Corpus train = gen.generate("train", 48);
  const Corpus eval = gen.generate("eval", 12);
  const auto partition = dirichlet_partition(train, 6, 0.5, master.child("partition"));
  const auto base = BaseWeights::random(master.child("model"), dims);

  FederationConfig fedavg_cfg;
  fedavg_cfg.num_clients = 6;
  fedavg_cfg.participants_per_round = 3;
  fedavg_cfg.method = Method::FedAvg;
  FederationConfig degen_cfg = fedavg_cfg;
  degen_cfg.method = Method::FedRand;
  degen_cfg.ablations.send_both_halves = true;
  degen_cfg.ablations.no_past_params = true;

  // prefix-by-prefix: streams are keyed by round, so a shorter run is a
  // bitwise prefix of a longer one; comparing finals at every horizon checks
  // the whole trajectory.
  for (std::size_t rounds = 1; rounds <= 10; ++rounds) {
    fedavg_cfg.rounds = rounds;
    degen_cfg.rounds = rounds;
    auto a = run_federation(fedavg_cfg, train, partition, eval, base, dims.lora_rank,
                            RngStream(303).child("federation"));
    auto b = run_federation(degen_cfg, train, partition, eval, base, dims.lora_rank,
                            RngStream(303).child("federation"));
    for (std::size_t l = 0; l < dims.num_layers; ++l) {
      if (a.server.adapters[l].a != b.server.adapters[l].a ||
          a.server.adapters[l].b != b.server.adapters[l].b) {
        os << "trajectories diverge at round " << rounds;
        return false;
      }
    }
  }
  os << "10 rounds, 6 clients, bitwise identical at every horizon";
  return true;
}

// --- criterion 4 -----------------------------------------------------------
bool criterion_gradients(std::ostream& os) {
  const double h = 1e-5;
  double worst = 0.0;
  auto fd_check = [&](auto& params, Matrix& target, const Matrix& analytic, const Batch& batch) {
    for (std::size_t r = 0; r < target.rows(); ++r) {
      for (std::size_t c = 0; c < target.cols(); ++c) {
        const double orig = target(r, c);
        target(r, c) = orig + h;
        const double up = loss(params, batch);
        target(r, c) = orig - h;
        const double down = loss(params, batch);
        target(r, c) = orig;
        const double fd = (up - down) / (2.0 * h);
        const double an = analytic(r, c);
        const double scale = std::max(std::fabs(fd), std::fabs(an));
        if (scale < 1e-7) continue;
        worst = std::max(worst, std::fabs(fd - an) / scale);
      }
    }
  };

  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto base = BaseWeights::random(RngStream(9000 + seed), ModelDims{16, 8, 2, 4});
    RngStream s(9100 + seed);
    TokenSeq seq(8);
    for (auto& t : seq) t = static_cast<int>(s.next_below(16));
    const Batch batch{&seq};

    ModelParams params;
    params.base = base;
    for (std::size_t l = 0; l < 2; ++l) {
      RngStream ls = s.child(l);
      params.adapters.push_back({rand_normal(ls, 8, 4, 0.3), rand_normal(ls, 4, 8, 0.3)});
    }
    LoraGrads grads = grad(params, batch);
    for (std::size_t l = 0; l < 2; ++l) {
      fd_check(params, params.adapters[l].a, grads.layers[l].first, batch);
      fd_check(params, params.adapters[l].b, grads.layers[l].second, batch);
    }

    HadamardModelParams hp;
    hp.base = base;
    for (std::size_t l = 0; l < 2; ++l) {
      RngStream ls = s.child(100 + l);
      hp.global_adapters.push_back({rand_normal(ls, 8, 4, 0.3), rand_normal(ls, 4, 8, 0.3)});
      hp.private_adapters.push_back({rand_normal(ls, 8, 4, 0.3), rand_normal(ls, 4, 8, 0.3)});
    }
    HadamardGrads hgrads = grad(hp, batch);
    for (std::size_t l = 0; l < 2; ++l) {
      fd_check(hp, hp.global_adapters[l].a, hgrads.global_layers[l].first, batch);
      fd_check(hp, hp.global_adapters[l].b, hgrads.global_layers[l].second, batch);
      fd_check(hp, hp.private_adapters[l].a, hgrads.private_layers[l].first, batch);
      fd_check(hp, hp.private_adapters[l].b, hgrads.private_layers[l].second, batch);
    }
  }
  os << "20 seeds, worst relative error = " << worst;
  return worst < 1e-4;
}

// --- criterion 5 -----------------------------------------------------------
bool criterion_scoring(std::ostream& os) {
  RngStream root(515151);
  for (std::uint64_t trial = 0; trial < 100; ++trial) {
    RngStream s = root.child(trial);
    std::vector<double> profile(2 + s.next_below(30));
    for (double& v : profile) v = 4.0 * s.next_double();
    const double mx = *std::max_element(profile.begin(), profile.end());
    if (max_renyi_score(profile, 0.0) != mx) {
      os << "MaxRenyi-0% is not the positionwise maximum";
      return false;
    }
  }
  double worst = 0.0;
  for (std::uint64_t trial = 0; trial < 20; ++trial) {
    RngStream s = root.child("auroc", trial);
    std::vector<ScoreRecord> records;
    for (std::size_t i = 0; i < 50; ++i) {
      records.push_back({i, s.next_double() < 0.5, std::floor(s.next_double() * 12.0)});
    }
    bool has_m = false, has_n = false;
    for (const auto& r : records) (r.member ? has_m : has_n) = true;
    if (!has_m || !has_n) continue;
    double wins = 0.0;
    std::size_t nm = 0, nn = 0;
    for (const auto& m : records) {
      if (!m.member) continue;
      ++nm;
      for (const auto& n : records) {
        if (n.member) continue;
        if (m.score < n.score) wins += 1.0;
        else if (m.score == n.score) wins += 0.5;
      }
    }
    for (const auto& r : records) nn += r.member ? 0 : 1;
    const double oracle = wins / (static_cast<double>(nm) * static_cast<double>(nn));
    worst = std::max(worst, std::fabs(auroc(records) - oracle));
  }
  os << "max-0% exact on 100 profiles; worst AUROC deviation vs O(n^2) oracle = " << worst;
  return worst < 1e-12;
}

// --- criterion 6 -----------------------------------------------------------
bool criterion_utility_parity(std::ostream& os) {
  std::vector<double> fedrand_losses, fedavg_losses;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    ExperimentSpec fr = default_spec(seed);
    fr.fed.method = Method::FedRand;
    fedrand_losses.push_back(cached_run(fr).final_server_eval_loss);
    ExperimentSpec fa = default_spec(seed);
    fa.fed.method = Method::FedAvg;
    fedavg_losses.push_back(cached_run(fa).final_server_eval_loss);
  }
  const double med_fr = median(fedrand_losses);
  const double med_fa = median(fedavg_losses);
  const double rel = std::fabs(med_fr - med_fa) / med_fa;
  os << "median final eval loss fedrand = " << med_fr << ", fedavg = " << med_fa
     << ", relative gap = " << rel;
  return rel <= 0.10;
}

// --- criterion 7 -----------------------------------------------------------
bool criterion_privacy_ordering(std::ostream& os) {
  std::vector<double> fr_auroc, fa_auroc;
  int strict = 0;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    ExperimentSpec fr = amplified_spec(seed);
    fr.fed.method = Method::FedRand;
    ExperimentSpec fa = amplified_spec(seed);
    fa.fed.method = Method::FedAvg;
    const double a_fr = client_auroc_k10(cached_run(fr));
    const double a_fa = client_auroc_k10(cached_run(fa));
    fr_auroc.push_back(a_fr);
    fa_auroc.push_back(a_fa);
    if (a_fr < a_fa) ++strict;
  }
  const double med_fr = median(fr_auroc);
  const double med_fa = median(fa_auroc);
  os << "client-scenario MaxRenyi-10% AUROC median fedrand = " << med_fr
     << ", fedavg = " << med_fa << "; strictly lower in " << strict << "/5 seeds";
  return med_fr <= med_fa && strict >= 3;
}

// --- criterion 8 -----------------------------------------------------------
bool criterion_privacy_invariant(std::ostream& os) {
  // (a) full default FedRand run: no (round, client) sends both families
  ExperimentSpec spec = default_spec(1);
  const ExperimentResult& result = cached_run(spec);
  std::map<std::pair<std::size_t, int>, std::set<char>> seen;
  for (const auto& entry : result.fed.interceptions) {
    auto& fams = seen[{entry.round, entry.client}];
    fams.insert(entry.family);
    if (fams.size() > 1) {
      os << "client " << entry.client << " sent both families in round " << entry.round;
      return false;
    }
  }

  // (b) rho = 1: the server B family stays bitwise frozen all run
  ExperimentSpec rho1 = default_spec(2);
  rho1.fed.rho = 1.0;
  rho1.fed.rounds = 10;
  RunInputs inputs = prepare_inputs(rho1);
  RngStream master(rho1.seed);
  ServerState initial =
      init_server(rho1.fed, inputs.base, rho1.model.lora_rank, master.child("federation"));
  auto run = run_federation(rho1.fed, inputs.train, inputs.partition, inputs.eval, inputs.base,
                            rho1.model.lora_rank, master.child("federation"));
  for (std::size_t l = 0; l < rho1.model.num_layers; ++l) {
    if (run.server.adapters[l].b != initial.adapters[l].b) {
      os << "server B family moved under rho = 1";
      return false;
    }
  }
  os << "no dual-family interception; rho=1 froze server B for 10 rounds";
  return true;
}

// --- criterion 9 -----------------------------------------------------------
bool criterion_ablations(std::ostream& os) {
  // (a) w/o normalization hurts utility at the default task
  std::vector<double> fr_losses, nonorm_losses;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    ExperimentSpec fr = default_spec(seed);
    fr_losses.push_back(cached_run(fr).final_server_eval_loss);
    ExperimentSpec nn = default_spec(seed);
    nn.fed.ablations.no_normalization = true;
    nonorm_losses.push_back(cached_run(nn).final_server_eval_loss);
  }
  const double med_fr = median(fr_losses);
  const double med_nn = median(nonorm_losses);
  if (!(med_nn > med_fr)) {
    os << "w/o normalization did not degrade utility (fedrand " << med_fr << " vs " << med_nn
       << ")";
    return false;
  }

  // (b) w/o past parameters weakens MIA robustness at the amplified task
  int at_least = 0;
  std::vector<double> np_auroc, fr_auroc;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    ExperimentSpec np = amplified_spec(seed);
    np.fed.ablations.no_past_params = true;
    ExperimentSpec fr = amplified_spec(seed);
    const double a_np = client_auroc_k10(cached_run(np));
    const double a_fr = client_auroc_k10(cached_run(fr));
    np_auroc.push_back(a_np);
    fr_auroc.push_back(a_fr);
    if (a_np >= a_fr) ++at_least;
  }
  os << "w/o normalization loss " << med_nn << " > fedrand " << med_fr
     << "; w/o past params client AUROC >= fedrand in " << at_least << "/5 seeds (medians "
     << median(np_auroc) << " vs " << median(fr_auroc) << ")";
  return at_least >= 3;
}

// --- criterion 10 ----------------------------------------------------------
bool criterion_determinism(std::ostream& os) {
  ExperimentSpec spec = default_spec(5);
  spec.fed.rounds = 6;  // a short but complete run
  spec.data.per_class = 60;
  spec.mia.count_per_side = 60;
  const fs::path d1 = fs::temp_directory_path() / "fedrand_acceptance_run_a";
  const fs::path d2 = fs::temp_directory_path() / "fedrand_acceptance_run_b";
  fs::remove_all(d1);
  fs::remove_all(d2);
  run_and_persist(spec, d1);
  run_and_persist(spec, d2);
  bool ok = true;
  for (const char* name :
       {artifacts::kSpecFile, artifacts::kTraceFile, artifacts::kPartitionFile,
        artifacts::kInterceptionsFile, artifacts::kMiaSplitFile, artifacts::kServerCkpt}) {
    if (slurp(d1 / name) != slurp(d2 / name)) {
      os << name << " differs between reruns";
      ok = false;
    }
  }
  if (ok) {
    for (const auto& entry : fs::directory_iterator(d1 / artifacts::kInterceptedDir)) {
      const auto rel = entry.path().filename();
      if (slurp(entry.path()) != slurp(d2 / artifacts::kInterceptedDir / rel)) {
        os << "intercepted/" << rel.string() << " differs between reruns";
        ok = false;
        break;
      }
    }
  }
  fs::remove_all(d1);
  fs::remove_all(d2);
  if (ok) os << "trace, partition, interception and checkpoint artifacts byte-identical";
  return ok;
}

struct Criterion {
  int id;
  const char* label;
  std::function<bool(std::ostream&)> fn;
};

}  // namespace

int main() {
  const std::vector<Criterion> criteria{
      {1, "communication ratio", criterion_comm_ratio},
      {2, "aggregation normalization", criterion_normalization},
      {3, "fedavg-equivalence oracle", criterion_fedavg_equivalence},
      {4, "gradient correctness", criterion_gradients},
      {5, "max-renyi and auroc oracles", criterion_scoring},
      {6, "utility parity", criterion_utility_parity},
      {7, "privacy ordering", criterion_privacy_ordering},
      {8, "privacy invariant audit", criterion_privacy_invariant},
      {9, "ablation structure", criterion_ablations},
      {10, "replay determinism", criterion_determinism},
  };

  int failures = 0;
  for (const auto& c : criteria) {
    const auto t0 = std::chrono::steady_clock::now();
    bool ok = false;
    std::ostringstream details;
    try {
      ok = c.fn(details);
    } catch (const std::exception& e) {
      details << "exception: " << e.what();
    }
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::cout << (ok ? "[PASS]" : "[FAIL]") << " criterion " << std::setw(2) << c.id << ": "
              << c.label << " — " << details.str() << " [" << std::fixed << std::setprecision(1)
              << secs << "s]\n";
    std::cout.unsetf(std::ios::fixed);
    std::cout << std::setprecision(6);
    if (!ok) ++failures;
  }
  if (failures > 0) {
    std::cout << failures << " criterion(s) failed\n";
    return 1;
  }
  std::cout << "all criteria passed\n";
  return 0;
}
