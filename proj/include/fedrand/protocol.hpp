// SPDX-License-Identifier: Apache-2.0
#ifndef FEDRAND_PROTOCOL_HPP
#define FEDRAND_PROTOCOL_HPP

#include <cstdint>
#include <cstdlib>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "fedrand/adamw.hpp"
#include "fedrand/checkpoint.hpp"
#include "fedrand/data.hpp"
#include "fedrand/errors.hpp"
#include "fedrand/model.hpp"
#include "fedrand/rng.hpp"

namespace fedrand {

enum class Method { FedRand, FedAvg, FedPer, FedPara };

inline const char* method_name(Method m) {
  switch (m) {
    case Method::FedRand: return "fedrand";
    case Method::FedAvg: return "fedavg";
    case Method::FedPer: return "fedper";
    case Method::FedPara: return "fedpara";
  }
  return "?";
}

inline Method method_from_name(const std::string& name) {
  if (name == "fedrand") return Method::FedRand;
  if (name == "fedavg") return Method::FedAvg;
  if (name == "fedper") return Method::FedPer;
  if (name == "fedpara") return Method::FedPara;
  throw ConfigError("unknown method '" + name + "' (expected fedrand|fedavg|fedper|fedpara)");
}

struct Ablations {
  bool no_normalization = false;
  bool no_past_params = false;
  bool send_both_halves = false;
};

struct FederationConfig {
  std::size_t num_clients = 12;            // K
  std::size_t participants_per_round = 4;  // K'
  std::size_t rounds = 30;                 // R
  double rho = 0.5;                        // probability of adopting the A family
  double lr = 3e-4;
  std::size_t local_epochs = 1;  // E
  std::size_t batch_size = 8;    // b
  double weight_decay = 1e-6;
  double init_std = 0.02;  // stddev of fresh A factors
  Method method = Method::FedRand;
  std::size_t fedper_shared_layers = 2;  // N: top layers exchanged under FedPer
  Ablations ablations;

  void validate(std::size_t num_layers) const {
    if (num_clients < 1) throw ConfigError("config: need at least one client");
    if (participants_per_round < 1 || participants_per_round > num_clients) {
      throw ConfigError("config: participants per round must be in [1, K], got " +
                        std::to_string(participants_per_round) + " with K = " +
                        std::to_string(num_clients));
    }
    if (rounds < 1) throw ConfigError("config: need at least one round");
    if (rho < 0.0 || rho > 1.0) throw ConfigError("config: rho must be in [0, 1]");
    if (local_epochs < 1) throw ConfigError("config: need at least one local epoch");
    if (batch_size < 1) throw ConfigError("config: batch size must be positive");
    if (method == Method::FedPer &&
        (fedper_shared_layers < 1 || fedper_shared_layers > num_layers)) {
      throw ConfigError("config: fedper shared layers must be in [1, L], got " +
                        std::to_string(fedper_shared_layers) + " with L = " +
                        std::to_string(num_layers));
    }
  }
};

struct ServerState {
  std::size_t round = 0;
  AdapterStack adapters;  // FedPara: the global pair
};

struct FedParaClientPair {
  AdapterStack global;
  AdapterStack priv;
};

struct ClientState {
  int client_id = -1;
  std::size_t n = 0;                           // |D_k|
  std::optional<AdapterStack> cache;           // full (A, B) from last participation
  std::optional<FedParaClientPair> fedpara;    // FedPara's pairs, cached separately
  int last_a = -1;
  long last_round = -1;

  bool has_participated() const { return last_round >= 0; }
};

// What one client sends back for aggregation. FedRand carries exactly one
// factor family; FedAvg and the send-both ablation carry both; FedPer carries
// both families but only layers [first_layer, L).
struct ClientContribution {
  int client_id = -1;
  int a = -1;  // side selection; -1 when no side was drawn
  std::size_t n = 0;
  std::size_t first_layer = 0;
  std::optional<FactorFamily> a_fam;
  std::optional<FactorFamily> b_fam;
};

struct CommRecord {
  std::size_t round = 0;
  int client = -1;
  std::uint64_t down = 0;  // parameters server -> client
  std::uint64_t up = 0;    // parameters client -> server
};

struct CommLedger {
  std::vector<CommRecord> records;

  std::uint64_t total_down() const {
    std::uint64_t t = 0;
    for (const auto& r : records) t += r.down;
    return t;
  }
  std::uint64_t total_up() const {
    std::uint64_t t = 0;
    for (const auto& r : records) t += r.up;
    return t;
  }
};

struct InterceptionRecord {
  std::size_t round = 0;
  int client = -1;
  char family = 'A';
  std::size_t first_layer = 0;
  FactorFamily matrices;
  std::uint64_t checksum = 0;
};

using InterceptionLog = std::vector<InterceptionRecord>;

struct ParticipantRecord {
  int client = -1;
  int a = -1;
  double train_loss = 0.0;
};

struct RoundRecord {
  std::size_t round = 0;
  std::vector<ParticipantRecord> participants;
  double server_eval_loss = 0.0;
  std::uint64_t comm_down = 0;
  std::uint64_t comm_up = 0;
};

// ---------------------------------------------------------------------------
// Elementary protocol operations
// ---------------------------------------------------------------------------

// Uniform sample without replacement, in draw order. Deterministic per stream.
inline std::vector<int> sample_participants(std::size_t num_clients, std::size_t k_prime,
                                            RngStream stream) {
  if (k_prime > num_clients) {
    throw ConfigError("sample_participants: K' = " + std::to_string(k_prime) + " exceeds K = " +
                      std::to_string(num_clients));
  }
  std::vector<int> ids(num_clients);
  for (std::size_t i = 0; i < num_clients; ++i) ids[i] = static_cast<int>(i);
  for (std::size_t i = 0; i < k_prime; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(stream.next_below(num_clients - i));
    std::swap(ids[i], ids[j]);
  }
  ids.resize(k_prime);
  return ids;
}

// a_k = 1 iff u < rho, u ~ Uniform(0,1) from the client's round-scoped stream.
inline int select_side(double rho, RngStream stream) {
  return stream.next_double() < rho ? 1 : 0;
}

// FedRand client-side initialization. Fresh clients (round 0, or a first-ever
// participation later) start from a random A and zero B; returning clients
// adopt the chosen family from the server and keep the other from their own
// cache. The no-past-params ablation copies both families from the server in
// every round.
inline AdapterStack client_init(const AdapterStack& server_adapters, const ClientState& client,
                                int a_k, std::size_t round, const Ablations& ablations,
                                double init_std, RngStream init_stream) {
  if (ablations.no_past_params) return server_adapters;
  if (round == 0 || !client.cache.has_value()) {
    AdapterStack stack;
    stack.reserve(server_adapters.size());
    for (std::size_t l = 0; l < server_adapters.size(); ++l) {
      RngStream ls = init_stream.child(l);
      stack.push_back(LoraAdapter::fresh(ls, server_adapters[l].a.rows(),
                                         server_adapters[l].a.cols(), init_std));
    }
    return stack;
  }
  const AdapterStack& cached = *client.cache;
  if (cached.size() != server_adapters.size()) {
    throw Error("client_init: cache depth does not match server adapters");
  }
  AdapterStack stack;
  stack.reserve(server_adapters.size());
  for (std::size_t l = 0; l < server_adapters.size(); ++l) {
    if (!cached[l].a.same_shape(server_adapters[l].a) ||
        !cached[l].b.same_shape(server_adapters[l].b)) {
      throw Error("client_init: cached adapter shape mismatch at layer " + std::to_string(l));
    }
    if (a_k == 1) {
      stack.push_back({server_adapters[l].a, cached[l].b});
    } else {
      stack.push_back({cached[l].a, server_adapters[l].b});
    }
  }
  return stack;
}

namespace detail {

// out[l] = sum_i coeffs[i] * families[i][l]; one shared routine so every
// aggregation path performs bitwise-identical arithmetic.
inline FactorFamily weighted_sum(const std::vector<const FactorFamily*>& families,
                                 const std::vector<double>& coeffs) {
  FactorFamily out;
  const std::size_t depth = families.front()->size();
  out.reserve(depth);
  for (std::size_t l = 0; l < depth; ++l) {
    Matrix acc = Matrix::zeros((*families.front())[l].rows(), (*families.front())[l].cols());
    for (std::size_t i = 0; i < families.size(); ++i) {
      acc.axpy(coeffs[i], (*families[i])[l]);
    }
    out.push_back(std::move(acc));
  }
  return out;
}

inline void check_distinct_clients(const std::vector<ClientContribution>& contributions) {
  std::set<int> seen;
  for (const auto& c : contributions) {
    if (!seen.insert(c.client_id).second) {
      throw ProtocolError("aggregate: duplicate contribution from client " +
                          std::to_string(c.client_id));
    }
  }
}

}  // namespace detail

// FedRand aggregation with per-family normalization. The coefficient of
// client k on its transmitted side is n_k / (alpha * m_r), computed as
// n_k / sum-of-that-side's-n so that a lone contributor has coefficient
// exactly 1. A family nobody transmitted stays bitwise unchanged. Without
// normalization the coefficients are n_k / m_r.
inline AdapterStack aggregate_fedrand(const AdapterStack& server_adapters,
                                      const std::vector<ClientContribution>& contributions,
                                      bool no_normalization) {
  detail::check_distinct_clients(contributions);
  std::uint64_t m = 0;
  std::uint64_t a_side_n = 0, b_side_n = 0;
  for (const auto& c : contributions) {
    if (c.first_layer != 0) throw ProtocolError("aggregate_fedrand: partial-depth contribution");
    if (c.a_fam.has_value() == c.b_fam.has_value()) {
      throw ProtocolError("aggregate_fedrand: contribution from client " +
                          std::to_string(c.client_id) + " must carry exactly one family");
    }
    if (c.n == 0) throw ProtocolError("aggregate_fedrand: empty client dataset");
    m += c.n;
    (c.a_fam ? a_side_n : b_side_n) += c.n;
  }
  if (m == 0) throw ProtocolError("aggregate_fedrand: no contributions");

  auto aggregate_side = [&](bool a_side, std::uint64_t side_n) -> FactorFamily {
    std::vector<const FactorFamily*> fams;
    std::vector<double> coeffs;
    for (const auto& c : contributions) {
      const auto& fam = a_side ? c.a_fam : c.b_fam;
      if (!fam) continue;
      fams.push_back(&*fam);
      const double denom =
          no_normalization ? static_cast<double>(m) : static_cast<double>(side_n);
      coeffs.push_back(static_cast<double>(c.n) / denom);
    }
    return detail::weighted_sum(fams, coeffs);
  };

  AdapterStack next = server_adapters;  // fallback: keep untouched families
  if (a_side_n > 0) {
    FactorFamily a_next = aggregate_side(true, a_side_n);
    for (std::size_t l = 0; l < next.size(); ++l) next[l].a = std::move(a_next[l]);
  }
  if (b_side_n > 0) {
    FactorFamily b_next = aggregate_side(false, b_side_n);
    for (std::size_t l = 0; l < next.size(); ++l) next[l].b = std::move(b_next[l]);
  }
  return next;
}

// Plain n_k/m_r weighted average of both families. Every contribution must
// carry both. `first_layer` lets FedPer average only the shared top layers.
inline AdapterStack aggregate_fedavg(const AdapterStack& server_adapters,
                                     const std::vector<ClientContribution>& contributions) {
  detail::check_distinct_clients(contributions);
  if (contributions.empty()) throw ProtocolError("aggregate_fedavg: no contributions");
  const std::size_t first_layer = contributions.front().first_layer;
  std::uint64_t m = 0;
  for (const auto& c : contributions) {
    if (!c.a_fam || !c.b_fam) {
      throw ProtocolError("aggregate_fedavg: contribution from client " +
                          std::to_string(c.client_id) + " is missing a family");
    }
    if (c.first_layer != first_layer) {
      throw ProtocolError("aggregate_fedavg: inconsistent layer coverage");
    }
    if (c.n == 0) throw ProtocolError("aggregate_fedavg: empty client dataset");
    m += c.n;
  }
  std::vector<const FactorFamily*> a_fams, b_fams;
  std::vector<double> coeffs;
  for (const auto& c : contributions) {
    a_fams.push_back(&*c.a_fam);
    b_fams.push_back(&*c.b_fam);
    coeffs.push_back(static_cast<double>(c.n) / static_cast<double>(m));
  }
  FactorFamily a_next = detail::weighted_sum(a_fams, coeffs);
  FactorFamily b_next = detail::weighted_sum(b_fams, coeffs);
  AdapterStack next = server_adapters;
  for (std::size_t l = 0; l < a_next.size(); ++l) {
    next[first_layer + l].a = std::move(a_next[l]);
    next[first_layer + l].b = std::move(b_next[l]);
  }
  return next;
}

// ---------------------------------------------------------------------------
// Communication accounting
// ---------------------------------------------------------------------------

// Exact parameter tallies; one "parameter" is one matrix entry.
struct CommCost {
  std::uint64_t per_round_down = 0;  // per participating client, steady state
  std::uint64_t per_round_up = 0;
  double ratio_vs_fedavg = 1.0;
};

inline std::uint64_t family_param_count(const ModelDims& dims) {
  return static_cast<std::uint64_t>(dims.num_layers) * dims.embed_dim * dims.lora_rank;
}

inline CommCost comm_cost(Method method, const FederationConfig& config, const ModelDims& dims) {
  const std::uint64_t p = family_param_count(dims);
  CommCost cost;
  const std::uint64_t fedavg_total = 4 * p;  // 2P down + 2P up
  switch (method) {
    case Method::FedAvg:
      cost.per_round_down = 2 * p;
      cost.per_round_up = 2 * p;
      break;
    case Method::FedRand:
      cost.per_round_down = 2 * p;
      cost.per_round_up = config.ablations.send_both_halves ? 2 * p : p;
      break;
    case Method::FedPer: {
      const std::uint64_t shared = static_cast<std::uint64_t>(config.fedper_shared_layers) *
                                   dims.embed_dim * dims.lora_rank;
      cost.per_round_down = 2 * shared;
      cost.per_round_up = 2 * shared;
      break;
    }
    case Method::FedPara:
      cost.per_round_down = 2 * p;
      cost.per_round_up = 2 * p;
      break;
  }
  cost.ratio_vs_fedavg = static_cast<double>(cost.per_round_down + cost.per_round_up) /
                         static_cast<double>(fedavg_total);
  return cost;
}

// ---------------------------------------------------------------------------
// Client update
// ---------------------------------------------------------------------------

struct ClientUpdateResult {
  ClientContribution contribution;
  double mean_train_loss = 0.0;
};

namespace detail {

// Mini-batch index order for one local update: per epoch, a fresh shuffle of
// the client's items, cut into ceil(n/b) chunks.
inline std::vector<std::vector<std::size_t>> batch_schedule(const std::vector<std::size_t>& items,
                                                            std::size_t batch_size,
                                                            std::size_t epochs,
                                                            RngStream stream) {
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t e = 0; e < epochs; ++e) {
    std::vector<std::size_t> order = items;
    RngStream es = stream.child(e);
    es.shuffle(order);
    for (std::size_t start = 0; start < order.size(); start += batch_size) {
      const std::size_t end = std::min(order.size(), start + batch_size);
      batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                           order.begin() + static_cast<std::ptrdiff_t>(end));
    }
  }
  return batches;
}

inline double train_adapters(const std::shared_ptr<const BaseWeights>& base, AdapterStack& stack,
                             const Corpus& corpus,
                             const std::vector<std::vector<std::size_t>>& batches,
                             const AdamWConfig& opt_cfg) {
  ModelParams params{base, std::move(stack)};
  AdamW opt(opt_cfg);
  double loss_sum = 0.0;
  for (const auto& batch_idx : batches) {
    const Batch batch = batch_view(corpus, batch_idx);
    LoraGrads grads = grad(params, batch);
    loss_sum += grads.loss;
    std::vector<Matrix*> ps;
    std::vector<const Matrix*> gs;
    ps.reserve(params.adapters.size() * 2);
    gs.reserve(params.adapters.size() * 2);
    for (std::size_t l = 0; l < params.adapters.size(); ++l) {
      ps.push_back(&params.adapters[l].a);
      ps.push_back(&params.adapters[l].b);
      gs.push_back(&grads.layers[l].first);
      gs.push_back(&grads.layers[l].second);
    }
    opt.step(ps, gs);
  }
  stack = std::move(params.adapters);
  return loss_sum / static_cast<double>(batches.size());
}

inline double train_hadamard(const std::shared_ptr<const BaseWeights>& base,
                             AdapterStack& global_stack, AdapterStack& private_stack,
                             const Corpus& corpus,
                             const std::vector<std::vector<std::size_t>>& batches,
                             const AdamWConfig& opt_cfg) {
  HadamardModelParams params{base, std::move(global_stack), std::move(private_stack)};
  AdamW opt(opt_cfg);
  double loss_sum = 0.0;
  for (const auto& batch_idx : batches) {
    const Batch batch = batch_view(corpus, batch_idx);
    HadamardGrads grads = grad(params, batch);
    loss_sum += grads.loss;
    std::vector<Matrix*> ps;
    std::vector<const Matrix*> gs;
    for (std::size_t l = 0; l < params.global_adapters.size(); ++l) {
      ps.push_back(&params.global_adapters[l].a);
      ps.push_back(&params.global_adapters[l].b);
      ps.push_back(&params.private_adapters[l].a);
      ps.push_back(&params.private_adapters[l].b);
      gs.push_back(&grads.global_layers[l].first);
      gs.push_back(&grads.global_layers[l].second);
      gs.push_back(&grads.private_layers[l].first);
      gs.push_back(&grads.private_layers[l].second);
    }
    opt.step(ps, gs);
  }
  global_stack = std::move(params.global_adapters);
  private_stack = std::move(params.private_adapters);
  return loss_sum / static_cast<double>(batches.size());
}

// Exact Hadamard identity: A's first column and B's first row are ones, so
// A*B is the all-ones matrix.
inline LoraAdapter ones_product_adapter(std::size_t dim, std::size_t rank) {
  LoraAdapter ad = LoraAdapter::zeros(dim, rank);
  for (std::size_t r = 0; r < dim; ++r) ad.a(r, 0) = 1.0;
  for (std::size_t c = 0; c < dim; ++c) ad.b(0, c) = 1.0;
  return ad;
}

}  // namespace detail

// One client's local round: initialize per the method's rule, run
// E * ceil(n_k / b) AdamW steps over stream-ordered mini-batches, cache the
// full result locally, and emit only what the method transmits.
inline ClientUpdateResult client_update(int client_id, const ServerState& server,
                                        const std::optional<AdapterStack>& fedper_round0_agg,
                                        const FederationConfig& config, const Corpus& corpus,
                                        ClientState& state,
                                        const std::shared_ptr<const BaseWeights>& base,
                                        const std::vector<std::size_t>& items,
                                        RngStream client_stream) {
  if (items.empty()) {
    throw ProtocolError("client_update: client " + std::to_string(client_id) +
                        " has an empty dataset");
  }
  const std::size_t round = server.round;
  const std::size_t num_layers = server.adapters.size();
  AdamWConfig opt_cfg;
  opt_cfg.lr = config.lr;
  opt_cfg.weight_decay = config.weight_decay;
  const auto batches =
      detail::batch_schedule(items, config.batch_size, config.local_epochs,
                             client_stream.child("batch"));

  ClientUpdateResult result;
  result.contribution.client_id = client_id;
  result.contribution.n = items.size();

  switch (config.method) {
    case Method::FedRand: {
      const int a_k = select_side(config.rho, client_stream.child("side"));
      AdapterStack stack = client_init(server.adapters, state, a_k, round, config.ablations,
                                       config.init_std, client_stream.child("init"));
      result.mean_train_loss = detail::train_adapters(base, stack, corpus, batches, opt_cfg);
      state.cache = stack;
      state.last_a = a_k;
      state.last_round = static_cast<long>(round);
      result.contribution.a = a_k;
      if (config.ablations.send_both_halves) {
        result.contribution.a_fam = a_family(stack);
        result.contribution.b_fam = b_family(stack);
      } else if (a_k == 1) {
        result.contribution.a_fam = a_family(stack);
      } else {
        result.contribution.b_fam = b_family(stack);
      }
      break;
    }
    case Method::FedAvg: {
      AdapterStack stack = server.adapters;
      result.mean_train_loss = detail::train_adapters(base, stack, corpus, batches, opt_cfg);
      state.cache = stack;
      state.last_round = static_cast<long>(round);
      result.contribution.a_fam = a_family(stack);
      result.contribution.b_fam = b_family(stack);
      break;
    }
    case Method::FedPer: {
      const std::size_t shared_from = num_layers - config.fedper_shared_layers;
      AdapterStack stack = server.adapters;
      if (round > 0) {
        // Private lower layers come from the client's own history, seeded
        // from the round-0 aggregate on first re-entry.
        const AdapterStack& priv_source =
            state.cache ? *state.cache
                        : (fedper_round0_agg ? *fedper_round0_agg : server.adapters);
        for (std::size_t l = 0; l < shared_from; ++l) stack[l] = priv_source[l];
      }
      result.mean_train_loss = detail::train_adapters(base, stack, corpus, batches, opt_cfg);
      state.cache = stack;
      state.last_round = static_cast<long>(round);
      const std::size_t from = (round == 0) ? 0 : shared_from;
      FactorFamily a_shared, b_shared;
      for (std::size_t l = from; l < num_layers; ++l) {
        a_shared.push_back(stack[l].a);
        b_shared.push_back(stack[l].b);
      }
      result.contribution.first_layer = from;
      result.contribution.a_fam = std::move(a_shared);
      result.contribution.b_fam = std::move(b_shared);
      break;
    }
    case Method::FedPara: {
      AdapterStack global = server.adapters;
      AdapterStack priv;
      if (state.fedpara) {
        priv = state.fedpara->priv;
      } else {
        priv.reserve(num_layers);
        RngStream ps = client_stream.child("fedpara_init");
        for (std::size_t l = 0; l < num_layers; ++l) {
          LoraAdapter ad = detail::ones_product_adapter(server.adapters[l].a.rows(),
                                                        server.adapters[l].a.cols());
          RngStream ls = ps.child(l);
          ad.a += rand_normal(ls, ad.a.rows(), ad.a.cols(), config.init_std);
          ad.b += rand_normal(ls, ad.b.rows(), ad.b.cols(), config.init_std);
          priv.push_back(std::move(ad));
        }
      }
      result.mean_train_loss =
          detail::train_hadamard(base, global, priv, corpus, batches, opt_cfg);
      state.fedpara = FedParaClientPair{global, priv};
      state.last_round = static_cast<long>(round);
      result.contribution.a_fam = a_family(global);
      result.contribution.b_fam = b_family(global);
      break;
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// Full federation run
// ---------------------------------------------------------------------------

struct FederationResult {
  ServerState server;
  std::vector<ClientState> clients;
  std::vector<RoundRecord> history;
  CommLedger ledger;
  InterceptionLog interceptions;
  std::optional<AdapterStack> fedper_round0_aggregate;
};

namespace detail {

inline std::uint64_t family_checksum(const FactorFamily& fam, std::size_t first_layer) {
  NamedMatrices named;
  for (std::size_t i = 0; i < fam.size(); ++i) {
    named.emplace(layer_name(first_layer + i), fam[i]);
  }
  return checksum(named);
}

inline void log_contribution(InterceptionLog& log, std::size_t round,
                             const ClientContribution& c) {
  if (c.a_fam) {
    log.push_back({round, c.client_id, 'A', c.first_layer, *c.a_fam,
                   family_checksum(*c.a_fam, c.first_layer)});
  }
  if (c.b_fam) {
    log.push_back({round, c.client_id, 'B', c.first_layer, *c.b_fam,
                   family_checksum(*c.b_fam, c.first_layer)});
  }
}

}  // namespace detail

// Effective per-layer weights of the server model for evaluation. FedPara's
// server has no private pair; it evaluates with the Hadamard identity.
inline std::vector<Matrix> server_model_weights(const BaseWeights& base,
                                                const ServerState& server) {
  std::vector<Matrix> w;
  w.reserve(server.adapters.size());
  for (std::size_t l = 0; l < server.adapters.size(); ++l) {
    w.push_back(base.layer(l) + server.adapters[l].product());
  }
  return w;
}

// Effective weights of one client's personalized model, if it ever trained.
inline std::optional<std::vector<Matrix>> client_model_weights(const BaseWeights& base,
                                                               const ClientState& state,
                                                               Method method) {
  if (method == Method::FedPara) {
    if (!state.fedpara) return std::nullopt;
    std::vector<Matrix> w;
    w.reserve(state.fedpara->global.size());
    for (std::size_t l = 0; l < state.fedpara->global.size(); ++l) {
      w.push_back(base.layer(l) + hadamard(state.fedpara->global[l].product(),
                                           state.fedpara->priv[l].product()));
    }
    return w;
  }
  if (!state.cache) return std::nullopt;
  std::vector<Matrix> w;
  w.reserve(state.cache->size());
  for (std::size_t l = 0; l < state.cache->size(); ++l) {
    w.push_back(base.layer(l) + (*state.cache)[l].product());
  }
  return w;
}

inline ServerState init_server(const FederationConfig& config,
                               const std::shared_ptr<const BaseWeights>& base,
                               std::size_t lora_rank, RngStream fed_stream) {
  ServerState server;
  server.round = 0;
  RngStream is = fed_stream.child("server_init");
  const std::size_t d = base->embed_dim();
  for (std::size_t l = 0; l < base->num_layers(); ++l) {
    RngStream ls = is.child(l);
    Matrix a = rand_normal(ls, d, lora_rank, config.init_std);
    // FedPara keeps the standard zero-product start for the global pair; the
    // other methods randomize both factors at round 0.
    Matrix b = (config.method == Method::FedPara)
                   ? Matrix::zeros(lora_rank, d)
                   : rand_normal(ls, lora_rank, d, config.init_std);
    server.adapters.push_back({std::move(a), std::move(b)});
  }
  return server;
}

inline FederationResult run_federation(const FederationConfig& config, const Corpus& corpus,
                                       const std::vector<ClientDataset>& partition,
                                       const Corpus& eval_corpus,
                                       const std::shared_ptr<const BaseWeights>& base,
                                       std::size_t lora_rank, RngStream fed_stream) {
  config.validate(base->num_layers());
  if (partition.size() != config.num_clients) {
    throw ConfigError("run_federation: partition covers " + std::to_string(partition.size()) +
                      " clients but config says K = " + std::to_string(config.num_clients));
  }

  FederationResult result;
  result.server = init_server(config, base, lora_rank, fed_stream);
  result.clients.resize(config.num_clients);
  for (std::size_t k = 0; k < config.num_clients; ++k) {
    result.clients[k].client_id = static_cast<int>(k);
    result.clients[k].n = partition[k].size();
  }

  std::vector<std::size_t> eval_ids(eval_corpus.size());
  for (std::size_t i = 0; i < eval_ids.size(); ++i) eval_ids[i] = i;
  const Batch eval_batch = batch_view(eval_corpus, eval_ids);

  const CommCost steady = comm_cost(config.method, config, ModelDims{
      base->vocab_size(), base->embed_dim(), base->num_layers(), lora_rank});
  const std::uint64_t full_both = 2 * family_param_count(ModelDims{
      base->vocab_size(), base->embed_dim(), base->num_layers(), lora_rank});

  for (std::size_t r = 0; r < config.rounds; ++r) {
    result.server.round = r;
    RngStream round_stream = fed_stream.child("round", r);
    const std::vector<int> participants = sample_participants(
        config.num_clients, config.participants_per_round, round_stream.child("participants"));

    RoundRecord record;
    record.round = r;
    std::vector<ClientContribution> contributions;
    contributions.reserve(participants.size());

    for (int k : participants) {
      ClientState& state = result.clients[static_cast<std::size_t>(k)];
      RngStream cs = round_stream.child("client", static_cast<std::uint64_t>(k));
      ClientUpdateResult upd =
          client_update(k, result.server, result.fedper_round0_aggregate, config, corpus, state,
                        base, partition[static_cast<std::size_t>(k)].indices, cs);
      detail::log_contribution(result.interceptions, r, upd.contribution);

      // FedPer's round 0 is a full exchange; later rounds move only the
      // shared top layers.
      std::uint64_t down = steady.per_round_down, up = steady.per_round_up;
      if (config.method == Method::FedPer && r == 0) {
        down = full_both;
        up = full_both;
      }
      result.ledger.records.push_back({r, k, down, up});
      record.comm_down += down;
      record.comm_up += up;
      record.participants.push_back({k, upd.contribution.a, upd.mean_train_loss});
      contributions.push_back(std::move(upd.contribution));
    }

    const bool plain_average = config.method != Method::FedRand || config.ablations.send_both_halves;
    result.server.adapters =
        plain_average
            ? aggregate_fedavg(result.server.adapters, contributions)
            : aggregate_fedrand(result.server.adapters, contributions,
                                config.ablations.no_normalization);
    if (config.method == Method::FedPer && r == 0) {
      result.fedper_round0_aggregate = result.server.adapters;
    }

    record.server_eval_loss =
        loss_with_weights(*base, server_model_weights(*base, result.server), eval_batch);
    result.history.push_back(std::move(record));
  }
  result.server.round = config.rounds;
  return result;
}

// ---------------------------------------------------------------------------
// Client reconstruction (the honest-but-curious server's attack)
// ---------------------------------------------------------------------------

struct Reconstruction {
  bool ok = false;
  std::string failure_reason;
  AdapterStack adapters;
  long a_round = -1;  // round the A family was intercepted in
  long b_round = -1;
  long staleness_gap = 0;
};

// Stitches a client model from the interception log alone: the most recent
// transmitted A family paired with the most recent transmitted B family.
// Under FedAvg both come from the same round and the reconstruction is exact;
// under FedRand they usually differ, and a family that never left the client
// makes reconstruction fail outright.
inline Reconstruction reconstruct_client(const InterceptionLog& log, int client_id,
                                         std::size_t num_layers, Method method) {
  Reconstruction rec;
  if (method == Method::FedPer || method == Method::FedPara) {
    rec.failure_reason = "private parameters are never transmitted under " +
                         std::string(method_name(method));
    return rec;
  }
  const InterceptionRecord* latest_a = nullptr;
  const InterceptionRecord* latest_b = nullptr;
  for (const auto& entry : log) {
    if (entry.client != client_id || entry.first_layer != 0 ||
        entry.matrices.size() != num_layers) {
      continue;
    }
    if (entry.family == 'A' && (!latest_a || entry.round >= latest_a->round)) latest_a = &entry;
    if (entry.family == 'B' && (!latest_b || entry.round >= latest_b->round)) latest_b = &entry;
  }
  if (!latest_a || !latest_b) {
    rec.failure_reason = std::string("client ") + std::to_string(client_id) +
                         " never transmitted its " + (latest_a ? "B" : "A") + " family";
    return rec;
  }
  rec.ok = true;
  rec.a_round = static_cast<long>(latest_a->round);
  rec.b_round = static_cast<long>(latest_b->round);
  rec.staleness_gap = std::abs(rec.a_round - rec.b_round);
  rec.adapters.reserve(num_layers);
  for (std::size_t l = 0; l < num_layers; ++l) {
    rec.adapters.push_back({latest_a->matrices[l], latest_b->matrices[l]});
  }
  return rec;
}

}  // namespace fedrand

#endif  // FEDRAND_PROTOCOL_HPP
