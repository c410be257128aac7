// SPDX-License-Identifier: Apache-2.0
#ifndef FEDRAND_MODEL_HPP
#define FEDRAND_MODEL_HPP

#include <cmath>
#include <cstddef>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "fedrand/errors.hpp"
#include "fedrand/matrix.hpp"
#include "fedrand/rng.hpp"

namespace fedrand {

using TokenSeq = std::vector<int>;
// Non-owning view of the sequences participating in one loss/grad evaluation.
using Batch = std::vector<const TokenSeq*>;

struct ModelDims {
  std::size_t vocab_size = 64;
  std::size_t embed_dim = 32;
  std::size_t num_layers = 4;
  std::size_t lora_rank = 8;
};

// Frozen weights of the tiny autoregressive next-token model:
// token embedding, a stack of square hidden layers, output projection.
// Never mutated after construction; shared by reference across the server
// and all clients.
class BaseWeights {
 public:
  BaseWeights(Matrix embedding, std::vector<Matrix> layer_weights, Matrix output_proj)
      : embedding_(std::move(embedding)),
        layers_(std::move(layer_weights)),
        output_proj_(std::move(output_proj)) {
    const std::size_t d = embedding_.cols();
    for (const Matrix& w : layers_) {
      if (w.rows() != d || w.cols() != d) {
        throw DimensionError("layer weight shape " + w.shape() + " does not match embed dim " +
                             std::to_string(d));
      }
    }
    if (output_proj_.rows() != d) {
      throw DimensionError("output projection shape " + output_proj_.shape() +
                           " does not match embed dim " + std::to_string(d));
    }
  }

  // Gaussian init. The hidden gain keeps the untrained network well inside
  // tanh's linear region, so it emits near-uniform distributions for any
  // input and structure only exists where training created it; the larger
  // output gain makes the next-token distribution responsive to small
  // adapter updates.
  static std::shared_ptr<const BaseWeights> random(RngStream stream, const ModelDims& dims) {
    const double w_std = 1.0 / std::sqrt(static_cast<double>(dims.embed_dim));
    const double proj_std = 4.0 / std::sqrt(static_cast<double>(dims.embed_dim));
    RngStream embed_stream = stream.child("embedding");
    Matrix embedding = rand_normal(embed_stream, dims.vocab_size, dims.embed_dim, 1.0);
    std::vector<Matrix> layers;
    layers.reserve(dims.num_layers);
    for (std::size_t l = 0; l < dims.num_layers; ++l) {
      RngStream s = stream.child("layer", l);
      layers.push_back(rand_normal(s, dims.embed_dim, dims.embed_dim, w_std));
    }
    RngStream proj_stream = stream.child("output_proj");
    Matrix proj = rand_normal(proj_stream, dims.embed_dim, dims.vocab_size, proj_std);
    return std::make_shared<const BaseWeights>(std::move(embedding), std::move(layers),
                                               std::move(proj));
  }

  std::size_t vocab_size() const { return embedding_.rows(); }
  std::size_t embed_dim() const { return embedding_.cols(); }
  std::size_t num_layers() const { return layers_.size(); }

  const Matrix& embedding() const { return embedding_; }
  const Matrix& layer(std::size_t l) const { return layers_[l]; }
  const Matrix& output_proj() const { return output_proj_; }

 private:
  Matrix embedding_;            // V x d
  std::vector<Matrix> layers_;  // L of d x d
  Matrix output_proj_;          // d x V
};

// One low-rank pair: effective contribution is A*B (d x d), rank < d.
struct LoraAdapter {
  Matrix a;  // d x rank
  Matrix b;  // rank x d

  std::size_t rank() const { return a.cols(); }

  static LoraAdapter zeros(std::size_t dim, std::size_t rank) {
    return {Matrix::zeros(dim, rank), Matrix::zeros(rank, dim)};
  }

  // The round-0 client rule: A ~ Normal(0, stddev^2), B = 0.
  static LoraAdapter fresh(RngStream& stream, std::size_t dim, std::size_t rank, double stddev) {
    return {rand_normal(stream, dim, rank, stddev), Matrix::zeros(rank, dim)};
  }

  Matrix product() const { return matmul(a, b); }

  void check_shape(std::size_t dim) const {
    if (a.rows() != dim || b.cols() != dim || a.cols() != b.rows()) {
      throw DimensionError("adapter shapes " + a.shape() + ", " + b.shape() +
                           " inconsistent for layer dim " + std::to_string(dim));
    }
    if (a.cols() >= dim) {
      throw DimensionError("adapter rank " + std::to_string(a.cols()) +
                           " must be below layer dim " + std::to_string(dim));
    }
  }
};

// A whole factor family: one A or one B matrix per layer.
using FactorFamily = std::vector<Matrix>;

using AdapterStack = std::vector<LoraAdapter>;

inline FactorFamily a_family(const AdapterStack& stack) {
  FactorFamily f;
  f.reserve(stack.size());
  for (const auto& ad : stack) f.push_back(ad.a);
  return f;
}

inline FactorFamily b_family(const AdapterStack& stack) {
  FactorFamily f;
  f.reserve(stack.size());
  for (const auto& ad : stack) f.push_back(ad.b);
  return f;
}

// Frozen base plus one trainable adapter pair per layer.
struct ModelParams {
  std::shared_ptr<const BaseWeights> base;
  AdapterStack adapters;

  static ModelParams zero_adapters(std::shared_ptr<const BaseWeights> base, std::size_t rank) {
    ModelParams p;
    p.adapters.reserve(base->num_layers());
    for (std::size_t l = 0; l < base->num_layers(); ++l) {
      p.adapters.push_back(LoraAdapter::zeros(base->embed_dim(), rank));
    }
    p.base = std::move(base);
    return p;
  }

  std::vector<Matrix> effective_weights() const {
    check();
    std::vector<Matrix> w;
    w.reserve(adapters.size());
    for (std::size_t l = 0; l < adapters.size(); ++l) {
      w.push_back(base->layer(l) + adapters[l].product());
    }
    return w;
  }

  void check() const {
    if (!base) throw ArgumentError("ModelParams: missing base weights");
    if (adapters.size() != base->num_layers()) {
      throw DimensionError("adapter count " + std::to_string(adapters.size()) +
                           " does not match layer count " + std::to_string(base->num_layers()));
    }
    for (const auto& ad : adapters) ad.check_shape(base->embed_dim());
  }
};

// Hadamard-composed variant: per layer a global pair and a private pair,
// effective contribution (Ag*Bg) elementwise-times (Ap*Bp).
struct HadamardModelParams {
  std::shared_ptr<const BaseWeights> base;
  AdapterStack global_adapters;
  AdapterStack private_adapters;

  std::vector<Matrix> effective_weights() const {
    check();
    std::vector<Matrix> w;
    w.reserve(global_adapters.size());
    for (std::size_t l = 0; l < global_adapters.size(); ++l) {
      w.push_back(base->layer(l) +
                  hadamard(global_adapters[l].product(), private_adapters[l].product()));
    }
    return w;
  }

  void check() const {
    if (!base) throw ArgumentError("HadamardModelParams: missing base weights");
    if (global_adapters.size() != base->num_layers() ||
        private_adapters.size() != base->num_layers()) {
      throw DimensionError("hadamard adapter stacks must cover all layers");
    }
    for (const auto& ad : global_adapters) ad.check_shape(base->embed_dim());
    for (const auto& ad : private_adapters) ad.check_shape(base->embed_dim());
  }
};

namespace detail {

inline void check_sequence(const BaseWeights& base, const TokenSeq& tokens) {
  if (tokens.size() < 2) {
    throw ArgumentError("sequence too short: need length >= 2, got " +
                        std::to_string(tokens.size()));
  }
  for (int t : tokens) {
    if (t < 0 || static_cast<std::size_t>(t) >= base.vocab_size()) {
      throw DataError("token id " + std::to_string(t) + " outside vocabulary of size " +
                      std::to_string(base.vocab_size()));
    }
  }
}

// Mean-pooled prefix embeddings: state[i] = mean of embeddings of tokens[0..i].
// Position i's state sees only tokens 0..i, which is what makes the model causal.
inline std::vector<std::vector<double>> prefix_states(const BaseWeights& base,
                                                      const TokenSeq& tokens) {
  const std::size_t d = base.embed_dim();
  std::vector<std::vector<double>> states(tokens.size() - 1, std::vector<double>(d, 0.0));
  std::vector<double> sum(d, 0.0);
  for (std::size_t i = 0; i + 1 < tokens.size(); ++i) {
    const auto& emb = base.embedding();
    for (std::size_t c = 0; c < d; ++c) sum[c] += emb(static_cast<std::size_t>(tokens[i]), c);
    const double inv = 1.0 / static_cast<double>(i + 1);
    for (std::size_t c = 0; c < d; ++c) states[i][c] = sum[c] * inv;
  }
  return states;
}

struct LayerTrace {
  // activations[l] is the input of layer l; activations[L] is the final state.
  std::vector<std::vector<double>> activations;
  std::vector<double> logits;
};

inline LayerTrace run_layers(const BaseWeights& base, const std::vector<Matrix>& weights,
                             std::vector<double> h) {
  LayerTrace trace;
  trace.activations.reserve(weights.size() + 1);
  trace.activations.push_back(std::move(h));
  for (const Matrix& w : weights) {
    std::vector<double> u = matvec_transposed(w, trace.activations.back());
    for (double& v : u) v = std::tanh(v);
    trace.activations.push_back(std::move(u));
  }
  trace.logits = matvec_transposed(base.output_proj(), trace.activations.back());
  return trace;
}

}  // namespace detail

// Next-token distributions for positions 1..T-1 of the sequence: entry i is
// the distribution over the token following tokens[0..i].
inline std::vector<std::vector<double>> forward_with_weights(const BaseWeights& base,
                                                             const std::vector<Matrix>& weights,
                                                             const TokenSeq& tokens) {
  detail::check_sequence(base, tokens);
  auto states = detail::prefix_states(base, tokens);
  std::vector<std::vector<double>> out;
  out.reserve(states.size());
  for (auto& h : states) {
    auto trace = detail::run_layers(base, weights, std::move(h));
    out.push_back(softmax_row(trace.logits));
  }
  return out;
}

inline std::vector<std::vector<double>> forward(const ModelParams& params,
                                                const TokenSeq& tokens) {
  return forward_with_weights(*params.base, params.effective_weights(), tokens);
}

inline std::vector<std::vector<double>> forward(const HadamardModelParams& params,
                                                const TokenSeq& tokens) {
  return forward_with_weights(*params.base, params.effective_weights(), tokens);
}

// Mean next-token NLL over every (sequence, position) pair in the batch.
inline double loss_with_weights(const BaseWeights& base, const std::vector<Matrix>& weights,
                                const Batch& batch) {
  if (batch.empty()) throw ArgumentError("loss: empty batch");
  double total = 0.0;
  std::size_t count = 0;
  for (const TokenSeq* seq : batch) {
    detail::check_sequence(base, *seq);
    auto states = detail::prefix_states(base, *seq);
    for (std::size_t i = 0; i < states.size(); ++i) {
      auto trace = detail::run_layers(base, weights, std::move(states[i]));
      const int target = (*seq)[i + 1];
      total += log_sum_exp(trace.logits) - trace.logits[static_cast<std::size_t>(target)];
      ++count;
    }
  }
  return total / static_cast<double>(count);
}

inline double loss(const ModelParams& params, const Batch& batch) {
  return loss_with_weights(*params.base, params.effective_weights(), batch);
}

inline double loss(const HadamardModelParams& params, const Batch& batch) {
  return loss_with_weights(*params.base, params.effective_weights(), batch);
}

// Loss plus the gradient of the loss w.r.t. each layer's effective weight
// matrix. Base weights (embedding, output projection) receive no gradient.
struct WeightGrads {
  double loss = 0.0;
  std::vector<Matrix> d_weights;
};

inline WeightGrads loss_and_weight_grads(const BaseWeights& base,
                                         const std::vector<Matrix>& weights, const Batch& batch) {
  if (batch.empty()) throw ArgumentError("grad: empty batch");
  const std::size_t d = base.embed_dim();
  const std::size_t num_layers = weights.size();

  std::size_t count = 0;
  for (const TokenSeq* seq : batch) {
    detail::check_sequence(base, *seq);
    count += seq->size() - 1;
  }
  const double scale = 1.0 / static_cast<double>(count);

  WeightGrads out;
  out.d_weights.assign(num_layers, Matrix::zeros(d, d));

  std::vector<double> d_logits;
  std::vector<double> dz;
  for (const TokenSeq* seq : batch) {
    auto states = detail::prefix_states(base, *seq);
    for (std::size_t i = 0; i < states.size(); ++i) {
      auto trace = detail::run_layers(base, weights, std::move(states[i]));
      const std::size_t target = static_cast<std::size_t>((*seq)[i + 1]);
      out.loss += scale * (log_sum_exp(trace.logits) - trace.logits[target]);

      d_logits = softmax_row(trace.logits);
      d_logits[target] -= 1.0;
      for (double& v : d_logits) v *= scale;

      // dz through the output projection, then back down the layer stack.
      dz = matvec(base.output_proj(), d_logits);
      for (std::size_t l = num_layers; l-- > 0;) {
        const auto& z = trace.activations[l + 1];
        const auto& z_prev = trace.activations[l];
        for (std::size_t c = 0; c < d; ++c) dz[c] *= (1.0 - z[c] * z[c]);
        Matrix& dw = out.d_weights[l];
        for (std::size_t r = 0; r < d; ++r) {
          const double zr = z_prev[r];
          if (zr == 0.0) continue;
          for (std::size_t c = 0; c < d; ++c) dw(r, c) += zr * dz[c];
        }
        if (l > 0) dz = matvec(weights[l], dz);
      }
    }
  }
  return out;
}

// Per-layer (dLoss/dA, dLoss/dB).
struct LoraGrads {
  double loss = 0.0;
  std::vector<std::pair<Matrix, Matrix>> layers;
};

inline LoraGrads grad(const ModelParams& params, const Batch& batch) {
  auto wg = loss_and_weight_grads(*params.base, params.effective_weights(), batch);
  LoraGrads out;
  out.loss = wg.loss;
  out.layers.reserve(params.adapters.size());
  for (std::size_t l = 0; l < params.adapters.size(); ++l) {
    const auto& ad = params.adapters[l];
    out.layers.emplace_back(matmul(wg.d_weights[l], ad.b.transposed()),
                            matmul(ad.a.transposed(), wg.d_weights[l]));
  }
  return out;
}

// Gradients of the Hadamard composition: with G = Ag*Bg and P = Ap*Bp,
// dG = dW .* P and dP = dW .* G, then the usual low-rank factor rule.
struct HadamardGrads {
  double loss = 0.0;
  std::vector<std::pair<Matrix, Matrix>> global_layers;
  std::vector<std::pair<Matrix, Matrix>> private_layers;
};

inline HadamardGrads grad(const HadamardModelParams& params, const Batch& batch) {
  auto wg = loss_and_weight_grads(*params.base, params.effective_weights(), batch);
  HadamardGrads out;
  out.loss = wg.loss;
  const std::size_t L = params.global_adapters.size();
  out.global_layers.reserve(L);
  out.private_layers.reserve(L);
  for (std::size_t l = 0; l < L; ++l) {
    const auto& g = params.global_adapters[l];
    const auto& p = params.private_adapters[l];
    const Matrix g_prod = g.product();
    const Matrix p_prod = p.product();
    const Matrix dg = hadamard(wg.d_weights[l], p_prod);
    const Matrix dp = hadamard(wg.d_weights[l], g_prod);
    out.global_layers.emplace_back(matmul(dg, g.b.transposed()), matmul(g.a.transposed(), dg));
    out.private_layers.emplace_back(matmul(dp, p.b.transposed()), matmul(p.a.transposed(), dp));
  }
  return out;
}

}  // namespace fedrand

#endif  // FEDRAND_MODEL_HPP
