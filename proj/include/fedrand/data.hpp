// SPDX-License-Identifier: Apache-2.0
#ifndef FEDRAND_DATA_HPP
#define FEDRAND_DATA_HPP

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <string>
#include <string_view>
#include <vector>

#include "fedrand/errors.hpp"
#include "fedrand/model.hpp"
#include "fedrand/rng.hpp"

namespace fedrand {

struct LabeledSeq {
  TokenSeq tokens;
  int label = 0;
};

// Fixed-length labeled token sequences. Class labels play the role the
// object classes play for image datasets: the unit of non-IID partitioning.
struct Corpus {
  std::vector<LabeledSeq> sequences;
  std::size_t seq_len = 0;
  std::size_t num_classes = 0;
  std::size_t vocab_size = 0;

  std::size_t size() const { return sequences.size(); }
};

struct CorpusParams {
  std::size_t num_classes = 6;
  std::size_t per_class = 200;
  std::size_t seq_len = 24;
  std::size_t vocab_size = 64;
};

// Generates class-structured synthetic sequences. Each class owns a disjoint
// token band and a sharp first-order Markov template over that band; each
// sequence additionally carries a short i.i.d. "secret" span that is
// unpredictable from the template, so memorizing it is only possible by
// training on that exact sequence. A further band, disjoint from every class
// band, is reserved for non-member sequences.
class TokenCorpusGenerator {
 public:
  TokenCorpusGenerator(RngStream stream, const CorpusParams& params)
      : stream_(stream), params_(params) {
    if (params.num_classes < 2) throw ArgumentError("corpus: need at least 2 classes");
    if (params.vocab_size < 4 * params.num_classes) {
      throw ArgumentError("corpus: vocab size " + std::to_string(params.vocab_size) +
                          " too small for " + std::to_string(params.num_classes) +
                          " classes (need >= 4x)");
    }
    if (params.seq_len < 4) throw ArgumentError("corpus: sequence length must be >= 4");
    band_width_ = params.vocab_size / (params.num_classes + 1);
    RngStream templates = stream_.child("templates");
    for (std::size_t c = 0; c < params.num_classes; ++c) {
      RngStream ts = templates.child(c);
      tables_.push_back(make_table(ts, band_lo(c), band_width_));
    }
    RngStream ns = templates.child("nonmember");
    nonmember_table_ = make_table(ns, nonmember_lo(), nonmember_width());
  }

  const CorpusParams& params() const { return params_; }

  std::size_t band_lo(std::size_t cls) const { return cls * band_width_; }
  std::size_t band_width() const { return band_width_; }
  std::size_t nonmember_lo() const { return params_.num_classes * band_width_; }
  std::size_t nonmember_width() const { return params_.vocab_size - nonmember_lo(); }

  Corpus generate(std::string_view label, std::size_t per_class) const {
    if (per_class == 0) throw ArgumentError("corpus: per-class count must be positive");
    Corpus corpus;
    corpus.seq_len = params_.seq_len;
    corpus.num_classes = params_.num_classes;
    corpus.vocab_size = params_.vocab_size;
    corpus.sequences.reserve(per_class * params_.num_classes);
    RngStream seqs = stream_.child(label);
    for (std::size_t c = 0; c < params_.num_classes; ++c) {
      RngStream cs = seqs.child(c);
      for (std::size_t i = 0; i < per_class; ++i) {
        RngStream s = cs.child(i);
        corpus.sequences.push_back(
            {make_sequence(s, tables_[c], band_lo(c), band_width_), static_cast<int>(c)});
      }
    }
    return corpus;
  }

  // Fresh sequences over the reserved band; token-disjoint from every class.
  std::vector<TokenSeq> generate_nonmembers(std::string_view label, std::size_t count) const {
    std::vector<TokenSeq> out;
    out.reserve(count);
    RngStream seqs = stream_.child(label);
    for (std::size_t i = 0; i < count; ++i) {
      RngStream s = seqs.child(i);
      out.push_back(make_sequence(s, nonmember_table_, nonmember_lo(), nonmember_width()));
    }
    return out;
  }

 private:
  // Two likely successors per band token, 0.75 / 0.25.
  struct Table {
    std::vector<std::pair<int, int>> successors;
  };

  static Table make_table(RngStream& stream, std::size_t lo, std::size_t width) {
    Table t;
    t.successors.reserve(width);
    for (std::size_t i = 0; i < width; ++i) {
      const int s1 = static_cast<int>(lo + stream.next_below(width));
      const int s2 = static_cast<int>(lo + stream.next_below(width));
      t.successors.emplace_back(s1, s2);
    }
    return t;
  }

  TokenSeq make_sequence(RngStream& s, const Table& table, std::size_t lo,
                         std::size_t width) const {
    const std::size_t T = params_.seq_len;
    TokenSeq seq(T);
    seq[0] = static_cast<int>(lo + s.next_below(width));
    for (std::size_t i = 1; i < T; ++i) {
      const auto& succ = table.successors[static_cast<std::size_t>(seq[i - 1]) - lo];
      seq[i] = (s.next_double() < 0.75) ? succ.first : succ.second;
    }
    // Overwrite a span with i.i.d. band tokens unique to this sequence.
    const std::size_t span = std::min<std::size_t>(6, T / 4);
    const std::size_t start = 1 + s.next_below(T - span);
    for (std::size_t i = start; i < start + span; ++i) {
      seq[i] = static_cast<int>(lo + s.next_below(width));
    }
    return seq;
  }

  RngStream stream_;
  CorpusParams params_;
  std::size_t band_width_ = 0;
  std::vector<Table> tables_;
  Table nonmember_table_;
};

inline Corpus generate_corpus(RngStream stream, std::size_t num_classes, std::size_t per_class,
                              std::size_t seq_len, std::size_t vocab_size) {
  CorpusParams p;
  p.num_classes = num_classes;
  p.per_class = per_class;
  p.seq_len = seq_len;
  p.vocab_size = vocab_size;
  return TokenCorpusGenerator(stream, p).generate("train", per_class);
}

// One client's share of the corpus, by index. Shares are pairwise disjoint
// and cover the corpus.
struct ClientDataset {
  int client_id = 0;
  std::vector<std::size_t> indices;

  std::size_t size() const { return indices.size(); }
};

inline Batch batch_view(const Corpus& corpus, const std::vector<std::size_t>& indices) {
  Batch b;
  b.reserve(indices.size());
  for (std::size_t i : indices) b.push_back(&corpus.sequences[i].tokens);
  return b;
}

namespace detail {

// Marsaglia-Tsang, with the shape<1 boost. All draws come from the stream.
inline double gamma_draw(RngStream& s, double shape) {
  if (shape < 1.0) {
    const double u = 1.0 - s.next_double();  // (0, 1]
    return gamma_draw(s, shape + 1.0) * std::pow(u, 1.0 / shape);
  }
  const double d = shape - 1.0 / 3.0;
  const double c = 1.0 / (3.0 * std::sqrt(d));
  while (true) {
    const double x = s.next_normal();
    double v = 1.0 + c * x;
    if (v <= 0.0) continue;
    v = v * v * v;
    const double u = 1.0 - s.next_double();
    if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
    if (std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
  }
}

inline std::vector<double> dirichlet_draw(RngStream& s, std::size_t k, double concentration) {
  std::vector<double> p(k);
  double total = 0.0;
  for (double& v : p) {
    v = gamma_draw(s, concentration);
    total += v;
  }
  if (total <= 0.0) {
    // All-underflow corner; fall back to uniform rather than divide by zero.
    std::fill(p.begin(), p.end(), 1.0 / static_cast<double>(k));
    return p;
  }
  for (double& v : p) v /= total;
  return p;
}

inline std::size_t categorical(RngStream& s, const std::vector<double>& p) {
  const double u = s.next_double();
  double acc = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    acc += p[i];
    if (u < acc) return i;
  }
  return p.size() - 1;
}

}  // namespace detail

// Per-class Dirichlet-multinomial assignment: for each class, draw client
// proportions ~ Dirichlet(concentration * 1_K) and route that class's
// sequences multinomially. If any client ends up empty the whole draw is
// retried from a fresh child stream, keeping the marginal law intact.
inline std::vector<ClientDataset> dirichlet_partition(const Corpus& corpus,
                                                      std::size_t num_clients,
                                                      double concentration, RngStream stream) {
  if (num_clients < 2) throw ArgumentError("partition: need at least 2 clients");
  if (!(concentration > 0.0)) throw ArgumentError("partition: concentration must be positive");
  if (corpus.size() < num_clients) {
    throw PartitionError("partition: corpus of " + std::to_string(corpus.size()) +
                         " sequences cannot cover " + std::to_string(num_clients) + " clients");
  }

  std::vector<std::vector<std::size_t>> by_class(corpus.num_classes);
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    by_class[static_cast<std::size_t>(corpus.sequences[i].label)].push_back(i);
  }

  constexpr int kMaxAttempts = 100;
  for (int attempt = 0; attempt < kMaxAttempts; ++attempt) {
    RngStream at = stream.child("attempt", static_cast<std::uint64_t>(attempt));
    std::vector<ClientDataset> clients(num_clients);
    for (std::size_t k = 0; k < num_clients; ++k) clients[k].client_id = static_cast<int>(k);
    for (std::size_t c = 0; c < by_class.size(); ++c) {
      RngStream cs = at.child(c);
      const auto p = detail::dirichlet_draw(cs, num_clients, concentration);
      for (std::size_t idx : by_class[c]) {
        clients[detail::categorical(cs, p)].indices.push_back(idx);
      }
    }
    const bool all_nonempty = std::all_of(clients.begin(), clients.end(),
                                          [](const ClientDataset& c) { return !c.indices.empty(); });
    if (all_nonempty) return clients;
  }
  throw PartitionError("partition: could not make every client nonempty after " +
                       std::to_string(kMaxAttempts) +
                       " attempts; use a larger corpus or fewer clients");
}

// Member/non-member evaluation split. Members are training sequences;
// non-members are freshly generated from the reserved band.
struct MiaSplit {
  std::vector<std::size_t> member_ids;  // indices into the training corpus
  std::vector<TokenSeq> members;
  std::vector<TokenSeq> nonmembers;
};

inline MiaSplit make_mia_split(const Corpus& corpus, const TokenCorpusGenerator& gen,
                               std::size_t count_per_side, RngStream stream) {
  if (count_per_side == 0) throw ArgumentError("mia split: count must be positive");
  if (count_per_side > corpus.size()) {
    throw ArgumentError("mia split: requested " + std::to_string(count_per_side) +
                        " members from a corpus of " + std::to_string(corpus.size()));
  }
  MiaSplit split;
  std::vector<std::size_t> ids(corpus.size());
  std::iota(ids.begin(), ids.end(), 0);
  RngStream ms = stream.child("members");
  for (std::size_t i = 0; i < count_per_side; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(ms.next_below(ids.size() - i));
    std::swap(ids[i], ids[j]);
  }
  ids.resize(count_per_side);
  split.member_ids = ids;
  split.members.reserve(count_per_side);
  for (std::size_t id : ids) split.members.push_back(corpus.sequences[id].tokens);
  split.nonmembers = gen.generate_nonmembers("mia_nonmembers", count_per_side);
  return split;
}

// Class histogram per client; handy for heterogeneity checks and export.
inline std::vector<std::vector<std::size_t>> class_counts(
    const Corpus& corpus, const std::vector<ClientDataset>& clients) {
  std::vector<std::vector<std::size_t>> counts(clients.size(),
                                               std::vector<std::size_t>(corpus.num_classes, 0));
  for (std::size_t k = 0; k < clients.size(); ++k) {
    for (std::size_t idx : clients[k].indices) {
      counts[k][static_cast<std::size_t>(corpus.sequences[idx].label)]++;
    }
  }
  return counts;
}

}  // namespace fedrand

#endif  // FEDRAND_DATA_HPP
