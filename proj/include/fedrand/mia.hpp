// SPDX-License-Identifier: Apache-2.0
#ifndef FEDRAND_MIA_HPP
#define FEDRAND_MIA_HPP

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "fedrand/data.hpp"
#include "fedrand/errors.hpp"
#include "fedrand/matrix.hpp"
#include "fedrand/model.hpp"

namespace fedrand {

// Renyi entropy of order q. q=1 is the Shannon limit. Result is in
// [0, ln(|p|)] for any valid distribution.
inline double renyi_entropy(const std::vector<double>& p, double q) {
  if (p.empty()) throw ArgumentError("renyi_entropy: empty distribution");
  if (!(q > 0.0)) throw ArgumentError("renyi_entropy: order must be positive");
  double total = 0.0;
  for (double v : p) {
    if (v < 0.0 || !std::isfinite(v)) {
      throw ArgumentError("renyi_entropy: invalid probability " + std::to_string(v));
    }
    total += v;
  }
  if (std::fabs(total - 1.0) > 1e-9) {
    throw ArgumentError("renyi_entropy: probabilities sum to " + std::to_string(total));
  }
  constexpr double kTiny = 1e-300;
  if (q == 1.0) {
    double h = 0.0;
    for (double v : p) {
      if (v > kTiny) h -= v * std::log(v);
    }
    return h;
  }
  double s = 0.0;
  for (double v : p) {
    if (v > kTiny) s += std::pow(v, q);
  }
  return std::log(s) / (1.0 - q);
}

// Per-position entropies H_q of the next-token distributions of a sequence.
inline std::vector<double> entropy_profile(const std::vector<std::vector<double>>& probs,
                                           double q) {
  std::vector<double> h;
  h.reserve(probs.size());
  for (const auto& p : probs) h.push_back(renyi_entropy(p, q));
  return h;
}

// Mean of the top-K% entries of a profile. K=0 degenerates to the single
// maximum; K=100 is the mean over all positions. The position count is
// floor(K/100 * n), floored at one position.
inline double max_renyi_score(std::vector<double> profile, double k_percent) {
  if (profile.empty()) throw ArgumentError("max_renyi_score: empty profile");
  if (k_percent < 0.0 || k_percent > 100.0) {
    throw ArgumentError("max_renyi_score: K must be in [0, 100]");
  }
  const auto n = static_cast<double>(profile.size());
  std::size_t count = static_cast<std::size_t>(std::floor(k_percent / 100.0 * n));
  count = std::max<std::size_t>(1, std::min<std::size_t>(count, profile.size()));
  std::partial_sort(profile.begin(), profile.begin() + static_cast<std::ptrdiff_t>(count),
                    profile.end(), std::greater<double>());
  double sum = 0.0;
  for (std::size_t i = 0; i < count; ++i) sum += profile[i];
  return sum / static_cast<double>(count);
}

inline double max_renyi_score(const ModelParams& params, const TokenSeq& tokens, double k_percent,
                              double q) {
  return max_renyi_score(entropy_profile(forward(params, tokens), q), k_percent);
}

struct ScoreRecord {
  std::size_t id = 0;
  bool member = false;
  double score = 0.0;
};

// Rank-based (Mann-Whitney) AUROC with half credit for ties, under the
// low-member-score convention: the membership statistic is -score, so a
// perfectly confident model on its training data yields AUROC 1.
inline double auroc(const std::vector<ScoreRecord>& records) {
  std::vector<double> members, nonmembers;
  for (const auto& r : records) {
    if (!std::isfinite(r.score)) throw ArgumentError("auroc: non-finite score");
    (r.member ? members : nonmembers).push_back(r.score);
  }
  if (members.empty() || nonmembers.empty()) {
    throw ArgumentError("auroc: need at least one member and one non-member record");
  }
  std::sort(members.begin(), members.end());
  double wins2x = 0.0;  // 2*wins + ties, accumulated per non-member
  for (double v : nonmembers) {
    const auto lo = std::lower_bound(members.begin(), members.end(), v);
    const auto hi = std::upper_bound(members.begin(), members.end(), v);
    wins2x += 2.0 * static_cast<double>(lo - members.begin()) + static_cast<double>(hi - lo);
  }
  return wins2x / (2.0 * static_cast<double>(members.size()) *
                   static_cast<double>(nonmembers.size()));
}

// Position spans scored separately: the whole profile, its first third, and
// the remainder.
enum class Span { Full, Prefix, Suffix };

inline const char* span_name(Span s) {
  switch (s) {
    case Span::Full: return "full";
    case Span::Prefix: return "prefix";
    case Span::Suffix: return "suffix";
  }
  return "?";
}

inline std::vector<double> span_slice(const std::vector<double>& profile, Span span) {
  if (span == Span::Full) return profile;
  std::size_t cut = std::max<std::size_t>(1, profile.size() / 3);
  if (cut >= profile.size()) cut = profile.size() - 1;
  if (span == Span::Prefix) return {profile.begin(), profile.begin() + static_cast<std::ptrdiff_t>(cut)};
  return {profile.begin() + static_cast<std::ptrdiff_t>(cut), profile.end()};
}

struct AttackRecord {
  std::string target;
  double k_percent = 0.0;
  double q = 0.5;
  std::string span;
  double auroc_value = 0.5;
  std::size_t n_members = 0;
  std::size_t n_nonmembers = 0;
};

struct AttackOptions {
  std::vector<double> k_percents{0.0, 10.0};
  std::vector<double> qs{0.5, 1.0};
  std::vector<Span> spans{Span::Full, Span::Prefix, Span::Suffix};
};

// Scores every split sequence under one model and reports AUROC for each
// (K, q, span) cell. `weights` are the model's effective per-layer weights.
inline std::vector<AttackRecord> attack_model(const BaseWeights& base,
                                              const std::vector<Matrix>& weights,
                                              const MiaSplit& split, const AttackOptions& options,
                                              const std::string& target) {
  std::vector<AttackRecord> out;
  // Forward once per sequence; entropies once per (sequence, q).
  struct Profiles {
    bool member;
    std::vector<std::vector<double>> per_q;  // profile per q
  };
  std::vector<Profiles> all;
  all.reserve(split.members.size() + split.nonmembers.size());
  auto add = [&](const TokenSeq& seq, bool member) {
    auto probs = forward_with_weights(base, weights, seq);
    Profiles pr;
    pr.member = member;
    pr.per_q.reserve(options.qs.size());
    for (double q : options.qs) pr.per_q.push_back(entropy_profile(probs, q));
    all.push_back(std::move(pr));
  };
  for (const auto& seq : split.members) add(seq, true);
  for (const auto& seq : split.nonmembers) add(seq, false);

  for (std::size_t qi = 0; qi < options.qs.size(); ++qi) {
    for (Span span : options.spans) {
      for (double k : options.k_percents) {
        std::vector<ScoreRecord> records;
        records.reserve(all.size());
        for (std::size_t i = 0; i < all.size(); ++i) {
          records.push_back(
              {i, all[i].member, max_renyi_score(span_slice(all[i].per_q[qi], span), k)});
        }
        out.push_back({target, k, options.qs[qi], span_name(span), auroc(records),
                       split.members.size(), split.nonmembers.size()});
      }
    }
  }
  return out;
}

}  // namespace fedrand

#endif  // FEDRAND_MIA_HPP
