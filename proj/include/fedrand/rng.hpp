// SPDX-License-Identifier: Apache-2.0
#ifndef FEDRAND_RNG_HPP
#define FEDRAND_RNG_HPP

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>
#include <vector>

#include "fedrand/errors.hpp"
#include "fedrand/matrix.hpp"

namespace fedrand {

// Deterministic counter-based random stream with hierarchical derivation.
//
// Every stream is identified by a 64-bit key. Child streams are derived by
// mixing a label (integer or string) into the parent key; derivation is pure,
// so the same (seed, path) always names the same byte stream, independent of
// how many values the parent has drawn. Output values come from running the
// splitmix64 finalizer over (key, counter).
class RngStream {
 public:
  explicit RngStream(std::uint64_t seed) : key_(mix64(seed ^ kDomain, 0)), counter_(0) {}

  RngStream child(std::uint64_t label) const { return RngStream(mix64(key_, label + 1), 0); }

  RngStream child(std::string_view label) const {
    return RngStream(mix64(key_, fnv1a64(label)), 0);
  }

  RngStream child(std::string_view label, std::uint64_t index) const {
    return child(label).child(index);
  }

  std::uint64_t key() const { return key_; }

  std::uint64_t next_u64() { return mix64(key_, ++counter_); }

  // Uniform in [0, 1), 53-bit resolution.
  double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform integer in [0, n) via the multiply-shift reduction.
  std::uint64_t next_below(std::uint64_t n) {
    if (n == 0) throw ArgumentError("next_below: n must be positive");
    return static_cast<std::uint64_t>((static_cast<unsigned __int128>(next_u64()) * n) >> 64);
  }

  // Standard normal via Box-Muller. Uses 1-u to keep the log argument in (0,1].
  double next_normal() {
    const double u1 = 1.0 - next_double();
    const double u2 = next_double();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  double next_normal(double stddev) {
    if (!(stddev > 0.0)) {
      throw ArgumentError("next_normal: stddev must be positive");
    }
    return stddev * next_normal();
  }

  // Fisher-Yates shuffle.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(next_below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  RngStream(std::uint64_t key, std::uint64_t counter) : key_(key), counter_(counter) {}

  // splitmix64 finalizer over a keyed counter; avalanches all 64 bits.
  static std::uint64_t mix64(std::uint64_t key, std::uint64_t n) {
    std::uint64_t z = key + n * 0x9E3779B97F4A7C15ull + 0x9E3779B97F4A7C15ull;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  static std::uint64_t fnv1a64(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : s) {
      h ^= c;
      h *= 0x100000001b3ull;
    }
    return h;
  }

  static constexpr std::uint64_t kDomain = 0x66656472616e6431ull;  // "fedrand1"

  std::uint64_t key_;
  std::uint64_t counter_;
};

// I.i.d. zero-mean normal entries; identical output for identical
// (stream, shape, stddev).
inline Matrix rand_normal(RngStream& stream, std::size_t rows, std::size_t cols, double stddev) {
  if (!(stddev > 0.0)) {
    throw ArgumentError("rand_normal: stddev must be positive");
  }
  Matrix m(rows, cols);
  for (double& v : m.data()) v = stddev * stream.next_normal();
  return m;
}

}  // namespace fedrand

#endif  // FEDRAND_RNG_HPP
