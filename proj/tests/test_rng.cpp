// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include <vector>

#include "fedrand/rng.hpp"

using namespace fedrand;

TEST_CASE("identical (seed, path) yields bit-identical matrices") {
  RngStream a = RngStream(7).child("round", 3).child("client", 11).child("init");
  RngStream b = RngStream(7).child("round", 3).child("client", 11).child("init");
  Matrix ma = rand_normal(a, 8, 4, 0.02);
  Matrix mb = rand_normal(b, 8, 4, 0.02);
  REQUIRE(ma == mb);
}

TEST_CASE("child derivation is pure: drawing from the parent changes nothing") {
  RngStream parent(99);
  RngStream before = parent.child("x");
  for (int i = 0; i < 10; ++i) parent.next_u64();
  RngStream after = parent.child("x");
  REQUIRE(before.next_u64() == after.next_u64());
}

TEST_CASE("sibling streams differ") {
  RngStream parent(3);
  RngStream a = parent.child("alpha");
  RngStream b = parent.child("beta");
  Matrix ma = rand_normal(a, 4, 4, 1.0);
  Matrix mb = rand_normal(b, 4, 4, 1.0);
  REQUIRE(ma != mb);

  RngStream c0 = parent.child(0);
  RngStream c1 = parent.child(1);
  REQUIRE(c0.next_u64() != c1.next_u64());
}

TEST_CASE("normal samples obey the law of large numbers at the pinned seed") {
  RngStream s(20240601);
  const std::size_t n = 100000;
  double sum = 0.0, sum_sq = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double x = s.next_normal(1.0);
    sum += x;
    sum_sq += x * x;
  }
  const double mean = sum / static_cast<double>(n);
  const double var = sum_sq / static_cast<double>(n) - mean * mean;
  REQUIRE(std::fabs(mean) < 0.02);
  REQUIRE(std::fabs(var - 1.0) < 0.03);
}

TEST_CASE("uniform doubles stay in [0,1) and cover the range") {
  RngStream s(5);
  double lo = 1.0, hi = 0.0;
  for (int i = 0; i < 10000; ++i) {
    const double u = s.next_double();
    REQUIRE(u >= 0.0);
    REQUIRE(u < 1.0);
    lo = std::min(lo, u);
    hi = std::max(hi, u);
  }
  REQUIRE(lo < 0.01);
  REQUIRE(hi > 0.99);
}

TEST_CASE("next_below respects its bound") {
  RngStream s(77);
  for (int i = 0; i < 1000; ++i) {
    REQUIRE(s.next_below(12) < 12);
  }
  REQUIRE_THROWS_AS(s.next_below(0), ArgumentError);
}

TEST_CASE("rand_normal rejects nonpositive stddev") {
  RngStream s(1);
  REQUIRE_THROWS_AS(rand_normal(s, 2, 2, 0.0), ArgumentError);
  REQUIRE_THROWS_AS(rand_normal(s, 2, 2, -1.0), ArgumentError);
  REQUIRE_THROWS_AS(s.next_normal(-0.5), ArgumentError);
}

TEST_CASE("shuffle is deterministic per stream and permutes") {
  std::vector<int> v1{0, 1, 2, 3, 4, 5, 6, 7};
  std::vector<int> v2 = v1;
  RngStream(13).child("shuffle").shuffle(v1);
  RngStream(13).child("shuffle").shuffle(v2);
  REQUIRE(v1 == v2);
  std::vector<int> sorted = v1;
  std::sort(sorted.begin(), sorted.end());
  REQUIRE(sorted == std::vector<int>{0, 1, 2, 3, 4, 5, 6, 7});
}
