#include <doctest.h>

#include <cmath>
#include <vector>

#include "sslseg/rng.hpp"

using sslseg::Rng;

TEST_SUITE("rng") {

TEST_CASE("same key reproduces the same draw sequence") {
  Rng a(1234, 77), b(1234, 77);
  for (int i = 0; i < 10000; ++i) REQUIRE(a.next_u64() == b.next_u64());
}

TEST_CASE("distinct streams decorrelate") {
  Rng a(1234, 0), b(1234, 1);
  int equal = 0;
  for (int i = 0; i < 1000; ++i)
    if (a.next_u64() == b.next_u64()) ++equal;
  CHECK(equal == 0);
}

TEST_CASE("uniform stays in [0,1) and covers the range") {
  Rng rng(42, 0);
  double lo = 1.0, hi = 0.0;
  for (int i = 0; i < 20000; ++i) {
    const double u = rng.uniform();
    REQUIRE(u >= 0.0);
    REQUIRE(u < 1.0);
    lo = std::min(lo, u);
    hi = std::max(hi, u);
  }
  CHECK(lo < 0.001);
  CHECK(hi > 0.999);
}

TEST_CASE("uniform_int is uniform by chi-square") {
  Rng rng(7, 0);
  const int n = 60000, bins = 6;
  std::vector<int> counts(bins, 0);
  for (int i = 0; i < n; ++i) ++counts[rng.uniform_int(0, bins - 1)];
  const double expected = static_cast<double>(n) / bins;
  double chi2 = 0.0;
  for (const int c : counts) chi2 += (c - expected) * (c - expected) / expected;
  CHECK(chi2 < 20.515);  // df=5, alpha=0.001
}

TEST_CASE("uniform_int honors inclusive bounds") {
  Rng rng(9, 3);
  for (int i = 0; i < 1000; ++i) {
    const auto v = rng.uniform_int(-3, 4);
    REQUIRE(v >= -3);
    REQUIRE(v <= 4);
  }
  CHECK(rng.uniform_int(5, 5) == 5);
  CHECK_THROWS_AS((void)rng.uniform_int(2, 1), std::invalid_argument);
}

TEST_CASE("normal has roughly standard moments") {
  Rng rng(11, 0);
  const int n = 50000;
  double sum = 0.0, sq = 0.0;
  for (int i = 0; i < n; ++i) {
    const double x = rng.normal();
    sum += x;
    sq += x * x;
  }
  const double mean = sum / n;
  const double var = sq / n - mean * mean;
  CHECK(std::abs(mean) < 0.02);
  CHECK(std::abs(var - 1.0) < 0.03);
}

TEST_CASE("compose gives order-sensitive stream ids") {
  CHECK(Rng::compose(1, 2) != Rng::compose(2, 1));
  CHECK(Rng::compose(1, 2, 3) != Rng::compose(1, 3, 2));
}

}  // TEST_SUITE
