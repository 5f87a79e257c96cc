#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>

namespace sslseg {

/// Counter-based deterministic PRNG.
///
/// Every draw is a pure hash of (seed, stream_id, counter), so two generators
/// constructed with the same key produce the same sequence on every platform
/// and independent streams can be handed to parallel workers without
/// coordination. Keyed per sample as (global_seed, sample_index).
class Rng {
 public:
  Rng(std::uint64_t seed, std::uint64_t stream_id)
      : seed_(seed), stream_(stream_id) {}

  /// splitmix64 finalizer; full-avalanche 64-bit mixer.
  static constexpr std::uint64_t mix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
  }

  /// Folds extra identifiers into a stream id (e.g. (step, sample), phases).
  static constexpr std::uint64_t compose(std::uint64_t a, std::uint64_t b) {
    return mix64(a ^ 0x6a09e667f3bcc909ull ^ mix64(b));
  }
  static constexpr std::uint64_t compose(std::uint64_t a, std::uint64_t b,
                                         std::uint64_t c) {
    return compose(compose(a, b), c);
  }

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream() const { return stream_; }

  std::uint64_t next_u64() {
    return mix64(seed_ ^ mix64(stream_ ^ mix64(counter_++)));
  }

  /// Uniform double in [0, 1) with 53 random bits.
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  /// Uniform double in [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [lo, hi], inclusive, bias-free by rejection.
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
    if (lo > hi) throw std::invalid_argument("uniform_int: lo > hi");
    const std::uint64_t range =
        static_cast<std::uint64_t>(hi - lo) + 1;  // 0 means full 2^64
    if (range == 0) return static_cast<std::int64_t>(next_u64());
    const std::uint64_t threshold = (-range) % range;
    for (;;) {
      const std::uint64_t x = next_u64();
      if (x >= threshold) return lo + static_cast<std::int64_t>(x % range);
    }
  }

  bool bernoulli(double p) { return uniform() < p; }

  /// Standard normal via Box-Muller; pairs are cached.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double u1 = std::fmax(uniform(), 0x1.0p-60);
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  double normal(double mean, double sigma) { return mean + sigma * normal(); }

 private:
  std::uint64_t seed_;
  std::uint64_t stream_;
  std::uint64_t counter_ = 0;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace sslseg
