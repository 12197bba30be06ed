#pragma once

#include "clipseg/numkit/types.hpp"

#include <cstdint>

namespace clipseg {

/// Counter-based generator: sample k of stream `seed` is
/// splitmix64(seed * 0x9E3779B97F4A7C15 + k). Streams are reproducible
/// bit-for-bit and can be split without shared state.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : seed_(seed) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t counter() const { return counter_; }

  std::uint64_t next_u64();
  /// Uniform in [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);
  /// Standard normal via Box-Muller (one draw consumes two counters).
  double normal();
  /// Normal(0, stddev) resampled until it falls within +-2 stddev.
  double truncated_normal(double stddev);

  Mat uniform_matrix(Index rows, Index cols, double lo, double hi);
  Mat normal_matrix(Index rows, Index cols, double stddev = 1.0);
  Mat truncated_normal_matrix(Index rows, Index cols, double stddev);
  /// Glorot uniform for an (in x out) weight: U(-a, a), a = sqrt(6 / (in + out)).
  Mat xavier_uniform(Index in, Index out);
  /// U(-1/sqrt(in), 1/sqrt(in)) for an (in x out) weight.
  Mat fan_in_uniform(Index in, Index out);

  /// Independent child stream derived from this stream's seed and `stream`.
  Rng split(std::uint64_t stream) const;

 private:
  std::uint64_t seed_;
  std::uint64_t counter_ = 0;
};

std::uint64_t splitmix64(std::uint64_t x);

}  // namespace clipseg
