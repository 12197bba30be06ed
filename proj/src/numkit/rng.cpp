#include "clipseg/numkit/rng.hpp"

#include <cmath>
#include <numbers>

namespace clipseg {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

std::uint64_t Rng::next_u64() { return splitmix64(seed_ * 0x9E3779B97F4A7C15ULL + counter_++); }

double Rng::uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

std::uint64_t Rng::below(std::uint64_t n) {
  // Rejection keeps the draw unbiased.
  const std::uint64_t limit = n == 0 ? 0 : (~std::uint64_t{0} / n) * n;
  std::uint64_t v = next_u64();
  while (v >= limit) v = next_u64();
  return v % n;
}

double Rng::normal() {
  double u1 = uniform();
  const double u2 = uniform();
  if (u1 <= 0.0) u1 = 0x1.0p-53;
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

double Rng::truncated_normal(double stddev) {
  double v = normal();
  while (std::abs(v) > 2.0) v = normal();
  return v * stddev;
}

Mat Rng::uniform_matrix(Index rows, Index cols, double lo, double hi) {
  Mat m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = uniform(lo, hi);
  return m;
}

Mat Rng::normal_matrix(Index rows, Index cols, double stddev) {
  Mat m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = stddev * normal();
  return m;
}

Mat Rng::truncated_normal_matrix(Index rows, Index cols, double stddev) {
  Mat m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = truncated_normal(stddev);
  return m;
}

Mat Rng::xavier_uniform(Index in, Index out) {
  const double a = std::sqrt(6.0 / static_cast<double>(in + out));
  return uniform_matrix(in, out, -a, a);
}

Mat Rng::fan_in_uniform(Index in, Index out) {
  const double a = 1.0 / std::sqrt(static_cast<double>(in));
  return uniform_matrix(in, out, -a, a);
}

Rng Rng::split(std::uint64_t stream) const { return Rng(splitmix64(seed_ ^ splitmix64(stream + 0x5851F42D4C957F2DULL))); }

}  // namespace clipseg
