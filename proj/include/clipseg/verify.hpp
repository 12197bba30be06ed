#pragma once

// Finite-difference gradient suite over every parameterized operation,
// shared by the CLI and the acceptance runner.

#include "clipseg/layers.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace clipseg::verify {

struct OpCheck {
  std::string op;
  /// Parameter group with the largest relative error.
  std::string worst;
  double rel_error = 0.0;
  double tolerance = 0.0;
  std::size_t groups = 0;
  bool passed() const { return rel_error <= tolerance; }
};

inline constexpr double kOpTolerance = 1e-5;
inline constexpr double kModelTolerance = 1e-4;

/// Ops run on tiny random shapes with every parameter jittered away from its
/// initial value; loss = sum(output * fixed random probe).
std::vector<OpCheck> op_gradchecks(std::uint64_t seed);

/// Matched loss of the micro model on a synthetic clip, every entry probed.
OpCheck model_gradcheck(std::uint64_t seed);

/// Adds N(0, stddev^2) noise to every entry of every parameter.
void jitter(NamedParams& params, Rng& rng, double stddev);

}  // namespace clipseg::verify
