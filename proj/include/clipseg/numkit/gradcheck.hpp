#pragma once

#include "clipseg/numkit/autodiff.hpp"
#include "clipseg/numkit/rng.hpp"

#include <functional>
#include <span>
#include <string>
#include <vector>

namespace clipseg {

struct GradCheckOptions {
  double step = 1e-5;
  double tolerance = 1e-5;
  /// Gradients whose analytic and numeric norms both fall below this are
  /// treated as matching (finite differences cannot resolve them).
  double abs_floor = 1e-9;
  /// Entries probed per parameter; 0 probes every entry.
  std::size_t max_entries = 0;
  std::uint64_t seed = 0;
};

struct ParamCheck {
  std::string name;
  double rel_error = 0.0;
  double analytic_norm = 0.0;
  double numeric_norm = 0.0;
};

struct GradCheckReport {
  std::vector<ParamCheck> params;
  double max_rel_error = 0.0;
  bool passed = false;
};

/// Compares tape gradients of `loss` with central finite differences.
/// `loss` must rebuild the computation from the current parameter values on
/// every call. Relative error is measured per parameter over the probed
/// entries: |g_tape - g_fd| / max(|g_tape|, |g_fd|).
GradCheckReport check_gradients(const std::function<Var()>& loss, std::span<Var> params,
                                std::span<const std::string> names, const GradCheckOptions& options = {});

}  // namespace clipseg
