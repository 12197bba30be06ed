#pragma once

// Selective state-space block: input-dependent weight precomputation followed
// by the diagonal linear recurrence h_s = h_{s-1} * dA_s + dB_s, y_s = <C_s, h_s>.

#include "clipseg/numkit/autodiff.hpp"
#include "clipseg/numkit/rng.hpp"

#include <string>
#include <vector>

namespace clipseg::s6 {

enum class ScanStrategy { Sequential, Parallel };

struct S6Config {
  Index channels = 64;
  Index state = 16;
  /// 0 selects max(1, channels / 16).
  Index rank = 0;
  Index conv_width = 4;
};

struct S6Params {
  Index channels = 0;
  Index state = 0;
  Index rank = 0;
  Var a_log;        // state x c, A = -exp(a_log)
  Var conv_kernel;  // K x c, causal depthwise
  Var c_proj;       // c x state
  Var b_proj;       // c x state
  Var dt_down;      // c x rank
  Var dt_up;        // rank x c
  Var dt_bias;      // 1 x c

  static S6Params init(const S6Config& config, Rng& rng);

  std::vector<Var> parameters() const;
  std::vector<std::string> parameter_names() const;
  /// Effective negative transition matrix A.
  Mat transition() const;
};

/// Precomputed dynamic weights. The (state x c) slice of step s is stored
/// row-major in row s of delta_a / delta_b.
struct S6Weights {
  Index state = 0;
  Index channels = 0;
  Mat delta_a;  // S x (state*c)
  Mat delta_b;  // S x (state*c)
  Mat c_out;    // S x state

  Index length() const { return delta_a.rows(); }
};

struct S6WeightVars {
  Var delta_a;
  Var delta_b;
  Var c_out;
};

S6WeightVars precompute(const Var& x, const S6Params& params);
S6Weights precompute(const Mat& x, const S6Params& params);

/// One element of the recurrence: h -> h * a + b.
struct ScanElement {
  Eigen::ArrayXd a;
  Eigen::ArrayXd b;
};

/// Applies `first` then `second`: (a1 * a2, b1 * a2 + b2).
ScanElement compose(const ScanElement& first, const ScanElement& second);

/// Hidden states h_1..h_S as an S x (state*c) matrix.
Mat hidden_states_sequential(const Mat& delta_a, const Mat& delta_b);
/// Work-efficient up-sweep/down-sweep prefix scan over the composition
/// monoid, padded with identities to a power of two. Levels are split across
/// workers; the tree shape does not depend on the worker count.
Mat hidden_states_parallel(const Mat& delta_a, const Mat& delta_b);

/// y_s = sum_n C[s, n] * h_s[n, :].
Mat contract_output(const Mat& hidden, const Mat& c_out, Index state, Index channels);

Mat scan_sequential(const S6Weights& w);
Mat scan_parallel(const S6Weights& w);

/// Differentiable scan; gradients come from the reverse recurrence.
Var selective_scan(const Var& delta_a, const Var& delta_b, const Var& c_out, Index state, Index channels,
                   ScanStrategy strategy = ScanStrategy::Parallel);

/// exp(delta[s, ch] * A[n, ch]) laid out as S x (state*c).
Var discretize(const Var& delta, const Var& transition);
/// u[s, ch] * v[s, n] laid out as S x (state*c).
Var outer_rows(const Var& u, const Var& v);

/// Precompute followed by scan.
Var forward(const Var& x, const S6Params& params, ScanStrategy strategy = ScanStrategy::Parallel);

}  // namespace clipseg::s6
