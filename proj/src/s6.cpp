#include "clipseg/s6.hpp"

#include "clipseg/numkit/parallel.hpp"

#include <algorithm>
#include <cmath>

namespace clipseg::s6 {

using NodeList = std::vector<std::shared_ptr<detail::Node>>;

S6Params S6Params::init(const S6Config& config, Rng& rng) {
  if (config.channels < 1 || config.state < 1 || config.conv_width < 1) {
    throw std::invalid_argument("S6Config: dimensions must be positive");
  }
  S6Params p;
  p.channels = config.channels;
  p.state = config.state;
  p.rank = config.rank > 0 ? config.rank : std::max<Index>(1, config.channels / 16);
  const Index c = p.channels;

  // a_log[n, ch] = ln(n + 1), so A = -(1, 2, ..., state) per channel.
  Mat a_log(p.state, c);
  for (Index n = 0; n < p.state; ++n) a_log.row(n).setConstant(std::log(static_cast<double>(n + 1)));
  p.a_log = Var::parameter(std::move(a_log));

  p.conv_kernel = Var::parameter(rng.uniform_matrix(config.conv_width, c, -1.0, 1.0) /
                                 std::sqrt(static_cast<double>(config.conv_width)));
  p.c_proj = Var::parameter(rng.fan_in_uniform(c, p.state));
  p.b_proj = Var::parameter(rng.fan_in_uniform(c, p.state));
  p.dt_down = Var::parameter(rng.fan_in_uniform(c, p.rank));
  p.dt_up = Var::parameter(rng.fan_in_uniform(p.rank, c));

  p.dt_bias = Var::parameter(Mat::Zero(1, c));
  return p;
}

std::vector<Var> S6Params::parameters() const { return {a_log, conv_kernel, c_proj, b_proj, dt_down, dt_up, dt_bias}; }

std::vector<std::string> S6Params::parameter_names() const {
  return {"s6.a_log", "s6.conv_kernel", "s6.c_proj", "s6.b_proj", "s6.dt_down", "s6.dt_up", "s6.dt_bias"};
}

Mat S6Params::transition() const { return -a_log.value().array().exp().matrix(); }

// ---------------------------------------------------------------------------
// Precompute

Var discretize(const Var& delta, const Var& transition) {
  const Index len = delta.rows();
  const Index c = delta.cols();
  const Index state = transition.rows();
  if (transition.cols() != c) throw std::invalid_argument("discretize: channel mismatch");
  Mat out(len, state * c);
  for (Index s = 0; s < len; ++s) {
    for (Index n = 0; n < state; ++n) {
      out.row(s).segment(n * c, c) = (delta.value().row(s).array() * transition.value().row(n).array()).exp().matrix();
    }
  }
  return make_op(out, {delta, transition}, [out, state, c](const Mat& g, const NodeList& in) {
    const Mat& dv = in[0]->value;
    const Mat& av = in[1]->value;
    Mat gd = Mat::Zero(dv.rows(), c);
    Mat ga = Mat::Zero(state, c);
    for (Index s = 0; s < dv.rows(); ++s) {
      for (Index n = 0; n < state; ++n) {
        const auto ge = (g.row(s).segment(n * c, c).array() * out.row(s).segment(n * c, c).array());
        gd.row(s).array() += ge * av.row(n).array();
        ga.row(n).array() += ge * dv.row(s).array();
      }
    }
    if (in[0]->requires_grad) in[0]->accumulate(gd);
    if (in[1]->requires_grad) in[1]->accumulate(ga);
  });
}

Var outer_rows(const Var& u, const Var& v) {
  const Index len = u.rows();
  const Index c = u.cols();
  const Index state = v.cols();
  if (v.rows() != len) throw std::invalid_argument("outer_rows: length mismatch");
  Mat out(len, state * c);
  for (Index s = 0; s < len; ++s) {
    for (Index n = 0; n < state; ++n) out.row(s).segment(n * c, c) = u.value().row(s) * v.value()(s, n);
  }
  return make_op(std::move(out), {u, v}, [state, c](const Mat& g, const NodeList& in) {
    const Mat& uv = in[0]->value;
    const Mat& vv = in[1]->value;
    Mat gu = Mat::Zero(uv.rows(), c);
    Mat gv = Mat::Zero(vv.rows(), state);
    for (Index s = 0; s < uv.rows(); ++s) {
      for (Index n = 0; n < state; ++n) {
        const auto gs = g.row(s).segment(n * c, c);
        gu.row(s) += gs * vv(s, n);
        gv(s, n) = gs.dot(uv.row(s));
      }
    }
    if (in[0]->requires_grad) in[0]->accumulate(gu);
    if (in[1]->requires_grad) in[1]->accumulate(gv);
  });
}

S6WeightVars precompute(const Var& x, const S6Params& params) {
  if (x.rows() < 1) throw std::invalid_argument("s6 precompute: empty sequence");
  if (x.cols() != params.channels) {
    throw std::invalid_argument("s6 precompute: input has " + std::to_string(x.cols()) + " channels, params expect " +
                                std::to_string(params.channels));
  }
  const Var xc = silu(conv1d_depthwise(x, params.conv_kernel, kernels::Padding::Causal));
  S6WeightVars w;
  w.c_out = matmul(xc, params.c_proj);
  const Var delta = softplus(add_row(matmul(matmul(xc, params.dt_down), params.dt_up), params.dt_bias));
  const Var transition = scale(exp(params.a_log), -1.0);
  w.delta_a = discretize(delta, transition);
  w.delta_b = outer_rows(mul(xc, delta), matmul(xc, params.b_proj));
  return w;
}

S6Weights precompute(const Mat& x, const S6Params& params) {
  const S6WeightVars v = precompute(Var::constant(x), params);
  return S6Weights{params.state, params.channels, v.delta_a.value(), v.delta_b.value(), v.c_out.value()};
}

// ---------------------------------------------------------------------------
// Scan

ScanElement compose(const ScanElement& first, const ScanElement& second) {
  return ScanElement{first.a * second.a, first.b * second.a + second.b};
}

Mat hidden_states_sequential(const Mat& delta_a, const Mat& delta_b) {
  Mat h(delta_a.rows(), delta_a.cols());
  Eigen::ArrayXd state = Eigen::ArrayXd::Zero(delta_a.cols());
  for (Index s = 0; s < delta_a.rows(); ++s) {
    state = state * delta_a.row(s).transpose().array() + delta_b.row(s).transpose().array();
    h.row(s) = state.transpose();
  }
  return h;
}

Mat hidden_states_parallel(const Mat& delta_a, const Mat& delta_b) {
  const Index len = delta_a.rows();
  const Index width = delta_a.cols();
  Index padded = 1;
  while (padded < len) padded *= 2;

  Mat a = Mat::Ones(padded, width);
  Mat b = Mat::Zero(padded, width);
  a.topRows(len) = delta_a;
  b.topRows(len) = delta_b;

  // Up-sweep: node r accumulates its left sibling l (l precedes r in sequence).
  for (Index stride = 1; stride < padded; stride *= 2) {
    const auto pairs = static_cast<std::size_t>(padded / (2 * stride));
    parallel_for(0, pairs, [&, stride](std::size_t k) {
      const Index r = (static_cast<Index>(k) + 1) * 2 * stride - 1;
      const Index l = r - stride;
      b.row(r).array() += b.row(l).array() * a.row(r).array();
      a.row(r).array() *= a.row(l).array();
    });
  }

  // Down-sweep to exclusive prefixes.
  a.row(padded - 1).setOnes();
  b.row(padded - 1).setZero();
  for (Index stride = padded / 2; stride >= 1; stride /= 2) {
    const auto pairs = static_cast<std::size_t>(padded / (2 * stride));
    parallel_for(0, pairs, [&, stride](std::size_t k) {
      const Index r = (static_cast<Index>(k) + 1) * 2 * stride - 1;
      const Index l = r - stride;
      const Eigen::ArrayXd left_a = a.row(l).transpose().array();
      const Eigen::ArrayXd left_b = b.row(l).transpose().array();
      a.row(l) = a.row(r);
      b.row(l) = b.row(r);
      // prefix(r) = prefix-before-parent followed by the left subtree.
      b.row(r).array() = b.row(r).array() * left_a.transpose() + left_b.transpose();
      a.row(r).array() *= left_a.transpose();
    });
  }

  // Inclusive state: apply the step's own element to the exclusive prefix.
  Mat h(len, width);
  parallel_for(0, static_cast<std::size_t>(len), [&](std::size_t si) {
    const auto s = static_cast<Index>(si);
    h.row(s).array() = b.row(s).array() * delta_a.row(s).array() + delta_b.row(s).array();
  });
  return h;
}

Mat contract_output(const Mat& hidden, const Mat& c_out, Index state, Index channels) {
  Mat y = Mat::Zero(hidden.rows(), channels);
  for (Index s = 0; s < hidden.rows(); ++s) {
    for (Index n = 0; n < state; ++n) y.row(s) += c_out(s, n) * hidden.row(s).segment(n * channels, channels);
  }
  return y;
}

namespace {

void check_weights(const Mat& delta_a, const Mat& delta_b, const Mat& c_out, Index state, Index channels) {
  if (delta_a.cols() != state * channels || delta_b.rows() != delta_a.rows() || delta_b.cols() != delta_a.cols() ||
      c_out.rows() != delta_a.rows() || c_out.cols() != state) {
    throw std::invalid_argument("selective scan: inconsistent weight shapes");
  }
}

}  // namespace

Mat scan_sequential(const S6Weights& w) {
  check_weights(w.delta_a, w.delta_b, w.c_out, w.state, w.channels);
  return contract_output(hidden_states_sequential(w.delta_a, w.delta_b), w.c_out, w.state, w.channels);
}

Mat scan_parallel(const S6Weights& w) {
  check_weights(w.delta_a, w.delta_b, w.c_out, w.state, w.channels);
  return contract_output(hidden_states_parallel(w.delta_a, w.delta_b), w.c_out, w.state, w.channels);
}

Var selective_scan(const Var& delta_a, const Var& delta_b, const Var& c_out, Index state, Index channels,
                   ScanStrategy strategy) {
  check_weights(delta_a.value(), delta_b.value(), c_out.value(), state, channels);
  Mat hidden = strategy == ScanStrategy::Parallel ? hidden_states_parallel(delta_a.value(), delta_b.value())
                                                  : hidden_states_sequential(delta_a.value(), delta_b.value());
  Mat y = contract_output(hidden, c_out.value(), state, channels);
  return make_op(std::move(y), {delta_a, delta_b, c_out},
                 [hidden = std::move(hidden), state, channels](const Mat& gy, const NodeList& in) {
                   const Mat& da = in[0]->value;
                   const Mat& cv = in[2]->value;
                   const Index len = da.rows();
                   const Index width = state * channels;
                   Mat g_da(len, width);
                   Mat g_db(len, width);
                   Mat g_c(len, state);
                   Eigen::RowVectorXd carry = Eigen::RowVectorXd::Zero(width);
                   for (Index s = len - 1; s >= 0; --s) {
                     // dL/dh_s = C_s (x) gy_s + dL/dh_{s+1} * dA_{s+1}
                     Eigen::RowVectorXd gh = carry;
                     for (Index n = 0; n < state; ++n) {
                       gh.segment(n * channels, channels) += cv(s, n) * gy.row(s);
                       g_c(s, n) = hidden.row(s).segment(n * channels, channels).dot(gy.row(s));
                     }
                     g_db.row(s) = gh;
                     if (s > 0) {
                       g_da.row(s) = gh.cwiseProduct(hidden.row(s - 1));
                     } else {
                       g_da.row(s).setZero();
                     }
                     carry = gh.cwiseProduct(da.row(s));
                   }
                   if (in[0]->requires_grad) in[0]->accumulate(g_da);
                   if (in[1]->requires_grad) in[1]->accumulate(g_db);
                   if (in[2]->requires_grad) in[2]->accumulate(g_c);
                 });
}

Var forward(const Var& x, const S6Params& params, ScanStrategy strategy) {
  const S6WeightVars w = precompute(x, params);
  return selective_scan(w.delta_a, w.delta_b, w.c_out, params.state, params.channels, strategy);
}

}  // namespace clipseg::s6
