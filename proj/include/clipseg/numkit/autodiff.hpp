#pragma once

// Tape-based reverse-mode differentiation over row-major matrices.
//
// Values flow through `Var` handles. While a `Tape` is alive on the current
// thread, every op with at least one grad-requiring input appends a node to
// it; creation order is a valid topological order, so backpropagation is a
// single reverse sweep. Without an active tape ops only compute values.

#include "clipseg/numkit/kernels.hpp"
#include "clipseg/numkit/types.hpp"

#include <functional>
#include <memory>
#include <span>
#include <vector>

namespace clipseg {

namespace detail {

struct Node {
  Mat value;
  Mat grad;  // empty until reached by the backward sweep
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(const Mat&)> backward;

  void accumulate(const Mat& g);
};

}  // namespace detail

class Var {
 public:
  Var() = default;
  explicit Var(Mat value, bool requires_grad = false);

  /// Leaf enrolled for differentiation.
  static Var parameter(Mat value) { return Var(std::move(value), true); }
  static Var constant(Mat value) { return Var(std::move(value), false); }

  bool defined() const { return node_ != nullptr; }
  const Mat& value() const { return node_->value; }
  /// In-place access for optimizer updates and finite-difference probes.
  Mat& mutable_value() { return node_->value; }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  Index rows() const { return node_->value.rows(); }
  Index cols() const { return node_->value.cols(); }
  double item() const;

  const std::shared_ptr<detail::Node>& node() const { return node_; }
  static Var from_node(std::shared_ptr<detail::Node> node);

 private:
  std::shared_ptr<detail::Node> node_;
};

class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// The innermost live tape of this thread, or nullptr.
  static Tape* active();

  void record(std::shared_ptr<detail::Node> node);
  std::size_t size() const { return nodes_.size(); }

  /// d(root)/d(param) for each param. Throws std::invalid_argument when the
  /// root is not 1x1 or a param is not enrolled for differentiation.
  std::vector<Mat> gradient(const Var& root, std::span<const Var> params);

 private:
  std::vector<std::shared_ptr<detail::Node>> nodes_;
  Tape* previous_;
};

/// Builds an op result. `backward` receives the upstream gradient and must
/// push contributions into the input nodes that require grad. The value is
/// checked for finiteness.
Var make_op(Mat value, std::vector<Var> inputs, std::function<void(const Mat&, const std::vector<std::shared_ptr<detail::Node>>&)> backward);

// Linear algebra
Var matmul(const Var& a, const Var& b);
Var transpose(const Var& a);

// Elementwise (equal shapes)
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);

// Row broadcasting: `row` is 1 x cols(a)
Var add_row(const Var& a, const Var& row);
Var mul_row(const Var& a, const Var& row);

// Reductions
Var sum(const Var& a);
Var mean(const Var& a);
/// Sum along each row: (r x c) -> (r x 1).
Var row_sum(const Var& a);

// Pointwise nonlinearities
Var exp(const Var& a);
Var log(const Var& a);
Var sigmoid(const Var& a);
Var silu(const Var& a);
Var softplus(const Var& a);
Var square(const Var& a);
/// Gradient is zero where the input lies outside [lo, hi].
Var clamp(const Var& a, double lo, double hi);

// Normalization along rows
Var softmax_rows(const Var& a);
Var log_softmax_rows(const Var& a);
Var group_normalize(const Var& x, Index groups, double eps = kernels::kNormEps);
Var layer_normalize(const Var& x, double eps = kernels::kNormEps);
Var group_norm(const Var& x, Index groups, const Var& scale, const Var& shift);
Var layer_norm(const Var& x, const Var& scale, const Var& shift);

Var conv1d_depthwise(const Var& x, const Var& kernel, kernels::Padding padding = kernels::Padding::Same);

// Structural
Var gather_rows(const Var& x, std::span<const Index> rows);
/// out.flat[i] = x.flat[index[i]], shaped (rows x cols). Backward scatter-adds.
Var gather_flat(const Var& x, std::span<const Index> index, Index rows, Index cols);
Var concat_rows(std::span<const Var> parts);
Var concat_cols(std::span<const Var> parts);
Var slice_rows(const Var& x, Index begin, Index count);
Var slice_cols(const Var& x, Index begin, Index count);

}  // namespace clipseg
