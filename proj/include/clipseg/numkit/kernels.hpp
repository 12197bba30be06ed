#pragma once

// Value-level kernels. All are pure functions of their arguments and accept
// any Eigen expression; results are row-major.

#include "clipseg/numkit/parallel.hpp"
#include "clipseg/numkit/types.hpp"

#include <cmath>
#include <concepts>
#include <stdexcept>

namespace clipseg::kernels {

enum class Axis { Rows = 0, Cols = 1 };
enum class Padding { Same, Causal };

inline constexpr double kNormEps = 1e-5;

/// Plain product with per-entry accumulation in index order over the inner
/// extent, so results match a naive triple loop bit for bit.
template <typename DA, typename DB>
MatrixR<typename DA::Scalar> matmul(const Eigen::MatrixBase<DA>& a, const Eigen::MatrixBase<DB>& b) {
  using Scalar = typename DA::Scalar;
  if (a.cols() != b.rows()) {
    throw std::invalid_argument("matmul: inner extents differ (" + std::to_string(a.cols()) + " vs " +
                                std::to_string(b.rows()) + ")");
  }
  const MatrixR<Scalar> lhs = a;
  const MatrixR<Scalar> rhs = b;
  MatrixR<Scalar> out = MatrixR<Scalar>::Zero(lhs.rows(), rhs.cols());
  const Index inner = lhs.cols();
  auto row_kernel = [&](std::size_t i) {
    auto dst = out.row(static_cast<Index>(i));
    for (Index k = 0; k < inner; ++k) {
      const Scalar s = lhs(static_cast<Index>(i), k);
      if (s != Scalar(0)) dst.noalias() += s * rhs.row(k);
    }
  };
  const std::size_t work = static_cast<std::size_t>(lhs.rows() * inner * rhs.cols());
  if (work < (1u << 16)) {
    for (Index i = 0; i < lhs.rows(); ++i) row_kernel(static_cast<std::size_t>(i));
  } else {
    parallel_for(0, static_cast<std::size_t>(lhs.rows()), row_kernel, 8);
  }
  return out;
}

/// Max-shifted softmax along `axis`.
template <typename D>
MatrixR<typename D::Scalar> softmax(const Eigen::MatrixBase<D>& x, Axis axis = Axis::Cols) {
  using Scalar = typename D::Scalar;
  MatrixR<Scalar> m = x;
  if (axis == Axis::Rows) m.transposeInPlace();
  if (m.cols() == 0) throw std::invalid_argument("softmax: empty axis");
  for (Index r = 0; r < m.rows(); ++r) {
    auto row = m.row(r);
    const Scalar mx = row.maxCoeff();
    row = (row.array() - mx).exp();
    row /= row.sum();
  }
  if (axis == Axis::Rows) m.transposeInPlace();
  return m;
}

template <typename D>
MatrixR<typename D::Scalar> log_softmax(const Eigen::MatrixBase<D>& x) {
  using Scalar = typename D::Scalar;
  MatrixR<Scalar> m = x;
  if (m.cols() == 0) throw std::invalid_argument("log_softmax: empty axis");
  for (Index r = 0; r < m.rows(); ++r) {
    auto row = m.row(r);
    const Scalar mx = row.maxCoeff();
    const Scalar lse = mx + std::log((row.array() - mx).exp().sum());
    row.array() -= lse;
  }
  return m;
}

template <std::floating_point Scalar>
Scalar sigmoid(Scalar v) {
  if (v >= 0) return Scalar(1) / (Scalar(1) + std::exp(-v));
  const Scalar e = std::exp(v);
  return e / (Scalar(1) + e);
}

template <std::floating_point Scalar>
Scalar softplus(Scalar v) {
  // log1p(exp(v)) loses everything past ~36; beyond that the linear asymptote
  // is exact in double precision.
  if (v > Scalar(36)) return v + std::exp(-v);
  if (v < Scalar(-36)) return std::exp(v);
  return std::log1p(std::exp(v));
}

template <typename D>
MatrixR<typename D::Scalar> sigmoid(const Eigen::MatrixBase<D>& x) {
  return x.unaryExpr([](typename D::Scalar v) { return sigmoid(v); });
}

template <typename D>
MatrixR<typename D::Scalar> silu(const Eigen::MatrixBase<D>& x) {
  return x.unaryExpr([](typename D::Scalar v) { return v * sigmoid(v); });
}

template <typename D>
MatrixR<typename D::Scalar> softplus(const Eigen::MatrixBase<D>& x) {
  return x.unaryExpr([](typename D::Scalar v) { return softplus(v); });
}

/// Depthwise correlation along the sequence axis of an (S x c) input with a
/// (K x c) kernel. Same padding centres the window (K must be odd); causal
/// padding places K-1 zeros before the sequence.
template <typename DX, typename DK>
MatrixR<typename DX::Scalar> conv1d_depthwise(const Eigen::MatrixBase<DX>& x, const Eigen::MatrixBase<DK>& kernel,
                                              Padding padding = Padding::Same) {
  using Scalar = typename DX::Scalar;
  const Index len = x.rows();
  const Index width = kernel.rows();
  if (kernel.cols() != x.cols()) throw std::invalid_argument("conv1d_depthwise: channel mismatch");
  if (width < 1) throw std::invalid_argument("conv1d_depthwise: empty kernel");
  if (padding == Padding::Same && width % 2 == 0) {
    throw std::invalid_argument("conv1d_depthwise: same padding needs an odd kernel width");
  }
  const Index offset = padding == Padding::Same ? (width - 1) / 2 : width - 1;
  MatrixR<Scalar> out = MatrixR<Scalar>::Zero(len, x.cols());
  for (Index s = 0; s < len; ++s) {
    for (Index j = 0; j < width; ++j) {
      const Index src = s + j - offset;
      if (src < 0 || src >= len) continue;
      out.row(s).array() += kernel.row(j).array() * x.row(src).array();
    }
  }
  return out;
}

/// Pre-affine group normalization of an (HW x c) map: each group of c/groups
/// channels is normalized over all positions and its channels.
template <typename D>
MatrixR<typename D::Scalar> group_normalize(const Eigen::MatrixBase<D>& x, Index groups, double eps = kNormEps) {
  using Scalar = typename D::Scalar;
  if (groups < 1 || x.cols() % groups != 0) {
    throw std::invalid_argument("group_norm: " + std::to_string(x.cols()) + " channels not divisible into " +
                                std::to_string(groups) + " groups");
  }
  MatrixR<Scalar> out = x;
  const Index per = x.cols() / groups;
  for (Index g = 0; g < groups; ++g) {
    auto block = out.middleCols(g * per, per);
    const Scalar n = static_cast<Scalar>(block.size());
    const Scalar mean = block.sum() / n;
    const Scalar var = (block.array() - mean).square().sum() / n;
    block = ((block.array() - mean) / std::sqrt(var + eps)).matrix();
  }
  return out;
}

template <typename D, typename DG, typename DB>
MatrixR<typename D::Scalar> group_norm(const Eigen::MatrixBase<D>& x, Index groups, const Eigen::MatrixBase<DG>& scale,
                                       const Eigen::MatrixBase<DB>& shift, double eps = kNormEps) {
  MatrixR<typename D::Scalar> y = group_normalize(x, groups, eps);
  y.array().rowwise() *= scale.array().reshaped(1, y.cols());
  y.array().rowwise() += shift.array().reshaped(1, y.cols());
  return y;
}

/// Per-row normalization over channels (pre-affine).
template <typename D>
MatrixR<typename D::Scalar> layer_normalize(const Eigen::MatrixBase<D>& x, double eps = kNormEps) {
  using Scalar = typename D::Scalar;
  MatrixR<Scalar> out = x;
  const Scalar n = static_cast<Scalar>(x.cols());
  for (Index r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    const Scalar mean = row.sum() / n;
    const Scalar var = (row.array() - mean).square().sum() / n;
    row = ((row.array() - mean) / std::sqrt(var + eps)).matrix();
  }
  return out;
}

}  // namespace clipseg::kernels
