#pragma once

#include <Eigen/Dense>

#include <stdexcept>
#include <string>

namespace clipseg {

using Index = Eigen::Index;

/// Row-major dense matrix. Token-major layouts (rows = positions, cols =
/// channels) make the flat buffer match the documented tensor layout.
template <typename Scalar>
using MatrixR = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using Mat = MatrixR<double>;
using RowVec = Eigen::Matrix<double, 1, Eigen::Dynamic>;

/// Raised when a kernel produces NaN/Inf or a training run diverges.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace clipseg
