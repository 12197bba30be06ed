#pragma once

#include "clipseg/numkit/types.hpp"

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace clipseg {

/// Dense row-major n-dimensional array of doubles.
///
/// Binary container layout (all little-endian):
///   bytes 0..3   magic "CSGT"
///   bytes 4..7   u32 format version (1)
///   bytes 8..11  u32 rank
///   next 8*rank  u64 extents
///   remainder    f64 payload, product(extents) values, row-major
///
/// JSON form: {"shape": [...], "data": [...]}.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> shape, double fill = 0.0);
  Tensor(std::vector<std::size_t> shape, std::vector<double> data);

  static Tensor from_matrix(const Mat& m);
  /// Views the buffer as a (rows x cols) matrix; rows*cols must equal size().
  Mat to_matrix(Index rows, Index cols) const;

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  std::span<const double> data() const { return data_; }
  std::span<double> data() { return data_; }

  double& at(std::initializer_list<std::size_t> idx);
  double at(std::initializer_list<std::size_t> idx) const;
  double& operator[](std::size_t flat) { return data_[flat]; }
  double operator[](std::size_t flat) const { return data_[flat]; }

  Tensor reshaped(std::vector<std::size_t> shape) const;

  void save(const std::filesystem::path& path) const;
  static Tensor load(const std::filesystem::path& path);
  std::string to_json() const;
  static Tensor from_json(const std::string& text);

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  std::size_t flat_index(std::initializer_list<std::size_t> idx) const;

  std::vector<std::size_t> shape_;
  std::vector<double> data_;
};

std::size_t shape_product(std::span<const std::size_t> shape);

}  // namespace clipseg
