#include "clipseg/numkit/tensor.hpp"

#include "json.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <numeric>

namespace clipseg {
namespace {

constexpr char kMagic[4] = {'L', 'G', 'R', 'T'};
constexpr std::uint32_t kVersion = 1;

static_assert(std::endian::native == std::endian::little, "binary container assumes a little-endian host");

template <typename T>
void put(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw std::runtime_error("tensor file truncated");
  return v;
}

}  // namespace

std::size_t shape_product(std::span<const std::size_t> shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

Tensor::Tensor(std::vector<std::size_t> shape, double fill)
    : shape_(std::move(shape)), data_(shape_product(shape_), fill) {}

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_product(shape_) != data_.size()) {
    throw std::invalid_argument("tensor: shape product " + std::to_string(shape_product(shape_)) +
                                " != data length " + std::to_string(data_.size()));
  }
}

Tensor Tensor::from_matrix(const Mat& m) {
  return Tensor({static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())},
                std::vector<double>(m.data(), m.data() + m.size()));
}

Mat Tensor::to_matrix(Index rows, Index cols) const {
  if (static_cast<std::size_t>(rows * cols) != data_.size()) throw std::invalid_argument("tensor: matrix view size mismatch");
  return Eigen::Map<const Mat>(data_.data(), rows, cols);
}

std::size_t Tensor::flat_index(std::initializer_list<std::size_t> idx) const {
  if (idx.size() != shape_.size()) throw std::invalid_argument("tensor: index rank mismatch");
  std::size_t flat = 0;
  std::size_t axis = 0;
  for (std::size_t i : idx) {
    if (i >= shape_[axis]) throw std::out_of_range("tensor: index out of range");
    flat = flat * shape_[axis] + i;
    ++axis;
  }
  return flat;
}

double& Tensor::at(std::initializer_list<std::size_t> idx) { return data_[flat_index(idx)]; }
double Tensor::at(std::initializer_list<std::size_t> idx) const { return data_[flat_index(idx)]; }

Tensor Tensor::reshaped(std::vector<std::size_t> shape) const { return Tensor(std::move(shape), data_); }

void Tensor::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out.write(kMagic, 4);
  put<std::uint32_t>(out, kVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(shape_.size()));
  for (std::size_t e : shape_) put<std::uint64_t>(out, e);
  out.write(reinterpret_cast<const char*>(data_.data()), static_cast<std::streamsize>(data_.size() * sizeof(double)));
}

Tensor Tensor::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0) throw std::runtime_error(path.string() + ": not a tensor container");
  if (get<std::uint32_t>(in) != kVersion) throw std::runtime_error(path.string() + ": unsupported container version");
  const auto rank = get<std::uint32_t>(in);
  std::vector<std::size_t> shape(rank);
  for (auto& e : shape) e = static_cast<std::size_t>(get<std::uint64_t>(in));
  std::vector<double> data(shape_product(shape));
  in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(double)));
  if (!in) throw std::runtime_error(path.string() + ": payload truncated");
  return Tensor(std::move(shape), std::move(data));
}

std::string Tensor::to_json() const {
  nlohmann::json j;
  j["shape"] = shape_;
  j["data"] = data_;
  return j.dump();
}

Tensor Tensor::from_json(const std::string& text) {
  const auto j = nlohmann::json::parse(text);
  return Tensor(j.at("shape").get<std::vector<std::size_t>>(), j.at("data").get<std::vector<double>>());
}

}  // namespace clipseg
