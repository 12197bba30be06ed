#include "clipseg/layers.hpp"

#include <cmath>
#include <numbers>

namespace clipseg {

std::size_t NamedParams::scalar_count() const {
  std::size_t n = 0;
  for (const auto& v : vars) n += static_cast<std::size_t>(v.value().size());
  return n;
}

LinearParams LinearParams::init(Index in, Index out, Rng& rng, bool with_bias) {
  LinearParams p;
  p.weight = Var::parameter(rng.xavier_uniform(in, out));
  if (with_bias) p.bias = Var::parameter(Mat::Zero(1, out));
  return p;
}

void LinearParams::collect(const std::string& prefix, NamedParams& out) const {
  out.add(prefix + ".weight", weight);
  if (bias.defined()) out.add(prefix + ".bias", bias);
}

Var linear(const Var& x, const LinearParams& p) {
  Var y = matmul(x, p.weight);
  return p.bias.defined() ? add_row(y, p.bias) : y;
}

NormParams NormParams::init(Index channels) {
  return NormParams{Var::parameter(Mat::Ones(1, channels)), Var::parameter(Mat::Zero(1, channels))};
}

void NormParams::collect(const std::string& prefix, NamedParams& out) const {
  out.add(prefix + ".scale", scale);
  out.add(prefix + ".shift", shift);
}

Var layer_norm(const Var& x, const NormParams& p) { return layer_norm(x, p.scale, p.shift); }

AttentionParams AttentionParams::init(Index channels, Index heads, Rng& rng) {
  if (heads < 1 || channels % heads != 0) {
    throw std::invalid_argument("attention: " + std::to_string(channels) + " channels not divisible by " +
                                std::to_string(heads) + " heads");
  }
  AttentionParams p;
  p.heads = heads;
  p.w_q = Var::parameter(rng.xavier_uniform(channels, channels));
  p.w_k = Var::parameter(rng.xavier_uniform(channels, channels));
  p.w_v = Var::parameter(rng.xavier_uniform(channels, channels));
  p.w_o = Var::parameter(rng.xavier_uniform(channels, channels));
  return p;
}

void AttentionParams::collect(const std::string& prefix, NamedParams& out) const {
  out.add(prefix + ".w_q", w_q);
  out.add(prefix + ".w_k", w_k);
  out.add(prefix + ".w_v", w_v);
  out.add(prefix + ".w_o", w_o);
}

double logit_scale(Index channels, Index heads, LogitScale mode) {
  const Index dim = mode == LogitScale::PerHead ? channels / heads : channels;
  return 1.0 / std::sqrt(static_cast<double>(dim));
}

Var attention(const Var& queries, const Var& keys, const Var& values, const AttentionParams& p, LogitScale mode) {
  if (keys.rows() == 0) throw std::invalid_argument("attention: empty key set");
  if (keys.rows() != values.rows()) throw std::invalid_argument("attention: keys and values differ in length");
  const Index c = p.channels();
  const Index dh = c / p.heads;
  const double sc = logit_scale(c, p.heads, mode);
  const Var q = matmul(queries, p.w_q);
  const Var k = matmul(keys, p.w_k);
  const Var v = matmul(values, p.w_v);
  std::vector<Var> heads;
  heads.reserve(static_cast<std::size_t>(p.heads));
  for (Index h = 0; h < p.heads; ++h) {
    const Var qh = slice_cols(q, h * dh, dh);
    const Var kh = slice_cols(k, h * dh, dh);
    const Var vh = slice_cols(v, h * dh, dh);
    const Var probs = softmax_rows(scale(matmul(qh, transpose(kh)), sc));
    heads.push_back(matmul(probs, vh));
  }
  const Var merged = p.heads == 1 ? heads[0] : concat_cols(heads);
  return matmul(merged, p.w_o);
}

std::vector<Mat> attention_weights(const Mat& queries, const Mat& keys, const AttentionParams& p, LogitScale mode) {
  const Index c = p.channels();
  const Index dh = c / p.heads;
  const double sc = logit_scale(c, p.heads, mode);
  const Mat q = kernels::matmul(queries, p.w_q.value());
  const Mat k = kernels::matmul(keys, p.w_k.value());
  std::vector<Mat> out;
  for (Index h = 0; h < p.heads; ++h) {
    const Mat logits = kernels::matmul(q.middleCols(h * dh, dh), k.middleCols(h * dh, dh).transpose()) * sc;
    out.push_back(kernels::softmax(logits));
  }
  return out;
}

Mat sine_position_encoding(Index height, Index width, Index channels) {
  if (channels % 4 != 0) throw std::invalid_argument("position encoding needs channels divisible by 4");
  const Index half = channels / 2;
  Mat pe(height * width, channels);
  for (Index r = 0; r < height; ++r) {
    for (Index c = 0; c < width; ++c) {
      // Coordinates normalized to (0, 2*pi] as in DETR-style encodings.
      const double y = (static_cast<double>(r) + 1.0) / static_cast<double>(height) * 2.0 * std::numbers::pi;
      const double x = (static_cast<double>(c) + 1.0) / static_cast<double>(width) * 2.0 * std::numbers::pi;
      for (Index k = 0; k < half / 2; ++k) {
        const double freq = std::pow(10000.0, 2.0 * static_cast<double>(k) / static_cast<double>(half));
        const Index row = r * width + c;
        pe(row, 2 * k) = std::sin(y / freq);
        pe(row, 2 * k + 1) = std::cos(y / freq);
        pe(row, half + 2 * k) = std::sin(x / freq);
        pe(row, half + 2 * k + 1) = std::cos(x / freq);
      }
    }
  }
  return pe;
}

void ClipFeatures::validate() const {
  if (maps.empty() || maps[0].empty()) throw std::invalid_argument("clip features: no scales or frames");
  if (shapes.size() != maps.size()) throw std::invalid_argument("clip features: shape list does not match scales");
  const Index c = maps[0][0].cols();
  for (std::size_t s = 0; s < maps.size(); ++s) {
    if (maps[s].size() != maps[0].size()) throw std::invalid_argument("clip features: frame count differs across scales");
    for (const auto& m : maps[s]) {
      if (m.rows() != shapes[s].cells() || m.cols() != c) throw std::invalid_argument("clip features: map shape mismatch");
    }
  }
}

}  // namespace clipseg
