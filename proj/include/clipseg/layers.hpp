#pragma once

// Parameter containers and building blocks shared by the encoder and decoder.

#include "clipseg/numkit/autodiff.hpp"
#include "clipseg/numkit/rng.hpp"

#include <string>
#include <vector>

namespace clipseg {

/// Flat, ordered view of named parameters (for optimizers and gradchecks).
struct NamedParams {
  std::vector<Var> vars;
  std::vector<std::string> names;

  void add(std::string name, const Var& v) {
    names.push_back(std::move(name));
    vars.push_back(v);
  }
  std::size_t size() const { return vars.size(); }
  std::size_t scalar_count() const;
};

struct LinearParams {
  Var weight;  // in x out
  Var bias;    // 1 x out, undefined when bias-free

  /// Glorot-uniform weight, zero bias.
  static LinearParams init(Index in, Index out, Rng& rng, bool with_bias = true);
  void collect(const std::string& prefix, NamedParams& out) const;
};

Var linear(const Var& x, const LinearParams& p);

struct NormParams {
  Var scale;  // 1 x c, ones
  Var shift;  // 1 x c, zeros

  static NormParams init(Index channels);
  void collect(const std::string& prefix, NamedParams& out) const;
};

Var layer_norm(const Var& x, const NormParams& p);

enum class LogitScale {
  PerHead,  // 1 / sqrt(c / heads)
  FullDim,  // 1 / sqrt(c)
};

struct AttentionParams {
  Index heads = 1;
  Var w_q, w_k, w_v;  // c x c
  Var w_o;            // c x c; concatenated per-head output projections

  static AttentionParams init(Index channels, Index heads, Rng& rng);
  void collect(const std::string& prefix, NamedParams& out) const;
  Index channels() const { return w_q.rows(); }
};

double logit_scale(Index channels, Index heads, LogitScale mode);

/// Multi-head attention update without residual:
/// concat_h softmax(Q_h K_h^T * scale) V_h, then W_o.
/// `queries`, `keys`, `values` are pre-projection inputs.
Var attention(const Var& queries, const Var& keys, const Var& values, const AttentionParams& p,
              LogitScale mode = LogitScale::PerHead);

/// Per-head attention probabilities, each (queries x keys).
std::vector<Mat> attention_weights(const Mat& queries, const Mat& keys, const AttentionParams& p,
                                   LogitScale mode = LogitScale::PerHead);

/// 2-D sine/cosine position encoding for an h x w grid, one row per cell in
/// row-major order. Half the channels encode the row, half the column.
Mat sine_position_encoding(Index height, Index width, Index channels);

struct GridShape {
  Index height = 0;
  Index width = 0;
  Index cells() const { return height * width; }
  friend bool operator==(const GridShape&, const GridShape&) = default;
};

/// Per-frame, per-scale feature maps. maps[s][t] is (H_s W_s x c); index 0 is
/// the stride-4 scale reserved for the mask head.
struct ClipFeatures {
  std::vector<GridShape> shapes;
  std::vector<std::vector<Var>> maps;

  Index scales() const { return static_cast<Index>(maps.size()); }
  Index frames() const { return maps.empty() ? 0 : static_cast<Index>(maps[0].size()); }
  Index channels() const { return maps.empty() ? 0 : maps[0][0].cols(); }
  void validate() const;
};

}  // namespace clipseg
