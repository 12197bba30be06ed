#pragma once

// Cyclic neighborhood propagation: every token of frame t attends to a
// dilated k x k window of the cyclically previous frame.

#include "clipseg/layers.hpp"

#include <vector>

namespace clipseg::cnp {

struct CnpConfig {
  Index kernel = 5;
  Index dilation = 2;
  Index heads = 8;
  Index channels = 64;
  LogitScale scale = LogitScale::PerHead;

  void validate() const;
};

/// Shared by every scale.
struct CnpParams {
  AttentionParams attn;
  NormParams norm;

  static CnpParams init(const CnpConfig& config, Rng& rng);
  void collect(const std::string& prefix, NamedParams& out) const;
};

/// Previous frame in the cycle, 1-based: t - 1 for t > 1, T for t = 1.
Index cyclic_prev(Index t, Index frames);

/// Window start along one axis: the dilated window of min(k, reachable) taps
/// centred on `pos`, shifted inward so it stays inside [0, length).
Index window_start(Index pos, Index length, Index kernel, Index dilation);
/// Taps per axis actually used on an axis of `length`.
Index window_taps(Index length, Index kernel, Index dilation);

/// Row-major neighbor indices of cell i on an H x W grid (k^2 of them when
/// both extents are at least 1 + (k - 1) d).
std::vector<Index> neighbor_set(Index i, Index kernel, Index dilation, Index height, Index width);

/// neighbor_set for every cell, one row per cell.
MatrixR<Index> neighbor_table(Index height, Index width, Index kernel, Index dilation);

/// Attention update (no residual) of `query_in` tokens over the neighborhood
/// of `source_in` tokens.
Var neighborhood_attention(const Var& query_in, const Var& source_in, const GridShape& grid, const CnpConfig& config,
                           const AttentionParams& attn);

/// Attention probabilities, (HW x heads*taps), head-major within a row.
Mat neighborhood_weights(const Mat& query_in, const Mat& source_in, const GridShape& grid, const CnpConfig& config,
                         const AttentionParams& attn);

/// v_t + neighborhood attention of v_t over v_prev.
Var cnp_attend(const Var& v_t, const Var& v_prev, const GridShape& grid, const CnpConfig& config, const CnpParams& params);

/// One propagation step over scales 2..S (indices 1..). Each frame reads the
/// pre-update state of its cyclic predecessor; queries and sources are
/// layer-normalized before attention and the input is added back.
ClipFeatures cnp_layer(const ClipFeatures& clip, const CnpConfig& config, const CnpParams& params);

}  // namespace clipseg::cnp
