#pragma once

// Frame bottleneck queries: each frame is condensed into a short query
// sequence, the T x N query grid is scanned along a space-filling curve by an
// S6 block, and the result is distributed back to the multi-scale features.

#include "clipseg/cnp.hpp"
#include "clipseg/hilbert.hpp"
#include "clipseg/s6.hpp"

namespace clipseg::bottleneck {

/// How the query grid is laid out for the curve.
enum class GridOrientation {
  QueriesAsRows,  // height = queries, width = frames
  FramesAsRows,   // height = frames, width = queries
};

struct BottleneckConfig {
  Index channels = 64;
  Index queries = 20;
  Index heads = 8;
  LogitScale scale = LogitScale::PerHead;
  hilbert::CurveKind scan = hilbert::CurveKind::Hilbert;
  GridOrientation orientation = GridOrientation::QueriesAsRows;
  s6::ScanStrategy strategy = s6::ScanStrategy::Parallel;
  Index state = 16;
  Index rank = 0;
  bool use_cnp = true;
  bool use_hilbert_ss = true;
  cnp::CnpConfig cnp;

  void validate() const;
};

/// Parameters of one reciprocal encoder layer. `level` holds one learned
/// embedding row per attended scale (scales 2..S).
struct EncoderLayerParams {
  cnp::CnpParams cnp;
  Var level;
  AttentionParams condense;
  NormParams condense_norm;
  s6::S6Params scan;
  NormParams scan_norm;
  AttentionParams distribute;
  NormParams distribute_norm;

  static EncoderLayerParams init(const BottleneckConfig& config, Index scales, Rng& rng);
  void collect(const std::string& prefix, NamedParams& out) const;
};

struct BottleneckParams {
  Var queries;  // learned initial queries, N x c
  std::vector<EncoderLayerParams> layers;

  static BottleneckParams init(const BottleneckConfig& config, Index scales, Index layers, Rng& rng);
  void collect(const std::string& prefix, NamedParams& out) const;
};

/// Features of scales 2..S for one frame, stacked row-wise.
Var flatten_scales(const ClipFeatures& clip, Index frame);

/// Total token count of scales 2..S.
Index attended_tokens(const ClipFeatures& clip);

/// Sine position encoding of scales 2..S plus each token's learned level row.
Var key_embedding(const std::vector<GridShape>& shapes, const Var& level);

/// Queries + cross-attention from layer-normalized queries to the frame tokens.
Var condense(const Var& queries, const Var& tokens, const Var& key_embed, const AttentionParams& attn,
             const NormParams& norm, LogitScale mode = LogitScale::PerHead);

/// Tokens + cross-attention from the layer-normalized tokens to the frame queries.
Var distribute(const Var& tokens, const Var& key_embed, const Var& frame_queries, const AttentionParams& attn,
               const NormParams& norm, LogitScale mode = LogitScale::PerHead);

/// Curve order over the query grid: entry p is the row (t * N + n) of the
/// stacked per-frame queries visited at position p.
std::vector<Index> scan_order(hilbert::CurveKind kind, Index queries, Index frames, GridOrientation orientation);

/// Stacked per-frame queries (T*N x c, frame-major) plus S6 applied along the
/// curve order of their layer-normalized values.
Var hilbert_ss(const Var& frame_queries, Index queries, Index frames, const s6::S6Params& params,
               const NormParams& norm, const BottleneckConfig& config);

struct EncoderOutput {
  ClipFeatures clip;
  Var frame_queries;  // T*N x c
};

/// CNP, condense per frame, scan across frames, distribute per frame.
EncoderOutput encoder_layer(const ClipFeatures& clip, const Var& queries, const EncoderLayerParams& params,
                            const BottleneckConfig& config);

}  // namespace clipseg::bottleneck
