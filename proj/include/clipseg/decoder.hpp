#pragma once

// Query decoder: temporal queries cross-attend one attended scale per layer,
// then a dynamic 1x1 convolution on the stride-4 scale produces mask logits.
// Also holds the matched training loss, output selection and mask metrics.

#include "clipseg/layers.hpp"

#include <vector>

namespace clipseg::decoder {

struct DecoderConfig {
  Index channels = 64;
  Index queries = 10;
  Index heads = 8;
  Index layers = 3;
  Index ffn_hidden = 0;  // 0 selects 4 * channels
  LogitScale scale = LogitScale::PerHead;

  Index hidden() const { return ffn_hidden > 0 ? ffn_hidden : 4 * channels; }
  void validate() const;
};

struct DecoderLayerParams {
  AttentionParams cross;
  NormParams cross_norm;
  AttentionParams self;
  NormParams self_norm;
  LinearParams ffn_in;
  LinearParams ffn_out;
  NormParams ffn_norm;

  static DecoderLayerParams init(const DecoderConfig& config, Rng& rng);
  void collect(const std::string& prefix, NamedParams& out) const;
};

struct DecoderParams {
  Var queries;    // N x c, initial content
  Var query_pos;  // N x c, added to queries wherever they act as attention queries/keys
  Var level;      // (S - 1) x c, one row per attended scale
  std::vector<DecoderLayerParams> layers;
  NormParams final_norm;
  LinearParams class_head;  // c -> 2; class 0 is foreground
  LinearParams mask_in;     // c -> c
  LinearParams mask_out;    // c -> c

  static DecoderParams init(const DecoderConfig& config, Index scales, Rng& rng);
  void collect(const std::string& prefix, NamedParams& out) const;
};

/// Scale index (1..S-1) attended by decoder layer `layer`, coarsest first.
Index layer_scale(Index layer, Index scales);

/// All frames of one scale stacked frame-major: (T * H_s W_s) x c.
Var frame_memory(const ClipFeatures& clip, Index scale);

/// Position encoding of one scale, repeated per frame, plus the scale's level row.
Var memory_embedding(const GridShape& grid, Index frames, const Var& level_row);

/// Cross-attention to the memory, self-attention, feed-forward; each pre-normed
/// and residual.
Var decoder_layer(const Var& queries, const Var& query_pos, const Var& memory, const Var& memory_embed,
                  const DecoderLayerParams& params, LogitScale mode = LogitScale::PerHead);

/// Mask embedding per query: mask_out(silu(mask_in(q))).
Var query_embedding(const Var& queries, const LinearParams& mask_in, const LinearParams& mask_out);

/// Dynamic 1x1 convolution: embedding (N x c) against pixels (P x c) -> N x P.
Var mask_logits(const Var& embedding, const Var& pixels);

struct Prediction {
  Var masks;          // N x (T * H1 W1), frame-major
  Var class_logits;   // N x 2
  Index frames = 0;
  GridShape grid;     // stride-4 grid
};

Prediction decode(const ClipFeatures& clip, const DecoderParams& params, const DecoderConfig& config);

// ---------------------------------------------------------------------------
// Matching and loss

struct LossWeights {
  double cls = 2.0;
  double dice = 5.0;
  double bce = 2.0;
};

inline constexpr double kLogitClip = 20.0;

/// Optimal injective assignment for a (queries x targets) cost matrix.
/// result[g] is the query assigned to target g.
std::vector<Index> hungarian_match(const Mat& cost);

/// Sum of cost(result[g], g).
double assignment_cost(const Mat& cost, const std::vector<Index>& assignment);

/// Matching cost (queries x targets) of mask logits (N x P) and class logits
/// (N x 2) against binary targets (G x P).
Mat matching_cost(const Mat& masks, const Mat& class_logits, const Mat& targets, const LossWeights& weights = {});

struct MatchedLoss {
  std::vector<Index> assignment;
  Var total;
  double cls = 0.0;
  double dice = 0.0;
  double bce = 0.0;
};

/// Targets are binary (G x T*H1W1) in the layout of Prediction::masks.
MatchedLoss matched_loss(const Prediction& pred, const Mat& targets, const LossWeights& weights = {});

// ---------------------------------------------------------------------------
// Inference

struct Selection {
  Index query = 0;
  double confidence = 0.0;
  Mat mask;  // T x H1W1, 0/1
};

/// Highest foreground probability wins (lowest index on ties); its mask is
/// thresholded at sigmoid > 0.5.
Selection select_output(const Mat& masks, const Mat& class_logits, Index frames);

struct MaskMetrics {
  double dice = 0.0;
  double iou = 0.0;
  double mae = 0.0;
};

/// Binary masks of equal shape. Two empty masks score dice = iou = 1.
MaskMetrics metrics(const Mat& pred, const Mat& truth);

}  // namespace clipseg::decoder
