#pragma once

// End-to-end toy network on synthetic clips: a strided-conv feature stub,
// the encoder stack, the query decoder and a plain gradient-descent trainer.

#include "clipseg/bottleneck.hpp"
#include "clipseg/decoder.hpp"
#include "clipseg/numkit/tensor.hpp"

#include <functional>
#include <string>

namespace clipseg::model {

struct ModelConfig {
  Index channels = 64;
  Index bottleneck_queries = 20;
  Index decoder_queries = 10;
  Index frames = 6;
  Index kernel = 5;
  Index dilation = 2;
  Index heads = 8;
  Index encoder_layers = 3;
  Index decoder_layers = 3;
  Index state = 16;
  Index rank = 0;
  Index scales = 4;
  Index height = 352;
  Index width = 352;
  hilbert::CurveKind scan = hilbert::CurveKind::Hilbert;
  bottleneck::GridOrientation orientation = bottleneck::GridOrientation::QueriesAsRows;
  s6::ScanStrategy strategy = s6::ScanStrategy::Parallel;
  bool use_cnp = true;
  bool use_hilbert_ss = true;
  decoder::LossWeights weights;

  /// Smallest configuration, used by the full-model gradient check.
  static ModelConfig micro();
  /// Slightly larger toy configuration used for overfitting a single clip.
  static ModelConfig small();

  void validate() const;
  bottleneck::BottleneckConfig bottleneck() const;
  decoder::DecoderConfig decoder() const;
  /// Extents of scale s (0 = stride 4).
  GridShape scale_shape(Index s) const;
};

/// Parses a JSON object; every key is optional, unknown keys are rejected.
ModelConfig config_from_json(const std::string& text);
std::string config_to_json(const ModelConfig& config);

// ---------------------------------------------------------------------------
// Synthetic data

struct EllipseOptions {
  Index frames = 6;
  Index height = 64;
  Index width = 64;
  double background = 0.25;
  double contrast = 0.5;
  double noise = 0.08;
  std::uint64_t seed = 0;
};

struct SyntheticClip {
  Tensor frames;  // T x H x W in [0, 1]
  Tensor masks;   // G x T x H x W, binary
};

/// One ellipse drifting (and bouncing off the borders) over a speckled
/// background.
SyntheticClip moving_ellipse(const EllipseOptions& options);

/// Block-average downsampling of G x T x H x W masks to the stride-`stride`
/// grid, thresholded at 0.5: G x (T * H/stride * W/stride).
Mat downsample_masks(const Tensor& masks, Index stride);

// ---------------------------------------------------------------------------
// Network

struct StubParams {
  std::vector<Var> stage;            // patch weights, (16 x c) then (4c x c)
  std::vector<NormParams> stage_norm;
  std::vector<Var> project;          // c x c, one per scale
  std::vector<NormParams> project_norm;

  static StubParams init(const ModelConfig& config, Rng& rng);
  void collect(const std::string& prefix, NamedParams& out) const;
};

/// Group count of every GroupNorm in the stub.
Index stub_groups(Index channels);

/// Strided patch convolutions (4x4, then 2x2 per stage), each followed by
/// GroupNorm and SiLU, then a bias-free 1x1 projection with GroupNorm per scale.
ClipFeatures feature_stub(const Tensor& frames, const StubParams& params, const ModelConfig& config);

struct ModelParams {
  StubParams stub;
  bottleneck::BottleneckParams encoder;
  decoder::DecoderParams decoder;

  static ModelParams init(const ModelConfig& config, std::uint64_t seed);
  NamedParams named() const;
};

decoder::Prediction forward(const Tensor& frames, const ModelParams& params, const ModelConfig& config);

// ---------------------------------------------------------------------------
// Training

struct TraceRow {
  Index step = 0;
  double total = 0.0;
  double cls = 0.0;
  double dice = 0.0;
  double bce = 0.0;
  double train_dice = 0.0;
};

struct OverfitOptions {
  Index steps = 300;
  double lr = 1e-2;
};

/// Plain gradient descent on the matched loss of a single clip. Row k of the
/// trace is measured before update k; the last row follows the final update.
/// Throws NumericalError naming the step when the loss or a gradient is not
/// finite.
std::vector<TraceRow> overfit(const SyntheticClip& clip, ModelParams& params, const ModelConfig& config,
                              const OverfitOptions& options,
                              const std::function<void(const TraceRow&)>& on_step = {});

std::string trace_to_csv(const std::vector<TraceRow>& trace);

}  // namespace clipseg::model
