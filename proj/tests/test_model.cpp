#include "doctest.h"

#include "clipseg/model.hpp"
#include "clipseg/numkit/gradcheck.hpp"

#include <cmath>

using namespace clipseg;
using namespace clipseg::model;

TEST_CASE("default configuration and JSON round trip") {
  const ModelConfig d;
  CHECK(d.channels == 64);
  CHECK(d.bottleneck_queries == 20);
  CHECK(d.decoder_queries == 10);
  CHECK(d.frames == 6);
  CHECK(d.kernel == 5);
  CHECK(d.dilation == 2);
  CHECK(d.encoder_layers == 3);
  CHECK(d.decoder_layers == 3);
  CHECK(d.height == 352);
  CHECK(d.weights.cls == 2.0);
  CHECK(d.weights.dice == 5.0);
  CHECK(d.weights.bce == 2.0);
  CHECK_NOTHROW(d.validate());

  ModelConfig m = ModelConfig::micro();
  m.scan = hilbert::CurveKind::Zigzag;
  m.use_cnp = false;
  const ModelConfig back = config_from_json(config_to_json(m));
  CHECK(config_to_json(back) == config_to_json(m));
  CHECK(back.scan == hilbert::CurveKind::Zigzag);
  CHECK_FALSE(back.use_cnp);

  const ModelConfig partial = config_from_json(R"({"c": 32, "n_bar": 8, "scan": "zigzag"})");
  CHECK(partial.channels == 32);
  CHECK(partial.bottleneck_queries == 8);
  CHECK(partial.decoder_queries == 10);

  CHECK_THROWS_AS(config_from_json(R"({"c": 64, "mu": 3})"), std::invalid_argument);
  CHECK_THROWS_AS(config_from_json(R"({"c": "wide"})"), std::invalid_argument);
  CHECK_THROWS_AS(config_from_json(R"({"heads": 7})"), std::invalid_argument);
  CHECK_THROWS_AS(config_from_json(R"({"height": 100})"), std::invalid_argument);
  CHECK_THROWS_AS(config_from_json(R"({"k": 4})"), std::invalid_argument);
  CHECK_THROWS_AS(config_from_json(R"({"scan": "peano"})"), std::invalid_argument);
  CHECK_THROWS_AS(config_from_json("[1, 2]"), std::invalid_argument);
  CHECK_THROWS_AS(config_from_json("{"), std::invalid_argument);
}

TEST_CASE("moving ellipse clip") {
  const SyntheticClip clip = moving_ellipse({.frames = 5, .height = 48, .width = 40, .seed = 3});
  CHECK(clip.frames.shape() == std::vector<std::size_t>{5, 48, 40});
  CHECK(clip.masks.shape() == std::vector<std::size_t>{1, 5, 48, 40});
  const Mat frames = clip.frames.to_matrix(5, 48 * 40);
  const Mat masks = clip.masks.to_matrix(5, 48 * 40);
  CHECK(frames.minCoeff() >= 0.0);
  CHECK(frames.maxCoeff() <= 1.0);
  for (Index t = 0; t < 5; ++t) {
    CHECK(masks.row(t).sum() >= 1.0);
    const double inside = (frames.row(t).array() * masks.row(t).array()).sum() / masks.row(t).sum();
    const double outside = (frames.row(t).array() * (1.0 - masks.row(t).array())).sum() / (1.0 - masks.row(t).array()).sum();
    CHECK(inside > outside + 0.3);
  }
  CHECK(masks.row(0) != masks.row(4));
  CHECK(moving_ellipse({.frames = 5, .height = 48, .width = 40, .seed = 3}).frames == clip.frames);
  CHECK_FALSE(moving_ellipse({.frames = 5, .height = 48, .width = 40, .seed = 4}).frames == clip.frames);
}

TEST_CASE("mask downsampling") {
  Tensor masks({1, 1, 4, 8});
  // Block (0,0): 2 of 4 set -> 1. Block (0,1): 1 of 4 -> 0.
  masks.at({0, 0, 0, 0}) = 1;
  masks.at({0, 0, 1, 1}) = 1;
  masks.at({0, 0, 0, 2}) = 1;
  for (std::size_t y = 2; y < 4; ++y) {
    for (std::size_t x = 4; x < 8; ++x) masks.at({0, 0, y, x}) = 1;
  }
  const Mat d = downsample_masks(masks, 2);
  CHECK(d == (Mat(1, 8) << 1, 0, 0, 0, 0, 0, 1, 1).finished());
  CHECK_THROWS_AS(downsample_masks(masks, 3), std::invalid_argument);
}

TEST_CASE("feature stub strides") {
  ModelConfig cfg = ModelConfig::micro();
  cfg.height = cfg.width = 64;
  cfg.scales = 4;
  cfg.channels = 8;
  Rng rng(1);
  const StubParams p = StubParams::init(cfg, rng);
  const SyntheticClip clip = moving_ellipse({.frames = 2, .height = 64, .width = 64, .seed = 1});
  const ClipFeatures f = feature_stub(clip.frames, p, cfg);
  REQUIRE(f.scales() == 4);
  CHECK(f.shapes[0] == GridShape{16, 16});
  CHECK(f.shapes[1] == GridShape{8, 8});
  CHECK(f.shapes[2] == GridShape{4, 4});
  CHECK(f.shapes[3] == GridShape{2, 2});
  CHECK(f.channels() == 8);
  CHECK_NOTHROW(f.validate());

  const ClipFeatures zero = feature_stub(Tensor({2, 64, 64}), p, cfg);
  for (const auto& scale : zero.maps) {
    for (const auto& m : scale) {
      CHECK(m.value().allFinite());
      CHECK(m.value().cwiseAbs().maxCoeff() == 0.0);
    }
  }
  CHECK_THROWS_AS(feature_stub(Tensor({2, 60, 64}), p, cfg), std::invalid_argument);
  cfg.height = 48;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}

TEST_CASE("micro forward is shaped, finite and deterministic") {
  const ModelConfig cfg = ModelConfig::micro();
  const ModelParams p = ModelParams::init(cfg, 5);
  const SyntheticClip clip = moving_ellipse({.frames = 2, .height = 16, .width = 16, .seed = 5});
  const auto pred = forward(clip.frames, p, cfg);
  CHECK(pred.masks.rows() == 3);
  CHECK(pred.masks.cols() == 2 * 16);
  CHECK(pred.class_logits.rows() == 3);
  CHECK(pred.class_logits.cols() == 2);
  CHECK(pred.masks.value().allFinite());
  const ModelParams again = ModelParams::init(cfg, 5);
  CHECK(forward(clip.frames, again, cfg).masks.value() == pred.masks.value());
  const auto probs = kernels::softmax(pred.class_logits.value());
  CHECK((probs.rowwise().sum().array() - 1.0).abs().maxCoeff() <= 1e-12);
}

TEST_CASE("ablation switches change the forward output") {
  const ModelConfig base = ModelConfig::small();
  const ModelParams p = ModelParams::init(base, 6);
  const SyntheticClip clip = moving_ellipse({.frames = 3, .height = 32, .width = 32, .seed = 6});
  const Mat ref = forward(clip.frames, p, base).masks.value();
  ModelConfig alt = base;
  alt.use_cnp = false;
  CHECK((forward(clip.frames, p, alt).masks.value() - ref).cwiseAbs().maxCoeff() > 1e-6);
  alt = base;
  alt.use_hilbert_ss = false;
  CHECK((forward(clip.frames, p, alt).masks.value() - ref).cwiseAbs().maxCoeff() > 1e-6);
  alt = base;
  alt.scan = hilbert::CurveKind::Zigzag;
  CHECK((forward(clip.frames, p, alt).masks.value() - ref).cwiseAbs().maxCoeff() > 1e-6);
}

TEST_CASE("full micro model gradcheck") {
  const ModelConfig cfg = ModelConfig::micro();
  ModelParams p = ModelParams::init(cfg, 7);
  const SyntheticClip clip = moving_ellipse({.frames = 2, .height = 16, .width = 16, .seed = 7});
  const Mat targets = downsample_masks(clip.masks, 4);
  NamedParams named = p.named();
  GradCheckOptions opts;
  opts.tolerance = 1e-4;
  const auto report = check_gradients(
      [&] { return decoder::matched_loss(forward(clip.frames, p, cfg), targets, cfg.weights).total; }, named.vars,
      named.names, opts);
  CHECK(report.params.size() == named.size());
  for (const auto& pc : report.params) {
    CAPTURE(pc.name);
    CHECK(pc.rel_error <= 1e-4);
  }
}

TEST_CASE("overfit trace") {
  const ModelConfig cfg = ModelConfig::small();
  const SyntheticClip clip = moving_ellipse({.frames = 3, .height = 32, .width = 32, .seed = 8});

  ModelParams p = ModelParams::init(cfg, 8);
  const auto none = overfit(clip, p, cfg, {.steps = 0, .lr = 1e-2});
  REQUIRE(none.size() == 1);
  CHECK(none[0].step == 0);
  CHECK(none[0].total == doctest::Approx(2 * none[0].cls + 5 * none[0].dice + 2 * none[0].bce).epsilon(1e-12));

  const auto trace = overfit(clip, p, cfg, {.steps = 40, .lr = 1e-2});
  CHECK(trace.size() == 41);
  CHECK(trace.back().total < 0.5 * trace.front().total);
  for (const auto& r : trace) CHECK(std::isfinite(r.total));
  const std::string csv = trace_to_csv(trace);
  CHECK(csv.rfind("step,total,class,dice,bce,train_dice\n", 0) == 0);

  ModelParams wild = ModelParams::init(cfg, 8);
  CHECK_THROWS_AS(overfit(clip, wild, cfg, {.steps = 50, .lr = 1e8}), NumericalError);
  CHECK_THROWS_AS(overfit(clip, wild, cfg, {.steps = 5, .lr = 0.0}), std::invalid_argument);
}

TEST_CASE("micro config overfits without NaN across seeds") {
  const ModelConfig cfg = ModelConfig::micro();
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    CAPTURE(seed);
    ModelParams p = ModelParams::init(cfg, seed);
    const SyntheticClip clip = moving_ellipse({.frames = cfg.frames, .height = cfg.height, .width = cfg.width, .seed = seed});
    const auto trace = overfit(clip, p, cfg, {.steps = 300, .lr = 1e-2});
    for (const auto& r : trace) REQUIRE(std::isfinite(r.total));
    CHECK(trace.back().total < 0.1 * trace.front().total);
  }
}
