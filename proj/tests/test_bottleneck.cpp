#include "doctest.h"

#include "clipseg/bottleneck.hpp"
#include "clipseg/numkit/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <set>

using namespace clipseg;
using namespace clipseg::bottleneck;

namespace {

ClipFeatures random_clip(Rng& rng, std::vector<GridShape> shapes, Index frames, Index c) {
  ClipFeatures clip;
  clip.shapes = shapes;
  for (const auto& g : shapes) {
    std::vector<Var> per_frame;
    for (Index t = 0; t < frames; ++t) per_frame.push_back(Var::constant(rng.normal_matrix(g.cells(), c)));
    clip.maps.push_back(per_frame);
  }
  return clip;
}

BottleneckConfig small_config(Index c = 8, Index n = 3) {
  BottleneckConfig cfg;
  cfg.channels = c;
  cfg.queries = n;
  cfg.heads = 2;
  cfg.state = 3;
  cfg.rank = 2;
  cfg.cnp = {.kernel = 3, .dilation = 1, .heads = 2, .channels = c};
  return cfg;
}

void randomize(AttentionParams& p, Rng& rng, double stddev = 0.5) {
  for (Var* w : {&p.w_q, &p.w_k, &p.w_v, &p.w_o}) w->mutable_value() = rng.normal_matrix(p.channels(), p.channels(), stddev);
}

void randomize(s6::S6Params& p, Rng& rng) {
  const Index c = p.channels;
  p.c_proj.mutable_value() = rng.normal_matrix(c, p.state, 0.5);
  p.b_proj.mutable_value() = rng.normal_matrix(c, p.state, 0.5);
  p.dt_down.mutable_value() = rng.normal_matrix(c, p.rank, 0.5);
  p.dt_up.mutable_value() = rng.normal_matrix(p.rank, c, 0.5);
}

EncoderLayerParams random_layer(const BottleneckConfig& cfg, Index scales, Rng& rng) {
  EncoderLayerParams p = EncoderLayerParams::init(cfg, scales, rng);
  randomize(p.cnp.attn, rng);
  randomize(p.condense, rng);
  randomize(p.distribute, rng);
  randomize(p.scan, rng);
  p.level.mutable_value() = rng.normal_matrix(scales - 1, cfg.channels, 0.5);
  return p;
}

double max_diff(const Mat& a, const Mat& b) { return (a - b).cwiseAbs().maxCoeff(); }

}  // namespace

TEST_CASE("attended key length sums scales 2..S") {
  Rng rng(1);
  const ClipFeatures clip = random_clip(rng, {{16, 16}, {8, 8}, {4, 4}, {2, 2}}, 2, 8);
  CHECK(attended_tokens(clip) == 84);
  const Var flat = flatten_scales(clip, 1);
  CHECK(flat.rows() == 84);
  CHECK(flat.value().topRows(64) == clip.maps[1][1].value());
  CHECK(flat.value().bottomRows(4) == clip.maps[3][1].value());
  const Var key = key_embedding(clip.shapes, Var::constant(rng.normal_matrix(3, 8)));
  CHECK(key.rows() == 84);
  CHECK_THROWS_AS(key_embedding(clip.shapes, Var::constant(rng.normal_matrix(2, 8))), std::invalid_argument);
}

TEST_CASE("condense with uniform logits adds the mean value") {
  Rng rng(2);
  const Index c = 4;
  AttentionParams attn = AttentionParams::init(c, 1, rng);
  attn.w_k.mutable_value().setZero();
  attn.w_v.mutable_value().setIdentity();
  attn.w_o.mutable_value().setIdentity();
  const Var queries = Var::constant(rng.normal_matrix(1, c));
  const Var tokens = Var::constant(rng.normal_matrix(84, c));
  const Var key = Var::constant(rng.normal_matrix(84, c));
  const Mat out = condense(queries, tokens, key, attn, NormParams::init(c)).value();
  const Mat expected = queries.value() + tokens.value().colwise().mean();
  CHECK(max_diff(out, expected) <= 1e-12);
  CHECK_THROWS_AS(condense(queries, Var::constant(Mat(0, c)), Var::constant(Mat(0, c)), attn, NormParams::init(c)),
                  std::invalid_argument);
}

TEST_CASE("condense and distribute attention rows are distributions") {
  Rng rng(3);
  AttentionParams attn = AttentionParams::init(8, 2, rng);
  randomize(attn, rng, 1.0);
  for (const Mat& w : attention_weights(rng.normal_matrix(5, 8), rng.normal_matrix(30, 8), attn)) {
    CHECK(w.rows() == 5);
    CHECK(w.cols() == 30);
    CHECK((w.rowwise().sum().array() - 1.0).abs().maxCoeff() <= 1e-12);
  }
}

TEST_CASE("distribute residual identities") {
  Rng rng(4);
  const Index c = 8;
  AttentionParams attn = AttentionParams::init(c, 2, rng);
  randomize(attn, rng);
  const Var tokens = Var::constant(rng.normal_matrix(20, c));
  const Var key = Var::constant(rng.normal_matrix(20, c));

  AttentionParams zero_v = attn;
  zero_v.w_v = Var::parameter(Mat::Zero(c, c));
  CHECK(distribute(tokens, key, Var::constant(rng.normal_matrix(3, c)), zero_v, NormParams::init(c)).value() ==
        tokens.value());

  // A single frame query gives the same update at every token.
  const Var one = Var::constant(rng.normal_matrix(1, c));
  const Mat update = distribute(tokens, key, one, attn, NormParams::init(c)).value() - tokens.value();
  const Mat expected = one.value() * attn.w_v.value() * attn.w_o.value();
  for (Index r = 0; r < 20; ++r) CHECK(max_diff(update.row(r), expected) <= 1e-12);

  AttentionParams zero_o = attn;
  zero_o.w_o = Var::parameter(Mat::Zero(c, c));
  const Var q = Var::constant(rng.normal_matrix(3, c));
  CHECK(condense(q, tokens, key, zero_o, NormParams::init(c)).value() == q.value());
}

TEST_CASE("scan order is a bijection of the query grid") {
  for (auto kind : {hilbert::CurveKind::Hilbert, hilbert::CurveKind::Zigzag}) {
    for (auto orient : {GridOrientation::QueriesAsRows, GridOrientation::FramesAsRows}) {
      const auto order = scan_order(kind, 20, 6, orient);
      CHECK(order.size() == 120);
      CHECK(std::set<Index>(order.begin(), order.end()).size() == 120);
      CHECK(*std::max_element(order.begin(), order.end()) == 119);
    }
  }
  // Zigzag with queries as rows walks one query across all frames first.
  const auto z = scan_order(hilbert::CurveKind::Zigzag, 3, 2, GridOrientation::QueriesAsRows);
  CHECK(z == std::vector<Index>{0, 3, 1, 4, 2, 5});

  // Gather then scatter is exact.
  Rng rng(5);
  const Var x = Var::constant(rng.normal_matrix(120, 4));
  const auto order = scan_order(hilbert::CurveKind::Hilbert, 20, 6, GridOrientation::QueriesAsRows);
  std::vector<Index> inverse(order.size());
  for (std::size_t p = 0; p < order.size(); ++p) inverse[static_cast<std::size_t>(order[p])] = static_cast<Index>(p);
  CHECK(gather_rows(gather_rows(x, order), inverse).value() == x.value());
}

TEST_CASE("hilbert_ss residual and ordering") {
  Rng rng(6);
  BottleneckConfig cfg = small_config();
  s6::S6Params p = s6::S6Params::init({.channels = 8, .state = 3, .rank = 2}, rng);
  randomize(p, rng);
  const Var x = Var::constant(rng.normal_matrix(12, 8));

  s6::S6Params silent = p;
  silent.c_proj = Var::parameter(Mat::Zero(8, 3));
  CHECK(hilbert_ss(x, 3, 4, silent, NormParams::init(8), cfg).value() == x.value());

  const Mat hil = hilbert_ss(x, 3, 4, p, NormParams::init(8), cfg).value();
  cfg.scan = hilbert::CurveKind::Zigzag;
  const Mat zig = hilbert_ss(x, 3, 4, p, NormParams::init(8), cfg).value();
  CHECK(max_diff(hil, zig) > 1e-6);
  CHECK_THROWS_AS(hilbert_ss(x, 5, 4, p, NormParams::init(8), cfg), std::invalid_argument);
}

TEST_CASE("encoder layer shapes and the untouched finest scale") {
  Rng rng(7);
  const BottleneckConfig cfg = small_config();
  const EncoderLayerParams p = random_layer(cfg, 3, rng);
  const ClipFeatures clip = random_clip(rng, {{8, 8}, {4, 4}, {2, 2}}, 3, 8);
  const Var queries = Var::constant(rng.normal_matrix(3, 8));
  const EncoderOutput out = encoder_layer(clip, queries, p, cfg);
  CHECK(out.frame_queries.rows() == 9);
  CHECK(out.clip.shapes == clip.shapes);
  for (Index s = 0; s < 3; ++s) {
    for (Index t = 0; t < 3; ++t) {
      CHECK(out.clip.maps[s][t].rows() == clip.maps[s][t].rows());
      CHECK(out.clip.maps[s][t].value().allFinite());
    }
  }
  for (Index t = 0; t < 3; ++t) CHECK(out.clip.maps[0][t].value() == clip.maps[0][t].value());
  CHECK(encoder_layer(clip, queries, p, cfg).clip.maps[2][1].value() == out.clip.maps[2][1].value());
}

TEST_CASE("encoder layer connects every pair of frames") {
  Rng rng(8);
  // The scan is causal, so full reach relies on the curve visiting every frame
  // both early and late, which holds on the 20 x 6 query grid.
  BottleneckConfig cfg = small_config(8, 20);
  const Index frames = 6;
  const EncoderLayerParams p = random_layer(cfg, 2, rng);
  const ClipFeatures clip = random_clip(rng, {{4, 4}, {4, 4}}, frames, 8);
  const Var queries = Var::constant(rng.normal_matrix(20, 8));
  const EncoderOutput base = encoder_layer(clip, queries, p, cfg);
  for (Index b = 0; b < frames; ++b) {
    ClipFeatures bumped = clip;
    bumped.maps[1][b] = Var::constant(clip.maps[1][b].value() + rng.normal_matrix(16, 8, 0.5));
    const EncoderOutput out = encoder_layer(bumped, queries, p, cfg);
    for (Index a = 0; a < frames; ++a) {
      CAPTURE(a);
      CAPTURE(b);
      CHECK(max_diff(out.clip.maps[1][a].value(), base.clip.maps[1][a].value()) > 1e-9);
    }
  }

  // CNP alone only reaches the next frame in the cycle.
  cfg.use_hilbert_ss = false;
  EncoderLayerParams no_mix = p;
  no_mix.distribute.w_o = Var::parameter(Mat::Zero(8, 8));
  ClipFeatures bumped = clip;
  bumped.maps[1][0] = Var::constant(clip.maps[1][0].value() + rng.normal_matrix(16, 8, 0.5));
  const EncoderOutput a = encoder_layer(clip, queries, no_mix, cfg);
  const EncoderOutput b = encoder_layer(bumped, queries, no_mix, cfg);
  CHECK(b.clip.maps[1][2].value() == a.clip.maps[1][2].value());
  CHECK(max_diff(b.clip.maps[1][1].value(), a.clip.maps[1][1].value()) > 1e-9);
}

TEST_CASE("ablation switches change the output") {
  Rng rng(9);
  const BottleneckConfig cfg = small_config();
  const EncoderLayerParams p = random_layer(cfg, 2, rng);
  const ClipFeatures clip = random_clip(rng, {{4, 4}, {4, 4}}, 3, 8);
  const Var queries = Var::constant(rng.normal_matrix(3, 8));
  const Mat full = encoder_layer(clip, queries, p, cfg).clip.maps[1][0].value();
  BottleneckConfig alt = cfg;
  alt.use_cnp = false;
  CHECK(max_diff(encoder_layer(clip, queries, p, alt).clip.maps[1][0].value(), full) > 1e-6);
  alt = cfg;
  alt.use_hilbert_ss = false;
  CHECK(max_diff(encoder_layer(clip, queries, p, alt).clip.maps[1][0].value(), full) > 1e-6);
  alt = cfg;
  alt.scan = hilbert::CurveKind::Zigzag;
  CHECK(max_diff(encoder_layer(clip, queries, p, alt).clip.maps[1][0].value(), full) > 1e-6);
}

TEST_CASE("reordering learned queries reorders frame queries before the scan") {
  Rng rng(10);
  BottleneckConfig cfg = small_config();
  cfg.use_hilbert_ss = false;
  const EncoderLayerParams p = random_layer(cfg, 2, rng);
  const ClipFeatures clip = random_clip(rng, {{4, 4}, {2, 2}}, 2, 8);
  const Mat q = rng.normal_matrix(3, 8);
  Mat swapped = q;
  swapped.row(0).swap(swapped.row(2));
  const Mat a = encoder_layer(clip, Var::constant(q), p, cfg).frame_queries.value();
  Mat b = encoder_layer(clip, Var::constant(swapped), p, cfg).frame_queries.value();
  for (Index t = 0; t < 2; ++t) b.row(t * 3).swap(b.row(t * 3 + 2));
  CHECK(max_diff(a, b) <= 1e-14);
}

TEST_CASE("bottleneck gradcheck") {
  Rng rng(11);
  const BottleneckConfig cfg = small_config(4, 2);
  EncoderLayerParams p = random_layer(cfg, 2, rng);
  ClipFeatures clip = random_clip(rng, {{4, 4}, {3, 3}}, 2, 4);
  clip.maps[1][0] = Var::parameter(clip.maps[1][0].value());
  const Var queries = Var::parameter(rng.normal_matrix(2, 4));
  const Mat probe0 = rng.normal_matrix(9, 4);
  const Mat probe1 = rng.normal_matrix(9, 4);
  NamedParams params;
  p.collect("enc", params);
  params.add("queries", queries);
  params.add("frame0", clip.maps[1][0]);
  const auto report = check_gradients(
      [&] {
        const EncoderOutput out = encoder_layer(clip, queries, p, cfg);
        return add(sum(mul(out.clip.maps[1][0], Var::constant(probe0))),
                   sum(mul(out.clip.maps[1][1], Var::constant(probe1))));
      },
      params.vars, params.names);
  for (const auto& pc : report.params) {
    CAPTURE(pc.name);
    CHECK(pc.rel_error <= 1e-5);
  }
}
