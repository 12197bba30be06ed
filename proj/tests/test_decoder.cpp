#include "doctest.h"

#include "clipseg/decoder.hpp"
#include "clipseg/numkit/gradcheck.hpp"

#include <cmath>
#include <functional>
#include <limits>

using namespace clipseg;
using namespace clipseg::decoder;

namespace {

// Minimum over all injections targets -> queries by exhaustive enumeration.
double brute_force_min(const Mat& cost) {
  const Index n = cost.rows();
  const Index g = cost.cols();
  std::vector<char> used(static_cast<std::size_t>(n), 0);
  std::vector<Index> pick(static_cast<std::size_t>(g));
  double best = std::numeric_limits<double>::infinity();
  std::function<void(Index)> rec = [&](Index k) {
    if (k == g) {
      best = std::min(best, assignment_cost(cost, pick));
      return;
    }
    for (Index q = 0; q < n; ++q) {
      if (used[static_cast<std::size_t>(q)]) continue;
      used[static_cast<std::size_t>(q)] = 1;
      pick[static_cast<std::size_t>(k)] = q;
      rec(k + 1);
      used[static_cast<std::size_t>(q)] = 0;
    }
  };
  rec(0);
  return best;
}

Mat random_binary(Rng& rng, Index rows, Index cols, double p = 0.4) {
  Mat m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform() < p ? 1.0 : 0.0;
  return m;
}

DecoderLayerParams random_layer(const DecoderConfig& cfg, Rng& rng) {
  DecoderLayerParams p = DecoderLayerParams::init(cfg, rng);
  const Index c = cfg.channels;
  for (AttentionParams* a : {&p.cross, &p.self}) {
    for (Var* w : {&a->w_q, &a->w_k, &a->w_v, &a->w_o}) w->mutable_value() = rng.normal_matrix(c, c, 0.5);
  }
  p.ffn_in.weight.mutable_value() = rng.normal_matrix(c, cfg.hidden(), 0.5);
  p.ffn_in.bias.mutable_value() = rng.normal_matrix(1, cfg.hidden(), 0.5);
  p.ffn_out.weight.mutable_value() = rng.normal_matrix(cfg.hidden(), c, 0.5);
  p.ffn_out.bias.mutable_value() = rng.normal_matrix(1, c, 0.5);
  return p;
}

double max_diff(const Mat& a, const Mat& b) { return (a - b).cwiseAbs().maxCoeff(); }

}  // namespace

TEST_CASE("layers cycle over attended scales coarsest first") {
  CHECK(layer_scale(0, 4) == 3);
  CHECK(layer_scale(1, 4) == 2);
  CHECK(layer_scale(2, 4) == 1);
  CHECK(layer_scale(3, 4) == 3);
  CHECK(layer_scale(5, 2) == 1);
  CHECK_THROWS_AS(layer_scale(0, 1), std::invalid_argument);
}

TEST_CASE("cross-attention memory spans every frame") {
  Rng rng(1);
  ClipFeatures clip;
  clip.shapes = {{16, 16}, {8, 8}};
  for (const auto& g : clip.shapes) {
    std::vector<Var> frames;
    for (int t = 0; t < 6; ++t) frames.push_back(Var::constant(rng.normal_matrix(g.cells(), 8)));
    clip.maps.push_back(frames);
  }
  const Var mem = frame_memory(clip, 1);
  CHECK(mem.rows() == 384);
  CHECK(mem.value().middleRows(64 * 5, 64) == clip.maps[1][5].value());
  const Var embed = memory_embedding({8, 8}, 6, Var::constant(Mat::Zero(1, 8)));
  CHECK(embed.rows() == 384);
  CHECK(embed.value().topRows(64) == embed.value().bottomRows(64));
}

TEST_CASE("decoder layer residual identity") {
  Rng rng(2);
  DecoderConfig cfg{.channels = 8, .queries = 3, .heads = 2, .layers = 1, .ffn_hidden = 16};
  DecoderLayerParams p = random_layer(cfg, rng);
  const Var q = Var::constant(rng.normal_matrix(3, 8));
  const Var pos = Var::constant(rng.normal_matrix(3, 8));
  const Var mem = Var::constant(rng.normal_matrix(20, 8));
  const Var embed = Var::constant(rng.normal_matrix(20, 8));
  CHECK(max_diff(decoder_layer(q, pos, mem, embed, p).value(), q.value()) > 1e-6);

  p.cross.w_v.mutable_value().setZero();
  p.self.w_o.mutable_value().setZero();
  p.ffn_out.weight.mutable_value().setZero();
  p.ffn_out.bias.mutable_value().setZero();
  CHECK(decoder_layer(q, pos, mem, embed, p).value() == q.value());
  CHECK_THROWS_AS(decoder_layer(q, pos, mem, Var::constant(Mat::Zero(19, 8)), p), std::invalid_argument);
}

TEST_CASE("decoder layer gradcheck") {
  Rng rng(3);
  DecoderConfig cfg{.channels = 4, .queries = 3, .heads = 2, .layers = 1, .ffn_hidden = 6};
  DecoderLayerParams p = random_layer(cfg, rng);
  const Var q = Var::parameter(rng.normal_matrix(3, 4));
  const Var pos = Var::parameter(rng.normal_matrix(3, 4));
  const Var mem = Var::parameter(rng.normal_matrix(7, 4));
  const Var embed = Var::constant(rng.normal_matrix(7, 4));
  const Mat probe = rng.normal_matrix(3, 4);
  NamedParams params;
  p.collect("layer", params);
  params.add("queries", q);
  params.add("query_pos", pos);
  params.add("memory", mem);
  const auto report = check_gradients(
      [&] { return sum(mul(decoder_layer(q, pos, mem, embed, p), Var::constant(probe))); }, params.vars, params.names);
  for (const auto& pc : report.params) {
    CAPTURE(pc.name);
    CHECK(pc.rel_error <= 1e-5);
    CHECK(pc.analytic_norm > 0.0);
  }
}

TEST_CASE("mask head is a bilinear dynamic convolution") {
  Rng rng(4);
  Mat pixels = rng.normal_matrix(30, 4);
  pixels.col(3).setZero();
  Mat emb = Mat::Zero(2, 4);
  emb(0, 3) = 1.7;
  emb.row(1) = rng.normal_matrix(1, 4);
  const Mat logits = mask_logits(Var::constant(emb), Var::constant(pixels)).value();
  CHECK(logits.rows() == 2);
  CHECK(logits.cols() == 30);
  CHECK((logits.row(0).array() == 0.0).all());

  const Mat doubled = mask_logits(Var::constant(emb * 2.0), Var::constant(pixels)).value();
  CHECK(max_diff(doubled, 2.0 * logits) <= 1e-12);

  const Mat big = mask_logits(Var::constant(rng.normal_matrix(10, 64)), Var::constant(rng.normal_matrix(6 * 88 * 88, 64))).value();
  CHECK(big.rows() == 10);
  CHECK(big.cols() == 6 * 7744);
}

TEST_CASE("hungarian matching examples") {
  Mat cost(2, 2);
  cost << 1, 2, 2, 1;
  CHECK(hungarian_match(cost) == std::vector<Index>{0, 1});
  CHECK(assignment_cost(cost, hungarian_match(cost)) == 2.0);

  Mat column(5, 1);
  column << 3, 0.5, 2, 0.5, 9;
  CHECK(hungarian_match(column) == std::vector<Index>{1});

  CHECK(hungarian_match(Mat(4, 0)).empty());
  CHECK_THROWS_AS(hungarian_match(Mat::Zero(2, 3)), std::invalid_argument);

  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    const Mat c = rng.uniform_matrix(6, 4, 0.0, 10.0);
    const auto a = hungarian_match(c);
    CHECK(assignment_cost(c, a) == brute_force_min(c));
  }
}

TEST_CASE("hungarian equals exhaustive search") {
  Rng rng(6);
  for (int trial = 0; trial < 1000; ++trial) {
    const Index n = 1 + static_cast<Index>(rng.below(8));
    const Index g = std::min<Index>(n, static_cast<Index>(rng.below(6)));
    Mat c = rng.uniform_matrix(n, g, -5.0, 5.0);
    if (trial % 4 == 0) c = c.array().round();  // many ties
    const auto a = hungarian_match(c);
    std::vector<char> used(static_cast<std::size_t>(n), 0);
    for (Index q : a) {
      REQUIRE(q >= 0);
      REQUIRE(!used[static_cast<std::size_t>(q)]);
      used[static_cast<std::size_t>(q)] = 1;
    }
    CHECK(assignment_cost(c, a) == brute_force_min(c));
  }
}

TEST_CASE("matched loss components") {
  Rng rng(7);
  const Index pixels = 24;
  const Mat targets = random_binary(rng, 2, pixels);

  // Saturated correct prediction: query 2 -> target 0, query 0 -> target 1.
  Mat masks = Mat::Constant(3, pixels, -1e9);
  Mat cls(3, 2);
  cls << 1e3, -1e3, -1e3, 1e3, 1e3, -1e3;
  masks.row(2) = (targets.row(0).array() * 2e9 - 1e9).matrix();
  masks.row(0) = (targets.row(1).array() * 2e9 - 1e9).matrix();
  Prediction pred{Var::constant(masks), Var::constant(cls), 2, {4, 3}};
  const MatchedLoss perfect = matched_loss(pred, targets);
  CHECK(perfect.assignment == std::vector<Index>{2, 0});
  CHECK(perfect.dice <= 1e-6);
  CHECK(perfect.bce <= 1e-6);
  CHECK(perfect.cls <= 1e-6);

  // Random prediction: total is the weighted sum and equals the matched cost.
  pred.masks = Var::constant(rng.normal_matrix(3, pixels, 2.0));
  pred.class_logits = Var::constant(rng.normal_matrix(3, 2));
  const MatchedLoss l = matched_loss(pred, targets);
  CHECK(l.total.item() == doctest::Approx(2.0 * l.cls + 5.0 * l.dice + 2.0 * l.bce).epsilon(1e-14));
  CHECK(l.total.item() >= 0.0);
  const Mat cost = matching_cost(pred.masks.value(), pred.class_logits.value(), targets);
  CHECK(assignment_cost(cost, l.assignment) == brute_force_min(cost));

  // Empty target set: class loss only, every query is background.
  const MatchedLoss empty = matched_loss(pred, Mat(0, pixels));
  CHECK(empty.assignment.empty());
  CHECK(empty.dice == 0.0);
  CHECK(empty.bce == 0.0);
  const Mat logp = kernels::log_softmax(pred.class_logits.value());
  CHECK(empty.cls == doctest::Approx(-logp.col(1).mean()).epsilon(1e-14));
  CHECK(empty.total.item() == doctest::Approx(2.0 * empty.cls).epsilon(1e-14));

  Mat bad = targets;
  bad(0, 0) = 0.5;
  CHECK_THROWS_AS(matched_loss(pred, bad), std::invalid_argument);
  CHECK_THROWS_AS(matched_loss(pred, random_binary(rng, 4, pixels)), std::invalid_argument);
}

TEST_CASE("matched loss gradcheck") {
  Rng rng(8);
  const Mat targets = random_binary(rng, 2, 10);
  const Var masks = Var::parameter(rng.normal_matrix(4, 10, 2.0));
  const Var cls = Var::parameter(rng.normal_matrix(4, 2));
  const Prediction pred{masks, cls, 2, {1, 5}};
  std::vector<Var> params{masks, cls};
  std::vector<std::string> names{"masks", "class_logits"};
  const auto report = check_gradients([&] { return matched_loss(pred, targets).total; }, params, names);
  for (const auto& pc : report.params) {
    CAPTURE(pc.name);
    CHECK(pc.rel_error <= 1e-5);
  }
}

TEST_CASE("output selection") {
  Mat cls(3, 2);
  cls << std::log(0.1), std::log(0.9), std::log(0.9), std::log(0.1), std::log(0.1), std::log(0.9);
  Mat masks(3, 4);
  masks << -1, -1, -1, -1, 2, -3, 0.5, -0.1, 1, 1, 1, 1;
  const Selection s = select_output(masks, cls, 2);
  CHECK(s.query == 1);
  CHECK(s.confidence == doctest::Approx(0.9).epsilon(1e-12));
  CHECK(s.mask.rows() == 2);
  CHECK(s.mask == (Mat(2, 2) << 1, 0, 1, 0).finished());

  Mat tied = Mat::Zero(3, 2);
  CHECK(select_output(masks, tied, 2).query == 0);
  tied(2, 0) = 1.0;
  tied(1, 0) = 1.0;
  CHECK(select_output(masks, tied, 2).query == 1);

  Rng rng(9);
  for (int trial = 0; trial < 20; ++trial) {
    const Mat logits = rng.normal_matrix(5, 2, 3.0);
    const Selection base = select_output(masks.topRows(1).replicate(5, 1), logits, 2);
    CHECK(base.confidence >= 0.0);
    CHECK(base.confidence <= 1.0);
    // Scaling the logit margin by a positive factor is a monotone map of the foreground probability.
    Mat warped = logits;
    warped.col(0) = logits.col(0) * 3.7 + Mat::Constant(5, 1, 0.3);
    warped.col(1) = logits.col(1) * 3.7 + Mat::Constant(5, 1, 0.3);
    CHECK(select_output(masks.topRows(1).replicate(5, 1), warped, 2).query == base.query);
  }
}

TEST_CASE("mask metrics") {
  Mat top = Mat::Zero(4, 4), left = Mat::Zero(4, 4);
  top.topRows(2).setOnes();
  left.leftCols(2).setOnes();
  const auto m = metrics(top, left);
  CHECK(m.dice == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(m.iou == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  CHECK(m.mae == doctest::Approx(0.5).epsilon(1e-15));

  const auto same = metrics(top, top);
  CHECK(same.dice == 1.0);
  CHECK(same.iou == 1.0);
  CHECK(same.mae == 0.0);

  Mat bottom = Mat::Zero(4, 4);
  bottom.bottomRows(2).setOnes();
  CHECK(metrics(top, bottom).dice == 0.0);
  CHECK(metrics(top, bottom).iou == 0.0);

  const auto empty = metrics(Mat::Zero(3, 3), Mat::Zero(3, 3));
  CHECK(empty.dice == 1.0);
  CHECK(empty.iou == 1.0);
  CHECK(empty.mae == 0.0);

  Rng rng(10);
  for (int trial = 0; trial < 100; ++trial) {
    const auto r = metrics(random_binary(rng, 5, 7), random_binary(rng, 5, 7));
    CHECK(r.iou == doctest::Approx(r.dice / (2.0 - r.dice)).epsilon(1e-12));
  }
  CHECK_THROWS_AS(metrics(top, Mat::Zero(4, 3)), std::invalid_argument);
  CHECK_THROWS_AS(metrics(top * 0.5, top), std::invalid_argument);
}
