#include "clipseg/verify.hpp"

#include "clipseg/model.hpp"
#include "clipseg/numkit/gradcheck.hpp"

#include <functional>

namespace clipseg::verify {

void jitter(NamedParams& params, Rng& rng, double stddev) {
  for (Var& v : params.vars) v.mutable_value() += rng.normal_matrix(v.rows(), v.cols(), stddev);
}

namespace {

OpCheck summarize(std::string op, const GradCheckReport& report, double tolerance) {
  OpCheck out;
  out.op = std::move(op);
  out.tolerance = tolerance;
  out.groups = report.params.size();
  for (const auto& pc : report.params) {
    if (pc.rel_error >= out.rel_error) {
      out.rel_error = pc.rel_error;
      out.worst = pc.name;
    }
  }
  return out;
}

struct Probe {
  Rng& rng;
  std::vector<Mat> weights;
  // Fixed random linear functional of one output, drawn on first use.
  Var operator()(const Var& y, std::size_t slot = 0) {
    if (slot >= weights.size()) weights.resize(slot + 1);
    if (weights[slot].size() == 0) weights[slot] = rng.normal_matrix(y.rows(), y.cols());
    return sum(mul(y, Var::constant(weights[slot])));
  }
};

ClipFeatures random_clip(Rng& rng, const std::vector<GridShape>& shapes, Index frames, Index c, NamedParams& params) {
  ClipFeatures clip;
  clip.shapes = shapes;
  for (std::size_t s = 0; s < shapes.size(); ++s) {
    std::vector<Var> per_frame;
    for (Index t = 0; t < frames; ++t) {
      per_frame.push_back(Var::parameter(rng.normal_matrix(shapes[s].cells(), c)));
      params.add("x.s" + std::to_string(s) + ".t" + std::to_string(t), per_frame.back());
    }
    clip.maps.push_back(per_frame);
  }
  return clip;
}

Var probe_clip(Probe& probe, const ClipFeatures& clip) {
  Var total = Var::constant(Mat::Zero(1, 1));
  std::size_t slot = 0;
  for (Index s = 1; s < clip.scales(); ++s) {
    for (const Var& m : clip.maps[static_cast<std::size_t>(s)]) total = add(total, probe(m, slot++));
  }
  return total;
}

}  // namespace

std::vector<OpCheck> op_gradchecks(std::uint64_t seed) {
  Rng rng(seed);
  std::vector<OpCheck> out;
  const Index c = 4;

  auto run = [&](std::string op, NamedParams& params, const std::function<Var()>& loss) {
    jitter(params, rng, 0.3);
    out.push_back(summarize(std::move(op), check_gradients(loss, params.vars, params.names), kOpTolerance));
  };

  {
    NamedParams ps;
    LinearParams lin = LinearParams::init(5, 3, rng);
    lin.collect("linear", ps);
    const Var x = Var::parameter(rng.normal_matrix(6, 5));
    ps.add("x", x);
    Probe probe{rng, {}};
    run("linear", ps, [&] { return probe(linear(x, lin)); });
  }
  {
    NamedParams ps;
    NormParams norm = NormParams::init(6);
    norm.collect("layer_norm", ps);
    const Var x = Var::parameter(rng.normal_matrix(5, 6));
    ps.add("x", x);
    Probe probe{rng, {}};
    run("layer_norm", ps, [&] { return probe(layer_norm(x, norm)); });
  }
  {
    NamedParams ps;
    NormParams norm = NormParams::init(6);
    norm.collect("group_norm", ps);
    const Var x = Var::parameter(rng.normal_matrix(7, 6));
    ps.add("x", x);
    Probe probe{rng, {}};
    run("group_norm", ps, [&] { return probe(group_norm(x, 3, norm.scale, norm.shift)); });
  }
  for (auto padding : {kernels::Padding::Causal, kernels::Padding::Same}) {
    NamedParams ps;
    const Var x = Var::parameter(rng.normal_matrix(9, 3));
    const Var k = Var::parameter(rng.normal_matrix(padding == kernels::Padding::Causal ? 4 : 3, 3));
    ps.add("x", x);
    ps.add("kernel", k);
    Probe probe{rng, {}};
    run(padding == kernels::Padding::Causal ? "conv1d_causal" : "conv1d_same", ps,
        [&] { return probe(conv1d_depthwise(x, k, padding)); });
  }
  {
    NamedParams ps;
    AttentionParams attn = AttentionParams::init(c, 2, rng);
    attn.collect("attention", ps);
    const Var q = Var::parameter(rng.normal_matrix(3, c));
    const Var kv = Var::parameter(rng.normal_matrix(5, c));
    ps.add("queries", q);
    ps.add("keys_values", kv);
    Probe probe{rng, {}};
    run("attention", ps, [&] { return probe(attention(q, kv, kv, attn)); });
  }
  for (auto strategy : {s6::ScanStrategy::Parallel, s6::ScanStrategy::Sequential}) {
    NamedParams ps;
    s6::S6Params p = s6::S6Params::init({.channels = c, .state = 3, .rank = 2, .conv_width = 4}, rng);
    const auto vars = p.parameters();
    const auto names = p.parameter_names();
    for (std::size_t i = 0; i < vars.size(); ++i) ps.add(names[i], vars[i]);
    const Var x = Var::parameter(rng.normal_matrix(8, c));
    ps.add("x", x);
    Probe probe{rng, {}};
    run(strategy == s6::ScanStrategy::Parallel ? "s6_parallel" : "s6_sequential", ps,
        [&] { return probe(s6::forward(x, p, strategy)); });
  }

  bottleneck::BottleneckConfig bcfg;
  bcfg.channels = c;
  bcfg.queries = 2;
  bcfg.heads = 2;
  bcfg.state = 3;
  bcfg.rank = 2;
  bcfg.cnp = {.kernel = 3, .dilation = 1, .heads = 2, .channels = c};
  const std::vector<GridShape> shapes{{4, 4}, {3, 3}, {2, 2}};

  {
    NamedParams ps;
    cnp::CnpParams p = cnp::CnpParams::init(bcfg.cnp, rng);
    p.collect("cnp", ps);
    const Var cur = Var::parameter(rng.normal_matrix(12, c));
    const Var prev = Var::parameter(rng.normal_matrix(12, c));
    ps.add("v_t", cur);
    ps.add("v_prev", prev);
    Probe probe{rng, {}};
    run("cnp_attend", ps, [&] { return probe(cnp::cnp_attend(cur, prev, {4, 3}, bcfg.cnp, p)); });
  }
  {
    NamedParams ps;
    cnp::CnpParams p = cnp::CnpParams::init(bcfg.cnp, rng);
    p.collect("cnp", ps);
    const ClipFeatures clip = random_clip(rng, shapes, 2, c, ps);
    Probe probe{rng, {}};
    run("cnp_layer", ps, [&] { return probe_clip(probe, cnp::cnp_layer(clip, bcfg.cnp, p)); });
  }
  {
    NamedParams ps;
    AttentionParams attn = AttentionParams::init(c, 2, rng);
    NormParams norm = NormParams::init(c);
    attn.collect("condense", ps);
    norm.collect("condense_norm", ps);
    const Var q = Var::parameter(rng.normal_matrix(2, c));
    const Var tokens = Var::parameter(rng.normal_matrix(6, c));
    const Var key = Var::parameter(rng.normal_matrix(6, c));
    ps.add("queries", q);
    ps.add("tokens", tokens);
    ps.add("key_embedding", key);
    Probe probe{rng, {}};
    run("condense", ps, [&] { return probe(bottleneck::condense(q, tokens, key, attn, norm, bcfg.scale)); });
  }
  {
    NamedParams ps;
    AttentionParams attn = AttentionParams::init(c, 2, rng);
    NormParams norm = NormParams::init(c);
    attn.collect("distribute", ps);
    norm.collect("distribute_norm", ps);
    const Var tokens = Var::parameter(rng.normal_matrix(6, c));
    const Var key = Var::parameter(rng.normal_matrix(6, c));
    const Var fq = Var::parameter(rng.normal_matrix(2, c));
    ps.add("tokens", tokens);
    ps.add("key_embedding", key);
    ps.add("frame_queries", fq);
    Probe probe{rng, {}};
    run("distribute", ps, [&] { return probe(bottleneck::distribute(tokens, key, fq, attn, norm, bcfg.scale)); });
  }
  {
    NamedParams ps;
    s6::S6Params p = s6::S6Params::init({.channels = c, .state = 3, .rank = 2, .conv_width = 4}, rng);
    NormParams norm = NormParams::init(c);
    const auto vars = p.parameters();
    const auto names = p.parameter_names();
    for (std::size_t i = 0; i < vars.size(); ++i) ps.add(names[i], vars[i]);
    norm.collect("scan_norm", ps);
    const Var fq = Var::parameter(rng.normal_matrix(3 * 4, c));
    ps.add("frame_queries", fq);
    Probe probe{rng, {}};
    run("hilbert_ss", ps, [&] { return probe(bottleneck::hilbert_ss(fq, 3, 4, p, norm, bcfg)); });
  }
  {
    NamedParams ps;
    bottleneck::EncoderLayerParams p = bottleneck::EncoderLayerParams::init(bcfg, 3, rng);
    p.collect("encoder", ps);
    const Var q = Var::parameter(rng.normal_matrix(2, c));
    ps.add("queries", q);
    const ClipFeatures clip = random_clip(rng, shapes, 2, c, ps);
    Probe probe{rng, {}};
    run("encoder_layer", ps, [&] {
      const auto enc = bottleneck::encoder_layer(clip, q, p, bcfg);
      return add(probe_clip(probe, enc.clip), probe(enc.frame_queries, 100));
    });
  }

  decoder::DecoderConfig dcfg{.channels = c, .queries = 3, .heads = 2, .layers = 2, .ffn_hidden = 6};
  {
    NamedParams ps;
    decoder::DecoderLayerParams p = decoder::DecoderLayerParams::init(dcfg, rng);
    p.collect("decoder", ps);
    const Var q = Var::parameter(rng.normal_matrix(3, c));
    const Var pos = Var::parameter(rng.normal_matrix(3, c));
    const Var mem = Var::parameter(rng.normal_matrix(7, c));
    const Var embed = Var::parameter(rng.normal_matrix(7, c));
    ps.add("queries", q);
    ps.add("query_pos", pos);
    ps.add("memory", mem);
    ps.add("memory_embedding", embed);
    Probe probe{rng, {}};
    run("decoder_layer", ps, [&] { return probe(decoder::decoder_layer(q, pos, mem, embed, p, dcfg.scale)); });
  }
  {
    NamedParams ps;
    LinearParams in = LinearParams::init(c, c, rng);
    LinearParams outp = LinearParams::init(c, c, rng);
    in.collect("mask_in", ps);
    outp.collect("mask_out", ps);
    const Var q = Var::parameter(rng.normal_matrix(3, c));
    const Var pixels = Var::parameter(rng.normal_matrix(10, c));
    ps.add("queries", q);
    ps.add("pixels", pixels);
    Probe probe{rng, {}};
    run("mask_head", ps, [&] { return probe(decoder::mask_logits(decoder::query_embedding(q, in, outp), pixels)); });
  }
  {
    NamedParams ps;
    decoder::DecoderParams p = decoder::DecoderParams::init(dcfg, 3, rng);
    p.collect("decoder", ps);
    const ClipFeatures clip = random_clip(rng, shapes, 2, c, ps);
    Mat targets = Mat::Zero(2, 2 * 16);
    for (Index j = 0; j < targets.cols(); ++j) targets(j % 2, j) = rng.uniform() < 0.6 ? 1.0 : 0.0;
    run("decode_matched_loss", ps, [&] { return decoder::matched_loss(decoder::decode(clip, p, dcfg), targets).total; });
  }
  {
    NamedParams ps;
    model::ModelConfig cfg = model::ModelConfig::micro();
    cfg.channels = c;
    cfg.heads = 2;
    model::StubParams p = model::StubParams::init(cfg, rng);
    p.collect("stub", ps);
    const model::SyntheticClip clip = model::moving_ellipse({.frames = 2, .height = 16, .width = 16, .seed = seed});
    Probe probe{rng, {}};
    run("feature_stub", ps, [&] {
      const ClipFeatures f = model::feature_stub(clip.frames, p, cfg);
      return add(probe(f.maps[0][0], 50), probe_clip(probe, f));
    });
  }
  return out;
}

OpCheck model_gradcheck(std::uint64_t seed) {
  const model::ModelConfig cfg = model::ModelConfig::micro();
  model::ModelParams p = model::ModelParams::init(cfg, seed);
  const model::SyntheticClip clip =
      model::moving_ellipse({.frames = cfg.frames, .height = cfg.height, .width = cfg.width, .seed = seed});
  const Mat targets = model::downsample_masks(clip.masks, 4);
  NamedParams named = p.named();
  const auto report = check_gradients(
      [&] { return decoder::matched_loss(model::forward(clip.frames, p, cfg), targets, cfg.weights).total; },
      named.vars, named.names);
  return summarize("micro_model", report, kModelTolerance);
}

}  // namespace clipseg::verify
