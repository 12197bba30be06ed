#include "clipseg/model.hpp"

#include "json.hpp"

#include <cmath>
#include <numbers>
#include <set>
#include <sstream>

namespace clipseg::model {

using nlohmann::json;

ModelConfig ModelConfig::micro() {
  ModelConfig c;
  c.channels = 8;
  c.bottleneck_queries = 4;
  c.decoder_queries = 3;
  c.frames = 2;
  c.kernel = 3;
  c.dilation = 1;
  c.heads = 2;
  c.encoder_layers = 1;
  c.decoder_layers = 1;
  c.state = 4;
  c.rank = 2;
  c.scales = 2;
  c.height = 16;
  c.width = 16;
  return c;
}

ModelConfig ModelConfig::small() {
  ModelConfig c = micro();
  c.channels = 16;
  c.frames = 3;
  c.encoder_layers = 2;
  c.decoder_layers = 2;
  c.scales = 3;
  c.height = 32;
  c.width = 32;
  return c;
}

void ModelConfig::validate() const {
  auto positive = [](Index v, const char* name) {
    if (v < 1) throw std::invalid_argument(std::string("config: ") + name + " must be positive");
  };
  positive(channels, "c");
  positive(bottleneck_queries, "n_bar");
  positive(decoder_queries, "n_hat");
  positive(frames, "t_clip");
  positive(state, "c_state");
  if (encoder_layers < 0 || decoder_layers < 0) throw std::invalid_argument("config: layer counts must be non-negative");
  if (scales < 2 || scales > 6) throw std::invalid_argument("config: scales must be in 2..6");
  const Index unit = Index{1} << (scales + 1);
  if (height < 1 || width < 1 || height % unit != 0 || width % unit != 0) {
    throw std::invalid_argument("config: frame extents must be positive multiples of 2^(scales+1) = " + std::to_string(unit));
  }
  bottleneck().validate();
  decoder().validate();
}

bottleneck::BottleneckConfig ModelConfig::bottleneck() const {
  bottleneck::BottleneckConfig b;
  b.channels = channels;
  b.queries = bottleneck_queries;
  b.heads = heads;
  b.scan = scan;
  b.orientation = orientation;
  b.strategy = strategy;
  b.state = state;
  b.rank = rank;
  b.use_cnp = use_cnp;
  b.use_hilbert_ss = use_hilbert_ss;
  b.cnp = {.kernel = kernel, .dilation = dilation, .heads = heads, .channels = channels};
  return b;
}

decoder::DecoderConfig ModelConfig::decoder() const {
  return {.channels = channels, .queries = decoder_queries, .heads = heads, .layers = decoder_layers};
}

GridShape ModelConfig::scale_shape(Index s) const {
  const Index stride = Index{4} << s;
  return {height / stride, width / stride};
}

namespace {

const std::set<std::string> kConfigKeys = {
    "c",      "n_bar",  "n_hat",  "t_clip",      "k",         "d",           "heads",          "layers",
    "decoder_layers", "c_state", "c_rank", "scales", "height", "width", "scan", "orientation",
    "scan_strategy", "use_cnp", "use_hilbert_ss", "lambda_class", "lambda_dice", "lambda_ce"};

std::string orientation_name(bottleneck::GridOrientation o) {
  return o == bottleneck::GridOrientation::QueriesAsRows ? "queries_as_rows" : "frames_as_rows";
}

}  // namespace

ModelConfig config_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("config: ") + e.what());
  }
  if (!j.is_object()) throw std::invalid_argument("config: expected a JSON object");
  for (const auto& item : j.items()) {
    if (!kConfigKeys.count(item.key())) throw std::invalid_argument("config: unknown key '" + item.key() + "'");
  }
  ModelConfig c;
  try {
    auto get = [&](const char* key, auto& field) {
      if (j.contains(key)) field = j.at(key).get<std::remove_reference_t<decltype(field)>>();
    };
    get("c", c.channels);
    get("n_bar", c.bottleneck_queries);
    get("n_hat", c.decoder_queries);
    get("t_clip", c.frames);
    get("k", c.kernel);
    get("d", c.dilation);
    get("heads", c.heads);
    get("layers", c.encoder_layers);
    get("decoder_layers", c.decoder_layers);
    get("c_state", c.state);
    get("c_rank", c.rank);
    get("scales", c.scales);
    get("height", c.height);
    get("width", c.width);
    get("use_cnp", c.use_cnp);
    get("use_hilbert_ss", c.use_hilbert_ss);
    get("lambda_class", c.weights.cls);
    get("lambda_dice", c.weights.dice);
    get("lambda_ce", c.weights.bce);
    if (j.contains("scan")) c.scan = hilbert::parse_curve_kind(j.at("scan").get<std::string>());
    if (j.contains("orientation")) {
      const auto o = j.at("orientation").get<std::string>();
      if (o == "queries_as_rows") {
        c.orientation = bottleneck::GridOrientation::QueriesAsRows;
      } else if (o == "frames_as_rows") {
        c.orientation = bottleneck::GridOrientation::FramesAsRows;
      } else {
        throw std::invalid_argument("config: orientation must be queries_as_rows or frames_as_rows");
      }
    }
    if (j.contains("scan_strategy")) {
      const auto s = j.at("scan_strategy").get<std::string>();
      if (s == "parallel") {
        c.strategy = s6::ScanStrategy::Parallel;
      } else if (s == "sequential") {
        c.strategy = s6::ScanStrategy::Sequential;
      } else {
        throw std::invalid_argument("config: scan_strategy must be parallel or sequential");
      }
    }
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

std::string config_to_json(const ModelConfig& c) {
  json j = {{"c", c.channels},
            {"n_bar", c.bottleneck_queries},
            {"n_hat", c.decoder_queries},
            {"t_clip", c.frames},
            {"k", c.kernel},
            {"d", c.dilation},
            {"heads", c.heads},
            {"layers", c.encoder_layers},
            {"decoder_layers", c.decoder_layers},
            {"c_state", c.state},
            {"c_rank", c.rank},
            {"scales", c.scales},
            {"height", c.height},
            {"width", c.width},
            {"scan", hilbert::to_string(c.scan)},
            {"orientation", orientation_name(c.orientation)},
            {"scan_strategy", c.strategy == s6::ScanStrategy::Parallel ? "parallel" : "sequential"},
            {"use_cnp", c.use_cnp},
            {"use_hilbert_ss", c.use_hilbert_ss},
            {"lambda_class", c.weights.cls},
            {"lambda_dice", c.weights.dice},
            {"lambda_ce", c.weights.bce}};
  return j.dump(2);
}

// ---------------------------------------------------------------------------
// Synthetic data

SyntheticClip moving_ellipse(const EllipseOptions& o) {
  if (o.frames < 1 || o.height < 8 || o.width < 8) throw std::invalid_argument("moving_ellipse: clip too small");
  Rng rng(o.seed);
  const double h = static_cast<double>(o.height);
  const double w = static_cast<double>(o.width);
  const double side = std::min(h, w);
  const double ra = rng.uniform(0.16, 0.26) * side;
  const double rb = rng.uniform(0.16, 0.26) * side;
  const double angle = rng.uniform(0.0, std::numbers::pi);
  const double margin = std::max(ra, rb);
  double cy = rng.uniform(margin, h - margin);
  double cx = rng.uniform(margin, w - margin);
  const double speed = rng.uniform(0.03, 0.06) * side;
  const double heading = rng.uniform(0.0, 2.0 * std::numbers::pi);
  double vy = speed * std::sin(heading);
  double vx = speed * std::cos(heading);

  const auto T = static_cast<std::size_t>(o.frames);
  const auto H = static_cast<std::size_t>(o.height);
  const auto W = static_cast<std::size_t>(o.width);
  SyntheticClip clip{Tensor({T, H, W}), Tensor({1, T, H, W})};
  const double ca = std::cos(angle), sa = std::sin(angle);
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t y = 0; y < H; ++y) {
      for (std::size_t x = 0; x < W; ++x) {
        const double dy = static_cast<double>(y) + 0.5 - cy;
        const double dx = static_cast<double>(x) + 0.5 - cx;
        const double u = (dx * ca + dy * sa) / ra;
        const double v = (-dx * sa + dy * ca) / rb;
        const bool inside = u * u + v * v <= 1.0;
        const double value = o.background + (inside ? o.contrast : 0.0) + o.noise * rng.normal();
        clip.frames.at({t, y, x}) = std::clamp(value, 0.0, 1.0);
        clip.masks.at({0, t, y, x}) = inside ? 1.0 : 0.0;
      }
    }
    cy += vy;
    cx += vx;
    if (cy < margin || cy > h - margin) {
      vy = -vy;
      cy = std::clamp(cy, margin, h - margin);
    }
    if (cx < margin || cx > w - margin) {
      vx = -vx;
      cx = std::clamp(cx, margin, w - margin);
    }
  }
  return clip;
}

Mat downsample_masks(const Tensor& masks, Index stride) {
  if (masks.rank() != 4) throw std::invalid_argument("downsample_masks: expected G x T x H x W");
  const auto& s = masks.shape();
  const auto G = static_cast<Index>(s[0]), T = static_cast<Index>(s[1]);
  const auto H = static_cast<Index>(s[2]), W = static_cast<Index>(s[3]);
  if (stride < 1 || H % stride != 0 || W % stride != 0) throw std::invalid_argument("downsample_masks: stride must divide extents");
  const Index h = H / stride, w = W / stride;
  Mat out = Mat::Zero(G, T * h * w);
  const double cell = static_cast<double>(stride * stride);
  for (Index g = 0; g < G; ++g) {
    for (Index t = 0; t < T; ++t) {
      for (Index oy = 0; oy < h; ++oy) {
        for (Index ox = 0; ox < w; ++ox) {
          double acc = 0.0;
          for (Index py = 0; py < stride; ++py) {
            for (Index px = 0; px < stride; ++px) {
              acc += masks[static_cast<std::size_t>(((g * T + t) * H + oy * stride + py) * W + ox * stride + px)];
            }
          }
          out(g, t * h * w + oy * w + ox) = acc / cell >= 0.5 ? 1.0 : 0.0;
        }
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Network

Index stub_groups(Index channels) {
  for (Index g = std::min<Index>(8, channels); g > 1; --g) {
    if (channels % g == 0) return g;
  }
  return 1;
}

StubParams StubParams::init(const ModelConfig& config, Rng& rng) {
  const Index c = config.channels;
  StubParams p;
  for (Index s = 0; s < config.scales; ++s) {
    const Index fan_in = s == 0 ? 16 : 4 * c;
    p.stage.push_back(Var::parameter(rng.truncated_normal_matrix(fan_in, c, 1.0 / std::sqrt(static_cast<double>(fan_in)))));
    p.stage_norm.push_back(NormParams::init(c));
    p.project.push_back(Var::parameter(rng.truncated_normal_matrix(c, c, 1.0 / std::sqrt(static_cast<double>(c)))));
    p.project_norm.push_back(NormParams::init(c));
  }
  return p;
}

void StubParams::collect(const std::string& prefix, NamedParams& out) const {
  for (std::size_t s = 0; s < stage.size(); ++s) {
    const std::string tag = prefix + ".scale" + std::to_string(s);
    out.add(tag + ".patch", stage[s]);
    stage_norm[s].collect(tag + ".patch_norm", out);
    out.add(tag + ".project", project[s]);
    project_norm[s].collect(tag + ".project_norm", out);
  }
}

namespace {

// Flat indices that rearrange an (h*w x c) map into (h/f * w/f) rows of
// f*f*c patch values, patch-row-major then channel.
std::vector<Index> patch_index(Index h, Index w, Index c, Index f) {
  const Index oh = h / f, ow = w / f;
  std::vector<Index> idx;
  idx.reserve(static_cast<std::size_t>(oh * ow * f * f * c));
  for (Index oy = 0; oy < oh; ++oy) {
    for (Index ox = 0; ox < ow; ++ox) {
      for (Index py = 0; py < f; ++py) {
        for (Index px = 0; px < f; ++px) {
          for (Index ch = 0; ch < c; ++ch) idx.push_back(((oy * f + py) * w + ox * f + px) * c + ch);
        }
      }
    }
  }
  return idx;
}

}  // namespace

ClipFeatures feature_stub(const Tensor& frames, const StubParams& params, const ModelConfig& config) {
  const auto& s = frames.shape();
  if (s.size() != 3 || static_cast<Index>(s[0]) != config.frames || static_cast<Index>(s[1]) != config.height ||
      static_cast<Index>(s[2]) != config.width) {
    throw std::invalid_argument("feature_stub: frames must be t_clip x height x width");
  }
  const Index unit = Index{1} << (config.scales + 1);
  if (config.height % unit != 0 || config.width % unit != 0) {
    throw std::invalid_argument("feature_stub: extents must be divisible by 2^(scales+1)");
  }
  const Index c = config.channels;
  const Index groups = stub_groups(c);
  ClipFeatures clip;
  for (Index k = 0; k < config.scales; ++k) clip.shapes.push_back(config.scale_shape(k));
  clip.maps.assign(static_cast<std::size_t>(config.scales), {});

  std::vector<std::vector<Index>> index;
  index.push_back(patch_index(config.height, config.width, 1, 4));
  for (Index k = 1; k < config.scales; ++k) {
    const GridShape prev = clip.shapes[static_cast<std::size_t>(k - 1)];
    index.push_back(patch_index(prev.height, prev.width, c, 2));
  }

  const Index pixels = config.height * config.width;
  for (Index t = 0; t < config.frames; ++t) {
    const Mat image = Eigen::Map<const Mat>(frames.data().data() + t * pixels, 1, pixels);
    Var x = Var::constant(image);
    for (Index k = 0; k < config.scales; ++k) {
      const auto ks = static_cast<std::size_t>(k);
      const Index rows = clip.shapes[ks].cells();
      const Var patches = gather_flat(x, index[ks], rows, static_cast<Index>(index[ks].size()) / rows);
      x = silu(group_norm(matmul(patches, params.stage[ks]), groups, params.stage_norm[ks].scale,
                          params.stage_norm[ks].shift));
      const NormParams& pn = params.project_norm[ks];
      clip.maps[ks].push_back(group_norm(matmul(x, params.project[ks]), groups, pn.scale, pn.shift));
    }
  }
  return clip;
}

ModelParams ModelParams::init(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(seed);
  ModelParams p;
  p.stub = StubParams::init(config, rng);
  p.encoder = bottleneck::BottleneckParams::init(config.bottleneck(), config.scales, config.encoder_layers, rng);
  p.decoder = decoder::DecoderParams::init(config.decoder(), config.scales, rng);
  return p;
}

NamedParams ModelParams::named() const {
  NamedParams out;
  stub.collect("stub", out);
  encoder.collect("encoder", out);
  decoder.collect("decoder", out);
  return out;
}

decoder::Prediction forward(const Tensor& frames, const ModelParams& params, const ModelConfig& config) {
  ClipFeatures clip = feature_stub(frames, params.stub, config);
  const auto bcfg = config.bottleneck();
  for (const auto& layer : params.encoder.layers) clip = bottleneck::encoder_layer(clip, params.encoder.queries, layer, bcfg).clip;
  return decoder::decode(clip, params.decoder, config.decoder());
}

// ---------------------------------------------------------------------------
// Training

namespace {

TraceRow evaluate(const decoder::Prediction& pred, const decoder::MatchedLoss& loss, const Mat& targets, Index step) {
  TraceRow row;
  row.step = step;
  row.total = loss.total.item();
  row.cls = loss.cls;
  row.dice = loss.dice;
  row.bce = loss.bce;
  const auto sel = decoder::select_output(pred.masks.value(), pred.class_logits.value(), pred.frames);
  Mat truth = Mat::Zero(1, targets.cols());
  if (targets.rows() > 0) truth = targets.colwise().maxCoeff();
  const Mat truth_frames = Eigen::Map<const Mat>(truth.data(), sel.mask.rows(), sel.mask.cols());
  row.train_dice = decoder::metrics(sel.mask, truth_frames).dice;
  return row;
}

}  // namespace

std::vector<TraceRow> overfit(const SyntheticClip& clip, ModelParams& params, const ModelConfig& config,
                              const OverfitOptions& options, const std::function<void(const TraceRow&)>& on_step) {
  if (options.steps < 0) throw std::invalid_argument("overfit: steps must be non-negative");
  if (!(options.lr > 0.0)) throw std::invalid_argument("overfit: learning rate must be positive");
  const Mat targets = downsample_masks(clip.masks, 4);
  const NamedParams named = params.named();
  std::vector<TraceRow> trace;
  for (Index step = 0; step <= options.steps; ++step) {
    Tape tape;
    decoder::Prediction pred;
    decoder::MatchedLoss loss;
    try {
      pred = forward(clip.frames, params, config);
      loss = decoder::matched_loss(pred, targets, config.weights);
    } catch (const NumericalError& e) {
      throw NumericalError("overfit: non-finite value at step " + std::to_string(step) + ": " + e.what());
    }
    trace.push_back(evaluate(pred, loss, targets, step));
    if (on_step) on_step(trace.back());
    if (step == options.steps) break;
    const auto grads = tape.gradient(loss.total, named.vars);
    for (std::size_t i = 0; i < grads.size(); ++i) {
      if (!grads[i].allFinite()) {
        throw NumericalError("overfit: non-finite gradient for " + named.names[i] + " at step " + std::to_string(step));
      }
      Var v = named.vars[i];
      v.mutable_value() -= options.lr * grads[i];
    }
  }
  return trace;
}

std::string trace_to_csv(const std::vector<TraceRow>& trace) {
  std::ostringstream out;
  out.precision(10);
  out << "step,total,class,dice,bce,train_dice\n";
  for (const auto& r : trace) {
    out << r.step << ',' << r.total << ',' << r.cls << ',' << r.dice << ',' << r.bce << ',' << r.train_dice << '\n';
  }
  return out.str();
}

}  // namespace clipseg::model
