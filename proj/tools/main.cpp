#include "clipseg/model.hpp"
#include "clipseg/numkit/kernels.hpp"
#include "clipseg/numkit/parallel.hpp"
#include "clipseg/verify.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

using namespace clipseg;
using json = nlohmann::ordered_json;
namespace fs = std::filesystem;

namespace {

constexpr int kOk = 0;
constexpr int kValidation = 1;
constexpr int kNumerical = 2;

struct NumericCheckFailed : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::invalid_argument("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::invalid_argument("cannot write " + path.string());
  out << text;
}

void emit(const std::string& text, const std::string& out_path) {
  if (out_path.empty()) {
    std::cout << text;
  } else {
    write_file(out_path, text);
  }
}

double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

/// "8" is an 8x8 grid, "20x6" is width 20, height 6.
std::pair<Index, Index> parse_extent(const std::string& s) {
  const auto x = s.find('x');
  try {
    if (x == std::string::npos) {
      const Index n = std::stoll(s);
      return {n, n};
    }
    return {std::stoll(s.substr(0, x)), std::stoll(s.substr(x + 1))};
  } catch (const std::logic_error&) {
    throw std::invalid_argument("bad grid extent '" + s + "'");
  }
}

Tensor load_tensor(const fs::path& path) {
  return path.extension() == ".json" ? Tensor::from_json(read_file(path)) : Tensor::load(path);
}

std::string pgm(const Mat& row, Index height, Index width) {
  std::string out = "P5\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
  for (Index i = 0; i < height * width; ++i) {
    out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(std::clamp(row(0, i), 0.0, 1.0) * 255.0))));
  }
  return out;
}

model::ModelConfig config_or(const std::string& path, const model::ModelConfig& fallback) {
  return path.empty() ? fallback : model::config_from_json(read_file(path));
}

// ---------------------------------------------------------------------------

struct CurveArgs {
  std::string kind;
  Index width = 0;
  Index height = 0;
  bool svg = false;
  std::string out;
};

int cmd_curve(const CurveArgs& a) {
  const auto curve = hilbert::make_curve(hilbert::parse_curve_kind(a.kind), a.width, a.height);
  emit(a.svg ? hilbert::to_svg(curve) : hilbert::to_csv(curve), a.out);
  return kOk;
}

struct LocalityArgs {
  std::vector<std::string> kinds{"zigzag", "hilbert"};
  std::vector<std::string> sizes{"2", "4", "8", "16", "32"};
  std::size_t exact_limit = 4096;
  std::size_t samples = 1'000'000;
  std::string out;
};

int cmd_locality(const LocalityArgs& a, std::uint64_t seed) {
  json rows = json::array();
  for (const auto& k : a.kinds) {
    const auto kind = hilbert::parse_curve_kind(k);
    for (const auto& s : a.sizes) {
      const auto [w, h] = parse_extent(s);
      const auto curve = hilbert::make_curve(kind, w, h);
      const auto r = hilbert::dilation_factor(curve, {.exact_limit = a.exact_limit, .samples = a.samples, .seed = seed});
      rows.push_back({{"kind", hilbert::to_string(kind)},
                      {"width", w},
                      {"height", h},
                      {"df", r.df},
                      {"argmax_pair", {r.argmax_i, r.argmax_j}},
                      {"exact", r.exact}});
    }
  }
  emit(rows.dump(2) + "\n", a.out);
  return kOk;
}

struct ScanBenchArgs {
  std::vector<Index> lengths{1, 16, 256, 1024, 4096};
  Index channels = 64;
  Index state = 16;
  double tolerance = 1e-10;
  std::string out;
};

int cmd_scan_bench(const ScanBenchArgs& a, std::uint64_t seed) {
  Rng rng(seed);
  json rows = json::array();
  bool ok = true;
  for (Index len : a.lengths) {
    if (len < 1 || a.channels < 1 || a.state < 1) throw std::invalid_argument("scan-bench: sizes must be positive");
    const s6::S6Params p =
        s6::S6Params::init({.channels = a.channels, .state = a.state, .rank = 0, .conv_width = 4}, rng);
    const s6::S6Weights w = s6::precompute(rng.normal_matrix(len, a.channels), p);
    auto t0 = std::chrono::steady_clock::now();
    const Mat seq = s6::scan_sequential(w);
    const double seq_s = seconds_since(t0);
    t0 = std::chrono::steady_clock::now();
    const Mat par = s6::scan_parallel(w);
    const double par_s = seconds_since(t0);
    const double diff = (seq - par).cwiseAbs().maxCoeff();
    ok = ok && diff <= a.tolerance;
    rows.push_back({{"length", len},
                    {"channels", a.channels},
                    {"state", a.state},
                    {"threads", thread_count()},
                    {"sequential_ms", seq_s * 1e3},
                    {"parallel_ms", par_s * 1e3},
                    {"max_abs_diff", diff}});
  }
  emit(rows.dump(2) + "\n", a.out);
  if (!ok) throw NumericCheckFailed("scan-bench: parallel and sequential scans differ beyond tolerance");
  return kOk;
}

struct GradcheckArgs {
  bool skip_model = false;
  std::string out;
};

int cmd_gradcheck(const GradcheckArgs& a, std::uint64_t seed) {
  auto checks = verify::op_gradchecks(seed);
  if (!a.skip_model) checks.push_back(verify::model_gradcheck(seed));
  json ops = json::array();
  bool ok = true;
  for (const auto& c : checks) {
    ok = ok && c.passed();
    ops.push_back({{"op", c.op},
                   {"rel_error", c.rel_error},
                   {"tolerance", c.tolerance},
                   {"worst_param", c.worst},
                   {"param_groups", c.groups},
                   {"passed", c.passed()}});
  }
  const json report = {{"seed", seed}, {"passed", ok}, {"ops", ops}};
  emit(report.dump(2) + "\n", a.out);
  if (!ok) throw NumericCheckFailed("gradcheck: at least one op exceeds its tolerance");
  return kOk;
}

struct DemoArgs {
  std::string config;
  std::string out_dir = "demo";
};

int cmd_demo_forward(const DemoArgs& a, std::uint64_t seed) {
  const model::ModelConfig cfg = config_or(a.config, model::ModelConfig{});
  cfg.validate();
  const auto start = std::chrono::steady_clock::now();
  const model::ModelParams params = model::ModelParams::init(cfg, seed);
  const auto clip = model::moving_ellipse({.frames = cfg.frames, .height = cfg.height, .width = cfg.width, .seed = seed});
  const auto pred = model::forward(clip.frames, params, cfg);
  const double elapsed = seconds_since(start);

  const Mat fg = kernels::softmax(pred.class_logits.value()).col(0);
  const auto sel = decoder::select_output(pred.masks.value(), pred.class_logits.value(), pred.frames);
  const Mat probs = kernels::sigmoid(pred.masks.value().row(sel.query));
  const Index cells = pred.grid.cells();
  json frames = json::array();
  for (Index t = 0; t < pred.frames; ++t) {
    char name[32];
    std::snprintf(name, sizeof name, "mask_t%02lld.pgm", static_cast<long long>(t));
    write_file(fs::path(a.out_dir) / name, pgm(probs.middleCols(t * cells, cells), pred.grid.height, pred.grid.width));
    frames.push_back(name);
  }
  const json report = {{"seed", seed},
                       {"config", json::parse(model::config_to_json(cfg))},
                       {"mask_logits_shape", {pred.masks.rows(), pred.frames, pred.grid.height, pred.grid.width}},
                       {"confidences", std::vector<double>(fg.data(), fg.data() + fg.size())},
                       {"selected_query", sel.query},
                       {"selected_confidence", sel.confidence},
                       {"frames", frames},
                       {"seconds", elapsed}};
  std::cout << report.dump(2) << "\n";
  return kOk;
}

struct OverfitArgs {
  std::string config;
  Index steps = 300;
  double lr = 1e-2;
  std::string out = "trace.csv";
  bool quiet = false;
};

int cmd_overfit(const OverfitArgs& a, std::uint64_t seed) {
  const model::ModelConfig cfg = config_or(a.config, model::ModelConfig::small());
  cfg.validate();
  model::ModelParams params = model::ModelParams::init(cfg, seed);
  const auto clip = model::moving_ellipse({.frames = cfg.frames, .height = cfg.height, .width = cfg.width, .seed = seed});
  const auto trace = model::overfit(clip, params, cfg, {.steps = a.steps, .lr = a.lr}, [&](const model::TraceRow& r) {
    if (!a.quiet && r.step % 25 == 0) {
      std::cerr << "step " << r.step << " loss " << r.total << " dice " << r.train_dice << "\n";
    }
  });
  write_file(a.out, model::trace_to_csv(trace));
  const json summary = {{"seed", seed},
                        {"steps", a.steps},
                        {"lr", a.lr},
                        {"initial_loss", trace.front().total},
                        {"final_loss", trace.back().total},
                        {"loss_ratio", trace.back().total / trace.front().total},
                        {"train_dice", trace.back().train_dice},
                        {"trace", a.out}};
  std::cout << summary.dump(2) << "\n";
  return kOk;
}

struct MetricArgs {
  std::string pred;
  std::string truth;
};

int cmd_eval_metrics(const MetricArgs& a) {
  const Tensor p = load_tensor(a.pred);
  const Tensor t = load_tensor(a.truth);
  if (p.shape() != t.shape()) throw std::invalid_argument("eval-metrics: shapes differ");
  const Index n = static_cast<Index>(p.size());
  const auto m = decoder::metrics(p.to_matrix(1, n), t.to_matrix(1, n));
  std::cout << json{{"dice", m.dice}, {"iou", m.iou}, {"mae", m.mae}}.dump(2) << "\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Curve, scan, attention and segmentation toolkit"};
  app.require_subcommand(1);
  app.fallthrough();
  std::uint64_t seed = 0;
  std::size_t threads = 0;
  app.add_option("--seed", seed, "Seed for every random draw");
  app.add_option("--threads", threads, "Worker threads (default: CLIPSEG_THREADS or all cores)");

  CurveArgs curve;
  auto* c_curve = app.add_subcommand("curve", "Emit a flattening curve as CSV (pos,row,col) or SVG");
  c_curve->add_option("kind", curve.kind, "hilbert | zigzag")->required();
  c_curve->add_option("width", curve.width)->required()->check(CLI::PositiveNumber);
  c_curve->add_option("height", curve.height)->required()->check(CLI::PositiveNumber);
  c_curve->add_flag("--svg", curve.svg, "Polyline SVG instead of CSV");
  c_curve->add_option("--out", curve.out, "Output file (default stdout)");

  LocalityArgs loc;
  auto* c_loc = app.add_subcommand("locality", "Dilation factor per grid size as JSON");
  c_loc->add_option("--kind", loc.kinds, "Curve kinds")->delimiter(',');
  c_loc->add_option("--sizes", loc.sizes, "Grids as N or WxH")->delimiter(',');
  c_loc->add_option("--exact-limit", loc.exact_limit, "Largest point count searched exhaustively");
  c_loc->add_option("--samples", loc.samples, "Random pairs beyond the exact limit");
  c_loc->add_option("--out", loc.out);

  ScanBenchArgs bench;
  auto* c_bench = app.add_subcommand("scan-bench", "Time sequential vs parallel scans and compare outputs");
  c_bench->add_option("--lengths", bench.lengths)->delimiter(',');
  c_bench->add_option("--channels", bench.channels);
  c_bench->add_option("--state", bench.state);
  c_bench->add_option("--tolerance", bench.tolerance);
  c_bench->add_option("--out", bench.out);

  GradcheckArgs grad;
  auto* c_grad = app.add_subcommand("gradcheck", "Finite-difference check of every parameterized op");
  c_grad->add_flag("--skip-model", grad.skip_model, "Leave out the full micro model");
  c_grad->add_option("--out", grad.out);

  DemoArgs demo;
  auto* c_demo = app.add_subcommand("demo-forward", "Forward pass on a synthetic clip; PGM masks and JSON report");
  c_demo->add_option("--config", demo.config, "Model config JSON (default: full-size configuration)");
  c_demo->add_option("--out-dir", demo.out_dir);

  OverfitArgs fit;
  auto* c_fit = app.add_subcommand("overfit", "Gradient descent on one synthetic clip; writes the loss trace");
  c_fit->add_option("--config", fit.config, "Model config JSON (default: small toy configuration)");
  c_fit->add_option("--steps", fit.steps)->check(CLI::NonNegativeNumber);
  c_fit->add_option("--lr", fit.lr);
  c_fit->add_option("--out", fit.out, "Trace CSV path");
  c_fit->add_flag("--quiet", fit.quiet);

  MetricArgs met;
  auto* c_met = app.add_subcommand("eval-metrics", "Dice, IoU and MAE between two binary mask tensors");
  c_met->add_option("pred", met.pred, "Tensor file (.json or binary)")->required();
  c_met->add_option("truth", met.truth)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kValidation;
  }

  try {
    if (threads > 0) set_thread_count(threads);
    if (c_curve->parsed()) return cmd_curve(curve);
    if (c_loc->parsed()) return cmd_locality(loc, seed);
    if (c_bench->parsed()) return cmd_scan_bench(bench, seed);
    if (c_grad->parsed()) return cmd_gradcheck(grad, seed);
    if (c_demo->parsed()) return cmd_demo_forward(demo, seed);
    if (c_fit->parsed()) return cmd_overfit(fit, seed);
    if (c_met->parsed()) return cmd_eval_metrics(met);
  } catch (const NumericCheckFailed& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kNumerical;
  } catch (const NumericalError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kNumerical;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kValidation;
  }
  return kValidation;
}
