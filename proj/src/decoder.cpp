#include "clipseg/decoder.hpp"

#include "clipseg/numkit/kernels.hpp"

#include <limits>

namespace clipseg::decoder {

void DecoderConfig::validate() const {
  if (channels < 1 || queries < 1 || layers < 0) throw std::invalid_argument("decoder: invalid dimensions");
  if (heads < 1 || channels % heads != 0) throw std::invalid_argument("decoder: channels must be divisible by heads");
  if (channels % 4 != 0) throw std::invalid_argument("decoder: channels must be divisible by 4");
}

DecoderLayerParams DecoderLayerParams::init(const DecoderConfig& config, Rng& rng) {
  const Index c = config.channels;
  DecoderLayerParams p;
  p.cross = AttentionParams::init(c, config.heads, rng);
  p.cross_norm = NormParams::init(c);
  p.self = AttentionParams::init(c, config.heads, rng);
  p.self_norm = NormParams::init(c);
  p.ffn_in = LinearParams::init(c, config.hidden(), rng);
  p.ffn_out = LinearParams::init(config.hidden(), c, rng);
  p.ffn_norm = NormParams::init(c);
  return p;
}

void DecoderLayerParams::collect(const std::string& prefix, NamedParams& out) const {
  cross.collect(prefix + ".cross", out);
  cross_norm.collect(prefix + ".cross_norm", out);
  self.collect(prefix + ".self", out);
  self_norm.collect(prefix + ".self_norm", out);
  ffn_in.collect(prefix + ".ffn_in", out);
  ffn_out.collect(prefix + ".ffn_out", out);
  ffn_norm.collect(prefix + ".ffn_norm", out);
}

DecoderParams DecoderParams::init(const DecoderConfig& config, Index scales, Rng& rng) {
  config.validate();
  if (scales < 2) throw std::invalid_argument("decoder: needs at least two scales");
  const Index c = config.channels;
  DecoderParams p;
  p.queries = Var::parameter(rng.truncated_normal_matrix(config.queries, c, 1.0));
  p.query_pos = Var::parameter(rng.truncated_normal_matrix(config.queries, c, 1.0));
  p.level = Var::parameter(rng.truncated_normal_matrix(scales - 1, c, 1.0));
  for (Index l = 0; l < config.layers; ++l) p.layers.push_back(DecoderLayerParams::init(config, rng));
  p.final_norm = NormParams::init(c);
  p.class_head = LinearParams::init(c, 2, rng);
  p.mask_in = LinearParams::init(c, c, rng);
  p.mask_out = LinearParams::init(c, c, rng);
  return p;
}

void DecoderParams::collect(const std::string& prefix, NamedParams& out) const {
  out.add(prefix + ".queries", queries);
  out.add(prefix + ".query_pos", query_pos);
  out.add(prefix + ".level", level);
  for (std::size_t l = 0; l < layers.size(); ++l) layers[l].collect(prefix + ".layer" + std::to_string(l), out);
  final_norm.collect(prefix + ".final_norm", out);
  class_head.collect(prefix + ".class_head", out);
  mask_in.collect(prefix + ".mask_in", out);
  mask_out.collect(prefix + ".mask_out", out);
}

Index layer_scale(Index layer, Index scales) {
  if (scales < 2) throw std::invalid_argument("decoder: needs at least two scales");
  return scales - 1 - layer % (scales - 1);
}

Var frame_memory(const ClipFeatures& clip, Index scale) {
  if (scale < 0 || scale >= clip.scales()) throw std::out_of_range("decoder: scale index out of range");
  const auto& maps = clip.maps[static_cast<std::size_t>(scale)];
  return maps.size() == 1 ? maps[0] : concat_rows(maps);
}

Var memory_embedding(const GridShape& grid, Index frames, const Var& level_row) {
  const Mat pos = sine_position_encoding(grid.height, grid.width, level_row.cols());
  Mat tiled(pos.rows() * frames, pos.cols());
  for (Index t = 0; t < frames; ++t) tiled.middleRows(t * pos.rows(), pos.rows()) = pos;
  return add_row(Var::constant(std::move(tiled)), level_row);
}

Var decoder_layer(const Var& queries, const Var& query_pos, const Var& memory, const Var& memory_embed,
                  const DecoderLayerParams& params, LogitScale mode) {
  if (memory.rows() != memory_embed.rows() || memory.cols() != queries.cols()) {
    throw std::invalid_argument("decoder layer: memory shape mismatch");
  }
  Var q = queries;
  q = add(q, attention(add(layer_norm(q, params.cross_norm), query_pos), add(memory, memory_embed), memory,
                       params.cross, mode));
  const Var n = layer_norm(q, params.self_norm);
  const Var with_pos = add(n, query_pos);
  q = add(q, attention(with_pos, with_pos, n, params.self, mode));
  return add(q, linear(silu(linear(layer_norm(q, params.ffn_norm), params.ffn_in)), params.ffn_out));
}

Var query_embedding(const Var& queries, const LinearParams& mask_in, const LinearParams& mask_out) {
  return linear(silu(linear(queries, mask_in)), mask_out);
}

Var mask_logits(const Var& embedding, const Var& pixels) {
  if (embedding.cols() != pixels.cols()) throw std::invalid_argument("mask head: channel mismatch");
  return matmul(embedding, transpose(pixels));
}

Prediction decode(const ClipFeatures& clip, const DecoderParams& params, const DecoderConfig& config) {
  clip.validate();
  if (clip.scales() < 2) throw std::invalid_argument("decoder: needs at least two scales");
  if (params.level.rows() != clip.scales() - 1) throw std::invalid_argument("decoder: level rows do not match scales");
  Var q = params.queries;
  for (Index l = 0; l < static_cast<Index>(params.layers.size()); ++l) {
    const Index s = layer_scale(l, clip.scales());
    const Var memory = frame_memory(clip, s);
    const Var embed = memory_embedding(clip.shapes[static_cast<std::size_t>(s)], clip.frames(), slice_rows(params.level, s - 1, 1));
    q = decoder_layer(q, params.query_pos, memory, embed, params.layers[static_cast<std::size_t>(l)], config.scale);
  }
  const Var normed = layer_norm(q, params.final_norm);
  Prediction pred;
  pred.class_logits = linear(normed, params.class_head);
  pred.masks = mask_logits(query_embedding(normed, params.mask_in, params.mask_out), frame_memory(clip, 0));
  pred.frames = clip.frames();
  pred.grid = clip.shapes[0];
  return pred;
}

// ---------------------------------------------------------------------------
// Matching

std::vector<Index> hungarian_match(const Mat& cost) {
  const Index m = cost.rows();  // queries
  const Index n = cost.cols();  // targets
  if (n > m) {
    throw std::invalid_argument("hungarian_match: " + std::to_string(n) + " targets exceed " + std::to_string(m) +
                                " queries");
  }
  if (!cost.allFinite()) throw NumericalError("hungarian_match: non-finite cost");
  if (n == 0) return {};
  // Kuhn-Munkres with potentials; rows are targets (1-based), columns queries.
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(static_cast<std::size_t>(n + 1), 0.0), v(static_cast<std::size_t>(m + 1), 0.0);
  std::vector<Index> owner(static_cast<std::size_t>(m + 1), 0), way(static_cast<std::size_t>(m + 1), 0);
  for (Index i = 1; i <= n; ++i) {
    owner[0] = i;
    Index j0 = 0;
    std::vector<double> minv(static_cast<std::size_t>(m + 1), inf);
    std::vector<char> used(static_cast<std::size_t>(m + 1), 0);
    do {
      used[static_cast<std::size_t>(j0)] = 1;
      const Index i0 = owner[static_cast<std::size_t>(j0)];
      double delta = inf;
      Index j1 = 0;
      for (Index j = 1; j <= m; ++j) {
        const auto ju = static_cast<std::size_t>(j);
        if (used[ju]) continue;
        const double cur = cost(j - 1, i0 - 1) - u[static_cast<std::size_t>(i0)] - v[ju];
        if (cur < minv[ju]) {
          minv[ju] = cur;
          way[ju] = j0;
        }
        if (minv[ju] < delta) {
          delta = minv[ju];
          j1 = j;
        }
      }
      for (Index j = 0; j <= m; ++j) {
        const auto ju = static_cast<std::size_t>(j);
        if (used[ju]) {
          u[static_cast<std::size_t>(owner[ju])] += delta;
          v[ju] -= delta;
        } else {
          minv[ju] -= delta;
        }
      }
      j0 = j1;
    } while (owner[static_cast<std::size_t>(j0)] != 0);
    do {
      const Index j1 = way[static_cast<std::size_t>(j0)];
      owner[static_cast<std::size_t>(j0)] = owner[static_cast<std::size_t>(j1)];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<Index> result(static_cast<std::size_t>(n), -1);
  for (Index j = 1; j <= m; ++j) {
    if (owner[static_cast<std::size_t>(j)] != 0) result[static_cast<std::size_t>(owner[static_cast<std::size_t>(j)] - 1)] = j - 1;
  }
  return result;
}

double assignment_cost(const Mat& cost, const std::vector<Index>& assignment) {
  double total = 0.0;
  for (std::size_t g = 0; g < assignment.size(); ++g) total += cost(assignment[g], static_cast<Index>(g));
  return total;
}

namespace {

void require_binary(const Mat& m, const char* what) {
  if (!((m.array() == 0.0) || (m.array() == 1.0)).all()) throw std::invalid_argument(std::string(what) + ": mask is not binary");
}

Mat clipped(const Mat& logits) { return logits.cwiseMax(-kLogitClip).cwiseMin(kLogitClip); }

}  // namespace

Mat matching_cost(const Mat& masks, const Mat& class_logits, const Mat& targets, const LossWeights& weights) {
  require_binary(targets, "matching_cost");
  if (targets.cols() != masks.cols() || class_logits.rows() != masks.rows() || class_logits.cols() != 2) {
    throw std::invalid_argument("matching_cost: shape mismatch");
  }
  const Mat x = clipped(masks);
  const Mat prob = kernels::sigmoid(x);
  const Mat log_p = kernels::log_softmax(class_logits);
  const double pixels = static_cast<double>(masks.cols());
  const Mat inter = kernels::matmul(prob, targets.transpose());
  const Mat xg = kernels::matmul(x, targets.transpose());
  const Eigen::VectorXd prob_sum = prob.rowwise().sum();
  const Eigen::VectorXd sp_sum = kernels::softplus(x).rowwise().sum();
  const Eigen::RowVectorXd target_sum = targets.rowwise().sum().transpose();
  Mat cost(masks.rows(), targets.rows());
  for (Index q = 0; q < cost.rows(); ++q) {
    for (Index g = 0; g < cost.cols(); ++g) {
      const double dice = 1.0 - (2.0 * inter(q, g) + 1.0) / (prob_sum(q) + target_sum(g) + 1.0);
      const double bce = (sp_sum(q) - xg(q, g)) / pixels;
      cost(q, g) = weights.cls * -log_p(q, 0) + weights.dice * dice + weights.bce * bce;
    }
  }
  return cost;
}

MatchedLoss matched_loss(const Prediction& pred, const Mat& targets, const LossWeights& weights) {
  const Index n = pred.masks.rows();
  if (targets.rows() > 0 && targets.cols() != pred.masks.cols()) throw std::invalid_argument("loss: target shape mismatch");
  require_binary(targets, "loss");
  MatchedLoss out;
  out.assignment = hungarian_match(matching_cost(pred.masks.value(), pred.class_logits.value(),
                                                 targets.rows() > 0 ? targets : Mat(0, pred.masks.cols()), weights));

  Mat onehot = Mat::Zero(n, 2);
  onehot.col(1).setOnes();
  for (Index q : out.assignment) {
    onehot(q, 0) = 1.0;
    onehot(q, 1) = 0.0;
  }
  const Var cls = scale(sum(mul(log_softmax_rows(pred.class_logits), Var::constant(onehot))), -1.0 / static_cast<double>(n));
  Var total = scale(cls, weights.cls);
  out.cls = cls.item();

  const auto matched = static_cast<Index>(out.assignment.size());
  if (matched > 0) {
    std::vector<Var> dice_terms, bce_terms;
    for (Index g = 0; g < matched; ++g) {
      const Var x = clamp(slice_rows(pred.masks, out.assignment[static_cast<std::size_t>(g)], 1), -kLogitClip, kLogitClip);
      const Var tgt = Var::constant(targets.row(g));
      const Var p = sigmoid(x);
      const Var num = add_scalar(scale(sum(mul(p, tgt)), 2.0), 1.0);
      const Var den = add_scalar(sum(p), targets.row(g).sum() + 1.0);
      dice_terms.push_back(sub(Var::constant(Mat::Ones(1, 1)), div(num, den)));
      bce_terms.push_back(mean(sub(softplus(x), mul(x, tgt))));
    }
    const Var dice = mean(matched == 1 ? dice_terms[0] : concat_rows(dice_terms));
    const Var bce = mean(matched == 1 ? bce_terms[0] : concat_rows(bce_terms));
    out.dice = dice.item();
    out.bce = bce.item();
    total = add(total, add(scale(dice, weights.dice), scale(bce, weights.bce)));
  }
  out.total = total;
  return out;
}

Selection select_output(const Mat& masks, const Mat& class_logits, Index frames) {
  if (masks.rows() == 0 || class_logits.rows() != masks.rows() || class_logits.cols() != 2) {
    throw std::invalid_argument("select_output: shape mismatch");
  }
  if (frames < 1 || masks.cols() % frames != 0) throw std::invalid_argument("select_output: frames do not divide pixels");
  const Mat prob = kernels::softmax(class_logits);
  Selection s;
  for (Index q = 1; q < prob.rows(); ++q) {
    if (prob(q, 0) > prob(s.query, 0)) s.query = q;
  }
  s.confidence = prob(s.query, 0);
  const Index pixels = masks.cols() / frames;
  s.mask = Mat(frames, pixels);
  for (Index t = 0; t < frames; ++t) {
    for (Index i = 0; i < pixels; ++i) s.mask(t, i) = kernels::sigmoid(masks(s.query, t * pixels + i)) > 0.5 ? 1.0 : 0.0;
  }
  return s;
}

MaskMetrics metrics(const Mat& pred, const Mat& truth) {
  if (pred.rows() != truth.rows() || pred.cols() != truth.cols()) throw std::invalid_argument("metrics: shape mismatch");
  require_binary(pred, "metrics");
  require_binary(truth, "metrics");
  const double inter = pred.cwiseProduct(truth).sum();
  const double p = pred.sum();
  const double g = truth.sum();
  const double uni = p + g - inter;
  MaskMetrics m;
  m.dice = p + g == 0.0 ? 1.0 : 2.0 * inter / (p + g);
  m.iou = uni == 0.0 ? 1.0 : inter / uni;
  m.mae = pred.size() == 0 ? 0.0 : (pred - truth).cwiseAbs().mean();
  return m;
}

}  // namespace clipseg::decoder
