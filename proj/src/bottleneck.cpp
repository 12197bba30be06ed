#include "clipseg/bottleneck.hpp"

namespace clipseg::bottleneck {

void BottleneckConfig::validate() const {
  if (channels < 1 || queries < 1) throw std::invalid_argument("bottleneck: channels and queries must be positive");
  if (heads < 1 || channels % heads != 0) throw std::invalid_argument("bottleneck: channels must be divisible by heads");
  if (channels % 4 != 0) throw std::invalid_argument("bottleneck: channels must be divisible by 4");
  if (state < 1) throw std::invalid_argument("bottleneck: state size must be positive");
  if (cnp.channels != channels) throw std::invalid_argument("bottleneck: cnp channel count differs from the model");
  cnp.validate();
}

EncoderLayerParams EncoderLayerParams::init(const BottleneckConfig& config, Index scales, Rng& rng) {
  config.validate();
  if (scales < 2) throw std::invalid_argument("encoder layer: needs at least two scales");
  const Index c = config.channels;
  EncoderLayerParams p;
  p.cnp = cnp::CnpParams::init(config.cnp, rng);
  p.level = Var::parameter(rng.truncated_normal_matrix(scales - 1, c, 1.0));
  p.condense = AttentionParams::init(c, config.heads, rng);
  p.condense_norm = NormParams::init(c);
  p.scan = s6::S6Params::init({.channels = c, .state = config.state, .rank = config.rank, .conv_width = 4}, rng);
  p.scan_norm = NormParams::init(c);
  p.distribute = AttentionParams::init(c, config.heads, rng);
  p.distribute_norm = NormParams::init(c);
  return p;
}

void EncoderLayerParams::collect(const std::string& prefix, NamedParams& out) const {
  cnp.collect(prefix + ".cnp", out);
  out.add(prefix + ".level", level);
  condense.collect(prefix + ".condense", out);
  condense_norm.collect(prefix + ".condense_norm", out);
  const auto vars = scan.parameters();
  const auto names = scan.parameter_names();
  for (std::size_t i = 0; i < vars.size(); ++i) out.add(prefix + "." + names[i], vars[i]);
  scan_norm.collect(prefix + ".scan_norm", out);
  distribute.collect(prefix + ".distribute", out);
  distribute_norm.collect(prefix + ".distribute_norm", out);
}

BottleneckParams BottleneckParams::init(const BottleneckConfig& config, Index scales, Index layers, Rng& rng) {
  BottleneckParams p;
  p.queries = Var::parameter(rng.truncated_normal_matrix(config.queries, config.channels, 1.0));
  for (Index l = 0; l < layers; ++l) p.layers.push_back(EncoderLayerParams::init(config, scales, rng));
  return p;
}

void BottleneckParams::collect(const std::string& prefix, NamedParams& out) const {
  out.add(prefix + ".queries", queries);
  for (std::size_t l = 0; l < layers.size(); ++l) layers[l].collect(prefix + ".layer" + std::to_string(l), out);
}

Var flatten_scales(const ClipFeatures& clip, Index frame) {
  if (clip.scales() < 2) throw std::invalid_argument("bottleneck: needs at least two scales");
  if (frame < 0 || frame >= clip.frames()) throw std::out_of_range("bottleneck: frame index out of range");
  std::vector<Var> parts;
  for (Index s = 1; s < clip.scales(); ++s) parts.push_back(clip.maps[static_cast<std::size_t>(s)][static_cast<std::size_t>(frame)]);
  return parts.size() == 1 ? parts[0] : concat_rows(parts);
}

Index attended_tokens(const ClipFeatures& clip) {
  Index n = 0;
  for (Index s = 1; s < clip.scales(); ++s) n += clip.shapes[static_cast<std::size_t>(s)].cells();
  return n;
}

Var key_embedding(const std::vector<GridShape>& shapes, const Var& level) {
  if (static_cast<Index>(shapes.size()) != level.rows() + 1) {
    throw std::invalid_argument("key embedding: one level row per attended scale expected");
  }
  const Index c = level.cols();
  Index total = 0;
  for (std::size_t s = 1; s < shapes.size(); ++s) total += shapes[s].cells();
  Mat pos(total, c);
  std::vector<Index> scale_of(static_cast<std::size_t>(total));
  Index row = 0;
  for (std::size_t s = 1; s < shapes.size(); ++s) {
    const Index n = shapes[s].cells();
    pos.middleRows(row, n) = sine_position_encoding(shapes[s].height, shapes[s].width, c);
    std::fill_n(scale_of.begin() + row, n, static_cast<Index>(s) - 1);
    row += n;
  }
  return add(Var::constant(std::move(pos)), gather_rows(level, scale_of));
}

Var condense(const Var& queries, const Var& tokens, const Var& key_embed, const AttentionParams& attn,
             const NormParams& norm, LogitScale mode) {
  if (tokens.rows() == 0) throw std::invalid_argument("condense: empty key set");
  return add(queries, attention(layer_norm(queries, norm), add(tokens, key_embed), tokens, attn, mode));
}

Var distribute(const Var& tokens, const Var& key_embed, const Var& frame_queries, const AttentionParams& attn,
               const NormParams& norm, LogitScale mode) {
  if (tokens.rows() == 0) throw std::invalid_argument("distribute: empty query set");
  return add(tokens, attention(add(layer_norm(tokens, norm), key_embed), frame_queries, frame_queries, attn, mode));
}

std::vector<Index> scan_order(hilbert::CurveKind kind, Index queries, Index frames, GridOrientation orientation) {
  const bool query_rows = orientation == GridOrientation::QueriesAsRows;
  const hilbert::Curve curve =
      query_rows ? hilbert::make_curve(kind, frames, queries) : hilbert::make_curve(kind, queries, frames);
  std::vector<Index> order;
  order.reserve(curve.size());
  for (const auto& p : curve.points) {
    const Index n = query_rows ? p.row : p.col;
    const Index t = query_rows ? p.col : p.row;
    order.push_back(t * queries + n);
  }
  return order;
}

Var hilbert_ss(const Var& frame_queries, Index queries, Index frames, const s6::S6Params& params,
               const NormParams& norm, const BottleneckConfig& config) {
  if (frame_queries.rows() != queries * frames) throw std::invalid_argument("hilbert_ss: query grid size mismatch");
  const auto order = scan_order(config.scan, queries, frames, config.orientation);
  std::vector<Index> inverse(order.size());
  for (std::size_t p = 0; p < order.size(); ++p) inverse[static_cast<std::size_t>(order[p])] = static_cast<Index>(p);
  const Var scanned = s6::forward(gather_rows(layer_norm(frame_queries, norm), order), params, config.strategy);
  return add(frame_queries, gather_rows(scanned, inverse));
}

EncoderOutput encoder_layer(const ClipFeatures& clip, const Var& queries, const EncoderLayerParams& params,
                            const BottleneckConfig& config) {
  clip.validate();
  if (clip.scales() < 2) throw std::invalid_argument("encoder layer: needs at least two scales");
  if (clip.channels() != config.channels || queries.cols() != config.channels) {
    throw std::invalid_argument("encoder layer: channel count mismatch");
  }
  const Index frames = clip.frames();
  const Index n = queries.rows();
  ClipFeatures cur = config.use_cnp ? cnp::cnp_layer(clip, config.cnp, params.cnp) : clip;

  const Var key = key_embedding(cur.shapes, params.level);
  std::vector<Var> tokens, condensed;
  for (Index t = 0; t < frames; ++t) {
    tokens.push_back(flatten_scales(cur, t));
    condensed.push_back(condense(queries, tokens.back(), key, params.condense, params.condense_norm, config.scale));
  }
  Var stacked = frames == 1 ? condensed[0] : concat_rows(condensed);
  if (config.use_hilbert_ss) stacked = hilbert_ss(stacked, n, frames, params.scan, params.scan_norm, config);

  for (Index t = 0; t < frames; ++t) {
    const Var frame_q = frames == 1 ? stacked : slice_rows(stacked, t * n, n);
    const Var updated = distribute(tokens[static_cast<std::size_t>(t)], key, frame_q, params.distribute,
                                   params.distribute_norm, config.scale);
    Index row = 0;
    for (Index s = 1; s < cur.scales(); ++s) {
      const Index cells = cur.shapes[static_cast<std::size_t>(s)].cells();
      cur.maps[static_cast<std::size_t>(s)][static_cast<std::size_t>(t)] =
          cur.scales() == 2 ? updated : slice_rows(updated, row, cells);
      row += cells;
    }
  }
  return {std::move(cur), stacked};
}

}  // namespace clipseg::bottleneck
