#include "clipseg/cnp.hpp"

#include "clipseg/numkit/parallel.hpp"

#include <algorithm>

namespace clipseg::cnp {

using NodeList = std::vector<std::shared_ptr<detail::Node>>;

void CnpConfig::validate() const {
  if (kernel < 1 || kernel % 2 == 0) throw std::invalid_argument("cnp: kernel size must be odd and >= 1");
  if (dilation < 1) throw std::invalid_argument("cnp: dilation must be >= 1");
  if (heads < 1 || channels % heads != 0) throw std::invalid_argument("cnp: channels must be divisible by heads");
}

CnpParams CnpParams::init(const CnpConfig& config, Rng& rng) {
  config.validate();
  return CnpParams{AttentionParams::init(config.channels, config.heads, rng), NormParams::init(config.channels)};
}

void CnpParams::collect(const std::string& prefix, NamedParams& out) const {
  attn.collect(prefix + ".attn", out);
  norm.collect(prefix + ".norm", out);
}

Index cyclic_prev(Index t, Index frames) {
  if (frames < 1 || t < 1 || t > frames) {
    throw std::out_of_range("cyclic_prev: frame " + std::to_string(t) + " outside 1.." + std::to_string(frames));
  }
  return t > 1 ? t - 1 : frames;
}

Index window_taps(Index length, Index kernel, Index dilation) { return std::min(kernel, (length - 1) / dilation + 1); }

Index window_start(Index pos, Index length, Index kernel, Index dilation) {
  const Index taps = window_taps(length, kernel, dilation);
  const Index span = (taps - 1) * dilation;
  return std::clamp(pos - ((taps - 1) / 2) * dilation, Index{0}, length - 1 - span);
}

std::vector<Index> neighbor_set(Index i, Index kernel, Index dilation, Index height, Index width) {
  if (height < 1 || width < 1) throw std::invalid_argument("neighbor_set: empty grid");
  if (kernel < 1 || kernel % 2 == 0 || dilation < 1) throw std::invalid_argument("neighbor_set: invalid kernel");
  if (i < 0 || i >= height * width) throw std::out_of_range("neighbor_set: cell outside grid");
  const Index row = i / width;
  const Index col = i % width;
  const Index rows = window_taps(height, kernel, dilation);
  const Index cols = window_taps(width, kernel, dilation);
  const Index r0 = window_start(row, height, kernel, dilation);
  const Index c0 = window_start(col, width, kernel, dilation);
  std::vector<Index> out;
  out.reserve(static_cast<std::size_t>(rows * cols));
  for (Index a = 0; a < rows; ++a) {
    for (Index b = 0; b < cols; ++b) out.push_back((r0 + a * dilation) * width + (c0 + b * dilation));
  }
  return out;
}

MatrixR<Index> neighbor_table(Index height, Index width, Index kernel, Index dilation) {
  const Index taps = window_taps(height, kernel, dilation) * window_taps(width, kernel, dilation);
  MatrixR<Index> table(height * width, taps);
  for (Index i = 0; i < height * width; ++i) {
    const auto nb = neighbor_set(i, kernel, dilation, height, width);
    for (Index j = 0; j < taps; ++j) table(i, j) = nb[static_cast<std::size_t>(j)];
  }
  return table;
}

namespace {

// Probabilities (HW x heads*taps) of projected queries over projected keys.
Mat neighborhood_probs(const Mat& q, const Mat& k, const MatrixR<Index>& table, Index heads, double sc) {
  const Index cells = q.rows();
  const Index taps = table.cols();
  const Index dh = q.cols() / heads;
  Mat probs(cells, heads * taps);
  parallel_for(
      0, static_cast<std::size_t>(cells),
      [&](std::size_t ii) {
        const auto i = static_cast<Index>(ii);
        for (Index h = 0; h < heads; ++h) {
          auto row = probs.row(i).segment(h * taps, taps);
          for (Index j = 0; j < taps; ++j) {
            row(j) = sc * q.row(i).segment(h * dh, dh).dot(k.row(table(i, j)).segment(h * dh, dh));
          }
          const double mx = row.maxCoeff();
          row = (row.array() - mx).exp().matrix();
          row /= row.sum();
        }
      },
      64);
  return probs;
}

// Core op on projected tensors: out_i,h = sum_j p_ij,h V_nb(i,j),h.
Var neighborhood_core(const Var& q, const Var& k, const Var& v, const MatrixR<Index>& table, Index heads, double sc) {
  const Index cells = q.rows();
  const Index taps = table.cols();
  const Index dh = q.cols() / heads;
  Mat probs = neighborhood_probs(q.value(), k.value(), table, heads, sc);
  Mat out = Mat::Zero(cells, q.cols());
  const Mat& vv = v.value();
  for (Index i = 0; i < cells; ++i) {
    for (Index h = 0; h < heads; ++h) {
      for (Index j = 0; j < taps; ++j) {
        out.row(i).segment(h * dh, dh) += probs(i, h * taps + j) * vv.row(table(i, j)).segment(h * dh, dh);
      }
    }
  }
  return make_op(std::move(out), {q, k, v},
                 [probs = std::move(probs), table, heads, sc, taps, dh](const Mat& g, const NodeList& in) {
                   const Mat& qv = in[0]->value;
                   const Mat& kv = in[1]->value;
                   const Mat& vv = in[2]->value;
                   Mat gq = Mat::Zero(qv.rows(), qv.cols());
                   Mat gk = Mat::Zero(kv.rows(), kv.cols());
                   Mat gv = Mat::Zero(vv.rows(), vv.cols());
                   Eigen::VectorXd gp(taps);
                   for (Index i = 0; i < qv.rows(); ++i) {
                     for (Index h = 0; h < heads; ++h) {
                       const auto go = g.row(i).segment(h * dh, dh);
                       const auto p = probs.row(i).segment(h * taps, taps);
                       for (Index j = 0; j < taps; ++j) {
                         const Index src = table(i, j);
                         gp(j) = go.dot(vv.row(src).segment(h * dh, dh));
                         gv.row(src).segment(h * dh, dh) += p(j) * go;
                       }
                       const double centre = p.dot(gp.transpose());
                       for (Index j = 0; j < taps; ++j) {
                         const double gl = p(j) * (gp(j) - centre) * sc;
                         const Index src = table(i, j);
                         gq.row(i).segment(h * dh, dh) += gl * kv.row(src).segment(h * dh, dh);
                         gk.row(src).segment(h * dh, dh) += gl * qv.row(i).segment(h * dh, dh);
                       }
                     }
                   }
                   if (in[0]->requires_grad) in[0]->accumulate(gq);
                   if (in[1]->requires_grad) in[1]->accumulate(gk);
                   if (in[2]->requires_grad) in[2]->accumulate(gv);
                 });
}

void check_inputs(const Var& a, const Var& b, const GridShape& grid, const CnpConfig& config) {
  config.validate();
  if (a.rows() != grid.cells() || b.rows() != grid.cells() || a.cols() != config.channels ||
      b.cols() != config.channels) {
    throw std::invalid_argument("cnp: frame features do not match the grid/channel configuration");
  }
}

}  // namespace

Var neighborhood_attention(const Var& query_in, const Var& source_in, const GridShape& grid, const CnpConfig& config,
                           const AttentionParams& attn) {
  check_inputs(query_in, source_in, grid, config);
  const auto table = neighbor_table(grid.height, grid.width, config.kernel, config.dilation);
  const double sc = logit_scale(config.channels, config.heads, config.scale);
  const Var q = matmul(query_in, attn.w_q);
  const Var k = matmul(source_in, attn.w_k);
  const Var v = matmul(source_in, attn.w_v);
  return matmul(neighborhood_core(q, k, v, table, config.heads, sc), attn.w_o);
}

Mat neighborhood_weights(const Mat& query_in, const Mat& source_in, const GridShape& grid, const CnpConfig& config,
                         const AttentionParams& attn) {
  check_inputs(Var::constant(query_in), Var::constant(source_in), grid, config);
  const auto table = neighbor_table(grid.height, grid.width, config.kernel, config.dilation);
  return neighborhood_probs(kernels::matmul(query_in, attn.w_q.value()), kernels::matmul(source_in, attn.w_k.value()),
                            table, config.heads, logit_scale(config.channels, config.heads, config.scale));
}

Var cnp_attend(const Var& v_t, const Var& v_prev, const GridShape& grid, const CnpConfig& config, const CnpParams& params) {
  return add(v_t, neighborhood_attention(v_t, v_prev, grid, config, params.attn));
}

ClipFeatures cnp_layer(const ClipFeatures& clip, const CnpConfig& config, const CnpParams& params) {
  clip.validate();
  if (clip.scales() < 2) throw std::invalid_argument("cnp_layer: needs at least two scales (s = 2..S)");
  ClipFeatures out = clip;
  const Index frames = clip.frames();
  for (Index s = 1; s < clip.scales(); ++s) {
    const auto& maps = clip.maps[static_cast<std::size_t>(s)];
    std::vector<Var> normed;
    normed.reserve(maps.size());
    for (const auto& m : maps) normed.push_back(layer_norm(m, params.norm));
    for (Index t = 1; t <= frames; ++t) {
      const auto cur = static_cast<std::size_t>(t - 1);
      const auto prev = static_cast<std::size_t>(cyclic_prev(t, frames) - 1);
      out.maps[static_cast<std::size_t>(s)][cur] =
          add(maps[cur], neighborhood_attention(normed[cur], normed[prev], clip.shapes[static_cast<std::size_t>(s)],
                                                config, params.attn));
    }
  }
  return out;
}

}  // namespace clipseg::cnp
