#include "clipseg/hilbert.hpp"

#include "clipseg/numkit/rng.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace clipseg::hilbert {
namespace {

Index sign(Index v) { return (v > 0) - (v < 0); }

// Floor division, matching the recursion's reference formulation.
Index floor_half(Index v) { return v >= 0 ? v / 2 : -((-v + 1) / 2); }

void check_extents(Index width, Index height) {
  if (width < 1 || height < 1) {
    throw std::invalid_argument("curve extents must be >= 1 (got " + std::to_string(width) + "x" +
                                std::to_string(height) + ")");
  }
}

// Fills the rectangle spanned from (x, y) by major vector (ax, ay) and minor
// vector (bx, by). Points are emitted as (x = col, y = row).
void generate(Index x, Index y, Index ax, Index ay, Index bx, Index by, std::vector<GridPoint>& out) {
  const Index w = std::abs(ax + ay);
  const Index h = std::abs(bx + by);
  const Index dax = sign(ax), day = sign(ay);
  const Index dbx = sign(bx), dby = sign(by);

  if (h == 1) {
    for (Index i = 0; i < w; ++i, x += dax, y += day) out.push_back({y, x});
    return;
  }
  if (w == 1) {
    for (Index i = 0; i < h; ++i, x += dbx, y += dby) out.push_back({y, x});
    return;
  }

  Index ax2 = floor_half(ax), ay2 = floor_half(ay);
  Index bx2 = floor_half(bx), by2 = floor_half(by);
  const Index w2 = std::abs(ax2 + ay2);
  const Index h2 = std::abs(bx2 + by2);

  if (2 * w > 3 * h) {
    // Long rectangle: two halves along the major axis.
    if ((w2 % 2) != 0 && w > 2) {
      ax2 += dax;
      ay2 += day;
    }
    generate(x, y, ax2, ay2, bx, by, out);
    generate(x + ax2, y + ay2, ax - ax2, ay - ay2, bx, by, out);
  } else {
    // Up into the lower half, across, and back down.
    if ((h2 % 2) != 0 && h > 2) {
      bx2 += dbx;
      by2 += dby;
    }
    generate(x, y, bx2, by2, ax2, ay2, out);
    generate(x + bx2, y + by2, ax, ay, bx - bx2, by - by2, out);
    generate(x + (ax - dax) + (bx2 - dbx), y + (ay - day) + (by2 - dby), -bx2, -by2, -(ax - ax2), -(ay - ay2), out);
  }
}

double squared_distance(const GridPoint& a, const GridPoint& b) {
  const double dr = static_cast<double>(a.row - b.row);
  const double dc = static_cast<double>(a.col - b.col);
  return dr * dr + dc * dc;
}

}  // namespace

std::string to_string(CurveKind kind) { return kind == CurveKind::Hilbert ? "hilbert" : "zigzag"; }

CurveKind parse_curve_kind(const std::string& name) {
  if (name == "hilbert") return CurveKind::Hilbert;
  if (name == "zigzag") return CurveKind::Zigzag;
  throw std::invalid_argument("unknown curve kind '" + name + "' (expected hilbert or zigzag)");
}

Curve zigzag_curve(Index width, Index height) {
  check_extents(width, height);
  Curve c{CurveKind::Zigzag, width, height, {}};
  c.points.reserve(static_cast<std::size_t>(width * height));
  for (Index r = 0; r < height; ++r) {
    for (Index col = 0; col < width; ++col) c.points.push_back({r, col});
  }
  return c;
}

Curve hilbert_curve(Index width, Index height) {
  check_extents(width, height);
  Curve c{CurveKind::Hilbert, width, height, {}};
  c.points.reserve(static_cast<std::size_t>(width * height));
  // The path ends at the far corner of the major axis. With an even cell
  // count that corner must differ in colour from the start, i.e. the major
  // side must be even; otherwise a diagonal step is forced.
  bool major_x;
  if (width % 2 == 0 && (width >= height || height % 2 == 1)) {
    major_x = true;
  } else if (height % 2 == 0) {
    major_x = false;
  } else {
    major_x = width >= height;
  }
  if (major_x) {
    generate(0, 0, width, 0, 0, height, c.points);
  } else {
    generate(0, 0, 0, height, width, 0, c.points);
  }
  return c;
}

Curve make_curve(CurveKind kind, Index width, Index height) {
  return kind == CurveKind::Hilbert ? hilbert_curve(width, height) : zigzag_curve(width, height);
}

Curve reversed(const Curve& curve) {
  Curve out = curve;
  std::reverse(out.points.begin(), out.points.end());
  return out;
}

Curve transposed(const Curve& curve) {
  Curve out = curve;
  std::swap(out.width, out.height);
  for (auto& p : out.points) std::swap(p.row, p.col);
  return out;
}

double slr(const Curve& curve, Index i, Index j) {
  const auto n = static_cast<Index>(curve.size());
  if (i < 0 || j < 0 || i >= n || j >= n) throw std::out_of_range("slr: index out of range");
  if (i == j) throw std::invalid_argument("slr: indices must differ");
  return squared_distance(curve.points[static_cast<std::size_t>(i)], curve.points[static_cast<std::size_t>(j)]) /
         static_cast<double>(std::abs(i - j));
}

DilationReport dilation_factor(const Curve& curve, const DilationOptions& options) {
  const std::size_t n = curve.size();
  if (n < 2) throw std::invalid_argument("dilation_factor: need at least two points");
  DilationReport rep;
  auto consider = [&](std::size_t i, std::size_t j) {
    const double v = squared_distance(curve.points[i], curve.points[j]) / static_cast<double>(j - i);
    ++rep.pairs;
    if (v > rep.df) {
      rep.df = v;
      rep.argmax_i = static_cast<Index>(i);
      rep.argmax_j = static_cast<Index>(j);
    }
  };

  if (n <= options.exact_limit) {
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = i + 1; j < n; ++j) consider(i, j);
    }
    rep.exact = true;
    return rep;
  }

  // Sampling: every short-gap pair, then random pairs with log-uniform gaps.
  rep.exact = false;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < std::min(n, i + options.dense_gap + 1); ++j) consider(i, j);
  }
  Rng rng(options.seed);
  const double log_max = std::log(static_cast<double>(n - 1));
  for (std::size_t s = 0; s < options.samples; ++s) {
    auto gap = static_cast<std::size_t>(std::exp(rng.uniform() * log_max));
    gap = std::clamp<std::size_t>(gap, 1, n - 1);
    const std::size_t i = static_cast<std::size_t>(rng.below(n - gap));
    consider(i, i + gap);
  }
  return rep;
}

std::vector<Index> flatten_indices(const Curve& curve) {
  std::vector<Index> out;
  out.reserve(curve.size());
  for (const auto& p : curve.points) out.push_back(p.row * curve.width + p.col);
  return out;
}

std::vector<Index> inverse_indices(const Curve& curve) {
  const auto fwd = flatten_indices(curve);
  std::vector<Index> inv(fwd.size(), -1);
  for (std::size_t pos = 0; pos < fwd.size(); ++pos) inv[static_cast<std::size_t>(fwd[pos])] = static_cast<Index>(pos);
  return inv;
}

std::string to_csv(const Curve& curve) {
  std::ostringstream out;
  out << "pos,row,col\n";
  for (std::size_t i = 0; i < curve.size(); ++i) out << i << ',' << curve.points[i].row << ',' << curve.points[i].col << '\n';
  return out.str();
}

std::string to_svg(const Curve& curve, double cell) {
  std::ostringstream out;
  const double w = cell * static_cast<double>(curve.width);
  const double h = cell * static_cast<double>(curve.height);
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\" viewBox=\"0 0 " << w
      << ' ' << h << "\">\n";
  out << "  <polyline fill=\"none\" stroke=\"black\" stroke-width=\"" << cell / 8.0 << "\" points=\"";
  for (std::size_t i = 0; i < curve.size(); ++i) {
    if (i) out << ' ';
    out << (static_cast<double>(curve.points[i].col) + 0.5) * cell << ',' << (static_cast<double>(curve.points[i].row) + 0.5) * cell;
  }
  out << "\"/>\n</svg>\n";
  return out.str();
}

}  // namespace clipseg::hilbert
