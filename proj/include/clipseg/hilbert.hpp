#pragma once

// Flattening curves over 2-D grids and their locality statistics.

#include "clipseg/numkit/types.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace clipseg::hilbert {

enum class CurveKind { Hilbert, Zigzag };

std::string to_string(CurveKind kind);
CurveKind parse_curve_kind(const std::string& name);

struct GridPoint {
  Index row = 0;
  Index col = 0;
  friend bool operator==(const GridPoint&, const GridPoint&) = default;
};

/// Ordered visit of every cell of a width x height grid.
struct Curve {
  CurveKind kind = CurveKind::Zigzag;
  Index width = 0;
  Index height = 0;
  std::vector<GridPoint> points;

  std::size_t size() const { return points.size(); }
};

/// Row-major order.
Curve zigzag_curve(Index width, Index height);

/// Generalized Hilbert curve for arbitrary rectangles: recursive splitting of
/// the rectangle along its major axis with rotated sub-frames. The curve
/// starts at (0, 0); the top-level major axis is chosen along an even side
/// when one exists, which keeps every step a unit move.
Curve hilbert_curve(Index width, Index height);

Curve make_curve(CurveKind kind, Index width, Index height);

/// Same points visited backwards.
Curve reversed(const Curve& curve);
/// Swaps rows and columns of every point (and the grid extents).
Curve transposed(const Curve& curve);

/// Squared Euclidean distance between points i and j over |i - j|.
double slr(const Curve& curve, Index i, Index j);

struct DilationOptions {
  /// Exhaustive pair search up to this many points; sampling beyond.
  std::size_t exact_limit = 4096;
  /// Random pairs drawn in sampling mode, on top of every pair with gap <= dense_gap.
  std::size_t samples = 1'000'000;
  std::size_t dense_gap = 64;
  std::uint64_t seed = 0;
};

struct DilationReport {
  double df = 0.0;
  Index argmax_i = 0;
  Index argmax_j = 0;
  /// False when the value came from sampling and is only a lower bound.
  bool exact = true;
  std::size_t pairs = 0;
};

/// Maximum SLR over point pairs.
DilationReport dilation_factor(const Curve& curve, const DilationOptions& options = {});

/// position -> row-major cell index (row * width + col).
std::vector<Index> flatten_indices(const Curve& curve);
/// row-major cell index -> position.
std::vector<Index> inverse_indices(const Curve& curve);

/// `pos,row,col` lines with a header.
std::string to_csv(const Curve& curve);
/// Polyline through cell centres.
std::string to_svg(const Curve& curve, double cell = 20.0);

}  // namespace clipseg::hilbert
