#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <utility>

#include "rrnet/errors.hpp"

namespace rrnet {

/// Output grid of the heads. `stride` is image pixels per cell.
struct GridSpec {
  int height = 16;
  int width = 16;
  int stride = 4;

  void validate() const {
    if (height < 1) throw ConfigError("grid.height must be >= 1");
    if (width < 1) throw ConfigError("grid.width must be >= 1");
    if (stride < 1) throw ConfigError("grid.stride must be >= 1");
  }
  std::size_t cells() const { return static_cast<std::size_t>(height) * width; }
  bool operator==(const GridSpec&) const = default;
};

/// Location in grid cells.
struct Point {
  double x = 0.0;
  double y = 0.0;
  bool operator==(const Point&) const = default;
};

struct Displacement {
  double dx = 0.0;
  double dy = 0.0;
  bool operator==(const Displacement&) const = default;
};

inline Point operator+(Point p, Displacement d) { return {p.x + d.dx, p.y + d.dy}; }

/// Center-size box in image pixels.
struct BBox {
  double cx = 0.0;
  double cy = 0.0;
  double w = 0.0;
  double h = 0.0;

  double x0() const { return cx - w / 2.0; }
  double y0() const { return cy - h / 2.0; }
  double x1() const { return cx + w / 2.0; }
  double y1() const { return cy + h / 2.0; }
  double area() const { return w * h; }
  bool valid() const { return w > 0.0 && h > 0.0; }
  bool operator==(const BBox&) const = default;
};

/// The interaction point of a human/object pair.
inline Point midpoint(Point h, Point o) { return {(h.x + o.x) / 2.0, (h.y + o.y) / 2.0}; }

/// Vectors from the interaction point `i` to the human and object points.
inline std::pair<Displacement, Displacement> displacements(Point i, Point h, Point o) {
  return {Displacement{h.x - i.x, h.y - i.y}, Displacement{o.x - i.x, o.y - i.y}};
}

/// Mutable view of one H×W channel plane stored row-major.
struct PlaneRef {
  std::span<double> data;
  int height = 0;
  int width = 0;

  double& at(int y, int x) const { return data[static_cast<std::size_t>(y) * width + x]; }
};

inline double gaussian_sigma(double radius) { return radius / 3.0; }

/// Max-merges a Gaussian peak centred on `center` into `plane`, sigma = radius/3.
inline void gaussian_splat(PlaneRef plane, Point center, double radius) {
  const long cx = std::lround(center.x);
  const long cy = std::lround(center.y);
  if (!std::isfinite(center.x) || !std::isfinite(center.y) || cx < 0 || cy < 0 ||
      cx >= plane.width || cy >= plane.height) {
    throw TargetEncodingError("gaussian centre (" + std::to_string(center.x) + ", " +
                              std::to_string(center.y) + ") lies outside the " +
                              std::to_string(plane.width) + "x" + std::to_string(plane.height) +
                              " grid");
  }
  if (!(radius >= 1.0)) throw TargetEncodingError("gaussian radius must be >= 1");
  const double sigma = gaussian_sigma(radius);
  const double denom = 2.0 * sigma * sigma;
  for (int y = 0; y < plane.height; ++y) {
    for (int x = 0; x < plane.width; ++x) {
      const double dx = x - center.x;
      const double dy = y - center.y;
      const double v = std::exp(-(dx * dx + dy * dy) / denom);
      double& cell = plane.at(y, x);
      cell = std::max(cell, v);
    }
  }
}

inline int gaussian_radius(const BBox& box, const GridSpec& grid) {
  const double side = std::min(box.w, box.h);
  return std::max(1, static_cast<int>(std::floor(side / (3.0 * grid.stride))));
}

inline double iou(const BBox& a, const BBox& b) {
  const double iw = std::min(a.x1(), b.x1()) - std::max(a.x0(), b.x0());
  const double ih = std::min(a.y1(), b.y1()) - std::max(a.y0(), b.y0());
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  // Areas from corners so that iou(a, a) is exactly 1.
  const double area_a = (a.x1() - a.x0()) * (a.y1() - a.y0());
  const double area_b = (b.x1() - b.x0()) * (b.y1() - b.y0());
  const double inter = iw * ih;
  const double uni = area_a + area_b - inter;
  return uni > 0.0 ? std::clamp(inter / uni, 0.0, 1.0) : 0.0;
}

}  // namespace rrnet
