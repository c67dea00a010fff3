// SPDX-License-Identifier: Apache-2.0
//
// Test-side reference computations. Nothing here calls into the library's
// geometry or reward code.
#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <vector>

#include "toolshed/geometry.hpp"
#include "toolshed/value.hpp"

namespace oracle {

using toolshed::Point2;

/// Counter-clockwise convex polygon test by half-planes, boundary inclusive.
inline bool inside_ccw(const std::vector<Point2>& poly, Point2 p) {
  for (std::size_t i = 0; i < poly.size(); ++i) {
    const Point2 a = poly[i];
    const Point2 b = poly[(i + 1) % poly.size()];
    if ((b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x) < 0) return false;
  }
  return true;
}

struct Estimate {
  double value = 0;
  double sigma = 0;
};

/// Area of A∩B (or A∪B) by uniform sampling over the joint bounding box.
inline Estimate mc_areas(const std::vector<Point2>& a, const std::vector<Point2>& b, std::size_t n, std::uint64_t seed,
                         double* union_out = nullptr) {
  double x0 = 1e300, y0 = 1e300, x1 = -1e300, y1 = -1e300;
  for (const auto* poly : {&a, &b})
    for (const auto& p : *poly) {
      x0 = std::min(x0, p.x);
      y0 = std::min(y0, p.y);
      x1 = std::max(x1, p.x);
      y1 = std::max(y1, p.y);
    }
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> ux(x0, x1), uy(y0, y1);
  std::size_t both = 0, either = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const Point2 p{ux(rng), uy(rng)};
    const bool ia = inside_ccw(a, p), ib = inside_ccw(b, p);
    both += ia && ib;
    either += ia || ib;
  }
  const double box = (x1 - x0) * (y1 - y0);
  const double f = static_cast<double>(both) / static_cast<double>(n);
  if (union_out) *union_out = box * static_cast<double>(either) / static_cast<double>(n);
  return {box * f, box * std::sqrt(std::max(f * (1 - f), 1.0 / static_cast<double>(n)) / static_cast<double>(n))};
}

/// Convex polygon from sorted random angles on an ellipse, counter-clockwise.
inline std::vector<Point2> random_convex(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0, 1);
  const int n = 3 + static_cast<int>(rng() % 8);
  std::vector<double> ang(n);
  for (auto& t : ang) t = 2 * std::numbers::pi * u(rng);
  std::sort(ang.begin(), ang.end());
  const double cx = u(rng), cy = u(rng), rx = 0.1 + 0.5 * u(rng), ry = 0.1 + 0.5 * u(rng);
  const double rot = 2 * std::numbers::pi * u(rng);
  std::vector<Point2> out;
  for (double t : ang) {
    const double ex = rx * std::cos(t), ey = ry * std::sin(t);
    out.push_back({cx + ex * std::cos(rot) - ey * std::sin(rot), cy + ex * std::sin(rot) + ey * std::cos(rot)});
  }
  return out;
}

/// Shoelace area of a counter-clockwise polygon.
inline double shoelace(const std::vector<Point2>& v) {
  double s = 0;
  for (std::size_t i = 0; i < v.size(); ++i) s += v[i].x * v[(i + 1) % v.size()].y - v[(i + 1) % v.size()].x * v[i].y;
  return 0.5 * s;
}

/// Uniform random rotation from a unit quaternion, row-major.
inline std::array<double, 9> random_rotation(std::mt19937_64& rng) {
  std::normal_distribution<double> g;
  double w = g(rng), x = g(rng), y = g(rng), z = g(rng);
  const double n = std::sqrt(w * w + x * x + y * y + z * z);
  w /= n, x /= n, y /= n, z /= n;
  return {1 - 2 * (y * y + z * z), 2 * (x * y - z * w),     2 * (x * z + y * w),
          2 * (x * y + z * w),     1 - 2 * (x * x + z * z), 2 * (y * z - x * w),
          2 * (x * z - y * w),     2 * (y * z + x * w),     1 - 2 * (x * x + y * y)};
}

/// Corners of an axis-aligned box centred at the origin.
inline std::vector<toolshed::geometry::Vec3> box_points(double ex, double ey, double ez) {
  std::vector<toolshed::geometry::Vec3> pts;
  for (int i = 0; i < 8; ++i) pts.push_back({(i & 1 ? 0.5 : -0.5) * ex, (i & 2 ? 0.5 : -0.5) * ey, (i & 4 ? 0.5 : -0.5) * ez});
  return pts;
}

inline std::vector<toolshed::geometry::Vec3> rotate(const std::vector<toolshed::geometry::Vec3>& pts,
                                                    const std::array<double, 9>& r, toolshed::geometry::Vec3 t) {
  std::vector<toolshed::geometry::Vec3> out;
  for (const auto& p : pts)
    out.push_back({r[0] * p.x + r[1] * p.y + r[2] * p.z + t.x, r[3] * p.x + r[4] * p.y + r[5] * p.z + t.y,
                   r[6] * p.x + r[7] * p.y + r[8] * p.z + t.z});
  return out;
}

/// Population mean and standard deviation, two-pass.
inline std::pair<double, double> mean_std(const std::vector<double>& v) {
  double m = 0;
  for (double x : v) m += x;
  m /= static_cast<double>(v.size());
  double s = 0;
  for (double x : v) s += (x - m) * (x - m);
  return {m, std::sqrt(s / static_cast<double>(v.size()))};
}

// Closed-form values evaluated at 50 digits (mpmath) and frozen.
inline constexpr double kNndcAt02 = 0.367342108561950556;
inline constexpr double kNsdhAtPlus1 = 0.183939720585721161;
inline constexpr double kExpMinus1 = 0.367879441171442322;
inline constexpr double kAdv10101High = 0.816496580927726033;
inline constexpr double kAdv10101Low = -1.224744871391589049;

}  // namespace oracle
