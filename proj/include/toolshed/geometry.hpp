// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include <Eigen/Dense>

#include "toolshed/error.hpp"
#include "toolshed/value.hpp"

namespace toolshed::geometry {

/// Orientation and degeneracy tolerance.
inline constexpr double kEps = 1e-12;

inline double dot(Point2 a, Point2 b) { return a.x * b.x + a.y * b.y; }
inline double cross(Point2 a, Point2 b) { return a.x * b.y - a.y * b.x; }
inline double norm(Point2 a) { return std::hypot(a.x, a.y); }
inline double distance(Point2 a, Point2 b) { return norm(a - b); }

/// Counter-clockwise convex polygon, no repeated closing vertex.
struct ConvexPolygon {
  std::vector<Point2> vertices;

  friend bool operator==(const ConvexPolygon&, const ConvexPolygon&) = default;
};

/// Hull of a point set that spans no area: a single point or a segment.
struct DegenerateHull {
  Point2 a;
  Point2 b;  // equals a for a point

  bool is_point() const { return a == b; }
  friend bool operator==(const DegenerateHull&, const DegenerateHull&) = default;
};

using Hull = std::variant<ConvexPolygon, DegenerateHull>;

inline bool is_degenerate(const Hull& h) { return std::holds_alternative<DegenerateHull>(h); }

/// Andrew's monotone chain. Collinear boundary points are dropped.
inline Hull convex_hull(std::span<const Point2> input) {
  if (input.empty()) throw BadArgs("convex_hull needs at least one point");
  std::vector<Point2> pts(input.begin(), input.end());
  std::sort(pts.begin(), pts.end(), [](Point2 a, Point2 b) { return a.x < b.x || (a.x == b.x && a.y < b.y); });
  pts.erase(std::unique(pts.begin(), pts.end()), pts.end());
  if (pts.size() == 1) return DegenerateHull{pts[0], pts[0]};

  std::vector<Point2> h(2 * pts.size());
  std::size_t k = 0;
  for (const auto& p : pts) {
    while (k >= 2 && cross(h[k - 1] - h[k - 2], p - h[k - 2]) <= kEps) --k;
    h[k++] = p;
  }
  for (std::size_t i = pts.size() - 1, lower = k + 1; i-- > 0;) {
    const auto& p = pts[i];
    while (k >= lower && cross(h[k - 1] - h[k - 2], p - h[k - 2]) <= kEps) --k;
    h[k++] = p;
  }
  h.resize(k - 1);
  if (h.size() < 3) return DegenerateHull{pts.front(), pts.back()};
  return ConvexPolygon{std::move(h)};
}

inline Hull convex_hull(std::initializer_list<Point2> pts) { return convex_hull(std::span(pts.begin(), pts.size())); }

/// Shoelace area.
inline double polygon_area(const ConvexPolygon& p) {
  const auto& v = p.vertices;
  if (v.size() < 3) return 0.0;
  double twice = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) twice += cross(v[i], v[(i + 1) % v.size()]);
  return std::max(0.0, 0.5 * twice);
}

inline double polygon_area(const Hull& h) {
  if (const auto* p = std::get_if<ConvexPolygon>(&h)) return polygon_area(*p);
  return 0.0;
}

/// Area centroid of a polygon.
inline Point2 polygon_centroid(const ConvexPolygon& p) {
  const auto& v = p.vertices;
  double a = 0, cx = 0, cy = 0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    const auto& p0 = v[i];
    const auto& p1 = v[(i + 1) % v.size()];
    const double c = cross(p0, p1);
    a += c;
    cx += (p0.x + p1.x) * c;
    cy += (p0.y + p1.y) * c;
  }
  if (std::abs(a) < kEps) {
    Point2 m{};
    for (const auto& q : v) m = m + q;
    return (1.0 / static_cast<double>(v.size())) * m;
  }
  return {cx / (3 * a), cy / (3 * a)};
}

/// Sutherland-Hodgman clip of `a` by the half-planes of `b`. Returns nullopt
/// when the overlap has (numerically) no area.
inline std::optional<ConvexPolygon> convex_intersection(const ConvexPolygon& a, const ConvexPolygon& b) {
  std::vector<Point2> out = a.vertices;
  const auto& clip = b.vertices;
  for (std::size_t i = 0; i < clip.size() && !out.empty(); ++i) {
    const Point2 e0 = clip[i];
    const Point2 e1 = clip[(i + 1) % clip.size()];
    const Point2 edge = e1 - e0;
    auto side = [&](Point2 p) { return cross(edge, p - e0); };
    std::vector<Point2> in = std::move(out);
    out.clear();
    for (std::size_t j = 0; j < in.size(); ++j) {
      const Point2 cur = in[j];
      const Point2 prev = in[(j + in.size() - 1) % in.size()];
      const double sc = side(cur);
      const double sp = side(prev);
      const bool cur_in = sc >= -kEps;
      const bool prev_in = sp >= -kEps;
      if (cur_in != prev_in) {
        const double t = sp / (sp - sc);
        out.push_back(prev + t * (cur - prev));
      }
      if (cur_in) out.push_back(cur);
    }
  }
  if (out.size() < 3) return std::nullopt;
  auto h = convex_hull(std::span<const Point2>(out));
  const auto* poly = std::get_if<ConvexPolygon>(&h);
  if (!poly || polygon_area(*poly) < kEps) return std::nullopt;
  return *poly;
}

inline double intersection_area(const ConvexPolygon& a, const ConvexPolygon& b) {
  auto i = convex_intersection(a, b);
  return i ? polygon_area(*i) : 0.0;
}

/// Intersection over union of two convex polygons, in [0,1].
inline double convex_iou(const ConvexPolygon& a, const ConvexPolygon& b) {
  const double inter = intersection_area(a, b);
  const double uni = polygon_area(a) + polygon_area(b) - inter;
  if (uni <= kEps) return 0.0;
  return std::clamp(inter / uni, 0.0, 1.0);
}

inline double distance_to_segment(Point2 p, Point2 a, Point2 b) {
  const Point2 ab = b - a;
  const double len2 = dot(ab, ab);
  if (len2 == 0.0) return distance(p, a);
  const double t = std::clamp(dot(p - a, ab) / len2, 0.0, 1.0);
  return distance(p, a + t * ab);
}

/// Distance to the hull boundary; negative iff strictly inside.
inline double signed_distance_to_hull(Point2 p, const ConvexPolygon& hull) {
  const auto& v = hull.vertices;
  if (v.size() < 3) throw BadArgs("signed distance needs a non-degenerate hull");
  double best = std::numeric_limits<double>::infinity();
  bool inside = true;
  for (std::size_t i = 0; i < v.size(); ++i) {
    const Point2 a = v[i];
    const Point2 b = v[(i + 1) % v.size()];
    best = std::min(best, distance_to_segment(p, a, b));
    if (cross(b - a, p - a) <= kEps) inside = false;
  }
  return inside ? -best : best;
}

inline double signed_distance_to_hull(Point2 p, const Hull& hull) {
  if (const auto* poly = std::get_if<ConvexPolygon>(&hull)) return signed_distance_to_hull(p, *poly);
  throw BadArgs("signed distance needs a non-degenerate hull");
}

/// Boundary counts as inside.
inline bool point_in_hull(Point2 p, const ConvexPolygon& hull) {
  if (hull.vertices.size() < 3) return false;
  return signed_distance_to_hull(p, hull) <= kEps;
}

inline bool point_in_hull(Point2 p, const Hull& hull) {
  if (const auto* poly = std::get_if<ConvexPolygon>(&hull)) return point_in_hull(p, *poly);
  return false;
}

// ---------------------------------------------------------------------------
// 3D

struct Vec3 {
  double x = 0, y = 0, z = 0;

  friend bool operator==(const Vec3&, const Vec3&) = default;
};

/// Pinhole projection into normalized image coordinates:
/// u = (f*x/z + W/2)/W, v = (f*y/z + H/2)/H.
inline std::vector<Point2> project_points(std::span<const Vec3> pts, double focal_length_px, double width, double height) {
  std::vector<std::size_t> bad;
  for (std::size_t i = 0; i < pts.size(); ++i)
    if (!(pts[i].z > 0.0)) bad.push_back(i);
  if (!bad.empty()) {
    std::string msg = "points behind the camera (z <= 0) at indices:";
    for (auto i : bad) msg += " " + std::to_string(i);
    throw BadArgs(msg);
  }
  std::vector<Point2> out;
  out.reserve(pts.size());
  for (const auto& p : pts)
    out.push_back({(focal_length_px * p.x / p.z + width / 2) / width, (focal_length_px * p.y / p.z + height / 2) / height});
  return out;
}

/// Oriented box. `axes[i]` is a unit column; the frame is right-handed.
/// A degenerate box has zero extent along its null axes.
struct OrientedBox3 {
  Vec3 center;
  std::array<Vec3, 3> axes{};
  Vec3 extent;
  bool degenerate = false;

  /// Corner i sits at center + sum_k s_k * extent_k/2 * axis_k with s_k = +1
  /// when bit k of i is set, -1 otherwise.
  std::array<Vec3, 8> corners() const {
    std::array<Vec3, 8> out{};
    const double e[3] = {extent.x, extent.y, extent.z};
    for (int i = 0; i < 8; ++i) {
      Vec3 c = center;
      for (int k = 0; k < 3; ++k) {
        const double s = (i >> k & 1) ? 0.5 : -0.5;
        c.x += s * e[k] * axes[k].x;
        c.y += s * e[k] * axes[k].y;
        c.z += s * e[k] * axes[k].z;
      }
      out[i] = c;
    }
    return out;
  }

  /// The 12 corner index pairs that differ in exactly one bit.
  static std::array<std::pair<int, int>, 12> edges() {
    std::array<std::pair<int, int>, 12> out{};
    int n = 0;
    for (int i = 0; i < 8; ++i)
      for (int k = 0; k < 3; ++k)
        if (!(i >> k & 1)) out[n++] = {i, i | (1 << k)};
    return out;
  }

  double volume() const { return extent.x * extent.y * extent.z; }
};

namespace obb_detail {

using Eigen::Matrix3d;
using Eigen::Vector2d;
using Eigen::Vector3d;

// Minimum-area bounding rectangle of 2D points (rotating calipers over hull
// edges). Returns the unit direction of the first rectangle side.
inline Vector2d min_area_direction(const std::vector<Point2>& pts) {
  auto h = convex_hull(std::span<const Point2>(pts));
  std::vector<Point2> hv;
  if (const auto* poly = std::get_if<ConvexPolygon>(&h)) {
    hv = poly->vertices;
  } else {
    const auto& d = std::get<DegenerateHull>(h);
    Point2 dir = d.b - d.a;
    if (norm(dir) == 0.0) return {1.0, 0.0};
    return Vector2d(dir.x, dir.y).normalized();
  }
  double best_area = std::numeric_limits<double>::infinity();
  Vector2d best(1.0, 0.0);
  for (std::size_t i = 0; i < hv.size(); ++i) {
    Point2 e = hv[(i + 1) % hv.size()] - hv[i];
    const double len = norm(e);
    if (len == 0.0) continue;
    const Vector2d u(e.x / len, e.y / len);
    const Vector2d v(-u.y(), u.x());
    double umin = std::numeric_limits<double>::infinity(), umax = -umin, vmin = umin, vmax = -umin;
    for (const auto& p : hv) {
      const double a = u.x() * p.x + u.y() * p.y;
      const double b = v.x() * p.x + v.y() * p.y;
      umin = std::min(umin, a);
      umax = std::max(umax, a);
      vmin = std::min(vmin, b);
      vmax = std::max(vmax, b);
    }
    const double area = (umax - umin) * (vmax - vmin);
    if (area < best_area * (1 - 1e-12)) {
      best_area = area;
      best = u;
    }
  }
  return best;
}

// Within the plane spanned by orthonormal (e0, e1), rotate so the pair aligns
// with the minimum-area rectangle of the projected points.
inline std::pair<Vector3d, Vector3d> align_plane(const std::vector<Vector3d>& centered, const Vector3d& e0, const Vector3d& e1) {
  std::vector<Point2> proj;
  proj.reserve(centered.size());
  for (const auto& p : centered) proj.push_back({p.dot(e0), p.dot(e1)});
  const Vector2d d = min_area_direction(proj);
  const Vector3d a = (d.x() * e0 + d.y() * e1).normalized();
  const Vector3d b = (-d.y() * e0 + d.x() * e1).normalized();
  return {a, b};
}

inline double span_along(const std::vector<Vector3d>& centered, const Vector3d& axis) {
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (const auto& p : centered) {
    const double t = p.dot(axis);
    lo = std::min(lo, t);
    hi = std::max(hi, t);
  }
  return hi - lo;
}

inline Vector3d any_perpendicular(const Vector3d& a) {
  const Vector3d helper = std::abs(a.x()) < 0.9 ? Vector3d::UnitX() : Vector3d::UnitY();
  return a.cross(helper).normalized();
}

// Isotropic covariance: PCA leaves the frame free, so pick the frame of least
// volume among candidate primary axes taken from point differences.
inline Matrix3d isotropic_frame(const std::vector<Vector3d>& centered) {
  std::vector<std::size_t> idx(centered.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](auto a, auto b) { return centered[a].squaredNorm() > centered[b].squaredNorm(); });
  if (idx.size() > 48) idx.resize(48);

  double best_volume = std::numeric_limits<double>::infinity();
  Matrix3d best = Matrix3d::Identity();
  for (std::size_t i = 0; i < idx.size(); ++i) {
    for (std::size_t j = i + 1; j < idx.size(); ++j) {
      Vector3d a = centered[idx[j]] - centered[idx[i]];
      if (a.norm() < kEps) continue;
      a.normalize();
      const Vector3d e0 = any_perpendicular(a);
      const Vector3d e1 = a.cross(e0);
      auto [b, c] = align_plane(centered, e0, e1);
      const double vol = span_along(centered, a) * span_along(centered, b) * span_along(centered, c);
      if (vol < best_volume * (1 - 1e-9)) {
        best_volume = vol;
        best.col(0) = a;
        best.col(1) = b;
        best.col(2) = c;
      }
    }
  }
  return best;
}

// Largest-magnitude component positive; among near-ties the first component wins.
inline Vector3d fix_sign(Vector3d v) {
  const double m = v.cwiseAbs().maxCoeff();
  for (int k = 0; k < 3; ++k) {
    if (std::abs(v[k]) >= m - 1e-12) {
      if (v[k] < 0) v = -v;
      break;
    }
  }
  return v;
}

}  // namespace obb_detail

/// PCA oriented bounding box: axes are covariance eigenvectors by descending
/// eigenvalue. Inside a repeated eigenvalue the frame is resolved by the
/// minimum-area (or minimum-volume) fit, which keeps the result rotation
/// invariant. Rank-deficient inputs give a degenerate box.
inline OrientedBox3 pca_obb(std::span<const Vec3> points) {
  using namespace obb_detail;
  if (points.size() < 4) throw BadArgs("pca_obb needs at least 4 points");

  Vector3d mean = Vector3d::Zero();
  for (const auto& p : points) mean += Vector3d(p.x, p.y, p.z);
  mean /= static_cast<double>(points.size());
  std::vector<Vector3d> centered;
  centered.reserve(points.size());
  Matrix3d cov = Matrix3d::Zero();
  for (const auto& p : points) {
    centered.emplace_back(Vector3d(p.x, p.y, p.z) - mean);
    cov += centered.back() * centered.back().transpose();
  }
  cov /= static_cast<double>(points.size());

  Eigen::SelfAdjointEigenSolver<Matrix3d> solver(cov);
  // Eigen sorts ascending; flip to descending.
  Vector3d lambda(solver.eigenvalues()[2], solver.eigenvalues()[1], solver.eigenvalues()[0]);
  Matrix3d axes;
  axes.col(0) = solver.eigenvectors().col(2);
  axes.col(1) = solver.eigenvectors().col(1);
  axes.col(2) = solver.eigenvectors().col(0);

  const double lmax = std::max(lambda[0], 0.0);
  const double null_tol = 1e-10 * lmax;
  const double tie_tol = 1e-6 * lmax;
  int rank = 0;
  for (int k = 0; k < 3; ++k) rank += lambda[k] > null_tol ? 1 : 0;
  if (lmax == 0.0) rank = 0;

  const bool tie01 = rank >= 2 && lambda[0] - lambda[1] <= tie_tol;
  const bool tie12 = rank >= 3 && lambda[1] - lambda[2] <= tie_tol;
  if (tie01 && tie12) {
    axes = isotropic_frame(centered);
    // Order by descending spread; sign and handedness fixed below.
    std::array<int, 3> order{0, 1, 2};
    std::array<double, 3> spans{};
    for (int k = 0; k < 3; ++k) spans[k] = span_along(centered, axes.col(k));
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return spans[a] > spans[b] + 1e-12; });
    Matrix3d sorted;
    for (int k = 0; k < 3; ++k) sorted.col(k) = axes.col(order[k]);
    axes = sorted;
  } else if (tie01) {
    auto [a, b] = align_plane(centered, axes.col(0), axes.col(1));
    if (span_along(centered, b) > span_along(centered, a) + 1e-12) std::swap(a, b);
    axes.col(0) = a;
    axes.col(1) = b;
  } else if (tie12) {
    auto [a, b] = align_plane(centered, axes.col(1), axes.col(2));
    if (span_along(centered, b) > span_along(centered, a) + 1e-12) std::swap(a, b);
    axes.col(1) = a;
    axes.col(2) = b;
  }

  axes.col(0) = fix_sign(axes.col(0));
  axes.col(1) = fix_sign(axes.col(1));
  axes.col(2) = axes.col(0).cross(axes.col(1)).normalized();

  OrientedBox3 box;
  Vector3d lo, hi;
  for (int k = 0; k < 3; ++k) {
    lo[k] = std::numeric_limits<double>::infinity();
    hi[k] = -lo[k];
  }
  for (const auto& c : centered) {
    const Vector3d t = axes.transpose() * c;
    lo = lo.cwiseMin(t);
    hi = hi.cwiseMax(t);
  }
  Vector3d ext = hi - lo;
  box.degenerate = rank < 3;
  for (int k = rank; k < 3; ++k) ext[k] = 0.0;
  const Vector3d mid = 0.5 * (lo + hi);
  const Vector3d center = mean + axes * mid;
  box.center = {center.x(), center.y(), center.z()};
  for (int k = 0; k < 3; ++k) box.axes[k] = {axes(0, k), axes(1, k), axes(2, k)};
  box.extent = {ext.x(), ext.y(), ext.z()};
  return box;
}

}  // namespace toolshed::geometry
