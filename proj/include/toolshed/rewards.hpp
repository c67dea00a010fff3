// SPDX-License-Identifier: Apache-2.0
//
// Task rewards and grasp metrics. Every function is pure; accuracy rewards
// land in [0,1] and only combine_with_format can exceed 1.
#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "toolshed/error.hpp"
#include "toolshed/geometry.hpp"

namespace toolshed::rewards {

using geometry::ConvexPolygon;
using geometry::Hull;

/// Axis-aligned box in normalized coordinates, x1 < x2 and y1 < y2.
struct Box2 {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  double area() const { return std::max(0.0, x2 - x1) * std::max(0.0, y2 - y1); }
  friend bool operator==(const Box2&, const Box2&) = default;
};

/// Center plus finger bases and tips, normalized image coordinates.
struct GraspPoints {
  Point2 center;
  Point2 left_base;
  Point2 right_base;
  Point2 left_tip;
  Point2 right_tip;

  std::array<Point2, 5> as_array() const { return {center, left_base, right_base, left_tip, right_tip}; }
  friend bool operator==(const GraspPoints&, const GraspPoints&) = default;
};

/// Target region for pointing: the annotated points, their hull and centroid.
struct Region {
  std::vector<Point2> points;
  Hull hull;
  Point2 centroid;

  /// Centroid is the arithmetic mean of the points.
  static Region from_points(std::vector<Point2> pts) {
    if (pts.empty()) throw BadArgs("region needs at least one point");
    Point2 m{};
    for (const auto& p : pts) m = m + p;
    m = (1.0 / static_cast<double>(pts.size())) * m;
    auto h = geometry::convex_hull(std::span<const Point2>(pts));
    return {std::move(pts), std::move(h), m};
  }

  /// Region given as a polygon outline; centroid is the area centroid.
  static Region from_hull(std::vector<Point2> outline) {
    auto r = from_points(std::move(outline));
    if (const auto* poly = std::get_if<ConvexPolygon>(&r.hull)) r.centroid = geometry::polygon_centroid(*poly);
    return r;
  }
};

// ---------------------------------------------------------------------------

namespace detail {

inline std::string normalize_choice(std::string_view s) {
  std::string out;
  bool pending_space = false;
  for (char c : s) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) out.push_back(' ');
    pending_space = false;
    out.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
  }
  return out;
}

// "(a)", "a)", "a.", "a: text", "a" -> 'a'. Nothing for words like "apple".
inline std::optional<char> leading_option_letter(const std::string& s) {
  std::size_t i = 0;
  if (i < s.size() && (s[i] == '(' || s[i] == '[')) ++i;
  if (i >= s.size() || !std::isalpha(static_cast<unsigned char>(s[i]))) return std::nullopt;
  const char letter = s[i++];
  if (i == s.size()) return letter;
  const char next = s[i];
  if (next == ')' || next == ']' || next == '.' || next == ':' || next == ' ' || next == ',') return letter;
  return std::nullopt;
}

inline double clamp01(double v) { return std::clamp(v, 0.0, 1.0); }

}  // namespace detail

/// 1 iff answers agree after lowercasing and whitespace normalization. When
/// the ground truth is a single option letter, the prediction's leading
/// option letter is compared instead.
inline double binary_reward(std::string_view answer, std::string_view truth) {
  const auto a = detail::normalize_choice(answer);
  const auto t = detail::normalize_choice(truth);
  if (a == t) return 1.0;
  if (t.size() == 1 && std::isalpha(static_cast<unsigned char>(t[0]))) {
    if (auto letter = detail::leading_option_letter(a)) return *letter == t[0] ? 1.0 : 0.0;
  }
  return 0.0;
}

inline double box_iou(const Box2& a, const Box2& b) {
  const double ix = std::max(0.0, std::min(a.x2, b.x2) - std::max(a.x1, b.x1));
  const double iy = std::max(0.0, std::min(a.y2, b.y2) - std::max(a.y1, b.y1));
  const double inter = ix * iy;
  const double uni = a.area() + b.area() - inter;
  return uni > 0 ? inter / uni : 0.0;
}

/// Mean over predicted boxes of the best IoU against any ground-truth box.
inline double miou_reward(std::span<const Box2> pred, std::span<const Box2> truth) {
  if (pred.empty() || truth.empty()) return 0.0;
  double sum = 0.0;
  for (const auto& p : pred) {
    double best = 0.0;
    for (const auto& t : truth) best = std::max(best, box_iou(p, t));
    sum += best;
  }
  return detail::clamp01(sum / static_cast<double>(pred.size()));
}

/// Hull membership for pointing. A collinear annotation falls back to a
/// 1e-3 distance tolerance around its segment.
inline double pointing_binary(Point2 pred, const Region& region) {
  if (const auto* d = std::get_if<geometry::DegenerateHull>(&region.hull))
    return geometry::distance_to_segment(pred, d->a, d->b) <= 1e-3 ? 1.0 : 0.0;
  return geometry::point_in_hull(pred, region.hull) ? 1.0 : 0.0;
}

/// Exponential decay in normalized distance to the region centroid, rescaled
/// so the image diagonal maps to 0.
inline double nndc_raw(double d) {
  const double floor = std::exp(-5.0 * std::sqrt(2.0));
  return (std::exp(-5.0 * d) - floor) / (1.0 - floor);
}

inline double nndc_reward(Point2 pred, const Region& region, bool clip_with_binary = true) {
  const double r = detail::clamp01(nndc_raw(geometry::distance(pred, region.centroid)));
  return clip_with_binary ? std::max(r, pointing_binary(pred, region)) : r;
}

/// Hull IoU of projected box corners; 0 unless both sides have exactly 8.
inline double pose_hull_iou_reward(std::span<const Point2> pred, std::span<const Point2> truth) {
  if (pred.size() != 8 || truth.size() != 8) return 0.0;
  const auto hp = geometry::convex_hull(pred);
  const auto ht = geometry::convex_hull(truth);
  const auto* a = std::get_if<ConvexPolygon>(&hp);
  const auto* b = std::get_if<ConvexPolygon>(&ht);
  if (!a || !b) return 0.0;
  return detail::clamp01(geometry::convex_iou(*a, *b));
}

inline constexpr double kDefaultDeltaMax = 10.0;

/// Mean keypoint error in gripper widths, capped at delta_max and mapped to [0,1].
inline double nnce_reward(const GraspPoints& pred, const GraspPoints& truth, double gripper_width,
                          double delta_max = kDefaultDeltaMax) {
  if (!(gripper_width > 0)) throw BadArgs("gripper width must be positive");
  if (!(delta_max > 0)) throw BadArgs("delta_max must be positive");
  const auto p = pred.as_array();
  const auto t = truth.as_array();
  double sum = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) sum += geometry::distance(p[i], t[i]) / gripper_width;
  const double mean = sum / static_cast<double>(p.size());
  return detail::clamp01(1.0 - std::min(delta_max, mean) / delta_max);
}

struct MaceScore {
  double score = 0.0;  // [0,100]
  bool success = false;
};

inline constexpr double kMaceSuccessThreshold = 40.0;

/// Four finger direction vectors: center->left base, center->right base,
/// left base->left tip, right base->right tip.
inline std::array<Point2, 4> finger_directions(const GraspPoints& g) {
  return {g.left_base - g.center, g.right_base - g.center, g.left_tip - g.left_base, g.right_tip - g.right_base};
}

/// Center error in gripper widths plus mean cosine misalignment of the finger
/// directions, reported on [0,100] after clamping to [0,1].
inline MaceScore mace_score(const GraspPoints& pred, const GraspPoints& truth, double gripper_width) {
  if (!(gripper_width > 0)) throw BadArgs("gripper width must be positive");
  const auto rp = finger_directions(pred);
  const auto rt = finger_directions(truth);
  double misalign = 0.0;
  for (int k = 0; k < 4; ++k) {
    const double np = geometry::norm(rp[k]);
    const double nt = geometry::norm(rt[k]);
    double cosine = -1.0;
    if (np > 0 && nt > 0) cosine = std::clamp(geometry::dot(rp[k], rt[k]) / (np * nt), -1.0, 1.0);
    misalign += (1.0 - cosine) / 2.0;
  }
  const double center_err = geometry::distance(pred.center, truth.center) / gripper_width;
  const double mace = 1.0 - 0.5 * (center_err + misalign / 4.0);
  const double score = 100.0 * detail::clamp01(mace);
  return {score, score > kMaceSuccessThreshold};
}

/// Signed-distance reward: 0.5 + 0.5 e^s inside, 0.5 e^-s outside.
inline double nsdh_raw(double s) { return s <= 0 ? 0.5 + 0.5 * std::exp(s) : 0.5 * std::exp(-s); }

inline double nsdh_reward(Point2 pred, const Hull& hull, bool clip_with_binary = true) {
  const auto* poly = std::get_if<ConvexPolygon>(&hull);
  if (!poly) throw BadArgs("NSDH needs a non-degenerate hull");
  const double s = geometry::signed_distance_to_hull(pred, *poly);
  const double r = detail::clamp01(nsdh_raw(s));
  return clip_with_binary ? std::max(r, geometry::point_in_hull(pred, *poly) ? 1.0 : 0.0) : r;
}

/// Area-growth reward: exp(-dA/A0) where dA is the hull area added by pred.
inline double nac_reward(Point2 pred, const Hull& hull, bool clip_with_binary = true) {
  const auto* poly = std::get_if<ConvexPolygon>(&hull);
  const double a0 = poly ? geometry::polygon_area(*poly) : 0.0;
  if (!(a0 > 0)) throw BadArgs("NAC needs a hull with positive area");
  std::vector<Point2> pts = poly->vertices;
  pts.push_back(pred);
  const double grown = geometry::polygon_area(geometry::convex_hull(std::span<const Point2>(pts)));
  const double delta = std::max(0.0, grown - a0);
  const double r = detail::clamp01(std::exp(-delta / a0));
  return clip_with_binary ? std::max(r, geometry::point_in_hull(pred, *poly) ? 1.0 : 0.0) : r;
}

enum class Tag { Think, ToolCall, Answer, Malformed };

/// 1 iff every tool_call and the single trailing answer are immediately
/// preceded by a think block (and, optionally, at least one tool_call exists).
inline double format_score(std::span<const Tag> tags, bool require_tool_call = false) {
  std::size_t answers = 0;
  std::size_t calls = 0;
  for (std::size_t i = 0; i < tags.size(); ++i) {
    switch (tags[i]) {
      case Tag::Malformed: return 0.0;
      case Tag::ToolCall:
        ++calls;
        if (i == 0 || tags[i - 1] != Tag::Think) return 0.0;
        break;
      case Tag::Answer:
        ++answers;
        if (i == 0 || tags[i - 1] != Tag::Think) return 0.0;
        break;
      case Tag::Think: break;
    }
  }
  if (answers != 1 || tags.back() != Tag::Answer) return 0.0;
  if (require_tool_call && calls == 0) return 0.0;
  return 1.0;
}

inline constexpr double kDefaultFormatLambda = 0.3;

inline double combine_with_format(double r_acc, double r_format, double lambda = kDefaultFormatLambda) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw BadArgs("lambda must lie in [0,1]");
  return r_acc + lambda * r_format;
}

}  // namespace toolshed::rewards
