// SPDX-License-Identifier: Apache-2.0
//
// Deterministic, fixture-driven stand-ins for the vision and robot tools.
// Every tool is a pure function of (fixture, request, seed); result text and
// variable names follow the real tools' published contracts.
#pragma once

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <memory>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <Eigen/Dense>

#include "toolshed/fixture.hpp"
#include "toolshed/geometry.hpp"
#include "toolshed/image.hpp"
#include "toolshed/interp.hpp"
#include "toolshed/wire.hpp"

namespace toolshed {

/// A tool-level failure the policy should see as a ToolError result.
class ToolFailure : public Error {
 public:
  using Error::Error;
};

/// Simulated crash. In-process workers treat it as fatal to the worker; the
/// worker process aborts on it.
class WorkerFault : public Error {
 public:
  using Error::Error;
};

struct ToolContext {
  std::shared_ptr<const SceneFixture> fixture;  // may be null
  std::uint64_t seed = 0;
};

using ToolFn = std::function<ToolResult(const ToolRequest&, const ToolContext&)>;

struct ToolImpl {
  ToolFn fn;
  bool wants_session = false;  // receives a snapshot of session variables in ToolRequest::session_vars
};

using Toolbox = std::map<std::string, ToolImpl>;

/// Runs a tool and maps exceptions onto result statuses. WorkerFault passes
/// through so the hosting worker can die.
inline ToolResult invoke_tool(const ToolImpl& impl, const ToolRequest& req, const ToolContext& ctx) {
  try {
    ToolResult r = impl.fn(req, ctx);
    if (r.status != Status::Ok) r.variables.clear();
    return r;
  } catch (const WorkerFault&) {
    throw;
  } catch (const BadArgs& e) {
    return ToolResult::error(Status::BadArgs, e.what());
  } catch (const ToolFailure& e) {
    return ToolResult::error(Status::ToolError, e.what());
  } catch (const std::exception& e) {
    return ToolResult::error(Status::ToolError, e.what());
  }
}

namespace tools {

// ---------------------------------------------------------------------------
// Argument access

inline std::string fmt(double v, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

inline std::string fmt_point(Point2 p) { return "(" + fmt(p.x) + ", " + fmt(p.y) + ")"; }

inline const Value* find_arg(const ToolRequest& r, const std::string& name) {
  auto it = r.args.find(name);
  return it == r.args.end() || it->second.is_null() ? nullptr : &it->second;
}

inline const Value& need_arg(const ToolRequest& r, const std::string& name) {
  if (const auto* v = find_arg(r, name)) return *v;
  throw BadArgs("missing argument '" + name + "' for " + r.tool + "." + r.method);
}

inline double as_number(const Value& v, const std::string& what) {
  if (v.is_number()) return v.as_number();
  if (v.is_string()) {
    try {
      std::size_t used = 0;
      double d = std::stod(v.as_string(), &used);
      if (used == v.as_string().size()) return d;
    } catch (const std::exception&) {
    }
  }
  throw BadArgs(what + " must be a number");
}

inline Point2 as_point(const Value& v, const std::string& what) {
  if (v.is_point()) return v.as_point();
  if (v.is_list() && v.as_list().size() == 2) return {as_number(v.as_list()[0], what), as_number(v.as_list()[1], what)};
  throw BadArgs(what + " must be an (x, y) pair");
}

inline std::vector<Point2> as_points(const Value& v, const std::string& what) {
  if (v.is_point()) return {v.as_point()};
  if (!v.is_list()) throw BadArgs(what + " must be a list of (x, y) pairs");
  std::vector<Point2> out;
  for (const auto& e : v.as_list()) out.push_back(as_point(e, what));
  return out;
}

inline void check_unit(Point2 p, const std::string& what) {
  if (!(p.x >= 0 && p.x <= 1 && p.y >= 0 && p.y <= 1))
    throw BadArgs(what + " " + fmt_point(p) + " lies outside [0,1]");
}

inline const SceneFixture& need_fixture(const ToolContext& ctx) {
  if (!ctx.fixture) throw ToolFailure("no scene fixture is bound to this session");
  return *ctx.fixture;
}

/// Explicit image argument, else the bound fixture's image.
inline AttachmentPtr image_arg(const ToolRequest& r, const ToolContext& ctx, const char* name = "image") {
  if (const auto* v = find_arg(r, name)) {
    if (!v->is_attachment() || v->as_attachment()->media != Media::RasterImage)
      throw BadArgs(std::string("'") + name + "' must be an image");
    return v->as_attachment();
  }
  return need_fixture(ctx).image_attachment;
}

inline BoolGrid mask_arg(const Value& v) {
  if (!v.is_attachment()) throw BadArgs("mask must be a boolean mask variable");
  return mask_from_attachment(*v.as_attachment());
}

inline std::vector<Point3f> cloud_arg(const Value& v) {
  if (!v.is_attachment()) throw BadArgs("point_cloud must be a point cloud variable");
  return points_from_attachment(*v.as_attachment());
}

inline std::uint32_t crop_pixel(double t, std::uint32_t n) {
  const long v = std::lround(t * n);
  return static_cast<std::uint32_t>(std::clamp<long>(v, 0, long(n) - 1));
}

inline std::uint32_t grid_pixel(double t, std::uint32_t n) {
  return static_cast<std::uint32_t>(std::lround(t * (n - 1)));
}

inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

inline std::uint64_t hash_string(std::string_view s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) h = (h ^ c) * 1099511628211ull;
  return h;
}

// ---------------------------------------------------------------------------
// Rendering helpers for the tools' image outputs.

inline void blend(RgbImage& img, std::uint32_t x, std::uint32_t y, std::array<std::uint8_t, 3> c, double alpha) {
  auto* p = img.at(x, y);
  for (int k = 0; k < 3; ++k) p[k] = static_cast<std::uint8_t>(std::lround((1 - alpha) * p[k] + alpha * c[k]));
}

inline void draw_marker(RgbImage& img, Point2 p, int radius = 3) {
  const double cx = p.x * (img.width - 1), cy = p.y * (img.height - 1);
  for (int dy = -radius - 1; dy <= radius + 1; ++dy)
    for (int dx = -radius - 1; dx <= radius + 1; ++dx) {
      const long x = std::lround(cx) + dx, y = std::lround(cy) + dy;
      if (x < 0 || y < 0 || x >= long(img.width) || y >= long(img.height)) continue;
      const double r = std::hypot(dx, dy);
      if (r <= radius) blend(img, std::uint32_t(x), std::uint32_t(y), {255, 0, 0}, 1.0);
      else if (r <= radius + 1) blend(img, std::uint32_t(x), std::uint32_t(y), {255, 255, 255}, 1.0);
    }
}

inline void draw_line(RgbImage& img, Point2 a, Point2 b, std::array<std::uint8_t, 3> c) {
  const double ax = a.x * (img.width - 1), ay = a.y * (img.height - 1);
  const double bx = b.x * (img.width - 1), by = b.y * (img.height - 1);
  const int n = 1 + static_cast<int>(std::max(std::abs(bx - ax), std::abs(by - ay)));
  for (int i = 0; i <= n; ++i) {
    const double t = double(i) / n;
    const long x = std::lround(ax + t * (bx - ax)), y = std::lround(ay + t * (by - ay));
    if (x >= 0 && y >= 0 && x < long(img.width) && y < long(img.height)) blend(img, std::uint32_t(x), std::uint32_t(y), c, 1.0);
  }
}

inline void overlay_mask(RgbImage& img, const BoolGrid& m) {
  for (std::uint32_t y = 0; y < m.height; ++y)
    for (std::uint32_t x = 0; x < m.width; ++x) {
      if (!m.at(x, y)) continue;
      const bool edge = x == 0 || y == 0 || x + 1 == m.width || y + 1 == m.height || !m.at(x - 1, y) ||
                        !m.at(x + 1, y) || !m.at(x, y - 1) || !m.at(x, y + 1);
      if (edge) blend(img, x, y, {255, 255, 255}, 1.0);
      else blend(img, x, y, {0, 200, 0}, 0.45);
    }
}

/// Near depths map to blue, far to red.
inline RgbImage colorize_depth(const FloatGrid& d) {
  RgbImage img{d.width, d.height, std::vector<std::uint8_t>(3ull * d.width * d.height)};
  float lo = std::numeric_limits<float>::infinity(), hi = -lo;
  for (float v : d.data)
    if (std::isfinite(v)) lo = std::min(lo, v), hi = std::max(hi, v);
  const float span = hi > lo ? hi - lo : 1.0f;
  for (std::size_t i = 0; i < d.data.size(); ++i) {
    const float t = std::isfinite(d.data[i]) ? (d.data[i] - lo) / span : 0.0f;
    img.pixels[3 * i] = static_cast<std::uint8_t>(std::lround(255 * t));
    img.pixels[3 * i + 1] = static_cast<std::uint8_t>(std::lround(255 * (1 - std::abs(2 * t - 1)) * 0.8));
    img.pixels[3 * i + 2] = static_cast<std::uint8_t>(std::lround(255 * (1 - t)));
  }
  return img;
}

// ---------------------------------------------------------------------------
// image_ops

inline ToolResult image_value_at(const ToolRequest& r, const ToolContext& ctx) {
  const double x = as_number(need_arg(r, "x"), "x"), y = as_number(need_arg(r, "y"), "y");
  check_unit({x, y}, "coordinate");
  const Value* data = find_arg(r, "data");
  if (!data) data = find_arg(r, "image");
  Value out;
  std::string label;
  std::uint32_t w = 0, h = 0;
  if (!data) {
    const auto& f = need_fixture(ctx);
    data = nullptr;
    label = "image";
    w = f.image.width, h = f.image.height;
    const auto* p = f.image.at(grid_pixel(x, w), grid_pixel(y, h));
    out = Value::List{double(p[0]), double(p[1]), double(p[2])};
  } else if (data->is_attachment()) {
    const auto& a = *data->as_attachment();
    label = a.name;
    w = a.width, h = a.height;
    if (w == 0 || h == 0) throw BadArgs("data must be a non-empty grid or image");
    const auto col = grid_pixel(x, w), row = grid_pixel(y, h);
    switch (a.media) {
      case Media::Float32Grid: out = double(grid_from_attachment(a).at(col, row)); break;
      case Media::BoolMaskRLE: out = mask_from_attachment(a).at(col, row); break;
      case Media::RasterImage: {
        const auto* p = a.bytes.data() + 3 * (std::size_t(row) * w + col);
        out = Value::List{double(p[0]), double(p[1]), double(p[2])};
        break;
      }
      default: throw BadArgs("data must be a 2D grid or image");
    }
  } else if (data->is_list()) {
    const auto& rows = data->as_list();
    if (rows.empty() || !rows[0].is_list() || rows[0].as_list().empty()) throw BadArgs("data must be a non-empty 2D list");
    h = static_cast<std::uint32_t>(rows.size());
    w = static_cast<std::uint32_t>(rows[0].as_list().size());
    const auto& row = rows[grid_pixel(y, h)];
    if (!row.is_list() || row.as_list().size() != w) throw BadArgs("data rows must have equal length");
    out = row.as_list()[grid_pixel(x, w)];
    label = "data";
  } else {
    throw BadArgs("data must be a grid, mask, image or 2D list");
  }
  const auto col = grid_pixel(x, w), row = grid_pixel(y, h);
  ToolResult res = ToolResult::ok("Value of " + label + " (" + std::to_string(w) + "x" + std::to_string(h) +
                                  ") at (x=" + fmt(x) + ", y=" + fmt(y) + ") -> pixel (col " + std::to_string(col) +
                                  ", row " + std::to_string(row) + "): " + interp::format_value(out));
  return res;
}

inline ToolResult point_crop(const ToolRequest& r, const ToolContext& ctx) {
  const auto img = image_from_attachment(*image_arg(r, ctx));
  const auto pts = as_points(need_arg(r, "points"), "points");
  if (pts.empty()) throw BadArgs("points must not be empty");
  std::uint32_t x0 = img.width, y0 = img.height, x1 = 0, y1 = 0;
  for (auto p : pts) {
    check_unit(p, "point");
    const auto px = crop_pixel(p.x, img.width), py = crop_pixel(p.y, img.height);
    x0 = std::min(x0, px), x1 = std::max(x1, px), y0 = std::min(y0, py), y1 = std::max(y1, py);
  }
  RgbImage crop{x1 - x0 + 1, y1 - y0 + 1, {}};
  for (auto y = y0; y <= y1; ++y) crop.pixels.insert(crop.pixels.end(), img.at(x0, y), img.at(x1, y) + 3);
  ToolResult res = ToolResult::ok("Cropped to box (x1=" + std::to_string(x0) + ", y1=" + std::to_string(y0) +
                                  ", x2=" + std::to_string(x1) + ", y2=" + std::to_string(y1) + ") px, size " +
                                  std::to_string(crop.width) + "x" + std::to_string(crop.height) + " from " +
                                  std::to_string(pts.size()) + " point(s)");
  res.image = make_image_attachment("cropped_image", crop);
  res.variables["cropped_image"] = res.image;
  return res;
}

inline ToolResult mask_crop(const ToolRequest& r, const ToolContext& ctx) {
  const auto img = image_from_attachment(*image_arg(r, ctx));
  const auto m = mask_arg(need_arg(r, "mask"));
  if (m.width != img.width || m.height != img.height)
    throw BadArgs("mask is " + std::to_string(m.width) + "x" + std::to_string(m.height) + " but image is " +
                  std::to_string(img.width) + "x" + std::to_string(img.height));
  std::uint32_t x0 = m.width, y0 = m.height, x1 = 0, y1 = 0;
  std::size_t count = 0;
  for (std::uint32_t y = 0; y < m.height; ++y)
    for (std::uint32_t x = 0; x < m.width; ++x)
      if (m.at(x, y)) {
        ++count;
        x0 = std::min(x0, x), x1 = std::max(x1, x), y0 = std::min(y0, y), y1 = std::max(y1, y);
      }
  if (count == 0) throw ToolFailure("empty mask");
  RgbImage crop{x1 - x0 + 1, y1 - y0 + 1, {}};
  for (auto y = y0; y <= y1; ++y)
    for (auto x = x0; x <= x1; ++x) {
      const auto* p = img.at(x, y);
      if (m.at(x, y)) crop.pixels.insert(crop.pixels.end(), p, p + 3);
      else crop.pixels.insert(crop.pixels.end(), {255, 255, 255});
    }
  const double coverage = 100.0 * double(count) / double(m.cells.size());
  ToolResult res = ToolResult::ok("Masked crop box (x1=" + std::to_string(x0) + ", y1=" + std::to_string(y0) +
                                  ", x2=" + std::to_string(x1) + ", y2=" + std::to_string(y1) + ") px, size " +
                                  std::to_string(crop.width) + "x" + std::to_string(crop.height) +
                                  ", mask coverage " + fmt(coverage, 1) + "%");
  res.image = make_image_attachment("masked_crop", crop);
  res.variables["masked_crop"] = res.image;
  return res;
}

inline ToolResult image_ops(const ToolRequest& r, const ToolContext& ctx) {
  if (r.method == "point_crop") {
    // Two published signatures share this name; the arguments pick one.
    if (find_arg(r, "points")) return point_crop(r, ctx);
    return image_value_at(r, ctx);
  }
  if (r.method == "image_value_at" || r.method == "value_at") return image_value_at(r, ctx);
  if (r.method == "mask_crop") return mask_crop(r, ctx);
  return ToolResult::error(Status::UnknownTool, "image_ops has no method '" + r.method + "'");
}

// ---------------------------------------------------------------------------
// sam2

inline Point2 mask_centroid(const BoolGrid& m) {
  double sx = 0, sy = 0;
  std::size_t n = 0;
  for (std::uint32_t y = 0; y < m.height; ++y)
    for (std::uint32_t x = 0; x < m.width; ++x)
      if (m.at(x, y)) sx += x, sy += y, ++n;
  if (n == 0) return {0.5, 0.5};
  return {sx / n / std::max<std::uint32_t>(1, m.width - 1), sy / n / std::max<std::uint32_t>(1, m.height - 1)};
}

struct SegmentPick {
  std::string object;
  const BoolGrid* mask = nullptr;
  double iou = 0;
};

/// Mask containing the click, else the mask whose centroid is nearest.
inline SegmentPick pick_mask(const SceneFixture& f, Point2 click) {
  SegmentPick best;
  double best_d = std::numeric_limits<double>::infinity();
  for (const auto& [name, o] : f.objects) {
    if (!o.mask) continue;
    const auto& m = *o.mask;
    if (m.at(grid_pixel(click.x, m.width), grid_pixel(click.y, m.height))) return {name, &m, 1.0};
    const double d = geometry::distance(click, mask_centroid(m));
    if (d < best_d) best_d = d, best = {name, &m, std::exp(-5 * d)};
  }
  if (!best.mask) throw ToolFailure("no segmentable objects");
  return best;
}

inline ToolResult sam2(const ToolRequest& r, const ToolContext& ctx) {
  std::vector<Point2> pts;
  if (r.method == "segment_from_point") {
    pts.push_back({as_number(need_arg(r, "x"), "x"), as_number(need_arg(r, "y"), "y")});
  } else if (r.method == "segment_from_points") {
    pts = as_points(need_arg(r, "points"), "points");
    if (pts.empty()) throw BadArgs("points must not be empty");
  } else {
    return ToolResult::error(Status::UnknownTool, "sam2 has no method '" + r.method + "'");
  }
  for (auto p : pts) check_unit(p, "point");
  auto img_att = image_arg(r, ctx);
  const auto& f = need_fixture(ctx);
  const auto pick = pick_mask(f, pts.front());
  if (pick.mask->width != img_att->width || pick.mask->height != img_att->height)
    throw ToolFailure("fixture masks do not match the supplied image size");
  auto view = image_from_attachment(*img_att);
  overlay_mask(view, *pick.mask);
  for (auto p : pts) draw_marker(view, p);
  std::string text;
  if (pts.size() == 1 && r.method == "segment_from_point") {
    text = "Segmented object at click (x=" + fmt(pts[0].x) + ", y=" + fmt(pts[0].y) + "); IoU score: " + fmt(pick.iou, 3);
  } else {
    text = "Segmented object from " + std::to_string(pts.size()) + " point(s); best IoU score: " + fmt(pick.iou, 3);
  }
  ToolResult res = ToolResult::ok(text);
  res.image = make_image_attachment("sam2_view", view);
  res.variables["segmentation_mask"] = make_mask_attachment("segmentation_mask", *pick.mask);
  return res;
}

// ---------------------------------------------------------------------------
// point1 / point2

inline std::set<std::string> name_tokens(std::string_view s) {
  std::set<std::string> out;
  std::string cur;
  for (char c : s) {
    if (std::isalnum(static_cast<unsigned char>(c))) {
      cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    } else if (!cur.empty()) {
      out.insert(cur);
      cur.clear();
    }
  }
  if (!cur.empty()) out.insert(cur);
  return out;
}

/// Largest lowercase token overlap; ties go to the lexicographically first name.
inline const std::pair<const std::string, ObjectAnnotation>* fuzzy_find(const SceneFixture& f, std::string_view query) {
  const auto q = name_tokens(query);
  const std::pair<const std::string, ObjectAnnotation>* best = nullptr;
  std::size_t best_score = 0;
  for (const auto& entry : f.objects) {
    if (entry.second.points.empty()) continue;
    std::size_t score = 0;
    for (const auto& t : name_tokens(entry.first)) score += q.count(t);
    if (score > best_score) best_score = score, best = &entry;
  }
  return best;
}

inline constexpr double kPoint2Jitter = 0.01;

inline ToolResult detect(const ToolRequest& r, const ToolContext& ctx) {
  const bool all = r.method == "detect_all";
  if (!all && r.method != "detect_one")
    return ToolResult::error(Status::UnknownTool, r.tool + " has no method '" + r.method + "'");
  const auto& name_v = need_arg(r, "obj_name");
  if (!name_v.is_string() || name_v.as_string().empty()) throw BadArgs("obj_name must be a non-empty string");
  const std::string& obj = name_v.as_string();
  auto img_att = image_arg(r, ctx);
  const auto& f = need_fixture(ctx);
  const auto* hit = fuzzy_find(f, obj);
  if (!hit) throw ToolFailure("not found: " + obj);
  std::vector<Point2> pts = hit->second.points;
  if (!all) pts.resize(1);
  if (r.tool == "point2") {
    for (std::size_t i = 0; i < pts.size(); ++i) {
      std::uint64_t h = mix64(r.seed ^ mix64(f.noise_seed ^ hash_string(hit->first)) ^ (i * 0x51ed27u));
      auto jitter = [&](std::uint64_t k) {
        const double u = double(mix64(h + k) >> 11) / double(1ull << 53);
        return kPoint2Jitter * (2 * u - 1);
      };
      pts[i] = {std::clamp(pts[i].x + jitter(1), 0.0, 1.0), std::clamp(pts[i].y + jitter(2), 0.0, 1.0)};
    }
  }
  auto view = image_from_attachment(*img_att);
  for (auto p : pts) draw_marker(view, p);
  const std::string var = variable_name_for(obj) + (all ? "_detections" : "_detection");
  std::string text = "Detected '" + obj + "': " + std::to_string(hit->second.points.size()) + " instance(s); ";
  ToolResult res;
  if (all) {
    text += "points: [";
    Value::List l;
    for (std::size_t i = 0; i < pts.size(); ++i) {
      text += (i ? ", " : "") + fmt_point(pts[i]);
      l.push_back(pts[i]);
    }
    text += "]";
    res = ToolResult::ok(text);
    res.variables[var] = l;
  } else {
    res = ToolResult::ok(text + "point: " + fmt_point(pts[0]));
    res.variables[var] = pts[0];
  }
  res.image = make_image_attachment(r.tool + "_view", view);
  return res;
}

// ---------------------------------------------------------------------------
// depth

inline std::vector<Point3f> backproject(const FloatGrid& d, double f) {
  std::vector<Point3f> out;
  out.reserve(d.data.size());
  const double cx = d.width / 2.0, cy = d.height / 2.0;
  for (std::uint32_t v = 0; v < d.height; ++v)
    for (std::uint32_t u = 0; u < d.width; ++u) {
      const double z = d.at(u, v);
      out.push_back({float((u - cx) * z / f), float((v - cy) * z / f), float(z)});
    }
  return out;
}

inline ToolResult depth_result(const SceneFixture& f, bool with_cloud) {
  if (!f.depth || !f.focal_length_px) throw ToolFailure("no depth available");
  const auto& d = *f.depth;
  double lo = std::numeric_limits<double>::infinity(), hi = -lo, sum = 0;
  for (float v : d.data) lo = std::min<double>(lo, v), hi = std::max<double>(hi, v), sum += v;
  std::string text = "Image size: " + std::to_string(d.width) + "x" + std::to_string(d.height) +
                     "; focal length: " + fmt(*f.focal_length_px, 2) + " px; depth range: min " + fmt(lo, 3) +
                     " m, max " + fmt(hi, 3) + " m, mean " + fmt(sum / double(d.data.size()), 3) + " m";
  ToolResult res;
  ValueMap vars;
  vars["depth_map"] = make_grid_attachment("depth_map", d);
  vars["focal_length_px"] = *f.focal_length_px;
  if (with_cloud) {
    auto pc = backproject(d, *f.focal_length_px);
    text += "; point cloud: " + std::to_string(pc.size()) + " points";
    vars["point_cloud"] = make_points_attachment("point_cloud", pc);
  }
  res = ToolResult::ok(text);
  res.image = make_image_attachment("depth_view", colorize_depth(d));
  res.variables = std::move(vars);
  return res;
}

inline ToolResult depth_estimator(const ToolRequest& r, const ToolContext& ctx) {
  if (r.method != "estimate_depth" && r.method != "estimate_depth_with_pointcloud")
    return ToolResult::error(Status::UnknownTool, "depth_estimator has no method '" + r.method + "'");
  image_arg(r, ctx);
  return depth_result(need_fixture(ctx), r.method == "estimate_depth_with_pointcloud");
}

// ---------------------------------------------------------------------------
// grasp_generator / 3d_bbox

struct MaskedCloud {
  std::vector<geometry::Vec3> points;
  std::vector<double> depths;
  BoolGrid mask;
};

inline MaskedCloud masked_points(const ToolRequest& r) {
  const auto pc = cloud_arg(need_arg(r, "point_cloud"));
  MaskedCloud out;
  out.mask = mask_arg(need_arg(r, "mask"));
  if (pc.size() != out.mask.cells.size())
    throw BadArgs("point_cloud has " + std::to_string(pc.size()) + " points but mask has " +
                  std::to_string(out.mask.cells.size()) + " cells");
  for (std::size_t i = 0; i < pc.size(); ++i) {
    if (!out.mask.cells[i]) continue;
    const auto& p = pc[i];
    if (!std::isfinite(p.x) || !std::isfinite(p.y) || !(p.z > 0)) continue;
    out.points.push_back({p.x, p.y, p.z});
    out.depths.push_back(p.z);
  }
  return out;
}

inline std::string fmt_vec(std::initializer_list<double> v, int digits = 4) {
  std::string s = "[";
  bool first = true;
  for (double x : v) s += (first ? "" : ", ") + fmt(x, digits), first = false;
  return s + "]";
}

/// 4x4 pose as nested lists.
inline Value pose_value(const Eigen::Matrix4d& m) {
  Value::List rows;
  for (int i = 0; i < 4; ++i) rows.push_back(Value::List{m(i, 0), m(i, 1), m(i, 2), m(i, 3)});
  return rows;
}

inline Eigen::Matrix4d pose_from_value(const Value& v) {
  if (!v.is_list() || v.as_list().size() != 4) throw BadArgs("grasp_pose must be a 4x4 matrix");
  Eigen::Matrix4d m;
  for (int i = 0; i < 4; ++i) {
    const auto& row = v.as_list()[i];
    if (!row.is_list() || row.as_list().size() != 4) throw BadArgs("grasp_pose must be a 4x4 matrix");
    for (int j = 0; j < 4; ++j) m(i, j) = as_number(row.as_list()[j], "grasp_pose entry");
  }
  return m;
}

inline ToolResult compute_grasp(const ToolRequest& r, const ToolContext& ctx) {
  auto mc = masked_points(r);
  const double f = as_number(need_arg(r, "focal_length_px"), "focal_length_px");
  if (!(f > 0)) throw BadArgs("focal_length_px must be positive");
  auto img_att = image_arg(r, ctx);
  const auto& fx = need_fixture(ctx);
  // The fixture object that overlaps the mask most owns the grasp.
  const std::pair<const std::string, ObjectAnnotation>* owner = nullptr;
  std::size_t best = 0;
  for (const auto& entry : fx.objects) {
    if (!entry.second.mask || entry.second.mask->cells.size() != mc.mask.cells.size()) continue;
    std::size_t overlap = 0;
    for (std::size_t i = 0; i < mc.mask.cells.size(); ++i) overlap += mc.mask.cells[i] && entry.second.mask->cells[i];
    if (overlap > best) best = overlap, owner = &entry;
  }
  if (!owner || !owner->second.grasp || mc.depths.empty()) throw ToolFailure("no feasible grasp");
  const auto& g = *owner->second.grasp;
  auto depths = mc.depths;
  std::nth_element(depths.begin(), depths.begin() + depths.size() / 2, depths.end());
  const double z = depths[depths.size() / 2];
  const double W = mc.mask.width, H = mc.mask.height;
  const Eigen::Vector3d t((g.points.center.x * W - W / 2) * z / f, (g.points.center.y * H - H / 2) * z / f, z);
  const Eigen::Vector3d zaxis = t.normalized();
  const Point2 fd = g.points.right_base - g.points.left_base;
  Eigen::Vector3d xaxis(fd.x * W, fd.y * H, 0.0);
  xaxis -= xaxis.dot(zaxis) * zaxis;
  if (xaxis.norm() < 1e-12) xaxis = Eigen::Vector3d::UnitX() - zaxis.x() * zaxis;
  xaxis.normalize();
  const Eigen::Vector3d yaxis = zaxis.cross(xaxis);
  Eigen::Matrix4d pose = Eigen::Matrix4d::Identity();
  pose.block<3, 1>(0, 0) = xaxis;
  pose.block<3, 1>(0, 1) = yaxis;
  pose.block<3, 1>(0, 2) = zaxis;
  pose.block<3, 1>(0, 3) = t;

  auto view = image_from_attachment(*img_att);
  draw_line(view, g.points.center, g.points.right_base, {255, 0, 0});
  draw_line(view, g.points.center, g.points.center + Point2{-(fd.y), fd.x}, {0, 255, 0});
  draw_marker(view, g.points.center, 1);
  const auto& p = g.points;
  ToolResult res = ToolResult::ok(
      "Grasp confidence: 0.900; generated grasps: 64; collision-free: 100.0%; best grasp gripper points "
      "(normalized): center " + fmt_point(p.center) + ", left_base " + fmt_point(p.left_base) + ", right_base " +
      fmt_point(p.right_base) + ", left_tip " + fmt_point(p.left_tip) + ", right_tip " + fmt_point(p.right_tip));
  res.image = make_image_attachment("grasp_view", view);
  res.variables["grasp_pose"] = pose_value(pose);
  return res;
}

inline ToolResult compute_bbox(const ToolRequest& r, const ToolContext&) {
  auto mc = masked_points(r);
  const double f = as_number(need_arg(r, "focal_length_px"), "focal_length_px");
  if (!(f > 0)) throw BadArgs("focal_length_px must be positive");
  if (mc.points.size() < 4) throw ToolFailure("degenerate point set");
  const auto box = geometry::pca_obb(mc.points);
  if (box.degenerate) throw ToolFailure("degenerate point set");
  const auto corners = box.corners();
  const auto uv = geometry::project_points(corners, f, mc.mask.width, mc.mask.height);
  Value::List c3, c2, edges;
  std::string t3, t2, te;
  for (int i = 0; i < 8; ++i) {
    c3.push_back(Value::List{corners[i].x, corners[i].y, corners[i].z});
    c2.push_back(Value::List{uv[i].x, uv[i].y});
    t3 += (i ? ", " : "") + fmt_vec({corners[i].x, corners[i].y, corners[i].z});
    t2 += (i ? ", " : "") + fmt_vec({uv[i].x, uv[i].y});
  }
  bool first = true;
  for (auto [a, b] : geometry::OrientedBox3::edges()) {
    edges.push_back(Value::List{double(a), double(b)});
    te += (first ? "" : ", ") + ("[" + std::to_string(a) + ", " + std::to_string(b) + "]");
    first = false;
  }
  ToolResult res = ToolResult::ok(
      "Input points: " + std::to_string(mc.points.size()) + "; mask shape: " + std::to_string(mc.mask.height) + "x" +
      std::to_string(mc.mask.width) + "; extent (m): " + fmt_vec({box.extent.x, box.extent.y, box.extent.z}) +
      "; corners 3d (m): [" + t3 + "]; corners 2d (normalized): [" + t2 + "]; edges: [" + te + "]");
  res.variables["obb_corners_3d"] = c3;
  res.variables["obb_corners_2d"] = c2;
  res.variables["extent"] = Value::List{box.extent.x, box.extent.y, box.extent.z};
  res.variables["edges"] = edges;
  return res;
}

// ---------------------------------------------------------------------------
// code_executor

inline ToolResult code_executor(const ToolRequest& r, const ToolContext&) {
  const bool exec = r.method == "exec";
  if (!exec && r.method != "eval")
    return ToolResult::error(Status::UnknownTool, "code_executor has no method '" + r.method + "'");
  const Value& src = need_arg(r, exec ? "code" : "expression");
  if (!src.is_string()) throw BadArgs(std::string(exec ? "code" : "expression") + " must be a string");
  auto o = interp::run(src.as_string(), exec, r.session_vars);
  std::string text = "Result: " + (o.result ? interp::format_value(*o.result) : std::string("None"));
  text += "\nstdout:\n" + o.out + "stderr:\n" + o.err;
  ToolResult res;
  ValueMap vars;
  if (o.result) {
    const std::string name = exec ? "last_exec_result" : "last_eval_result";
    vars[name] = *o.result;
    text += "\nStored variable: " + name;
  }
  for (auto& [k, v] : o.assigned) {
    if (v.is_null()) continue;
    vars[k] = v;
  }
  if (!o.assigned.empty()) {
    text += "\nAssigned:";
    for (const auto& [k, v] : o.assigned) text += " " + k;
  }
  res = ToolResult::ok(text);
  res.variables = std::move(vars);
  return res;
}

// ---------------------------------------------------------------------------
// robots

inline void check_rigid(const Eigen::Matrix4d& m) {
  const Eigen::Matrix3d R = m.block<3, 3>(0, 0);
  const double err = (R.transpose() * R - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff();
  if (err > 1e-6 || R.determinant() < 0) throw BadArgs("grasp_pose is not a rigid transform");
  if (std::abs(m(3, 0)) + std::abs(m(3, 1)) + std::abs(m(3, 2)) > 1e-9 || std::abs(m(3, 3) - 1) > 1e-9)
    throw BadArgs("grasp_pose last row must be [0, 0, 0, 1]");
}

inline ToolResult mock_robot(const ToolRequest& r, const ToolContext& ctx) {
  const auto& m = r.method;
  if (m == "capture_image") {
    const auto& f = need_fixture(ctx);
    ToolResult res = ToolResult::ok("Captured image " + std::to_string(f.image.width) + "x" +
                                    std::to_string(f.image.height) + " from mock camera; status: ok");
    res.image = make_image_attachment("captured_image", f.image);
    res.variables["captured_image"] = res.image;
    return res;
  }
  if (m == "get_depth" || m == "get_depth_with_pointcloud") return depth_result(need_fixture(ctx), m == "get_depth_with_pointcloud");
  if (m == "execute_grasp") {
    check_rigid(pose_from_value(need_arg(r, "grasp_pose")));
    return ToolResult::ok("Grasp executed successfully (success: True, execution_time_s: 0.0)");
  }
  if (m == "place_object_at_2d_location") {
    const Point2 p = as_point(need_arg(r, "point_2d"), "point_2d");
    check_unit(p, "point_2d");
    std::string text = "Object placed successfully at 2D location " + fmt_point(p);
    if (ctx.fixture && ctx.fixture->depth && ctx.fixture->focal_length_px) {
      const auto& d = *ctx.fixture->depth;
      const double z = d.at(crop_pixel(p.x, d.width), crop_pixel(p.y, d.height));
      const double fpx = *ctx.fixture->focal_length_px;
      text += ", converted by ray to 3D location " +
              fmt_vec({(p.x * d.width - d.width / 2.0) * z / fpx, (p.y * d.height - d.height / 2.0) * z / fpx, z});
    }
    return ToolResult::ok(text + " (success: True, execution_time_s: 0.0)");
  }
  if (m == "place_object_at_3d_location") {
    const auto& v = need_arg(r, "point_3d");
    if (!v.is_list() || v.as_list().size() != 3) throw BadArgs("point_3d must be [x, y, z]");
    const double x = as_number(v.as_list()[0], "point_3d"), y = as_number(v.as_list()[1], "point_3d"),
                 z = as_number(v.as_list()[2], "point_3d");
    return ToolResult::ok("Object placed successfully at 3D location " + fmt_vec({x, y, z}) +
                          " (success: True, execution_time_s: 0.0)");
  }
  return ToolResult::error(Status::UnknownTool, r.tool + " has no method '" + m + "'");
}

inline ToolResult robot_stub(const ToolRequest& r, const ToolContext&) {
  static const std::set<std::string> methods{"capture_image", "get_depth", "get_depth_with_pointcloud", "execute_grasp",
                                             "place_object_at_2d_location", "place_object_at_3d_location"};
  if (!methods.count(r.method)) return ToolResult::error(Status::UnknownTool, "robot has no method '" + r.method + "'");
  throw ToolFailure("NotConfigured: no robot driver is attached");
}

// ---------------------------------------------------------------------------
// diag: test-only helpers for the registry.

inline ToolResult diag(const ToolRequest& r, const ToolContext&) {
  if (r.method == "sleep") {
    const double ms = as_number(need_arg(r, "ms"), "ms");
    std::this_thread::sleep_for(std::chrono::microseconds(static_cast<long long>(ms * 1000)));
    ToolResult res = ToolResult::ok("slept " + fmt(ms, 1) + " ms");
    if (const auto* tag = find_arg(r, "tag")) res.text += " tag=" + interp::format_value(*tag);
    return res;
  }
  if (r.method == "fault") throw WorkerFault("injected fault");
  if (r.method == "echo") {
    ToolResult res = ToolResult::ok("echo");
    for (const auto& [k, v] : r.args) res.variables[k] = v;
    return res;
  }
  return ToolResult::error(Status::UnknownTool, "diag has no method '" + r.method + "'");
}

}  // namespace tools

enum class RobotMode { Mock, LiveStub };

/// The full catalogue of mock tools, keyed by tool name.
inline Toolbox make_mock_toolbox(RobotMode robot = RobotMode::LiveStub) {
  Toolbox tb;
  tb["image_ops"] = {tools::image_ops, false};
  tb["sam2"] = {tools::sam2, false};
  tb["point1"] = {tools::detect, false};
  tb["point2"] = {tools::detect, false};
  tb["depth_estimator"] = {tools::depth_estimator, false};
  tb["grasp_generator"] = {[](const ToolRequest& r, const ToolContext& c) {
                             if (r.method != "compute_grasp")
                               return ToolResult::error(Status::UnknownTool, "grasp_generator has no method '" + r.method + "'");
                             return tools::compute_grasp(r, c);
                           },
                           false};
  tb["3d_bbox"] = {[](const ToolRequest& r, const ToolContext& c) {
                     if (r.method != "compute_bbox")
                       return ToolResult::error(Status::UnknownTool, "3d_bbox has no method '" + r.method + "'");
                     return tools::compute_bbox(r, c);
                   },
                   false};
  tb["code_executor"] = {tools::code_executor, true};
  tb["mock_robot"] = {tools::mock_robot, false};
  tb["robot"] = robot == RobotMode::Mock ? ToolImpl{tools::mock_robot, false} : ToolImpl{tools::robot_stub, false};
  tb["diag"] = {tools::diag, false};
  return tb;
}

}  // namespace toolshed
