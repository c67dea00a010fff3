// SPDX-License-Identifier: Apache-2.0
//
// Scene fixtures: the ground truth behind every mock tool and reward.
//
// A dataset is a directory holding manifest.jsonl (one fixture per line), the
// PNG images it references, and optional "DPTH" depth files:
//   "DPTH" | u32 W | u32 H | f32 focal_length_px | W*H f32, little-endian.
#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "toolshed/error.hpp"
#include "toolshed/geometry.hpp"
#include "toolshed/image.hpp"
#include "toolshed/rewards.hpp"
#include "toolshed/value.hpp"

namespace toolshed {

using json = nlohmann::json;

struct GraspKeypoints {
  rewards::GraspPoints points;
  double gripper_width = 0.0;  // normalized image units

  friend bool operator==(const GraspKeypoints&, const GraspKeypoints&) = default;
};

struct ObjectAnnotation {
  std::vector<Point2> points;
  std::optional<BoolGrid> mask;
  std::optional<geometry::OrientedBox3> box3d;
  std::optional<GraspKeypoints> grasp;
};

enum class TaskKind { Choice, Boxes, Point, Pose, Grasp };

inline std::string_view to_string(TaskKind t) {
  switch (t) {
    case TaskKind::Choice: return "choice";
    case TaskKind::Boxes: return "boxes";
    case TaskKind::Point: return "point";
    case TaskKind::Pose: return "pose";
    case TaskKind::Grasp: return "grasp";
  }
  return "choice";
}

inline TaskKind task_from_string(std::string_view s) {
  if (s == "choice") return TaskKind::Choice;
  if (s == "boxes") return TaskKind::Boxes;
  if (s == "point") return TaskKind::Point;
  if (s == "pose") return TaskKind::Pose;
  if (s == "grasp") return TaskKind::Grasp;
  throw LoadError("unknown task kind: " + std::string(s));
}

/// Ground truth for one question. Only the member matching `task` is used.
struct GroundTruth {
  TaskKind task = TaskKind::Choice;
  std::string choice;
  std::vector<rewards::Box2> boxes;
  std::optional<rewards::Region> region;
  std::vector<Point2> corners;
  std::optional<GraspKeypoints> grasp;
};

struct SceneFixture {
  std::string id;
  std::string question;
  RgbImage image;
  AttachmentPtr image_attachment;  // shared "image" attachment handed to tools
  std::optional<FloatGrid> depth;
  std::optional<double> focal_length_px;
  std::map<std::string, ObjectAnnotation> objects;
  GroundTruth truth;
  std::uint64_t noise_seed = 0;
};

using FixtureIndex = std::map<std::string, std::shared_ptr<const SceneFixture>>;

// ---------------------------------------------------------------------------
// Depth files

struct DepthFile {
  FloatGrid grid;
  float focal_length_px = 0;
};

inline std::vector<std::uint8_t> encode_dpth(const DepthFile& d) {
  std::vector<std::uint8_t> out{'D', 'P', 'T', 'H'};
  put_u32(out, d.grid.width);
  put_u32(out, d.grid.height);
  put_f32(out, d.focal_length_px);
  for (float f : d.grid.data) put_f32(out, f);
  return out;
}

inline DepthFile decode_dpth(std::span<const std::uint8_t> b) {
  if (b.size() < 16 || std::memcmp(b.data(), "DPTH", 4) != 0) throw LoadError("not a DPTH file");
  DepthFile d;
  d.grid.width = get_u32(b.data() + 4);
  d.grid.height = get_u32(b.data() + 8);
  d.focal_length_px = get_f32(b.data() + 12);
  const std::size_t n = std::size_t(d.grid.width) * d.grid.height;
  if (b.size() != 16 + 4 * n) throw LoadError("DPTH payload length does not match W*H");
  d.grid.data.resize(n);
  for (std::size_t i = 0; i < n; ++i) d.grid.data[i] = get_f32(b.data() + 16 + 4 * i);
  return d;
}

// ---------------------------------------------------------------------------
// JSON helpers shared by the manifest reader and writer.

namespace fixture_detail {

inline Point2 point_from(const json& j) {
  if (!j.is_array() || j.size() != 2) throw LoadError("expected [x, y]");
  return {j[0].get<double>(), j[1].get<double>()};
}

inline json point_to(Point2 p) { return json::array({p.x, p.y}); }

inline std::vector<Point2> points_from(const json& j) {
  std::vector<Point2> out;
  for (const auto& e : j) out.push_back(point_from(e));
  return out;
}

inline json points_to(const std::vector<Point2>& pts) {
  json a = json::array();
  for (auto p : pts) a.push_back(point_to(p));
  return a;
}

inline geometry::Vec3 vec3_from(const json& j) {
  if (!j.is_array() || j.size() != 3) throw LoadError("expected [x, y, z]");
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}

inline json vec3_to(const geometry::Vec3& v) { return json::array({v.x, v.y, v.z}); }

inline GraspKeypoints grasp_from(const json& j) {
  GraspKeypoints g;
  g.points.center = point_from(j.at("center"));
  g.points.left_base = point_from(j.at("left_base"));
  g.points.right_base = point_from(j.at("right_base"));
  g.points.left_tip = point_from(j.at("left_tip"));
  g.points.right_tip = point_from(j.at("right_tip"));
  g.gripper_width = j.at("width").get<double>();
  return g;
}

inline json grasp_to(const GraspKeypoints& g) {
  return {{"center", point_to(g.points.center)},     {"left_base", point_to(g.points.left_base)},
          {"right_base", point_to(g.points.right_base)}, {"left_tip", point_to(g.points.left_tip)},
          {"right_tip", point_to(g.points.right_tip)},   {"width", g.gripper_width}};
}

inline bool in_unit(Point2 p) { return p.x >= 0 && p.x <= 1 && p.y >= 0 && p.y <= 1; }

}  // namespace fixture_detail

/// Reads one manifest line. Files are resolved relative to `dir`.
inline SceneFixture fixture_from_json(const json& j, const std::filesystem::path& dir) {
  using namespace fixture_detail;
  SceneFixture f;
  f.id = j.at("id").get<std::string>();
  f.question = j.value("question", "");
  f.noise_seed = j.value("noise_seed", std::uint64_t{0});
  f.image = decode_png(read_file_bytes(dir / j.at("image").get<std::string>()));
  f.image_attachment = make_image_attachment("image", f.image);
  if (j.contains("depth")) {
    auto d = decode_dpth(read_file_bytes(dir / j.at("depth").get<std::string>()));
    f.depth = std::move(d.grid);
    f.focal_length_px = d.focal_length_px;
  }
  const json objects = j.value("objects", json::object());
  for (const auto& [name, o] : objects.items()) {
    ObjectAnnotation a;
    a.points = points_from(o.value("points", json::array()));
    if (o.contains("mask")) {
      const auto& m = o.at("mask");
      auto runs = m.at("rle").get<std::vector<std::uint32_t>>();
      a.mask = rle_decode(runs, m.at("width").get<std::uint32_t>(), m.at("height").get<std::uint32_t>());
    }
    if (o.contains("box3d")) {
      const auto& b = o.at("box3d");
      geometry::OrientedBox3 box;
      box.center = vec3_from(b.at("center"));
      for (int k = 0; k < 3; ++k) box.axes[k] = vec3_from(b.at("axes").at(k));
      box.extent = vec3_from(b.at("extent"));
      a.box3d = box;
    }
    if (o.contains("grasp")) a.grasp = grasp_from(o.at("grasp"));
    f.objects.emplace(name, std::move(a));
  }
  const auto& t = j.at("truth");
  f.truth.task = task_from_string(t.at("task").get<std::string>());
  switch (f.truth.task) {
    case TaskKind::Choice: f.truth.choice = t.at("answer").get<std::string>(); break;
    case TaskKind::Boxes:
      for (const auto& b : t.at("boxes")) f.truth.boxes.push_back({b.at(0), b.at(1), b.at(2), b.at(3)});
      break;
    case TaskKind::Point: {
      auto pts = points_from(t.at("region"));
      f.truth.region = t.value("region_kind", "points") == "hull" ? rewards::Region::from_hull(std::move(pts))
                                                                 : rewards::Region::from_points(std::move(pts));
      break;
    }
    case TaskKind::Pose: f.truth.corners = points_from(t.at("corners")); break;
    case TaskKind::Grasp: f.truth.grasp = grasp_from(t.at("grasp")); break;
  }
  return f;
}

/// Every invariant violation of a loaded fixture, empty when valid.
inline std::vector<std::string> fixture_violations(const SceneFixture& f) {
  using fixture_detail::in_unit;
  std::vector<std::string> out;
  if (f.image.width == 0 || f.image.height == 0) out.push_back("image is empty");
  if (f.depth && (f.depth->width != f.image.width || f.depth->height != f.image.height))
    out.push_back("depth dims " + std::to_string(f.depth->width) + "x" + std::to_string(f.depth->height) +
                  " do not match image " + std::to_string(f.image.width) + "x" + std::to_string(f.image.height));
  if (f.depth && !(f.focal_length_px && *f.focal_length_px > 0)) out.push_back("depth without positive focal length");
  for (const auto& [name, o] : f.objects) {
    for (auto p : o.points)
      if (!in_unit(p)) out.push_back("object '" + name + "' has a point outside [0,1]^2");
    if (o.mask && (o.mask->width != f.image.width || o.mask->height != f.image.height))
      out.push_back("object '" + name + "' mask dims do not match image");
    if (o.grasp) {
      if (!(o.grasp->gripper_width > 0)) out.push_back("object '" + name + "' grasp width must be positive");
      for (auto p : o.grasp->points.as_array())
        if (!in_unit(p)) out.push_back("object '" + name + "' grasp point outside [0,1]^2");
    }
  }
  const auto& t = f.truth;
  switch (t.task) {
    case TaskKind::Choice:
      if (t.choice.empty()) out.push_back("choice answer is empty");
      break;
    case TaskKind::Boxes:
      if (t.boxes.empty()) out.push_back("boxes truth is empty");
      for (const auto& b : t.boxes)
        if (!(b.x1 < b.x2 && b.y1 < b.y2)) out.push_back("box with x1>=x2 or y1>=y2");
      break;
    case TaskKind::Point:
      if (!t.region || t.region->points.empty()) out.push_back("point region is empty");
      break;
    case TaskKind::Pose:
      if (t.corners.size() != 8) out.push_back("pose truth needs exactly 8 corners");
      break;
    case TaskKind::Grasp:
      if (!t.grasp || !(t.grasp->gripper_width > 0)) out.push_back("grasp truth needs a positive gripper width");
      break;
  }
  return out;
}

/// Loads and validates every fixture in `dir`. All problems are collected and
/// reported together.
inline std::vector<std::shared_ptr<const SceneFixture>> load_dataset(const std::filesystem::path& dir) {
  const auto manifest = dir / "manifest.jsonl";
  std::ifstream in(manifest);
  if (!in) throw LoadError("missing " + manifest.string());
  std::vector<std::shared_ptr<const SceneFixture>> out;
  std::vector<std::string> problems;
  std::map<std::string, int> seen;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::string label = "line " + std::to_string(lineno);
    try {
      auto j = json::parse(line);
      if (j.contains("id")) label = j["id"].get<std::string>();
      auto f = fixture_from_json(j, dir);
      for (const auto& v : fixture_violations(f)) problems.push_back(label + ": " + v);
      if (seen[f.id]++) problems.push_back(label + ": duplicate fixture id");
      out.push_back(std::make_shared<const SceneFixture>(std::move(f)));
    } catch (const std::exception& e) {
      problems.push_back(label + ": " + e.what());
    }
  }
  if (!problems.empty()) {
    std::string msg = "dataset " + dir.string() + " is invalid:";
    for (const auto& p : problems) msg += "\n  " + p;
    throw LoadError(msg);
  }
  return out;
}

inline FixtureIndex index_fixtures(const std::vector<std::shared_ptr<const SceneFixture>>& v) {
  FixtureIndex idx;
  for (const auto& f : v) idx.emplace(f->id, f);
  return idx;
}

/// Manifest line for `f`; the image and depth file names are supplied.
inline json fixture_to_json(const SceneFixture& f, const std::string& image_file, const std::string& depth_file) {
  using namespace fixture_detail;
  json j{{"id", f.id}, {"question", f.question}, {"image", image_file}, {"noise_seed", f.noise_seed}};
  if (!depth_file.empty()) j["depth"] = depth_file;
  json objs = json::object();
  for (const auto& [name, o] : f.objects) {
    json oj{{"points", points_to(o.points)}};
    if (o.mask) oj["mask"] = {{"width", o.mask->width}, {"height", o.mask->height}, {"rle", rle_encode(*o.mask)}};
    if (o.box3d)
      oj["box3d"] = {{"center", vec3_to(o.box3d->center)},
                     {"axes", json::array({vec3_to(o.box3d->axes[0]), vec3_to(o.box3d->axes[1]), vec3_to(o.box3d->axes[2])})},
                     {"extent", vec3_to(o.box3d->extent)}};
    if (o.grasp) oj["grasp"] = grasp_to(*o.grasp);
    objs[name] = oj;
  }
  j["objects"] = objs;
  json t{{"task", to_string(f.truth.task)}};
  switch (f.truth.task) {
    case TaskKind::Choice: t["answer"] = f.truth.choice; break;
    case TaskKind::Boxes: {
      json b = json::array();
      for (const auto& x : f.truth.boxes) b.push_back({x.x1, x.y1, x.x2, x.y2});
      t["boxes"] = b;
      break;
    }
    case TaskKind::Point: t["region"] = points_to(f.truth.region->points); break;
    case TaskKind::Pose: t["corners"] = points_to(f.truth.corners); break;
    case TaskKind::Grasp: t["grasp"] = grasp_to(*f.truth.grasp); break;
  }
  j["truth"] = t;
  return j;
}

}  // namespace toolshed
