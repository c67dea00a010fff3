// SPDX-License-Identifier: Apache-2.0
//
// Procedural tabletop scenes: a textured table seen from above with a few
// box-like objects on it. Used by the demo dataset generator and the tests.
#pragma once

#include <array>
#include <random>
#include <string>
#include <vector>

#include "toolshed/fixture.hpp"

namespace toolshed::desk {

inline constexpr std::uint32_t kWidth = 64;
inline constexpr std::uint32_t kHeight = 48;
inline constexpr double kFocal = 60.0;
inline constexpr double kTableDepth = 1.5;

struct DeskObject {
  std::string name;
  rewards::Box2 rect;                 // normalized image footprint
  std::array<std::uint8_t, 3> color;  // RGB
  double height = 0.1;                // metres above the table
  bool graspable = true;
};

/// Pixel (u, v) belongs to a rect when its center lies inside it.
inline bool covers(const rewards::Box2& r, std::uint32_t u, std::uint32_t v, std::uint32_t w, std::uint32_t h) {
  const double x = (u + 0.5) / w, y = (v + 0.5) / h;
  return x >= r.x1 && x <= r.x2 && y >= r.y1 && y <= r.y2;
}

/// Depth of the object's domed top at pixel (u, v).
inline double dome_depth(const DeskObject& o, std::uint32_t u, std::uint32_t v, std::uint32_t w, std::uint32_t h) {
  const double cx = (o.rect.x1 + o.rect.x2) / 2, cy = (o.rect.y1 + o.rect.y2) / 2;
  const double dx = ((u + 0.5) / w - cx) / ((o.rect.x2 - o.rect.x1) / 2);
  const double dy = ((v + 0.5) / h - cy) / ((o.rect.y2 - o.rect.y1) / 2);
  return kTableDepth - o.height * (1.0 - 0.25 * (dx * dx + dy * dy));
}

inline GraspKeypoints default_grasp(const rewards::Box2& r) {
  const Point2 c{(r.x1 + r.x2) / 2, (r.y1 + r.y2) / 2};
  const double hw = (r.x2 - r.x1) / 2, reach = std::min(0.08, (r.y2 - r.y1) / 2);
  GraspKeypoints g;
  g.points = {c, {c.x - hw, c.y}, {c.x + hw, c.y}, {c.x - hw, c.y + reach}, {c.x + hw, c.y + reach}};
  g.gripper_width = 2 * hw;
  return g;
}

/// Same convention as the depth tools: ((u - W/2) d / f, (v - H/2) d / f, d).
inline std::vector<geometry::Vec3> backproject_depth(const FloatGrid& d) {
  std::vector<geometry::Vec3> out;
  out.reserve(d.data.size());
  for (std::uint32_t v = 0; v < d.height; ++v)
    for (std::uint32_t u = 0; u < d.width; ++u) {
      // Round through float to match the point-cloud attachment exactly.
      const float z = d.at(u, v);
      const float x = float((u - d.width / 2.0) * z / kFocal), y = float((v - d.height / 2.0) * z / kFocal);
      out.push_back({x, y, z});
    }
  return out;
}

/// Renders image, depth and per-object annotations. Later objects occlude
/// earlier ones.
inline SceneFixture render(std::string id, std::string question, const std::vector<DeskObject>& objects,
                           std::uint64_t seed) {
  SceneFixture f;
  f.id = std::move(id);
  f.question = std::move(question);
  f.noise_seed = seed;
  const auto W = kWidth, H = kHeight;
  f.image = {W, H, std::vector<std::uint8_t>(3ull * W * H)};
  FloatGrid depth{W, H, std::vector<float>(std::size_t(W) * H, float(kTableDepth))};
  std::vector<int> owner(std::size_t(W) * H, -1);

  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> grain(-6, 6);
  for (std::uint32_t v = 0; v < H; ++v)
    for (std::uint32_t u = 0; u < W; ++u) {
      auto* p = f.image.at(u, v);
      const int g = grain(rng);
      p[0] = std::uint8_t(150 + g), p[1] = std::uint8_t(118 + g), p[2] = std::uint8_t(84 + g);
    }
  for (std::size_t k = 0; k < objects.size(); ++k) {
    const auto& o = objects[k];
    for (std::uint32_t v = 0; v < H; ++v)
      for (std::uint32_t u = 0; u < W; ++u) {
        if (!covers(o.rect, u, v, W, H)) continue;
        const std::size_t i = std::size_t(v) * W + u;
        owner[i] = int(k);
        depth.data[i] = float(dome_depth(o, u, v, W, H));
        auto* p = f.image.at(u, v);
        const int g = grain(rng) / 2;
        for (int c = 0; c < 3; ++c) p[c] = std::uint8_t(std::clamp(int(o.color[c]) + g, 0, 255));
      }
  }
  f.image_attachment = make_image_attachment("image", f.image);
  f.depth = depth;
  f.focal_length_px = kFocal;

  const auto cloud = backproject_depth(depth);
  for (std::size_t k = 0; k < objects.size(); ++k) {
    const auto& o = objects[k];
    ObjectAnnotation a;
    a.points = {{(o.rect.x1 + o.rect.x2) / 2, (o.rect.y1 + o.rect.y2) / 2}};
    BoolGrid m{W, H, std::vector<std::uint8_t>(std::size_t(W) * H, 0)};
    std::vector<geometry::Vec3> pts;
    for (std::size_t i = 0; i < owner.size(); ++i)
      if (owner[i] == int(k)) m.cells[i] = 1, pts.push_back(cloud[i]);
    if (pts.size() >= 4) {
      auto box = geometry::pca_obb(pts);
      if (!box.degenerate) a.box3d = box;
    }
    a.mask = std::move(m);
    if (o.graspable) a.grasp = default_grasp(o.rect);
    f.objects.emplace(o.name, std::move(a));
  }
  return f;
}

}  // namespace toolshed::desk
