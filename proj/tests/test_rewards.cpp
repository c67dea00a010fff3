// SPDX-License-Identifier: Apache-2.0
#include <random>

#include <gtest/gtest.h>

#include "oracles.hpp"
#include "toolshed/rewards.hpp"

namespace toolshed::rewards {
namespace {

using geometry::convex_hull;

std::vector<Point2> square(double x0, double y0, double s) { return {{x0, y0}, {x0 + s, y0}, {x0 + s, y0 + s}, {x0, y0 + s}}; }

TEST(Binary, Normalization) {
  EXPECT_EQ(binary_reward("Yes", "yes"), 1.0);
  EXPECT_EQ(binary_reward("  left   of the  box ", "Left of the box"), 1.0);
  EXPECT_EQ(binary_reward("A", "B"), 0.0);
  EXPECT_EQ(binary_reward("(a)", "A"), 1.0);
  EXPECT_EQ(binary_reward("B. the red cup", "b"), 1.0);
  EXPECT_EQ(binary_reward("apple", "a"), 0.0);
}

TEST(Miou, Cases) {
  std::vector<Box2> gt{{0, 0.5, 1, 1.5}};
  std::vector<Box2> pred{{0, 0, 1, 1}};
  EXPECT_NEAR(miou_reward(pred, gt), 1.0 / 3.0, 1e-15);
  EXPECT_EQ(miou_reward(gt, gt), 1.0);
  EXPECT_EQ(miou_reward(std::vector<Box2>{{2, 2, 3, 3}}, gt), 0.0);
  EXPECT_EQ(miou_reward({}, gt), 0.0);
}

TEST(Nndc, ClosedForm) {
  auto region = Region::from_points(square(0.4, 0.4, 0.02));
  const Point2 c = region.centroid;
  EXPECT_NEAR(nndc_reward(c, region), 1.0, 1e-12);
  EXPECT_NEAR(nndc_raw(std::sqrt(2.0)), 0.0, 1e-12);
  EXPECT_NEAR(nndc_reward({c.x + 0.2, c.y}, region), oracle::kNndcAt02, 1e-12);

  auto corner = Region::from_points(square(0.0, 0.0, 0.01));
  corner.centroid = {0, 0};
  EXPECT_NEAR(nndc_reward({1, 1}, corner), 0.0, 1e-12);
}

TEST(Nndc, MonotoneAlongRays) {
  auto region = Region::from_points(square(0.45, 0.45, 0.1));
  for (double ang = 0; ang < 6.28; ang += 0.3) {
    double prev = 2.0;
    for (double d = 0.1; d < 1.0; d += 0.01) {
      const double r = nndc_reward({0.5 + d * std::cos(ang), 0.5 + d * std::sin(ang)}, region);
      EXPECT_LE(r, prev);
      prev = r;
    }
  }
}

TEST(Clip, InsideHullIsOne) {
  auto pts = square(0.2, 0.2, 0.4);
  auto region = Region::from_points(pts);
  auto hull = convex_hull(std::span<const Point2>(pts));
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0.2, 0.6);
  for (int i = 0; i < 100; ++i) {
    Point2 p{u(rng), u(rng)};
    EXPECT_EQ(nndc_reward(p, region), 1.0);
    EXPECT_EQ(nsdh_reward(p, hull), 1.0);
    EXPECT_EQ(nac_reward(p, hull), 1.0);
  }
}

TEST(Pointing, DegenerateRegionUsesSegmentTolerance) {
  auto region = Region::from_points({{0.1, 0.1}, {0.5, 0.1}});
  EXPECT_EQ(pointing_binary({0.3, 0.1005}, region), 1.0);
  EXPECT_EQ(pointing_binary({0.3, 0.102}, region), 0.0);
}

TEST(Pose, GuardAndOffsetSquares) {
  std::vector<Point2> a, b;
  for (auto p : square(0, 0, 1)) a.push_back(p), a.push_back(p);
  for (auto p : square(0.5, 0, 1)) b.push_back(p), b.push_back(p);
  const double iou = pose_hull_iou_reward(a, b);
  EXPECT_NEAR(iou, 1.0 / 3.0, 1e-9);
  double uni = 0;
  auto inter = oracle::mc_areas(square(0, 0, 1), square(0.5, 0, 1), 1'000'000, 29, &uni);
  EXPECT_NEAR(inter.value / uni, 1.0 / 3.0, 0.003);

  EXPECT_EQ(pose_hull_iou_reward(a, a), 1.0);
  std::vector<Point2> seven(a.begin(), a.begin() + 7);
  EXPECT_EQ(pose_hull_iou_reward(seven, a), 0.0);
  EXPECT_EQ(pose_hull_iou_reward(a, seven), 0.0);
  std::vector<Point2> flat(8, Point2{0.5, 0.5});
  EXPECT_EQ(pose_hull_iou_reward(flat, a), 0.0);
}

GraspPoints grasp_at(Point2 c) {
  return {c, c + Point2{-0.1, 0}, c + Point2{0.1, 0}, c + Point2{-0.1, 0.1}, c + Point2{0.1, 0.1}};
}

GraspPoints shifted(GraspPoints g, Point2 d) {
  return {g.center + d, g.left_base + d, g.right_base + d, g.left_tip + d, g.right_tip + d};
}

TEST(Nnce, ClosedForm) {
  auto gt = grasp_at({0.5, 0.5});
  const double w = 0.05;
  EXPECT_EQ(nnce_reward(gt, gt, w), 1.0);
  EXPECT_NEAR(nnce_reward(shifted(gt, {w, 0}), gt, w), 0.9, 1e-12);
  EXPECT_NEAR(nnce_reward(shifted(gt, {10 * w, 0}), gt, w), 0.0, 1e-12);
  EXPECT_EQ(nnce_reward(shifted(gt, {30 * w, 0}), gt, w), 0.0);
  EXPECT_THROW(nnce_reward(gt, gt, 0.0), BadArgs);
}

TEST(Mace, ClosedForm) {
  auto gt = grasp_at({0.5, 0.5});
  const double w = 0.1;
  auto exact = mace_score(gt, gt, w);
  EXPECT_DOUBLE_EQ(exact.score, 100.0);
  EXPECT_TRUE(exact.success);

  // Reflect every point through the center: all four directions reverse.
  auto c = gt.center;
  auto refl = [&](Point2 p) { return c + (-1.0) * (p - c); };
  GraspPoints rev{c, refl(gt.left_base), refl(gt.right_base), refl(gt.left_tip), refl(gt.right_tip)};
  auto half = mace_score(rev, gt, w);
  EXPECT_NEAR(half.score, 50.0, 1e-9);
  EXPECT_TRUE(half.success);

  EXPECT_NEAR(mace_score(shifted(gt, {2 * w, 0}), gt, w).score, 0.0, 1e-9);
  EXPECT_EQ(mace_score(shifted(gt, {5 * w, 0}), gt, w).score, 0.0);
  EXPECT_THROW(mace_score(gt, gt, -1), BadArgs);
}

TEST(Mace, ThresholdFlipsAtForty) {
  auto gt = grasp_at({0.5, 0.5});
  const double w = 0.1;
  // Directions exact, center error e*w: score = 100 * (1 - e/2).
  auto above = mace_score(shifted(gt, {1.19 * w, 0}), gt, w);
  auto at = mace_score(shifted(gt, {1.2 * w, 0}), gt, w);
  auto below = mace_score(shifted(gt, {1.21 * w, 0}), gt, w);
  EXPECT_NEAR(at.score, 40.0, 1e-9);
  EXPECT_TRUE(above.success);
  EXPECT_FALSE(below.success);
}

TEST(Mace, ZeroLengthDirectionIsWorstCase) {
  auto gt = grasp_at({0.5, 0.5});
  auto pred = gt;
  pred.left_tip = pred.left_base;
  // One cosine term at -1 contributes (1 - -1)/2 = 1 to the sum; score 100*(1 - 1/8).
  EXPECT_NEAR(mace_score(pred, gt, 0.1).score, 87.5, 1e-9);
}

TEST(Mace, TranslationAndScaleInvariant) {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(0, 1);
  auto rnd = [&] { return GraspPoints{{u(rng), u(rng)}, {u(rng), u(rng)}, {u(rng), u(rng)}, {u(rng), u(rng)}, {u(rng), u(rng)}}; };
  for (int i = 0; i < 50; ++i) {
    auto p = rnd(), t = rnd();
    const double w = 0.2 + u(rng);
    const double base = mace_score(p, t, w).score;
    Point2 d{u(rng), u(rng)};
    EXPECT_NEAR(mace_score(shifted(p, d), shifted(t, d), w).score, base, 1e-9);
    auto scale = [](GraspPoints g, double s) {
      return GraspPoints{s * g.center, s * g.left_base, s * g.right_base, s * g.left_tip, s * g.right_tip};
    };
    EXPECT_NEAR(mace_score(scale(p, 3), scale(t, 3), 3 * w).score, base, 1e-9);
  }
}

TEST(Nsdh, ClosedForm) {
  auto hull = convex_hull(std::span<const Point2>(square(0, 0, 1)));
  EXPECT_NEAR(nsdh_raw(0.0), 1.0, 1e-15);
  EXPECT_NEAR(nsdh_reward({1.0, 0.5}, hull, false), 1.0, 1e-12);
  EXPECT_NEAR(nsdh_reward({2.0, 0.5}, hull), oracle::kNsdhAtPlus1, 1e-12);
  EXPECT_LT(nsdh_reward({0.5, 0.5}, hull, false), 0.9);
  EXPECT_EQ(nsdh_reward({0.5, 0.5}, hull), 1.0);
  EXPECT_THROW(nsdh_reward({0, 0}, Hull{geometry::DegenerateHull{{0, 0}, {1, 0}}}), BadArgs);
}

TEST(Nac, ClosedFormAndSymmetry) {
  auto hull = convex_hull(std::span<const Point2>(square(0, 0, 1)));
  EXPECT_EQ(nac_reward({0.5, 0.5}, hull), 1.0);
  // Apex at x = 3 over the right edge adds a triangle of area 1.
  EXPECT_NEAR(nac_reward({3.0, 0.5}, hull), oracle::kExpMinus1, 1e-12);
  EXPECT_NEAR(nac_reward({1.7, 0.3}, hull), nac_reward({-0.7, 0.3}, hull), 1e-12);
  EXPECT_NEAR(nac_reward({0.2, 1.4}, hull), nac_reward({0.2, -0.4}, hull), 1e-12);
  EXPECT_THROW(nac_reward({0, 0}, Hull{geometry::DegenerateHull{{0, 0}, {1, 0}}}), BadArgs);
}

TEST(Format, Rules) {
  using T = Tag;
  auto score = [](std::vector<Tag> t, bool req = false) { return format_score(t, req); };
  EXPECT_EQ(score({T::Think, T::ToolCall, T::Think, T::Answer}), 1.0);
  EXPECT_EQ(score({T::ToolCall, T::Think, T::Answer}), 0.0);
  EXPECT_EQ(score({T::Think, T::Answer, T::Think, T::Answer}), 0.0);
  EXPECT_EQ(score({T::Think, T::Answer, T::Think}), 0.0);
  EXPECT_EQ(score({T::Think, T::ToolCall, T::Answer}), 0.0);
  EXPECT_EQ(score({T::Think, T::Answer}, false), 1.0);
  EXPECT_EQ(score({T::Think, T::Answer}, true), 0.0);
  EXPECT_EQ(score({}), 0.0);
}

TEST(Format, Combination) {
  EXPECT_NEAR(combine_with_format(1.0, 1.0), 1.3, 1e-15);
  EXPECT_EQ(combine_with_format(0.42, 0.0, 0.7), 0.42);
  EXPECT_EQ(combine_with_format(0.0, 1.0, 0.0), 0.0);
  EXPECT_THROW(combine_with_format(0.5, 1.0, 1.5), BadArgs);
}

}  // namespace
}  // namespace toolshed::rewards
