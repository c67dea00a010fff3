// SPDX-License-Identifier: Apache-2.0
//
// The bundled 12-scene desk dataset and its scripted policies.
//
//   6 yes/no spatial questions (4 "no", 2 "yes"), 2 pointing, 1 boxes,
//   1 pose (projected 3D box corners), 2 grasp.
//
// Scripts (JSONL for ScriptedPolicy):
//   perfect.jsonl     detect the focus object, then answer the ground truth
//   half_wrong.jsonl  as perfect, but rollouts 2 and 3 answer "none"
//   chain.jsonl       detect, read the detection back through code_executor, answer
#pragma once

#include <filesystem>
#include <fstream>

#include "toolshed/desk.hpp"
#include "toolshed/digest.hpp"

namespace toolshed::desk {

struct DeskSample {
  SceneFixture fixture;
  std::string focus;  // object the scripts detect first
};

/// Ground truth written as an answer the reward parsers accept.
inline std::string truth_answer(const GroundTruth& t) {
  switch (t.task) {
    case TaskKind::Choice: return t.choice;
    case TaskKind::Point: return fixture_detail::point_to(t.region->centroid).dump();
    case TaskKind::Boxes: {
      json b = json::array();
      for (const auto& x : t.boxes) b.push_back({x.x1, x.y1, x.x2, x.y2});
      return b.dump();
    }
    case TaskKind::Pose: return fixture_detail::points_to(t.corners).dump();
    case TaskKind::Grasp: return fixture_detail::grasp_to(*t.grasp).dump();
  }
  return {};
}

namespace dataset_detail {

struct Paint {
  const char* name;
  std::array<std::uint8_t, 3> color;
};

inline constexpr std::array<Paint, 6> kPalette{{{"red mug", {200, 40, 40}},
                                                {"blue box", {40, 60, 200}},
                                                {"green bowl", {40, 170, 70}},
                                                {"yellow block", {220, 200, 40}},
                                                {"white cup", {235, 235, 235}},
                                                {"black can", {30, 30, 30}}}};

/// Three objects in three columns, sizes and offsets drawn from `seed`.
inline std::vector<DeskObject> layout(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::array<int, 6> order{0, 1, 2, 3, 4, 5};
  for (int i = 5; i > 0; --i) std::swap(order[std::size_t(i)], order[rng() % std::uint64_t(i + 1)]);
  std::vector<DeskObject> out;
  for (int k = 0; k < 3; ++k) {
    const double w = 0.14 + 0.08 * u(rng), h = 0.18 + 0.14 * u(rng);
    const double x1 = 0.04 + 0.32 * k + (0.28 - w) * u(rng);
    const double y1 = 0.06 + (0.86 - h) * u(rng);
    const auto& p = kPalette[std::size_t(order[std::size_t(k)])];
    out.push_back({p.name, {x1, y1, x1 + w, y1 + h}, p.color, 0.05 + 0.15 * u(rng), true});
  }
  return out;
}

inline double center_x(const DeskObject& o) { return (o.rect.x1 + o.rect.x2) / 2; }

}  // namespace dataset_detail

inline std::vector<DeskSample> standard_samples() {
  using namespace dataset_detail;
  std::vector<DeskSample> out;
  auto add = [&](std::string id, std::string question, const std::vector<DeskObject>& objs, std::uint64_t seed,
                 std::string focus, GroundTruth truth) {
    auto f = render(std::move(id), std::move(question), objs, seed);
    f.truth = std::move(truth);
    out.push_back({std::move(f), std::move(focus)});
  };
  char id[32];

  for (int i = 0; i < 6; ++i) {
    const auto objs = layout(100 + std::uint64_t(i));
    // Objects sit in left-to-right columns, so index order is horizontal order.
    const bool yes = i % 3 == 0;
    const auto& a = objs[yes ? 0 : 2];
    const auto& b = objs[1];
    GroundTruth t;
    t.task = TaskKind::Choice;
    t.choice = center_x(a) < center_x(b) ? "yes" : "no";
    std::snprintf(id, sizeof id, "desk-%02d", i + 1);
    add(id, "Is the " + a.name + " to the left of the " + b.name + "? Answer yes or no.", objs, 100 + std::uint64_t(i),
        a.name, t);
  }
  for (int i = 0; i < 2; ++i) {
    const auto objs = layout(200 + std::uint64_t(i));
    const auto& o = objs[std::size_t(i + 1)];
    GroundTruth t;
    t.task = TaskKind::Point;
    t.region = rewards::Region::from_points(
        {{o.rect.x1, o.rect.y1}, {o.rect.x2, o.rect.y1}, {o.rect.x2, o.rect.y2}, {o.rect.x1, o.rect.y2}});
    std::snprintf(id, sizeof id, "desk-%02d", 7 + i);
    add(id, "Point to the " + o.name + ". Answer with [x, y] in normalized image coordinates.", objs,
        200 + std::uint64_t(i), o.name, t);
  }
  {
    const auto objs = layout(300);
    GroundTruth t;
    t.task = TaskKind::Boxes;
    for (const auto& o : objs) t.boxes.push_back(o.rect);
    add("desk-09", "Draw a 2D box around every object on the table as [[x1, y1, x2, y2], ...].", objs, 300,
        objs[0].name, t);
  }
  {
    const auto objs = layout(400);
    const auto& o = objs[1];
    auto f = render("desk-10", "Give the eight projected corners of the " + o.name + "'s 3D bounding box.", objs, 400);
    const auto corners = f.objects.at(o.name).box3d->corners();
    f.truth.task = TaskKind::Pose;
    f.truth.corners = geometry::project_points(corners, kFocal, kWidth, kHeight);
    out.push_back({std::move(f), o.name});
  }
  for (int i = 0; i < 2; ++i) {
    const auto objs = layout(500 + std::uint64_t(i));
    const auto& o = objs[std::size_t(2 * i)];
    GroundTruth t;
    t.task = TaskKind::Grasp;
    t.grasp = default_grasp(o.rect);
    std::snprintf(id, sizeof id, "desk-%02d", 11 + i);
    add(id, "How should a parallel gripper grasp the " + o.name + "?", objs, 500 + std::uint64_t(i), o.name, t);
  }
  return out;
}

inline std::string detect_call(const std::string& obj) {
  json call{{"name", "point1.detect_one"}, {"arguments", {{"obj_name", obj}}}};
  return "<think>First I locate the " + obj + ".</think><tool_call>" + call.dump() + "</tool_call>";
}

inline std::string detection_variable(const std::string& obj) {
  std::string v = obj;
  std::replace(v.begin(), v.end(), ' ', '_');
  return v + "_detection";
}

inline std::string answer_turn(const std::string& answer) {
  return "<think>That settles it.</think><answer>" + answer + "</answer>";
}

inline std::string script_line(const std::string& sample, int rollout, int turn, const std::string& text) {
  json j{{"sample_id", sample}, {"turn", turn}, {"text", text}};
  if (rollout >= 0) j["rollout"] = rollout;
  return j.dump() + "\n";
}

/// name -> JSONL contents.
inline std::map<std::string, std::string> standard_scripts(const std::vector<DeskSample>& samples) {
  std::string perfect, half, chain;
  for (const auto& s : samples) {
    const auto& id = s.fixture.id;
    const auto ans = answer_turn(truth_answer(s.fixture.truth));
    perfect += script_line(id, -1, 1, detect_call(s.focus)) + script_line(id, -1, 2, ans);
    half += script_line(id, -1, 1, detect_call(s.focus)) + script_line(id, -1, 2, ans);
    for (int r : {2, 3}) half += script_line(id, r, 2, answer_turn("none"));
    json eval{{"name", "code_executor.eval"}, {"arguments", {{"expression", detection_variable(s.focus)}}}};
    chain += script_line(id, -1, 1, detect_call(s.focus)) +
             script_line(id, -1, 2, "<think>Read the stored detection back.</think><tool_call>" + eval.dump() + "</tool_call>") +
             script_line(id, -1, 3, ans);
  }
  return {{"perfect.jsonl", perfect}, {"half_wrong.jsonl", half}, {"chain.jsonl", chain}};
}

inline constexpr const char* kSystemPrompt =
    "You answer spatial questions about a tabletop image. Reason inside <think></think>. To use a tool, write\n"
    "<tool_call>{\"name\": \"tool.method\", \"arguments\": {...}}</tool_call> right after a think block; results come\n"
    "back in the next message, and stored results can be passed to later calls as \"$name\". Finish with one\n"
    "<answer></answer> block, also right after a think block.\n";

inline void write_file(const std::filesystem::path& p, std::span<const std::uint8_t> bytes) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + p.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
}

inline void write_file(const std::filesystem::path& p, const std::string& text) {
  write_file(p, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

/// Writes manifest.jsonl, images, depth files, scripts and the system prompt.
inline void write_standard_dataset(const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const auto samples = standard_samples();
  std::string manifest;
  for (const auto& s : samples) {
    const auto& f = s.fixture;
    write_file(dir / (f.id + ".png"), encode_png(f.image));
    write_file(dir / (f.id + ".dpth"), encode_dpth({*f.depth, float(*f.focal_length_px)}));
    manifest += fixture_to_json(f, f.id + ".png", f.id + ".dpth").dump() + "\n";
  }
  write_file(dir / "manifest.jsonl", manifest);
  for (const auto& [name, text] : standard_scripts(samples)) write_file(dir / name, text);
  write_file(dir / "system_prompt.txt", std::string(kSystemPrompt));
}

}  // namespace toolshed::desk
