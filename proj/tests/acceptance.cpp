// SPDX-License-Identifier: Apache-2.0
//
// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fail.
#include <chrono>
#include <functional>
#include <numeric>
#include <iostream>
#include <regex>
#include <sstream>

#include "generators.hpp"
#include "oracles.hpp"
#include "toolshed/grpo.hpp"
#include "toolshed/harness.hpp"
#include "toolshed/process.hpp"

namespace {

using namespace toolshed;
using namespace std::chrono_literals;

const std::filesystem::path kDesk = std::filesystem::path(TOOLSHED_DATA_DIR) / "desk";

/// Collects failed conditions; an empty list means the criterion holds.
struct Verdict {
  std::vector<std::string> failures;
  std::string note;

  void expect(bool ok, const std::string& what) {
    if (!ok) failures.push_back(what);
  }
  void near(double got, double want, double tol, const std::string& what) {
    if (!(std::abs(got - want) <= tol)) {
      std::ostringstream os;
      os.precision(17);
      os << what << ": got " << got << ", want " << want << " +- " << tol;
      failures.push_back(os.str());
    }
  }
};

struct Criterion {
  std::string name;
  std::chrono::milliseconds budget;  // zero: no runtime bound
  std::function<void(Verdict&)> run;
};

std::vector<Point2> square(double x0, double y0, double s) { return {{x0, y0}, {x0 + s, y0}, {x0 + s, y0 + s}, {x0, y0 + s}}; }

rewards::GraspPoints grasp_at(Point2 c) {
  return {c, c + Point2{-0.1, 0}, c + Point2{0.1, 0}, c + Point2{-0.1, 0.1}, c + Point2{0.1, 0.1}};
}

rewards::GraspPoints shifted(rewards::GraspPoints g, Point2 d) {
  return {g.center + d, g.left_base + d, g.right_base + d, g.left_tip + d, g.right_tip + d};
}

void reward_closed_forms(Verdict& v) {
  using namespace rewards;
  auto region = Region::from_points(square(0.4, 0.4, 0.02));
  v.near(nndc_reward(region.centroid, region), 1.0, 1e-12, "nndc at d=0");
  auto corner = Region::from_points(square(0.0, 0.0, 0.01));
  corner.centroid = {0, 0};
  v.expect(!geometry::point_in_hull({1, 1}, corner.hull), "prediction (1,1) must lie outside the hull");
  v.near(nndc_reward({1, 1}, corner), 0.0, 1e-12, "nndc at d=sqrt2 outside the hull");

  const auto gt = grasp_at({0.5, 0.5});
  const double w = 0.05;
  v.expect(kDefaultDeltaMax == 10.0, "delta_max defaults to 10");
  v.near(nnce_reward(shifted(gt, {10 * w, 0}), gt, w), 0.0, 1e-12, "nnce at mean error 10w");
  v.near(nnce_reward(gt, gt, w), 1.0, 0.0, "nnce exact");

  v.near(mace_score(gt, gt, 0.1).score, 100.0, 1e-12, "mace exact prediction");
  v.expect(kMaceSuccessThreshold == 40.0, "success threshold is 40");
  // Directions exact and center off by e*w: score = 100 * (1 - e/2).
  const auto above = mace_score(shifted(gt, {1.19 * 0.1, 0}), gt, 0.1);
  const auto at = mace_score(shifted(gt, {1.2 * 0.1, 0}), gt, 0.1);
  const auto below = mace_score(shifted(gt, {1.21 * 0.1, 0}), gt, 0.1);
  v.near(at.score, 40.0, 1e-9, "mace at 1.2 widths");
  v.expect(above.success && !below.success, "success flips between scores 40.5 and 39.5");

  v.expect(kDefaultFormatLambda == 0.3, "format lambda defaults to 0.3");
  v.near(combine_with_format(0.5, 1.0), 0.8, 1e-15, "combine_with_format default");
}

void pose_guard(Verdict& v) {
  using namespace rewards;
  std::vector<Point2> a, b;
  for (auto p : square(0, 0, 1)) a.push_back(p), a.push_back(p);
  for (auto p : square(0.5, 0, 1)) b.push_back(p), b.push_back(p);
  for (std::size_t n : {0u, 1u, 7u, 9u, 16u}) {
    std::vector<Point2> wrong(n, Point2{0.3, 0.3});
    for (std::size_t i = 0; i < n; ++i) wrong[i] = a[i % 8] + Point2{0.01 * double(i), 0};
    v.expect(pose_hull_iou_reward(wrong, b) == 0.0, std::to_string(n) + " predicted corners must give 0");
    v.expect(pose_hull_iou_reward(a, wrong) == 0.0, std::to_string(n) + " true corners must give 0");
  }
  const double iou = pose_hull_iou_reward(a, b);
  double uni = 0;
  const auto inter = oracle::mc_areas(square(0, 0, 1), square(0.5, 0, 1), 1'000'000, 29, &uni);
  const double mc = inter.value / uni;
  v.near(mc, 1.0 / 3.0, 0.003, "Monte-Carlo oracle");
  v.near(iou, mc, 0.003, "hull IoU vs Monte-Carlo");
  v.near(iou, 1.0 / 3.0, 1e-9, "hull IoU of offset squares");
}

void grpo_properties(Verdict& v) {
  std::mt19937_64 rng(4242);
  std::uniform_real_distribution<double> u(-5, 5);
  int floored = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<double> r(2 + rng() % 15);
    for (auto& x : r) x = u(rng);
    // Every tenth group is (nearly) constant so the floor path is exercised.
    if (trial % 10 == 0)
      for (auto& x : r) x = r[0] + (trial % 20 == 0 ? 0.0 : 1e-9 * u(rng));
    const auto adv = grpo::group_advantages(r);
    const auto [mean, sd] = oracle::mean_std(r);
    (void)mean;
    double sum = 0;
    for (double x : adv) sum += x;
    v.near(sum, 0.0, 1e-9, "advantage sum, trial " + std::to_string(trial));
    if (sd < grpo::kDefaultSigmaFloor) {
      ++floored;
      v.expect(std::all_of(adv.begin(), adv.end(), [](double x) { return x == 0.0; }),
               "floored group must give zero advantages, trial " + std::to_string(trial));
    } else {
      v.near(oracle::mean_std(adv).second, 1.0, 1e-9, "advantage std, trial " + std::to_string(trial));
    }
    grpo::RolloutGroup g{r, std::vector<double>(r.size(), 1.0), std::vector<double>(r.size())};
    for (auto& k : g.kl_terms) k = std::abs(u(rng));
    v.near(grpo::grpo_loss(g, {0.2, 0.0}), 0.0, 1e-9, "loss with unit ratios, trial " + std::to_string(trial));
  }
  v.expect(floored == 100, "expected 100 floored groups, saw " + std::to_string(floored));
}

void geometry_oracles(Verdict& v) {
  std::mt19937_64 rng(99);
  double worst_z = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const auto pa = oracle::random_convex(rng), pb = oracle::random_convex(rng);
    const auto ha = geometry::convex_hull(std::span<const Point2>(pa)), hb = geometry::convex_hull(std::span<const Point2>(pb));
    const auto& a = std::get<geometry::ConvexPolygon>(ha);
    const auto& b = std::get<geometry::ConvexPolygon>(hb);
    const double exact = geometry::intersection_area(a, b);
    const auto est = oracle::mc_areas(pa, pb, 200'000, 1000 + std::uint64_t(trial));
    const double z = std::abs(est.value - exact) / est.sigma;
    worst_z = std::max(worst_z, z);
    v.expect(z <= 3.0, "pair " + std::to_string(trial) + " off by " + std::to_string(z) + " sigma");
  }
  std::ostringstream os;
  os.precision(3);
  os << "max |z| " << worst_z;
  v.note = os.str();

  const std::array<double, 3> dims{0.3, 0.5, 0.9};
  const auto base = oracle::box_points(dims[0], dims[1], dims[2]);
  for (int trial = 0; trial < 50; ++trial) {
    const auto box = geometry::pca_obb(oracle::rotate(base, oracle::random_rotation(rng), {0.2, -0.1, 1.0}));
    std::array<double, 3> got{box.extent.x, box.extent.y, box.extent.z};
    std::sort(got.begin(), got.end());
    for (int k = 0; k < 3; ++k) v.near(got[std::size_t(k)], dims[std::size_t(k)], 1e-6, "obb extent, rotation " + std::to_string(trial));
  }
}

std::unique_ptr<Registry> desk_registry(const std::vector<std::shared_ptr<const SceneFixture>>& fixtures) {
  auto reg = std::make_unique<Registry>();
  auto idx = std::make_shared<FixtureIndex>(index_fixtures(fixtures));
  register_all(*reg, default_specs(make_mock_toolbox(), 4), make_mock_toolbox(), idx, {});
  return reg;
}

void loop_conformance(Verdict& v) {
  const auto fixtures = load_dataset(kDesk);
  v.expect(fixtures.size() == 12, "bundled dataset has 12 fixtures");
  auto perfect = rollout::ScriptedPolicy::from_file(kDesk / "perfect.jsonl");
  harness::BatchConfig cfg;
  cfg.rollout.n_group = 5;
  cfg.rollout.seed = 7;
  std::string runs[2];
  for (auto& text : runs) {
    auto reg = desk_registry(fixtures);
    std::size_t lines = 0;
    harness::TraceSink sink{[&](const json& r) {
                              text += r.dump() + "\n";
                              ++lines;
                            },
                            {}};
    harness::run_batch(*reg, fixtures, perfect, cfg, sink);
    v.expect(lines == 60, "expected 60 trace records, got " + std::to_string(lines));
  }
  v.expect(!runs[0].empty() && runs[0] == runs[1], "two equal-seed runs must be byte-identical");

  auto chain = rollout::ScriptedPolicy::from_file(kDesk / "chain.jsonl");
  cfg.rollout.n_group = 1;
  auto reg = desk_registry(fixtures);
  const auto out = harness::run_batch(*reg, fixtures, chain, cfg);
  const std::regex detected(R"(point: \(([-0-9.]+), ([-0-9.]+)\))"), result(R"(Result: \[([-0-9.e]+), ([-0-9.e]+)\])");
  for (const auto& r : out.records) {
    const auto id = r.at("sample_id").get<std::string>();
    const auto& turns = r.at("turns");
    if (turns.size() != 6) {
      v.expect(false, id + ": expected 6 turns");
      continue;
    }
    const auto first = turns[2].at("text").get<std::string>();
    const auto second = turns[4].at("text").get<std::string>();
    v.expect(turns[2].at("tool").at("name") == "point1.detect_one", id + ": first call is the detector");
    v.expect(turns[4].at("tool").at("name") == "code_executor.eval", id + ": second call is the executor");
    v.expect(turns[4].at("tool").at("status") == "Ok", id + ": executor call failed: " + second);
    std::smatch m1, m2;
    if (!std::regex_search(first, m1, detected) || !std::regex_search(second, m2, result)) {
      v.expect(false, id + ": could not read the detection back");
      continue;
    }
    // The detector prints 4 decimals; the executor prints the stored value.
    v.near(std::stod(m2[1]), std::stod(m1[1]), 5e-5, id + ": x read back");
    v.near(std::stod(m2[2]), std::stod(m1[2]), 5e-5, id + ": y read back");
  }
}

ToolRequest req(std::string tool, std::string method, ValueMap args = {}) {
  ToolRequest r;
  r.tool = std::move(tool);
  r.method = std::move(method);
  r.args = std::move(args);
  return r;
}

ToolSpec spec(std::string name, int actors) {
  ToolSpec s;
  s.name = std::move(name);
  s.num_actors = actors;
  return s;
}

WorkerFactory inproc(ToolFn fn) {
  return [fn] { return std::make_unique<InProcessWorker>(ToolImpl{fn, false}, nullptr); };
}

void router_properties(Verdict& v) {
  {
    std::mutex m;
    std::vector<int> order;
    Registry reg;
    reg.register_tool(spec("one", 1), inproc([&](const ToolRequest& r, const ToolContext&) {
                        std::lock_guard lk(m);
                        order.push_back(int(r.args.at("i").as_number()));
                        return ToolResult::ok("");
                      }));
    std::vector<std::future<ToolResult>> fs;
    for (int i = 0; i < 100; ++i) fs.push_back(reg.dispatch("", req("one", "go", {{"i", i}})));
    for (auto& f : fs) f.get();
    std::vector<int> want(100);
    std::iota(want.begin(), want.end(), 0);
    v.expect(order == want, "single-worker pool must serve requests in submission order");
  }
  {
    Registry reg;
    reg.register_tool(spec("faulty", 2), inproc(tools::diag));
    reg.register_tool(spec("steady", 2), inproc(tools::diag));
    std::vector<std::future<ToolResult>> steady;
    for (int i = 0; i < 20; ++i) steady.push_back(reg.dispatch("", req("steady", "sleep", {{"ms", 2.0}})));
    const auto crash = reg.dispatch("", req("faulty", "fault")).get();
    v.expect(crash.status == Status::ToolError, "fault must surface as ToolError");
    for (auto& f : steady) v.expect(f.get().status == Status::Ok, "steady pool call failed");
    const auto st = reg.stats_snapshot();
    v.expect(st.tools.at("faulty").workers_replaced == 1, "faulting worker is replaced once");
    v.expect(st.tools.at("steady").completed == 20, "steady pool completes all 20 calls");
    v.expect(st.tools.at("steady").workers_replaced == 0, "steady pool keeps its workers");
  }
  {
    Registry reg;
    reg.register_tool(spec("diag", 4), inproc(tools::diag));
    const auto t0 = SteadyClock::now();
    std::vector<std::future<ToolResult>> fs;
    for (int i = 0; i < 64; ++i) fs.push_back(reg.dispatch("", req("diag", "sleep", {{"ms", 50.0}})));
    for (auto& f : fs) v.expect(f.get().status == Status::Ok, "sleep call failed");
    const auto ms = std::chrono::duration<double, std::milli>(SteadyClock::now() - t0).count();
    v.expect(ms < 1600.0, "64 sleeps on 4 workers took " + std::to_string(ms) + " ms");
    v.note = "sleep pool " + std::to_string(int(ms)) + " ms";
  }
}

void wire_round_trip(Verdict& v) {
  gen::EnvelopeGen g(7);
  int big = 0;
  for (int i = 0; i < 1000; ++i) {
    const bool large = i % 50 == 0;
    big += large;
    const auto env = g.envelope(large);
    try {
      const auto bytes = encode_envelope(env);
      const auto back = decode_envelope(bytes);
      v.expect(back == env, "envelope " + std::to_string(i) + " changed in transit");
      v.expect(encode_envelope(back) == bytes, "envelope " + std::to_string(i) + " re-encodes differently");
    } catch (const std::exception& e) {
      v.expect(false, "envelope " + std::to_string(i) + ": " + e.what());
    }
  }
  v.note = std::to_string(big) + " envelopes with a 512x512 mask and a 1e5x3 cloud";
}

std::vector<rewards::Tag> transcript_tags(std::initializer_list<std::string> turns) {
  std::vector<rewards::Tag> tags;
  for (const auto& t : turns)
    for (auto tag : rollout::tags_of(rollout::parse_actions(t))) tags.push_back(tag);
  return tags;
}

void format_rules(Verdict& v) {
  const std::string call = R"(<tool_call>{"name": "point1.detect_one", "arguments": {"obj_name": "cup"}}</tool_call>)";
  const std::string think = "<think>look</think>";
  const std::string answer = "<answer>yes</answer>";
  auto score = [](const std::vector<rewards::Tag>& t, bool require = false) { return rewards::format_score(t, require); };

  const auto good = transcript_tags({think + call, think + answer});
  v.expect(score(good) == 1.0 && score(good, true) == 1.0, "well-formed transcript scores 1");
  // Rule 1: every tool_call follows a think block.
  v.expect(score(transcript_tags({call, think + answer})) == 0.0, "tool_call without think scores 0");
  v.expect(score(transcript_tags({think + call + call, think + answer})) == 0.0, "second tool_call without think scores 0");
  // Rule 2: exactly one answer, last, after a think block.
  v.expect(score(transcript_tags({think + call, answer})) == 0.0, "answer without think scores 0");
  v.expect(score(transcript_tags({think + answer, think + answer})) == 0.0, "two answers score 0");
  v.expect(score(transcript_tags({think + answer + think})) == 0.0, "answer not last scores 0");
  v.expect(score(transcript_tags({think + call, think})) == 0.0, "no answer scores 0");
  // Rule 3: the optional at-least-one-tool_call requirement.
  const auto direct = transcript_tags({think + answer});
  v.expect(score(direct, false) == 1.0, "direct answer scores 1 without the requirement");
  v.expect(score(direct, true) == 0.0, "direct answer scores 0 with the requirement");
}

}  // namespace

int main() {
  const std::vector<Criterion> criteria{
      {"reward-closed-forms", 1000ms, reward_closed_forms},
      {"pose-guard", 10000ms, pose_guard},
      {"grpo-advantages-and-loss", 5000ms, grpo_properties},
      {"geometry-oracles", 0ms, geometry_oracles},
      {"rollout-loop-conformance", 0ms, loop_conformance},
      {"router-properties", 0ms, router_properties},
      {"wire-round-trip", 0ms, wire_round_trip},
      {"format-score-rules", 0ms, format_rules},
  };
  int failed = 0;
  for (const auto& c : criteria) {
    Verdict v;
    const auto t0 = SteadyClock::now();
    try {
      c.run(v);
    } catch (const std::exception& e) {
      v.expect(false, std::string("exception: ") + e.what());
    }
    const auto took = std::chrono::duration_cast<std::chrono::milliseconds>(SteadyClock::now() - t0);
    if (c.budget.count() > 0 && took > c.budget)
      v.expect(false, "took " + std::to_string(took.count()) + " ms, budget " + std::to_string(c.budget.count()) + " ms");
    const bool ok = v.failures.empty();
    failed += !ok;
    std::cout << (ok ? "PASS " : "FAIL ") << c.name << " (" << took.count() << " ms";
    if (!v.note.empty()) std::cout << "; " << v.note;
    std::cout << ")";
    if (!ok) {
      std::cout << ": " << v.failures.front();
      if (v.failures.size() > 1) std::cout << " (+" << v.failures.size() - 1 << " more)";
    }
    std::cout << "\n";
  }
  return failed == 0 ? 0 : 1;
}
