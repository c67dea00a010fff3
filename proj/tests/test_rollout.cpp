// SPDX-License-Identifier: Apache-2.0
#include <random>
#include <sstream>

#include <gtest/gtest.h>

#include "toolshed/desk.hpp"
#include "toolshed/process.hpp"
#include "toolshed/rollout.hpp"

namespace toolshed::rollout {
namespace {

TEST(Parse, Examples) {
  auto a = parse_actions(
      "<think>t</think><tool_call>{\"name\":\"sam2.segment_from_point\",\"arguments\":{\"x\":0.5,\"y\":0.5}}</tool_call>");
  EXPECT_EQ(a.thinks, std::vector<std::string>{"t"});
  ASSERT_EQ(a.tool_calls.size(), 1u);
  EXPECT_EQ(a.tool_calls[0].tool, "sam2");
  EXPECT_EQ(a.tool_calls[0].method, "segment_from_point");
  EXPECT_EQ(a.tool_calls[0].arguments["x"], 0.5);
  EXPECT_FALSE(a.answer);

  auto b = parse_actions("<think>t</think><answer>B</answer>");
  EXPECT_EQ(b.answer, "B");
  EXPECT_EQ(tags_of(b), (std::vector<Tag>{Tag::Think, Tag::Answer}));

  auto c = parse_actions("<tool_call>not json</tool_call>");
  EXPECT_TRUE(c.tool_calls.empty());
  ASSERT_EQ(c.malformed.size(), 1u);
  EXPECT_EQ(c.malformed[0].pos, 0u);
}

TEST(Parse, GrammarEdges) {
  auto unclosed = parse_actions("pre <think>never closed <answer>A</answer>");
  ASSERT_EQ(unclosed.malformed.size(), 1u);
  EXPECT_EQ(unclosed.malformed[0].pos, 4u);
  EXPECT_FALSE(unclosed.answer);  // swallowed by the unclosed think
  EXPECT_TRUE(unclosed.thinks.empty());

  auto cased = parse_actions("<THINK>x</THINK><Answer>y</Answer>");
  EXPECT_TRUE(cased.blocks.empty());

  auto nested = parse_actions("<think>a <answer>b</answer> c</think>");
  EXPECT_EQ(nested.thinks, std::vector<std::string>{"a <answer>b</answer> c"});
  EXPECT_FALSE(nested.answer);

  auto names = parse_actions(
      "<tool_call>{\"name\":\"sam2\"}</tool_call><tool_call>[1]</tool_call>"
      "<tool_call>{\"name\":\"a.b.c\",\"arguments\":{}}</tool_call><tool_call>{\"name\":\"x.y\",\"arguments\":3}</tool_call>");
  EXPECT_EQ(names.malformed.size(), 3u);
  ASSERT_EQ(names.tool_calls.size(), 1u);
  EXPECT_EQ(names.tool_calls[0].tool, "a");
  EXPECT_EQ(names.tool_calls[0].method, "b.c");

  auto two = parse_actions("<answer> A </answer><answer>B</answer>");
  EXPECT_EQ(two.answer, "A");
  EXPECT_EQ(tags_of(two).size(), 2u);
}

std::string random_text(std::mt19937_64& rng) {
  static const std::vector<std::string> frags{
      "<think>", "</think>", "<tool_call>", "</tool_call>", "<answer>", "</answer>", "hello", " ", "\n",
      "{\"name\":\"point1.detect_one\",\"arguments\":{\"obj_name\":\"cup\"}}", "{\"name\":1}", "<", ">", "</", "B",
      "<think>x</think>", "<tool_call>{}</tool_call>", "<Think>", "{\"name\":\"a.b\"}"};
  std::string s;
  const int n = int(rng() % 12);
  for (int i = 0; i < n; ++i) s += frags[rng() % frags.size()];
  return s;
}

TEST(Parse, TotalIdempotentAndOrdered) {
  std::mt19937_64 rng(17);
  for (int trial = 0; trial < 3000; ++trial) {
    const auto text = random_text(rng);
    ParsedAction p;
    ASSERT_NO_THROW(p = parse_actions(text)) << text;
    std::size_t prev_end = 0;
    for (const auto& b : p.blocks) {
      EXPECT_GE(b.begin, prev_end) << text;
      EXPECT_LT(b.begin, b.end) << text;
      prev_end = b.end;
    }
    EXPECT_EQ(parse_actions(serialize(p)), p) << text;
  }
}

// ---------------------------------------------------------------------------

std::shared_ptr<const SceneFixture> scene() {
  static auto f = [] {
    auto s = desk::render("desk", "Where is the mug?",
                          {{"red mug", {0.10, 0.10, 0.35, 0.45}, {200, 30, 30}, 0.12},
                           {"blue box", {0.55, 0.40, 0.90, 0.85}, {30, 30, 180}, 0.08}},
                          11);
    s.truth.task = TaskKind::Choice;
    s.truth.choice = "A";
    return std::make_shared<const SceneFixture>(std::move(s));
  }();
  return f;
}

struct Rig {
  std::shared_ptr<FixtureIndex> fixtures = std::make_shared<FixtureIndex>(FixtureIndex{{"desk", scene()}});
  Registry reg;
  Rig() { register_all(reg, default_specs(make_mock_toolbox()), make_mock_toolbox(), fixtures, {}); }
  RolloutInput input() const { return {"desk", scene()->question, "desk", scene()->image_attachment, ""}; }
};

ScriptedPolicy script(std::vector<std::string> turns) {
  std::map<ScriptedPolicy::Key, std::string> m;
  for (std::size_t i = 0; i < turns.size(); ++i) m[{"*", -1, int(i) + 1}] = turns[i];
  return ScriptedPolicy(std::move(m));
}

const std::string kDetect =
    "<think>find it</think><tool_call>{\"name\":\"point1.detect_one\",\"arguments\":{\"obj_name\":\"red mug\"}}</tool_call>";

std::vector<Role> roles(const RolloutResult& r) {
  std::vector<Role> out;
  for (const auto& t : r.history.turns) out.push_back(t.role);
  return out;
}

TEST(Rollout, AnswerOnFirstTurn) {
  Rig rig;
  auto pol = script({"<think>easy</think><answer>A</answer>"});
  auto r = run_rollout(rig.reg, pol, rig.input(), {}, 0, 1);
  EXPECT_EQ(r.turns_used, 1);
  EXPECT_EQ(r.tool_call_count, 0);
  EXPECT_EQ(r.answer, "A");
  EXPECT_EQ(rewards::format_score(r.tags), 1.0);
}

TEST(Rollout, DetectThenAnswer) {
  Rig rig;
  auto pol = script({kDetect, "<think>got it</think><answer>(0.225, 0.275)</answer>"});
  auto r = run_rollout(rig.reg, pol, rig.input(), {}, 0, 1);
  EXPECT_EQ(roles(r), (std::vector<Role>{Role::User, Role::Assistant, Role::Tool, Role::Assistant}));
  EXPECT_TRUE(r.answer);
  ASSERT_TRUE(r.history.turns[2].call);
  EXPECT_EQ(r.history.turns[2].call->status, Status::Ok);
  EXPECT_EQ(r.history.turns[2].call->variables, std::vector<std::string>{"red_mug_detection"});
  EXPECT_EQ(r.history.turns[2].images.size(), 1u);
  EXPECT_NE(r.history.turns[2].text.find("$red_mug_detection"), std::string::npos);
}

TEST(Rollout, ExhaustionWithoutAnswer) {
  Rig rig;
  auto pol = script({kDetect, kDetect, kDetect, kDetect});
  RolloutConfig cfg;
  cfg.t_max = 3;
  auto r = run_rollout(rig.reg, pol, rig.input(), cfg, 0, 1);
  EXPECT_FALSE(r.answer);
  EXPECT_TRUE(r.exhausted);
  EXPECT_EQ(r.turns_used, 3);
  EXPECT_EQ(r.tool_call_count, 3);
}

TEST(Rollout, SecondCallSeesFirstCallsVariables) {
  Rig rig;
  auto pol = script({"<think>a</think><tool_call>{\"name\":\"code_executor.exec\",\"arguments\":{\"code\":\"d = norm([3,4])\"}}</tool_call>"
                     "<think>b</think><tool_call>{\"name\":\"code_executor.eval\",\"arguments\":{\"expression\":\"d * 2\"}}</tool_call>",
                     "<think>c</think><answer>10</answer>"});
  auto r = run_rollout(rig.reg, pol, rig.input(), {}, 0, 1);
  ASSERT_EQ(r.history.turns.size(), 5u);
  EXPECT_NE(r.history.turns[3].text.find("Result: 10"), std::string::npos) << r.history.turns[3].text;
}

TEST(Rollout, DetectExecChain) {
  Rig rig;
  auto pol = script({kDetect,
                     "<think>x</think><tool_call>{\"name\":\"code_executor.eval\",\"arguments\":{\"expression\":\"red_mug_detection[0]\"}}</tool_call>",
                     "<think>y</think><answer>done</answer>"});
  auto r = run_rollout(rig.reg, pol, rig.input(), {}, 0, 1);
  const auto expect = interp::format_number(scene()->objects.at("red mug").points[0].x);
  EXPECT_NE(r.history.turns[4].text.find("Result: " + expect), std::string::npos) << r.history.turns[4].text;
  // Also reachable by "$" reference in arguments.
  auto pol2 = script({kDetect,
                      "<think>x</think><tool_call>{\"name\":\"sam2.segment_from_points\",\"arguments\":{\"points\":[\"$red_mug_detection\"]}}</tool_call>",
                      "<think>y</think><answer>done</answer>"});
  auto r2 = run_rollout(rig.reg, pol2, rig.input(), {}, 0, 1);
  EXPECT_EQ(r2.history.turns[4].call->status, Status::Ok) << r2.history.turns[4].text;
}

TEST(Rollout, MalformedAndFailingCallsBecomeToolTurns) {
  Rig rig;
  auto pol = script({"<think>a</think><tool_call>oops</tool_call>",
                     "<think>b</think><tool_call>{\"name\":\"point1.detect_one\",\"arguments\":{\"obj_name\":\"banana\"}}</tool_call>",
                     "<think>c</think><tool_call>{\"name\":\"nope.x\",\"arguments\":{}}</tool_call>",
                     "<think>d</think><tool_call>{\"name\":\"sam2.segment_from_points\",\"arguments\":{\"points\":\"$ghost\"}}</tool_call>",
                     "<think>e</think><answer>B</answer>"});
  auto r = run_rollout(rig.reg, pol, rig.input(), {}, 0, 1);
  ASSERT_EQ(r.history.turns.size(), 10u);
  EXPECT_NE(r.history.turns[2].text.find("malformed"), std::string::npos);
  EXPECT_FALSE(r.history.turns[2].call);
  EXPECT_EQ(r.history.turns[4].call->status, Status::ToolError);
  EXPECT_EQ(r.history.turns[6].call->status, Status::UnknownTool);
  EXPECT_EQ(r.history.turns[8].call->status, Status::BadArgs);
  EXPECT_EQ(r.answer, "B");
  EXPECT_EQ(rewards::format_score(r.tags), 0.0);  // malformed block
}

TEST(Rollout, PolicyFailureIsRolloutError) {
  Rig rig;
  auto pol = script({kDetect});
  EXPECT_THROW(run_rollout(rig.reg, pol, rig.input(), {}, 0, 1), RolloutError);
}

TEST(Rollout, CancelAborts) {
  Rig rig;
  auto pol = script({kDetect, kDetect});
  CancelToken tok;
  std::vector<std::string> events;
  auto r = run_rollout(rig.reg, pol, rig.input(), {}, 0, 1, &tok, [&](const Event& e) {
    events.push_back(e.type);
    if (e.type == "tool_result") tok.cancel();
  });
  EXPECT_TRUE(r.aborted);
  EXPECT_EQ(events, (std::vector<std::string>{"think", "tool_call", "tool_result", "aborted"}));
}

TEST(Rollout, TurnAlternation) {
  Rig rig;
  std::mt19937_64 rng(3);
  const std::vector<std::string> moves{kDetect, "<think>x</think>", "<think>y</think><answer>A</answer>",
                                       "<tool_call>junk</tool_call>", kDetect + kDetect};
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<std::string> turns;
    for (int i = 0; i < 5; ++i) turns.push_back(moves[rng() % moves.size()]);
    auto pol = script(turns);
    RolloutConfig cfg;
    cfg.t_max = 5;
    auto r = run_rollout(rig.reg, pol, rig.input(), cfg, 0, 1);
    EXPECT_LE(r.turns_used, cfg.t_max);
    const auto& h = r.history.turns;
    EXPECT_EQ(h[0].role, Role::User);
    for (std::size_t i = 1; i < h.size(); ++i) {
      if (h[i].role == Role::Tool) {
        EXPECT_NE(h[i - 1].role, Role::User);
      }
      if (h[i].role == Role::Assistant && h[i - 1].role == Role::Assistant) {
        const auto prev = parse_actions(h[i - 1].text);
        EXPECT_TRUE(std::none_of(prev.blocks.begin(), prev.blocks.end(), [](const Block& b) { return b.name == "tool_call"; }));
      }
    }
  }
}

TEST(Group, DeterministicAndOrdered) {
  Rig rig;
  auto pol = script({kDetect, "<think>ok</think><answer>A</answer>"});
  RolloutConfig cfg;
  cfg.n_group = 5;
  cfg.seed = 42;
  auto g = run_group(rig.reg, pol, rig.input(), cfg);
  ASSERT_EQ(g.size(), 5u);
  std::set<std::uint64_t> seeds;
  for (const auto& s : g) {
    ASSERT_TRUE(s.result);
    EXPECT_EQ(s.result->answer, "A");
    seeds.insert(s.result->seed);
  }
  EXPECT_EQ(seeds.size(), 5u);
  for (int i = 0; i < 5; ++i) EXPECT_EQ(g[std::size_t(i)].result->seed, rollout_seed(42, "desk", i));

  cfg.n_group = 1;
  EXPECT_EQ(run_group(rig.reg, pol, rig.input(), cfg).size(), 1u);
}

TEST(Group, SeededDetectorVariesAcrossRollouts) {
  Rig rig;
  auto pol = script({"<think>a</think><tool_call>{\"name\":\"point2.detect_one\",\"arguments\":{\"obj_name\":\"red mug\"}}</tool_call>",
                     "<think>b</think><answer>x</answer>"});
  RolloutConfig cfg;
  cfg.n_group = 4;
  auto a = run_group(rig.reg, pol, rig.input(), cfg);
  auto b = run_group(rig.reg, pol, rig.input(), cfg);
  std::set<std::string> texts;
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].result->history.turns[2].text, b[i].result->history.turns[2].text);
    texts.insert(a[i].result->history.turns[2].text);
  }
  EXPECT_GT(texts.size(), 1u);
}

TEST(Group, FailedSlotsAreMarked) {
  Rig rig;
  std::map<ScriptedPolicy::Key, std::string> m{{{"*", 0, 1}, "<think>a</think><answer>A</answer>"}};
  ScriptedPolicy pol(m);
  RolloutConfig cfg;
  cfg.n_group = 2;
  auto g = run_group(rig.reg, pol, rig.input(), cfg);
  EXPECT_TRUE(g[0].result);
  EXPECT_FALSE(g[1].result);
  EXPECT_NE(g[1].error.find("no turn 1"), std::string::npos);
  cfg.fail_slot_on_error = false;
  EXPECT_THROW(run_group(rig.reg, pol, rig.input(), cfg), RolloutError);
}

TEST(Scripted, JsonlLookup) {
  std::istringstream in(R"({"turn": 1, "text": "generic"}
{"sample_id": "s1", "turn": 1, "text": "s1 any"}
{"sample_id": "s1", "rollout": 2, "turn": 1, "text": "s1 r2"}
)");
  auto pol = ScriptedPolicy::from_jsonl(in);
  DialogueHistory h;
  const std::string s1 = "s1", s2 = "s2", sys;
  EXPECT_EQ(pol.next({s1, 2, 1, h, sys, 0}), "s1 r2");
  EXPECT_EQ(pol.next({s1, 0, 1, h, sys, 0}), "s1 any");
  EXPECT_EQ(pol.next({s2, 0, 1, h, sys, 0}), "generic");
  EXPECT_THROW(pol.next({s2, 0, 2, h, sys, 0}), RolloutError);
  std::istringstream bad("{\"text\": \"x\"}\n");
  EXPECT_THROW(ScriptedPolicy::from_jsonl(bad), ConfigError);
}

}  // namespace
}  // namespace toolshed::rollout
