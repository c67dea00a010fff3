// SPDX-License-Identifier: Apache-2.0
//
// Batch runner, trace records, scoring and answer balancing.
//
// A trace file is JSONL with sorted keys, one record per rollout. Timing lives
// in a sidecar (<traces>.timing.jsonl) so trace files compare byte-for-byte.
#pragma once

#include <condition_variable>
#include <fstream>
#include <random>
#include <regex>
#include <set>
#include <thread>

#include "toolshed/grpo.hpp"
#include "toolshed/rollout.hpp"

namespace toolshed::harness {

using rollout::Role;
using rollout::RolloutConfig;
using rollout::RolloutResult;

// ---------------------------------------------------------------------------
// Answer parsing

namespace detail {

inline std::vector<double> numbers_in(const std::string& s) {
  static const std::regex num(R"([-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?)");
  std::vector<double> out;
  for (auto it = std::sregex_iterator(s.begin(), s.end(), num); it != std::sregex_iterator(); ++it)
    out.push_back(std::stod(it->str()));
  return out;
}

inline std::vector<Point2> pairs(const std::vector<double>& v) {
  std::vector<Point2> out;
  for (std::size_t i = 0; i + 1 < v.size(); i += 2) out.push_back({v[i], v[i + 1]});
  return out;
}

inline std::optional<rewards::GraspPoints> grasp_in(const std::string& s) {
  try {
    auto j = json::parse(s);
    if (j.is_object() && j.contains("center")) return fixture_detail::grasp_from(j).points;
  } catch (const std::exception&) {
  }
  const auto p = pairs(numbers_in(s));
  if (p.size() < 5) return std::nullopt;
  return rewards::GraspPoints{p[0], p[1], p[2], p[3], p[4]};
}

}  // namespace detail

/// Accuracy reward of `answer` against the fixture's ground truth. Numeric
/// answers are read leniently: every number in the text, in order.
inline double accuracy_reward(const GroundTruth& t, const std::optional<std::string>& answer) {
  using namespace detail;
  if (!answer) return 0.0;
  const auto& a = *answer;
  switch (t.task) {
    case TaskKind::Choice: return rewards::binary_reward(a, t.choice);
    case TaskKind::Boxes: {
      const auto v = numbers_in(a);
      std::vector<rewards::Box2> boxes;
      for (std::size_t i = 0; i + 3 < v.size(); i += 4) boxes.push_back({v[i], v[i + 1], v[i + 2], v[i + 3]});
      return rewards::miou_reward(boxes, t.boxes);
    }
    case TaskKind::Point: {
      const auto pts = pairs(numbers_in(a));
      if (pts.empty()) return 0.0;
      double sum = 0;
      for (auto p : pts) sum += rewards::nndc_reward(p, *t.region);
      return sum / double(pts.size());
    }
    case TaskKind::Pose: {
      const auto v = numbers_in(a);
      if (v.size() % 2 != 0) return 0.0;
      return rewards::pose_hull_iou_reward(pairs(v), t.corners);
    }
    case TaskKind::Grasp: {
      const auto g = grasp_in(a);
      if (!g) return 0.0;
      return rewards::nnce_reward(*g, t.grasp->points, t.grasp->gripper_width);
    }
  }
  return 0.0;
}

struct Score {
  double accuracy = 0;
  double format = 0;
  double reward = 0;
};

inline Score score_rollout(const GroundTruth& t, const std::optional<std::string>& answer,
                           std::span<const rewards::Tag> tags, double format_lambda) {
  Score s;
  s.accuracy = accuracy_reward(t, answer);
  s.format = tags.empty() ? 0.0 : rewards::format_score(tags);
  s.reward = rewards::combine_with_format(s.accuracy, s.format, format_lambda);
  return s;
}

// ---------------------------------------------------------------------------
// Balancing

/// Largest subset of Choice fixtures whose answer classes are equally sized.
/// Which members of a larger class survive is a seeded draw; output keeps the
/// input order.
inline std::vector<std::shared_ptr<const SceneFixture>> balance_answers(
    const std::vector<std::shared_ptr<const SceneFixture>>& fixtures, std::uint64_t seed = 0) {
  std::map<std::string, std::vector<std::size_t>> classes;
  for (std::size_t i = 0; i < fixtures.size(); ++i) {
    if (fixtures[i]->truth.task != TaskKind::Choice) throw BadArgs(fixtures[i]->id + " is not a choice question");
    classes[rewards::detail::normalize_choice(fixtures[i]->truth.choice)].push_back(i);
  }
  if (classes.size() < 2) throw BadArgs("balancing needs at least two answer classes");
  std::size_t m = SIZE_MAX;
  for (const auto& [k, v] : classes) m = std::min(m, v.size());
  std::vector<bool> keep(fixtures.size(), false);
  std::mt19937_64 rng(seed);
  for (auto& [k, v] : classes) {
    // Fisher-Yates with our own draw so the result does not depend on the
    // standard library's shuffle.
    for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rng() % i]);
    for (std::size_t i = 0; i < m; ++i) keep[v[i]] = true;
  }
  std::vector<std::shared_ptr<const SceneFixture>> out;
  for (std::size_t i = 0; i < fixtures.size(); ++i)
    if (keep[i]) out.push_back(fixtures[i]);
  return out;
}

/// Balances the Choice fixtures and keeps every other fixture as is.
inline std::vector<std::shared_ptr<const SceneFixture>> balance_dataset(
    const std::vector<std::shared_ptr<const SceneFixture>>& fixtures, std::uint64_t seed) {
  std::vector<std::shared_ptr<const SceneFixture>> choice;
  for (const auto& f : fixtures)
    if (f->truth.task == TaskKind::Choice) choice.push_back(f);
  std::set<const SceneFixture*> kept;
  for (const auto& f : balance_answers(choice, seed)) kept.insert(f.get());
  std::vector<std::shared_ptr<const SceneFixture>> out;
  for (const auto& f : fixtures)
    if (f->truth.task != TaskKind::Choice || kept.count(f.get())) out.push_back(f);
  return out;
}

// ---------------------------------------------------------------------------
// Trace records

inline std::string seed_hex(std::uint64_t s) {
  char buf[20];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(s));
  return buf;
}

inline std::string tool_of(const std::string& call_name) { return call_name.substr(0, call_name.find('.')); }

inline json turns_to_json(const rollout::DialogueHistory& h) {
  json turns = json::array();
  for (const auto& t : h.turns) {
    json images = json::array();
    for (const auto& img : t.images)
      if (img) images.push_back(sha256_hex(img->bytes));
    json tj{{"role", std::string(rollout::to_string(t.role))}, {"text", t.text}, {"images", images}};
    if (t.call)
      tj["tool"] = {{"name", t.call->name},
                    {"arguments", t.call->arguments},
                    {"status", std::string(to_string(t.call->status))},
                    {"variables", t.call->variables}};
    else if (t.role == Role::Tool)
      tj["tool"] = {{"status", "Malformed"}};
    turns.push_back(std::move(tj));
  }
  return turns;
}

inline json timing_to_json(const std::string& sample_id, int idx, const RolloutResult& r) {
  json policy = json::array(), tool = json::array();
  for (const auto& t : r.history.turns) {
    if (t.role == Role::Assistant) policy.push_back(t.policy_ms);
    if (t.call) tool.push_back(t.call->ms);
  }
  return {{"sample_id", sample_id}, {"rollout_idx", idx}, {"policy_ms", policy}, {"tool_ms", tool}};
}

/// Tags of all assistant turns, as the format score sees them.
inline std::vector<rewards::Tag> tags_of_turns(const json& turns) {
  std::vector<rewards::Tag> tags;
  for (const auto& t : turns)
    if (t.at("role") == "assistant")
      for (auto tag : rollout::tags_of(rollout::parse_actions(t.at("text").get<std::string>()))) tags.push_back(tag);
  return tags;
}

/// Fills "advantage" on each record of one group, in rollout order. Groups of
/// one get null.
inline void assign_advantages(std::vector<json>& group) {
  if (group.size() < 2) {
    for (auto& r : group) r["advantage"] = nullptr;
    return;
  }
  std::vector<double> rewards;
  for (const auto& r : group) rewards.push_back(r.at("reward").get<double>());
  const auto adv = grpo::group_advantages(rewards);
  for (std::size_t i = 0; i < group.size(); ++i) group[i]["advantage"] = adv[i];
}

// ---------------------------------------------------------------------------
// Report

struct TaskSummary {
  std::uint64_t rollouts = 0;
  double reward_sum = 0;
  double accuracy_sum = 0;
};

struct BatchReport {
  std::uint64_t rollouts = 0;
  std::set<std::string> samples;
  std::map<std::string, TaskSummary> per_task;
  std::map<std::string, std::uint64_t> answers;  // "<none>" when absent
  std::map<std::string, std::uint64_t> tool_usage;
  std::map<std::string, std::uint64_t> failures{
      {"Timeout", 0}, {"ToolError", 0}, {"malformed", 0}, {"exhausted", 0}, {"rollout_error", 0}};

  double mean_reward() const {
    double s = 0;
    for (const auto& [k, t] : per_task) s += t.reward_sum;
    return rollouts ? s / double(rollouts) : 0.0;
  }

  json to_json() const {
    json tasks = json::object();
    for (const auto& [k, t] : per_task)
      tasks[k] = {{"rollouts", t.rollouts},
                  {"mean_reward", t.rollouts ? t.reward_sum / double(t.rollouts) : 0.0},
                  {"mean_accuracy", t.rollouts ? t.accuracy_sum / double(t.rollouts) : 0.0}};
    return {{"rollouts", rollouts},   {"samples", samples.size()},   {"mean_reward", mean_reward()},
            {"per_task", tasks},      {"answers", answers},          {"tool_usage", tool_usage},
            {"failures", failures}};
  }
};

inline constexpr const char* kNoAnswer = "<none>";

/// Adds one trace record to the report.
inline void tally(BatchReport& rep, const json& rec) {
  ++rep.rollouts;
  rep.samples.insert(rec.at("sample_id").get<std::string>());
  auto& task = rep.per_task[rec.at("task").get<std::string>()];
  ++task.rollouts;
  task.reward_sum += rec.at("reward").get<double>();
  task.accuracy_sum += rec.at("accuracy").get<double>();
  const auto& ans = rec.at("answer");
  ++rep.answers[ans.is_null() ? std::string(kNoAnswer) : rollout::parse_detail::trim(ans.get<std::string>())];
  if (rec.at("status") != "ok") ++rep.failures["rollout_error"];
  if (rec.value("exhausted", false)) ++rep.failures["exhausted"];
  for (const auto& t : rec.at("turns")) {
    if (t.at("role") == "assistant") {
      rep.failures["malformed"] += rollout::parse_actions(t.at("text").get<std::string>()).malformed.size();
      continue;
    }
    if (!t.contains("tool") || !t.at("tool").contains("name")) continue;
    const auto& tool = t.at("tool");
    ++rep.tool_usage[tool_of(tool.at("name").get<std::string>())];
    const auto status = tool.at("status").get<std::string>();
    if (status == "Timeout" || status == "ToolError") ++rep.failures[status];
  }
}

// ---------------------------------------------------------------------------
// Batch runner

struct BatchConfig {
  RolloutConfig rollout;
  int parallel = 4;           // samples in flight
  double format_lambda = 0;   // 0: reward is the accuracy reward alone
  std::string system_prompt;
};

/// Receives completed records in dataset order.
struct TraceSink {
  std::function<void(const json& record)> trace;
  std::function<void(const json& timing)> timing;
};

/// Writes records as JSONL, flushing after each line.
class TraceFileWriter {
 public:
  explicit TraceFileWriter(const std::filesystem::path& out)
      : traces_(out, std::ios::trunc), timing_(out.string() + ".timing.jsonl", std::ios::trunc) {
    if (!traces_ || !timing_) throw ConfigError("cannot write " + out.string());
  }

  TraceSink sink() {
    return {[this](const json& r) { traces_ << r.dump() << '\n' << std::flush; },
            [this](const json& t) { timing_ << t.dump() << '\n' << std::flush; }};
  }

 private:
  std::ofstream traces_, timing_;
};

inline json make_record(const SceneFixture& f, int idx, const rollout::GroupSlot& slot, double format_lambda) {
  json rec{{"sample_id", f.id}, {"rollout_idx", idx}, {"task", std::string(to_string(f.truth.task))},
           {"format_lambda", format_lambda}};
  if (!slot.result) {
    rec.update({{"status", "failed"}, {"error", slot.error}, {"turns", json::array()}, {"answer", nullptr},
                {"exhausted", false}, {"turns_used", 0}, {"tool_calls", 0}, {"seed", nullptr},
                {"accuracy", 0.0}, {"format", 0.0}, {"reward", 0.0}});
    return rec;
  }
  const auto& r = *slot.result;
  const auto s = score_rollout(f.truth, r.answer, r.tags, format_lambda);
  rec.update({{"status", "ok"},
              {"turns", turns_to_json(r.history)},
              {"answer", r.answer ? json(*r.answer) : json(nullptr)},
              {"exhausted", r.exhausted},
              {"turns_used", r.turns_used},
              {"tool_calls", r.tool_call_count},
              {"seed", seed_hex(r.seed)},
              {"accuracy", s.accuracy},
              {"format", s.format},
              {"reward", s.reward}});
  return rec;
}

struct BatchOutput {
  BatchReport report;
  std::vector<json> records;
};

/// Runs one rollout group per fixture, `parallel` fixtures at a time. Records
/// reach the sink one group at a time, in fixture order, as soon as every
/// earlier group has been written. Throws RegistryUnreachable.
inline BatchOutput run_batch(Router& router, const std::vector<std::shared_ptr<const SceneFixture>>& fixtures,
                             rollout::Policy& policy, const BatchConfig& cfg, const TraceSink& sink = {}) {
  rollout::validate(cfg.rollout);
  if (cfg.parallel < 1) throw BadArgs("parallel must be >= 1");
  const std::size_t n = fixtures.size();
  std::vector<std::optional<std::vector<std::pair<json, json>>>> done(n);
  std::size_t next_job = 0, next_write = 0;
  std::exception_ptr error;
  std::mutex mu;
  BatchOutput out;

  auto flush_locked = [&] {
    while (next_write < n && done[next_write]) {
      for (auto& [rec, timing] : *done[next_write]) {
        if (sink.trace) sink.trace(rec);
        if (sink.timing && !timing.is_null()) sink.timing(timing);
        tally(out.report, rec);
        out.records.push_back(std::move(rec));
      }
      done[next_write].reset();
      ++next_write;
    }
  };

  auto worker = [&] {
    for (;;) {
      std::size_t i;
      {
        std::lock_guard lk(mu);
        if (error || next_job >= n) return;
        i = next_job++;
      }
      try {
        const auto& f = *fixtures[i];
        rollout::RolloutInput in{f.id, f.question, f.id, f.image_attachment, cfg.system_prompt};
        const auto slots = rollout::run_group(router, policy, in, cfg.rollout);
        std::vector<json> recs;
        for (std::size_t k = 0; k < slots.size(); ++k) recs.push_back(make_record(f, int(k), slots[k], cfg.format_lambda));
        assign_advantages(recs);
        std::vector<std::pair<json, json>> group;
        for (std::size_t k = 0; k < slots.size(); ++k)
          group.emplace_back(std::move(recs[k]),
                             slots[k].result ? timing_to_json(f.id, int(k), *slots[k].result) : json(nullptr));
        std::lock_guard lk(mu);
        done[i] = std::move(group);
        flush_locked();
      } catch (...) {
        std::lock_guard lk(mu);
        if (!error) error = std::current_exception();
        return;
      }
    }
  };

  std::vector<std::thread> threads;
  for (int t = 0; t < std::min<int>(cfg.parallel, int(std::max<std::size_t>(n, 1))); ++t) threads.emplace_back(worker);
  for (auto& t : threads) t.join();
  if (error) std::rethrow_exception(error);
  return out;
}

// ---------------------------------------------------------------------------
// Offline scoring

inline std::vector<json> read_traces(const std::filesystem::path& p) {
  std::ifstream in(p);
  if (!in) throw ScoreError("cannot open " + p.string());
  std::vector<json> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(json::parse(line));
    } catch (const json::exception& e) {
      throw ScoreError(p.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

struct ScoreOutcome {
  BatchReport report;
  std::vector<json> records;  // with recomputed scores
  std::size_t mismatches = 0;  // records whose stored scores differ
};

/// Recomputes every score from the stored turns and answer. Groups are the
/// records sharing a sample_id, ordered by rollout_idx.
inline ScoreOutcome score_traces(std::vector<json> records, const FixtureIndex& fixtures) {
  ScoreOutcome out;
  std::map<std::string, std::vector<std::size_t>> groups;
  std::vector<json> stored = records;
  for (std::size_t i = 0; i < records.size(); ++i) {
    auto& rec = records[i];
    try {
      const auto id = rec.at("sample_id").get<std::string>();
      auto it = fixtures.find(id);
      if (it == fixtures.end()) throw ScoreError("trace refers to unknown sample '" + id + "'");
      groups[id].push_back(i);
      if (rec.at("status") != "ok") {
        rec["accuracy"] = 0.0, rec["format"] = 0.0, rec["reward"] = 0.0;
        continue;
      }
      const auto& a = rec.at("answer");
      const auto answer = a.is_null() ? std::nullopt : std::optional<std::string>(a.get<std::string>());
      const auto s = score_rollout(it->second->truth, answer, tags_of_turns(rec.at("turns")), rec.value("format_lambda", 0.0));
      rec["accuracy"] = s.accuracy, rec["format"] = s.format, rec["reward"] = s.reward;
    } catch (const json::exception& e) {
      throw ScoreError("trace record " + std::to_string(i + 1) + ": " + e.what());
    }
  }
  for (auto& [id, idx] : groups) {
    std::stable_sort(idx.begin(), idx.end(),
                     [&](std::size_t a, std::size_t b) { return records[a].at("rollout_idx") < records[b].at("rollout_idx"); });
    std::vector<json> g;
    for (auto i : idx) g.push_back(records[i]);
    assign_advantages(g);
    for (std::size_t k = 0; k < idx.size(); ++k) records[idx[k]] = std::move(g[k]);
  }
  for (std::size_t i = 0; i < records.size(); ++i) {
    for (const char* k : {"accuracy", "format", "reward", "advantage"})
      if (records[i].value(k, json()) != stored[i].value(k, json())) {
        ++out.mismatches;
        break;
      }
    tally(out.report, records[i]);
  }
  out.records = std::move(records);
  return out;
}

}  // namespace toolshed::harness
