// SPDX-License-Identifier: Apache-2.0
//
// The multi-turn tool-calling loop: query the policy, parse its tagged
// output, run tool calls in order through the router, feed results back, stop
// on an answer or after T_max turns.
#pragma once

#include <atomic>
#include <fstream>
#include <functional>
#include <future>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "toolshed/digest.hpp"
#include "toolshed/registry.hpp"
#include "toolshed/rewards.hpp"

// After the project headers: resolv.h, pulled in here, defines a `_res` macro
// that breaks Eigen.
#include <httplib.h>

namespace toolshed::rollout {

using rewards::Tag;

// ---------------------------------------------------------------------------
// Parsing

struct ParsedCall {
  std::string name;  // "tool.method"
  std::string tool;
  std::string method;
  json arguments = json::object();
  std::string raw;  // block body as written

  friend bool operator==(const ParsedCall& a, const ParsedCall& b) {
    return a.name == b.name && a.arguments == b.arguments;
  }
};

struct Diagnostic {
  std::size_t pos = 0;
  std::string reason;
};

/// One tag block in textual order. `call` indexes tool_calls for well-formed
/// calls.
struct Block {
  Tag tag = Tag::Think;  // Malformed for unusable blocks
  std::string name;      // "think", "tool_call" or "answer"
  std::string body;
  std::size_t begin = 0, end = 0;
  bool closed = true;
  std::optional<std::size_t> call;
  std::optional<std::size_t> diagnostic;
};

struct ParsedAction {
  std::vector<std::string> thinks;
  std::vector<ParsedCall> tool_calls;
  std::optional<std::string> answer;
  std::vector<Diagnostic> malformed;
  std::vector<Block> blocks;

  /// Content equality; offsets are ignored.
  friend bool operator==(const ParsedAction& a, const ParsedAction& b) {
    if (a.thinks != b.thinks || a.tool_calls != b.tool_calls || a.answer != b.answer) return false;
    if (a.malformed.size() != b.malformed.size() || a.blocks.size() != b.blocks.size()) return false;
    for (std::size_t i = 0; i < a.malformed.size(); ++i)
      if (a.malformed[i].reason != b.malformed[i].reason) return false;
    for (std::size_t i = 0; i < a.blocks.size(); ++i)
      if (a.blocks[i].tag != b.blocks[i].tag || a.blocks[i].name != b.blocks[i].name ||
          a.blocks[i].body != b.blocks[i].body || a.blocks[i].closed != b.blocks[i].closed)
        return false;
    return true;
  }
};

namespace parse_detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

inline void parse_call(ParsedAction& out, Block& blk) {
  auto fail = [&](std::string why) {
    blk.tag = Tag::Malformed;
    blk.diagnostic = out.malformed.size();
    out.malformed.push_back({blk.begin, "tool_call: " + why});
  };
  json j;
  try {
    j = json::parse(blk.body);
  } catch (const json::exception&) {
    return fail("body is not valid JSON");
  }
  if (!j.is_object()) return fail("body must be a JSON object");
  if (!j.contains("name") || !j["name"].is_string()) return fail("missing string field \"name\"");
  ParsedCall c;
  c.name = j["name"].get<std::string>();
  const auto dot = c.name.find('.');
  if (dot == std::string::npos || dot == 0 || dot + 1 == c.name.size())
    return fail("name \"" + c.name + "\" must have the form tool.method");
  c.tool = c.name.substr(0, dot);
  c.method = c.name.substr(dot + 1);
  if (j.contains("arguments")) {
    if (!j["arguments"].is_object()) return fail("\"arguments\" must be a JSON object");
    c.arguments = j["arguments"];
  }
  c.raw = blk.body;
  blk.call = out.tool_calls.size();
  out.tool_calls.push_back(std::move(c));
}

}  // namespace parse_detail

/// Total: never throws. Tags are case-sensitive and do not nest; an unclosed
/// tag swallows the rest of the text and is malformed.
inline ParsedAction parse_actions(std::string_view raw) {
  static constexpr std::string_view names[] = {"think", "tool_call", "answer"};
  ParsedAction out;
  std::size_t i = 0;
  while (i < raw.size()) {
    const auto lt = raw.find('<', i);
    if (lt == std::string_view::npos) break;
    std::optional<std::size_t> which;
    for (std::size_t k = 0; k < 3; ++k) {
      const std::string open = "<" + std::string(names[k]) + ">";
      if (raw.substr(lt, open.size()) == open) which = k;
    }
    if (!which) {
      i = lt + 1;
      continue;
    }
    const std::string name(names[*which]);
    const std::string open = "<" + name + ">", close = "</" + name + ">";
    const auto body_begin = lt + open.size();
    const auto end = raw.find(close, body_begin);
    Block blk;
    blk.name = name;
    blk.begin = lt;
    if (end == std::string_view::npos) {
      blk.body = std::string(raw.substr(body_begin));
      blk.end = raw.size();
      blk.closed = false;
      blk.tag = Tag::Malformed;
      blk.diagnostic = out.malformed.size();
      out.malformed.push_back({lt, "unclosed <" + name + ">"});
      out.blocks.push_back(std::move(blk));
      break;
    }
    blk.body = std::string(raw.substr(body_begin, end - body_begin));
    blk.end = end + close.size();
    if (*which == 0) {
      blk.tag = Tag::Think;
      out.thinks.push_back(blk.body);
    } else if (*which == 1) {
      blk.tag = Tag::ToolCall;
      parse_detail::parse_call(out, blk);
    } else {
      blk.tag = Tag::Answer;
      if (!out.answer) out.answer = parse_detail::trim(blk.body);
    }
    i = blk.end;
    out.blocks.push_back(std::move(blk));
  }
  return out;
}

/// Writes the blocks back as tagged text.
inline std::string serialize(const ParsedAction& p) {
  std::string s;
  for (const auto& b : p.blocks) {
    s += "<" + b.name + ">" + b.body;
    if (b.closed) s += "</" + b.name + ">";
  }
  return s;
}

/// Structural tags of one assistant message, for the format score.
inline std::vector<Tag> tags_of(const ParsedAction& p) {
  std::vector<Tag> t;
  for (const auto& b : p.blocks) t.push_back(b.tag);
  return t;
}

// ---------------------------------------------------------------------------
// Dialogue

enum class Role { User, Assistant, Tool };

inline std::string_view to_string(Role r) {
  switch (r) {
    case Role::User: return "user";
    case Role::Assistant: return "assistant";
    case Role::Tool: return "tool";
  }
  return "user";
}

struct CallRecord {
  std::string name;
  json arguments;
  Status status = Status::Ok;
  std::vector<std::string> variables;
  double ms = 0;  // timing; excluded from golden comparisons
};

struct Turn {
  Role role = Role::User;
  std::string text;
  std::vector<AttachmentPtr> images;  // by reference
  std::optional<CallRecord> call;     // Tool turns from a dispatched call
  double policy_ms = 0;               // Assistant turns; timing
};

struct DialogueHistory {
  std::vector<Turn> turns;
};

/// Text handed back to the policy for one tool result.
inline std::string tool_turn_text(const std::string& name, const ToolResult& r) {
  std::string s = "[" + name + "] status: " + std::string(to_string(r.status)) + "\n" + r.text;
  if (!r.variables.empty()) {
    s += "\nVariables:";
    for (const auto& [k, v] : r.variables) s += " $" + k;
  }
  return s;
}

// ---------------------------------------------------------------------------
// Policies

struct PolicyInput {
  const std::string& sample_id;
  int rollout_index;
  int turn;  // 1-based
  const DialogueHistory& history;
  const std::string& system_prompt;
  std::uint64_t seed;
};

class Policy {
 public:
  virtual ~Policy() = default;
  /// Throws RolloutError on transport failure.
  virtual std::string next(const PolicyInput& in) = 0;
};

/// Replays assistant messages from JSONL. Each line is
/// {"sample_id": id or "*", "rollout": k (optional), "turn": t, "text": ...}.
/// Specific entries win over "*" and rollout-less ones.
class ScriptedPolicy : public Policy {
 public:
  struct Key {
    std::string sample;
    int rollout;  // -1 = any
    int turn;
    auto operator<=>(const Key&) const = default;
  };

  explicit ScriptedPolicy(std::map<Key, std::string> script) : script_(std::move(script)) {}

  static ScriptedPolicy from_jsonl(std::istream& in) {
    std::map<Key, std::string> script;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
      try {
        auto j = json::parse(line);
        Key k{j.value("sample_id", std::string("*")), j.value("rollout", -1), j.at("turn").get<int>()};
        if (k.turn < 1) throw ConfigError("turn must be >= 1");
        if (!script.emplace(k, j.at("text").get<std::string>()).second) throw ConfigError("duplicate entry");
      } catch (const json::exception& e) {
        throw ConfigError("script line " + std::to_string(lineno) + ": " + e.what());
      } catch (const ConfigError& e) {
        throw ConfigError("script line " + std::to_string(lineno) + ": " + e.what());
      }
    }
    return ScriptedPolicy(std::move(script));
  }

  static ScriptedPolicy from_file(const std::filesystem::path& p) {
    std::ifstream in(p);
    if (!in) throw ConfigError("cannot open script " + p.string());
    return from_jsonl(in);
  }

  std::string next(const PolicyInput& in) override {
    for (const Key& k : {Key{in.sample_id, in.rollout_index, in.turn}, Key{in.sample_id, -1, in.turn},
                         Key{"*", in.rollout_index, in.turn}, Key{"*", -1, in.turn}})
      if (auto it = script_.find(k); it != script_.end()) return it->second;
    throw RolloutError("scripted policy has no turn " + std::to_string(in.turn) + " for sample " + in.sample_id);
  }

 private:
  std::map<Key, std::string> script_;
};

/// OpenAI-style chat completion endpoint. Tool turns are sent as user
/// messages; images are sent inline only when `inline_images` is set.
class RemoteChatPolicy : public Policy {
 public:
  RemoteChatPolicy(std::string base_url, std::string model, bool inline_images = false)
      : base_(std::move(base_url)), model_(std::move(model)), inline_images_(inline_images) {}

  std::string next(const PolicyInput& in) override {
    json messages = json::array();
    if (!in.system_prompt.empty()) messages.push_back({{"role", "system"}, {"content", in.system_prompt}});
    for (const auto& t : in.history.turns) {
      const std::string role = t.role == Role::Assistant ? "assistant" : "user";
      if (!inline_images_ || t.images.empty()) {
        messages.push_back({{"role", role}, {"content", t.text}});
        continue;
      }
      json parts = json::array({{{"type", "text"}, {"text", t.text}}});
      for (const auto& img : t.images) {
        if (!img) continue;
        const auto png = encode_png(image_from_attachment(*img));
        parts.push_back({{"type", "image_url"}, {"image_url", {{"url", "data:image/png;base64," + base64_encode(png)}}}});
      }
      messages.push_back({{"role", role}, {"content", parts}});
    }
    json body{{"model", model_}, {"messages", messages}, {"seed", in.seed}, {"temperature", 0}};
    httplib::Client c(base_);
    c.set_read_timeout(300, 0);
    auto r = c.Post("/v1/chat/completions", body.dump(), "application/json");
    if (!r) throw RolloutError("policy endpoint " + base_ + " unreachable: " + httplib::to_string(r.error()));
    if (r->status != 200) throw RolloutError("policy endpoint returned HTTP " + std::to_string(r->status));
    try {
      return json::parse(r->body).at("choices").at(0).at("message").at("content").get<std::string>();
    } catch (const json::exception& e) {
      throw RolloutError(std::string("policy reply not understood: ") + e.what());
    }
  }

 private:
  std::string base_, model_;
  bool inline_images_;
};

// ---------------------------------------------------------------------------
// Loop

struct RolloutConfig {
  int t_max = 10;
  int n_group = 5;
  std::uint32_t timeout_ms = 30000;
  std::uint64_t seed = 0;
  bool fail_slot_on_error = true;  // false: rethrow RolloutError from run_group
};

inline void validate(const RolloutConfig& c) {
  if (c.t_max < 1) throw BadArgs("T_max must be >= 1");
  if (c.n_group < 1) throw BadArgs("N_group must be >= 1");
  if (c.timeout_ms < 1) throw BadArgs("timeout_ms must be >= 1");
}

struct RolloutInput {
  std::string sample_id;
  std::string question;
  std::string fixture_id;
  AttachmentPtr image;
  std::string system_prompt;
};

struct Event {
  std::string type;  // think, tool_call, tool_result, answer, aborted, exhausted, error
  json payload;
  AttachmentPtr attachment;  // tool_result image, if any
};

using EventSink = std::function<void(const Event&)>;

class CancelToken {
 public:
  void cancel() { flag_.store(true); }
  bool cancelled() const { return flag_.load(); }

 private:
  std::atomic<bool> flag_{false};
};

struct RolloutResult {
  DialogueHistory history;
  std::optional<std::string> answer;
  int turns_used = 0;
  int tool_call_count = 0;
  std::vector<Tag> tags;  // across all assistant turns
  bool exhausted = false;
  bool aborted = false;
  std::uint64_t seed = 0;
};

inline std::uint64_t rollout_seed(std::uint64_t base, std::string_view sample_id, int index) {
  return tools::mix64(base ^ tools::mix64(tools::hash_string(sample_id) + std::uint64_t(index) * 0x9e3779b97f4a7c15ull));
}

inline json result_payload(const std::string& name, const ToolResult& r) {
  json vars = json::object();
  for (const auto& [k, v] : r.variables) vars[k] = value_to_display_json(v);
  json p{{"name", name}, {"status", std::string(to_string(r.status))}, {"text", r.text}, {"variables", vars}};
  if (r.image) {
    p["image"] = {{"name", r.image->name},
                  {"width", r.image->width},
                  {"height", r.image->height},
                  {"sha256", sha256_hex(r.image->bytes)}};
  }
  return p;
}

/// One rollout. Policy failures throw RolloutError; tool failures become
/// Tool turns.
inline RolloutResult run_rollout(Router& router, Policy& policy, const RolloutInput& input, const RolloutConfig& cfg,
                                 int rollout_index, std::uint64_t seed, const CancelToken* cancel = nullptr,
                                 const EventSink& sink = {}) {
  validate(cfg);
  RolloutResult out;
  out.seed = seed;
  auto emit = [&](std::string type, json payload, AttachmentPtr att = nullptr) {
    if (sink) sink(Event{std::move(type), std::move(payload), std::move(att)});
  };
  Turn user{Role::User, input.question, {}, std::nullopt, 0};
  if (input.image) user.images.push_back(input.image);
  out.history.turns.push_back(std::move(user));

  char sid_buf[32];
  std::snprintf(sid_buf, sizeof sid_buf, "%016llx", static_cast<unsigned long long>(seed));
  const std::string session_id = input.sample_id + "#" + std::to_string(rollout_index) + "#" + sid_buf;
  router.open_session(session_id, {input.fixture_id, seed});
  struct Closer {
    Router& r;
    const std::string& id;
    ~Closer() {
      try {
        r.close_session(id);
      } catch (...) {
      }
    }
  } closer{router, session_id};

  for (int t = 1; t <= cfg.t_max; ++t) {
    if (cancel && cancel->cancelled()) {
      out.aborted = true;
      emit("aborted", {{"turn", t}});
      return out;
    }
    const auto p0 = SteadyClock::now();
    std::string text;
    try {
      text = policy.next(PolicyInput{input.sample_id, rollout_index, t, out.history, input.system_prompt, seed});
    } catch (const RolloutError&) {
      throw;
    } catch (const std::exception& e) {
      throw RolloutError(std::string("policy failed: ") + e.what());
    }
    out.turns_used = t;
    Turn asst{Role::Assistant, text, {}, std::nullopt,
              std::chrono::duration<double, std::milli>(SteadyClock::now() - p0).count()};
    out.history.turns.push_back(std::move(asst));
    const auto parsed = parse_actions(text);
    for (auto tag : tags_of(parsed)) out.tags.push_back(tag);
    for (const auto& th : parsed.thinks) emit("think", {{"text", th}});
    if (parsed.answer) {
      out.answer = parsed.answer;
      emit("answer", {{"text", *parsed.answer}});
      return out;
    }
    for (const auto& blk : parsed.blocks) {
      if (blk.name != "tool_call") continue;
      if (cancel && cancel->cancelled()) break;
      if (blk.diagnostic) {
        const auto& d = parsed.malformed[*blk.diagnostic];
        Turn tt{Role::Tool, "[malformed tool call at offset " + std::to_string(d.pos) + "] " + d.reason, {}, std::nullopt, 0};
        emit("tool_result", {{"name", ""}, {"status", "Malformed"}, {"text", tt.text}, {"variables", json::object()}});
        out.history.turns.push_back(std::move(tt));
        continue;
      }
      const auto& call = parsed.tool_calls[*blk.call];
      ++out.tool_call_count;
      emit("tool_call", {{"name", call.name}, {"arguments", call.arguments}});
      ToolResult res;
      const auto c0 = SteadyClock::now();
      try {
        ToolRequest req;
        req.tool = call.tool;
        req.method = call.method;
        for (const auto& [k, v] : call.arguments.items()) req.args[k] = value_from_policy_json(v);
        req.timeout_ms = cfg.timeout_ms;
        req.fixture_id = input.fixture_id;
        req.seed = seed;
        res = router.dispatch(session_id, std::move(req)).get();
      } catch (const BadArgs& e) {
        res = ToolResult::error(Status::BadArgs, e.what());
      }
      CallRecord rec{call.name, call.arguments, res.status, {},
                     std::chrono::duration<double, std::milli>(SteadyClock::now() - c0).count()};
      for (const auto& [k, v] : res.variables) rec.variables.push_back(k);
      emit("tool_result", result_payload(call.name, res), res.image);
      Turn tt{Role::Tool, tool_turn_text(call.name, res), {}, std::move(rec), 0};
      if (res.image) tt.images.push_back(res.image);
      out.history.turns.push_back(std::move(tt));
    }
  }
  if (cancel && cancel->cancelled()) {
    out.aborted = true;
    emit("aborted", {{"turn", cfg.t_max}});
    return out;
  }
  out.exhausted = true;
  emit("exhausted", {{"turns", cfg.t_max}});
  return out;
}

struct GroupSlot {
  std::optional<RolloutResult> result;  // empty when the rollout failed
  std::string error;
};

/// N independent rollouts with distinct seeds, run concurrently. Slots are in
/// rollout-index order regardless of completion order.
inline std::vector<GroupSlot> run_group(Router& router, Policy& policy, const RolloutInput& input,
                                        const RolloutConfig& cfg, const CancelToken* cancel = nullptr) {
  validate(cfg);
  std::vector<std::future<RolloutResult>> futs;
  for (int i = 0; i < cfg.n_group; ++i) {
    const auto seed = rollout_seed(cfg.seed, input.sample_id, i);
    futs.push_back(std::async(std::launch::async, [&router, &policy, &input, &cfg, i, seed, cancel] {
      return run_rollout(router, policy, input, cfg, i, seed, cancel);
    }));
  }
  std::vector<GroupSlot> out(futs.size());
  std::exception_ptr first_error, unreachable;
  for (std::size_t i = 0; i < futs.size(); ++i) {
    try {
      out[i].result = futs[i].get();
    } catch (const RegistryUnreachable& e) {
      out[i].error = e.what();
      if (!unreachable) unreachable = std::current_exception();
    } catch (const RolloutError& e) {
      out[i].error = e.what();
      if (!first_error) first_error = std::current_exception();
    } catch (const std::exception& e) {
      out[i].error = e.what();
      if (!first_error) first_error = std::make_exception_ptr(RolloutError(e.what()));
    }
  }
  // A missing registry is never a per-slot failure.
  if (unreachable) std::rethrow_exception(unreachable);
  if (first_error && !cfg.fail_slot_on_error) std::rethrow_exception(first_error);
  return out;
}

}  // namespace toolshed::rollout
