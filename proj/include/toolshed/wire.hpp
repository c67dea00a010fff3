// SPDX-License-Identifier: Apache-2.0
//
// TSH1 framing for the messages exchanged among policy client, router, tool
// workers and harness.
//
//   "TSH1" | u32 header_len | header (canonical JSON) |
//   repeat per attachment: u32 name_len | name | u32 byte_len | bytes
//
// All integers little-endian. The header lists attachment metadata in the same
// order as the binary section; the body refers to attachments by name.
#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "toolshed/error.hpp"
#include "toolshed/value.hpp"

namespace toolshed {

using json = nlohmann::json;

enum class Status : std::uint8_t { Ok, ToolError, Timeout, UnknownTool, BadArgs };

inline std::string_view to_string(Status s) {
  switch (s) {
    case Status::Ok: return "Ok";
    case Status::ToolError: return "ToolError";
    case Status::Timeout: return "Timeout";
    case Status::UnknownTool: return "UnknownTool";
    case Status::BadArgs: return "BadArgs";
  }
  return "ToolError";
}

inline Status status_from_string(std::string_view s) {
  if (s == "Ok") return Status::Ok;
  if (s == "ToolError") return Status::ToolError;
  if (s == "Timeout") return Status::Timeout;
  if (s == "UnknownTool") return Status::UnknownTool;
  if (s == "BadArgs") return Status::BadArgs;
  throw BadArgs("unknown status: " + std::string(s));
}

struct ToolRequest {
  std::string tool;
  std::string method;
  ValueMap args;
  std::uint32_t timeout_ms = 30000;
  // Routing context filled in by the registry before a worker sees the call.
  std::string fixture_id;
  std::uint64_t seed = 0;
  ValueMap session_vars;

  friend bool operator==(const ToolRequest&, const ToolRequest&) = default;
};

struct ToolResult {
  Status status = Status::Ok;
  std::string text;
  AttachmentPtr image;
  ValueMap variables;

  static ToolResult ok(std::string text) { return {Status::Ok, std::move(text), nullptr, {}}; }
  static ToolResult error(Status s, std::string text) { return {s, std::move(text), nullptr, {}}; }

  friend bool operator==(const ToolResult& a, const ToolResult& b) {
    if (a.status != b.status || a.text != b.text || a.variables != b.variables) return false;
    if (!a.image || !b.image) return !a.image && !b.image;
    return *a.image == *b.image;
  }
};

/// Body of SessionEvent and Control envelopes.
struct Message {
  std::string op;
  ValueMap fields;

  friend bool operator==(const Message&, const Message&) = default;
};

enum class EnvelopeKind : std::uint8_t { ToolRequest, ToolResult, SessionEvent, Control };

struct Envelope {
  EnvelopeKind kind = EnvelopeKind::Control;
  std::string session_id;
  std::uint64_t seq = 0;
  std::variant<ToolRequest, ToolResult, Message> body;

  friend bool operator==(const Envelope&, const Envelope&) = default;
};

inline constexpr std::size_t kDefaultAttachmentCap = 64u << 20;

namespace wire_detail {

inline std::string_view kind_name(EnvelopeKind k) {
  switch (k) {
    case EnvelopeKind::ToolRequest: return "ToolRequest";
    case EnvelopeKind::ToolResult: return "ToolResult";
    case EnvelopeKind::SessionEvent: return "SessionEvent";
    case EnvelopeKind::Control: return "Control";
  }
  return "Control";
}

inline EnvelopeKind kind_from(std::string_view s, std::size_t pos) {
  if (s == "ToolRequest") return EnvelopeKind::ToolRequest;
  if (s == "ToolResult") return EnvelopeKind::ToolResult;
  if (s == "SessionEvent") return EnvelopeKind::SessionEvent;
  if (s == "Control") return EnvelopeKind::Control;
  throw DecodeError(pos, "unknown envelope kind");
}

// Collects attachments while serializing the body.
struct AttachmentSink {
  std::vector<AttachmentPtr> ordered;
  std::map<std::string, AttachmentPtr> by_name;
  std::size_t cap;

  void add(const AttachmentPtr& a) {
    if (!a) throw EncodeError("null attachment");
    auto it = by_name.find(a->name);
    if (it != by_name.end()) {
      if (it->second != a && !(*it->second == *a))
        throw EncodeError("two different attachments share the name '" + a->name + "'");
      return;
    }
    if (a->bytes.size() > cap) throw EncodeError("attachment '" + a->name + "' exceeds size cap");
    if (auto v = attachment_violation(*a); !v.empty()) throw EncodeError(a->name + ": " + v);
    by_name.emplace(a->name, a);
    ordered.push_back(a);
  }
};

inline json encode_value(const Value& v, AttachmentSink& sink) {
  return std::visit(
      [&](const auto& x) -> json {
        using T = std::decay_t<decltype(x)>;
        if constexpr (std::is_same_v<T, std::monostate>) {
          return nullptr;
        } else if constexpr (std::is_same_v<T, bool>) {
          return x;
        } else if constexpr (std::is_same_v<T, double>) {
          if (!std::isfinite(x)) throw EncodeError("non-finite number");
          return x;
        } else if constexpr (std::is_same_v<T, std::string>) {
          return (!x.empty() && x[0] == '$') ? "$" + x : x;
        } else if constexpr (std::is_same_v<T, Point2>) {
          if (!std::isfinite(x.x) || !std::isfinite(x.y)) throw EncodeError("non-finite point");
          return json{{"p2", json::array({x.x, x.y})}};
        } else if constexpr (std::is_same_v<T, Value::List>) {
          json arr = json::array();
          for (const auto& e : x) arr.push_back(encode_value(e, sink));
          return arr;
        } else if constexpr (std::is_same_v<T, AttachmentPtr>) {
          sink.add(x);
          return json{{"att", x->name}};
        } else {
          return "$" + x.name;
        }
      },
      v.storage());
}

inline json encode_map(const ValueMap& m, AttachmentSink& sink) {
  json o = json::object();
  for (const auto& [k, v] : m) o[k] = encode_value(v, sink);
  return o;
}

struct AttachmentSource {
  std::map<std::string, AttachmentPtr> by_name;
  std::set<std::string> referenced;
  std::size_t pos;
};

inline Value decode_value(const json& j, AttachmentSource& src) {
  switch (j.type()) {
    case json::value_t::null: return {};
    case json::value_t::boolean: return j.get<bool>();
    case json::value_t::number_integer:
    case json::value_t::number_unsigned:
    case json::value_t::number_float: return j.get<double>();
    case json::value_t::string: {
      const auto& s = j.get_ref<const std::string&>();
      if (!s.empty() && s[0] == '$') {
        if (s.size() > 1 && s[1] == '$') return s.substr(1);
        if (s.size() == 1) throw DecodeError(src.pos, "empty variable reference");
        return VariableRef{s.substr(1)};
      }
      return s;
    }
    case json::value_t::array: {
      Value::List l;
      l.reserve(j.size());
      for (const auto& e : j) l.push_back(decode_value(e, src));
      return l;
    }
    case json::value_t::object: {
      if (j.size() == 1 && j.contains("p2")) {
        const auto& a = j["p2"];
        if (!a.is_array() || a.size() != 2 || !a[0].is_number() || !a[1].is_number())
          throw DecodeError(src.pos, "malformed point2");
        return Point2{a[0].get<double>(), a[1].get<double>()};
      }
      if (j.size() == 1 && j.contains("att") && j["att"].is_string()) {
        auto name = j["att"].get<std::string>();
        auto it = src.by_name.find(name);
        if (it == src.by_name.end()) throw DecodeError(src.pos, "body references missing attachment '" + name + "'");
        src.referenced.insert(name);
        return it->second;
      }
      throw DecodeError(src.pos, "unexpected object in value position");
    }
    default: throw DecodeError(src.pos, "unsupported JSON value");
  }
}

inline ValueMap decode_map(const json& j, AttachmentSource& src) {
  if (!j.is_object()) throw DecodeError(src.pos, "expected object");
  ValueMap m;
  for (const auto& [k, v] : j.items()) m.emplace(k, decode_value(v, src));
  return m;
}

inline json encode_body(const Envelope& env, AttachmentSink& sink) {
  json b = json::object();
  switch (env.kind) {
    case EnvelopeKind::ToolRequest: {
      const auto* r = std::get_if<ToolRequest>(&env.body);
      if (!r) throw EncodeError("ToolRequest envelope without ToolRequest body");
      if (r->tool.empty() || r->method.empty()) throw EncodeError("tool and method must be nonempty");
      if (r->timeout_ms == 0) throw EncodeError("timeout_ms must be positive");
      b["tool"] = r->tool;
      b["method"] = r->method;
      b["args"] = encode_map(r->args, sink);
      b["timeout_ms"] = r->timeout_ms;
      b["fixture_id"] = r->fixture_id;
      b["seed"] = r->seed;
      b["session_vars"] = encode_map(r->session_vars, sink);
      break;
    }
    case EnvelopeKind::ToolResult: {
      const auto* r = std::get_if<ToolResult>(&env.body);
      if (!r) throw EncodeError("ToolResult envelope without ToolResult body");
      if (r->status != Status::Ok && !r->variables.empty())
        throw EncodeError("non-Ok result must not carry variables");
      b["status"] = std::string(to_string(r->status));
      b["text"] = r->text;
      if (r->image) {
        sink.add(r->image);
        b["image"] = r->image->name;
      } else {
        b["image"] = nullptr;
      }
      b["variables"] = encode_map(r->variables, sink);
      break;
    }
    case EnvelopeKind::SessionEvent:
    case EnvelopeKind::Control: {
      const auto* m = std::get_if<Message>(&env.body);
      if (!m) throw EncodeError("message envelope without message body");
      b["op"] = m->op;
      b["fields"] = encode_map(m->fields, sink);
      break;
    }
  }
  return b;
}

template <class T>
T field(const json& j, const char* key, std::size_t pos) {
  if (!j.is_object() || !j.contains(key)) throw DecodeError(pos, std::string("missing field '") + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw DecodeError(pos, std::string("bad type for field '") + key + "'");
  }
}

}  // namespace wire_detail

/// Serializes an envelope into a self-delimiting TSH1 frame.
inline std::vector<std::uint8_t> encode_envelope(const Envelope& env, std::size_t attachment_cap = kDefaultAttachmentCap) {
  using namespace wire_detail;
  AttachmentSink sink{{}, {}, attachment_cap};
  json header = json::object();
  header["kind"] = std::string(kind_name(env.kind));
  header["session_id"] = env.session_id;
  header["seq"] = env.seq;
  header["body"] = encode_body(env, sink);
  json atts = json::array();
  for (const auto& a : sink.ordered) {
    atts.push_back({{"name", a->name},
                    {"media", std::string(to_string(a->media))},
                    {"width", a->width},
                    {"height", a->height},
                    {"length", a->bytes.size()}});
  }
  header["attachments"] = atts;

  const std::string text = header.dump();
  if (text.size() > 0xffffffffu) throw EncodeError("header too large");
  std::vector<std::uint8_t> out;
  std::size_t total = 8 + text.size();
  for (const auto& a : sink.ordered) total += 8 + a->name.size() + a->bytes.size();
  out.reserve(total);
  out.insert(out.end(), {'T', 'S', 'H', '1'});
  put_u32(out, static_cast<std::uint32_t>(text.size()));
  out.insert(out.end(), text.begin(), text.end());
  for (const auto& a : sink.ordered) {
    put_u32(out, static_cast<std::uint32_t>(a->name.size()));
    out.insert(out.end(), a->name.begin(), a->name.end());
    put_u32(out, static_cast<std::uint32_t>(a->bytes.size()));
    out.insert(out.end(), a->bytes.begin(), a->bytes.end());
  }
  return out;
}

/// Returns the length of the complete frame starting at `data`, or nullopt if
/// more bytes are needed. Throws DecodeError on a frame that can never be valid.
inline std::optional<std::size_t> frame_length(std::span<const std::uint8_t> data,
                                               std::size_t attachment_cap = kDefaultAttachmentCap) {
  if (data.size() < 8) {
    static constexpr char magic[4] = {'T', 'S', 'H', '1'};
    for (std::size_t i = 0; i < data.size() && i < 4; ++i)
      if (data[i] != static_cast<std::uint8_t>(magic[i])) throw DecodeError(i, "bad magic");
    return std::nullopt;
  }
  if (std::memcmp(data.data(), "TSH1", 4) != 0) throw DecodeError(0, "bad magic");
  const std::size_t hlen = get_u32(data.data() + 4);
  if (data.size() < 8 + hlen) return std::nullopt;
  json header;
  try {
    header = json::parse(data.begin() + 8, data.begin() + 8 + static_cast<std::ptrdiff_t>(hlen));
  } catch (const json::exception& e) {
    throw DecodeError(8, std::string("header is not JSON: ") + e.what());
  }
  if (!header.contains("attachments") || !header["attachments"].is_array())
    throw DecodeError(8, "header lacks attachment list");
  std::size_t pos = 8 + hlen;
  for (std::size_t i = 0; i < header["attachments"].size(); ++i) {
    if (data.size() < pos + 4) return std::nullopt;
    const std::size_t nlen = get_u32(data.data() + pos);
    pos += 4;
    if (nlen > 4096) throw DecodeError(pos - 4, "attachment name too long");
    if (data.size() < pos + nlen + 4) return std::nullopt;
    pos += nlen;
    const std::size_t blen = get_u32(data.data() + pos);
    if (blen > attachment_cap) throw DecodeError(pos, "attachment exceeds size cap");
    pos += 4;
    if (data.size() < pos + blen) return std::nullopt;
    pos += blen;
  }
  return pos;
}

/// Decodes one frame starting at `data`, reporting the consumed length.
inline Envelope decode_envelope_prefix(std::span<const std::uint8_t> data, std::size_t& consumed,
                                       std::size_t attachment_cap = kDefaultAttachmentCap) {
  using namespace wire_detail;
  if (data.size() < 8) throw DecodeError(data.size(), "truncated frame header");
  if (std::memcmp(data.data(), "TSH1", 4) != 0) throw DecodeError(0, "bad magic");
  const std::size_t hlen = get_u32(data.data() + 4);
  if (data.size() < 8 + hlen) throw DecodeError(data.size(), "truncated header");
  json header;
  try {
    header = json::parse(data.begin() + 8, data.begin() + 8 + static_cast<std::ptrdiff_t>(hlen));
  } catch (const json::exception& e) {
    throw DecodeError(8, std::string("header is not JSON: ") + e.what());
  }
  if (!header.is_object()) throw DecodeError(8, "header is not an object");

  AttachmentSource src{{}, {}, 8};
  std::size_t pos = 8 + hlen;
  const auto& metas = header.contains("attachments") ? header["attachments"] : json();
  if (!metas.is_array()) throw DecodeError(8, "header lacks attachment list");
  for (const auto& meta : metas) {
    Attachment a;
    a.name = field<std::string>(meta, "name", 8);
    try {
      a.media = media_from_string(field<std::string>(meta, "media", 8));
    } catch (const BadArgs& e) {
      throw DecodeError(8, e.what());
    }
    a.width = field<std::uint32_t>(meta, "width", 8);
    a.height = field<std::uint32_t>(meta, "height", 8);
    const auto declared = field<std::uint64_t>(meta, "length", 8);

    if (data.size() < pos + 4) throw DecodeError(pos, "truncated attachment name length");
    const std::size_t nlen = get_u32(data.data() + pos);
    pos += 4;
    if (data.size() < pos + nlen) throw DecodeError(pos, "truncated attachment name");
    std::string name(reinterpret_cast<const char*>(data.data() + pos), nlen);
    if (name != a.name) throw DecodeError(pos, "attachment name does not match header");
    pos += nlen;
    if (data.size() < pos + 4) throw DecodeError(pos, "truncated attachment length");
    const std::size_t blen = get_u32(data.data() + pos);
    if (blen != declared) throw DecodeError(pos, "attachment length does not match header");
    if (blen > attachment_cap) throw DecodeError(pos, "attachment exceeds size cap");
    pos += 4;
    if (data.size() < pos + blen) throw DecodeError(pos, "truncated attachment bytes");
    a.bytes.assign(data.begin() + static_cast<std::ptrdiff_t>(pos), data.begin() + static_cast<std::ptrdiff_t>(pos + blen));
    if (auto v = attachment_violation(a); !v.empty()) throw DecodeError(pos, a.name + ": " + v);
    pos += blen;
    if (src.by_name.count(a.name)) throw DecodeError(pos, "duplicate attachment '" + a.name + "'");
    auto nm = a.name;
    src.by_name.emplace(std::move(nm), std::make_shared<const Attachment>(std::move(a)));
  }
  consumed = pos;

  Envelope env;
  env.kind = kind_from(field<std::string>(header, "kind", 8), 8);
  env.session_id = field<std::string>(header, "session_id", 8);
  env.seq = field<std::uint64_t>(header, "seq", 8);
  if (!header.contains("body")) throw DecodeError(8, "missing body");
  const json& b = header["body"];
  switch (env.kind) {
    case EnvelopeKind::ToolRequest: {
      ToolRequest r;
      r.tool = field<std::string>(b, "tool", 8);
      r.method = field<std::string>(b, "method", 8);
      if (r.tool.empty() || r.method.empty()) throw DecodeError(8, "tool and method must be nonempty");
      r.args = decode_map(b.at("args"), src);
      r.timeout_ms = field<std::uint32_t>(b, "timeout_ms", 8);
      if (r.timeout_ms == 0) throw DecodeError(8, "timeout_ms must be positive");
      r.fixture_id = field<std::string>(b, "fixture_id", 8);
      r.seed = field<std::uint64_t>(b, "seed", 8);
      r.session_vars = decode_map(b.at("session_vars"), src);
      env.body = std::move(r);
      break;
    }
    case EnvelopeKind::ToolResult: {
      ToolResult r;
      try {
        r.status = status_from_string(field<std::string>(b, "status", 8));
      } catch (const BadArgs& e) {
        throw DecodeError(8, e.what());
      }
      r.text = field<std::string>(b, "text", 8);
      if (b.contains("image") && !b["image"].is_null()) {
        auto name = field<std::string>(b, "image", 8);
        auto it = src.by_name.find(name);
        if (it == src.by_name.end()) throw DecodeError(8, "image references missing attachment");
        src.referenced.insert(name);
        r.image = it->second;
      }
      r.variables = decode_map(b.at("variables"), src);
      if (r.status != Status::Ok && !r.variables.empty()) throw DecodeError(8, "non-Ok result carries variables");
      env.body = std::move(r);
      break;
    }
    case EnvelopeKind::SessionEvent:
    case EnvelopeKind::Control: {
      Message m;
      m.op = field<std::string>(b, "op", 8);
      m.fields = decode_map(b.at("fields"), src);
      env.body = std::move(m);
      break;
    }
  }
  for (const auto& [name, _] : src.by_name)
    if (!src.referenced.count(name)) throw DecodeError(8, "attachment '" + name + "' is not referenced by the body");
  return env;
}

/// Decodes exactly one frame; trailing bytes are an error.
inline Envelope decode_envelope(std::span<const std::uint8_t> data, std::size_t attachment_cap = kDefaultAttachmentCap) {
  std::size_t consumed = 0;
  Envelope env = decode_envelope_prefix(data, consumed, attachment_cap);
  if (consumed != data.size()) throw DecodeError(consumed, "trailing bytes after frame");
  return env;
}

// ---------------------------------------------------------------------------
// Policy-side JSON (tool_call arguments) <-> Value. Strings beginning with "$"
// are variable references; "$$" escapes a literal dollar. Arrays stay lists;
// tools coerce two-element numeric lists to points where they expect one.

inline Value value_from_policy_json(const json& j) {
  switch (j.type()) {
    case json::value_t::null: return {};
    case json::value_t::boolean: return j.get<bool>();
    case json::value_t::number_integer:
    case json::value_t::number_unsigned:
    case json::value_t::number_float: return j.get<double>();
    case json::value_t::string: {
      const auto& s = j.get_ref<const std::string&>();
      if (s.size() > 1 && s[0] == '$') {
        if (s[1] == '$') return s.substr(1);
        return VariableRef{s.substr(1)};
      }
      return s;
    }
    case json::value_t::array: {
      Value::List l;
      for (const auto& e : j) l.push_back(value_from_policy_json(e));
      return l;
    }
    case json::value_t::object:
      if (j.size() == 2 && j.contains("x") && j.contains("y") && j["x"].is_number() && j["y"].is_number())
        return Point2{j["x"].get<double>(), j["y"].get<double>()};
      throw BadArgs("object arguments are not supported");
    default: throw BadArgs("unsupported argument value");
  }
}

/// Plain JSON rendering used in traces and session events. Attachments appear
/// as {"attachment": name, "media": ...}.
inline json value_to_display_json(const Value& v) {
  return std::visit(
      [](const auto& x) -> json {
        using T = std::decay_t<decltype(x)>;
        if constexpr (std::is_same_v<T, std::monostate>) return nullptr;
        else if constexpr (std::is_same_v<T, bool>) return x;
        else if constexpr (std::is_same_v<T, double>) return x;
        else if constexpr (std::is_same_v<T, std::string>) return x;
        else if constexpr (std::is_same_v<T, Point2>) return json::array({x.x, x.y});
        else if constexpr (std::is_same_v<T, Value::List>) {
          json arr = json::array();
          for (const auto& e : x) arr.push_back(value_to_display_json(e));
          return arr;
        } else if constexpr (std::is_same_v<T, AttachmentPtr>) {
          return json{{"attachment", x ? x->name : ""}, {"media", x ? std::string(to_string(x->media)) : ""}};
        } else {
          return "$" + x.name;
        }
      },
      v.storage());
}

}  // namespace toolshed
