// SPDX-License-Identifier: Apache-2.0
//
// HTTP transport for the router. Bodies are TSH1 frames:
//   POST /dispatch  ToolRequest envelope -> ToolResult envelope
//   POST /control   Control envelope (open_session / close_session) -> Control envelope
//   GET  /stats     RouterStats JSON
//   GET  /health    "ok"
#pragma once

#include <future>
#include <string>

#include "toolshed/registry.hpp"

// After the project headers: resolv.h, pulled in here, defines a `_res` macro
// that breaks Eigen.
#include <httplib.h>

namespace toolshed {

inline constexpr const char* kFrameMime = "application/x-tsh1";

namespace remote_detail {

inline std::string to_body(const std::vector<std::uint8_t>& b) { return std::string(b.begin(), b.end()); }

inline std::span<const std::uint8_t> bytes_of(const std::string& s) {
  return {reinterpret_cast<const std::uint8_t*>(s.data()), s.size()};
}

inline Envelope control_reply(const std::string& sid, std::uint64_t seq, const std::string& op, std::string message = {}) {
  Message m{op, {}};
  if (!message.empty()) m.fields["message"] = std::move(message);
  return {EnvelopeKind::Control, sid, seq, std::move(m)};
}

}  // namespace remote_detail

/// Serves a Router over HTTP.
class RouterServer {
 public:
  explicit RouterServer(Router& router, std::size_t threads = 64) : router_(router) {
    using namespace remote_detail;
    svr_.new_task_queue = [threads] { return new httplib::ThreadPool(threads); };
    svr_.Post("/dispatch", [this](const httplib::Request& req, httplib::Response& res) {
      Envelope env;
      try {
        env = decode_envelope(bytes_of(req.body));
      } catch (const DecodeError& e) {
        res.status = 400;
        res.set_content(e.what(), "text/plain");
        return;
      }
      auto* tr = std::get_if<ToolRequest>(&env.body);
      if (!tr) {
        res.status = 400;
        res.set_content("expected a ToolRequest envelope", "text/plain");
        return;
      }
      ToolResult result;
      try {
        result = router_.dispatch(env.session_id, std::move(*tr)).get();
      } catch (const std::exception& e) {
        result = ToolResult::error(Status::ToolError, e.what());
      }
      Envelope reply{EnvelopeKind::ToolResult, env.session_id, env.seq, std::move(result)};
      try {
        res.set_content(to_body(encode_envelope(reply)), kFrameMime);
      } catch (const EncodeError& e) {
        reply.body = ToolResult::error(Status::ToolError, std::string("result not encodable: ") + e.what());
        res.set_content(to_body(encode_envelope(reply)), kFrameMime);
      }
    });
    svr_.Post("/control", [this](const httplib::Request& req, httplib::Response& res) {
      Envelope env;
      try {
        env = decode_envelope(bytes_of(req.body));
      } catch (const DecodeError& e) {
        res.status = 400;
        res.set_content(e.what(), "text/plain");
        return;
      }
      const auto* m = std::get_if<Message>(&env.body);
      Envelope reply;
      if (!m) {
        reply = control_reply(env.session_id, env.seq, "error", "expected a control message");
      } else if (m->op == "open_session") {
        SessionInfo info;
        if (auto it = m->fields.find("fixture_id"); it != m->fields.end() && it->second.is_string())
          info.fixture_id = it->second.as_string();
        if (auto it = m->fields.find("seed"); it != m->fields.end() && it->second.is_string())
          info.seed = std::stoull(it->second.as_string());
        router_.open_session(env.session_id, info);
        reply = control_reply(env.session_id, env.seq, "ok");
      } else if (m->op == "close_session") {
        router_.close_session(env.session_id);
        reply = control_reply(env.session_id, env.seq, "ok");
      } else {
        reply = control_reply(env.session_id, env.seq, "error", "unknown control op: " + m->op);
      }
      res.set_content(to_body(encode_envelope(reply)), kFrameMime);
    });
    svr_.Get("/stats", [this](const httplib::Request&, httplib::Response& res) {
      res.set_content(stats_to_json(router_.stats_snapshot()).dump(), "application/json");
    });
    svr_.Get("/health", [](const httplib::Request&, httplib::Response& res) { res.set_content("ok", "text/plain"); });
  }

  /// Binds; port 0 picks a free port. Returns the bound port.
  int bind(const std::string& host, int port) {
    const int p = port == 0 ? svr_.bind_to_any_port(host) : (svr_.bind_to_port(host, port) ? port : -1);
    if (p < 0) throw ConfigError("cannot listen on " + host + ":" + std::to_string(port));
    return p;
  }

  /// Blocks until stop().
  void serve() { svr_.listen_after_bind(); }
  void stop() { svr_.stop(); }
  void wait_until_ready() { svr_.wait_until_ready(); }

 private:
  Router& router_;
  httplib::Server svr_;
};

/// "host:port" or ":port".
inline std::pair<std::string, int> split_address(const std::string& addr) {
  auto s = addr;
  for (const char* scheme : {"http://", "tcp://"})
    if (s.rfind(scheme, 0) == 0) s = s.substr(std::strlen(scheme));
  while (!s.empty() && s.back() == '/') s.pop_back();
  const auto colon = s.rfind(':');
  if (colon == std::string::npos) throw ConfigError("address '" + addr + "' needs host:port");
  std::string host = s.substr(0, colon);
  if (host.empty()) host = "127.0.0.1";
  try {
    return {host, std::stoi(s.substr(colon + 1))};
  } catch (const std::exception&) {
    throw ConfigError("address '" + addr + "' has a bad port");
  }
}

/// Router client for a remote `toolshed serve`.
class RemoteRouter : public Router {
 public:
  RemoteRouter(std::string host, int port) : host_(std::move(host)), port_(port) {}

  bool healthy() const {
    httplib::Client c(host_, port_);
    c.set_connection_timeout(2);
    auto r = c.Get("/health");
    return r && r->status == 200;
  }

  void open_session(const std::string& id, const SessionInfo& info) override {
    Message m{"open_session", {{"fixture_id", info.fixture_id}, {"seed", std::to_string(info.seed)}}};
    control(id, std::move(m));
  }

  void close_session(const std::string& id) override { control(id, Message{"close_session", {}}); }

  std::future<ToolResult> dispatch(const std::string& session_id, ToolRequest req) override {
    const auto seq = ++seq_;
    return std::async(std::launch::async, [this, session_id, seq, req = std::move(req)]() mutable {
      const auto timeout_s = req.timeout_ms / 1000 + 10;
      Envelope env{EnvelopeKind::ToolRequest, session_id, seq, std::move(req)};
      auto reply = post("/dispatch", env, time_t(timeout_s));
      if (auto* r = std::get_if<ToolResult>(&reply.body)) return std::move(*r);
      throw RegistryUnreachable("router replied with a non-result envelope");
    });
  }

  RouterStats stats_snapshot() override {
    httplib::Client c(host_, port_);
    auto r = c.Get("/stats");
    if (!r || r->status != 200) throw RegistryUnreachable("GET /stats failed at " + where());
    return stats_from_json(json::parse(r->body));
  }

 private:
  std::string where() const { return host_ + ":" + std::to_string(port_); }

  Envelope post(const std::string& path, const Envelope& env, time_t read_timeout_s = 30) {
    httplib::Client c(host_, port_);
    c.set_read_timeout(read_timeout_s, 0);
    auto r = c.Post(path, remote_detail::to_body(encode_envelope(env)), kFrameMime);
    if (!r) throw RegistryUnreachable("router at " + where() + " unreachable: " + httplib::to_string(r.error()));
    if (r->status != 200) throw RegistryUnreachable("router at " + where() + " returned HTTP " + std::to_string(r->status) + ": " + r->body);
    return decode_envelope(remote_detail::bytes_of(r->body));
  }

  void control(const std::string& id, Message m) {
    auto reply = post("/control", {EnvelopeKind::Control, id, ++seq_, std::move(m)});
    const auto* msg = std::get_if<Message>(&reply.body);
    if (!msg || msg->op != "ok") {
      std::string why = "control request failed";
      if (msg)
        if (auto it = msg->fields.find("message"); it != msg->fields.end() && it->second.is_string()) why = it->second.as_string();
      throw RegistryUnreachable(why);
    }
  }

  std::string host_;
  int port_;
  std::atomic<std::uint64_t> seq_{0};
};

}  // namespace toolshed
