// SPDX-License-Identifier: Apache-2.0
//
// Interactive session service.
//
//   POST /sessions                      {fixture_id} or {image: base64 PNG} -> {session_id}
//   POST /sessions/{id}/message         {text}; starts a rollout on the session
//   GET  /sessions/{id}/events?since=N  NDJSON {type, payload, seq}, seq > N
//   POST /sessions/{id}/abort
//   GET  /sessions/{id}/attachments/{sha256}  PNG of a tool image
//   GET  /fixtures                      fixture ids
//   GET  /stats                         RouterStats JSON
//
// An event stream ends after the first terminal event (answer, aborted,
// exhausted, error) it delivers, when the session is idle with nothing new to
// send, or after wait_ms (default 30000) without one.
#pragma once

#include <condition_variable>
#include <regex>
#include <thread>

#include "toolshed/rollout.hpp"

// After the project headers: resolv.h, pulled in here, defines a `_res` macro
// that breaks Eigen.
#include <httplib.h>

namespace toolshed {

class NotFound : public Error {
 public:
  using Error::Error;
};

class Busy : public Error {
 public:
  using Error::Error;
};

inline bool is_terminal_event(const std::string& type) {
  return type == "answer" || type == "aborted" || type == "exhausted" || type == "error";
}

struct SessionServiceConfig {
  rollout::RolloutConfig rollout;
  std::string system_prompt;
};

class SessionService {
 public:
  SessionService(Router& router, std::shared_ptr<const FixtureIndex> fixtures, std::shared_ptr<rollout::Policy> policy,
                 SessionServiceConfig cfg = {})
      : router_(router), fixtures_(std::move(fixtures)), policy_(std::move(policy)), cfg_(std::move(cfg)) {
    rollout::validate(cfg_.rollout);
    routes();
  }

  ~SessionService() {
    stop();
    std::vector<std::shared_ptr<Chat>> all;
    {
      std::lock_guard lk(mu_);
      for (auto& [k, c] : chats_) all.push_back(c);
    }
    for (auto& c : all) {
      c->cancel->cancel();
      if (c->worker.joinable()) c->worker.join();
    }
  }

  struct SeqEvent {
    std::uint64_t seq;
    std::string type;
    json payload;

    json to_json() const { return {{"seq", seq}, {"type", type}, {"payload", payload}}; }
  };

  // Programmatic API, also behind the HTTP routes.

  std::string create(const std::string& fixture_id, AttachmentPtr image = nullptr) {
    auto c = std::make_shared<Chat>();
    if (!fixture_id.empty()) {
      auto it = fixtures_->find(fixture_id);
      if (it == fixtures_->end()) throw NotFound("unknown fixture '" + fixture_id + "'");
      c->fixture_id = fixture_id;
      c->image = it->second->image_attachment;
    } else {
      if (!image) throw BadArgs("a session needs a fixture_id or an image");
      c->image = std::move(image);
    }
    std::lock_guard lk(mu_);
    c->id = "s" + std::to_string(++next_id_);
    chats_.emplace(c->id, c);
    return c->id;
  }

  /// Starts a rollout for `text`. Throws NotFound, Busy.
  void message(const std::string& id, const std::string& text) {
    auto c = find(id);
    std::unique_lock lk(c->mu);
    if (c->running) throw Busy("session " + id + " is still running");
    if (c->worker.joinable()) c->worker.join();
    c->running = true;
    c->cancel = std::make_shared<rollout::CancelToken>();
    const int idx = c->messages++;
    append_locked(*c, "user", {{"text", text}});
    lk.unlock();
    rollout::RolloutInput in{c->fixture_id.empty() ? c->id : c->fixture_id, text, c->fixture_id, c->image,
                             cfg_.system_prompt};
    c->worker = std::thread([this, c, in = std::move(in), idx, cancel = c->cancel] {
      auto sink = [&](const rollout::Event& e) {
        std::lock_guard g(c->mu);
        if (e.attachment) c->attachments.emplace(sha256_hex(e.attachment->bytes), e.attachment);
        append_locked(*c, e.type, e.payload);
      };
      try {
        const auto seed = rollout::rollout_seed(cfg_.rollout.seed, c->id, idx);
        rollout::run_rollout(router_, *policy_, in, cfg_.rollout, idx, seed, cancel.get(), sink);
      } catch (const std::exception& e) {
        std::lock_guard g(c->mu);
        append_locked(*c, "error", {{"message", e.what()}});
      }
      std::lock_guard g(c->mu);
      c->running = false;
      c->cv.notify_all();
    });
  }

  /// Returns false when nothing was running.
  bool abort(const std::string& id) {
    auto c = find(id);
    std::lock_guard lk(c->mu);
    if (!c->running) return false;
    c->cancel->cancel();
    return true;
  }

  std::vector<SeqEvent> events_since(const std::string& id, std::uint64_t since) {
    auto c = find(id);
    std::lock_guard lk(c->mu);
    return {c->events.begin() + std::ptrdiff_t(std::min<std::uint64_t>(since, c->events.size())), c->events.end()};
  }

  /// Blocks until the session is idle or `timeout` passes.
  bool wait_idle(const std::string& id, std::chrono::milliseconds timeout) {
    auto c = find(id);
    std::unique_lock lk(c->mu);
    return c->cv.wait_for(lk, timeout, [&] { return !c->running; });
  }

  AttachmentPtr attachment(const std::string& id, const std::string& digest) {
    auto c = find(id);
    std::lock_guard lk(c->mu);
    auto it = c->attachments.find(digest);
    if (it == c->attachments.end()) throw NotFound("no attachment " + digest);
    return it->second;
  }

  // HTTP

  int bind(const std::string& host, int port) {
    const int p = port == 0 ? svr_.bind_to_any_port(host) : (svr_.bind_to_port(host, port) ? port : -1);
    if (p < 0) throw ConfigError("cannot listen on " + host + ":" + std::to_string(port));
    return p;
  }
  void serve() { svr_.listen_after_bind(); }
  void wait_until_ready() { svr_.wait_until_ready(); }
  void stop() {
    stopping_ = true;
    svr_.stop();
  }

 private:
  struct Chat {
    std::string id;
    std::string fixture_id;
    AttachmentPtr image;
    std::mutex mu;
    std::condition_variable cv;
    std::vector<SeqEvent> events;  // events[i].seq == i + 1
    std::map<std::string, AttachmentPtr> attachments;
    std::shared_ptr<rollout::CancelToken> cancel = std::make_shared<rollout::CancelToken>();
    std::thread worker;
    bool running = false;
    int messages = 0;
  };

  static void append_locked(Chat& c, std::string type, json payload) {
    c.events.push_back({c.events.size() + 1, std::move(type), std::move(payload)});
    c.cv.notify_all();
  }

  std::shared_ptr<Chat> find(const std::string& id) {
    std::lock_guard lk(mu_);
    auto it = chats_.find(id);
    if (it == chats_.end()) throw NotFound("unknown session '" + id + "'");
    return it->second;
  }

  static void reply_error(httplib::Response& res, int status, const std::string& msg) {
    res.status = status;
    res.set_content(json{{"error", msg}}.dump(), "application/json");
  }

  template <class F>
  static void guarded(httplib::Response& res, F&& f) {
    try {
      f();
    } catch (const NotFound& e) {
      reply_error(res, 404, e.what());
    } catch (const Busy& e) {
      reply_error(res, 409, e.what());
    } catch (const BadArgs& e) {
      reply_error(res, 400, e.what());
    } catch (const json::exception& e) {
      reply_error(res, 400, e.what());
    } catch (const std::exception& e) {
      reply_error(res, 500, e.what());
    }
  }

  void stream(const std::string& id, std::uint64_t since, std::chrono::milliseconds wait, httplib::Response& res) {
    auto c = find(id);
    struct Cursor {
      std::uint64_t next;
      bool finished = false;
      SteadyClock::time_point deadline;
    };
    auto cur = std::make_shared<Cursor>(Cursor{since, false, SteadyClock::now() + wait});
    res.set_chunked_content_provider("application/x-ndjson", [this, c, cur](std::size_t, httplib::DataSink& sink) {
      std::string chunk;
      {
        std::unique_lock lk(c->mu);
        for (;;) {
          if (cur->finished || stopping_) break;
          if (c->events.size() > cur->next) break;
          // Idle with the log ending on a terminal event: nothing more is coming.
          if (!c->running && !c->events.empty() && is_terminal_event(c->events.back().type)) {
            cur->finished = true;
            break;
          }
          if (SteadyClock::now() >= cur->deadline) {
            cur->finished = true;
            break;
          }
          c->cv.wait_for(lk, std::chrono::milliseconds(100));
        }
        while (!cur->finished && cur->next < c->events.size()) {
          const auto& e = c->events[cur->next++];
          chunk += e.to_json().dump() + "\n";
          if (is_terminal_event(e.type)) cur->finished = true;
        }
      }
      if (!chunk.empty() && !sink.write(chunk.data(), chunk.size())) return false;
      if (cur->finished || stopping_) sink.done();
      return true;
    });
  }

  void routes() {
    svr_.set_default_headers({{"Access-Control-Allow-Origin", "*"},
                              {"Access-Control-Allow-Headers", "Content-Type"},
                              {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"}});
    svr_.Options(".*", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });

    svr_.Post("/sessions", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] {
        const auto body = req.body.empty() ? json::object() : json::parse(req.body);
        AttachmentPtr image;
        if (body.contains("image"))
          image = make_image_attachment("image", decode_png(base64_decode(body.at("image").get<std::string>())));
        const auto id = create(body.value("fixture_id", ""), image);
        res.set_content(json{{"session_id", id}}.dump(), "application/json");
      });
    });
    svr_.Post(R"(/sessions/([^/]+)/message)", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] {
        const auto body = json::parse(req.body);
        message(req.matches[1], body.at("text").get<std::string>());
        res.set_content(json{{"ok", true}}.dump(), "application/json");
      });
    });
    svr_.Post(R"(/sessions/([^/]+)/abort)", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] { res.set_content(json{{"aborted", abort(req.matches[1])}}.dump(), "application/json"); });
    });
    svr_.Get(R"(/sessions/([^/]+)/events)", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] {
        std::uint64_t since = 0;
        long wait_ms = 30000;
        try {
          if (req.has_param("since")) since = std::stoull(req.get_param_value("since"));
          if (req.has_param("wait_ms")) wait_ms = std::stol(req.get_param_value("wait_ms"));
        } catch (const std::exception&) {
          throw BadArgs("since and wait_ms must be integers");
        }
        stream(req.matches[1], since, std::chrono::milliseconds(std::max(0L, wait_ms)), res);
      });
    });
    svr_.Get(R"(/sessions/([^/]+)/attachments/([0-9a-f]+))", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] {
        const auto png = encode_png(image_from_attachment(*attachment(req.matches[1], req.matches[2])));
        res.set_content(std::string(png.begin(), png.end()), "image/png");
      });
    });
    svr_.Get("/fixtures", [this](const httplib::Request&, httplib::Response& res) {
      json ids = json::array();
      for (const auto& [k, f] : *fixtures_) ids.push_back(k);
      res.set_content(ids.dump(), "application/json");
    });
    svr_.Get("/stats", [this](const httplib::Request&, httplib::Response& res) {
      guarded(res, [&] { res.set_content(stats_to_json(router_.stats_snapshot()).dump(), "application/json"); });
    });
  }

  Router& router_;
  std::shared_ptr<const FixtureIndex> fixtures_;
  std::shared_ptr<rollout::Policy> policy_;
  SessionServiceConfig cfg_;
  httplib::Server svr_;
  std::atomic<bool> stopping_{false};
  std::mutex mu_;
  std::map<std::string, std::shared_ptr<Chat>> chats_;
  std::uint64_t next_id_ = 0;
};

}  // namespace toolshed
