// SPDX-License-Identifier: Apache-2.0
//
// Tool router: named worker pools with resource accounting, FIFO queues,
// timeouts that recycle workers, per-session variable stores and counters.
#pragma once

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdlib>
#include <deque>
#include <filesystem>
#include <functional>
#include <future>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <thread>
#include <vector>

#include <yaml-cpp/yaml.h>

#include "toolshed/fixture.hpp"
#include "toolshed/resolve.hpp"
#include "toolshed/toolbox.hpp"
#include "toolshed/wire.hpp"

namespace toolshed {

using SteadyClock = std::chrono::steady_clock;

enum class Isolation { InProcess, Process };

struct ToolSpec {
  std::string name;
  int num_actors = 1;
  std::map<std::string, double> resources;  // per actor
  std::size_t queue_cap = 1024;
  std::uint32_t default_timeout_ms = 30000;
  Isolation isolation = Isolation::InProcess;
};

inline void validate_spec(const ToolSpec& s) {
  if (s.name.empty()) throw ConfigError("tool spec needs a name");
  if (s.num_actors < 1) throw ConfigError(s.name + ": num_actors must be >= 1");
  for (const auto& [r, u] : s.resources)
    if (!(u > 0)) throw ConfigError(s.name + ": resource '" + r + "' must be > 0");
  if (s.queue_cap < 1) throw ConfigError(s.name + ": queue_cap must be >= 1");
  if (s.default_timeout_ms < 1) throw ConfigError(s.name + ": default_timeout_ms must be >= 1");
}

// ---------------------------------------------------------------------------
// Resource ledger

/// Fractional resource accounting. Resources without a declared capacity are
/// unbounded.
class ResourceLedger {
 public:
  static constexpr double kTolerance = 1e-9;

  explicit ResourceLedger(std::map<std::string, double> capacity = {}) : capacity_(std::move(capacity)) {}

  void admit(const std::string& owner, const std::map<std::string, double>& per_actor, int actors) {
    std::lock_guard lk(m_);
    if (by_owner_.count(owner)) throw AlreadyRegistered(owner);
    std::map<std::string, double> need;
    for (const auto& [r, u] : per_actor) need[r] = u * actors;
    for (const auto& [r, u] : need) {
      auto cap = capacity_.find(r);
      if (cap == capacity_.end()) continue;
      const double used = allocated_locked(r);
      if (used + u > cap->second + kTolerance)
        throw ResourceExhausted(owner + " needs " + interp::format_number(u) + " " + r + " but only " +
                                interp::format_number(cap->second - used) + " of " +
                                interp::format_number(cap->second) + " remain");
    }
    by_owner_[owner] = std::move(need);
  }

  void release(const std::string& owner) {
    std::lock_guard lk(m_);
    by_owner_.erase(owner);
  }

  std::map<std::string, double> allocated() const {
    std::lock_guard lk(m_);
    std::map<std::string, double> out;
    for (const auto& [o, need] : by_owner_)
      for (const auto& [r, u] : need) out[r] += u;
    return out;
  }

  std::map<std::string, std::map<std::string, double>> allocations() const {
    std::lock_guard lk(m_);
    return by_owner_;
  }

  const std::map<std::string, double>& capacity() const { return capacity_; }

 private:
  double allocated_locked(const std::string& r) const {
    double s = 0;
    for (const auto& [o, need] : by_owner_)
      if (auto it = need.find(r); it != need.end()) s += it->second;
    return s;
  }

  std::map<std::string, double> capacity_;
  mutable std::mutex m_;
  std::map<std::string, std::map<std::string, double>> by_owner_;
};

// ---------------------------------------------------------------------------
// Stats

struct ToolStats {
  std::uint64_t dispatched = 0;
  std::uint64_t completed = 0;
  std::uint64_t failed = 0;
  std::uint64_t timed_out = 0;
  std::uint64_t workers_replaced = 0;
  std::size_t queue_depth = 0;
  double rolling_queue_depth = 0;
  double mean_wait_ms = 0;
  double mean_service_ms = 0;
  int workers = 0;
  int busy = 0;
};

struct RouterStats {
  std::map<std::string, ToolStats> tools;
  std::uint64_t unknown_tool = 0;
};

inline json stats_to_json(const RouterStats& s) {
  json tools = json::object();
  for (const auto& [name, t] : s.tools)
    tools[name] = {{"dispatched", t.dispatched},
                   {"completed", t.completed},
                   {"failed", t.failed},
                   {"timed_out", t.timed_out},
                   {"workers_replaced", t.workers_replaced},
                   {"queue_depth", t.queue_depth},
                   {"rolling_queue_depth", t.rolling_queue_depth},
                   {"mean_wait_ms", t.mean_wait_ms},
                   {"mean_service_ms", t.mean_service_ms},
                   {"workers", t.workers},
                   {"busy", t.busy}};
  return {{"tools", tools}, {"unknown_tool", s.unknown_tool}};
}

inline RouterStats stats_from_json(const json& j) {
  RouterStats s;
  s.unknown_tool = j.value("unknown_tool", std::uint64_t{0});
  for (const auto& [name, t] : j.at("tools").items()) {
    ToolStats x;
    x.dispatched = t.at("dispatched");
    x.completed = t.at("completed");
    x.failed = t.at("failed");
    x.timed_out = t.at("timed_out");
    x.workers_replaced = t.value("workers_replaced", std::uint64_t{0});
    x.queue_depth = t.value("queue_depth", std::size_t{0});
    x.rolling_queue_depth = t.value("rolling_queue_depth", 0.0);
    x.mean_wait_ms = t.value("mean_wait_ms", 0.0);
    x.mean_service_ms = t.value("mean_service_ms", 0.0);
    x.workers = t.value("workers", 0);
    x.busy = t.value("busy", 0);
    s.tools[name] = x;
  }
  return s;
}

struct AutoscalePolicy {
  double high_watermark = 8;
  double low_watermark = 1;
  int max_actors = 8;
};

struct ScaleDecision {
  enum Kind { Hold, ScaleUp, ScaleDown } kind = Hold;
  int n = 0;

  friend bool operator==(const ScaleDecision&, const ScaleDecision&) = default;
};

/// Pure decision on the rolling queue depth; moves one actor at a time and
/// never below the configured baseline.
inline ScaleDecision autoscale_decide(const ToolStats& s, const ToolSpec& spec, const AutoscalePolicy& p) {
  if (!(p.low_watermark >= 0 && p.low_watermark < p.high_watermark))
    throw BadArgs("autoscale watermarks need 0 <= low < high");
  const double depth = s.rolling_queue_depth;
  if (depth > p.high_watermark && s.workers < p.max_actors) return {ScaleDecision::ScaleUp, 1};
  if (depth < p.low_watermark && s.workers > spec.num_actors) return {ScaleDecision::ScaleDown, 1};
  return {};
}

// ---------------------------------------------------------------------------
// Workers

/// One tool process or thread. `run` returns the result or a Timeout; it sets
/// `dead` when the worker must be replaced before serving again.
class Worker {
 public:
  virtual ~Worker() = default;
  virtual ToolResult run(const ToolRequest& req, std::chrono::milliseconds timeout, bool& dead) = 0;
};

using WorkerFactory = std::function<std::unique_ptr<Worker>()>;

/// Runs the tool on a helper thread so a hung call can be abandoned. An
/// abandoned call keeps running detached and its result is discarded.
class InProcessWorker : public Worker {
 public:
  InProcessWorker(ToolImpl impl, std::shared_ptr<const FixtureIndex> fixtures)
      : impl_(std::move(impl)), fixtures_(std::move(fixtures)) {}

  ToolResult run(const ToolRequest& req, std::chrono::milliseconds timeout, bool& dead) override {
    struct Shared {
      std::mutex m;
      std::condition_variable cv;
      bool done = false;
      bool fault = false;
      ToolResult result;
    };
    auto sh = std::make_shared<Shared>();
    ToolContext ctx;
    ctx.seed = req.seed;
    if (fixtures_ && !req.fixture_id.empty())
      if (auto it = fixtures_->find(req.fixture_id); it != fixtures_->end()) ctx.fixture = it->second;
    std::thread([sh, impl = impl_, req, ctx] {
      ToolResult r;
      bool fault = false;
      try {
        r = invoke_tool(impl, req, ctx);
      } catch (const WorkerFault& e) {
        fault = true;
        r = ToolResult::error(Status::ToolError, std::string("worker crashed: ") + e.what());
      }
      std::lock_guard lk(sh->m);
      sh->result = std::move(r);
      sh->fault = fault;
      sh->done = true;
      sh->cv.notify_all();
    }).detach();
    std::unique_lock lk(sh->m);
    if (!sh->cv.wait_for(lk, timeout, [&] { return sh->done; })) {
      dead = true;
      return ToolResult::error(Status::Timeout, req.tool + "." + req.method + " exceeded " +
                                                    std::to_string(timeout.count()) + " ms");
    }
    dead = sh->fault;
    return std::move(sh->result);
  }

 private:
  ToolImpl impl_;
  std::shared_ptr<const FixtureIndex> fixtures_;
};

// ---------------------------------------------------------------------------
// Pool

enum class WorkerState { Idle, Busy, Dead };

class ToolPool {
 public:
  struct Job {
    ToolRequest req;
    std::chrono::milliseconds timeout{0};
    SteadyClock::time_point enqueued;
    std::function<void(ToolResult)> done;
  };

  static constexpr double kEwmaAlpha = 0.2;

  ToolPool(ToolSpec spec, WorkerFactory factory) : spec_(std::move(spec)), factory_(std::move(factory)) {
    validate_spec(spec_);
    states_.assign(std::size_t(spec_.num_actors), WorkerState::Idle);
    for (int i = 0; i < spec_.num_actors; ++i) threads_.emplace_back([this, i] { worker_loop(std::size_t(i)); });
  }

  ToolPool(const ToolPool&) = delete;
  ToolPool& operator=(const ToolPool&) = delete;

  ~ToolPool() {
    std::deque<Job> orphans;
    {
      std::lock_guard lk(m_);
      stopping_ = true;
      orphans.swap(queue_);
    }
    cv_.notify_all();
    for (auto& t : threads_) t.join();
    for (auto& j : orphans) {
      failed_.fetch_add(1);
      j.done(ToolResult::error(Status::ToolError, "router shutting down"));
    }
  }

  const ToolSpec& spec() const { return spec_; }

  /// False when the queue is full; the job is not taken in that case.
  bool submit(Job job) {
    {
      std::lock_guard lk(m_);
      if (stopping_ || queue_.size() >= spec_.queue_cap) return false;
      dispatched_.fetch_add(1);
      queue_.push_back(std::move(job));
      rolling_depth_ = (1 - kEwmaAlpha) * rolling_depth_ + kEwmaAlpha * double(queue_.size());
    }
    cv_.notify_one();
    return true;
  }

  /// Counts a request rejected before queueing (overload) as dispatched and
  /// failed.
  void count_rejected() {
    dispatched_.fetch_add(1);
    failed_.fetch_add(1);
  }

  ToolStats stats() const {
    ToolStats s;
    // Terminal counters first: dispatched is bumped before any of them, so
    // this order never observes more terminals than dispatches.
    s.completed = completed_.load();
    s.failed = failed_.load();
    s.timed_out = timed_out_.load();
    s.dispatched = dispatched_.load();
    s.workers_replaced = replaced_.load();
    std::lock_guard lk(m_);
    s.queue_depth = queue_.size();
    s.rolling_queue_depth = rolling_depth_;
    s.mean_wait_ms = mean_wait_ms_;
    s.mean_service_ms = mean_service_ms_;
    s.workers = spec_.num_actors;
    for (auto st : states_) s.busy += st == WorkerState::Busy;
    return s;
  }

  std::vector<WorkerState> worker_states() const {
    std::lock_guard lk(m_);
    return states_;
  }

 private:
  void worker_loop(std::size_t slot) {
    std::unique_ptr<Worker> w;
    for (;;) {
      Job job;
      {
        std::unique_lock lk(m_);
        cv_.wait(lk, [&] { return stopping_ || !queue_.empty(); });
        if (stopping_) return;
        job = std::move(queue_.front());
        queue_.pop_front();
        states_[slot] = WorkerState::Busy;
        const double wait = std::chrono::duration<double, std::milli>(SteadyClock::now() - job.enqueued).count();
        mean_wait_ms_ = (1 - kEwmaAlpha) * mean_wait_ms_ + kEwmaAlpha * wait;
        rolling_depth_ = (1 - kEwmaAlpha) * rolling_depth_ + kEwmaAlpha * double(queue_.size());
      }
      const auto start = SteadyClock::now();
      ToolResult res;
      bool dead = false;
      try {
        if (!w) w = factory_();
        res = w->run(job.req, job.timeout, dead);
      } catch (const std::exception& e) {
        dead = true;
        res = ToolResult::error(Status::ToolError, std::string("worker unavailable: ") + e.what());
      }
      if (res.status != Status::Ok) res.variables.clear();
      if (res.status == Status::Ok) completed_.fetch_add(1);
      else if (res.status == Status::Timeout) timed_out_.fetch_add(1);
      else failed_.fetch_add(1);
      {
        std::lock_guard lk(m_);
        const double svc = std::chrono::duration<double, std::milli>(SteadyClock::now() - start).count();
        mean_service_ms_ = (1 - kEwmaAlpha) * mean_service_ms_ + kEwmaAlpha * svc;
        states_[slot] = dead ? WorkerState::Dead : WorkerState::Idle;
      }
      if (dead) {
        w.reset();
        replaced_.fetch_add(1);
        std::lock_guard lk(m_);
        states_[slot] = WorkerState::Idle;
      }
      job.done(std::move(res));
    }
  }

  ToolSpec spec_;
  WorkerFactory factory_;
  mutable std::mutex m_;
  std::condition_variable cv_;
  std::deque<Job> queue_;
  std::vector<WorkerState> states_;
  std::vector<std::thread> threads_;
  bool stopping_ = false;
  double rolling_depth_ = 0, mean_wait_ms_ = 0, mean_service_ms_ = 0;
  std::atomic<std::uint64_t> dispatched_{0}, completed_{0}, failed_{0}, timed_out_{0}, replaced_{0};
};

// ---------------------------------------------------------------------------
// Sessions

struct SessionInfo {
  std::string fixture_id;
  std::uint64_t seed = 0;
};

struct Session {
  SessionInfo info;
  std::mutex m;
  ValueMap vars;
  SteadyClock::time_point created;
  SteadyClock::time_point last_used;

  ValueMap snapshot() {
    std::lock_guard lk(m);
    return vars;
  }
};

class SessionStore {
 public:
  using NowFn = std::function<SteadyClock::time_point()>;

  explicit SessionStore(std::optional<SteadyClock::duration> ttl = std::nullopt, NowFn now = SteadyClock::now)
      : ttl_(ttl), now_(std::move(now)) {}

  /// Opening an existing id starts it afresh.
  void open(const std::string& id, SessionInfo info) {
    auto s = std::make_shared<Session>();
    s->info = std::move(info);
    s->created = s->last_used = now_();
    std::lock_guard lk(m_);
    sessions_[id] = std::move(s);
  }

  bool close(const std::string& id) {
    std::lock_guard lk(m_);
    return sessions_.erase(id) > 0;
  }

  /// Null when missing or idle past the TTL.
  std::shared_ptr<Session> find(const std::string& id) {
    const auto now = now_();
    std::lock_guard lk(m_);
    auto it = sessions_.find(id);
    if (it == sessions_.end()) return nullptr;
    auto& s = it->second;
    {
      std::lock_guard sl(s->m);
      if (ttl_ && now - s->last_used > *ttl_) return nullptr;
      s->last_used = now;
    }
    return s;
  }

  std::size_t gc(SteadyClock::time_point now) {
    if (!ttl_) return 0;
    std::lock_guard lk(m_);
    std::size_t n = 0;
    for (auto it = sessions_.begin(); it != sessions_.end();) {
      bool expired;
      {
        std::lock_guard sl(it->second->m);
        expired = now - it->second->last_used > *ttl_;
      }
      if (expired) {
        it = sessions_.erase(it);
        ++n;
      } else {
        ++it;
      }
    }
    return n;
  }

  std::size_t size() const {
    std::lock_guard lk(m_);
    return sessions_.size();
  }

 private:
  std::optional<SteadyClock::duration> ttl_;
  NowFn now_;
  mutable std::mutex m_;
  std::map<std::string, std::shared_ptr<Session>> sessions_;
};

// ---------------------------------------------------------------------------
// Router

class Router {
 public:
  virtual ~Router() = default;
  virtual void open_session(const std::string& id, const SessionInfo& info) = 0;
  virtual void close_session(const std::string& id) = 0;
  /// Never blocks on tool execution. An empty session id runs statelessly.
  virtual std::future<ToolResult> dispatch(const std::string& session_id, ToolRequest req) = 0;
  virtual RouterStats stats_snapshot() = 0;
};

inline std::future<ToolResult> ready_result(ToolResult r) {
  std::promise<ToolResult> p;
  p.set_value(std::move(r));
  return p.get_future();
}

struct RegistrationHandle {
  std::string name;
};

class Registry : public Router {
 public:
  explicit Registry(std::map<std::string, double> capacity = {}, std::optional<SteadyClock::duration> session_ttl = {},
                    SessionStore::NowFn now = SteadyClock::now)
      : ledger_(std::move(capacity)), sessions_(session_ttl, std::move(now)) {}

  ~Registry() override {
    std::unique_lock lk(m_);
    pools_.clear();
  }

  RegistrationHandle register_tool(const ToolSpec& spec, WorkerFactory factory, bool wants_session = false) {
    validate_spec(spec);
    std::unique_lock lk(m_);
    if (pools_.count(spec.name)) throw AlreadyRegistered("tool already registered: " + spec.name);
    ledger_.admit(spec.name, spec.resources, spec.num_actors);
    try {
      pools_[spec.name] = Entry{std::make_unique<ToolPool>(spec, std::move(factory)), wants_session};
    } catch (...) {
      ledger_.release(spec.name);
      throw;
    }
    return {spec.name};
  }

  void open_session(const std::string& id, const SessionInfo& info) override { sessions_.open(id, info); }
  void close_session(const std::string& id) override { sessions_.close(id); }

  std::future<ToolResult> dispatch(const std::string& session_id, ToolRequest req) override {
    std::shared_lock lk(m_);
    auto it = pools_.find(req.tool);
    if (it == pools_.end()) {
      unknown_tool_.fetch_add(1);
      return ready_result(ToolResult::error(Status::UnknownTool, "unknown tool: " + req.tool));
    }
    ToolPool& pool = *it->second.pool;
    std::shared_ptr<Session> session;
    ValueMap store;
    if (!session_id.empty()) {
      session = sessions_.find(session_id);
      if (!session) {
        pool.count_rejected();
        return ready_result(ToolResult::error(Status::BadArgs, "unknown session: " + session_id));
      }
      store = session->snapshot();
      if (req.fixture_id.empty()) req.fixture_id = session->info.fixture_id;
      if (req.seed == 0) req.seed = session->info.seed;
    }
    try {
      req.args = resolve_arguments(req.args, store);
    } catch (const BadArgs& e) {
      pool.count_rejected();
      return ready_result(ToolResult::error(Status::BadArgs, e.what()));
    }
    if (it->second.wants_session) req.session_vars = std::move(store);
    auto promise = std::make_shared<std::promise<ToolResult>>();
    auto fut = promise->get_future();
    ToolPool::Job job;
    job.timeout = std::chrono::milliseconds(std::min(req.timeout_ms, pool.spec().default_timeout_ms));
    job.req = std::move(req);
    job.enqueued = SteadyClock::now();
    job.done = [promise, session](ToolResult r) {
      if (session && r.status == Status::Ok && !r.variables.empty()) {
        std::lock_guard sl(session->m);
        for (auto& [k, v] : r.variables) session->vars[k] = v;
      }
      promise->set_value(std::move(r));
    };
    if (!pool.submit(std::move(job))) {
      pool.count_rejected();
      return ready_result(ToolResult::error(Status::ToolError, "overloaded"));
    }
    return fut;
  }

  RouterStats stats_snapshot() override {
    RouterStats s;
    std::shared_lock lk(m_);
    for (const auto& [name, e] : pools_) s.tools[name] = e.pool->stats();
    s.unknown_tool = unknown_tool_.load();
    return s;
  }

  std::vector<WorkerState> worker_states(const std::string& tool) const {
    std::shared_lock lk(m_);
    return pools_.at(tool).pool->worker_states();
  }

  std::vector<ToolSpec> specs() const {
    std::shared_lock lk(m_);
    std::vector<ToolSpec> out;
    for (const auto& [n, e] : pools_) out.push_back(e.pool->spec());
    return out;
  }

  const ResourceLedger& ledger() const { return ledger_; }
  SessionStore& sessions() { return sessions_; }
  std::size_t gc_sessions(SteadyClock::time_point now) { return sessions_.gc(now); }

  /// Session variables, for inspection.
  std::optional<ValueMap> session_variables(const std::string& id) {
    auto s = sessions_.find(id);
    if (!s) return std::nullopt;
    return s->snapshot();
  }

 private:
  struct Entry {
    std::unique_ptr<ToolPool> pool;
    bool wants_session = false;
  };

  ResourceLedger ledger_;
  SessionStore sessions_;
  mutable std::shared_mutex m_;
  std::map<std::string, Entry> pools_;
  std::atomic<std::uint64_t> unknown_tool_{0};
};

// ---------------------------------------------------------------------------
// YAML tool configuration

inline std::vector<ToolSpec> parse_tool_config(const std::string& yaml_text) {
  YAML::Node root;
  try {
    root = YAML::Load(yaml_text);
  } catch (const YAML::Exception& e) {
    throw ConfigError(std::string("tool config is not valid YAML: ") + e.what());
  }
  if (!root || root.IsNull()) return {};
  if (!root.IsMap()) throw ConfigError("tool config must map tool names to settings");
  std::vector<ToolSpec> out;
  for (const auto& kv : root) {
    ToolSpec s;
    s.name = kv.first.as<std::string>();
    const auto& n = kv.second;
    if (!n.IsMap()) throw ConfigError(s.name + ": settings must be a map");
    try {
      for (const auto& f : n) {
        const auto key = f.first.as<std::string>();
        if (key == "num_actors") s.num_actors = f.second.as<int>();
        else if (key == "queue_cap") s.queue_cap = f.second.as<std::size_t>();
        else if (key == "default_timeout_ms") s.default_timeout_ms = f.second.as<std::uint32_t>();
        else if (key == "resources") {
          if (!f.second.IsMap()) throw ConfigError(s.name + ": resources must be a map");
          for (const auto& r : f.second) s.resources[r.first.as<std::string>()] = r.second.as<double>();
        } else if (key == "isolation") {
          const auto v = f.second.as<std::string>();
          if (v == "process") s.isolation = Isolation::Process;
          else if (v == "in_process") s.isolation = Isolation::InProcess;
          else throw ConfigError(s.name + ": isolation must be 'process' or 'in_process'");
        } else {
          throw ConfigError(s.name + ": unknown setting '" + key + "'");
        }
      }
    } catch (const YAML::Exception& e) {
      throw ConfigError(s.name + ": " + e.what());
    }
    validate_spec(s);
    out.push_back(std::move(s));
  }
  return out;
}

/// TOOLSHED_CONFIG, when set, replaces the given path.
inline std::filesystem::path tool_config_path(const std::filesystem::path& given) {
  if (const char* env = std::getenv("TOOLSHED_CONFIG"); env && *env) return env;
  return given;
}

inline std::vector<ToolSpec> load_tool_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open tool config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_tool_config(ss.str());
}

/// Parses "gpu=8,cpu=16".
inline std::map<std::string, double> parse_capacity(const std::string& text) {
  std::map<std::string, double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    const auto eq = item.find('=');
    if (eq == std::string::npos) throw ConfigError("capacity entry '" + item + "' needs name=units");
    try {
      out[item.substr(0, eq)] = std::stod(item.substr(eq + 1));
    } catch (const std::exception&) {
      throw ConfigError("capacity entry '" + item + "' has a bad number");
    }
  }
  return out;
}

}  // namespace toolshed
