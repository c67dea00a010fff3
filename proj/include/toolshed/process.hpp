// SPDX-License-Identifier: Apache-2.0
//
// Out-of-process workers. The parent speaks TSH1 frames over the child's
// stdin/stdout; a timeout or crash kills the child and a fresh one is spawned
// for the next request.
#pragma once

#include <fcntl.h>
#include <poll.h>
#include <signal.h>
#include <spawn.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>
#include <mutex>

#include "toolshed/registry.hpp"

extern char** environ;

namespace toolshed {

namespace process_detail {

inline void write_all(int fd, std::span<const std::uint8_t> bytes) {
  std::size_t off = 0;
  while (off < bytes.size()) {
    const auto n = ::write(fd, bytes.data() + off, bytes.size() - off);
    if (n < 0) {
      if (errno == EINTR) continue;
      throw Error(std::string("pipe write failed: ") + std::strerror(errno));
    }
    off += std::size_t(n);
  }
}

enum class ReadStatus { Frame, Eof, Timeout };

/// Reads one complete frame into `out`. A negative deadline waits forever.
inline ReadStatus read_frame(int fd, std::vector<std::uint8_t>& buf, std::vector<std::uint8_t>& out,
                             std::optional<SteadyClock::time_point> deadline) {
  for (;;) {
    if (auto len = frame_length(buf)) {
      out.assign(buf.begin(), buf.begin() + std::ptrdiff_t(*len));
      buf.erase(buf.begin(), buf.begin() + std::ptrdiff_t(*len));
      return ReadStatus::Frame;
    }
    int wait_ms = -1;
    if (deadline) {
      const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(*deadline - SteadyClock::now()).count();
      if (left <= 0) return ReadStatus::Timeout;
      wait_ms = int(std::min<long long>(left, 1 << 30));
    }
    pollfd p{fd, POLLIN, 0};
    const int pr = ::poll(&p, 1, wait_ms);
    if (pr < 0) {
      if (errno == EINTR) continue;
      return ReadStatus::Eof;
    }
    if (pr == 0) return ReadStatus::Timeout;
    std::uint8_t chunk[65536];
    const auto n = ::read(fd, chunk, sizeof chunk);
    if (n < 0 && errno == EINTR) continue;
    if (n <= 0) return ReadStatus::Eof;
    buf.insert(buf.end(), chunk, chunk + n);
  }
}

}  // namespace process_detail

struct ProcessOptions {
  std::string exe;                      // binary that understands `worker --tool <name>`
  std::vector<std::string> extra_args;  // e.g. --dataset <dir>
};

class ProcessWorker : public Worker {
 public:
  ProcessWorker(const ProcessOptions& opts, const std::string& tool) {
    static std::once_flag ignore_pipe;
    std::call_once(ignore_pipe, [] { ::signal(SIGPIPE, SIG_IGN); });
    int to_child[2], from_child[2];
    if (::pipe2(to_child, O_CLOEXEC) != 0) throw Error("pipe failed");
    if (::pipe2(from_child, O_CLOEXEC) != 0) {
      ::close(to_child[0]), ::close(to_child[1]);
      throw Error("pipe failed");
    }
    posix_spawn_file_actions_t fa;
    posix_spawn_file_actions_init(&fa);
    posix_spawn_file_actions_adddup2(&fa, to_child[0], 0);
    posix_spawn_file_actions_adddup2(&fa, from_child[1], 1);
    std::vector<std::string> args{opts.exe, "worker", "--tool", tool};
    args.insert(args.end(), opts.extra_args.begin(), opts.extra_args.end());
    std::vector<char*> argv;
    for (auto& a : args) argv.push_back(a.data());
    argv.push_back(nullptr);
    const int rc = ::posix_spawn(&pid_, opts.exe.c_str(), &fa, nullptr, argv.data(), environ);
    posix_spawn_file_actions_destroy(&fa);
    ::close(to_child[0]);
    ::close(from_child[1]);
    if (rc != 0) {
      ::close(to_child[1]), ::close(from_child[0]);
      throw Error("cannot spawn worker " + opts.exe + ": " + std::strerror(rc));
    }
    in_ = to_child[1];
    out_ = from_child[0];
  }

  ~ProcessWorker() override {
    if (in_ >= 0) ::close(in_);
    if (out_ >= 0) ::close(out_);
    if (pid_ > 0) {
      ::kill(pid_, SIGKILL);
      ::waitpid(pid_, nullptr, 0);
    }
  }

  ToolResult run(const ToolRequest& req, std::chrono::milliseconds timeout, bool& dead) override {
    using namespace process_detail;
    const auto deadline = SteadyClock::now() + timeout;
    Envelope env{EnvelopeKind::ToolRequest, "", ++seq_, req};
    try {
      write_all(in_, encode_envelope(env));
    } catch (const Error& e) {
      dead = true;
      return ToolResult::error(Status::ToolError, std::string("worker crashed: ") + e.what());
    }
    std::vector<std::uint8_t> frame;
    ReadStatus st;
    try {
      st = read_frame(out_, buf_, frame, deadline);
    } catch (const DecodeError& e) {
      dead = true;
      return ToolResult::error(Status::ToolError, std::string("worker sent a bad frame: ") + e.what());
    }
    if (st == ReadStatus::Timeout) {
      dead = true;
      return ToolResult::error(Status::Timeout, req.tool + "." + req.method + " exceeded " +
                                                    std::to_string(timeout.count()) + " ms");
    }
    if (st == ReadStatus::Eof) {
      dead = true;
      return ToolResult::error(Status::ToolError, "worker crashed");
    }
    try {
      auto reply = decode_envelope(frame);
      if (auto* r = std::get_if<ToolResult>(&reply.body)) return std::move(*r);
    } catch (const DecodeError&) {
    }
    dead = true;
    return ToolResult::error(Status::ToolError, "worker sent a malformed reply");
  }

 private:
  pid_t pid_ = -1;
  int in_ = -1, out_ = -1;
  std::uint64_t seq_ = 0;
  std::vector<std::uint8_t> buf_;
};

/// Child side: serves requests from `in_fd` until EOF. A WorkerFault aborts
/// the process, which the parent observes as a crash.
inline int serve_worker(int in_fd, int out_fd, const ToolImpl& impl, std::shared_ptr<const FixtureIndex> fixtures) {
  using namespace process_detail;
  std::vector<std::uint8_t> buf, frame;
  for (;;) {
    ReadStatus st;
    try {
      st = read_frame(in_fd, buf, frame, std::nullopt);
    } catch (const DecodeError&) {
      return 1;
    }
    if (st != ReadStatus::Frame) return 0;
    Envelope env;
    try {
      env = decode_envelope(frame);
    } catch (const DecodeError&) {
      return 1;
    }
    auto* req = std::get_if<ToolRequest>(&env.body);
    if (!req) return 1;
    ToolContext ctx;
    ctx.seed = req->seed;
    if (fixtures && !req->fixture_id.empty())
      if (auto it = fixtures->find(req->fixture_id); it != fixtures->end()) ctx.fixture = it->second;
    ToolResult res;
    try {
      res = invoke_tool(impl, *req, ctx);
    } catch (const WorkerFault&) {
      std::abort();
    }
    Envelope reply{EnvelopeKind::ToolResult, env.session_id, env.seq, std::move(res)};
    std::vector<std::uint8_t> bytes;
    try {
      bytes = encode_envelope(reply);
    } catch (const EncodeError& e) {
      bytes = encode_envelope({EnvelopeKind::ToolResult, env.session_id, env.seq,
                               ToolResult::error(Status::ToolError, std::string("result not encodable: ") + e.what())});
    }
    try {
      write_all(out_fd, bytes);
    } catch (const Error&) {
      return 0;
    }
  }
}

/// Worker factory for one configured tool.
inline WorkerFactory make_worker_factory(const ToolSpec& spec, const Toolbox& toolbox,
                                         std::shared_ptr<const FixtureIndex> fixtures, const ProcessOptions& popts) {
  if (spec.isolation == Isolation::Process) {
    if (popts.exe.empty()) throw ConfigError(spec.name + ": process isolation needs a worker executable");
    return [popts, name = spec.name] { return std::make_unique<ProcessWorker>(popts, name); };
  }
  auto it = toolbox.find(spec.name);
  if (it == toolbox.end()) throw ConfigError("no implementation for tool '" + spec.name + "'");
  return [impl = it->second, fixtures] { return std::make_unique<InProcessWorker>(impl, fixtures); };
}

/// Registers every configured tool.
inline void register_all(Registry& reg, const std::vector<ToolSpec>& specs, const Toolbox& toolbox,
                         std::shared_ptr<const FixtureIndex> fixtures, const ProcessOptions& popts) {
  for (const auto& s : specs) {
    auto it = toolbox.find(s.name);
    if (it == toolbox.end()) throw ConfigError("no implementation for tool '" + s.name + "'");
    reg.register_tool(s, make_worker_factory(s, toolbox, fixtures, popts), it->second.wants_session);
  }
}

/// One in-process spec per toolbox entry, used when no config file is given.
inline std::vector<ToolSpec> default_specs(const Toolbox& toolbox, int actors = 2) {
  std::vector<ToolSpec> out;
  for (const auto& [name, impl] : toolbox) {
    ToolSpec s;
    s.name = name;
    s.num_actors = actors;
    out.push_back(s);
  }
  return out;
}

}  // namespace toolshed
