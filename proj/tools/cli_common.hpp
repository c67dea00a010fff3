// SPDX-License-Identifier: Apache-2.0
//
// Pieces shared by the toolshed and harness programs.
#pragma once

#include <csignal>
#include <iostream>

#include <CLI11.hpp>

#include "toolshed/harness.hpp"
#include "toolshed/process.hpp"
#include "toolshed/remote.hpp"

namespace toolshed::cli {

enum Exit { kOk = 0, kFailure = 1, kConfig = 2, kUnreachable = 3, kDataset = 4 };

/// Runs `body`, mapping the error families onto exit codes.
template <class F>
int guarded_main(F&& body) {
  try {
    return body();
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const RegistryUnreachable& e) {
    std::cerr << "registry unreachable: " << e.what() << "\n";
    return kUnreachable;
  } catch (const LoadError& e) {
    std::cerr << "dataset error: " << e.what() << "\n";
    return kDataset;
  } catch (const ScoreError& e) {
    std::cerr << "dataset error: " << e.what() << "\n";
    return kDataset;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFailure;
  }
}

inline std::string self_exe() {
  std::error_code ec;
  auto p = std::filesystem::read_symlink("/proc/self/exe", ec);
  return ec ? std::string() : p.string();
}

/// Tool specs from --config (or TOOLSHED_CONFIG); every mock tool when neither is set.
inline std::vector<ToolSpec> tool_specs(const std::string& config, const Toolbox& toolbox) {
  const auto path = tool_config_path(config);
  if (path.empty()) return default_specs(toolbox);
  return load_tool_config(path);
}

inline std::shared_ptr<FixtureIndex> fixture_index(const std::vector<std::shared_ptr<const SceneFixture>>& v) {
  return std::make_shared<FixtureIndex>(index_fixtures(v));
}

/// A local registry serving the mock toolbox over `fixtures`.
struct LocalRouter {
  std::unique_ptr<Registry> registry;

  LocalRouter(const std::vector<ToolSpec>& specs, const std::map<std::string, double>& capacity, RobotMode robot,
              std::shared_ptr<const FixtureIndex> fixtures, const ProcessOptions& popts) {
    registry = std::make_unique<Registry>(capacity, std::chrono::minutes(30));
    register_all(*registry, specs, make_mock_toolbox(robot), std::move(fixtures), popts);
  }
};

/// "http(s)://..." is a chat endpoint, anything else a script file.
inline std::shared_ptr<rollout::Policy> make_policy(const std::string& spec, const std::string& model, bool inline_images) {
  if (spec.rfind("http://", 0) == 0 || spec.rfind("https://", 0) == 0)
    return std::make_shared<rollout::RemoteChatPolicy>(spec, model, inline_images);
  return std::make_shared<rollout::ScriptedPolicy>(rollout::ScriptedPolicy::from_file(spec));
}

inline std::string read_text(const std::filesystem::path& p) {
  std::ifstream in(p);
  if (!in) throw ConfigError("cannot read " + p.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Registry connection options shared by `harness run` and `harness sessions`.
struct RouterOptions {
  std::string registry;  // host:port of `toolshed serve`; empty runs tools in-process
  std::string config;
  std::string capacity;
  bool mock_robot = false;

  void add(CLI::App& app) {
    app.add_option("--registry", registry, "Address of a running `toolshed serve`; tools run in-process when omitted");
    app.add_option("--config", config, "Tool config YAML for in-process tools");
    app.add_option("--capacity", capacity, "Resource capacity for in-process tools, e.g. num_gpus=8,num_cpus=8");
    app.add_flag("--mock-robot", mock_robot, "Serve the `robot` tool from the mock robot");
  }

  /// Owns whichever router was chosen.
  struct Handle {
    std::unique_ptr<LocalRouter> local;
    std::unique_ptr<RemoteRouter> remote;
    Router& get() { return local ? static_cast<Router&>(*local->registry) : *remote; }
  };

  Handle open(std::shared_ptr<const FixtureIndex> fixtures, const std::string& dataset_dir) const {
    Handle h;
    if (!registry.empty()) {
      auto [host, port] = split_address(registry);
      h.remote = std::make_unique<RemoteRouter>(host, port);
      if (!h.remote->healthy()) throw RegistryUnreachable("no registry answering at " + registry);
      return h;
    }
    const auto robot = mock_robot ? RobotMode::Mock : RobotMode::LiveStub;
    ProcessOptions popts{self_exe(), {"--dataset", dataset_dir}};
    if (mock_robot) popts.extra_args.push_back("--mock-robot");
    h.local = std::make_unique<LocalRouter>(tool_specs(config, make_mock_toolbox(robot)), parse_capacity(capacity), robot,
                                            std::move(fixtures), popts);
    return h;
  }
};

/// Blocks until SIGINT or SIGTERM.
inline void wait_for_signal() {
  sigset_t set;
  sigemptyset(&set);
  sigaddset(&set, SIGINT);
  sigaddset(&set, SIGTERM);
  int sig = 0;
  sigwait(&set, &sig);
}

/// Blocks SIGINT/SIGTERM in every thread started after this call.
inline void block_signals() {
  sigset_t set;
  sigemptyset(&set);
  sigaddset(&set, SIGINT);
  sigaddset(&set, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &set, nullptr);
}

/// `<exe> worker --tool X [--dataset D] [--mock-robot]`: the child side of a
/// process-isolated tool.
inline void add_worker_command(CLI::App& app, std::function<int()>& run) {
  auto* w = app.add_subcommand("worker", "Serve one tool over stdin/stdout (used by process isolation)");
  w->group("");  // hidden
  auto tool = std::make_shared<std::string>();
  auto dataset = std::make_shared<std::string>();
  auto mock_robot = std::make_shared<bool>(false);
  w->add_option("--tool", *tool)->required();
  w->add_option("--dataset", *dataset);
  w->add_flag("--mock-robot", *mock_robot);
  w->callback([&run, tool, dataset, mock_robot] {
    run = [tool, dataset, mock_robot] {
      const auto tb = make_mock_toolbox(*mock_robot ? RobotMode::Mock : RobotMode::LiveStub);
      auto it = tb.find(*tool);
      if (it == tb.end()) throw ConfigError("no implementation for tool '" + *tool + "'");
      std::shared_ptr<const FixtureIndex> fixtures;
      if (!dataset->empty()) fixtures = fixture_index(load_dataset(*dataset));
      return serve_worker(0, 1, it->second, fixtures);
    };
  });
}

}  // namespace toolshed::cli
