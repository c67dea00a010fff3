// SPDX-License-Identifier: Apache-2.0
//
// toolshed serve --config <yaml> --listen <addr> [--dataset <dir>] [--capacity ...]
#include "cli_common.hpp"

using namespace toolshed;

int main(int argc, char** argv) {
  CLI::App app{"Tool registry and router"};
  app.require_subcommand(1);
  std::function<int()> run;

  auto* serve = app.add_subcommand("serve", "Serve the configured tools over HTTP");
  std::string config, listen = "127.0.0.1:8700", dataset, capacity;
  bool mock_robot = false;
  std::size_t threads = 64;
  serve->add_option("--config", config, "Tool config YAML (TOOLSHED_CONFIG overrides)");
  serve->add_option("--listen", listen, "host:port");
  serve->add_option("--dataset", dataset, "Fixture dataset the mock tools read");
  serve->add_option("--capacity", capacity, "Resource capacity, e.g. num_gpus=8,num_cpus=8");
  serve->add_option("--http-threads", threads, "HTTP worker threads");
  serve->add_flag("--mock-robot", mock_robot, "Serve the `robot` tool from the mock robot");
  serve->callback([&] {
    run = [&] {
      cli::block_signals();
      std::shared_ptr<const FixtureIndex> fixtures = std::make_shared<FixtureIndex>();
      if (!dataset.empty()) fixtures = cli::fixture_index(load_dataset(dataset));
      const auto robot = mock_robot ? RobotMode::Mock : RobotMode::LiveStub;
      ProcessOptions popts{cli::self_exe(), {}};
      if (!dataset.empty()) popts.extra_args = {"--dataset", dataset};
      if (mock_robot) popts.extra_args.push_back("--mock-robot");
      cli::LocalRouter local(cli::tool_specs(config, make_mock_toolbox(robot)), parse_capacity(capacity), robot, fixtures,
                             popts);
      RouterServer server(*local.registry, threads);
      auto [host, port] = split_address(listen);
      const int bound = server.bind(host, port);
      std::cout << "listening on " << host << ":" << bound << std::endl;
      std::thread t([&] { server.serve(); });
      cli::wait_for_signal();
      server.stop();
      t.join();
      return int(cli::kOk);
    };
  });
  cli::add_worker_command(app, run);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : int(cli::kConfig);
  }
  return cli::guarded_main(run);
}
