// SPDX-License-Identifier: Apache-2.0
//
// harness run      --dataset <dir> --policy <endpoint|script.jsonl> --rollouts N --max-turns T --seed S --out traces.jsonl [--balance]
// harness score    --traces <file> --dataset <dir>
// harness sessions --listen <addr> --dataset <dir> --policy <endpoint|script.jsonl>
#include "cli_common.hpp"

#include "toolshed/desk_dataset.hpp"
#include "toolshed/sessions.hpp"

using namespace toolshed;

namespace {

struct PolicyOptions {
  std::string policy, model = "default", system_prompt;
  bool inline_images = false;

  void add(CLI::App& app) {
    app.add_option("--policy", policy, "Chat endpoint (http://...) or scripted policy JSONL")->required();
    app.add_option("--model", model, "Model name sent to a chat endpoint");
    app.add_option("--system-prompt", system_prompt, "System prompt file (default: <dataset>/system_prompt.txt)");
    app.add_flag("--inline-images", inline_images, "Send images inline to a chat endpoint");
  }

  std::string prompt(const std::string& dataset) const {
    if (!system_prompt.empty()) return cli::read_text(system_prompt);
    const auto p = std::filesystem::path(dataset) / "system_prompt.txt";
    return std::filesystem::exists(p) ? cli::read_text(p) : std::string();
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Rollout harness"};
  app.require_subcommand(1);
  std::function<int()> run;

  // run
  auto* run_cmd = app.add_subcommand("run", "Run rollout groups over a dataset and write traces");
  std::string dataset, out = "traces.jsonl", report_path;
  int rollouts = 5, max_turns = 10, parallel = 4;
  std::uint64_t seed = 0;
  std::uint32_t timeout_ms = 30000;
  double format_lambda = 0.0;
  bool balance = false;
  PolicyOptions pol;
  cli::RouterOptions ro;
  run_cmd->add_option("--dataset", dataset, "Dataset directory")->required();
  pol.add(*run_cmd);
  run_cmd->add_option("--rollouts", rollouts, "Rollouts per sample (N_group)");
  run_cmd->add_option("--max-turns", max_turns, "Policy turns per rollout (T_max)");
  run_cmd->add_option("--seed", seed, "Base seed");
  run_cmd->add_option("--out", out, "Trace JSONL; timing goes to <out>.timing.jsonl");
  run_cmd->add_option("--report", report_path, "Also write the batch report JSON here");
  run_cmd->add_option("--parallel", parallel, "Samples in flight");
  run_cmd->add_option("--timeout-ms", timeout_ms, "Per tool call timeout");
  run_cmd->add_option("--format-lambda", format_lambda, "Weight of the format score added to the reward");
  run_cmd->add_flag("--balance", balance, "Balance the answers of choice questions first");
  ro.add(*run_cmd);
  run_cmd->callback([&] {
    run = [&] {
      auto fixtures = load_dataset(dataset);
      if (balance) fixtures = harness::balance_dataset(fixtures, seed);
      auto policy = cli::make_policy(pol.policy, pol.model, pol.inline_images);
      auto router = ro.open(cli::fixture_index(fixtures), dataset);
      harness::BatchConfig cfg;
      cfg.rollout.n_group = rollouts;
      cfg.rollout.t_max = max_turns;
      cfg.rollout.seed = seed;
      cfg.rollout.timeout_ms = timeout_ms;
      cfg.parallel = parallel;
      cfg.format_lambda = format_lambda;
      cfg.system_prompt = pol.prompt(dataset);
      harness::TraceFileWriter writer(out);
      const auto result = harness::run_batch(router.get(), fixtures, *policy, cfg, writer.sink());
      const auto report = result.report.to_json().dump(2);
      std::cout << report << std::endl;
      if (!report_path.empty()) desk::write_file(report_path, report + "\n");
      return int(cli::kOk);
    };
  });

  // score
  auto* score_cmd = app.add_subcommand("score", "Re-score a trace file against a dataset");
  std::string traces, score_dataset;
  score_cmd->add_option("--traces", traces, "Trace JSONL")->required();
  score_cmd->add_option("--dataset", score_dataset, "Dataset directory")->required();
  score_cmd->callback([&] {
    run = [&] {
      const auto fixtures = index_fixtures(load_dataset(score_dataset));
      const auto outcome = harness::score_traces(harness::read_traces(traces), fixtures);
      std::cout << outcome.report.to_json().dump(2) << std::endl;
      if (outcome.mismatches) {
        std::cerr << outcome.mismatches << " record(s) carry scores that differ from the recomputed ones\n";
        return int(cli::kFailure);
      }
      return int(cli::kOk);
    };
  });

  // sessions
  auto* sess_cmd = app.add_subcommand("sessions", "Serve the interactive session API");
  std::string listen = "127.0.0.1:8701", sess_dataset;
  PolicyOptions sess_pol;
  cli::RouterOptions sess_ro;
  int sess_turns = 10;
  std::uint64_t sess_seed = 0;
  sess_cmd->add_option("--listen", listen, "host:port");
  sess_cmd->add_option("--dataset", sess_dataset, "Dataset directory")->required();
  sess_cmd->add_option("--max-turns", sess_turns, "Policy turns per message");
  sess_cmd->add_option("--seed", sess_seed, "Base seed");
  sess_pol.add(*sess_cmd);
  sess_ro.add(*sess_cmd);
  sess_cmd->callback([&] {
    run = [&] {
      cli::block_signals();
      const auto fixtures = cli::fixture_index(load_dataset(sess_dataset));
      auto router = sess_ro.open(fixtures, sess_dataset);
      SessionServiceConfig cfg;
      cfg.rollout.t_max = sess_turns;
      cfg.rollout.seed = sess_seed;
      cfg.system_prompt = sess_pol.prompt(sess_dataset);
      SessionService svc(router.get(), fixtures, cli::make_policy(sess_pol.policy, sess_pol.model, sess_pol.inline_images),
                         cfg);
      auto [host, port] = split_address(listen);
      const int bound = svc.bind(host, port);
      std::cout << "listening on " << host << ":" << bound << std::endl;
      std::thread t([&] { svc.serve(); });
      cli::wait_for_signal();
      svc.stop();
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
