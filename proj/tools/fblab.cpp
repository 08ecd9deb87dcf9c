// fblab: command-line shell around the library. Subcommands: train,
// theory-check, sweep, aggregate, eval-checkpoint. Exit codes: 0 ok,
// 2 config/usage error, 3 numeric abort, 4 check failure.

#include <cstdint>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "fblab/fblab.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Tabular forward-backward representation laboratory"};
  app.require_subcommand(1);

  std::string config_path, out_dir, ckpt_path, sweep_param;
  std::uint64_t seed = 0;
  bool seed_set = false;
  std::vector<std::string> sweep_values, aggregate_inputs;

  const auto add_common = [&](CLI::App* sub, bool config_required) {
    auto* copt = sub->add_option("--config", config_path, "Experiment config file");
    if (config_required) copt->required();
    sub->add_option("--seed", seed, "Master seed (overrides the config)")
        ->each([&](const std::string&) { seed_set = true; });
    sub->add_option("--out", out_dir, "Output directory");
  };

  CLI::App* cmd_train = app.add_subcommand("train", "Run one training experiment");
  add_common(cmd_train, true);

  CLI::App* cmd_theory =
      app.add_subcommand("theory-check", "Verify the analytic properties of the oracles");
  add_common(cmd_theory, false);

  CLI::App* cmd_sweep = app.add_subcommand("sweep", "Run one experiment per parameter value");
  add_common(cmd_sweep, true);
  cmd_sweep->add_option("--param", sweep_param, "Swept key: lr or tau_policy_train")
      ->required();
  cmd_sweep->add_option("--values", sweep_values, "Comma-separated values")
      ->required()
      ->delimiter(',');

  CLI::App* cmd_agg =
      app.add_subcommand("aggregate", "Per-step mean/std over several metrics.csv files");
  cmd_agg->add_option("--out", out_dir, "Output directory");
  cmd_agg->add_option("inputs", aggregate_inputs, "metrics.csv paths")->required();

  CLI::App* cmd_eval =
      app.add_subcommand("eval-checkpoint", "Evaluate a saved model checkpoint");
  add_common(cmd_eval, false);
  cmd_eval->add_option("checkpoint", ckpt_path, "Checkpoint file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;  // usage problems map to the config-error code
  }

  const std::uint64_t* seed_ptr = seed_set ? &seed : nullptr;
  try {
    if (cmd_train->parsed())
      return fblab::harness::run_experiment(config_path, seed_ptr, out_dir, std::cerr);
    if (cmd_theory->parsed())
      return fblab::harness::run_theory_checks(config_path, seed_ptr, out_dir, std::cout,
                                               std::cerr);
    if (cmd_sweep->parsed())
      return fblab::harness::run_sweep(config_path, sweep_param, sweep_values, seed_ptr,
                                       out_dir, std::cout, std::cerr);
    if (cmd_agg->parsed())
      return fblab::harness::run_aggregate(aggregate_inputs, out_dir, std::cout, std::cerr);
    if (cmd_eval->parsed())
      return fblab::harness::run_eval_checkpoint(ckpt_path, config_path, seed_ptr, out_dir,
                                                 std::cout, std::cerr);
  } catch (const fblab::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const fblab::NumericError& e) {
    std::cerr << "numeric error: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 3;
  }
  return 2;
}
