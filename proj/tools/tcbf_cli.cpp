#include <CLI11.hpp>

#include <iostream>

#include "tcbf/cli.hpp"

namespace {

void add_common(CLI::App* cmd, tcbf::cli::Options& opt) {
  cmd->add_option("-c,--config", opt.config, "scenario file")->required();
  cmd->add_option("--set", opt.overrides, "override a config key, key=value")
      ->allow_extra_args(false);
  cmd->add_option("--out", opt.out, "output directory");
  cmd->add_option("--seed", opt.seed, "random seed");
  cmd->add_flag("--zoh", opt.zoh, "hold the input over each step");
  cmd->add_flag("--strict-range", opt.strict_range,
                "fail before simulating if the formula is out of range at x0");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Tunable CBF controllers: simulate, sweep, check and margin"};
  app.require_subcommand(1);
  tcbf::cli::Options opt;
  std::string param;
  std::string values;

  CLI::App* simulate = app.add_subcommand("simulate", "simulate one scenario and write a CSV");
  add_common(simulate, opt);
  CLI::App* sweep = app.add_subcommand("sweep", "run one scenario per parameter value");
  add_common(sweep, opt);
  sweep->add_option("--param", param, "swept key (eta, kappa, sigma, gamma or dotted path)")
      ->required();
  sweep->add_option("--values", values, "comma-separated values")->required();
  CLI::App* check = app.add_subcommand("check", "compatibility and kappa-range check on a grid");
  add_common(check, opt);
  CLI::App* margin = app.add_subcommand("margin", "sampled safety margin along a run");
  add_common(margin, opt);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : tcbf::cli::kConfigError;
  }

  if (*simulate) return tcbf::cli::cmd_simulate(opt, std::cout, std::cerr);
  if (*sweep) return tcbf::cli::cmd_sweep(opt, param, values, std::cout, std::cerr);
  if (*check) return tcbf::cli::cmd_check(opt, std::cout, std::cerr);
  return tcbf::cli::cmd_margin(opt, std::cout, std::cerr);
}
