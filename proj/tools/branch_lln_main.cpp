#include <CLI11.hpp>

#include "branch_lln/cli.hpp"

int main(int argc, char** argv) {
  CLI::App app{"branching Markov process simulator and LLN checks"};
  app.require_subcommand(1);

  branch_lln::cli::RunOptions opts;
  unsigned workers = 0;
  std::uint64_t seed = 0;
  std::string out;

  auto* run = app.add_subcommand("run", "run an experiment from a config file");
  run->add_option("config", opts.config_path, "config file (flat key=value or JSON)")
      ->required();
  auto* wopt = run->add_option("--workers", workers, "parallel worker cap");
  auto* sopt = run->add_option("--seed", seed, "override the config seed");
  auto* oopt = run->add_option("--out", out, "override the output base path");

  CLI11_PARSE(app, argc, argv);

  if (*wopt) opts.workers = workers;
  if (*sopt) opts.seed = seed;
  if (*oopt) opts.out = out;
  return branch_lln::cli::run(opts);
}
