#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "branch_lln/core.hpp"
#include "branch_lln/motions.hpp"

namespace branch_lln::cli {

inline constexpr const char* kVersion = "branch-lln 0.1.0";

// Parsed experiment description. `raw` holds the canonical key -> value
// strings used for the config echo; re-parsing the echo yields an identical
// config.
struct ExperimentConfig {
  std::string experiment;
  std::string model;
  std::map<std::string, std::string> raw;

  // model parameters
  double c = 0.0, lam = 0.0, sigma2 = 0.0;
  std::map<int, double> rho;
  std::vector<std::vector<double>> q_matrix;
  std::vector<double> pi;

  std::map<int, double> offspring;
  double r = 0.0;
  double x0 = 0.0;
  double t_end = 0.0;
  std::vector<double> snapshot_times;
  double step_dt = 0.01;
  std::size_t n_rep = 10000;
  std::size_t n_mc = 100000;
  std::uint64_t seed = 1;
  std::size_t max_population = 1'000'000;

  std::optional<Interval> B, Bprime, K;
  double T = -1.0;  // defaults to t_end
  double eps = 0.01;
  double tol = 1e-6;
  std::size_t n_iter = 20;
  std::size_t bins = 64;
  std::vector<double> t_grid, x_grid;
  std::string condition = "survival";
  std::string qsd_mode = "pooled";
  bool mc_targets = false;
  std::string out;
};

ExperimentConfig parse_config_text(const std::string& text);
ExperimentConfig parse_config_file(const std::string& path);

// Instantiates the motion model + branch config described by an
// ExperimentConfig; validates everything up front.
struct RunContext {
  ExperimentConfig exp;
  MotionModel motion;
  BranchConfig cfg;
};
RunContext build(const ExperimentConfig& exp);

struct RunOptions {
  std::string config_path;
  std::optional<unsigned> workers;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
};

// Executes the experiment: writes <out>.csv and <out>.json, prints a summary
// (and the wall time) to stdout. Exit codes: 0 ok, 2 validation error,
// 3 runtime error, 4 population overflow in more than half the replicas.
int run(const RunOptions& opts);

}  // namespace branch_lln::cli
