#include "branch_lln/cli.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

#include <json.hpp>

#include "branch_lln/analysis.hpp"
#include "branch_lln/engine.hpp"
#include "branch_lln/spine.hpp"
#include "branch_lln/stats.hpp"

namespace branch_lln::cli {

using ordered_json = nlohmann::ordered_json;

namespace {

// ---------------------------------------------------------------------------
// value formatting / parsing (locale independent)
// ---------------------------------------------------------------------------

std::string fmt(double v) {
  char buf[64];
  const auto res =
      std::to_chars(buf, buf + sizeof(buf), v, std::chars_format::general, 17);
  return std::string(buf, res.ptr);
}

std::string fmt(std::uint64_t v) { return std::to_string(v); }

double parse_double(const std::string& s) {
  std::string t = s;
  t.erase(std::remove_if(t.begin(), t.end(),
                         [](unsigned char ch) { return std::isspace(ch); }),
          t.end());
  double v = 0.0;
  const auto res = std::from_chars(t.data(), t.data() + t.size(), v);
  if (res.ec != std::errc{} || res.ptr != t.data() + t.size())
    throw InvalidConfig("cannot parse number: '" + s + "'");
  return v;
}

std::uint64_t parse_u64(const std::string& s) {
  std::uint64_t v = 0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc{} || res.ptr != s.data() + s.size())
    throw InvalidConfig("cannot parse integer: '" + s + "'");
  return v;
}

bool parse_bool(const std::string& s) {
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  throw InvalidConfig("cannot parse bool: '" + s + "'");
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : s) {
    if (ch == sep) {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += ch;
    }
  }
  out.push_back(cur);
  return out;
}

std::vector<double> parse_list(const std::string& s) {
  std::vector<double> out;
  if (s.empty()) return out;
  // a:b expands to the integer range a..b
  if (s.find(':') != std::string::npos && s.find(',') == std::string::npos) {
    const auto parts = split(s, ':');
    if (parts.size() == 2) {
      const double a = parse_double(parts[0]), b = parse_double(parts[1]);
      for (double v = a; v <= b + 1e-9; v += 1.0) out.push_back(v);
      return out;
    }
  }
  for (const auto& p : split(s, ',')) out.push_back(parse_double(p));
  return out;
}

std::map<int, double> parse_pmf(const std::string& s) {
  std::map<int, double> out;
  for (const auto& item : split(s, ',')) {
    const auto kv = split(item, ':');
    if (kv.size() != 2) throw InvalidConfig("cannot parse pmf entry: '" + item + "'");
    out[int(parse_double(kv[0]))] = parse_double(kv[1]);
  }
  return out;
}

Interval parse_interval(const std::string& s) {
  const auto parts = split(s, ',');
  if (parts.size() != 2)
    throw InvalidConfig("interval must be 'lo,hi': '" + s + "'");
  return Interval{parse_double(parts[0]), parse_double(parts[1])};
}

std::vector<std::vector<double>> parse_matrix(const std::string& s) {
  std::vector<std::vector<double>> rows;
  for (const auto& row : split(s, ';')) rows.push_back(parse_list(row));
  return rows;
}

// JSON values are canonicalized to the flat string syntax so both formats
// share one pipeline and the echo round-trips.
std::string canonical_value(const nlohmann::json& v) {
  if (v.is_string()) return v.get<std::string>();
  if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
  if (v.is_number_integer()) return std::to_string(v.get<long long>());
  if (v.is_number()) return fmt(v.get<double>());
  if (v.is_array()) {
    std::string out;
    bool nested = !v.empty() && v.front().is_array();
    for (std::size_t i = 0; i < v.size(); ++i) {
      if (i) out += nested ? ";" : ",";
      out += canonical_value(v[i]);
    }
    return out;
  }
  if (v.is_object()) {
    std::string out;
    bool first = true;
    for (auto it = v.begin(); it != v.end(); ++it) {
      if (!first) out += ",";
      first = false;
      out += it.key() + ":" + canonical_value(it.value());
    }
    return out;
  }
  throw InvalidConfig("unsupported JSON value in config");
}

const std::vector<std::string> kKnownKeys = {
    "experiment", "model", "c", "lam", "sigma2", "rho", "Q", "pi",
    "offspring", "r", "x0", "t_end", "snapshot_times", "step_dt", "n_rep",
    "n_mc", "seed", "max_population", "B", "Bprime", "K", "T", "eps", "tol",
    "n_iter", "bins", "t_grid", "x_grid", "condition", "qsd_mode",
    "mc_targets", "out"};

const std::vector<std::string> kExperiments = {
    "simulate", "phi", "lln", "qsd", "extinction", "sigma",
    "spine-check", "g-iterate", "sb-curve", "local-survival"};

}  // namespace

ExperimentConfig parse_config_text(const std::string& text) {
  std::map<std::string, std::string> raw;

  auto first_nonspace = text.find_first_not_of(" \t\r\n");
  if (first_nonspace != std::string::npos && text[first_nonspace] == '{') {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(text);
    } catch (const std::exception& e) {
      throw InvalidConfig(std::string("bad JSON config: ") + e.what());
    }
    for (auto it = j.begin(); it != j.end(); ++it)
      raw[it.key()] = canonical_value(it.value());
  } else {
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
      const auto hash = line.find('#');
      if (hash != std::string::npos) line.erase(hash);
      const auto eq = line.find('=');
      if (eq == std::string::npos) {
        if (line.find_first_not_of(" \t\r") != std::string::npos)
          throw InvalidConfig("config line without '=': '" + line + "'");
        continue;
      }
      auto trim = [](std::string s) {
        const auto b = s.find_first_not_of(" \t\r");
        const auto e = s.find_last_not_of(" \t\r");
        return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
      };
      const std::string key = trim(line.substr(0, eq));
      const std::string val = trim(line.substr(eq + 1));
      if (key.empty()) throw InvalidConfig("empty config key");
      if (raw.count(key)) throw InvalidConfig("duplicate config key: " + key);
      raw[key] = val;
    }
  }

  ExperimentConfig cfg;
  cfg.raw = raw;
  for (const auto& [k, v] : raw) {
    if (std::find(kKnownKeys.begin(), kKnownKeys.end(), k) == kKnownKeys.end())
      throw InvalidConfig("unknown config key: " + k);
    if (k == "experiment") cfg.experiment = v;
    else if (k == "model") cfg.model = v;
    else if (k == "c") cfg.c = parse_double(v);
    else if (k == "lam") cfg.lam = parse_double(v);
    else if (k == "sigma2") cfg.sigma2 = parse_double(v);
    else if (k == "rho") cfg.rho = parse_pmf(v);
    else if (k == "Q") cfg.q_matrix = parse_matrix(v);
    else if (k == "pi") cfg.pi = parse_list(v);
    else if (k == "offspring") cfg.offspring = parse_pmf(v);
    else if (k == "r") cfg.r = parse_double(v);
    else if (k == "x0") cfg.x0 = parse_double(v);
    else if (k == "t_end") cfg.t_end = parse_double(v);
    else if (k == "snapshot_times") cfg.snapshot_times = parse_list(v);
    else if (k == "step_dt") cfg.step_dt = parse_double(v);
    else if (k == "n_rep") cfg.n_rep = parse_u64(v);
    else if (k == "n_mc") cfg.n_mc = parse_u64(v);
    else if (k == "seed") cfg.seed = parse_u64(v);
    else if (k == "max_population") cfg.max_population = parse_u64(v);
    else if (k == "B") cfg.B = parse_interval(v);
    else if (k == "Bprime") cfg.Bprime = parse_interval(v);
    else if (k == "K") cfg.K = parse_interval(v);
    else if (k == "T") cfg.T = parse_double(v);
    else if (k == "eps") cfg.eps = parse_double(v);
    else if (k == "tol") cfg.tol = parse_double(v);
    else if (k == "n_iter") cfg.n_iter = parse_u64(v);
    else if (k == "bins") cfg.bins = parse_u64(v);
    else if (k == "t_grid") cfg.t_grid = parse_list(v);
    else if (k == "x_grid") cfg.x_grid = parse_list(v);
    else if (k == "condition") cfg.condition = v;
    else if (k == "qsd_mode") cfg.qsd_mode = v;
    else if (k == "mc_targets") cfg.mc_targets = parse_bool(v);
    else if (k == "out") cfg.out = v;
  }

  if (std::find(kExperiments.begin(), kExperiments.end(), cfg.experiment) ==
      kExperiments.end())
    throw InvalidConfig("unknown experiment: '" + cfg.experiment + "'");
  if (cfg.T < 0.0) cfg.T = cfg.t_end;
  return cfg;
}

ExperimentConfig parse_config_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read config file: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str());
}

RunContext build(const ExperimentConfig& exp) {
  RunContext rc;
  rc.exp = exp;
  if (exp.model == "killed_bm") {
    rc.motion = killed_drifted_bm(exp.c);
  } else if (exp.model == "killed_ou") {
    rc.motion = killed_recurrent_ou(exp.lam);
  } else if (exp.model == "transient_ou") {
    rc.motion = transient_ou(exp.lam, exp.sigma2);
  } else if (exp.model == "gw") {
    rc.motion = subcritical_gw(exp.rho);
  } else if (exp.model == "chain") {
    const std::size_t k = exp.q_matrix.size();
    if (k == 0) throw InvalidConfig("chain model needs Q");
    Eigen::MatrixXd q(k, k);
    for (std::size_t i = 0; i < k; ++i) {
      if (exp.q_matrix[i].size() != k)
        throw InvalidConfig("Q must be square");
      for (std::size_t j = 0; j < k; ++j) q(i, j) = exp.q_matrix[i][j];
    }
    if (exp.pi.size() != k) throw InvalidConfig("pi dimension != K");
    Eigen::VectorXd pi(k);
    for (std::size_t i = 0; i < k; ++i) pi(i) = exp.pi[i];
    rc.motion = ergodic_ctmc(q, pi);
  } else {
    throw InvalidConfig("unknown model: '" + exp.model + "'");
  }

  rc.cfg.motion = &rc.motion;
  rc.cfg.offspring = make_offspring(exp.offspring);
  rc.cfg.r = exp.r;
  rc.cfg.x0 = ParticleState::live(exp.x0);
  rc.cfg.t_end = exp.t_end;
  rc.cfg.snapshot_times = exp.snapshot_times;
  rc.cfg.step_dt = exp.step_dt;
  rc.cfg.max_population = exp.max_population;
  rc.cfg.seed = exp.seed;
  rc.cfg.validate();
  return rc;
}

namespace {

// ---------------------------------------------------------------------------
// output helpers
// ---------------------------------------------------------------------------

class CsvWriter {
 public:
  CsvWriter(const std::string& path, const std::vector<std::string>& header)
      : out_(path, std::ios::binary) {
    if (!out_) throw IoError("cannot write " + path);
    for (std::size_t i = 0; i < header.size(); ++i) {
      if (i) out_ << ',';
      out_ << header[i];
    }
    out_ << '\n';
  }
  void row(const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (i) out_ << ',';
      out_ << cells[i];
    }
    out_ << '\n';
  }

 private:
  std::ofstream out_;
};

ordered_json est_json(const EstimatorResult& e, bool weighted = false) {
  ordered_json j;
  j["mean"] = e.mean;
  j["stderr"] = e.se;
  j["n"] = e.n;
  if (weighted) {
    j["n_eff"] = e.n_eff;
    j["low_ess"] = e.low_ess;
  }
  if (e.analytic) j["analytic"] = true;
  return j;
}

ordered_json quad_json(const analysis::QuadratureResult& q) {
  ordered_json j;
  if (q.diverged)
    j["value"] = nullptr;
  else
    j["value"] = q.value;
  j["diverged"] = q.diverged;
  j["error_estimate"] = q.error_estimate;
  j["mc_se"] = q.mc_se;
  j["truncation_T"] = q.truncation_T;
  return j;
}

std::function<void(std::size_t)> progress_printer(std::size_t total) {
  if (total < 10) return nullptr;
  auto step = (total + 9) / 10;
  auto next = std::make_shared<std::size_t>(step);
  return [total, step, next](std::size_t done) {
    if (done >= *next) {
      std::cout << "  replicas " << done << "/" << total << "\n";
      while (*next <= done) *next += step;
    }
  };
}

// ---------------------------------------------------------------------------
// experiments
// ---------------------------------------------------------------------------

struct ExperimentOutput {
  ordered_json results;
  std::size_t replicas = 0;
  std::size_t overflow = 0;
};

ExperimentOutput exp_simulate(const RunContext& rc, unsigned workers,
                              CsvWriter& csv) {
  const auto& snaps = rc.cfg.snapshot_times;
  const auto& eig = rc.motion.eigen;
  const double x0 = rc.cfg.x0.value, r = rc.cfg.r, m1 = rc.cfg.offspring.m1;
  const std::size_t s = snaps.size();
  const double nan = std::numeric_limits<double>::quiet_NaN();

  auto red = engine::run_replicas(
      rc.cfg, rc.exp.n_rep,
      [&](const engine::Trajectory& traj) {
        std::vector<double> row(6 * s, nan);
        for (std::size_t j = 0; j < traj.snapshots.size(); ++j) {
          const auto& p = traj.snapshots[j];
          row[6 * j + 0] = double(p.size());
          row[6 * j + 1] = double(p.absorbed_count);
          row[6 * j + 2] = double(p.dead_count);
          row[6 * j + 3] = double(p.births);
          row[6 * j + 4] = analysis::malthusian_d(p, eig, x0, r, m1);
          row[6 * j + 5] = p.size() == 0 ? 1.0 : 0.0;
        }
        return row;
      },
      workers, progress_printer(rc.exp.n_rep));

  for (std::size_t i = 0; i < red.rows.size(); ++i)
    for (std::size_t j = 0; j < s; ++j)
      csv.row({fmt(std::uint64_t(i)), fmt(snaps[j]), fmt(red.rows[i][6 * j]),
               fmt(red.rows[i][6 * j + 1]), fmt(red.rows[i][6 * j + 2]),
               fmt(red.rows[i][6 * j + 3]), fmt(red.rows[i][6 * j + 4])});

  ExperimentOutput out;
  out.replicas = rc.exp.n_rep;
  out.overflow = red.overflow_count;
  ordered_json arr = ordered_json::array();
  for (std::size_t j = 0; j < s; ++j) {
    ordered_json e;
    e["t"] = snaps[j];
    e["live"] = est_json(red.merged[6 * j]);
    e["D"] = est_json(red.merged[6 * j + 4]);
    e["extinct_fraction"] = red.merged[6 * j + 5].mean;
    arr.push_back(e);
  }
  out.results["snapshots"] = arr;
  return out;
}

ExperimentOutput exp_lln(const RunContext& rc, unsigned workers,
                         CsvWriter& csv) {
  if (!rc.exp.B || !rc.exp.Bprime)
    throw InvalidConfig("lln experiment needs B and Bprime");
  const Interval B = *rc.exp.B, Bp = *rc.exp.Bprime;
  const auto& snaps = rc.cfg.snapshot_times;
  if (snaps.empty()) throw InvalidConfig("lln experiment needs snapshot_times");
  const auto& eig = rc.motion.eigen;
  const double x0 = rc.cfg.x0.value, r = rc.cfg.r;
  const double m1 = rc.cfg.offspring.m1, m2 = rc.cfg.offspring.m2;
  const std::size_t s = snaps.size();
  const double nan = std::numeric_limits<double>::quiet_NaN();

  std::vector<EstimatorResult> m2o(s);
  for (std::size_t j = 0; j < s; ++j)
    m2o[j] = spine::many_to_one(rc.motion, x0, Bp, snaps[j], r, m1,
                                rc.exp.n_mc, rc.cfg.step_dt,
                                fold_key(rc.cfg.seed, 0xA11), workers);

  auto red = engine::run_replicas(
      rc.cfg, rc.exp.n_rep,
      [&](const engine::Trajectory& traj) {
        std::vector<double> row(5 * s, nan);
        for (std::size_t j = 0; j < traj.snapshots.size(); ++j) {
          const auto& p = traj.snapshots[j];
          const double cb = double(p.count_in(B));
          const double cbp = double(p.count_in(Bp));
          const double d = analysis::malthusian_d(p, eig, x0, r, m1);
          row[5 * j + 0] = cb;
          row[5 * j + 1] = cb * cb;
          row[5 * j + 2] = cbp;
          row[5 * j + 3] = d;
          row[5 * j + 4] = d * d;
        }
        return row;
      },
      workers, progress_printer(rc.exp.n_rep));

  for (std::size_t i = 0; i < red.rows.size(); ++i)
    for (std::size_t j = 0; j < s; ++j) {
      const double cb = red.rows[i][5 * j];
      csv.row({fmt(std::uint64_t(i)), fmt(snaps[j]), fmt(cb),
               fmt(red.rows[i][5 * j + 2]), fmt(red.rows[i][5 * j + 3]),
               fmt(cb / m2o[j].mean)});
    }

  ExperimentOutput out;
  out.replicas = rc.exp.n_rep;
  out.overflow = red.overflow_count;

  ordered_json arr = ordered_json::array();
  for (std::size_t j = 0; j < s; ++j) {
    ordered_json e;
    e["t"] = snaps[j];
    e["expected_B_prime"] = est_json(m2o[j]);
    EstimatorResult w = red.merged[5 * j + 0];
    w.mean /= m2o[j].mean;
    w.se /= m2o[j].mean;
    EstimatorResult w2 = red.merged[5 * j + 1];
    w2.mean /= m2o[j].mean * m2o[j].mean;
    w2.se /= m2o[j].mean * m2o[j].mean;
    e["W"] = est_json(w);
    e["W2"] = est_json(w2);
    e["D"] = est_json(red.merged[5 * j + 3]);
    e["D2"] = est_json(red.merged[5 * j + 4]);
    double sum_b = 0.0, sum_bp = 0.0;
    for (const auto& row : red.rows) {
      if (std::isfinite(row[5 * j])) sum_b += row[5 * j];
      if (std::isfinite(row[5 * j + 2])) sum_bp += row[5 * j + 2];
    }
    if (sum_bp > 0.0)
      e["pooled_ratio"] = sum_b / sum_bp;
    else
      e["pooled_ratio"] = nullptr;
    arr.push_back(e);
  }
  out.results["snapshots"] = arr;

  // paired per-replica D^2 increments between consecutive snapshots
  ordered_json steps = ordered_json::array();
  for (std::size_t j = 0; j + 1 < s; ++j) {
    std::vector<double> diff;
    diff.reserve(red.rows.size());
    for (const auto& row : red.rows)
      if (std::isfinite(row[5 * j + 4]) && std::isfinite(row[5 * (j + 1) + 4]))
        diff.push_back(row[5 * (j + 1) + 4] - row[5 * j + 4]);
    ordered_json e;
    e["from_t"] = snaps[j];
    e["to_t"] = snaps[j + 1];
    e["d2_increment"] = est_json(stats::estimate(diff));
    steps.push_back(e);
  }
  out.results["d2_steps"] = steps;

  if (rc.motion.m2_analytic || rc.exp.mc_targets) {
    const auto phi = analysis::phi_quadrature(
        rc.motion, x0, r, m1, m2, rc.exp.tol, rc.exp.n_mc, rc.cfg.step_dt,
        fold_key(rc.cfg.seed, 0xF1), workers);
    out.results["phi"] = quad_json(phi);
    if (rc.motion.eigen.has_nu_mass() && !phi.diverged) {
      const double nb = rc.motion.eigen.nu_mass(B);
      const double nbp = rc.motion.eigen.nu_mass(Bp);
      if (nbp > 0.0) {
        out.results["nu_ratio"] = nb / nbp;
        out.results["w2_target"] = (nb / nbp) * (nb / nbp) * phi.value;
      }
    }
    ordered_json d2a = ordered_json::array();
    for (std::size_t j = 0; j < s; ++j) {
      double se = 0.0;
      const double v = analysis::d_second_moment_analytic(
          rc.motion, x0, r, m1, m2, snaps[j], rc.exp.n_mc, rc.cfg.step_dt,
          fold_key(rc.cfg.seed, 0xD2), workers, &se);
      ordered_json e;
      e["t"] = snaps[j];
      e["value"] = v;
      e["stderr"] = se;
      d2a.push_back(e);
    }
    out.results["d2_analytic"] = d2a;
  }
  return out;
}

ExperimentOutput exp_phi(const RunContext& rc, unsigned workers,
                         CsvWriter& csv) {
  const double x0 = rc.cfg.x0.value, r = rc.cfg.r;
  const double m1 = rc.cfg.offspring.m1, m2 = rc.cfg.offspring.m2;
  const auto phi = analysis::phi_quadrature(
      rc.motion, x0, r, m1, m2, rc.exp.tol, rc.exp.n_mc, rc.cfg.step_dt,
      fold_key(rc.cfg.seed, 0xF1), workers);

  // diagnostic integrand curve
  const double rho = r * (m1 - 1.0);
  const double S = phi.truncation_T;
  std::vector<double> grid;
  for (int j = 0; j <= 100; ++j) grid.push_back(S * double(j) / 100.0);
  if (rc.motion.m2_analytic) {
    for (double sj : grid)
      csv.row({fmt(sj), fmt(rc.motion.m2_analytic(x0, sj)),
               fmt(std::exp(-rho * sj)), fmt(0.0)});
  } else {
    const auto curve = spine::m_second_moment_curve(
        rc.motion, x0, grid, std::max<std::size_t>(rc.exp.n_mc / 5, 1000),
        rc.cfg.step_dt, fold_key(rc.cfg.seed, 0xCE), workers);
    for (std::size_t j = 0; j < grid.size(); ++j)
      csv.row({fmt(grid[j]), fmt(curve[j].mean), fmt(std::exp(-rho * grid[j])),
               fmt(curve[j].se)});
  }

  ExperimentOutput out;
  out.results["phi"] = quad_json(phi);
  return out;
}

ExperimentOutput exp_qsd(const RunContext& rc, unsigned workers,
                         CsvWriter& csv) {
  analysis::QsdCondition cond;
  if (rc.exp.condition == "survival") cond = analysis::QsdCondition::Survival;
  else if (rc.exp.condition == "d_positive")
    cond = analysis::QsdCondition::DPositive;
  else
    throw InvalidConfig("condition must be survival or d_positive");
  analysis::QsdMode mode;
  if (rc.exp.qsd_mode == "pooled") mode = analysis::QsdMode::Pooled;
  else if (rc.exp.qsd_mode == "per-replica")
    mode = analysis::QsdMode::PerReplica;
  else
    throw InvalidConfig("qsd_mode must be pooled or per-replica");

  const auto rep = analysis::qsd_sample(rc.cfg, rc.exp.T, rc.exp.n_rep, cond,
                                        rc.exp.eps, rc.exp.bins, mode, workers,
                                        progress_printer(rc.exp.n_rep));

  std::uint32_t prev = ~0u;
  std::uint64_t idx = 0;
  for (std::size_t k = 0; k < rep.positions.size(); ++k) {
    if (rep.replica_of[k] != prev) {
      prev = rep.replica_of[k];
      idx = 0;
    }
    csv.row({fmt(std::uint64_t(rep.replica_of[k])), fmt(idx++),
             fmt(rep.positions[k]), fmt(rep.weights[k])});
  }

  ExperimentOutput out;
  out.replicas = rc.exp.n_rep;
  out.results["pooled_samples"] = rep.pooled_samples;
  out.results["conditioning"] = rep.conditioning;
  if (rep.has_ks)
    out.results["ks_distance"] = rep.ks_distance;
  else
    out.results["ks_distance"] = nullptr;
  out.results["histogram"] = {{"edges", rep.bin_edges},
                              {"masses", rep.histogram}};
  return out;
}

ExperimentOutput exp_extinction(const RunContext& rc, unsigned workers,
                                CsvWriter& csv) {
  std::vector<double> xs = rc.exp.x_grid.empty()
                               ? std::vector<double>{rc.cfg.x0.value}
                               : rc.exp.x_grid;
  ExperimentOutput out;
  ordered_json arr = ordered_json::array();
  for (std::size_t xi = 0; xi < xs.size(); ++xi) {
    const double x = xs[xi];
    // an absorbing start is extinct from time zero
    if (rc.motion.eigen.h(x) <= 0.0) {
      ordered_json e;
      e["x"] = x;
      EstimatorResult one;
      one.mean = 1.0;
      one.n = static_cast<long long>(rc.exp.n_rep);
      one.n_eff = double(one.n);
      one.analytic = true;
      e["eta"] = est_json(one);
      e["late_fraction"] = 0.0;
      arr.push_back(e);
      continue;
    }
    BranchConfig cfg = rc.cfg;
    cfg.x0 = ParticleState::live(x);
    cfg.t_end = rc.exp.T;
    cfg.snapshot_times = rc.exp.T > 0.0
                             ? std::vector<double>{rc.exp.T / 2.0, rc.exp.T}
                             : std::vector<double>{0.0};
    cfg.seed = xs.size() == 1 ? rc.cfg.seed
                              : fold_key(root_key(rc.cfg.seed ^ 0xE7A), xi);
    auto red = engine::run_replicas(
        cfg, rc.exp.n_rep,
        [](const engine::Trajectory& traj) -> std::vector<double> {
          double half = 0.0, full = 0.0;
          if (!traj.snapshots.empty())
            half = traj.snapshots.front().size() == 0 ? 1.0 : 0.0;
          if (traj.snapshots.size() >= 2)
            full = traj.snapshots.back().size() == 0 ? 1.0 : 0.0;
          else
            full = half;
          return {half, full, traj.extinct_time.value_or(-1.0)};
        },
        workers, xs.size() == 1 ? progress_printer(rc.exp.n_rep) : nullptr);
    for (std::size_t i = 0; i < red.rows.size(); ++i)
      csv.row({fmt(x), fmt(std::uint64_t(i)), fmt(red.rows[i][1]),
               fmt(red.rows[i][2])});
    ordered_json e;
    e["x"] = x;
    e["eta"] = est_json(red.merged[1]);
    e["late_fraction"] = red.merged[1].mean - red.merged[0].mean;
    arr.push_back(e);
    out.replicas += rc.exp.n_rep;
    out.overflow += red.overflow_count;
  }
  out.results["eta"] = arr;
  return out;
}

ExperimentOutput exp_sigma(const RunContext& rc, unsigned workers,
                           CsvWriter& csv) {
  const auto& eig = rc.motion.eigen;
  const double x0 = rc.cfg.x0.value, r = rc.cfg.r, m1 = rc.cfg.offspring.m1;
  const double eps = rc.exp.eps;
  BranchConfig cfg = rc.cfg;
  cfg.t_end = rc.exp.T;
  cfg.snapshot_times = {rc.exp.T};
  auto red = engine::run_replicas(
      cfg, rc.exp.n_rep,
      [&](const engine::Trajectory& traj) -> std::vector<double> {
        if (traj.snapshots.empty()) return {0.0, 1.0, 1.0, 0.0};
        const auto& p = traj.snapshots.back();
        const double d = analysis::malthusian_d(p, eig, x0, r, m1);
        const double extinct = p.size() == 0 ? 1.0 : 0.0;
        const double small = d < eps ? 1.0 : 0.0;
        return {d, extinct, small, small - extinct};
      },
      workers, progress_printer(rc.exp.n_rep));

  for (std::size_t i = 0; i < red.rows.size(); ++i)
    csv.row({fmt(std::uint64_t(i)), fmt(red.rows[i][0]), fmt(red.rows[i][1])});

  ExperimentOutput out;
  out.replicas = rc.exp.n_rep;
  out.overflow = red.overflow_count;
  out.results["T"] = rc.exp.T;
  out.results["eps"] = eps;
  out.results["eta"] = est_json(red.merged[1]);
  out.results["sigma"] = est_json(red.merged[2]);
  out.results["sigma_minus_eta"] = est_json(red.merged[3]);
  return out;
}

ExperimentOutput exp_spine_check(const RunContext& rc, unsigned workers,
                                 CsvWriter& csv) {
  if (!rc.exp.B) throw InvalidConfig("spine-check needs B");
  const Interval B = *rc.exp.B;
  const double t = rc.cfg.t_end;
  const double x0 = rc.cfg.x0.value, r = rc.cfg.r;
  const double m1 = rc.cfg.offspring.m1;

  BranchConfig cfg = rc.cfg;
  cfg.snapshot_times = {t};
  auto red = engine::run_replicas(
      cfg, rc.exp.n_rep,
      [&](const engine::Trajectory& traj) -> std::vector<double> {
        if (traj.snapshots.empty()) return {0.0, 0.0};
        const double cb = double(traj.snapshots.back().count_in(B));
        return {cb, cb * cb};
      },
      workers, progress_printer(rc.exp.n_rep));
  for (std::size_t i = 0; i < red.rows.size(); ++i)
    csv.row({"engine", fmt(std::uint64_t(i)), fmt(red.rows[i][0])});

  const auto spine2 = spine::two_spine_second_moment(
      rc.motion, x0, B, t, r, rc.cfg.offspring, rc.exp.n_mc, rc.cfg.step_dt,
      fold_key(rc.cfg.seed, 0x25), workers);
  const auto m2o =
      spine::many_to_one(rc.motion, x0, B, t, r, m1, rc.exp.n_mc,
                         rc.cfg.step_dt, fold_key(rc.cfg.seed, 0xA11), workers);

  ExperimentOutput out;
  out.replicas = rc.exp.n_rep;
  out.overflow = red.overflow_count;
  out.results["t"] = t;
  out.results["direct_first_moment"] = est_json(red.merged[0]);
  out.results["many_to_one"] = est_json(m2o);
  out.results["direct_second_moment"] = est_json(red.merged[1]);
  out.results["two_spine_second_moment"] = est_json(spine2, true);
  const double z2 =
      (red.merged[1].mean - spine2.mean) /
      std::sqrt(red.merged[1].se * red.merged[1].se + spine2.se * spine2.se);
  const double z1 =
      (red.merged[0].mean - m2o.mean) /
      std::sqrt(red.merged[0].se * red.merged[0].se + m2o.se * m2o.se);
  out.results["z_first_moment"] = z1;
  out.results["z_second_moment"] = z2;
  return out;
}

ExperimentOutput exp_g_iterate(const RunContext& rc, unsigned workers,
                               CsvWriter& csv) {
  if (rc.exp.x_grid.empty()) throw InvalidConfig("g-iterate needs x_grid");
  const auto iterates = analysis::g_iterate(rc.exp.x_grid, rc.cfg,
                                            rc.exp.n_iter, rc.exp.n_mc,
                                            workers);
  for (std::size_t k = 0; k < iterates.size(); ++k)
    for (std::size_t j = 0; j < rc.exp.x_grid.size(); ++j)
      csv.row({fmt(std::uint64_t(k)), fmt(rc.exp.x_grid[j]),
               fmt(iterates[k][j])});

  ExperimentOutput out;
  out.results["x_grid"] = rc.exp.x_grid;
  out.results["iterates"] = iterates;
  out.results["final"] = iterates.back();
  double sup = 0.0;
  if (iterates.size() >= 2) {
    const auto& a = iterates[iterates.size() - 2];
    const auto& b = iterates.back();
    for (std::size_t j = 0; j < a.size(); ++j)
      sup = std::max(sup, std::abs(a[j] - b[j]));
  }
  out.results["sup_change_last"] = sup;
  return out;
}

ExperimentOutput exp_sb_curve(const RunContext& rc, unsigned workers,
                              CsvWriter& csv) {
  if (!rc.exp.B) throw InvalidConfig("sb-curve needs B");
  if (rc.exp.t_grid.empty()) throw InvalidConfig("sb-curve needs t_grid");
  const auto curve = spine::s_b_curve(rc.motion, rc.cfg.x0.value, *rc.exp.B,
                                      rc.exp.t_grid, rc.exp.n_mc,
                                      rc.cfg.step_dt,
                                      fold_key(rc.cfg.seed, 0x5B), workers);
  const double nu_b = rc.motion.eigen.nu_mass(*rc.exp.B);
  for (const auto& d : curve)
    csv.row({fmt(d.t), fmt(d.estimate), fmt(d.se), fmt(nu_b),
             fmt(rc.motion.eigen.p(d.t))});

  ExperimentOutput out;
  out.results["nu_B"] = nu_b;
  ordered_json arr = ordered_json::array();
  for (const auto& d : curve) {
    ordered_json e;
    e["t"] = d.t;
    e["estimate"] = d.estimate;
    e["stderr"] = d.se;
    arr.push_back(e);
  }
  out.results["points"] = arr;
  return out;
}

ExperimentOutput exp_local_survival(const RunContext& rc, unsigned workers,
                                    CsvWriter& csv) {
  if (!rc.exp.K) throw InvalidConfig("local-survival needs K");
  const Interval K = *rc.exp.K;
  std::vector<double> grid = rc.cfg.snapshot_times;
  if (grid.empty()) grid = {rc.exp.T};
  BranchConfig cfg = rc.cfg;
  cfg.t_end = grid.back();
  cfg.snapshot_times = grid;
  const std::size_t s = grid.size();
  const double nan = std::numeric_limits<double>::quiet_NaN();

  auto red = engine::run_replicas(
      cfg, rc.exp.n_rep,
      [&](const engine::Trajectory& traj) {
        std::vector<double> row(2 * s, nan);
        for (std::size_t j = 0; j < traj.snapshots.size(); ++j) {
          const double ck = double(traj.snapshots[j].count_in(K));
          row[2 * j] = ck;
          row[2 * j + 1] = ck > 0.0 ? 1.0 : 0.0;
        }
        return row;
      },
      workers, progress_printer(rc.exp.n_rep));

  for (std::size_t i = 0; i < red.rows.size(); ++i)
    for (std::size_t j = 0; j < s; ++j)
      csv.row({fmt(std::uint64_t(i)), fmt(grid[j]), fmt(red.rows[i][2 * j])});

  ExperimentOutput out;
  out.replicas = rc.exp.n_rep;
  out.overflow = red.overflow_count;
  ordered_json arr = ordered_json::array();
  for (std::size_t j = 0; j < s; ++j) {
    ordered_json e;
    e["t"] = grid[j];
    e["count_K"] = est_json(red.merged[2 * j]);
    e["fraction_positive"] = est_json(red.merged[2 * j + 1]);
    arr.push_back(e);
  }
  out.results["local_survival"] = arr;
  return out;
}

const std::vector<std::vector<std::string>> kCsvHeaders = {
    {"replica_id", "t", "live", "absorbed", "dead", "births", "D_t"},
    {"s", "m2_integrand", "discount", "stderr"},
    {"replica_id", "t", "count_B", "count_Bprime", "D_t", "W_t"},
    {"replica_id", "particle_index", "position", "weight"},
    {"x0", "replica_id", "extinct_by_T", "extinct_time"},
    {"replica_id", "D_T", "extinct"},
    {"source", "index", "value"},
    {"iter", "x", "eta_estimate"},
    {"t", "s_hat", "stderr", "nu_B", "p_t"},
    {"replica_id", "t", "count_K"}};

}  // namespace

int run(const RunOptions& opts) {
  const auto t_start = std::chrono::steady_clock::now();
  try {
    ExperimentConfig exp = [&] {
      try {
        return parse_config_file(opts.config_path);
      } catch (const IoError& e) {
        throw InvalidConfig(e.what());  // unreadable config is a usage error
      }
    }();
    if (opts.seed) {
      exp.seed = *opts.seed;
      exp.raw["seed"] = fmt(*opts.seed);
    }
    if (opts.out) {
      exp.out = *opts.out;
      exp.raw["out"] = *opts.out;
    }
    unsigned workers = 1;
    if (opts.workers) {
      workers = *opts.workers;
    } else if (const char* env = std::getenv("BRANCH_LLN_WORKERS")) {
      workers = unsigned(std::strtoul(env, nullptr, 10));
    }
    if (workers == 0) workers = 1;

    RunContext rc = build(exp);

    std::string out_base = exp.out;
    if (out_base.empty()) {
      out_base = opts.config_path;
      const auto slash = out_base.find_last_of('/');
      if (slash != std::string::npos) out_base = out_base.substr(slash + 1);
      const auto dot = out_base.find_last_of('.');
      if (dot != std::string::npos) out_base = out_base.substr(0, dot);
    }

    const std::size_t which =
        std::size_t(std::find(kExperiments.begin(), kExperiments.end(),
                              exp.experiment) -
                    kExperiments.begin());
    CsvWriter csv(out_base + ".csv", kCsvHeaders[which]);

    std::cout << "branch_lln: experiment=" << exp.experiment
              << " model=" << exp.model << " seed=" << exp.seed << "\n";

    ExperimentOutput eo;
    switch (which) {
      case 0: eo = exp_simulate(rc, workers, csv); break;
      case 1: eo = exp_phi(rc, workers, csv); break;
      case 2: eo = exp_lln(rc, workers, csv); break;
      case 3: eo = exp_qsd(rc, workers, csv); break;
      case 4: eo = exp_extinction(rc, workers, csv); break;
      case 5: eo = exp_sigma(rc, workers, csv); break;
      case 6: eo = exp_spine_check(rc, workers, csv); break;
      case 7: eo = exp_g_iterate(rc, workers, csv); break;
      case 8: eo = exp_sb_curve(rc, workers, csv); break;
      case 9: eo = exp_local_survival(rc, workers, csv); break;
      default: throw InvalidConfig("unknown experiment");
    }

    ordered_json j;
    j["version"] = kVersion;
    j["experiment"] = exp.experiment;
    j["seed"] = exp.seed;
    j["replicas"] = eo.replicas;
    j["overflow_replicas"] = eo.overflow;
    ordered_json cfg_echo;
    for (const auto& [k, v] : exp.raw) cfg_echo[k] = v;
    j["config"] = cfg_echo;
    j["results"] = eo.results;
    {
      std::ofstream out(out_base + ".json", std::ios::binary);
      if (!out) throw IoError("cannot write " + out_base + ".json");
      out << j.dump(1) << "\n";
    }

    const double wall =
        std::chrono::duration<double>(std::chrono::steady_clock::now() -
                                      t_start)
            .count();
    std::cout << "results: " << out_base << ".csv, " << out_base << ".json\n"
              << "wall_time_s: " << wall << "\n";

    if (eo.replicas > 0 && 2 * eo.overflow > eo.replicas) {
      std::cout << "population overflow in " << eo.overflow << "/"
                << eo.replicas << " replicas\n";
      return 4;
    }
    return 0;
  } catch (const InvalidPmf& e) {
    std::cerr << "validation error (offspring pmf): " << e.what() << "\n";
    return 2;
  } catch (const SubcriticalOffspring& e) {
    std::cerr << "validation error (assumption I1, m1 > 1): " << e.what()
              << "\n";
    return 2;
  } catch (const InvalidParameter& e) {
    std::cerr << "validation error (parameter): " << e.what() << "\n";
    return 2;
  } catch (const InvalidGenerator& e) {
    std::cerr << "validation error (rate matrix): " << e.what() << "\n";
    return 2;
  } catch (const InvalidConfig& e) {
    std::cerr << "validation error (config): " << e.what() << "\n";
    return 2;
  } catch (const ZeroEigenfunction& e) {
    std::cerr << "validation error (eigenfunction): " << e.what() << "\n";
    return 2;
  } catch (const MissingNuMass& e) {
    std::cerr << "validation error (eigenmeasure): " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "runtime error: " << e.what() << "\n";
    return 3;
  }
}

}  // namespace branch_lln::cli
