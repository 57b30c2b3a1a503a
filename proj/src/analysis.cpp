#include "branch_lln/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "branch_lln/parallel.hpp"
#include "branch_lln/quadrature.hpp"
#include "branch_lln/spine.hpp"
#include "branch_lln/stats.hpp"

namespace branch_lln::analysis {

namespace {

constexpr double kSlopeMargin = 1e-6;

struct McIntegral {
  std::vector<double> grid;
  std::vector<EstimatorResult> curve;   // E_x(M_s^2) per grid point
  EstimatorResult integral;             // int_0^S EM2(s) e^{-rho s} ds
  EstimatorResult endpoint_discounted;  // EM2(S) e^{-rho S}
};

// One shared set of absorbed-motion paths gives the EM2 curve, the
// discounted integral (trapezoid in-path, so the standard error is exact)
// and the discounted endpoint.
McIntegral mc_phi_integral(const MotionModel& motion, double x, double rho,
                           double S, double ds, std::size_t n_mc,
                           double step_dt, std::uint64_t seed,
                           unsigned workers) {
  McIntegral out;
  const std::size_t m = std::size_t(std::ceil(S / ds - 1e-9)) + 1;
  out.grid.resize(m);
  for (std::size_t j = 0; j < m; ++j) out.grid[j] = S * double(j) / double(m - 1);

  const double hx = motion.eigen.h(x);
  const double lambda = motion.eigen.lambda;
  constexpr std::size_t kBlocks = 64;
  struct Acc {
    double sum = 0, sumsq = 0;
  };
  std::vector<std::vector<Acc>> curve_acc(kBlocks, std::vector<Acc>(m));
  std::vector<Acc> int_acc(kBlocks), end_acc(kBlocks);
  const std::uint64_t base = fold_key(root_key(seed), 0x50);

  const std::size_t nblocks = std::min<std::size_t>(kBlocks, std::max<std::size_t>(n_mc, 1));
  parallel_for(nblocks, workers, [&](std::size_t b) {
    const std::size_t lo = n_mc * b / nblocks;
    const std::size_t hi = n_mc * (b + 1) / nblocks;
    for (std::size_t i = lo; i < hi; ++i) {
      RandomStream rs = stream_for_key(fold_key(base, i), kMotion);
      ParticleState s = ParticleState::live(x);
      double t_cur = 0.0;
      double path_integral = 0.0;
      double path_end = 0.0;
      for (std::size_t j = 0; j < m; ++j) {
        const double sj = out.grid[j];
        if (s.is_live() && sj > t_cur) {
          s = spine::evolve(motion, s, sj - t_cur, step_dt, rs);
          t_cur = sj;
        }
        const double hy = motion.eigen.h_at(s);
        const double m2_j = std::exp(2.0 * lambda * sj) * hy * hy / (hx * hx);
        curve_acc[b][j].sum += m2_j;
        curve_acc[b][j].sumsq += m2_j * m2_j;
        const double step =
            (j == 0 || j + 1 == m) ? 0.5 * (S / double(m - 1)) : S / double(m - 1);
        path_integral += step * m2_j * std::exp(-rho * sj);
        if (j + 1 == m) path_end = m2_j * std::exp(-rho * sj);
      }
      int_acc[b].sum += path_integral;
      int_acc[b].sumsq += path_integral * path_integral;
      end_acc[b].sum += path_end;
      end_acc[b].sumsq += path_end * path_end;
    }
  });

  auto finish = [n_mc](const Acc& a) {
    EstimatorResult r;
    r.n = static_cast<long long>(n_mc);
    if (n_mc == 0) return r;
    r.mean = a.sum / double(n_mc);
    if (n_mc > 1) {
      const double var = std::max(
          0.0, (a.sumsq - a.sum * a.sum / double(n_mc)) / double(n_mc - 1));
      r.se = std::sqrt(var / double(n_mc));
    }
    r.n_eff = double(n_mc);
    return r;
  };
  out.curve.resize(m);
  for (std::size_t j = 0; j < m; ++j) {
    Acc t;
    for (std::size_t b = 0; b < nblocks; ++b) {
      t.sum += curve_acc[b][j].sum;
      t.sumsq += curve_acc[b][j].sumsq;
    }
    out.curve[j] = finish(t);
  }
  Acc ti, te;
  for (std::size_t b = 0; b < nblocks; ++b) {
    ti.sum += int_acc[b].sum;
    ti.sumsq += int_acc[b].sumsq;
    te.sum += end_acc[b].sum;
    te.sumsq += end_acc[b].sumsq;
  }
  out.integral = finish(ti);
  out.endpoint_discounted = finish(te);
  return out;
}

// Fitted exponential growth rate of EM2 over the last decade [S/10, S].
double tail_slope(const std::vector<double>& s, const std::vector<double>& em2) {
  std::vector<double> xs, ys;
  const double s_hi = s.back();
  for (std::size_t j = 0; j < s.size(); ++j) {
    if (s[j] >= s_hi / 10.0 && em2[j] > 0.0) {
      xs.push_back(s[j]);
      ys.push_back(std::log(em2[j]));
    }
  }
  if (xs.size() < 2) return std::numeric_limits<double>::infinity();
  return stats::fit_slope(xs, ys);
}

}  // namespace

double malthusian_d(const engine::Population& pop, const EigenData& eigen,
                    double x0, double r, double m1) {
  const double hx = eigen.h(x0);
  if (hx <= 0.0) throw ZeroEigenfunction("h(x0) = 0: x0 is absorbing");
  const double discount =
      std::exp(-(r * (m1 - 1.0) - eigen.lambda) * pop.time);
  double sum = 0.0;
  for (const auto& [id, s] : pop.particles) sum += eigen.h_at(s);
  return sum * discount / hx;
}

QuadratureResult phi_quadrature(const MotionModel& motion, double x, double r,
                                double m1, double m2, double tol,
                                std::size_t n_mc, double step_dt,
                                std::uint64_t seed, unsigned workers) {
  const double rho = r * (m1 - 1.0);
  const double factor = (m2 - m1) * r;
  QuadratureResult out;

  if (motion.m2_analytic) {
    const double S = std::max(20.0, 24.0 / rho);
    std::vector<double> s_pts, em2_pts;
    for (int j = 0; j <= 32; ++j) {
      const double s = S / 10.0 + (S - S / 10.0) * double(j) / 32.0;
      s_pts.push_back(s);
      em2_pts.push_back(motion.m2_analytic(x, s));
    }
    const double kappa = stats::fit_slope(s_pts, [&] {
      std::vector<double> ys(em2_pts.size());
      for (std::size_t j = 0; j < ys.size(); ++j)
        ys[j] = std::log(std::max(em2_pts[j], 1e-300));
      return ys;
    }());
    if (kappa >= rho - kSlopeMargin) {
      out.diverged = true;
      out.truncation_T = S;
      return out;
    }
    const double env = em2_pts.back() * std::exp(-kappa * S);
    const double gap = rho - kappa;
    double T = std::log(std::max(factor * env / (gap * (tol / 2.0)), 1.0)) / gap;
    T = std::max(T, S);
    const auto q = quad::integrate(
        [&](double s) { return motion.m2_analytic(x, s) * std::exp(-rho * s); },
        0.0, T, 0.2 * tol / factor, 1e-12, 20000);
    const double tail = factor * env * std::exp(-gap * T) / gap;
    out.value = factor * q.value;
    out.error_estimate = factor * q.error + tail;
    out.truncation_T = T;
    return out;
  }

  // Monte Carlo integrand with path reuse; extend the horizon until the
  // fitted tail beyond it is negligible.
  double S = std::max(16.0, 12.0 / rho);
  const int max_extensions = 3;
  for (int ext = 0;; ++ext) {
    const double ds = std::min(0.05, S / 200.0);
    const McIntegral mc = mc_phi_integral(motion, x, rho, S, ds, n_mc, step_dt,
                                          seed, workers);
    std::vector<double> means(mc.curve.size());
    for (std::size_t j = 0; j < means.size(); ++j) means[j] = mc.curve[j].mean;
    const double kappa = tail_slope(mc.grid, means);
    if (kappa >= rho - kSlopeMargin) {
      out.diverged = true;
      out.truncation_T = S;
      return out;
    }
    const double gap = rho - kappa;
    const double env = std::max(means.back(), 1e-300) * std::exp(-kappa * S);
    const double tail = factor * env * std::exp(-gap * S) / gap;
    if (tail <= tol / 2.0 || ext == max_extensions) {
      out.value = factor * mc.integral.mean;
      out.mc_se = factor * mc.integral.se;
      // trapezoid curvature error, second-difference bound
      double disc = 0.0;
      for (std::size_t j = 1; j + 1 < means.size(); ++j) {
        const double f0 = means[j - 1] * std::exp(-rho * mc.grid[j - 1]);
        const double f1 = means[j] * std::exp(-rho * mc.grid[j]);
        const double f2 = means[j + 1] * std::exp(-rho * mc.grid[j + 1]);
        disc += std::abs(f2 - 2.0 * f1 + f0);
      }
      out.error_estimate = factor * disc * ds / 12.0 + tail;
      out.truncation_T = S;
      return out;
    }
    S = std::min(2.5 * S, S + std::log(2.0 * tail / tol) / gap + 1.0);
  }
}

double d_second_moment_analytic(const MotionModel& motion, double x, double r,
                                double m1, double m2, double t,
                                std::size_t n_mc, double step_dt,
                                std::uint64_t seed, unsigned workers,
                                double* se_out) {
  const double rho = r * (m1 - 1.0);
  const double factor = (m2 - m1) * r;
  if (se_out) *se_out = 0.0;
  if (t <= 0.0) return 1.0;

  if (motion.m2_analytic) {
    const auto q = quad::integrate(
        [&](double s) { return motion.m2_analytic(x, s) * std::exp(-rho * s); },
        0.0, t, 1e-12, 1e-10, 20000);
    return motion.m2_analytic(x, t) * std::exp(-rho * t) + factor * q.value;
  }

  const double ds = std::min(0.02, t / 50.0);
  const McIntegral mc =
      mc_phi_integral(motion, x, rho, t, ds, n_mc, step_dt, seed, workers);
  const double value = mc.endpoint_discounted.mean + factor * mc.integral.mean;
  if (se_out) {
    // endpoint and integral share paths; a linear bound is conservative
    *se_out = mc.endpoint_discounted.se + factor * mc.integral.se;
  }
  return value;
}

double w_statistic(const engine::Population& pop, const Interval& B,
                   double expected_b_prime) {
  if (!(expected_b_prime > 0.0))
    throw InvalidParameter("w_statistic: expected xi_t(B') must be > 0");
  return double(pop.count_in(B)) / expected_b_prime;
}

double empirical_ratio(const engine::Population& pop, const Interval& B,
                       const Interval& b_prime) {
  const auto denom = pop.count_in(b_prime);
  if (denom == 0) throw EmptyDenominator("xi_t(B') = 0");
  return double(pop.count_in(B)) / double(denom);
}

QsdReport qsd_sample(const BranchConfig& cfg, double T, std::size_t n_rep,
                     QsdCondition condition, double eps, std::size_t bins,
                     QsdMode mode, unsigned workers,
                     const std::function<void(std::size_t)>& progress) {
  const MotionModel& motion = *cfg.motion;
  if (!motion.eigen.has_nu_mass() && !motion.eigen.has_nu_cdf())
    throw MissingNuMass("qsd_sample: model carries no eigenmeasure data");

  BranchConfig rc = cfg;
  rc.t_end = T;
  rc.snapshot_times = {T};
  const double r = cfg.r, m1 = cfg.offspring.m1;

  // per replica: [D_T, positions...]
  const auto rows = engine::run_replicas_collect(
      rc, n_rep,
      [&](const engine::Trajectory& traj) {
        std::vector<double> row{0.0};
        if (traj.snapshots.empty()) return row;
        const auto& pop = traj.snapshots.back();
        row[0] = malthusian_d(pop, motion.eigen, cfg.x0.value, r, m1);
        row.reserve(pop.size() + 1);
        for (const auto& [id, s] : pop.particles) row.push_back(s.value);
        return row;
      },
      workers, nullptr, progress);

  QsdReport rep;
  rep.conditioning = condition == QsdCondition::Survival
                         ? "survival at T"
                         : "D_T > " + std::to_string(eps);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& row = rows[i];
    const std::size_t count = row.size() - 1;
    if (count == 0) continue;
    if (condition == QsdCondition::DPositive && !(row[0] > eps)) continue;
    const double w = mode == QsdMode::Pooled ? 1.0 : 1.0 / double(count);
    for (std::size_t j = 1; j < row.size(); ++j) {
      rep.replica_of.push_back(std::uint32_t(i));
      rep.positions.push_back(row[j]);
      rep.weights.push_back(w);
    }
  }
  rep.pooled_samples = rep.positions.size();
  if (rep.pooled_samples == 0)
    throw NoSurvivors("qsd_sample: no replica satisfied the conditioning");

  // histogram over the sample range
  const auto [mn_it, mx_it] =
      std::minmax_element(rep.positions.begin(), rep.positions.end());
  double lo = *mn_it, hi = *mx_it;
  if (hi <= lo) hi = lo + 1.0;
  hi += (hi - lo) * 1e-9;
  rep.bin_edges.resize(bins + 1);
  for (std::size_t b = 0; b <= bins; ++b)
    rep.bin_edges[b] = lo + (hi - lo) * double(b) / double(bins);
  rep.histogram.assign(bins, 0.0);
  double wtot = 0.0;
  for (std::size_t k = 0; k < rep.positions.size(); ++k) {
    auto b = std::size_t((rep.positions[k] - lo) / (hi - lo) * double(bins));
    b = std::min(b, bins - 1);
    rep.histogram[b] += rep.weights[k];
    wtot += rep.weights[k];
  }
  for (double& m : rep.histogram) m /= wtot;

  if (motion.eigen.has_nu_cdf()) {
    rep.has_ks = true;
    std::function<double(double)> cdf_left;
    if (motion.kind == StateKind::Integer) {
      const auto cdf = motion.eigen.nu_cdf;
      cdf_left = [cdf](double v) { return cdf(v - 0.5); };
    }
    rep.ks_distance = stats::ks_distance(
        rep.positions, motion.eigen.nu_cdf, cdf_left,
        mode == QsdMode::Pooled ? std::vector<double>{} : rep.weights);
  }
  return rep;
}

EstimatorResult eta_mc(const BranchConfig& cfg, double T, std::size_t n_rep,
                       unsigned workers, double* late_fraction_out) {
  BranchConfig rc = cfg;
  rc.t_end = T;
  rc.snapshot_times = T > 0.0 ? std::vector<double>{T / 2.0, T}
                              : std::vector<double>{0.0};
  const auto red = engine::run_replicas(
      rc, n_rep,
      [](const engine::Trajectory& traj) -> std::vector<double> {
        double half = 0.0, full = 0.0;
        if (traj.snapshots.size() >= 1)
          half = traj.snapshots.front().size() == 0 ? 1.0 : 0.0;
        if (traj.snapshots.size() >= 2)
          full = traj.snapshots.back().size() == 0 ? 1.0 : 0.0;
        else
          full = half;
        return {half, full};
      },
      workers);
  if (late_fraction_out)
    *late_fraction_out = red.merged[1].mean - red.merged[0].mean;
  return red.merged[1];
}

EstimatorResult sigma_mc(const BranchConfig& cfg, double T, double eps,
                         std::size_t n_rep, unsigned workers) {
  if (!(eps > 0.0)) throw InvalidParameter("sigma_mc: eps must be > 0");
  BranchConfig rc = cfg;
  rc.t_end = T;
  rc.snapshot_times = {T};
  const MotionModel& motion = *cfg.motion;
  const double r = cfg.r, m1 = cfg.offspring.m1;
  const auto red = engine::run_replicas(
      rc, n_rep,
      [&](const engine::Trajectory& traj) -> std::vector<double> {
        if (traj.snapshots.empty()) return {1.0};
        const double d = malthusian_d(traj.snapshots.back(), motion.eigen,
                                      cfg.x0.value, r, m1);
        return {d < eps ? 1.0 : 0.0};
      },
      workers);
  return red.merged[0];
}

EstimatorResult g_apply(const std::function<double(double)>& g, double x,
                        const BranchConfig& cfg_one_unit, std::size_t n_mc,
                        unsigned workers) {
  const MotionModel& motion = *cfg_one_unit.motion;
  // an absorbing start has no live descendants: empty product
  if (motion.eigen.h(x) <= 0.0) {
    EstimatorResult res;
    res.mean = 1.0;
    res.n = static_cast<long long>(n_mc);
    res.n_eff = double(n_mc);
    res.analytic = true;
    return res;
  }
  BranchConfig rc = cfg_one_unit;
  rc.x0 = ParticleState::live(x);
  rc.t_end = 1.0;
  rc.snapshot_times = {1.0};
  const auto red = engine::run_replicas(
      rc, n_mc,
      [&](const engine::Trajectory& traj) -> std::vector<double> {
        double prod = 1.0;
        if (!traj.snapshots.empty()) {
          for (const auto& [id, s] : traj.snapshots.back().particles) {
            const double gv = g(s.value);
            if (gv < -1e-12 || gv > 1.0 + 1e-12)
              throw InvalidParameter("g_apply: g maps outside [0,1]");
            prod *= std::clamp(gv, 0.0, 1.0);
          }
        }
        return {prod};
      },
      workers);
  return red.merged[0];
}

std::vector<std::vector<double>> g_iterate(const std::vector<double>& x_grid,
                                           const BranchConfig& cfg_one_unit,
                                           std::size_t n_iter,
                                           std::size_t n_mc, unsigned workers) {
  if (cfg_one_unit.motion->kind != StateKind::Integer)
    throw InvalidParameter("g_iterate: needs an integer-state model");
  const double grid_max = x_grid.empty() ? 0.0 : x_grid.back();
  std::vector<double> g(x_grid.size(), 0.0);
  auto g_at = [&](double pos, std::uint64_t& boundary) -> double {
    if (pos > grid_max + 0.5) {
      ++boundary;
      return g.back();
    }
    const auto it = std::lower_bound(x_grid.begin(), x_grid.end(), pos - 0.5);
    return g[std::size_t(it - x_grid.begin())];
  };

  std::vector<std::vector<double>> iterates;
  iterates.push_back(g);  // the n_iter = 0 sequence is just g = 0
  std::uint64_t boundary_hits = 0, evaluations = 0;
  for (std::size_t sweep = 0; sweep < n_iter; ++sweep) {
    std::vector<double> next(x_grid.size(), 1.0);
    std::vector<std::uint64_t> bhits(x_grid.size(), 0),
        evals(x_grid.size(), 0);
    parallel_for(x_grid.size(), workers, [&](std::size_t j) {
      const double x = x_grid[j];
      if (cfg_one_unit.motion->eigen.h(x) <= 0.0) {
        next[j] = 1.0;  // absorbing start: empty product
        return;
      }
      BranchConfig rc = cfg_one_unit;
      rc.x0 = ParticleState::live(x);
      rc.t_end = 1.0;
      rc.snapshot_times = {1.0};
      rc.seed = fold_key(fold_key(root_key(cfg_one_unit.seed ^ 0x617), sweep), j);
      double sum = 0.0;
      for (std::size_t i = 0; i < n_mc; ++i) {
        BranchConfig rci = rc;
        rci.seed = replica_seed(rc.seed, i);
        const auto traj = engine::simulate(rci);
        double prod = 1.0;
        if (!traj.snapshots.empty()) {
          for (const auto& [id, s] : traj.snapshots.back().particles) {
            ++evals[j];
            prod *= g_at(s.value, bhits[j]);
          }
        }
        sum += prod;
      }
      next[j] = sum / double(n_mc);
    });
    for (std::size_t j = 0; j < x_grid.size(); ++j) {
      boundary_hits += bhits[j];
      evaluations += evals[j];
    }
    if (evaluations > 0 &&
        double(boundary_hits) > 0.01 * double(evaluations))
      throw TruncationTooSmall(
          "g_iterate: > 1% of one-unit positions fall beyond the grid");
    g = next;
    iterates.push_back(g);
  }
  return iterates;
}

EstimatorResult local_survival_mc(const BranchConfig& cfg, const Interval& K,
                                  double T, std::size_t n_rep,
                                  unsigned workers) {
  BranchConfig rc = cfg;
  rc.t_end = T;
  rc.snapshot_times = {T};
  const auto red = engine::run_replicas(
      rc, n_rep,
      [&](const engine::Trajectory& traj) -> std::vector<double> {
        if (traj.snapshots.empty()) return {0.0};
        return {traj.snapshots.back().count_in(K) > 0 ? 1.0 : 0.0};
      },
      workers);
  return red.merged[0];
}

}  // namespace branch_lln::analysis
