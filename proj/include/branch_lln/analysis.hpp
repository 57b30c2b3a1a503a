#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "branch_lln/core.hpp"
#include "branch_lln/engine.hpp"
#include "branch_lln/motions.hpp"

namespace branch_lln::analysis {

// Malthusian martingale D_t = (1/h(x0)) sum_{live u} h(u_t) e^{-(r(m1-1)-lambda) t};
// zero once the population is extinct or fully absorbed.
double malthusian_d(const engine::Population& pop, const EigenData& eigen,
                    double x0, double r, double m1);

struct QuadratureResult {
  double value = std::numeric_limits<double>::quiet_NaN();
  double error_estimate = 0.0;  // truncation + quadrature error
  double mc_se = 0.0;           // statistical error when the integrand is MC
  bool diverged = false;
  double truncation_T = 0.0;
};

// Phi_x = (m2-m1) int_0^inf E_x(M_s^2) r e^{-r(m1-1)s} ds. Divergence is a
// result, not an error: declared when the fitted exponential growth rate of
// E_x(M_s^2) over the last decade of s reaches r(m1-1) - 1e-6.
QuadratureResult phi_quadrature(const MotionModel& motion, double x, double r,
                                double m1, double m2, double tol,
                                std::size_t n_mc = 20000,
                                double step_dt = 0.01, std::uint64_t seed = 1,
                                unsigned workers = 1);

// Finite-t identity
// E_x(D_t^2) = E_x(M_t^2) e^{-r(m1-1)t} + (m2-m1) r int_0^t E_x(M_s^2) e^{-r(m1-1)s} ds.
// se_out receives the statistical error when the integrand is MC (0 otherwise).
double d_second_moment_analytic(const MotionModel& motion, double x, double r,
                                double m1, double m2, double t,
                                std::size_t n_mc = 20000, double step_dt = 0.01,
                                std::uint64_t seed = 1, unsigned workers = 1,
                                double* se_out = nullptr);

// W_t(B, B') = xi_t(B) / E_x(xi_t(B')); the denominator comes from
// many_to_one.
double w_statistic(const engine::Population& pop, const Interval& B,
                   double expected_b_prime);

// nu_t(B, B') = xi_t(B) / xi_t(B').
double empirical_ratio(const engine::Population& pop, const Interval& B,
                       const Interval& b_prime);

enum class QsdCondition { Survival, DPositive };
enum class QsdMode { Pooled, PerReplica };

struct QsdReport {
  std::size_t pooled_samples = 0;
  double ks_distance = 0.0;
  bool has_ks = false;
  std::vector<double> bin_edges;
  std::vector<double> histogram;  // masses, sum to 1
  std::string conditioning;
  // raw pooled data for emission: (replica, position, weight)
  std::vector<std::uint32_t> replica_of;
  std::vector<double> positions;
  std::vector<double> weights;
};

// Runs replicas to time T, keeps those surviving (or with D_T > eps), pools
// live positions and compares against nu where a cdf is available.
QsdReport qsd_sample(const BranchConfig& cfg, double T, std::size_t n_rep,
                     QsdCondition condition, double eps = 0.01,
                     std::size_t bins = 64, QsdMode mode = QsdMode::Pooled,
                     unsigned workers = 1,
                     const std::function<void(std::size_t)>& progress = nullptr);

// eta(x): fraction of replicas extinct by T. late_fraction_out receives the
// fraction extinct in (T/2, T], a saturation diagnostic.
EstimatorResult eta_mc(const BranchConfig& cfg, double T, std::size_t n_rep,
                       unsigned workers = 1,
                       double* late_fraction_out = nullptr);

// sigma(x) surrogate: fraction of replicas with D_T < eps.
EstimatorResult sigma_mc(const BranchConfig& cfg, double T, double eps,
                         std::size_t n_rep, unsigned workers = 1);

// Moment generating operator G(g)(x) = E_x prod_{u in xi_1} g(u_1),
// estimated over n_mc one-time-unit runs of the branching dynamics.
EstimatorResult g_apply(const std::function<double(double)>& g, double x,
                        const BranchConfig& cfg_one_unit, std::size_t n_mc,
                        unsigned workers = 1);

// Iterates g <- G(g) from g = 0 on an integer grid with fresh Monte Carlo
// each sweep; the iterate sequence increases to eta. Throws
// TruncationTooSmall when more than 1% of one-unit positions leave the grid.
std::vector<std::vector<double>> g_iterate(const std::vector<double>& x_grid,
                                           const BranchConfig& cfg_one_unit,
                                           std::size_t n_iter,
                                           std::size_t n_mc,
                                           unsigned workers = 1);

// Fraction of replicas with xi_T(K) > 0, the finite-T local-survival proxy.
EstimatorResult local_survival_mc(const BranchConfig& cfg, const Interval& K,
                                  double T, std::size_t n_rep,
                                  unsigned workers = 1);

}  // namespace branch_lln::analysis
