#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "branch_lln/core.hpp"

namespace branch_lln {

// Outcome of advancing a particle by dt. If the particle was absorbed,
// absorbed_at is the offset of the absorption inside [0, dt]: exact for
// jump models, end-of-substep for diffusions (substeps bound the error).
struct StepResult {
  ParticleState state;
  double absorbed_at = 0.0;
};

// An underlying motion bundled with its eigen-data and a transition sampler.
// Immutable and shareable; sampler calls are pure given the stream.
struct MotionModel {
  std::string name;
  StateKind kind = StateKind::Real;
  bool exact_step = false;  // sampler has no time-discretization bias
  std::function<StepResult(const ParticleState&, double, RandomStream&)> sampler;

  // Closed-form transition density of the absorbed motion, when known.
  // Sub-probability: integrates to P_x(alive at t).
  std::function<double(double x, double y, double t)> density;
  // Integration window covering the support of density(x, ., t) up to
  // negligible tail mass.
  std::function<Interval(double x, double t)> density_support;
  // Exact E_x(M_s^2) where computable without sampling.
  std::function<double(double x, double s)> m2_analytic;

  EigenData eigen;

  bool has_density() const { return static_cast<bool>(density); }

  StepResult step(const ParticleState& s, double dt, RandomStream& rs) const {
    if (!s.is_live()) return {s, 0.0};  // Absorbed/Dead are terminal
    return sampler(s, dt, rs);
  }
};

// Brownian motion with drift -c killed at the origin (exact steps via the
// Brownian-bridge crossing probability).
MotionModel killed_drifted_bm(double c);

// Exact transition of the unkilled OU dY = -lam Y dt + dB; the killed model
// draws its proposals from this.
double ou_exact_transition(double lam, double x, double dt, RandomStream& rs);

// Recurrent Ornstein-Uhlenbeck process killed at 0. Steps use the exact OU
// transition plus a local Brownian-bridge crossing check with variance dt,
// an O(dt) approximation; step_dt controls the bias.
MotionModel killed_recurrent_ou(double lam);

// Ornstein-Uhlenbeck with outward drift +lam (no absorption); exact steps.
MotionModel transient_ou(double lam, double sigma2);

// Continuous-time Galton-Watson chain on N_0 with rates q(x, x+y) = x rho(y),
// subcritical (sum_y y rho(y) < 0), absorbed at 0. Exact event-driven jumps.
MotionModel subcritical_gw(const std::map<int, double>& rho);

// Ergodic finite chain with generator Q and stationary distribution pi
// (validated: pi Q = 0 within 1e-10, Q irreducible). Exact Gillespie jumps.
MotionModel ergodic_ctmc(const Eigen::MatrixXd& Q, const Eigen::VectorXd& pi);

// Max over s <= s_max of |p(t)/p(t+s) - 1| for each grid t; regular
// variation means the deviation decays along t.
struct RegularVariationReport {
  std::vector<double> t;
  std::vector<double> max_dev;
};
RegularVariationReport regular_variation_check(
    const std::function<double(double)>& p, double s_max,
    const std::vector<double>& t_grid);

}  // namespace branch_lln
