#pragma once

#include <functional>
#include <vector>

#include "branch_lln/core.hpp"
#include "branch_lln/motions.hpp"

namespace branch_lln::spine {

// Advances a single particle by `duration` in substeps <= step_dt.
ParticleState evolve(const MotionModel& motion, ParticleState s,
                     double duration, double step_dt, RandomStream& rs);

// First population moment through one spine particle:
// E_x(xi_t(B)) = e^{r(m1-1)t} P_x(X_t in B). Uses quadrature of the
// transition density when available (se = 0, marked analytic), otherwise
// n_mc single-particle paths.
EstimatorResult many_to_one(const MotionModel& motion, double x,
                            const Interval& B, double t, double r, double m1,
                            std::size_t n_mc, double step_dt,
                            std::uint64_t seed, unsigned workers = 1);

// A coupled pair sharing one trajectory until the splitting time E ~
// Exp((m2-m1) r), independent afterwards, carrying the many-to-two weight
// e^{[Var(m)+(m1-1)^2] r (E^t)}.
struct TwoSpineSample {
  double split_time = 0.0;  // E ^ t
  ParticleState x1, x2;
  double weight = 1.0;
};

TwoSpineSample draw_two_spine(const MotionModel& motion, double x, double t,
                              double r, const OffspringLaw& offspring,
                              double step_dt, std::uint64_t sample_key);

// Second population moment E_x(xi_t(B)^2) via the many-to-two identity; an
// oracle independent of the engine's direct estimate.
EstimatorResult two_spine_second_moment(const MotionModel& motion, double x,
                                        const Interval& B, double t, double r,
                                        const OffspringLaw& offspring,
                                        std::size_t n_mc, double step_dt,
                                        std::uint64_t seed,
                                        unsigned workers = 1);

// Importance-weighted h-transform expectation
// E~_x(f(X_t)) = e^{lambda t}/h(x) E_x(h(X_t) f(X_t));
// absorbed paths contribute zero through h = 0.
EstimatorResult h_transform_expectation(
    const MotionModel& motion, double x,
    const std::function<double(double)>& f, double t, std::size_t n_mc,
    double step_dt, std::uint64_t seed, unsigned workers = 1);

// E_x(M_s^2) = e^{2 lambda s} E_x(h^2(X_s)) / h^2(x) by Monte Carlo, or the
// model's exact hook when present.
EstimatorResult m_second_moment(const MotionModel& motion, double x, double s,
                                std::size_t n_mc, double step_dt,
                                std::uint64_t seed, unsigned workers = 1);

// E_x(M_s^2) on a whole grid from one shared set of paths.
std::vector<EstimatorResult> m_second_moment_curve(
    const MotionModel& motion, double x, const std::vector<double>& s_grid,
    std::size_t n_mc, double step_dt, std::uint64_t seed,
    unsigned workers = 1);

struct SBDiagnostic {
  double t = 0.0;
  double estimate = 0.0;  // s_B(x, t) estimate
  double se = 0.0;
};

// s_B(x,t) = (1/p(t)) E~_x(1_B/h (X_t)) - nu(B); assumption (A2)(iii) says
// it decays in t. Requires nu(B) from the eigen-data.
std::vector<SBDiagnostic> s_b_curve(const MotionModel& motion, double x,
                                    const Interval& B,
                                    const std::vector<double>& t_grid,
                                    std::size_t n_mc, double step_dt,
                                    std::uint64_t seed, unsigned workers = 1);

}  // namespace branch_lln::spine
