#include "branch_lln/spine.hpp"

#include <cmath>

#include "branch_lln/parallel.hpp"
#include "branch_lln/quadrature.hpp"
#include "branch_lln/stats.hpp"

namespace branch_lln::spine {

namespace {

constexpr std::uint64_t kTagManyToOne = 0x11;
constexpr std::uint64_t kTagTwoSpine = 0x22;
constexpr std::uint64_t kTagHTransform = 0x33;
constexpr std::uint64_t kTagMoment = 0x44;

// Fixed block count so partial sums combine identically for any worker count.
constexpr std::size_t kBlocks = 64;

struct Accum {
  double sum = 0.0, sumsq = 0.0;
  long long n = 0;
  void add(double v) {
    sum += v;
    sumsq += v * v;
    ++n;
  }
};

EstimatorResult to_result(const Accum& a) {
  EstimatorResult r;
  r.n = a.n;
  if (a.n == 0) return r;
  r.mean = a.sum / double(a.n);
  if (a.n > 1) {
    const double var = std::max(0.0, (a.sumsq - a.sum * a.sum / double(a.n)) /
                                         double(a.n - 1));
    r.se = std::sqrt(var / double(a.n));
  }
  r.n_eff = double(a.n);
  return r;
}

// Runs fn(sample_index, block_index) over n_mc samples in fixed blocks.
template <typename Fn>
void blocked_mc(std::size_t n_mc, unsigned workers, Fn&& fn) {
  const std::size_t nblocks = std::min(kBlocks, std::max<std::size_t>(n_mc, 1));
  parallel_for(nblocks, workers, [&](std::size_t b) {
    const std::size_t lo = n_mc * b / nblocks;
    const std::size_t hi = n_mc * (b + 1) / nblocks;
    for (std::size_t i = lo; i < hi; ++i) fn(i, b);
  });
}

}  // namespace

ParticleState evolve(const MotionModel& motion, ParticleState s,
                     double duration, double step_dt, RandomStream& rs) {
  if (duration <= 0.0 || !s.is_live()) return s;
  const int nsub = std::max(1, int(std::ceil(duration / step_dt - 1e-9)));
  const double dt = duration / nsub;
  for (int i = 0; i < nsub; ++i) {
    const StepResult sr = motion.step(s, dt, rs);
    s = sr.state;
    if (!s.is_live()) break;
  }
  return s;
}

EstimatorResult many_to_one(const MotionModel& motion, double x,
                            const Interval& B, double t, double r, double m1,
                            std::size_t n_mc, double step_dt,
                            std::uint64_t seed, unsigned workers) {
  const double growth = std::exp(r * (m1 - 1.0) * t);
  if (t <= 0.0) {
    EstimatorResult res;
    res.mean = B.contains(x) ? 1.0 : 0.0;
    res.n = 1;
    res.n_eff = 1;
    res.analytic = true;
    return res;
  }
  if (motion.has_density()) {
    const Interval sup = motion.density_support(x, t);
    const double lo = std::max(B.lo, sup.lo);
    const double hi = std::min(B.hi, sup.hi);
    EstimatorResult res;
    if (hi > lo) {
      const auto q = quad::integrate(
          [&](double y) { return motion.density(x, y, t); }, lo, hi, 1e-13,
          1e-10);
      res.mean = growth * q.value;
    }
    res.n = 1;
    res.n_eff = 1;
    res.analytic = true;
    return res;
  }
  std::vector<Accum> acc(kBlocks);
  const std::uint64_t base = fold_key(root_key(seed), kTagManyToOne);
  blocked_mc(n_mc, workers, [&](std::size_t i, std::size_t b) {
    RandomStream rs = stream_for_key(fold_key(base, i), kMotion);
    const ParticleState end =
        evolve(motion, ParticleState::live(x), t, step_dt, rs);
    acc[b].add(end.is_live() && B.contains(end.value) ? 1.0 : 0.0);
  });
  Accum total;
  for (const auto& a : acc) {
    total.sum += a.sum;
    total.sumsq += a.sumsq;
    total.n += a.n;
  }
  EstimatorResult res = to_result(total);
  res.mean *= growth;
  res.se *= growth;
  return res;
}

TwoSpineSample draw_two_spine(const MotionModel& motion, double x, double t,
                              double r, const OffspringLaw& offspring,
                              double step_dt, std::uint64_t sample_key) {
  const double split_rate = (offspring.m2 - offspring.m1) * r;
  RandomStream split_rs = stream_for_key(sample_key, 0);
  RandomStream common_rs = stream_for_key(sample_key, 1);
  RandomStream second_rs = stream_for_key(sample_key, 2);

  TwoSpineSample out;
  const double e_time = split_rs.exponential(split_rate);
  out.split_time = std::min(e_time, t);
  out.weight = std::exp((offspring.variance() +
                         (offspring.m1 - 1.0) * (offspring.m1 - 1.0)) *
                        r * out.split_time);

  ParticleState common =
      evolve(motion, ParticleState::live(x), out.split_time, step_dt, common_rs);
  if (e_time >= t) {
    out.x1 = out.x2 = common;  // no split before t
    return out;
  }
  const double rest = t - out.split_time;
  out.x1 = evolve(motion, common, rest, step_dt, common_rs);
  out.x2 = evolve(motion, common, rest, step_dt, second_rs);
  return out;
}

EstimatorResult two_spine_second_moment(const MotionModel& motion, double x,
                                        const Interval& B, double t, double r,
                                        const OffspringLaw& offspring,
                                        std::size_t n_mc, double step_dt,
                                        std::uint64_t seed, unsigned workers) {
  const double growth = std::exp(2.0 * r * (offspring.m1 - 1.0) * t);
  std::vector<Accum> acc(kBlocks);
  std::vector<Accum> wacc(kBlocks);
  const std::uint64_t base = fold_key(root_key(seed), kTagTwoSpine);
  blocked_mc(n_mc, workers, [&](std::size_t i, std::size_t b) {
    const TwoSpineSample sp =
        draw_two_spine(motion, x, t, r, offspring, step_dt, fold_key(base, i));
    const bool in1 = sp.x1.is_live() && B.contains(sp.x1.value);
    const bool in2 = sp.x2.is_live() && B.contains(sp.x2.value);
    acc[b].add(in1 && in2 ? sp.weight : 0.0);
    wacc[b].add(sp.weight);
  });
  Accum total, wtotal;
  for (std::size_t b = 0; b < kBlocks; ++b) {
    total.sum += acc[b].sum;
    total.sumsq += acc[b].sumsq;
    total.n += acc[b].n;
    wtotal.sum += wacc[b].sum;
    wtotal.sumsq += wacc[b].sumsq;
  }
  EstimatorResult res = to_result(total);
  res.mean *= growth;
  res.se *= growth;
  res.n_eff = wtotal.sumsq > 0.0 ? wtotal.sum * wtotal.sum / wtotal.sumsq : 0.0;
  res.low_ess = res.n_eff < 100.0;
  return res;
}

EstimatorResult h_transform_expectation(
    const MotionModel& motion, double x,
    const std::function<double(double)>& f, double t, std::size_t n_mc,
    double step_dt, std::uint64_t seed, unsigned workers) {
  const double hx = motion.eigen.h(x);
  if (hx <= 0.0) throw ZeroEigenfunction("h(x) = 0: x is absorbing");
  if (t <= 0.0) {
    EstimatorResult res;
    res.mean = f(x);
    res.n = 1;
    res.n_eff = 1;
    res.analytic = true;
    return res;
  }
  const double scale = std::exp(motion.eigen.lambda * t) / hx;
  std::vector<Accum> acc(kBlocks), wacc(kBlocks);
  const std::uint64_t base = fold_key(root_key(seed), kTagHTransform);
  blocked_mc(n_mc, workers, [&](std::size_t i, std::size_t b) {
    RandomStream rs = stream_for_key(fold_key(base, i), kMotion);
    const ParticleState end =
        evolve(motion, ParticleState::live(x), t, step_dt, rs);
    const double w = motion.eigen.h_at(end) * scale;
    acc[b].add(end.is_live() ? w * f(end.value) : 0.0);
    wacc[b].add(w);
  });
  Accum total, wtotal;
  for (std::size_t b = 0; b < kBlocks; ++b) {
    total.sum += acc[b].sum;
    total.sumsq += acc[b].sumsq;
    total.n += acc[b].n;
    wtotal.sum += wacc[b].sum;
    wtotal.sumsq += wacc[b].sumsq;
  }
  EstimatorResult res = to_result(total);
  res.n_eff = wtotal.sumsq > 0.0 ? wtotal.sum * wtotal.sum / wtotal.sumsq : 0.0;
  res.low_ess = res.n_eff < 100.0;
  return res;
}

EstimatorResult m_second_moment(const MotionModel& motion, double x, double s,
                                std::size_t n_mc, double step_dt,
                                std::uint64_t seed, unsigned workers) {
  const double hx = motion.eigen.h(x);
  if (hx <= 0.0) throw ZeroEigenfunction("h(x) = 0: x is absorbing");
  if (s <= 0.0) {
    EstimatorResult res;
    res.mean = 1.0;
    res.n = 1;
    res.n_eff = 1;
    res.analytic = true;
    return res;
  }
  if (motion.m2_analytic) {
    EstimatorResult res;
    res.mean = motion.m2_analytic(x, s);
    res.n = 1;
    res.n_eff = 1;
    res.analytic = true;
    return res;
  }
  const auto curve = m_second_moment_curve(motion, x, {s}, n_mc, step_dt, seed,
                                           workers);
  return curve.front();
}

std::vector<EstimatorResult> m_second_moment_curve(
    const MotionModel& motion, double x, const std::vector<double>& s_grid,
    std::size_t n_mc, double step_dt, std::uint64_t seed, unsigned workers) {
  const double hx = motion.eigen.h(x);
  if (hx <= 0.0) throw ZeroEigenfunction("h(x) = 0: x is absorbing");
  const std::size_t m = s_grid.size();
  std::vector<std::vector<Accum>> acc(kBlocks, std::vector<Accum>(m));
  const std::uint64_t base = fold_key(root_key(seed), kTagMoment);
  blocked_mc(n_mc, workers, [&](std::size_t i, std::size_t b) {
    RandomStream rs = stream_for_key(fold_key(base, i), kMotion);
    ParticleState s = ParticleState::live(x);
    double t_cur = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
      if (s.is_live()) {
        s = evolve(motion, s, s_grid[j] - t_cur, step_dt, rs);
        t_cur = s_grid[j];
      }
      const double hy = motion.eigen.h_at(s);
      acc[b][j].add(hy * hy);
    }
  });
  std::vector<EstimatorResult> out(m);
  for (std::size_t j = 0; j < m; ++j) {
    Accum total;
    for (std::size_t b = 0; b < kBlocks; ++b) {
      total.sum += acc[b][j].sum;
      total.sumsq += acc[b][j].sumsq;
      total.n += acc[b][j].n;
    }
    out[j] = to_result(total);
    const double scale =
        std::exp(2.0 * motion.eigen.lambda * s_grid[j]) / (hx * hx);
    out[j].mean *= scale;
    out[j].se *= scale;
  }
  return out;
}

std::vector<SBDiagnostic> s_b_curve(const MotionModel& motion, double x,
                                    const Interval& B,
                                    const std::vector<double>& t_grid,
                                    std::size_t n_mc, double step_dt,
                                    std::uint64_t seed, unsigned workers) {
  if (!motion.eigen.has_nu_mass())
    throw MissingNuMass("model has no nu_mass for s_B");
  const double nu_b = motion.eigen.nu_mass(B);
  const double hx = motion.eigen.h(x);
  if (hx <= 0.0) throw ZeroEigenfunction("h(x) = 0: x is absorbing");

  const std::size_t m = t_grid.size();
  std::vector<std::vector<Accum>> acc(kBlocks, std::vector<Accum>(m));
  const std::uint64_t base = fold_key(root_key(seed), kTagHTransform + 1);
  blocked_mc(n_mc, workers, [&](std::size_t i, std::size_t b) {
    RandomStream rs = stream_for_key(fold_key(base, i), kMotion);
    ParticleState s = ParticleState::live(x);
    double t_cur = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
      if (s.is_live()) {
        s = evolve(motion, s, t_grid[j] - t_cur, step_dt, rs);
        t_cur = t_grid[j];
      }
      // E~(1_B/h) reduces to e^{lambda t} P(X_t in B)/h(x): the h weights
      // cancel against the 1/h integrand
      acc[b][j].add(s.is_live() && B.contains(s.value) ? 1.0 : 0.0);
    }
  });
  std::vector<SBDiagnostic> out(m);
  for (std::size_t j = 0; j < m; ++j) {
    Accum total;
    for (std::size_t b = 0; b < kBlocks; ++b) {
      total.sum += acc[b][j].sum;
      total.sumsq += acc[b][j].sumsq;
      total.n += acc[b][j].n;
    }
    EstimatorResult est = to_result(total);
    const double t = t_grid[j];
    const double scale =
        std::exp(motion.eigen.lambda * t) / (hx * motion.eigen.p(t));
    out[j].t = t;
    out[j].estimate = est.mean * scale - nu_b;
    out[j].se = est.se * scale;
  }
  return out;
}

}  // namespace branch_lln::spine
