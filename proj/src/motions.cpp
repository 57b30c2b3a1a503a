#include "branch_lln/motions.hpp"

#include <cmath>

#include "branch_lln/quadrature.hpp"

namespace branch_lln {

namespace {

double normal_pdf(double z, double var) {
  return std::exp(-0.5 * z * z / var) / std::sqrt(2.0 * M_PI * var);
}

}  // namespace

MotionModel killed_drifted_bm(double c) {
  if (c <= 0.0) throw InvalidParameter("killed_drifted_bm: c must be > 0");
  const double lambda = 0.5 * c * c;
  MotionModel m;
  m.name = "killed_drifted_bm";
  m.kind = StateKind::Real;
  m.exact_step = true;

  m.sampler = [c](const ParticleState& s, double dt, RandomStream& rs) -> StepResult {
    const double x = s.value;
    const double y = x - c * dt + std::sqrt(dt) * rs.normal();
    if (y <= 0.0) return {ParticleState::absorbed(), dt};
    // Brownian-bridge crossing probability between the endpoints; the drift
    // cancels given both endpoints, so this step is exact in law.
    if (rs.uniform() < std::exp(-2.0 * x * y / dt))
      return {ParticleState::absorbed(), dt};
    return {ParticleState::live(y), dt};
  };

  m.density = [c, lambda](double x, double y, double t) {
    if (y <= 0.0) return 0.0;
    const double gauss = normal_pdf(y - x, t) - normal_pdf(y + x, t);
    return std::exp(-c * (y - x) - lambda * t) * gauss;
  };
  m.density_support = [c](double x, double t) {
    const double hi = x - c * t + 13.0 * std::sqrt(t) + 1.0;
    return Interval{0.0, std::max(hi, 1e-6)};
  };

  const double h_norm = 1.0 / std::sqrt(2.0 * M_PI * lambda * lambda);
  m.eigen.lambda = lambda;
  m.eigen.h = [c, h_norm](double x) { return h_norm * x * std::exp(c * x); };
  m.eigen.nu_cdf = [c](double x) {
    if (x <= 0.0) return 0.0;
    return 1.0 - std::exp(-c * x) * (1.0 + c * x);  // 2*lambda = c^2
  };
  m.eigen.nu_mass = [m](const Interval& b) {
    const double lo = std::max(b.lo, 0.0);
    const double hi = std::max(b.hi, 0.0);
    if (hi <= lo) return 0.0;
    return m.eigen.nu_cdf(hi) - m.eigen.nu_cdf(lo);
  };
  m.eigen.p = [](double t) { return std::pow(t, -1.5); };
  m.eigen.normalization_note =
      "h(x) = x e^{cx}/sqrt(2 pi lambda^2), nu density 2 lambda x e^{-cx} "
      "(a probability measure), p(t) = t^{-3/2}";

  // E_x(M_s^2) by quadrature of the closed-form killed density; the e^{2cy}
  // tilt of h^2 moves the Gaussian bulk from x - cs to x + cs.
  m.m2_analytic = [m, c, lambda](double x, double s) {
    if (s <= 0.0) return 1.0;
    const double hx = m.eigen.h(x);
    const double upper = x + c * s + 13.0 * std::sqrt(s) + 2.0;
    auto f = [&](double y) {
      const double hy = m.eigen.h(y);
      return hy * hy * m.density(x, y, s);
    };
    const auto q = quad::integrate(f, 0.0, upper, 1e-14, 1e-11);
    return std::exp(2.0 * lambda * s) * q.value / (hx * hx);
  };

  return m;
}

double ou_exact_transition(double lam, double x, double dt, RandomStream& rs) {
  const double decay = std::exp(-lam * dt);
  const double sd = std::sqrt((1.0 - decay * decay) / (2.0 * lam));
  return x * decay + sd * rs.normal();
}

MotionModel killed_recurrent_ou(double lam) {
  if (lam <= 0.0) throw InvalidParameter("killed_recurrent_ou: lambda must be > 0");
  MotionModel m;
  m.name = "killed_recurrent_ou";
  m.kind = StateKind::Real;
  m.exact_step = false;  // crossing check is a local bridge approximation

  m.sampler = [lam](const ParticleState& s, double dt, RandomStream& rs) -> StepResult {
    const double x = s.value;
    const double y = ou_exact_transition(lam, x, dt, rs);
    if (y <= 0.0) return {ParticleState::absorbed(), dt};
    // local Brownian-bridge crossing with variance dt; O(dt) bias
    if (rs.uniform() < std::exp(-2.0 * x * y / dt))
      return {ParticleState::absorbed(), dt};
    return {ParticleState::live(y), dt};
  };

  // The OU drift is odd, so the killed transition density follows from the
  // method of images on the unkilled Gaussian kernel.
  m.density = [lam](double x, double y, double t) {
    if (y <= 0.0) return 0.0;
    const double mu = x * std::exp(-lam * t);
    const double var = (1.0 - std::exp(-2.0 * lam * t)) / (2.0 * lam);
    return normal_pdf(y - mu, var) - normal_pdf(y + mu, var);
  };
  m.density_support = [lam](double x, double t) {
    const double mu = x * std::exp(-lam * t);
    const double sd = std::sqrt((1.0 - std::exp(-2.0 * lam * t)) / (2.0 * lam));
    return Interval{0.0, mu + 13.0 * sd};
  };

  const double h_norm = std::sqrt(4.0 * lam / M_PI);
  m.eigen.lambda = lam;
  m.eigen.h = [h_norm](double x) { return h_norm * x; };
  m.eigen.nu_cdf = [lam](double x) {
    if (x <= 0.0) return 0.0;
    return 1.0 - std::exp(-lam * x * x);
  };
  m.eigen.nu_mass = [m](const Interval& b) {
    const double lo = std::max(b.lo, 0.0);
    const double hi = std::max(b.hi, 0.0);
    if (hi <= lo) return 0.0;
    return m.eigen.nu_cdf(hi) - m.eigen.nu_cdf(lo);
  };
  m.eigen.p = [](double) { return 1.0; };
  m.eigen.normalization_note =
      "nu probability with density 2 lambda x e^{-lambda x^2}; "
      "h(x) = sqrt(4 lambda/pi) x so nu(h) = 1; p = 1";

  m.m2_analytic = [m, lam](double x, double s) {
    if (s <= 0.0) return 1.0;
    const double hx = m.eigen.h(x);
    const Interval sup = m.density_support(x, s);
    auto f = [&](double y) {
      const double hy = m.eigen.h(y);
      return hy * hy * m.density(x, y, s);
    };
    const auto q = quad::integrate(f, 0.0, sup.hi, 1e-14, 1e-11);
    return std::exp(2.0 * lam * s) * q.value / (hx * hx);
  };
  return m;
}

MotionModel transient_ou(double lam, double sigma2) {
  if (lam <= 0.0 || sigma2 <= 0.0)
    throw InvalidParameter("transient_ou: lambda and sigma2 must be > 0");
  MotionModel m;
  m.name = "transient_ou";
  m.kind = StateKind::Real;
  m.exact_step = true;

  auto var_t = [lam, sigma2](double t) {
    return sigma2 * (std::exp(2.0 * lam * t) - 1.0) / (2.0 * lam);
  };

  m.sampler = [lam, var_t](const ParticleState& s, double dt,
                           RandomStream& rs) -> StepResult {
    const double y = s.value * std::exp(lam * dt) + std::sqrt(var_t(dt)) * rs.normal();
    return {ParticleState::live(y), dt};
  };

  m.density = [lam, var_t](double x, double y, double t) {
    return normal_pdf(y - x * std::exp(lam * t), var_t(t));
  };
  m.density_support = [lam, var_t](double x, double t) {
    const double mu = x * std::exp(lam * t);
    const double sd = std::sqrt(var_t(t));
    return Interval{mu - 13.0 * sd, mu + 13.0 * sd};
  };

  const double a = lam / sigma2;
  m.eigen.lambda = lam;
  m.eigen.h = [a](double x) { return std::exp(-a * x * x); };
  m.eigen.nu_mass = [](const Interval& b) {
    if (!std::isfinite(b.length()))
      throw InvalidParameter("transient_ou: nu (Lebesgue) needs a bounded interval");
    return std::max(b.length(), 0.0);
  };
  m.eigen.p = [lam, sigma2](double) { return std::sqrt(lam / (M_PI * sigma2)); };
  m.eigen.normalization_note =
      "h = exp(-(lambda/sigma^2) x^2); nu = Lebesgue; constant "
      "p = sqrt(lambda/(pi sigma^2)) from the invariant-measure normalization";

  // E(e^{-b X^2}) for X ~ N(mu, v) is exp(-b mu^2/(1+2bv))/sqrt(1+2bv).
  m.m2_analytic = [lam, a, var_t, m](double x, double s) {
    const double b = 2.0 * a;
    const double mu = x * std::exp(lam * s);
    const double v = var_t(s);
    const double denom = 1.0 + 2.0 * b * v;
    const double eh2 = std::exp(-b * mu * mu / denom) / std::sqrt(denom);
    const double hx = m.eigen.h(x);
    return std::exp(2.0 * lam * s) * eh2 / (hx * hx);
  };
  return m;
}

MotionModel subcritical_gw(const std::map<int, double>& rho) {
  if (rho.empty()) throw InvalidParameter("subcritical_gw: empty rho");
  double total = 0.0, drift = 0.0;
  std::vector<int> jumps;
  std::vector<double> cdf;
  for (const auto& [y, p] : rho) {
    if (y < -1) throw InvalidParameter("subcritical_gw: jump below -1");
    if (p < 0.0) throw InvalidParameter("subcritical_gw: negative probability");
    total += p;
    drift += y * p;
    jumps.push_back(y);
    cdf.push_back(total);
  }
  if (std::abs(total - 1.0) > 1e-12)
    throw InvalidParameter("subcritical_gw: rho sums to " + std::to_string(total));
  if (drift >= 0.0)
    throw InvalidParameter("subcritical_gw: sum y rho(y) must be < 0");
  cdf.back() = 1.0;

  MotionModel m;
  m.name = "subcritical_gw";
  m.kind = StateKind::Integer;
  m.exact_step = true;

  m.sampler = [jumps, cdf](const ParticleState& s, double dt,
                           RandomStream& rs) -> StepResult {
    double x = s.value;
    double t = 0.0;
    for (;;) {
      t += rs.exponential(x);  // total jump rate x * sum(rho) = x
      if (t > dt) return {ParticleState::live(x), dt};
      const double u = rs.uniform();
      std::size_t i = 0;
      while (i + 1 < cdf.size() && u >= cdf[i]) ++i;
      x += jumps[i];
      if (x <= 0.0) return {ParticleState::absorbed(), t};
    }
  };

  m.eigen.lambda = -drift;
  m.eigen.h = [](double x) { return x; };
  m.eigen.p = [](double) { return 1.0; };
  m.eigen.normalization_note =
      "h(x) = x; nu assigns positive mass to all states but is not "
      "explicitly known and is not stored; p = 1";
  return m;
}

MotionModel ergodic_ctmc(const Eigen::MatrixXd& Q, const Eigen::VectorXd& pi) {
  const auto K = Q.rows();
  if (K < 1 || Q.cols() != K) throw InvalidGenerator("Q must be square");
  if (pi.size() != K) throw InvalidGenerator("pi has wrong dimension");
  for (Eigen::Index i = 0; i < K; ++i) {
    double row = 0.0;
    for (Eigen::Index j = 0; j < K; ++j) {
      if (i != j && Q(i, j) < 0.0)
        throw InvalidGenerator("negative off-diagonal rate");
      row += Q(i, j);
    }
    if (std::abs(row) > 1e-10) throw InvalidGenerator("row sums must be 0");
    if (pi(i) <= 0.0) throw InvalidGenerator("pi must be strictly positive");
  }
  if (std::abs(pi.sum() - 1.0) > 1e-10)
    throw InvalidGenerator("pi must sum to 1");
  if ((pi.transpose() * Q).cwiseAbs().maxCoeff() > 1e-10)
    throw InvalidGenerator("pi Q != 0: pi is not stationary for Q");
  // irreducibility: forward reachability from state 0 must cover all states,
  // and so must reverse reachability
  for (int dir = 0; dir < 2; ++dir) {
    std::vector<bool> seen(static_cast<std::size_t>(K), false);
    std::vector<Eigen::Index> stack{0};
    seen[0] = true;
    while (!stack.empty()) {
      const auto i = stack.back();
      stack.pop_back();
      for (Eigen::Index j = 0; j < K; ++j) {
        const double rate = dir == 0 ? Q(i, j) : Q(j, i);
        if (i != j && rate > 0.0 && !seen[static_cast<std::size_t>(j)]) {
          seen[static_cast<std::size_t>(j)] = true;
          stack.push_back(j);
        }
      }
    }
    for (bool s : seen)
      if (!s) throw InvalidGenerator("Q is not irreducible");
  }

  // per-state jump distribution
  struct Row {
    double rate;
    std::vector<double> cdf;
    std::vector<int> to;
  };
  std::vector<Row> rows(static_cast<std::size_t>(K));
  for (Eigen::Index i = 0; i < K; ++i) {
    Row& row = rows[static_cast<std::size_t>(i)];
    row.rate = -Q(i, i);
    double cum = 0.0;
    for (Eigen::Index j = 0; j < K; ++j) {
      if (i == j || Q(i, j) <= 0.0) continue;
      cum += Q(i, j) / row.rate;
      row.cdf.push_back(cum);
      row.to.push_back(static_cast<int>(j));
    }
    if (!row.cdf.empty()) row.cdf.back() = 1.0;
  }

  MotionModel m;
  m.name = "ergodic_ctmc";
  m.kind = StateKind::Integer;
  m.exact_step = true;

  m.sampler = [rows](const ParticleState& s, double dt,
                     RandomStream& rs) -> StepResult {
    int x = static_cast<int>(s.value);
    double t = 0.0;
    for (;;) {
      const Row& row = rows[static_cast<std::size_t>(x)];
      if (row.rate <= 0.0) return {ParticleState::live(double(x)), dt};
      t += rs.exponential(row.rate);
      if (t > dt) return {ParticleState::live(double(x)), dt};
      const double u = rs.uniform();
      std::size_t i = 0;
      while (i + 1 < row.cdf.size() && u >= row.cdf[i]) ++i;
      x = row.to[i];
    }
  };

  std::vector<double> pmass(pi.data(), pi.data() + K);
  m.eigen.lambda = 0.0;
  m.eigen.h = [](double) { return 1.0; };
  m.eigen.nu_cdf = [pmass](double x) {
    double c = 0.0;
    for (std::size_t i = 0; i < pmass.size(); ++i)
      if (double(i) <= x) c += pmass[i];
    return c;
  };
  m.eigen.nu_mass = [pmass](const Interval& b) {
    double c = 0.0;
    for (std::size_t i = 0; i < pmass.size(); ++i)
      if (b.contains(double(i))) c += pmass[i];
    return c;
  };
  m.eigen.p = [](double) { return 1.0; };
  m.eigen.normalization_note = "h = 1, lambda = 0, p = 1, nu = pi";
  m.m2_analytic = [](double, double) { return 1.0; };  // M = 1 identically
  return m;
}

RegularVariationReport regular_variation_check(
    const std::function<double(double)>& p, double s_max,
    const std::vector<double>& t_grid) {
  RegularVariationReport rep;
  const int n_s = 1000;
  for (double t : t_grid) {
    if (p(t) <= 0.0) throw InvalidParameter("regular_variation_check: p(t) <= 0");
    double dev = 0.0;
    for (int j = 1; j <= n_s; ++j) {
      const double s = s_max * double(j) / double(n_s);
      dev = std::max(dev, std::abs(p(t) / p(t + s) - 1.0));
    }
    rep.t.push_back(t);
    rep.max_dev.push_back(dev);
  }
  return rep;
}

}  // namespace branch_lln
