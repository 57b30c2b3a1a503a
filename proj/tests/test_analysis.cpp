#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "branch_lln/analysis.hpp"
#include "branch_lln/engine.hpp"
#include "branch_lln/stats.hpp"

using namespace branch_lln;

namespace {

MotionModel single_state() {
  Eigen::MatrixXd q(1, 1);
  q << 0.0;
  Eigen::VectorXd pi(1);
  pi << 1.0;
  return ergodic_ctmc(q, pi);
}

BranchConfig base_config(const MotionModel& m, const OffspringLaw& law,
                         double r, double x0, std::uint64_t seed) {
  BranchConfig cfg;
  cfg.motion = &m;
  cfg.offspring = law;
  cfg.r = r;
  cfg.x0 = ParticleState::live(x0);
  cfg.step_dt = 0.5;
  cfg.seed = seed;
  return cfg;
}

}  // namespace

TEST_CASE("malthusian d on constructed populations") {
  const auto m = single_state();
  engine::Population pop;
  pop.time = 0.0;
  pop.particles.emplace_back(ParticleId{}, ParticleState::live(0.0));
  CHECK(analysis::malthusian_d(pop, m.eigen, 0.0, 1.0, 2.0) ==
        doctest::Approx(1.0));
  engine::Population empty;
  empty.time = 3.0;
  CHECK(analysis::malthusian_d(empty, m.eigen, 0.0, 1.0, 2.0) ==
        doctest::Approx(0.0));
}

TEST_CASE("phi is exact for constant M") {
  // h = 1 so M = 1: Phi = (m2 - m1)/(m1 - 1) = 2
  const auto m = single_state();
  const auto phi = analysis::phi_quadrature(m, 0.0, 1.0, 2.0, 4.0, 1e-9);
  REQUIRE(!phi.diverged);
  CHECK(phi.value == doctest::Approx(2.0).epsilon(1e-8));
  CHECK(phi.error_estimate <= 1e-9);
}

TEST_CASE("phi divergence at and below the bm phase boundary") {
  const auto m = killed_drifted_bm(1.0);  // 2 lambda = 1
  const auto sub = analysis::phi_quadrature(m, 1.0, 0.8, 2.0, 4.0, 1e-6);
  CHECK(sub.diverged);
  CHECK(std::isnan(sub.value));
  const auto super = analysis::phi_quadrature(m, 1.0, 1.5, 2.0, 4.0, 1e-6);
  REQUIRE(!super.diverged);
  // frozen from an independent double-quadrature of the closed form
  CHECK(super.value == doctest::Approx(84.6337).epsilon(0.01));
}

TEST_CASE("phi for killed ou via the image density") {
  const auto m = killed_recurrent_ou(1.0);
  const auto phi = analysis::phi_quadrature(m, 1.0, 2.0, 2.0, 4.0, 1e-6);
  REQUIRE(!phi.diverged);
  CHECK(phi.value == doctest::Approx(4.2945).epsilon(0.01));
  // boundary r(m1-1) = lambda: E(M_s^2) grows like e^{lambda s}
  const auto bound = analysis::phi_quadrature(m, 1.0, 1.0, 2.0, 4.0, 1e-6);
  CHECK(bound.diverged);
}

TEST_CASE("d second moment identity closed form for constant M") {
  // M = 1: E(D_t^2) = e^{-t} + 2(1 - e^{-t}) for m = 2, r = 1
  const auto m = single_state();
  const double v1 = analysis::d_second_moment_analytic(m, 0.0, 1.0, 2.0, 4.0, 1.0);
  CHECK(v1 == doctest::Approx(2.0 - std::exp(-1.0)).epsilon(1e-9));
  CHECK(analysis::d_second_moment_analytic(m, 0.0, 1.0, 2.0, 4.0, 0.0) ==
        doctest::Approx(1.0));
}

TEST_CASE("d second moment identity for killed ou at the boundary") {
  const auto m = killed_recurrent_ou(1.0);
  // frozen from the independent image-density double quadrature
  const double v = analysis::d_second_moment_analytic(m, 1.0, 1.0, 2.0, 4.0, 2.0);
  CHECK(v == doctest::Approx(5.472293).epsilon(0.01));
}

TEST_CASE("replica D second moment matches the identity (killed ou)") {
  const auto m = killed_recurrent_ou(1.0);
  auto cfg = base_config(m, make_offspring({{2, 1.0}}), 1.0, 1.0, 42);
  cfg.step_dt = 0.01;
  cfg.t_end = 2.0;
  cfg.snapshot_times = {2.0};
  const auto red = engine::run_replicas(
      cfg, 10000,
      [&](const engine::Trajectory& tr) -> std::vector<double> {
        const double d =
            analysis::malthusian_d(tr.snapshots.back(), m.eigen, 1.0, 1.0, 2.0);
        return {d * d};
      });
  const double target =
      analysis::d_second_moment_analytic(m, 1.0, 1.0, 2.0, 4.0, 2.0);
  INFO("replica ", red.merged[0].mean, " identity ", target);
  CHECK(std::abs(red.merged[0].mean - target) < 4.0 * red.merged[0].se);
}

TEST_CASE("martingale property of D across models") {
  struct Case {
    MotionModel motion;
    double x0;
    double r;
    double step_dt;
  };
  std::vector<Case> cases;
  cases.push_back({killed_drifted_bm(1.0), 1.0, 1.5, 0.05});
  cases.push_back({subcritical_gw({{-1, 0.75}, {1, 0.25}}), 5.0, 1.0, 1.0});
  cases.push_back({single_state(), 0.0, 1.0, 1.0});
  const auto law = make_offspring({{0, 0.25}, {2, 0.75}});
  for (std::size_t ci = 0; ci < cases.size(); ++ci) {
    auto cfg = base_config(cases[ci].motion, law, cases[ci].r, cases[ci].x0,
                           500 + ci);
    cfg.step_dt = cases[ci].step_dt;
    cfg.t_end = 2.0;
    cfg.snapshot_times = {1.0, 2.0};
    const auto red = engine::run_replicas(
        cfg, 8000,
        [&](const engine::Trajectory& tr) -> std::vector<double> {
          const double d1 = analysis::malthusian_d(
              tr.snapshots[0], cases[ci].motion.eigen, cases[ci].x0,
              cases[ci].r, law.m1);
          const double d2 = analysis::malthusian_d(
              tr.snapshots[1], cases[ci].motion.eigen, cases[ci].x0,
              cases[ci].r, law.m1);
          return {d1, d2, d2 - d1};
        });
    INFO(cases[ci].motion.name);
    CHECK(std::abs(red.merged[0].mean - 1.0) < 4.0 * red.merged[0].se);
    CHECK(std::abs(red.merged[1].mean - 1.0) < 4.0 * red.merged[1].se);
    // martingale increments center on zero
    CHECK(std::abs(red.merged[2].mean) < 4.0 * red.merged[2].se);
  }
}

TEST_CASE("w statistic and empirical ratio") {
  engine::Population pop;
  pop.time = 1.0;
  pop.particles.emplace_back(ParticleId{}, ParticleState::live(0.5));
  pop.particles.emplace_back(ParticleId{}.child(0), ParticleState::live(1.5));
  pop.particles.emplace_back(ParticleId{}.child(1), ParticleState::live(2.5));
  const Interval lo{0.0, 1.0}, hi{1.0, 3.0}, empty{5.0, 6.0};
  CHECK(analysis::w_statistic(pop, lo, 4.0) == doctest::Approx(0.25));
  CHECK_THROWS_AS(analysis::w_statistic(pop, lo, 0.0), InvalidParameter);
  CHECK(analysis::empirical_ratio(pop, lo, hi) == doctest::Approx(0.5));
  CHECK(analysis::empirical_ratio(pop, hi, hi) == doctest::Approx(1.0));
  CHECK(analysis::empirical_ratio(pop, empty, hi) == doctest::Approx(0.0));
  CHECK_THROWS_AS(analysis::empirical_ratio(pop, lo, empty), EmptyDenominator);
}

TEST_CASE("qsd of the single state motion is a point mass") {
  const auto m = single_state();
  auto cfg = base_config(m, make_offspring({{2, 1.0}}), 1.0, 0.0, 77);
  const auto rep = analysis::qsd_sample(cfg, 3.0, 200,
                                        analysis::QsdCondition::Survival);
  CHECK(rep.has_ks);
  CHECK(rep.ks_distance == doctest::Approx(0.0));
  CHECK(rep.pooled_samples > 1000);
  double total = 0.0;
  for (double h : rep.histogram) total += h;
  CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("qsd no survivors") {
  const auto m = killed_drifted_bm(1.0);
  auto cfg = base_config(m, make_offspring({{2, 1.0}}), 1.5, 0.05, 78);
  cfg.step_dt = 0.01;
  // from x = 0.05 everything is absorbed essentially immediately
  CHECK_THROWS_AS(
      analysis::qsd_sample(cfg, 12.0, 30, analysis::QsdCondition::Survival),
      NoSurvivors);
}

TEST_CASE("extinction probability of the quarter-three-quarters law") {
  // eta solves q = 1/4 + 3/4 q^2: smallest root 1/3; closed form
  // q(t) = (e^{t/2}-1)/(3 e^{t/2}-1)
  const auto m = single_state();
  auto cfg = base_config(m, make_offspring({{0, 0.25}, {2, 0.75}}), 1.0, 0.0, 79);
  double late = 0.0;
  const auto eta = analysis::eta_mc(cfg, 15.0, 6000, 1, &late);
  CHECK(std::abs(eta.mean - 1.0 / 3.0) < 0.02);
  CHECK(late < 0.01);  // saturated well before T
  // monotonicity in T by construction
  const auto eta_short = analysis::eta_mc(cfg, 1.0, 6000);
  const double q1 = (std::exp(0.5) - 1.0) / (3.0 * std::exp(0.5) - 1.0);
  CHECK(std::abs(eta_short.mean - q1) < 4.0 * std::max(eta_short.se, 1e-3));
  CHECK(eta_short.mean < eta.mean);
}

TEST_CASE("sigma with huge eps counts everything") {
  const auto m = single_state();
  auto cfg = base_config(m, make_offspring({{2, 1.0}}), 1.0, 0.0, 80);
  const auto sig = analysis::sigma_mc(cfg, 2.0, 1e9, 500);
  CHECK(sig.mean == doctest::Approx(1.0));
  CHECK_THROWS_AS(analysis::sigma_mc(cfg, 2.0, 0.0, 10), InvalidParameter);
}

TEST_CASE("g apply fixed point at one and extinction at zero") {
  const auto m = single_state();
  auto cfg = base_config(m, make_offspring({{0, 0.25}, {2, 0.75}}), 1.0, 0.0, 81);
  const auto at_one =
      analysis::g_apply([](double) { return 1.0; }, 0.0, cfg, 2000);
  CHECK(at_one.mean == doctest::Approx(1.0));  // G(1) = 1 exactly
  CHECK(at_one.se == doctest::Approx(0.0));

  // G(0)(x) = P(no live particles at t=1) = q(1)
  const auto at_zero =
      analysis::g_apply([](double) { return 0.0; }, 0.0, cfg, 20000);
  const double q1 = (std::exp(0.5) - 1.0) / (3.0 * std::exp(0.5) - 1.0);
  CHECK(std::abs(at_zero.mean - q1) < 4.0 * at_zero.se);

  CHECK_THROWS_AS(
      analysis::g_apply([](double) { return 1.5; }, 0.0, cfg, 50).mean,
      InvalidParameter);
}

TEST_CASE("g is monotone under common random numbers") {
  const auto m = subcritical_gw({{-1, 0.75}, {1, 0.25}});
  auto cfg = base_config(m, make_offspring({{0, 0.25}, {2, 0.75}}), 1.0, 3.0, 82);
  cfg.step_dt = 1.0;
  auto g1 = [](double x) { return std::exp(-0.5 * x); };
  auto g2 = [](double x) { return std::exp(-0.1 * x); };  // g1 <= g2
  const auto a = analysis::g_apply(g1, 3.0, cfg, 4000);
  const auto b = analysis::g_apply(g2, 3.0, cfg, 4000);
  CHECK(a.mean <= b.mean + 1e-12);  // same seeds couple the two evaluations
}

TEST_CASE("g iterate on the scalar single-state model") {
  const auto m = single_state();
  auto cfg = base_config(m, make_offspring({{0, 0.25}, {2, 0.75}}), 1.0, 0.0, 83);
  const auto iterates = analysis::g_iterate({0.0}, cfg, 14, 20000);
  REQUIRE(iterates.size() == 15);  // initial zeros plus 14 sweeps
  CHECK(iterates.front()[0] == 0.0);
  CHECK(std::abs(iterates.back()[0] - 1.0 / 3.0) < 0.02);
  // monotone nondecreasing up to noise
  for (std::size_t k = 1; k < iterates.size(); ++k)
    CHECK(iterates[k][0] >= iterates[k - 1][0] - 0.02);
}

TEST_CASE("local survival trivial case equals survival") {
  const auto m = single_state();
  auto cfg = base_config(m, make_offspring({{0, 0.25}, {2, 0.75}}), 1.0, 0.0, 84);
  const auto full =
      analysis::local_survival_mc(cfg, Interval{-10.0, 10.0}, 10.0, 4000);
  double late = 0.0;
  const auto eta = analysis::eta_mc(cfg, 10.0, 4000, 1, &late);
  // same replicas: K = full space means survival
  CHECK(full.mean == doctest::Approx(1.0 - eta.mean));
}
