#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "branch_lln/engine.hpp"
#include "branch_lln/spine.hpp"
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

}  // namespace

TEST_CASE("many_to_one trivial and closed-form cases") {
  const auto m = single_state();
  const Interval full{-1.0, 1.0};
  // t = 0, x in B
  const auto at0 = spine::many_to_one(m, 0.0, full, 0.0, 1.0, 2.0, 10, 1.0, 1);
  CHECK(at0.mean == doctest::Approx(1.0));
  // P == 1, growth e^{r(m1-1)t} = e^2
  const auto grown = spine::many_to_one(m, 0.0, full, 2.0, 1.0, 2.0, 2000, 1.0, 2);
  CHECK(grown.mean == doctest::Approx(std::exp(2.0)).epsilon(1e-12));
}

TEST_CASE("many_to_one uses quadrature when a density exists") {
  const auto m = killed_drifted_bm(1.0);
  const auto est = spine::many_to_one(m, 1.0, Interval{0.0, 30.0}, 1.0, 1.5,
                                      2.0, 10, 0.1, 3);
  CHECK(est.analytic);
  CHECK(est.se == 0.0);
  // e^{1.5} * P_1(tau > 1)
  CHECK(est.mean ==
        doctest::Approx(std::exp(1.5) * 0.331897998776829).epsilon(1e-7));
}

TEST_CASE("two spine yule closed form") {
  // E|xi_1|^2 = 2 e^2 - e for binary offspring at rate 1
  const auto m = single_state();
  const auto law = make_offspring({{2, 1.0}});
  const auto est = spine::two_spine_second_moment(
      m, 0.0, Interval{-1.0, 1.0}, 1.0, 1.0, law, 100000, 1.0, 4);
  const double target = 2.0 * std::exp(2.0) - M_E;
  CHECK(target == doctest::Approx(12.059830369402254));
  CHECK(std::abs(est.mean - target) < 4.0 * est.se);
  // t = 0: indicator of x in B
  const auto at0 = spine::two_spine_second_moment(
      m, 0.0, Interval{-1.0, 1.0}, 0.0, 1.0, law, 100, 1.0, 5);
  CHECK(at0.mean == doctest::Approx(1.0));
}

TEST_CASE("two spine weights and split times are valid") {
  const auto m = killed_drifted_bm(1.0);
  const auto law = make_offspring({{0, 0.25}, {2, 0.75}});
  for (std::uint64_t i = 0; i < 2000; ++i) {
    const auto sp = spine::draw_two_spine(m, 1.0, 2.0, 1.3, law, 0.1,
                                          fold_key(root_key(6), i));
    CHECK(sp.weight >= 1.0);
    CHECK(sp.split_time >= 0.0);
    CHECK(sp.split_time <= 2.0);
    if (sp.split_time == 2.0) {
      // no split: the pair coincides
      CHECK(sp.x1.tag == sp.x2.tag);
      if (sp.x1.is_live()) CHECK(sp.x1.value == sp.x2.value);
    }
  }
}

TEST_CASE("two spine marginals match the plain motion") {
  const auto m = transient_ou(0.5, 1.0);
  const auto law = make_offspring({{0, 0.25}, {2, 0.75}});
  std::vector<double> spine1, spine2, plain;
  RandomStream rs(root_key(7));
  for (std::uint64_t i = 0; i < 30000; ++i) {
    const auto sp = spine::draw_two_spine(m, 0.7, 1.5, 1.0, law, 1.0,
                                          fold_key(root_key(8), i));
    spine1.push_back(sp.x1.value);
    spine2.push_back(sp.x2.value);
    plain.push_back(
        spine::evolve(m, ParticleState::live(0.7), 1.5, 1.0, rs).value);
  }
  CHECK(stats::ks_two_sample_pvalue(spine1, plain) > 0.001);
  CHECK(stats::ks_two_sample_pvalue(spine2, plain) > 0.001);
}

TEST_CASE("two spine marginal survival for killed motion") {
  const auto m = killed_drifted_bm(1.0);
  const auto law = make_offspring({{2, 1.0}});
  int alive_spine = 0, alive_plain = 0;
  RandomStream rs(root_key(9));
  const int n = 40000;
  for (int i = 0; i < n; ++i) {
    const auto sp = spine::draw_two_spine(m, 1.0, 1.0, 1.0, law, 0.05,
                                          fold_key(root_key(10), i));
    if (sp.x1.is_live()) ++alive_spine;
    if (spine::evolve(m, ParticleState::live(1.0), 1.0, 0.05, rs).is_live())
      ++alive_plain;
  }
  const double p1 = double(alive_spine) / n, p2 = double(alive_plain) / n;
  const double se = std::sqrt((p1 * (1 - p1) + p2 * (1 - p2)) / n);
  CHECK(std::abs(p1 - p2) < 4.0 * se);
}

TEST_CASE("h transform expectation is a mean-one martingale") {
  // (A1)(ii): E~(1) = E(M_t) = 1 for every model
  struct Case {
    MotionModel motion;
    double x0;
    double step_dt;
  };
  std::vector<Case> cases;
  cases.push_back({killed_drifted_bm(1.0), 1.0, 0.05});
  cases.push_back({killed_recurrent_ou(1.0), 1.0, 0.005});
  cases.push_back({transient_ou(0.5, 1.0), 0.5, 0.5});
  cases.push_back({subcritical_gw({{-1, 0.75}, {1, 0.25}}), 5.0, 1.0});
  cases.push_back({single_state(), 0.0, 1.0});
  auto one = [](double) { return 1.0; };
  for (std::size_t ci = 0; ci < cases.size(); ++ci) {
    for (double t : {0.5, 1.0, 2.0}) {
      const auto est = spine::h_transform_expectation(
          cases[ci].motion, cases[ci].x0, one, t, 100000, cases[ci].step_dt,
          700 + ci);
      INFO(cases[ci].motion.name, " t=", t, " mean=", est.mean);
      CHECK(std::abs(est.mean - 1.0) < 4.0 * std::max(est.se, 1e-12));
    }
  }
}

TEST_CASE("h transform at t zero is exact") {
  const auto m = killed_drifted_bm(1.0);
  const auto est = spine::h_transform_expectation(
      m, 2.0, [](double x) { return x * x; }, 0.0, 10, 0.1, 11);
  CHECK(est.mean == doctest::Approx(4.0));
  CHECK(est.analytic);
  CHECK_THROWS_AS(spine::h_transform_expectation(m, 0.0, [](double) { return 1.0; },
                                                 1.0, 10, 0.1, 12),
                  ZeroEigenfunction);
}

TEST_CASE("m second moment values") {
  const auto chain = single_state();
  CHECK(spine::m_second_moment(chain, 0.0, 0.0, 10, 1.0, 13).mean ==
        doctest::Approx(1.0));
  CHECK(spine::m_second_moment(chain, 0.0, 3.0, 10, 1.0, 14).mean ==
        doctest::Approx(1.0));  // h = 1, lambda = 0

  const auto bm = killed_drifted_bm(1.0);
  const auto est = spine::m_second_moment(bm, 1.0, 1.0, 10, 0.05, 15);
  CHECK(est.analytic);
  CHECK(est.mean == doctest::Approx(13.391788).epsilon(1e-4));

  // killed OU: analytic (image density) against a pure Monte Carlo route
  const auto ou = killed_recurrent_ou(1.0);
  CHECK(ou.m2_analytic(1.0, 1.0) ==
        doctest::Approx(2.998683089647318).epsilon(1e-6));
  const auto curve =
      spine::m_second_moment_curve(ou, 1.0, {0.5, 1.0}, 200000, 0.002, 16);
  CHECK(std::abs(curve[1].mean - 2.998683089647318) <
        4.0 * curve[1].se + 0.02);
}

TEST_CASE("s_b curve on the ergodic chain is P - nu") {
  Eigen::MatrixXd q(2, 2);
  q << -1, 1, 2, -2;
  Eigen::VectorXd pi(2);
  pi << 2.0 / 3.0, 1.0 / 3.0;
  const auto m = ergodic_ctmc(q, pi);
  const Interval b{-0.5, 0.5};  // state 0
  const auto curve = spine::s_b_curve(m, 0.0, b, {0.5, 10.0}, 200000, 1.0, 17);
  // h = 1, p = 1: s_B(x, t) = P_x(X_t in B) - nu(B); at large t it vanishes
  CHECK(std::abs(curve[1].estimate) < 4.0 * curve[1].se);
  CHECK(curve[0].estimate > 0.05);  // still biased toward the start state
}

TEST_CASE("s_b curve for killed bm decays toward zero") {
  const auto m = killed_drifted_bm(1.0);
  const Interval b{0.0, 2.0};
  const auto curve =
      spine::s_b_curve(m, 1.0, b, {2.0, 8.0}, 2000000, 0.25, 18);
  // frozen quadrature references of s_B(1, t)
  CHECK(std::abs(curve[0].estimate - (-0.24276)) < 4.0 * curve[0].se + 1e-3);
  CHECK(std::abs(curve[1].estimate - (-0.08105)) < 4.0 * curve[1].se + 1e-3);
  const double comb =
      std::sqrt(curve[0].se * curve[0].se + curve[1].se * curve[1].se);
  CHECK(std::abs(curve[0].estimate) - std::abs(curve[1].estimate) >
        3.0 * comb);
}

TEST_CASE("s_b needs nu mass") {
  const auto gw = subcritical_gw({{-1, 0.75}, {1, 0.25}});
  CHECK_THROWS_AS(
      spine::s_b_curve(gw, 3.0, Interval{1.0, 4.0}, {1.0}, 100, 1.0, 19),
      MissingNuMass);
}

TEST_CASE("two spine agrees with engine second moment on killed bm") {
  const auto m = killed_drifted_bm(1.0);
  const auto law = make_offspring({{2, 1.0}});
  const Interval b{0.0, 2.0};
  const double t = 1.0, r = 1.5;

  BranchConfig cfg;
  cfg.motion = &m;
  cfg.offspring = law;
  cfg.r = r;
  cfg.x0 = ParticleState::live(1.0);
  cfg.t_end = t;
  cfg.snapshot_times = {t};
  cfg.step_dt = 0.05;
  cfg.seed = 20;
  const auto red = engine::run_replicas(
      cfg, 20000,
      [&](const engine::Trajectory& tr) -> std::vector<double> {
        const double cb = double(tr.snapshots.back().count_in(b));
        return {cb * cb};
      });
  const auto spine2 = spine::two_spine_second_moment(m, 1.0, b, t, r, law,
                                                     100000, 0.05, 21);
  const double comb =
      std::sqrt(red.merged[0].se * red.merged[0].se + spine2.se * spine2.se);
  INFO("engine ", red.merged[0].mean, " spine ", spine2.mean);
  CHECK(std::abs(red.merged[0].mean - spine2.mean) < 4.0 * comb);
}
