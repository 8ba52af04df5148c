#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "difflab/numerics.hpp"
#include "difflab/rng.hpp"
#include "difflab/schedule.hpp"

using namespace difflab;

TEST_CASE("edm coefficients match the closed forms") {
  const auto sched = ForwardSchedule::edm(1, 1.0, 1e-3);
  const ScheduleCoeffs c = sched.coeffs(0.5);
  CHECK(c.alpha == 1.0);
  CHECK(c.beta == 0.0);
  CHECK(std::sqrt(c.var_diag(0)) == doctest::Approx(0.5).epsilon(1e-14));
  CHECK(c.diff_diag(0) == doctest::Approx(0.5).epsilon(1e-14));
}

TEST_CASE("vp-sde approaches the noise-free limit at small t") {
  const auto sched = ForwardSchedule::vp_sde(1, 0.1, 19.9, 1.0, 1e-13);
  const ScheduleCoeffs c = sched.coeffs(1e-12);
  CHECK(c.alpha == doctest::Approx(1.0).epsilon(1e-10));
  CHECK(std::sqrt(c.var_diag(0)) < 1e-5);
}

TEST_CASE("vp-sde integral at t = 1 against a quadrature oracle") {
  const double beta_min = 0.1, beta_d = 19.9;
  const auto sched = ForwardSchedule::vp_sde(1, beta_min, beta_d);
  // independent numeric quadrature of int_0^1 beta dt
  const double integral = adaptive_simpson(
      [&](double t) { return beta_min + beta_d * t; }, 0.0, 1.0, 1e-12);
  CHECK(integral == doctest::Approx(10.05).epsilon(1e-12));
  CHECK(sched.coeffs(1.0).alpha == doctest::Approx(std::exp(-integral)).epsilon(1e-12));
  CHECK(sched.coeffs(1.0).alpha == doctest::Approx(4.32e-5).epsilon(1e-2));
}

TEST_CASE("vp-sde satisfies alpha^2 + sigma^2 = 1 on a fine grid") {
  const auto sched = ForwardSchedule::vp_sde(1);
  for (int i = 0; i < 100; ++i) {
    const double t = sched.cutoff() + (sched.end_time() - sched.cutoff()) * i / 99.0;
    const ScheduleCoeffs c = sched.coeffs(t);
    CHECK(std::abs(c.alpha * c.alpha + c.var_diag(0) - 1.0) < 1e-12);
  }
}

TEST_CASE("transition sampling is the identity in the zero-variance limit") {
  const auto sched = ForwardSchedule::edm(2, 1.0, 1e-10);
  Rng rng(3);
  const Vec x0 = (Vec(2) << 0.7, -0.2).finished();
  const Vec x = sched.transition_sample(x0, 1e-9, rng);
  CHECK((x - x0).norm() < 1e-8);
}

TEST_CASE("transition sample moments, EDM t = 1") {
  const auto sched = ForwardSchedule::edm(2, 1.0, 1e-3);
  Rng rng(11);
  const Vec x0 = (Vec(2) << 1.0, 1.0).finished();
  Vec mean = Vec::Zero(2), sq = Vec::Zero(2);
  const int n = 100000;
  for (int i = 0; i < n; ++i) {
    const Vec x = sched.transition_sample(x0, 1.0, rng);
    mean += x;
    sq += x.cwiseProduct(x);
  }
  mean /= n;
  const Vec var = sq / n - mean.cwiseProduct(mean);
  CHECK((mean - x0).cwiseAbs().maxCoeff() < 0.02);
  CHECK(std::abs(var(0) - 1.0) < 0.03);
  CHECK(std::abs(var(1) - 1.0) < 0.03);
}

TEST_CASE("vp-sde transition variance at t = 1") {
  const auto sched = ForwardSchedule::vp_sde(1);
  Rng rng(13);
  const Vec x0 = Vec::Zero(1);
  double sq = 0.0;
  const int n = 100000;
  for (int i = 0; i < n; ++i) sq += std::pow(sched.transition_sample(x0, 1.0, rng)(0), 2);
  const double expected = 1.0 - std::exp(-20.1);
  CHECK(sq / n == doctest::Approx(expected).epsilon(0.03));
}

TEST_CASE("marginal variance grows and diffusion stays nonnegative") {
  const Vec aniso = (Vec(2) << 1.0, 0.35).finished();
  const std::vector<ForwardSchedule> scheds = {
      ForwardSchedule::vp_sde(1), ForwardSchedule::edm(1, 2.0, 1e-3),
      ForwardSchedule::custom([](double t) { return 0.5 * t; },
                              [aniso](double t) { return Vec(aniso * std::sqrt(2.0 * t)); },
                              2, 1.0, 1e-3)};
  for (const auto& sched : scheds) {
    Vec prev = sched.coeffs(sched.cutoff()).var_diag;
    for (int i = 1; i <= 25; ++i) {
      const double t = sched.cutoff() + (sched.end_time() - sched.cutoff()) * i / 25.0;
      const ScheduleCoeffs c = sched.coeffs(t);
      CHECK((c.var_diag - prev).minCoeff() > 0.0);
      CHECK(c.diff_diag.minCoeff() >= 0.0);
      prev = c.var_diag;
    }
  }
}

TEST_CASE("custom-diagonal quadrature reproduces the analytic schedules") {
  const auto edm_ref = ForwardSchedule::edm(1, 1.5, 1e-3);
  const auto edm_quad = ForwardSchedule::custom(
      [](double) { return 0.0; },
      [](double t) { return Vec::Constant(1, std::sqrt(2.0 * t)); }, 1, 1.5, 1e-3);
  const auto vp_ref = ForwardSchedule::vp_sde(1);
  const auto vp_quad = ForwardSchedule::custom(
      [](double t) { return 0.1 + 19.9 * t; },
      [](double t) { return Vec::Constant(1, std::sqrt(2.0 * (0.1 + 19.9 * t))); }, 1,
      1.0, 1e-3);
  for (int i = 0; i <= 10; ++i) {
    const double te = 1e-3 + (1.5 - 1e-3) * i / 10.0;
    CHECK(edm_quad.coeffs(te).var_diag(0) ==
          doctest::Approx(edm_ref.coeffs(te).var_diag(0)).epsilon(1e-8));
    const double tv = 1e-3 + (1.0 - 1e-3) * i / 10.0;
    CHECK(vp_quad.coeffs(tv).var_diag(0) ==
          doctest::Approx(vp_ref.coeffs(tv).var_diag(0)).epsilon(1e-8));
  }
}

TEST_CASE("time range and construction are validated") {
  const auto sched = ForwardSchedule::edm(1, 1.0, 1e-2);
  CHECK_THROWS_AS(sched.coeffs(5e-3), std::out_of_range);
  CHECK_THROWS_AS(sched.coeffs(1.5), std::out_of_range);
  CHECK_THROWS_AS(ForwardSchedule::edm(0, 1.0, 1e-3), std::invalid_argument);
  CHECK_THROWS_AS(ForwardSchedule::edm(1, 1.0, 2.0), std::invalid_argument);
  CHECK_THROWS_AS(ForwardSchedule::edm(1, 1.0, 0.0), std::invalid_argument);
}

TEST_CASE("anisotropic schedules refuse isotropic-only operations") {
  const Vec aniso = (Vec(2) << 1.0, 0.5).finished();
  const auto sched = ForwardSchedule::custom(
      [](double) { return 0.0; },
      [aniso](double t) { return Vec(aniso * std::sqrt(2.0 * t)); }, 2, 1.0, 1e-3);
  CHECK(!sched.is_isotropic());
  CHECK_THROWS_AS(sched.sigma(0.5), std::invalid_argument);
  CHECK(ForwardSchedule::edm(3, 1.0, 1e-3).is_isotropic());
}
