#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "difflab/vkernel.hpp"

using namespace difflab;

namespace {
Vec x1(double v) { return Vec::Constant(1, v); }
const TimeDist kTd{0.3, 1.5};
}  // namespace

TEST_CASE("white-noise amplitude of the interleaved estimator") {
  const auto sched = ForwardSchedule::edm(1, 1.5, 0.05);
  const MixtureData two = MixtureData::points_1d({-1.0, 1.0});
  const MixtureData one = MixtureData::points_1d({0.2});
  CHECK(vkernel_naive(two, sched, 0.0, x1(0.3), 0.8).norm() == 0.0);
  CHECK(vkernel_naive(one, sched, 2.0, x1(0.3), 0.8).norm() == 0.0);
  // D_t = t = 1, C(0, 1) = 1 for the symmetric pair at the midpoint
  CHECK(vkernel_naive(two, sched, 1.0, x1(0.0), 1.0)(0, 0) ==
        doctest::Approx(1.0).epsilon(1e-12));
  // oracle composing the schedule coefficients and the proxy covariance
  const ScheduleCoeffs c = sched.coeffs(0.62);
  const Mat cov = two.proxy_cov(sched, x1(0.41), 0.62);
  CHECK(vkernel_naive(two, sched, 0.7, x1(0.41), 0.62)(0, 0) ==
        doctest::Approx(0.7 * c.diff_diag(0) * cov(0, 0) * c.diff_diag(0)).epsilon(1e-13));
  CHECK_THROWS_AS(vkernel_naive(two, sched, -0.1, x1(0.0), 1.0), std::invalid_argument);
}

TEST_CASE("linear V-kernel: zero cases, symmetry, PSD, kappa scaling") {
  const auto sched = ForwardSchedule::edm(1, 1.5, 0.05);
  const MixtureData three = MixtureData::points_1d({-1.0, 0.0, 1.0});
  const MixtureData one = MixtureData::points_1d({0.2});
  auto feats = std::make_shared<FeatureSet>(FeatureSet::gaussian_grid(
      FeatureSet::centers_1d(-1.6, 1.6, 8), 0.5, {}, 1.0));
  Rng r1(3), r2(3), r3(3);
  const LinearVKernel vk(feats, three, sched, 0.5, 3000, kTd, unit_weight(), r1);
  const LinearVKernel vk2(feats, three, sched, 1.0, 3000, kTd, unit_weight(), r2);
  const LinearVKernel vkz(feats, three, sched, 0.0, 3000, kTd, unit_weight(), r3);
  Rng r4(3);
  const LinearVKernel vk_single(feats, one, sched, 0.5, 2000, kTd, unit_weight(), r4);

  std::vector<Probe> probes = {{x1(-0.5), 0.5}, {x1(0.4), 0.8}, {x1(0.0), 1.2}};
  Mat stacked(3, 3);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      const VKernelValue vij = vk.eval(probes[i].x, probes[i].t, probes[j].x, probes[j].t);
      const VKernelValue vji = vk.eval(probes[j].x, probes[j].t, probes[i].x, probes[i].t);
      CHECK(vij.value(0, 0) == doctest::Approx(vji.value(0, 0)).epsilon(1e-12));
      CHECK(vk2.eval(probes[i].x, probes[i].t, probes[j].x, probes[j].t).value(0, 0) ==
            2.0 * vij.value(0, 0));
      CHECK(vkz.eval(probes[i].x, probes[i].t, probes[j].x, probes[j].t).value(0, 0) == 0.0);
      CHECK(vk_single.eval(probes[i].x, probes[i].t, probes[j].x, probes[j].t).value(0, 0) ==
            0.0);
      CHECK(vij.se(0, 0) >= 0.0);
      stacked(i, j) = vij.value(0, 0);
    }
  Eigen::SelfAdjointEigenSolver<Mat> es(stacked);
  CHECK(es.eigenvalues().minCoeff() >= -1e-8 * std::abs(es.eigenvalues().maxCoeff()));
}

TEST_CASE("ill-conditioned feature covariance raises with the condition number") {
  const auto sched = ForwardSchedule::edm(1, 1.5, 0.05);
  const MixtureData three = MixtureData::points_1d({-1.0, 0.0, 1.0});
  // two nearly identical features
  auto degenerate = std::make_shared<FeatureSet>(
      FeatureSet::custom(2, 1, [](const Vec& x, double, Vec& out) {
        out(0) = x(0);
        out(1) = x(0) * (1.0 + 1e-15);
      }));
  Rng rng(5);
  CHECK_THROWS_WITH_AS(
      LinearVKernel(degenerate, three, sched, 0.5, 500, kTd, unit_weight(), rng),
      doctest::Contains("cond"), numeric_error);
}

TEST_CASE("ntk V-kernel limits") {
  const auto sched = ForwardSchedule::edm(1, 1.5, 0.05);
  const MixtureData three = MixtureData::points_1d({-1.0, 0.0, 1.0});
  auto dict = std::make_shared<FeatureSet>(FeatureSet::gaussian_grid(
      FeatureSet::centers_1d(-1.4, 1.4, 4), 0.8, {}, 1.0));
  Rng r1(7);
  const NtkVKernel at_zero(dict, three, sched, 0.5, 0.0, 2000, kTd, unit_weight(), r1);
  CHECK(at_zero.eval(x1(0.2), 0.6, x1(-0.4), 1.1).value.norm() == 0.0);

  Rng r2(7);
  const NtkVKernel finite(dict, three, sched, 0.5, 2.0, 2000, kTd, unit_weight(), r2);
  const WhiteLimit wl = finite.infinite_tau(0.37);
  const Mat amp = wl.amplitude(three, sched, x1(0.0), 1.0);
  CHECK(amp(0, 0) ==
        doctest::Approx(vkernel_naive(three, sched, 0.37, x1(0.0), 1.0)(0, 0)));
  CHECK(finite.basis_count() == dict->count());
  CHECK(finite.spectrum().minCoeff() > 0.0);
}

TEST_CASE("ensemble covariance: exact scores have none, interleaved match kappa/dt C") {
  const auto sched = ForwardSchedule::edm(1, 1.5, 0.05);
  const auto three = std::make_shared<MixtureData>(MixtureData::points_1d({-1.0, 0.0, 1.0}));
  std::vector<Probe> probes = {{x1(0.45), 0.7}, {x1(-0.5), 1.0}};

  const ModelFactory exact = [&](int, Rng&) { return true_score_field(*three, sched); };
  const EnsembleCovResult zero = ensemble_cov(exact, 50, probes, 11, 2);
  CHECK(zero.cov.norm() < 1e-25);  // identical outputs up to mean rounding

  const double kappa = 0.8, dt = 0.02;
  const EnsembleCovResult naive = ensemble_cov(
      naive_ensemble_factory(three, sched, kappa, dt), 10000, probes, 13, 2);
  for (int a = 0; a < 2; ++a) {
    const Mat expected = kappa / dt * three->proxy_cov(sched, probes[a].x, probes[a].t);
    CHECK(naive.block(a, a)(0, 0) == doctest::Approx(expected(0, 0)).epsilon(0.10));
  }
  // distinct probes use independent draws: cross block is statistically zero
  CHECK(std::abs(naive.block(0, 1)(0, 0)) <
        0.05 * std::sqrt(naive.block(0, 0)(0, 0) * naive.block(1, 1)(0, 0)));
}

TEST_CASE("linear ensemble mean matches the x0-averaged closed form") {
  const auto sched = ForwardSchedule::edm(1, 1.5, 0.05);
  const auto three = std::make_shared<MixtureData>(MixtureData::points_1d({-1.0, 0.0, 1.0}));
  auto feats = std::make_shared<FeatureSet>(FeatureSet::gaussian_grid(
      FeatureSet::centers_1d(-1.6, 1.6, 6), 0.55, {}, 1.0));
  Rng rng(17);
  auto base = std::make_shared<const std::vector<TrainingSample>>(
      draw_training_set(*three, sched, 40, kTd, unit_weight(), rng));

  std::vector<TrainingSample> averaged = *base;
  for (TrainingSample& s : averaged) s.target = three->true_score(sched, s.x, s.t);
  const FittedLinearModel star = fit_linear(feats, averaged);

  std::vector<Probe> probes = {{x1(0.3), 0.6}, {x1(-0.8), 1.1}, {x1(0.05), 0.45}};
  const EnsembleCovResult r = ensemble_cov(
      linear_ensemble_factory(feats, three, sched, base), 400, probes, 19, 2);
  for (int a = 0; a < 3; ++a) {
    const double se = std::sqrt(r.block(a, a)(0, 0) / r.n_models);
    CHECK(std::abs(r.mean_at(a)(0) - star.predict(probes[a].x, probes[a].t)(0)) <
          4.0 * se);
  }
}

TEST_CASE("linear V-kernel matches the ensemble covariance") {
  const auto sched = ForwardSchedule::edm(1, 1.5, 0.05);
  const auto three = std::make_shared<MixtureData>(MixtureData::points_1d({-1.0, 0.0, 1.0}));
  auto feats = std::make_shared<FeatureSet>(FeatureSet::gaussian_grid(
      FeatureSet::centers_1d(-2.0, 2.0, 8), 0.55, {}, 1.0));
  const int sample_count = 400;
  const double kappa = feats->count() / static_cast<double>(sample_count);
  Rng rng(23);
  auto base = std::make_shared<const std::vector<TrainingSample>>(
      draw_training_set(*three, sched, sample_count, kTd, unit_weight(), rng));
  Rng nodes_rng(29);
  const LinearVKernel vk(feats, *three, sched, kappa, 20000, kTd, unit_weight(), nodes_rng);

  std::vector<Probe> probes = {{x1(0.5), 0.6}, {x1(-0.5), 1.0}};
  const EnsembleCovResult r = ensemble_cov(
      linear_ensemble_factory(feats, three, sched, base), 1200, probes, 31, 2);
  for (int a = 0; a < 2; ++a)
    for (int b = 0; b < 2; ++b) {
      const double emp = r.vkernel_block(sched, a, b)(0, 0);
      const double cf = vk.eval(probes[a].x, probes[a].t, probes[b].x, probes[b].t).value(0, 0);
      CHECK(emp == doctest::Approx(cf).epsilon(0.2));
    }
}

TEST_CASE("ensemble covariance argument validation") {
  const auto sched = ForwardSchedule::edm(1, 1.0, 1e-2);
  const auto one = std::make_shared<MixtureData>(MixtureData::points_1d({0.0}));
  const ModelFactory exact = [&](int, Rng&) { return true_score_field(*one, sched); };
  CHECK_THROWS_AS(ensemble_cov(exact, 1, {{x1(0.0), 0.5}}, 3), std::invalid_argument);
  CHECK_THROWS_AS(ensemble_cov(exact, 5, {}, 3), std::invalid_argument);
}
