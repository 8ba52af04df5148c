#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "difflab/mixture.hpp"

using namespace difflab;

namespace {
const ForwardSchedule kEdm = ForwardSchedule::edm(1, 2.0, 1e-3);
Vec x1(double v) { return Vec::Constant(1, v); }
}  // namespace

TEST_CASE("posterior weights: symmetry and single component") {
  const MixtureData two = MixtureData::points_1d({-1.0, 1.0});
  const PosteriorWeights sym = two.posterior(kEdm, x1(0.0), 0.7);
  CHECK(sym.w(0) == doctest::Approx(0.5).epsilon(1e-14));
  CHECK(sym.w(1) == doctest::Approx(0.5).epsilon(1e-14));
  const MixtureData one = MixtureData::points_1d({0.3});
  CHECK(one.posterior(kEdm, x1(2.0), 0.7).w(0) == 1.0);
}

TEST_CASE("posterior mean matches the tanh closed form at x = 0.5") {
  const MixtureData two = MixtureData::points_1d({-1.0, 1.0});
  const PosteriorWeights post = two.posterior(kEdm, x1(0.5), 1.0);
  // E[x0 | x, t] = mu tanh(alpha mu x / sigma^2); alpha = 1, sigma = 1
  CHECK(post.mean(two.points())(0) == doctest::Approx(std::tanh(0.5)).epsilon(1e-12));
}

TEST_CASE("true score closed forms") {
  const MixtureData one = MixtureData::points_1d({0.0});
  CHECK(one.true_score(kEdm, x1(2.0), 1.0)(0) == doctest::Approx(-2.0).epsilon(1e-14));
  const MixtureData two = MixtureData::points_1d({-1.0, 1.0});
  CHECK(two.true_score(kEdm, x1(0.0), 0.8)(0) == 0.0);
  // direct two-term mixture-sum oracle at x = 0.5, t = 1
  const double num = 1.0 * std::exp(-0.5 * 0.25) * (1.0 - 0.5) +
                     1.0 * std::exp(-0.5 * 2.25) * (-1.0 - 0.5);
  const double den = std::exp(-0.5 * 0.25) + std::exp(-0.5 * 2.25);
  CHECK(two.true_score(kEdm, x1(0.5), 1.0)(0) == doctest::Approx(num / den).epsilon(1e-12));
  CHECK(two.true_score(kEdm, x1(0.5), 1.0)(0) ==
        doctest::Approx(std::tanh(0.5) - 0.5).epsilon(1e-12));
}

TEST_CASE("proxy score is the affine transition-kernel gradient") {
  const auto sched2 = ForwardSchedule::edm(1, 2.5, 1e-3);
  CHECK(proxy_score(sched2, x1(0.7), x1(0.7), 2.0)(0) == 0.0);  // x at the mean, alpha = 1
  CHECK(proxy_score(sched2, x1(0.0), x1(1.0), 2.0)(0) == doctest::Approx(0.25).epsilon(1e-14));
  CHECK(proxy_score(sched2, x1(3.0), x1(0.0), 1.0)(0) == doctest::Approx(-3.0).epsilon(1e-14));
}

TEST_CASE("proxy covariance closed forms") {
  const MixtureData one = MixtureData::points_1d({0.4});
  CHECK(one.proxy_cov(kEdm, x1(1.3), 0.9)(0, 0) == 0.0);
  const MixtureData two = MixtureData::points_1d({-1.0, 1.0});
  CHECK(two.proxy_cov(kEdm, x1(0.0), 1.0)(0, 0) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(two.proxy_cov(kEdm, x1(100.0), 1.0).norm() < 1e-40);
}

TEST_CASE("proxy covariance matches a posterior-draw Monte Carlo oracle") {
  Rng rng(17);
  const MixtureData two = MixtureData::points_1d({-1.0, 1.0});
  Mat pts(3, 2);
  pts << -1.0, 0.0, 1.0, 0.4, 0.2, -0.9;
  const MixtureData gm(pts, 0.2);
  const auto edm2 = ForwardSchedule::edm(2, 2.0, 1e-3);

  const auto check_probe = [&](const MixtureData& dist, const ForwardSchedule& sched,
                               const Vec& x, double t) {
    const Mat closed = dist.proxy_cov(sched, x, t);
    const int n = 40000;
    Vec mean = Vec::Zero(dist.dim());
    Mat m2 = Mat::Zero(dist.dim(), dist.dim());
    for (int i = 0; i < n; ++i) {
      const Vec tgt = proxy_score(sched, x, dist.sample_posterior(sched, x, t, rng), t);
      const Vec delta = tgt - mean;
      mean += delta / (i + 1.0);
      m2 += delta * (tgt - mean).transpose();
    }
    const Mat mc = m2 / (n - 1.0);
    CHECK((mc - closed).norm() / closed.norm() < 0.1);
  };
  check_probe(two, kEdm, x1(0.4), 0.8);
  check_probe(two, kEdm, x1(-0.3), 1.2);
  check_probe(gm, edm2, (Vec(2) << 0.2, -0.2).finished(), 0.9);
}

TEST_CASE("proxy covariance is PSD and preserves shared coordinates") {
  Mat pts(3, 3);
  pts << -1.0, 0.2, 0.7, 1.0, -0.4, 0.7, 0.0, 1.0, 0.7;
  const MixtureData dist(pts);
  const auto edm3 = ForwardSchedule::edm(3, 2.0, 1e-3);
  Rng rng(23);
  for (int i = 0; i < 10; ++i) {
    Vec x(3);
    x << rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(-2, 2);
    const Mat cov = dist.proxy_cov(edm3, x, rng.uniform(0.3, 1.8));
    Eigen::SelfAdjointEigenSolver<Mat> es(cov);
    CHECK(es.eigenvalues().minCoeff() >= -1e-10);
    CHECK(cov.row(2).cwiseAbs().maxCoeff() < 1e-20);
    CHECK(cov.col(2).cwiseAbs().maxCoeff() < 1e-20);
  }
}

TEST_CASE("true score equals the finite-difference gradient of log p") {
  Mat pts(2, 2);
  pts << -0.8, 0.1, 0.9, -0.5;
  const MixtureData dist(pts, 0.1);
  const auto edm2 = ForwardSchedule::edm(2, 2.0, 1e-3);
  Rng rng(29);
  const double h = 1e-5;
  for (int i = 0; i < 10; ++i) {
    Vec x(2);
    x << rng.uniform(-2, 2), rng.uniform(-2, 2);
    const double t = rng.uniform(0.3, 1.8);
    const Vec s = dist.true_score(edm2, x, t);
    for (int k = 0; k < 2; ++k) {
      Vec xp = x, xm = x;
      xp(k) += h;
      xm(k) -= h;
      const double fd =
          (dist.log_marginal(edm2, xp, t) - dist.log_marginal(edm2, xm, t)) / (2 * h);
      CHECK(std::abs(fd - s(k)) < 1e-6);
    }
  }
}

TEST_CASE("log marginal integrates to one") {
  const MixtureData two = MixtureData::points_1d({-1.0, 1.0});
  double mass = 0.0;
  const int n = 4000;
  const double lo = -8.0, hi = 8.0;
  for (int i = 0; i < n; ++i) {
    const double x = lo + (hi - lo) * (i + 0.5) / n;
    mass += (hi - lo) / n * std::exp(two.log_marginal(kEdm, x1(x), 0.8));
  }
  CHECK(mass == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("boundary ratio field") {
  const MixtureData one = MixtureData::points_1d({0.4});
  CHECK(boundary_ratio(one, kEdm, x1(0.4), 0.5) == 0.0);
  CHECK(boundary_ratio(one, kEdm, x1(-1.0), 0.5) == 0.0);
  const MixtureData two = MixtureData::points_1d({-1.0, 1.0});
  CHECK(boundary_ratio(two, kEdm, x1(0.0), 0.7) == doctest::Approx(1.0).epsilon(1e-12));
  // decreasing from the midpoint toward the data points; the sliver exactly
  // at a data point is excluded (the score vanishes there again)
  double prev = boundary_ratio(two, kEdm, x1(0.0), 0.3);
  for (double x = 0.1; x <= 0.95; x += 0.1) {
    const double v = boundary_ratio(two, kEdm, x1(x), 0.3);
    CHECK(v < prev);
    prev = v;
  }
}

TEST_CASE("1-D two-point posterior closed forms") {
  const double mu = 0.8;
  const MixtureData two = MixtureData::points_1d({-mu, mu});
  const MeanVar1d at0 = posterior_mean_var_1d(mu, kEdm, 0.0, 0.9);
  CHECK(at0.mean == 0.0);
  CHECK(at0.var == mu * mu);
  const MeanVar1d far = posterior_mean_var_1d(mu, kEdm, 60.0, 0.5);
  CHECK(far.mean == doctest::Approx(mu).epsilon(1e-12));
  CHECK(far.var == doctest::Approx(0.0));
  // (mu = 1, alpha = 1, sigma = 1, x = 1) -> tanh(1)
  CHECK(posterior_mean_var_1d(1.0, kEdm, 1.0, 1.0).mean ==
        doctest::Approx(std::tanh(1.0)).epsilon(1e-14));
  // agreement with the generic posterior on a probe sweep
  Rng rng(31);
  for (int i = 0; i < 200; ++i) {
    const double x = rng.uniform(-4, 4);
    const double t = rng.uniform(0.05, 1.9);
    const MeanVar1d cf = posterior_mean_var_1d(mu, kEdm, x, t);
    const PosteriorWeights post = two.posterior(kEdm, x1(x), t);
    CHECK(std::abs(cf.mean - post.mean(two.points())(0)) < 1e-12);
    CHECK(std::abs(cf.var - post.cov(two.points())(0, 0)) < 1e-12);
  }
}

TEST_CASE("construction rejects invalid mixtures") {
  CHECK_THROWS_AS(MixtureData{Mat(0, 1)}, std::invalid_argument);
  CHECK_THROWS_AS(MixtureData(Mat::Ones(2, 1), -0.1), std::invalid_argument);
  Mat bad = Mat::Ones(2, 1);
  bad(1, 0) = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(MixtureData{bad}, std::invalid_argument);
  const Vec nonuniform = (Vec(2) << 0.7, 0.3).finished();
  CHECK_THROWS_AS(MixtureData(Mat::Ones(2, 1), 0.0, nonuniform), std::invalid_argument);
  const Vec uniform = (Vec(2) << 0.5, 0.5).finished();
  CHECK_NOTHROW(MixtureData(Mat::Ones(2, 1), 0.0, uniform));
}

TEST_CASE("posterior expectation of the proxy score is the true score") {
  const MixtureData two = MixtureData::points_1d({-1.0, 1.0});
  Rng rng(37);
  const Vec x = x1(0.6);
  const double t = 0.9;
  const Vec s = two.true_score(kEdm, x, t);
  const int n = 100000;
  Vec acc = Vec::Zero(1);
  for (int i = 0; i < n; ++i)
    acc += proxy_score(kEdm, x, two.sample_posterior(kEdm, x, t, rng), t);
  acc /= n;
  const double se = std::sqrt(two.proxy_cov(kEdm, x, t)(0, 0) / n);
  CHECK(std::abs(acc(0) - s(0)) < 4.0 * se);
}
