#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "difflab/expm.hpp"
#include "difflab/ntk.hpp"

using namespace difflab;

namespace {

// plain Taylor series with scaling and squaring; slow but independent
Mat expm_taylor(const Mat& a) {
  const double norm = a.cwiseAbs().colwise().sum().maxCoeff();
  const int squarings = norm > 0.5 ? static_cast<int>(std::ceil(std::log2(norm / 0.5))) : 0;
  const Mat scaled = a / std::pow(2.0, squarings);
  Mat result = Mat::Identity(a.rows(), a.cols());
  Mat term = Mat::Identity(a.rows(), a.cols());
  for (int k = 1; k <= 40; ++k) {
    term = term * scaled / static_cast<double>(k);
    result += term;
  }
  for (int i = 0; i < squarings; ++i) result = result * result;
  return result;
}

Vec x1(double v) { return Vec::Constant(1, v); }

}  // namespace

TEST_CASE("matrix exponential basics") {
  CHECK((expm(Mat::Zero(3, 3)) - Mat::Identity(3, 3)).norm() == 0.0);
  Mat nilpotent(2, 2);
  nilpotent << 0, 1, 0, 0;
  Mat expected(2, 2);
  expected << 1, 1, 0, 1;
  CHECK((expm(nilpotent) - expected).norm() < 1e-15);

  const double theta = 0.7;
  Mat rot_gen(2, 2);
  rot_gen << 0, -theta, theta, 0;
  Mat rot(2, 2);
  rot << std::cos(theta), -std::sin(theta), std::sin(theta), std::cos(theta);
  CHECK((expm(rot_gen) - rot).norm() < 1e-14);
}

TEST_CASE("matrix exponential agrees with a Taylor oracle") {
  Rng rng(5);
  for (const double scale : {0.01, 0.4, 3.0, 25.0}) {
    Mat a(6, 6);
    for (int i = 0; i < 6; ++i)
      for (int j = 0; j < 6; ++j) a(i, j) = scale * rng.normal() / 6.0;
    const Mat diff = expm(a) - expm_taylor(a);
    CHECK(diff.norm() / expm_taylor(a).norm() < 1e-12);
  }
  CHECK_THROWS_AS(expm(Mat::Ones(2, 3)), std::invalid_argument);
  Mat bad = Mat::Zero(2, 2);
  bad(0, 0) = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(expm(bad), numeric_error);
}

namespace {
std::vector<TrainingSample> toy_samples(int count, std::uint64_t seed, double weight_slope) {
  const auto sched = ForwardSchedule::edm(1, 1.5, 0.05);
  const MixtureData dist = MixtureData::points_1d({-1.0, 0.0, 1.0});
  Rng rng(seed);
  return draw_training_set(dist, sched, count, TimeDist{0.3, 1.5},
                           [weight_slope](double t) { return 1.0 + weight_slope * t; },
                           rng);
}
}  // namespace

TEST_CASE("tau = 0 returns the initial output everywhere") {
  const auto samples = toy_samples(12, 7, 0.0);
  const KernelFn kern = rbf_kernel(0.8, 0.6);
  const NtkModel zero_init = NtkModel::fit(kern, samples, 0.0);
  CHECK(zero_init.predict(x1(0.37), 0.9)(0) == 0.0);
  const ScoreField init = [](const Vec& x, double t) { return Vec(x * t); };
  const NtkModel with_init = NtkModel::fit(kern, samples, 0.0, init);
  CHECK(with_init.predict(x1(0.37), 0.9)(0) == doctest::Approx(0.37 * 0.9));
  CHECK(with_init.predict(x1(-1.4), 0.5)(0) == doctest::Approx(-1.4 * 0.5));
}

TEST_CASE("tau = inf interpolates the targets on a full-rank Gram matrix") {
  const auto samples = toy_samples(15, 11, 0.5);
  const NtkModel model = NtkModel::fit(rbf_kernel(0.8, 0.6), samples,
                                       std::numeric_limits<double>::infinity());
  for (const TrainingSample& s : samples)
    CHECK(model.predict(s.x, s.t)(0) == doctest::Approx(s.target(0)).epsilon(1e-8));
  Eigen::SelfAdjointEigenSolver<Mat> es(model.gram());
  CHECK(es.eigenvalues().minCoeff() > -1e-12);
}

namespace {
// RK4 integration of the gradient-flow ODE, probe output coupled to the
// on-sample outputs
double rk4_probe(const std::vector<TrainingSample>& samples, const KernelFn& kern,
                 const Vec& xq, double tq, double tau, int steps) {
  const Eigen::Index p = static_cast<Eigen::Index>(samples.size());
  Mat gram(p, p);
  Vec lam(p), kq(p);
  Mat targets(p, 1);
  double lambda_bar = 0.0;
  for (Eigen::Index i = 0; i < p; ++i) lambda_bar += samples[i].lambda;
  lambda_bar /= static_cast<double>(p);
  for (Eigen::Index i = 0; i < p; ++i) {
    lam(i) = samples[i].lambda / lambda_bar;
    targets(i, 0) = samples[i].target(0);
    kq(i) = kern(samples[i].x, samples[i].t, xq, tq);
    for (Eigen::Index j = 0; j < p; ++j)
      gram(i, j) = kern(samples[i].x, samples[i].t, samples[j].x, samples[j].t);
  }
  const double h = tau / steps;
  Mat s_on = Mat::Zero(p, 1);
  double s_probe = 0.0;
  auto on_rhs = [&](const Mat& s) {
    return Mat((gram * lam.asDiagonal() * (targets - s)) / static_cast<double>(p));
  };
  auto probe_rhs = [&](const Mat& s) {
    return (kq.transpose() * lam.asDiagonal() * (targets - s))(0, 0) / static_cast<double>(p);
  };
  for (int i = 0; i < steps; ++i) {
    const Mat k1 = on_rhs(s_on);
    const double q1 = probe_rhs(s_on);
    const Mat k2 = on_rhs(s_on + 0.5 * h * k1);
    const double q2 = probe_rhs(s_on + 0.5 * h * k1);
    const Mat k3 = on_rhs(s_on + 0.5 * h * k2);
    const double q3 = probe_rhs(s_on + 0.5 * h * k2);
    const Mat k4 = on_rhs(s_on + h * k3);
    const double q4 = probe_rhs(s_on + h * k3);
    s_on += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    s_probe += h / 6.0 * (q1 + 2.0 * q2 + 2.0 * q3 + q4);
  }
  return s_probe;
}
}  // namespace

TEST_CASE("closed-form training filter matches the gradient-flow ODE") {
  const auto samples = toy_samples(10, 13, 0.7);
  const KernelFn kern = rbf_kernel(0.9, 0.7);
  const Vec xq = x1(0.4);
  const double tq = 0.85;
  for (const double tau : {0.1, 1.0, 10.0}) {
    const NtkModel model = NtkModel::fit(kern, samples, tau);
    const double oracle = rk4_probe(samples, kern, xq, tq, tau, 4000);
    CHECK(model.predict(xq, tq)(0) == doctest::Approx(oracle).epsilon(1e-6));
  }
}

TEST_CASE("rank-deficient Gram matrices go through the pseudoinverse") {
  // duplicated sample inputs make K exactly rank-deficient
  auto samples = toy_samples(6, 17, 0.0);
  for (int i = 0; i < 3; ++i) {
    TrainingSample dup = samples[static_cast<std::size_t>(i)];
    dup.target = x1(dup.target(0) + 0.3);  // different draw, same input
    samples.push_back(std::move(dup));
  }
  const KernelFn kern = rbf_kernel(0.8, 0.6);
  const double tau = 1.7;
  const NtkModel model = NtkModel::fit(kern, samples, tau);
  const double oracle = rk4_probe(samples, kern, x1(0.2), 0.7, tau, 4000);
  CHECK(model.predict(x1(0.2), 0.7)(0) == doctest::Approx(oracle).epsilon(1e-6));
}

TEST_CASE("fit rejects invalid arguments") {
  const auto samples = toy_samples(5, 19, 0.0);
  CHECK_THROWS_AS(NtkModel::fit(rbf_kernel(0.5, 0.5), {}, 1.0), std::invalid_argument);
  CHECK_THROWS_AS(NtkModel::fit(rbf_kernel(0.5, 0.5), samples, -1.0), std::invalid_argument);
}
