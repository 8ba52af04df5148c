#pragma once

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <vector>

#include "difflab/numerics.hpp"
#include "difflab/rng.hpp"
#include "difflab/schedule.hpp"

namespace difflab {

// Posterior over mixture components given a noisy observation (x, t).
struct PosteriorWeights {
  Vec w;      // probabilities, sum to 1
  Vec x;      // conditioning point
  double t = 0.0;

  Vec mean(const Mat& points) const { return points.transpose() * w; }

  Mat cov(const Mat& points) const {
    const Vec m = mean(points);
    Mat c = Mat::Zero(points.cols(), points.cols());
    for (Eigen::Index i = 0; i < points.rows(); ++i) {
      const Vec d = points.row(i).transpose() - m;
      c.noalias() += w(i) * d * d.transpose();
    }
    return c;
  }
};

/// Mixture data distribution over M points: a delta mixture when sigma0 = 0,
/// an isotropic Gaussian mixture otherwise. Weights are uniform 1/M.
/// Immutable after construction; all queries are pure.
class MixtureData {
 public:
  // points: M x D, one component per row
  explicit MixtureData(Mat points, double sigma0 = 0.0)
      : points_(std::move(points)), sigma0_(sigma0) {
    if (points_.rows() < 1) throw std::invalid_argument("MixtureData: M >= 1 required");
    if (!points_.allFinite()) throw std::invalid_argument("MixtureData: points must be finite");
    if (sigma0_ < 0.0) throw std::invalid_argument("MixtureData: sigma0 >= 0 required");
  }

  // Only uniform weights are representable; anything else is rejected.
  MixtureData(Mat points, double sigma0, const Vec& weights)
      : MixtureData(std::move(points), sigma0) {
    if (weights.size() != points_.rows())
      throw std::invalid_argument("MixtureData: weight count mismatch");
    const double u = 1.0 / static_cast<double>(points_.rows());
    for (Eigen::Index i = 0; i < weights.size(); ++i)
      if (std::abs(weights(i) - u) > 1e-12)
        throw std::invalid_argument("MixtureData: only uniform weights are supported");
  }

  static MixtureData points_1d(std::vector<double> xs, double sigma0 = 0.0) {
    Mat p(static_cast<Eigen::Index>(xs.size()), 1);
    for (std::size_t i = 0; i < xs.size(); ++i) p(static_cast<Eigen::Index>(i), 0) = xs[i];
    return MixtureData(std::move(p), sigma0);
  }

  int size() const { return static_cast<int>(points_.rows()); }
  int dim() const { return static_cast<int>(points_.cols()); }
  const Mat& points() const { return points_; }
  double sigma0() const { return sigma0_; }

  // p(m | x, t), a softmax over -||x - alpha mu_m||^2_{Sigma_eff^{-1}} / 2
  // with Sigma_eff = alpha^2 sigma0^2 I + S_t, evaluated in log space.
  PosteriorWeights posterior(const ForwardSchedule& sched, const Vec& x, double t) const {
    const ScheduleCoeffs c = sched.coeffs(t);
    PosteriorWeights post;
    post.x = x;
    post.t = t;
    std::vector<double> logits(static_cast<std::size_t>(size()));
    for (int m = 0; m < size(); ++m) logits[static_cast<std::size_t>(m)] = log_kernel(c, x, m);
    const double lse = logsumexp(logits);
    post.w = Vec(size());
    for (int m = 0; m < size(); ++m)
      post.w(m) = std::exp(logits[static_cast<std::size_t>(m)] - lse);
    return post;
  }

  // log p(x | t) for the marginal mixture.
  double log_marginal(const ForwardSchedule& sched, const Vec& x, double t) const {
    const ScheduleCoeffs c = sched.coeffs(t);
    double log_norm = 0.0;  // shared across components (equal covariances)
    for (int k = 0; k < dim(); ++k)
      log_norm -= 0.5 * std::log(2.0 * std::numbers::pi * effective_var(c, k));
    std::vector<double> logits(static_cast<std::size_t>(size()));
    for (int m = 0; m < size(); ++m) logits[static_cast<std::size_t>(m)] = log_kernel(c, x, m);
    return logsumexp(logits) + log_norm - std::log(static_cast<double>(size()));
  }

  // True score s(x, t) = grad_x log p(x | t) = Sigma_eff^{-1} (alpha <mu> - x).
  Vec true_score(const ForwardSchedule& sched, const Vec& x, double t) const {
    const ScheduleCoeffs c = sched.coeffs(t);
    const PosteriorWeights post = posterior(sched, x, t);
    const Vec mu_bar = post.mean(points_);
    Vec s(dim());
    for (int k = 0; k < dim(); ++k)
      s(k) = (c.alpha * mu_bar(k) - x(k)) / effective_var(c, k);
    return s;
  }

  // Covariance of the proxy score over x0 ~ p(x0 | x, t).
  // Delta mixture: alpha^2 S^{-1} Cov(mu) S^{-1}.
  // Gaussian mixture: S^{-1} - Sigma_eff^{-1}
  //                   + alpha^2 Sigma_eff^{-1} Cov(mu) Sigma_eff^{-1}.
  Mat proxy_cov(const ForwardSchedule& sched, const Vec& x, double t) const {
    const ScheduleCoeffs c = sched.coeffs(t);
    const PosteriorWeights post = posterior(sched, x, t);
    const Mat cov_mu = post.cov(points_);
    const double a2 = c.alpha * c.alpha;
    Mat cv(dim(), dim());
    for (int i = 0; i < dim(); ++i)
      for (int j = 0; j < dim(); ++j)
        cv(i, j) = a2 * cov_mu(i, j) / (effective_var(c, i) * effective_var(c, j));
    if (sigma0_ > 0.0)
      for (int k = 0; k < dim(); ++k)
        cv(k, k) += 1.0 / c.var_diag(k) - 1.0 / effective_var(c, k);
    return cv;
  }

  // x0 ~ p_data
  Vec sample_prior(Rng& rng) const {
    const Eigen::Index m = static_cast<Eigen::Index>(rng.uniform_index(points_.rows()));
    Vec x0 = points_.row(m).transpose();
    if (sigma0_ > 0.0)
      for (int k = 0; k < dim(); ++k) x0(k) += sigma0_ * rng.normal();
    return x0;
  }

  // x0 ~ p(x0 | x, t): component m from the posterior softmax, then (for the
  // Gaussian mixture) the per-component conjugate Gaussian.
  Vec sample_posterior(const ForwardSchedule& sched, const Vec& x, double t, Rng& rng) const {
    const PosteriorWeights post = posterior(sched, x, t);
    const Eigen::Index m = pick_component(post.w, rng);
    if (sigma0_ == 0.0) return points_.row(m).transpose();
    const ScheduleCoeffs c = sched.coeffs(t);
    Vec x0(dim());
    for (int k = 0; k < dim(); ++k) {
      const double prec = 1.0 / (sigma0_ * sigma0_) + c.alpha * c.alpha / c.var_diag(k);
      const double var_post = 1.0 / prec;
      const double mean_post =
          var_post * (points_(m, k) / (sigma0_ * sigma0_) + c.alpha * x(k) / c.var_diag(k));
      x0(k) = mean_post + std::sqrt(var_post) * rng.normal();
    }
    return x0;
  }

 private:
  static Eigen::Index pick_component(const Vec& w, Rng& rng) {
    const double u = rng.uniform();
    double acc = 0.0;
    for (Eigen::Index m = 0; m + 1 < w.size(); ++m) {
      acc += w(m);
      if (u < acc) return m;
    }
    return w.size() - 1;
  }

  double effective_var(const ScheduleCoeffs& c, int k) const {
    return c.alpha * c.alpha * sigma0_ * sigma0_ + c.var_diag(k);
  }

  double log_kernel(const ScheduleCoeffs& c, const Vec& x, int m) const {
    double q = 0.0;
    for (int k = 0; k < dim(); ++k) {
      const double d = x(k) - c.alpha * points_(m, k);
      q += d * d / effective_var(c, k);
    }
    return -0.5 * q;
  }

  Mat points_;
  double sigma0_;
};

// Per-sample regression target of the DSM objective:
// s~(x, t; x0) = S_t^{-1} (alpha_t x0 - x). Equal to the true score only in
// expectation over x0 | x, t.
inline Vec proxy_score(const ForwardSchedule& sched, const Vec& x, const Vec& x0, double t) {
  const ScheduleCoeffs c = sched.coeffs(t);
  Vec s(x.size());
  for (Eigen::Index k = 0; k < x.size(); ++k)
    s(k) = (c.alpha * x0(k) - x(k)) / c.var_diag(k);
  return s;
}

// Normalized proxy-variance field tr(C) / [tr(C) + ||s||^2], in [0, 1].
// Zero where the posterior is certain (tr C = 0), one exactly on boundary
// ridges where the score vanishes but the posterior is uncertain.
inline double boundary_ratio(const MixtureData& dist, const ForwardSchedule& sched,
                             const Vec& x, double t) {
  const double tr = dist.proxy_cov(sched, x, t).trace();
  if (tr <= 0.0) return 0.0;
  const double s2 = dist.true_score(sched, x, t).squaredNorm();
  return tr / (tr + s2);
}

struct MeanVar1d {
  double mean = 0.0;
  double var = 0.0;
};

// Closed forms for the symmetric 1-D two-point mixture {-mu, +mu}:
// E[x0 | x, t] = mu tanh(alpha mu x / sigma^2), var = mu^2 / cosh^2(...).
inline MeanVar1d posterior_mean_var_1d(double mu, const ForwardSchedule& sched,
                                       double x, double t) {
  const ScheduleCoeffs c = sched.coeffs(t);
  ForwardSchedule::require_isotropic(c);
  const double arg = c.alpha * mu * x / c.var_diag(0);
  MeanVar1d r;
  r.mean = mu * std::tanh(arg);
  const double ch = std::cosh(arg);
  if (std::isinf(ch)) {
    r.var = 0.0;
  } else {
    r.var = mu * mu / (ch * ch);
  }
  return r;
}

}  // namespace difflab
