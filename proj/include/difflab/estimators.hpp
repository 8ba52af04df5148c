#pragma once

#include <cmath>
#include <functional>
#include <span>
#include <stdexcept>
#include <utility>
#include <vector>

#include "difflab/features.hpp"
#include "difflab/mixture.hpp"
#include "difflab/numerics.hpp"
#include "difflab/rng.hpp"
#include "difflab/schedule.hpp"

namespace difflab {

// A score estimate as a function of (x, t).
using ScoreField = std::function<Vec(const Vec&, double)>;

inline ScoreField zero_field(int dim) {
  return [dim](const Vec&, double) { return Vec::Zero(dim); };
}

inline ScoreField true_score_field(const MixtureData& dist, const ForwardSchedule& sched) {
  return [&dist, &sched](const Vec& x, double t) { return dist.true_score(sched, x, t); };
}

// One draw from p(x, x0, t) together with its weight lambda_t and the
// regression target (the proxy score, unless a test injects its own).
struct TrainingSample {
  Vec x;
  Vec x0;
  double t = 0.0;
  double lambda = 1.0;
  Vec target;
};

// Uniform time-sampling distribution p(t) on [lo, hi]. A default-constructed
// (empty) range means "the full [eps, T] of the schedule in use".
struct TimeDist {
  double lo = 0.0;
  double hi = 0.0;
  double sample(Rng& rng) const { return rng.uniform(lo, hi); }
  static TimeDist full(const ForwardSchedule& sched) {
    return TimeDist{sched.cutoff(), sched.end_time()};
  }
};

using WeightFn = std::function<double(double)>;

inline WeightFn unit_weight() {
  return [](double) { return 1.0; };
}

// P independent draws from p(x | x0, t) p_data(x0) p(t); targets are
// proxy scores.
inline std::vector<TrainingSample> draw_training_set(
    const MixtureData& dist, const ForwardSchedule& sched, int count,
    const TimeDist& time_dist, const WeightFn& weight, Rng& rng) {
  if (count < 1) throw std::invalid_argument("draw_training_set: P >= 1 required");
  std::vector<TrainingSample> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int n = 0; n < count; ++n) {
    TrainingSample s;
    s.t = time_dist.sample(rng);
    s.lambda = weight(s.t);
    if (!(s.lambda > 0.0))
      throw std::invalid_argument("draw_training_set: lambda_t must be positive");
    s.x0 = dist.sample_prior(rng);
    s.x = sched.transition_sample(s.x0, s.t, rng);
    s.target = proxy_score(sched, s.x, s.x0, s.t);
    out.push_back(std::move(s));
  }
  return out;
}

// Redraw the x0 (and target) of each sample from p(x0 | x, t), keeping the
// (x, t) inputs fixed. This is the ensemble convention used everywhere:
// models in an ensemble share inputs and differ only in their x0 draws.
inline std::vector<TrainingSample> resample_targets(
    std::vector<TrainingSample> samples, const MixtureData& dist,
    const ForwardSchedule& sched, Rng& rng) {
  for (TrainingSample& s : samples) {
    s.x0 = dist.sample_posterior(sched, s.x, s.t, rng);
    s.target = proxy_score(sched, s.x, s.x0, s.t);
  }
  return samples;
}

// Interleaved-sampling score estimator:
//   s_hat = s + sqrt(kappa / dt) (s~(x, t; x0) - s),  x0 ~ p(x0 | x, t).
// Unbiased for any kappa; kappa = 0 returns the true score exactly.
inline Vec naive_estimate(const MixtureData& dist, const ForwardSchedule& sched,
                          const Vec& x, double t, double kappa, double dt, Rng& rng) {
  if (kappa < 0.0) throw std::invalid_argument("naive_estimate: kappa >= 0 required");
  if (!(dt > 0.0)) throw std::invalid_argument("naive_estimate: dt > 0 required");
  const Vec s = dist.true_score(sched, x, t);
  if (kappa == 0.0) return s;
  const Vec x0 = dist.sample_posterior(sched, x, t, rng);
  const Vec tgt = proxy_score(sched, x, x0, t);
  return s + std::sqrt(kappa / dt) * (tgt - s);
}

struct LinearFitOptions {
  double ridge = 0.0;
  bool allow_pseudoinverse = true;
  double pinv_cutoff = 1e-10;  // relative to sigma_max
};

/// Linear score model s_hat(x, t) = w0 + W phi(x, t), fitted in closed form
/// from the weighted empirical moments of a sample set:
///   lambda_bar, b_hat (mean target), mu_phi, Sigma_phi, J_hat,
///   s_hat(z) = J_hat^T Sigma_phi^{-1} [mu_phi - phi(z)] + b_hat.
/// With ridge xi > 0 the inverse becomes [Sigma_phi + xi I]^{-1}; with
/// xi = 0 and singular Sigma_phi the Moore-Penrose pseudoinverse is used
/// (unless disabled, in which case fitting raises).
class FittedLinearModel {
 public:
  Vec predict(const Vec& x, double t) const {
    return w0_ + w_ * features_->eval(x, t);
  }

  ScoreField field() const {
    auto self = *this;  // models are small; copy keeps the field self-contained
    return [self](const Vec& x, double t) { return self.predict(x, t); };
  }

  // Equivalent-kernel weight Q(z; z') = 1 + [phi(z) - mu]^T A [phi(z') - mu];
  // the fit is s_hat(z) = (1/P) sum_n (lambda_n / lambda_bar) Q(z_n; z) target_n.
  double q_kernel(const Vec& x, double t, const Vec& x_prime, double t_prime) const {
    const Vec a = features_->eval(x, t) - mu_phi_;
    const Vec b = features_->eval(x_prime, t_prime) - mu_phi_;
    return 1.0 + a.dot(inv_sigma_ * b);
  }

  const Vec& w0() const { return w0_; }
  const Mat& weights() const { return w_; }
  const Vec& mu_phi() const { return mu_phi_; }
  const Mat& sigma_phi() const { return sigma_phi_; }
  const Vec& mean_target() const { return b_hat_; }
  double lambda_bar() const { return lambda_bar_; }
  double ridge() const { return ridge_; }
  const FeatureSet& features() const { return *features_; }

 private:
  friend FittedLinearModel fit_linear(std::shared_ptr<const FeatureSet>,
                                      std::span<const TrainingSample>,
                                      const LinearFitOptions&);
  std::shared_ptr<const FeatureSet> features_;
  Vec w0_;
  Mat w_;
  Vec mu_phi_;
  Mat sigma_phi_;
  Mat inv_sigma_;
  Vec b_hat_;
  double lambda_bar_ = 1.0;
  double ridge_ = 0.0;
};

inline FittedLinearModel fit_linear(std::shared_ptr<const FeatureSet> features,
                                    std::span<const TrainingSample> samples,
                                    const LinearFitOptions& opts = {}) {
  if (samples.empty()) throw std::invalid_argument("fit_linear: P >= 1 required");
  const int f_count = features->count();
  const int dim = static_cast<int>(samples.front().target.size());
  const double count = static_cast<double>(samples.size());

  double lambda_bar = 0.0;
  for (const TrainingSample& s : samples) lambda_bar += s.lambda;
  lambda_bar /= count;

  Mat phi(static_cast<Eigen::Index>(samples.size()), f_count);
  Mat targets(static_cast<Eigen::Index>(samples.size()), dim);
  Vec lam(static_cast<Eigen::Index>(samples.size()));
  for (std::size_t n = 0; n < samples.size(); ++n) {
    const Eigen::Index r = static_cast<Eigen::Index>(n);
    phi.row(r) = features->eval(samples[n].x, samples[n].t).transpose();
    targets.row(r) = samples[n].target.transpose();
    lam(r) = samples[n].lambda;
  }
  const Vec mu_phi = phi.transpose() * lam / (lambda_bar * count);
  const Vec b_hat = targets.transpose() * lam / (lambda_bar * count);
  const Mat phi_c = phi.rowwise() - mu_phi.transpose();
  const Mat tgt_c = targets.rowwise() - b_hat.transpose();
  const Mat sigma_phi =
      phi_c.transpose() * (lam.asDiagonal() * phi_c) / (lambda_bar * count);
  const Mat j_hat =
      -(phi_c.transpose() * (lam.asDiagonal() * tgt_c)) / (lambda_bar * count);

  Mat inv;
  if (opts.ridge > 0.0) {
    Mat reg = sigma_phi;
    reg.diagonal().array() += opts.ridge;
    inv = reg.ldlt().solve(Mat::Identity(f_count, f_count));
  } else {
    Eigen::SelfAdjointEigenSolver<Mat> es(sigma_phi);
    const double max_ev = es.eigenvalues().maxCoeff();
    const double min_ev = es.eigenvalues().minCoeff();
    const bool singular = max_ev <= 0.0 || min_ev <= opts.pinv_cutoff * max_ev;
    if (singular && !opts.allow_pseudoinverse)
      throw numeric_error(
          "fit_linear: singular feature covariance (min/max eigenvalue " +
          std::to_string(min_ev) + "/" + std::to_string(max_ev) +
          ") with ridge = 0 and pseudoinverse disabled");
    if (singular) {
      inv = pseudo_inverse(sigma_phi, opts.pinv_cutoff);
    } else {
      inv = es.eigenvectors() *
            es.eigenvalues().cwiseInverse().asDiagonal() *
            es.eigenvectors().transpose();
    }
  }

  FittedLinearModel model;
  model.features_ = std::move(features);
  model.mu_phi_ = mu_phi;
  model.sigma_phi_ = sigma_phi;
  model.inv_sigma_ = inv;
  model.b_hat_ = b_hat;
  model.lambda_bar_ = lambda_bar;
  model.ridge_ = opts.ridge;
  model.w_ = -(j_hat.transpose() * inv);
  model.w0_ = b_hat - model.w_ * mu_phi;
  return model;
}

// ---------------------------------------------------------------------------
// Reparameterizations. Both are exact affine bijections for isotropic S_t.

// Noise-prediction form eps(x, t) = sigma_t s(x, t).
inline Vec score_to_noise_pred(const Vec& score, const ForwardSchedule& sched, double t) {
  return sched.sigma(t) * score;
}

inline Vec noise_pred_to_score(const Vec& noise_pred, const ForwardSchedule& sched, double t) {
  return noise_pred / sched.sigma(t);
}

// Denoiser form D(x, t) = (S_t s(x, t) + x) / alpha_t.
inline Vec score_to_denoiser(const Vec& score, const Vec& x, const ForwardSchedule& sched,
                             double t) {
  const ScheduleCoeffs c = sched.coeffs(t);
  ForwardSchedule::require_isotropic(c);
  if (c.alpha == 0.0) throw numeric_error("score_to_denoiser: alpha_t = 0");
  return (c.var_diag(0) * score + x) / c.alpha;
}

inline Vec denoiser_to_score(const Vec& denoised, const Vec& x, const ForwardSchedule& sched,
                             double t) {
  const ScheduleCoeffs c = sched.coeffs(t);
  ForwardSchedule::require_isotropic(c);
  return (c.alpha * denoised - x) / c.var_diag(0);
}

// ---------------------------------------------------------------------------
// Empirical objectives on a fixed sample set.

// J1_hat: mean of lambda/2 ||s_hat - target||^2.
inline double empirical_dsm_objective(const ScoreField& estimator,
                                      std::span<const TrainingSample> samples) {
  double acc = 0.0;
  for (const TrainingSample& s : samples)
    acc += 0.5 * s.lambda * (estimator(s.x, s.t) - s.target).squaredNorm();
  return acc / static_cast<double>(samples.size());
}

// J0_hat: same, against the true score of the data distribution.
inline double empirical_score_objective(const ScoreField& estimator,
                                        std::span<const TrainingSample> samples,
                                        const MixtureData& dist,
                                        const ForwardSchedule& sched) {
  double acc = 0.0;
  for (const TrainingSample& s : samples)
    acc += 0.5 * s.lambda *
           (estimator(s.x, s.t) - dist.true_score(sched, s.x, s.t)).squaredNorm();
  return acc / static_cast<double>(samples.size());
}

}  // namespace difflab
