#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <span>
#include <utility>
#include <vector>

#include "difflab/estimators.hpp"
#include "difflab/expm.hpp"
#include "difflab/numerics.hpp"

namespace difflab {

// Positive-definite kernel over z = (x, t).
using KernelFn = std::function<double(const Vec&, double, const Vec&, double)>;

inline KernelFn rbf_kernel(double length_x, double length_t, double scale = 1.0) {
  return [length_x, length_t, scale](const Vec& x, double t, const Vec& x2, double t2) {
    const double dx2 = (x - x2).squaredNorm() / (2.0 * length_x * length_x);
    const double dt = (t - t2) / length_t;
    return scale * std::exp(-dx2 - 0.5 * dt * dt);
  };
}

// Finite-rank kernel K(z, z') = psi(z)^T psi(z') built from a feature
// dictionary. Its Mercer spectrum w.r.t. the training measure is exactly the
// whitened-dictionary spectrum, which makes it the matched choice for
// validating the asymptotic kernel V-kernels.
inline KernelFn dictionary_kernel(std::shared_ptr<const FeatureSet> features) {
  return [features](const Vec& x, double t, const Vec& x2, double t2) {
    return features->eval(x, t).dot(features->eval(x2, t2));
  };
}

/// Kernel-regression score model with a gradient-flow spectral filter:
/// training a lazy network for time tau by full-batch gradient descent gives
///   s_hat(z)^T = s0(z)^T + k(z)^T K^+ (I - exp(-K Lambda tau / P)) (T - S0)
/// with K the P x P Gram matrix, Lambda = diag(lambda_n / lambda_bar),
/// T the targets and S0 the initial outputs on the samples. tau = 0 returns
/// the initial output everywhere; tau = inf interpolates the targets when K
/// has full rank (pseudoinverse projector otherwise).
class NtkModel {
 public:
  static NtkModel fit(KernelFn kernel, std::span<const TrainingSample> samples,
                      double tau, ScoreField initial_output = {},
                      double pinv_cutoff = 1e-10) {
    if (samples.empty()) throw std::invalid_argument("NtkModel: P >= 1 required");
    if (tau < 0.0) throw std::invalid_argument("NtkModel: tau >= 0 required");
    NtkModel m;
    m.kernel_ = std::move(kernel);
    m.tau_ = tau;
    m.dim_ = static_cast<int>(samples.front().target.size());
    m.initial_ = initial_output ? std::move(initial_output) : zero_field(m.dim_);
    const Eigen::Index p = static_cast<Eigen::Index>(samples.size());

    m.inputs_x_.reserve(samples.size());
    m.inputs_t_.reserve(samples.size());
    double lambda_bar = 0.0;
    for (const TrainingSample& s : samples) {
      m.inputs_x_.push_back(s.x);
      m.inputs_t_.push_back(s.t);
      lambda_bar += s.lambda;
    }
    lambda_bar /= static_cast<double>(p);

    m.gram_.resize(p, p);
    for (Eigen::Index i = 0; i < p; ++i)
      for (Eigen::Index j = 0; j <= i; ++j) {
        const double v = m.kernel_(m.inputs_x_[static_cast<std::size_t>(i)],
                                   m.inputs_t_[static_cast<std::size_t>(i)],
                                   m.inputs_x_[static_cast<std::size_t>(j)],
                                   m.inputs_t_[static_cast<std::size_t>(j)]);
        m.gram_(i, j) = v;
        m.gram_(j, i) = v;
      }

    m.lambda_diag_.resize(p);
    Mat residual(p, m.dim_);
    for (Eigen::Index n = 0; n < p; ++n) {
      const TrainingSample& s = samples[static_cast<std::size_t>(n)];
      m.lambda_diag_(n) = s.lambda / lambda_bar;
      residual.row(n) = (s.target - m.initial_(s.x, s.t)).transpose();
    }

    Mat filter;
    if (m.tau_ == 0.0) {
      m.coef_ = Mat::Zero(p, m.dim_);
      return m;
    } else if (std::isinf(m.tau_)) {
      filter = Mat::Identity(p, p);
    } else {
      const Mat flow = m.gram_ * m.lambda_diag_.asDiagonal();
      filter = Mat::Identity(p, p) -
               expm(flow * (-m.tau_ / static_cast<double>(p)));
    }
    m.coef_ = pseudo_inverse(m.gram_, pinv_cutoff) * (filter * residual);
    return m;
  }

  Vec predict(const Vec& x, double t) const {
    Vec k(static_cast<Eigen::Index>(inputs_x_.size()));
    for (std::size_t i = 0; i < inputs_x_.size(); ++i)
      k(static_cast<Eigen::Index>(i)) = kernel_(inputs_x_[i], inputs_t_[i], x, t);
    return initial_(x, t) + coef_.transpose() * k;
  }

  ScoreField field() const {
    auto self = std::make_shared<NtkModel>(*this);
    return [self](const Vec& x, double t) { return self->predict(x, t); };
  }

  double tau() const { return tau_; }
  const Mat& gram() const { return gram_; }
  const Vec& lambda_diag() const { return lambda_diag_; }

  friend class NtkEnsembleDesign;

 private:
  KernelFn kernel_;
  ScoreField initial_;
  std::vector<Vec> inputs_x_;
  std::vector<double> inputs_t_;
  Mat gram_;
  Vec lambda_diag_;
  Mat coef_;  // P x D
  double tau_ = 0.0;
  int dim_ = 0;
};

/// Shared factorization for ensembles with fixed (x, t, lambda) inputs: the
/// Gram matrix, training filter and pseudoinverse do not depend on the x0
/// draws, so they are computed once and each member only substitutes its own
/// targets. model_for(samples) agrees with NtkModel::fit on the same samples
/// exactly (same closed form, same factorization path).
class NtkEnsembleDesign {
 public:
  NtkEnsembleDesign(KernelFn kernel, std::span<const TrainingSample> base, double tau,
                    double pinv_cutoff = 1e-10) {
    reference_ = std::make_shared<NtkModel>(
        NtkModel::fit(std::move(kernel), base, tau, {}, pinv_cutoff));
    const Eigen::Index p = static_cast<Eigen::Index>(base.size());
    Mat filter;
    if (tau == 0.0) {
      weight_ = Mat::Zero(p, p);
      return;
    } else if (std::isinf(tau)) {
      filter = Mat::Identity(p, p);
    } else {
      const Mat flow = reference_->gram_ * reference_->lambda_diag_.asDiagonal();
      filter = Mat::Identity(p, p) - expm(flow * (-tau / static_cast<double>(p)));
    }
    weight_ = pseudo_inverse(reference_->gram_, pinv_cutoff) * filter;
  }

  // the fitted model for one set of resampled targets on the same inputs
  ScoreField field_for(std::span<const TrainingSample> samples) const {
    const Eigen::Index p = static_cast<Eigen::Index>(samples.size());
    Mat residual(p, samples.front().target.size());
    for (Eigen::Index n = 0; n < p; ++n) {
      const TrainingSample& s = samples[static_cast<std::size_t>(n)];
      residual.row(n) =
          (s.target - reference_->initial_(s.x, s.t)).transpose();
    }
    auto model = std::make_shared<NtkModel>(*reference_);
    model->coef_ = weight_ * residual;
    return [model](const Vec& x, double t) { return model->predict(x, t); };
  }

  const NtkModel& reference() const { return *reference_; }

 private:
  std::shared_ptr<NtkModel> reference_;
  Mat weight_;
};

}  // namespace difflab
