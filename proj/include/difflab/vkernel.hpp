#pragma once

#include <cmath>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <utility>
#include <vector>

#include "difflab/estimators.hpp"
#include "difflab/features.hpp"
#include "difflab/mixture.hpp"
#include "difflab/ntk.hpp"
#include "difflab/numerics.hpp"
#include "difflab/parallel.hpp"
#include "difflab/rng.hpp"
#include "difflab/schedule.hpp"

namespace difflab {

struct Probe {
  Vec x;
  double t = 0.0;
};

// White-noise amplitude of the interleaved-sampling estimator:
// kappa D_t C(x, t) D_t. The delta(t - t') factor is handled by the
// sampler's 1/dt scaling.
inline Mat vkernel_naive(const MixtureData& dist, const ForwardSchedule& sched,
                         double kappa, const Vec& x, double t) {
  if (kappa < 0.0) throw std::invalid_argument("vkernel_naive: kappa >= 0 required");
  const ScheduleCoeffs c = sched.coeffs(t);
  const Mat cov = dist.proxy_cov(sched, x, t);
  return kappa * (c.diff_diag.asDiagonal() * cov * c.diff_diag.asDiagonal());
}

// Shared Monte Carlo node cache for the population expectations E_{z''}.
// t is sampled with equal-count strata over the time range (the integrand
// concentrates at small t where the proxy covariance scales like S^-2),
// x from the forward marginal at that t.
struct VKernelNodes {
  std::vector<Vec> x;
  std::vector<double> t;
  Vec lambda;          // lambda_t at each node
  double lambda_mean = 1.0;
  std::vector<Mat> proxy_cov;

  static VKernelNodes build(const MixtureData& dist, const ForwardSchedule& sched,
                            int count, const TimeDist& time_dist,
                            const WeightFn& weight, Rng& rng) {
    if (count < 1) throw std::invalid_argument("VKernelNodes: count >= 1 required");
    VKernelNodes nodes;
    nodes.x.reserve(static_cast<std::size_t>(count));
    nodes.t.reserve(static_cast<std::size_t>(count));
    nodes.lambda.resize(count);
    nodes.proxy_cov.reserve(static_cast<std::size_t>(count));
    const double span = time_dist.hi - time_dist.lo;
    for (int i = 0; i < count; ++i) {
      const double t =
          time_dist.lo + span * (static_cast<double>(i) + rng.uniform()) / count;
      const Vec x0 = dist.sample_prior(rng);
      const Vec x = sched.transition_sample(x0, t, rng);
      nodes.t.push_back(t);
      nodes.x.push_back(x);
      nodes.lambda(i) = weight(t);
      nodes.proxy_cov.push_back(dist.proxy_cov(sched, x, t));
    }
    nodes.lambda_mean = nodes.lambda.mean();
    return nodes;
  }

  int count() const { return static_cast<int>(t.size()); }
};

// A V-kernel value with its Monte Carlo standard error (entrywise).
struct VKernelValue {
  Mat value;
  Mat se;
};

namespace detail {

// Sandwich E_{z''}[ (lambda''/lambda_bar)^2 kl(z'') C(z'') kr(z'') ] with the
// D_t factors applied outside; kl/kr are the probe-to-node kernel weights.
inline VKernelValue sandwich(const VKernelNodes& nodes, const Vec& kl, const Vec& kr,
                             double kappa, const Vec& diff_left, const Vec& diff_right) {
  const int dim = static_cast<int>(nodes.proxy_cov.front().rows());
  const int n = nodes.count();
  Mat mean = Mat::Zero(dim, dim);
  Mat m2 = Mat::Zero(dim, dim);
  for (int i = 0; i < n; ++i) {
    const double lw = nodes.lambda(i) / nodes.lambda_mean;
    const double s = lw * lw * kl(i) * kr(i);
    const Mat term = s * nodes.proxy_cov[static_cast<std::size_t>(i)];
    const Mat delta = term - mean;
    mean += delta / static_cast<double>(i + 1);
    m2 += delta.cwiseProduct(term - mean);
  }
  VKernelValue out;
  const Mat dl = diff_left.asDiagonal();
  const Mat dr = diff_right.asDiagonal();
  out.value = kappa * (dl * mean * dr);
  const Mat var = m2 / std::max(1, n - 1);
  out.se = kappa * (dl * (var / static_cast<double>(n)).cwiseSqrt() * dr);
  return out;
}

}  // namespace detail

/// Asymptotic V-kernel of an expressive linear score model:
///   V(z; z') = kappa D_t E_{z''}[ (lambda''/E lambda)^2 k(z; z'') C(z'') k(z''; z') ] D_t'
/// with the feature kernel k(z; z') = (1/sqrt F) [phi(z) - <phi>]^T
/// Sigma_phi^{-1} [phi(z') - <phi>]. Population moments come from the shared
/// node cache. kappa = F/P is supplied by the caller.
class LinearVKernel {
 public:
  LinearVKernel(std::shared_ptr<const FeatureSet> features, const MixtureData& dist,
                const ForwardSchedule& sched, double kappa, int mc_nodes,
                const TimeDist& time_dist, const WeightFn& weight, Rng& rng,
                double max_condition = 1e12)
      : features_(std::move(features)),
        sched_(&sched),
        kappa_(kappa),
        nodes_(VKernelNodes::build(dist, sched, mc_nodes, time_dist, weight, rng)) {
    const int f_count = features_->count();
    Mat phi(nodes_.count(), f_count);
    mu_phi_ = Vec::Zero(f_count);
    double lambda_sum = 0.0;
    for (int i = 0; i < nodes_.count(); ++i) {
      phi.row(i) = features_->eval(nodes_.x[static_cast<std::size_t>(i)], nodes_.t[static_cast<std::size_t>(i)]).transpose();
      mu_phi_ += nodes_.lambda(i) * phi.row(i).transpose();
      lambda_sum += nodes_.lambda(i);
    }
    mu_phi_ /= lambda_sum;
    Mat sigma = Mat::Zero(f_count, f_count);
    for (int i = 0; i < nodes_.count(); ++i) {
      const Vec d = phi.row(i).transpose() - mu_phi_;
      sigma.noalias() += nodes_.lambda(i) * d * d.transpose();
    }
    sigma /= lambda_sum;
    const double cond = condition_number(sigma);
    if (!(cond < max_condition))
      throw numeric_error("LinearVKernel: feature covariance ill-conditioned, cond = " +
                          std::to_string(cond));
    Eigen::LDLT<Mat> ldlt(sigma);
    // per-node whitened feature: v_i = Sigma^{-1} (phi_i - mu); k(z; z_i) is
    // then (phi(z) - mu) . v_i / sqrt(F)
    node_w_ = ldlt.solve((phi.rowwise() - mu_phi_.transpose()).transpose());
    inv_sigma_ = ldlt.solve(Mat::Identity(f_count, f_count));
  }

  double kappa() const { return kappa_; }
  const VKernelNodes& nodes() const { return nodes_; }

  double feature_kernel(const Vec& x, double t, const Vec& x2, double t2) const {
    const Vec a = features_->eval(x, t) - mu_phi_;
    const Vec b = features_->eval(x2, t2) - mu_phi_;
    return a.dot(inv_sigma_ * b) / std::sqrt(static_cast<double>(features_->count()));
  }

  VKernelValue eval(const Vec& x, double t, const Vec& x2, double t2) const {
    const Vec a = features_->eval(x, t) - mu_phi_;
    const Vec b = features_->eval(x2, t2) - mu_phi_;
    // 1/sqrt(F) of each kernel factor combines to 1/F
    const double inv_f = 1.0 / static_cast<double>(features_->count());
    const Vec kl = (node_w_.transpose() * a) * inv_f;
    const Vec kr = node_w_.transpose() * b;
    return detail::sandwich(nodes_, kl, kr, kappa_, sched_->coeffs(t).diff_diag,
                            sched_->coeffs(t2).diff_diag);
  }

 private:
  std::shared_ptr<const FeatureSet> features_;
  const ForwardSchedule* sched_;
  double kappa_;
  VKernelNodes nodes_;
  Vec mu_phi_;
  Mat inv_sigma_;
  Mat node_w_;  // F x N
};

// Infinite-training-time limit of the kernel V-kernel: white in both x and t
// with amplitude kappa_dz D_t C D_t. kappa_dz is a single config scalar; the
// delta(z - z') is folded into the sampler's per-step scaling exactly as for
// the interleaved estimator (heuristic equivalence).
struct WhiteLimit {
  double kappa_dz = 0.0;

  Mat amplitude(const MixtureData& dist, const ForwardSchedule& sched, const Vec& x,
                double t) const {
    return vkernel_naive(dist, sched, kappa_dz, x, t);
  }
};

/// Asymptotic V-kernel of a kernel-regression (lazy network) model trained
/// for time tau: the same sandwich with filter kernel
///   k(z; z') = (1/sqrt F) phi(z)^T (I - exp(-Lambda tau)) phi(z'),
/// where the phi_k are orthonormalized w.r.t. the lambda-weighted training
/// measure. The orthonormal basis is built by empirical whitening of a raw
/// feature dictionary on the node cache; the spectrum defaults to the
/// whitened-dictionary eigenvalues (the Mercer spectrum of the matching
/// dictionary kernel).
class NtkVKernel {
 public:
  NtkVKernel(std::shared_ptr<const FeatureSet> dictionary, const MixtureData& dist,
             const ForwardSchedule& sched, double kappa, double tau, int mc_nodes,
             const TimeDist& time_dist, const WeightFn& weight, Rng& rng,
             std::optional<Vec> spectrum = std::nullopt,
             double max_condition = 1e12, double rank_cutoff = 1e-12)
      : dictionary_(std::move(dictionary)),
        sched_(&sched),
        kappa_(kappa),
        tau_(tau),
        nodes_(VKernelNodes::build(dist, sched, mc_nodes, time_dist, weight, rng)) {
    if (tau_ < 0.0) throw std::invalid_argument("NtkVKernel: tau >= 0 required");
    const int f_raw = dictionary_->count();
    Mat psi(nodes_.count(), f_raw);
    double lambda_sum = 0.0;
    for (int i = 0; i < nodes_.count(); ++i) {
      psi.row(i) = dictionary_->eval(nodes_.x[static_cast<std::size_t>(i)], nodes_.t[static_cast<std::size_t>(i)]).transpose();
      lambda_sum += nodes_.lambda(i);
    }
    Mat gram = Mat::Zero(f_raw, f_raw);
    for (int i = 0; i < nodes_.count(); ++i)
      gram.noalias() += nodes_.lambda(i) * psi.row(i).transpose() * psi.row(i);
    gram /= lambda_sum;

    Eigen::SelfAdjointEigenSolver<Mat> es(gram);
    const Vec& ev = es.eigenvalues();  // ascending
    const double max_ev = ev.maxCoeff();
    if (!(max_ev > 0.0))
      throw numeric_error("NtkVKernel: degenerate feature dictionary, cond = inf");
    // directions below rank_cutoff * max are dropped, so the retained basis
    // has condition number at most 1/rank_cutoff = max_condition
    (void)max_condition;
    std::vector<Eigen::Index> keep;
    for (Eigen::Index k = ev.size() - 1; k >= 0; --k)
      if (ev(k) > rank_cutoff * max_ev) keep.push_back(k);
    const int f_count = static_cast<int>(keep.size());
    basis_ = Mat(f_raw, f_count);   // phi(z) = basis^T psi(z)
    spectrum_ = Vec(f_count);
    for (int k = 0; k < f_count; ++k) {
      basis_.col(k) =
          es.eigenvectors().col(keep[static_cast<std::size_t>(k)]) / std::sqrt(ev(keep[static_cast<std::size_t>(k)]));
      spectrum_(k) = ev(keep[static_cast<std::size_t>(k)]);
    }
    if (spectrum) {
      if (spectrum->size() != f_count)
        throw std::invalid_argument("NtkVKernel: spectrum size must match retained basis");
      spectrum_ = *spectrum;
    }

    filter_ = Vec(f_count);
    for (int k = 0; k < f_count; ++k)
      filter_(k) = 1.0 - std::exp(-spectrum_(k) * tau_);

    node_phi_ = basis_.transpose() * psi.transpose();  // F x N
  }

  int basis_count() const { return static_cast<int>(spectrum_.size()); }
  const Vec& spectrum() const { return spectrum_; }
  double kappa() const { return kappa_; }

  double feature_kernel(const Vec& x, double t, const Vec& x2, double t2) const {
    const Vec a = basis_.transpose() * dictionary_->eval(x, t);
    const Vec b = basis_.transpose() * dictionary_->eval(x2, t2);
    return a.dot(filter_.cwiseProduct(b)) / std::sqrt(static_cast<double>(basis_count()));
  }

  VKernelValue eval(const Vec& x, double t, const Vec& x2, double t2) const {
    // both kernel factors carry the spectral filter
    const Vec a =
        filter_.cwiseProduct(basis_.transpose() * dictionary_->eval(x, t));
    const Vec b =
        filter_.cwiseProduct(basis_.transpose() * dictionary_->eval(x2, t2));
    const double inv_f = 1.0 / static_cast<double>(basis_count());
    const Vec kl = (node_phi_.transpose() * a) * inv_f;
    const Vec kr = node_phi_.transpose() * b;
    return detail::sandwich(nodes_, kl, kr, kappa_, sched_->coeffs(t).diff_diag,
                            sched_->coeffs(t2).diff_diag);
  }

  // tau -> infinity degenerates to a white-in-(x,t) kernel; returned as a
  // spec rather than a dense value.
  WhiteLimit infinite_tau(double kappa_dz) const { return WhiteLimit{kappa_dz}; }

 private:
  std::shared_ptr<const FeatureSet> dictionary_;
  const ForwardSchedule* sched_;
  double kappa_;
  double tau_;
  VKernelNodes nodes_;
  Mat basis_;
  Vec spectrum_;
  Vec filter_;
  Mat node_phi_;
};

// ---------------------------------------------------------------------------
// Empirical ensemble covariance.

using ModelFactory = std::function<ScoreField(int model_index, Rng& rng)>;

struct EnsembleCovResult {
  std::vector<Probe> probes;
  int dim = 0;
  int n_models = 0;
  Vec mean;  // stacked (probe-major) mean estimate, size A*D
  Mat cov;   // stacked (A*D) x (A*D) unbiased sample covariance

  Vec mean_at(int probe) const { return mean.segment(probe * dim, dim); }

  Mat block(int probe_a, int probe_b) const {
    return cov.block(probe_a * dim, probe_b * dim, dim, dim);
  }

  // D_t Cov D_t' sandwich of a covariance block.
  Mat vkernel_block(const ForwardSchedule& sched, int probe_a, int probe_b) const {
    const Vec da = sched.coeffs(probes[static_cast<std::size_t>(probe_a)].t).diff_diag;
    const Vec db = sched.coeffs(probes[static_cast<std::size_t>(probe_b)].t).diff_diag;
    return da.asDiagonal() * block(probe_a, probe_b) * db.asDiagonal();
  }
};

// Mean and covariance of independently trained models evaluated at fixed
// probes. Models are fitted in parallel; accumulation runs in model-index
// order so the result is bit-identical for a given seed regardless of the
// worker count.
inline EnsembleCovResult ensemble_cov(const ModelFactory& factory, int n_models,
                                      const std::vector<Probe>& probes,
                                      std::uint64_t seed, int threads = 1) {
  if (n_models < 2) throw std::invalid_argument("ensemble_cov: n_models >= 2 required");
  if (probes.empty()) throw std::invalid_argument("ensemble_cov: probes required");
  const int dim = static_cast<int>(probes.front().x.size());
  const int stacked = dim * static_cast<int>(probes.size());
  Mat outputs(n_models, stacked);
  parallel_for_index(static_cast<std::size_t>(n_models), threads, [&](std::size_t i) {
    Rng rng(derive_seed(seed, stream::kModel, i));
    const ScoreField field = factory(static_cast<int>(i), rng);
    for (std::size_t a = 0; a < probes.size(); ++a)
      outputs.row(static_cast<Eigen::Index>(i))
          .segment(static_cast<Eigen::Index>(a) * dim, dim) =
          field(probes[a].x, probes[a].t).transpose();
  });

  EnsembleCovResult r;
  r.probes = probes;
  r.dim = dim;
  r.n_models = n_models;
  r.mean = Vec::Zero(stacked);
  for (int i = 0; i < n_models; ++i) r.mean += outputs.row(i).transpose();
  r.mean /= static_cast<double>(n_models);
  r.cov = Mat::Zero(stacked, stacked);
  for (int i = 0; i < n_models; ++i) {
    const Vec d = outputs.row(i).transpose() - r.mean;
    r.cov.noalias() += d * d.transpose();
  }
  r.cov /= static_cast<double>(n_models - 1);
  return r;
}

// Factories implementing the shared-(x,t), resampled-x0 ensemble convention.

inline ModelFactory linear_ensemble_factory(
    std::shared_ptr<const FeatureSet> features,
    std::shared_ptr<const MixtureData> dist, const ForwardSchedule& sched,
    std::shared_ptr<const std::vector<TrainingSample>> base,
    LinearFitOptions opts = {}) {
  return [features, dist, &sched, base, opts](int, Rng& rng) {
    const std::vector<TrainingSample> samples =
        resample_targets(*base, *dist, sched, rng);
    return fit_linear(features, samples, opts).field();
  };
}

inline ModelFactory ntk_ensemble_factory(
    KernelFn kernel, std::shared_ptr<const MixtureData> dist,
    const ForwardSchedule& sched,
    std::shared_ptr<const std::vector<TrainingSample>> base, double tau) {
  // the Gram/filter factorization depends only on the shared (x, t) inputs
  auto design = std::make_shared<NtkEnsembleDesign>(std::move(kernel), *base, tau);
  return [design, dist, &sched, base](int, Rng& rng) {
    const std::vector<TrainingSample> samples =
        resample_targets(*base, *dist, sched, rng);
    return design->field_for(samples);
  };
}

// Each "model" is one realization of the interleaved estimator; every probe
// evaluation draws a fresh posterior sample.
inline ModelFactory naive_ensemble_factory(std::shared_ptr<const MixtureData> dist,
                                           const ForwardSchedule& sched, double kappa,
                                           double dt) {
  return [dist, &sched, kappa, dt](int, Rng& rng) -> ScoreField {
    auto shared_rng = std::make_shared<Rng>(rng);
    return [dist, &sched, kappa, dt, shared_rng](const Vec& x, double t) {
      return naive_estimate(*dist, sched, x, t, kappa, dt, *shared_rng);
    };
  };
}

}  // namespace difflab
