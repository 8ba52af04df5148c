#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "difflab/estimators.hpp"
#include "difflab/mixture.hpp"
#include "difflab/ntk.hpp"
#include "difflab/numerics.hpp"
#include "difflab/parallel.hpp"
#include "difflab/rng.hpp"
#include "difflab/samplers.hpp"
#include "difflab/schedule.hpp"

namespace difflab {

// Regular histogram over a box; the empirical realization of the average
// learned distribution. Mass is normalized over in-bounds samples; samples
// outside the box are dropped and reported via clipped_fraction.
class HistogramGrid {
 public:
  HistogramGrid(Vec lo, Vec hi, std::vector<int> bins)
      : lo_(std::move(lo)), hi_(std::move(hi)), bins_(std::move(bins)) {
    if (lo_.size() != hi_.size() || static_cast<std::size_t>(lo_.size()) != bins_.size())
      throw std::invalid_argument("HistogramGrid: dimension mismatch");
    std::size_t total = 1;
    for (std::size_t d = 0; d < bins_.size(); ++d) {
      if (bins_[d] < 1 || !(hi_(static_cast<Eigen::Index>(d)) > lo_(static_cast<Eigen::Index>(d))))
        throw std::invalid_argument("HistogramGrid: invalid bounds or bin count");
      total *= static_cast<std::size_t>(bins_[d]);
    }
    counts_.assign(total, 0);
  }

  int dim() const { return static_cast<int>(bins_.size()); }
  const std::vector<int>& bins() const { return bins_; }
  const Vec& lo() const { return lo_; }
  const Vec& hi() const { return hi_; }
  std::size_t bin_count() const { return counts_.size(); }
  std::uint64_t total_count() const { return total_; }
  std::uint64_t kept_count() const { return kept_; }

  double clipped_fraction() const {
    return total_ == 0 ? 0.0
                       : static_cast<double>(total_ - kept_) / static_cast<double>(total_);
  }
  bool clip_warning() const { return clipped_fraction() > 1e-3; }

  void add(const Vec& x) {
    ++total_;
    std::size_t flat = 0;
    for (int d = 0; d < dim(); ++d) {
      const double w = bin_width(d);
      const double rel = (x(d) - lo_(d)) / w;
      if (rel < 0.0 || x(d) > hi_(d)) return;  // clipped
      int idx = static_cast<int>(rel);
      if (idx >= bins_[static_cast<std::size_t>(d)]) idx = bins_[static_cast<std::size_t>(d)] - 1;
      flat = flat * static_cast<std::size_t>(bins_[static_cast<std::size_t>(d)]) +
             static_cast<std::size_t>(idx);
    }
    ++kept_;
    ++counts_[flat];
  }

  void add_rows(const Mat& samples) {
    for (Eigen::Index i = 0; i < samples.rows(); ++i) add(samples.row(i).transpose());
  }

  double bin_width(int d) const {
    return (hi_(d) - lo_(d)) / bins_[static_cast<std::size_t>(d)];
  }

  double mass(std::size_t flat) const {
    return kept_ == 0 ? 0.0
                      : static_cast<double>(counts_[flat]) / static_cast<double>(kept_);
  }

  double total_mass() const {
    double m = 0.0;
    for (std::size_t i = 0; i < counts_.size(); ++i) m += mass(i);
    return m;
  }

  // multi-index of a flat bin (row-major, first dimension slowest)
  std::vector<int> unflatten(std::size_t flat) const {
    std::vector<int> idx(static_cast<std::size_t>(dim()));
    for (int d = dim() - 1; d >= 0; --d) {
      idx[static_cast<std::size_t>(d)] =
          static_cast<int>(flat % static_cast<std::size_t>(bins_[static_cast<std::size_t>(d)]));
      flat /= static_cast<std::size_t>(bins_[static_cast<std::size_t>(d)]);
    }
    return idx;
  }

  Vec center(std::size_t flat) const {
    const std::vector<int> idx = unflatten(flat);
    Vec c(dim());
    for (int d = 0; d < dim(); ++d)
      c(d) = lo_(d) + (idx[static_cast<std::size_t>(d)] + 0.5) * bin_width(d);
    return c;
  }

  Vec bin_lo(std::size_t flat) const {
    const std::vector<int> idx = unflatten(flat);
    Vec c(dim());
    for (int d = 0; d < dim(); ++d)
      c(d) = lo_(d) + idx[static_cast<std::size_t>(d)] * bin_width(d);
    return c;
  }

 private:
  Vec lo_, hi_;
  std::vector<int> bins_;
  std::vector<std::uint64_t> counts_;
  std::uint64_t total_ = 0;
  std::uint64_t kept_ = 0;
};

struct MetricsReport {
  double kl_memorization = 0.0;
  double boundary_mass = 0.0;
  double nn_distance_p50 = 0.0;
  double nn_distance_p90 = 0.0;
  double nn_distance_p99 = 0.0;
  double offmanifold_variance = 0.0;
  double clipped_fraction = 0.0;
};

// D_KL(p_eps || hist) over the histogram bins; p_eps = p(x | eps) is
// integrated per bin with 4-point Gauss-Legendre per axis. Returns +inf
// (reported, not thrown) if p_eps mass falls into an empty bin.
inline double kl_memorization(const HistogramGrid& hist, const MixtureData& dist,
                              const ForwardSchedule& sched,
                              int gl_points_per_axis = 4) {
  if (gl_points_per_axis != 4)
    throw std::invalid_argument("kl_memorization: only 4-point rule supported");
  const int dim = hist.dim();
  double kl = 0.0;
  std::vector<int> offsets(static_cast<std::size_t>(dim), 0);
  for (std::size_t flat = 0; flat < hist.bin_count(); ++flat) {
    const Vec blo = hist.bin_lo(flat);
    // tensor Gauss-Legendre over the bin
    double p_bin = 0.0;
    const int n_pts = static_cast<int>(std::pow(4.0, dim));
    for (int pt = 0; pt < n_pts; ++pt) {
      int rem = pt;
      double w = 1.0;
      Vec x(dim);
      for (int d = 0; d < dim; ++d) {
        const int k = rem % 4;
        rem /= 4;
        const double half = 0.5 * hist.bin_width(d);
        x(d) = blo(d) + half * (1.0 + GaussLegendre4::nodes[k]);
        w *= half * GaussLegendre4::weights[k];
      }
      p_bin += w * std::exp(dist.log_marginal(sched, x, sched.cutoff()));
    }
    if (p_bin <= 0.0) continue;
    const double q_bin = hist.mass(flat);
    if (q_bin <= 0.0) return std::numeric_limits<double>::infinity();
    kl += p_bin * std::log(p_bin / q_bin);
  }
  return kl;
}

// Fraction of histogram mass lying between training points: bins whose
// center has boundary ratio > 1/2 at the reference time, excluding bins
// within exclude_bins bin-widths of a training point (the ratio also tends
// to 1 at the data points themselves, where the score vanishes faster than
// the proxy covariance; those bins measure memorization, not gap-filling).
inline double boundary_mass(const HistogramGrid& hist, const MixtureData& dist,
                            const ForwardSchedule& sched, double t_ref,
                            int exclude_bins = 3) {
  double max_width = 0.0;
  for (int d = 0; d < hist.dim(); ++d) max_width = std::max(max_width, hist.bin_width(d));
  const double excl = exclude_bins * max_width;
  double mass = 0.0;
  for (std::size_t flat = 0; flat < hist.bin_count(); ++flat) {
    if (hist.mass(flat) == 0.0) continue;
    const Vec c = hist.center(flat);
    bool near_data = false;
    for (Eigen::Index m = 0; m < dist.points().rows() && !near_data; ++m)
      near_data = (c - dist.points().row(m).transpose()).norm() <= excl;
    if (near_data) continue;
    if (boundary_ratio(dist, sched, c, t_ref) > 0.5) mass += hist.mass(flat);
  }
  return mass;
}

// Affine subspace given by a base point and orthonormal spanning directions
// (columns).
struct AffineSubspace {
  Vec point;
  Mat directions;  // D x r, orthonormal columns; r = 0 means a single point
};

// Mean squared distance of sample rows to the subspace.
inline double offmanifold_variance(const Mat& samples, const AffineSubspace& manifold) {
  if (samples.rows() == 0) return 0.0;
  double acc = 0.0;
  for (Eigen::Index i = 0; i < samples.rows(); ++i) {
    Vec r = samples.row(i).transpose() - manifold.point;
    if (manifold.directions.cols() > 0)
      r -= manifold.directions * (manifold.directions.transpose() * r);
    acc += r.squaredNorm();
  }
  return acc / static_cast<double>(samples.rows());
}

// Affine hull of the mixture points: centroid + orthonormal basis of the
// span of the centered points.
inline AffineSubspace affine_hull(const MixtureData& dist, double tol_rel = 1e-9) {
  AffineSubspace hull;
  const Mat& pts = dist.points();
  hull.point = pts.colwise().mean().transpose();
  Mat centered = pts.rowwise() - hull.point.transpose();
  Eigen::JacobiSVD<Mat> svd(centered, Eigen::ComputeThinV);
  const Vec& s = svd.singularValues();
  const double cutoff = s.size() ? tol_rel * s(0) : 0.0;
  int rank = 0;
  for (Eigen::Index i = 0; i < s.size(); ++i)
    if (s(i) > cutoff) ++rank;
  hull.directions = svd.matrixV().leftCols(rank);
  return hull;
}

// ---------------------------------------------------------------------------
// Ensemble experiment driver.

struct ExactScoreSpec {};
struct NaiveEstimatorSpec {
  double kappa = 1.0;
};
struct LinearEstimatorSpec {
  std::shared_ptr<const FeatureSet> features;
  int sample_count = 0;
  LinearFitOptions fit;
};
struct NtkEstimatorSpec {
  KernelFn kernel;
  int sample_count = 0;
  double tau = std::numeric_limits<double>::infinity();
};
using EstimatorSpec =
    std::variant<ExactScoreSpec, NaiveEstimatorSpec, LinearEstimatorSpec, NtkEstimatorSpec>;

struct SamplerSpec {
  int n_steps = 200;
  bool poly_grid = false;
  double rho = 7.0;
  int n_traj = 100;
  SamplerOptions options;
};

struct HistSpec {
  std::vector<int> bins;  // empty -> 256 (1-D) / 128 per axis (else)
  double pad_sigmas = 3.0;
  std::optional<Vec> lo;
  std::optional<Vec> hi;
};

struct EnsembleSpec {
  ForwardSchedule sched;
  MixtureData data;
  EstimatorSpec estimator;
  SamplerSpec sampler;
  int n_models = 100;
  std::uint64_t seed = 0;
  HistSpec hist;
  double boundary_t_ref = 0.25;
  TimeDist time_dist;  // defaulted to [eps, T] when lo == hi
  WeightFn lambda = unit_weight();
  std::optional<AffineSubspace> manifold;  // default: affine hull of the data
};

struct EnsembleResult {
  HistogramGrid hist;
  MetricsReport metrics;
  std::vector<Mat> model_samples;          // terminal samples per model
  std::vector<std::uint64_t> model_seeds;
  std::vector<int> failed_models;
};

namespace detail {

inline HistogramGrid make_histogram(const EnsembleSpec& spec) {
  const int dim = spec.data.dim();
  std::vector<int> bins = spec.hist.bins;
  if (bins.empty()) bins.assign(static_cast<std::size_t>(dim), dim == 1 ? 256 : 128);
  if (static_cast<int>(bins.size()) != dim)
    throw std::invalid_argument("HistSpec: bin count does not match data dimension");
  Vec lo(dim), hi(dim);
  const ScheduleCoeffs ct = spec.sched.coeffs(spec.sched.end_time());
  for (int d = 0; d < dim; ++d) {
    const double sigma_t = std::sqrt(ct.var_diag(d));
    lo(d) = spec.data.points().col(d).minCoeff() - spec.hist.pad_sigmas * sigma_t;
    hi(d) = spec.data.points().col(d).maxCoeff() + spec.hist.pad_sigmas * sigma_t;
  }
  if (spec.hist.lo) lo = *spec.hist.lo;
  if (spec.hist.hi) hi = *spec.hist.hi;
  return HistogramGrid(lo, hi, bins);
}

}  // namespace detail

// Trains n_models estimators on independent training-set draws, runs n_traj
// reverse trajectories per model from x_T ~ N(0, S_T), and aggregates
// terminals into the pooled histogram. Failed model fits are recorded and
// skipped; more than 10% failures aborts the run.
inline EnsembleResult run_ensemble(const EnsembleSpec& spec, int threads = 1) {
  if (spec.n_models < 1) throw std::invalid_argument("run_ensemble: n_models >= 1");
  const int dim = spec.data.dim();
  const ScheduleCoeffs end_coeffs = spec.sched.coeffs(spec.sched.end_time());
  const TimeGrid grid = spec.sampler.poly_grid
                            ? TimeGrid::edm_poly(spec.sched, spec.sampler.n_steps, spec.sampler.rho)
                            : TimeGrid::uniform(spec.sched, spec.sampler.n_steps);
  const TimeDist time_dist = spec.time_dist.lo < spec.time_dist.hi
                                 ? spec.time_dist
                                 : TimeDist::full(spec.sched);

  std::vector<Mat> model_samples(static_cast<std::size_t>(spec.n_models));
  std::vector<std::uint64_t> model_seeds(static_cast<std::size_t>(spec.n_models));
  std::vector<char> failed(static_cast<std::size_t>(spec.n_models), 0);

  parallel_for_index(static_cast<std::size_t>(spec.n_models), threads, [&](std::size_t i) {
    const std::uint64_t model_seed = derive_seed(spec.seed, stream::kModel, i);
    model_seeds[i] = model_seed;
    Rng model_rng(model_seed);
    try {
      ScoreField field;
      bool interleaved = false;
      double kappa = 0.0;
      if (std::holds_alternative<ExactScoreSpec>(spec.estimator)) {
        field = true_score_field(spec.data, spec.sched);
      } else if (const auto* nv = std::get_if<NaiveEstimatorSpec>(&spec.estimator)) {
        interleaved = true;
        kappa = nv->kappa;
      } else if (const auto* lin = std::get_if<LinearEstimatorSpec>(&spec.estimator)) {
        // fresh independent training set per model ("different sample draws")
        const std::vector<TrainingSample> samples = draw_training_set(
            spec.data, spec.sched, lin->sample_count, time_dist, spec.lambda, model_rng);
        field = fit_linear(lin->features, samples, lin->fit).field();
      } else {
        const auto& ntk = std::get<NtkEstimatorSpec>(spec.estimator);
        const std::vector<TrainingSample> samples = draw_training_set(
            spec.data, spec.sched, ntk.sample_count, time_dist, spec.lambda, model_rng);
        field = NtkModel::fit(ntk.kernel, samples, ntk.tau).field();
      }

      Mat terminals(spec.sampler.n_traj, dim);
      for (int j = 0; j < spec.sampler.n_traj; ++j) {
        Rng traj_rng(derive_seed(spec.seed, stream::kTrajectory,
                                 i * static_cast<std::uint64_t>(spec.sampler.n_traj) +
                                     static_cast<std::uint64_t>(j)));
        Vec x_start(dim);
        for (int d = 0; d < dim; ++d)
          x_start(d) = std::sqrt(end_coeffs.var_diag(d)) * traj_rng.normal();
        const TrajectoryRecord rec =
            interleaved
                ? naive_sample(spec.data, spec.sched, x_start, kappa, grid, traj_rng,
                               spec.sampler.options)
                : pfode_integrate(field, spec.sched, x_start, grid, spec.sampler.options);
        terminals.row(j) = rec.terminal.transpose();
      }
      model_samples[i] = std::move(terminals);
    } catch (const std::exception&) {
      failed[i] = 1;
    }
  });

  EnsembleResult result{detail::make_histogram(spec), {}, {}, {}, {}};
  for (std::size_t i = 0; i < model_samples.size(); ++i) {
    if (failed[i]) {
      result.failed_models.push_back(static_cast<int>(i));
      continue;
    }
    result.hist.add_rows(model_samples[i]);
  }
  if (10 * result.failed_models.size() > static_cast<std::size_t>(spec.n_models))
    throw numeric_error("run_ensemble: more than 10% of model fits failed (" +
                        std::to_string(result.failed_models.size()) + "/" +
                        std::to_string(spec.n_models) + ")");
  result.model_samples = std::move(model_samples);
  result.model_seeds = std::move(model_seeds);

  // metrics over the pooled terminals
  result.metrics.kl_memorization = kl_memorization(result.hist, spec.data, spec.sched);
  result.metrics.boundary_mass =
      boundary_mass(result.hist, spec.data, spec.sched, spec.boundary_t_ref);
  std::vector<double> nn;
  const AffineSubspace hull = spec.manifold ? *spec.manifold : affine_hull(spec.data);
  double off_acc = 0.0;
  std::size_t off_n = 0;
  for (std::size_t i = 0; i < result.model_samples.size(); ++i) {
    if (failed[i]) continue;
    const Mat& rows = result.model_samples[i];
    for (Eigen::Index r = 0; r < rows.rows(); ++r) {
      const Vec x = rows.row(r).transpose();
      double best = std::numeric_limits<double>::infinity();
      for (Eigen::Index m = 0; m < spec.data.points().rows(); ++m)
        best = std::min(best, (x - spec.data.points().row(m).transpose()).norm());
      nn.push_back(best);
      Vec rr = x - hull.point;
      if (hull.directions.cols() > 0)
        rr -= hull.directions * (hull.directions.transpose() * rr);
      off_acc += rr.squaredNorm();
      ++off_n;
    }
  }
  result.metrics.nn_distance_p50 = quantile(nn, 0.5);
  result.metrics.nn_distance_p90 = quantile(nn, 0.9);
  result.metrics.nn_distance_p99 = quantile(nn, 0.99);
  result.metrics.offmanifold_variance = off_n ? off_acc / static_cast<double>(off_n) : 0.0;
  result.metrics.clipped_fraction = result.hist.clipped_fraction();
  return result;
}

}  // namespace difflab
