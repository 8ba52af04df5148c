#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "difflab/config.hpp"
#include "difflab/ensemble.hpp"
#include "difflab/figures.hpp"
#include "difflab/io.hpp"
#include "difflab/vkernel.hpp"

namespace difflab {

// Typed view over a parsed config file. Numeric ranges are validated here,
// before any compute starts; every command below is a plain library call.
class ExperimentConfig {
 public:
  static ExperimentConfig load(const std::filesystem::path& path) {
    ExperimentConfig cfg;
    cfg.toml_ = TomlTable::load(path.string());
    cfg.base_dir_ = path.parent_path();
    return cfg;
  }

  static ExperimentConfig parse(const std::string& text) {
    ExperimentConfig cfg;
    cfg.toml_ = TomlTable::parse(text);
    return cfg;
  }

  const TomlTable& toml() const { return toml_; }

  MixtureData data() const {
    const double sigma0 = toml_.number("data", "sigma0", 0.0);
    if (toml_.has("data", "points"))
      return MixtureData(toml_.get("data", "points").as_matrix(), sigma0);
    if (toml_.has("data", "file"))
      return MixtureData(
          read_points_csv(base_dir_ / toml_.get("data", "file").as_string()), sigma0);
    throw config_error("[data] needs either points or file");
  }

  ForwardSchedule schedule(int dim, std::optional<double> eps_override = {}) const {
    const std::string kind = toml_.text("schedule", "kind", "edm");
    const double end_time = toml_.number("schedule", "T", 1.0);
    const double eps =
        eps_override ? *eps_override : toml_.number("schedule", "eps", 1e-3);
    if (!(eps > 0.0) || !(eps < end_time))
      throw config_error("[schedule] needs 0 < eps < T");
    if (kind == "edm") return ForwardSchedule::edm(dim, end_time, eps);
    if (kind == "vpsde")
      return ForwardSchedule::vp_sde(dim, toml_.number("schedule", "beta_min", 0.1),
                                     toml_.number("schedule", "beta_d", 19.9), end_time,
                                     eps);
    if (kind == "custom") {
      const double beta_min = toml_.number("schedule", "beta_min", 0.0);
      const double beta_d = toml_.number("schedule", "beta_d", 0.0);
      Vec g_scale = Vec::Ones(dim);
      if (toml_.has("schedule", "g_diag")) {
        const std::vector<double> g = toml_.get("schedule", "g_diag").as_number_list();
        if (static_cast<int>(g.size()) != dim)
          throw config_error("[schedule] g_diag length must equal the data dimension");
        for (int k = 0; k < dim; ++k) g_scale(k) = g[static_cast<std::size_t>(k)];
      }
      // per-axis scaled EDM-style amplitude g_k sqrt(2 t) plus optional decay
      return ForwardSchedule::custom(
          [beta_min, beta_d](double t) { return beta_min + beta_d * t; },
          [g_scale](double t) { return Vec(g_scale * std::sqrt(2.0 * t)); }, dim,
          end_time, eps);
    }
    throw config_error("[schedule] unknown kind '" + kind + "'");
  }

  WeightFn weight(const ForwardSchedule& sched) const {
    const std::string kind = toml_.text("weight", "kind", "one");
    if (kind == "one") return unit_weight();
    if (kind == "sigma2") {
      auto coeffs = [sched](double t) { return sched.coeffs(t).var_diag(0); };
      return coeffs;
    }
    throw config_error("[weight] unknown kind '" + kind + "'");
  }

  TimeDist time_dist(const ForwardSchedule& sched) const {
    TimeDist td = TimeDist::full(sched);
    td.lo = toml_.number("time", "lo", td.lo);
    td.hi = toml_.number("time", "hi", td.hi);
    if (!(td.lo >= sched.cutoff()) || !(td.hi <= sched.end_time()) || !(td.lo < td.hi))
      throw config_error("[time] range must satisfy eps <= lo < hi <= T");
    return td;
  }

  std::shared_ptr<const FeatureSet> features(const ForwardSchedule& sched, int dim,
                                             const std::string& prefix = "") const {
    const std::string kind =
        toml_.text("estimator", prefix + "features", prefix.empty() ? "gaussian" : "");
    const int t_count = static_cast<int>(toml_.integer("estimator", prefix + "t_count", 6));
    const bool log_t = toml_.text("estimator", prefix + "t_envelope", "log") == "log";
    const double t_lo = std::max(sched.cutoff(), 1e-4);
    const double width_t = toml_.number(
        "estimator", prefix + "width_t",
        log_t ? 0.8 * std::log(sched.end_time() / t_lo) / std::max(1, t_count - 1)
              : 0.35 * (sched.end_time() - sched.cutoff()));
    std::vector<double> t_centers;
    if (t_count > 0) t_centers = FeatureSet::log_spaced(t_lo, sched.end_time(), t_count);
    // x-centers must cover the noise support, not just the data box
    const double reach =
        3.2 * std::sqrt(sched.coeffs(sched.end_time()).var_diag.maxCoeff());
    if (kind == "gaussian") {
      const double x_lo = toml_.number("estimator", prefix + "x_lo", -reach);
      const double x_hi = toml_.number("estimator", prefix + "x_hi", reach);
      const int x_count = static_cast<int>(toml_.integer("estimator", prefix + "x_count", 25));
      const double width_x = toml_.number("estimator", prefix + "width_x",
                                          (x_hi - x_lo) / std::max(1, x_count - 1));
      return std::make_shared<FeatureSet>(FeatureSet::gaussian_grid(
          FeatureSet::centers_grid(x_lo, x_hi, x_count, dim), width_x, t_centers,
          width_t, log_t));
    }
    if (kind == "fourier") {
      const double base = toml_.number("estimator", prefix + "freq_base", 0.8);
      const int count = static_cast<int>(toml_.integer("estimator", prefix + "freq_count", 4));
      return std::make_shared<FeatureSet>(FeatureSet::fourier(
          FeatureSet::axis_frequencies(base, count, dim), t_centers, width_t, log_t));
    }
    throw config_error("[estimator] unknown feature kind '" + kind + "'");
  }

  LinearFitOptions fit_options() const {
    LinearFitOptions opts;
    opts.ridge = toml_.number("estimator", "ridge", 0.0);
    opts.allow_pseudoinverse = toml_.flag("estimator", "pseudoinverse", true);
    return opts;
  }

  EstimatorSpec estimator(const ForwardSchedule& sched, int dim) const {
    const std::string kind = toml_.text("estimator", "kind", "exact");
    if (kind == "exact") return ExactScoreSpec{};
    if (kind == "naive")
      return NaiveEstimatorSpec{toml_.number(
          "estimator", "kappa", toml_.number("sampler", "kappa", 1.0))};
    if (kind == "linear") {
      LinearEstimatorSpec spec;
      spec.features = features(sched, dim);
      spec.fit = fit_options();
      if (toml_.has("estimator", "P")) {
        spec.sample_count = static_cast<int>(toml_.get("estimator", "P").as_int());
      } else {
        const double ratio = toml_.number("estimator", "fp_ratio", 0.5);
        spec.sample_count =
            std::max(1, static_cast<int>(std::lround(spec.features->count() / ratio)));
      }
      return spec;
    }
    if (kind == "ntk") {
      NtkEstimatorSpec spec;
      spec.kernel = rbf_kernel(toml_.number("estimator", "length_x", 0.5),
                               toml_.number("estimator", "length_t", 0.5));
      spec.sample_count = static_cast<int>(toml_.integer("estimator", "P", 64));
      spec.tau = toml_.number("estimator", "tau",
                              std::numeric_limits<double>::infinity());
      return spec;
    }
    throw config_error("[estimator] unknown kind '" + kind + "'");
  }

  SamplerSpec sampler() const {
    SamplerSpec spec;
    spec.n_steps = static_cast<int>(toml_.integer("sampler", "n_steps", 200));
    spec.n_traj = static_cast<int>(toml_.integer("sampler", "n_traj", 100));
    spec.poly_grid = toml_.text("sampler", "grid", "uniform") == "poly";
    spec.rho = toml_.number("sampler", "rho", 7.0);
    if (spec.n_steps < 1 || spec.n_traj < 1)
      throw config_error("[sampler] n_steps and n_traj must be >= 1");
    return spec;
  }

  HistSpec hist() const {
    HistSpec spec;
    if (toml_.has("ensemble", "bins"))
      for (const TomlValue& v : toml_.get("ensemble", "bins").as_array())
        spec.bins.push_back(static_cast<int>(v.as_int()));
    spec.pad_sigmas = toml_.number("ensemble", "pad_sigmas", 3.0);
    if (toml_.has("ensemble", "hist_lo")) {
      const std::vector<double> lo = toml_.get("ensemble", "hist_lo").as_number_list();
      const std::vector<double> hi = toml_.get("ensemble", "hist_hi").as_number_list();
      spec.lo = Eigen::Map<const Vec>(lo.data(), static_cast<Eigen::Index>(lo.size()));
      spec.hi = Eigen::Map<const Vec>(hi.data(), static_cast<Eigen::Index>(hi.size()));
    }
    return spec;
  }

  std::uint64_t seed() const {
    return static_cast<std::uint64_t>(toml_.integer("ensemble", "seed", 0));
  }

  EnsembleSpec ensemble(std::optional<std::uint64_t> seed_override = {}) const {
    const MixtureData dist = data();
    const ForwardSchedule sched = schedule(dist.dim());
    EnsembleSpec spec{sched,
                      dist,
                      estimator(sched, dist.dim()),
                      sampler(),
                      static_cast<int>(toml_.integer("ensemble", "n_models", 100)),
                      seed_override ? *seed_override : seed(),
                      hist(),
                      toml_.number("ensemble", "t_ref", 0.25)};
    spec.time_dist = time_dist(sched);
    spec.lambda = weight(sched);
    if (spec.n_models < 1) throw config_error("[ensemble] n_models must be >= 1");
    return spec;
  }

  Fig1Spec fig1() const {
    Fig1Spec spec{data(), schedule(2), {}, Vec(2), Vec(2),
                  static_cast<int>(toml_.integer("fig1", "resolution", 192))};
    if (spec.data.dim() != 2) throw config_error("fig1 requires 2-D data");
    spec.t_list = toml_.has("fig1", "t_list")
                      ? toml_.get("fig1", "t_list").as_number_list()
                      : std::vector<double>{0.3, 1.0, 3.0};
    const double lo = toml_.number("fig1", "grid_lo", -2.5);
    const double hi = toml_.number("fig1", "grid_hi", 2.5);
    spec.grid_lo << lo, lo;
    spec.grid_hi << hi, hi;
    for (double t : spec.t_list)
      if (!(t >= spec.sched.cutoff()) || !(t <= spec.sched.end_time()))
        throw config_error("fig1 t_list values must lie in [eps, T]");
    return spec;
  }

  Fig2Spec fig2(std::optional<std::uint64_t> seed_override = {}) const {
    Fig2Spec spec;
    spec.data = data();
    if (spec.data.dim() != 1) throw config_error("fig2 requires 1-D data");
    const ExperimentConfig self = *this;
    spec.make_schedule = [self](double eps) { return self.schedule(1, eps); };
    spec.make_features = [self](const ForwardSchedule& s) { return self.features(s, 1); };
    spec.eps_list = toml_.get("fig2", "eps_list").as_number_list();
    spec.fp_list = toml_.get("fig2", "fp_list").as_number_list();
    for (double e : spec.eps_list)
      if (!(e > 0.0)) throw config_error("fig2 eps_list must be positive");
    for (double f : spec.fp_list)
      if (!(f > 0.0)) throw config_error("fig2 fp_list must be positive");
    spec.fit = fit_options();
    spec.sampler = sampler();
    spec.n_models = static_cast<int>(toml_.integer("ensemble", "n_models", 100));
    spec.seed = seed_override ? *seed_override : seed();
    spec.hist = hist();
    spec.t_ref = toml_.number("ensemble", "t_ref", 0.25);
    spec.lambda = weight(schedule(1));
    spec.exact_reference = toml_.flag("fig2", "exact_reference", true);
    return spec;
  }

  Fig3Spec fig3(std::optional<std::uint64_t> seed_override = {}) const {
    Fig3Spec spec{schedule(2)};
    spec.square_half = toml_.number("fig3", "square_half", 1.0);
    spec.rotation_deg = toml_.number("fig3", "rotation_deg", 45.0);
    const ExperimentConfig self = *this;
    spec.gaussian_features = [self](const ForwardSchedule& s) {
      return self.features(s, 2, "gauss_");
    };
    spec.fourier_features = [self](const ForwardSchedule& s) {
      return self.features(s, 2, "fourier_");
    };
    spec.fp_ratio = toml_.number("fig3", "fp_ratio", 0.5);
    spec.fit = fit_options();
    spec.sampler = sampler();
    spec.n_models = static_cast<int>(toml_.integer("ensemble", "n_models", 100));
    spec.seed = seed_override ? *seed_override : seed();
    spec.hist = hist();
    spec.t_ref = toml_.number("ensemble", "t_ref", 0.4);
    spec.lambda = weight(spec.sched);
    spec.corridor_radius = toml_.number("fig3", "corridor_radius", 0.3);
    spec.vertex_radius = toml_.number("fig3", "vertex_radius", 0.4);
    return spec;
  }

 private:
  TomlTable toml_;
  std::filesystem::path base_dir_;
};

// ---------------------------------------------------------------------------
// `sample` command: one estimator realization, n_traj reverse trajectories.

struct SampleRunResult {
  Mat terminals;  // n_traj x D
  std::vector<std::uint64_t> seeds;
  std::vector<TrajectoryRecord> trajectories;  // kept only when dumping
};

inline SampleRunResult run_sample(const EnsembleSpec& spec, bool keep_trajectories,
                                  int threads = 1) {
  const int dim = spec.data.dim();
  const ScheduleCoeffs end_coeffs = spec.sched.coeffs(spec.sched.end_time());
  const TimeGrid grid = spec.sampler.poly_grid
                            ? TimeGrid::edm_poly(spec.sched, spec.sampler.n_steps, spec.sampler.rho)
                            : TimeGrid::uniform(spec.sched, spec.sampler.n_steps);

  ScoreField field;
  bool interleaved = false;
  double kappa = 0.0;
  Rng model_rng(derive_seed(spec.seed, stream::kModel, 0));
  if (std::holds_alternative<ExactScoreSpec>(spec.estimator)) {
    field = true_score_field(spec.data, spec.sched);
  } else if (const auto* nv = std::get_if<NaiveEstimatorSpec>(&spec.estimator)) {
    interleaved = true;
    kappa = nv->kappa;
  } else if (const auto* lin = std::get_if<LinearEstimatorSpec>(&spec.estimator)) {
    const auto samples = draw_training_set(spec.data, spec.sched, lin->sample_count,
                                           spec.time_dist.lo < spec.time_dist.hi
                                               ? spec.time_dist
                                               : TimeDist::full(spec.sched),
                                           spec.lambda, model_rng);
    field = fit_linear(lin->features, samples, lin->fit).field();
  } else {
    const auto& ntk = std::get<NtkEstimatorSpec>(spec.estimator);
    const auto samples = draw_training_set(spec.data, spec.sched, ntk.sample_count,
                                           spec.time_dist.lo < spec.time_dist.hi
                                               ? spec.time_dist
                                               : TimeDist::full(spec.sched),
                                           spec.lambda, model_rng);
    field = NtkModel::fit(ntk.kernel, samples, ntk.tau).field();
  }

  SampleRunResult result;
  result.terminals.resize(spec.sampler.n_traj, dim);
  result.seeds.resize(static_cast<std::size_t>(spec.sampler.n_traj));
  if (keep_trajectories)
    result.trajectories.resize(static_cast<std::size_t>(spec.sampler.n_traj));
  parallel_for_index(static_cast<std::size_t>(spec.sampler.n_traj), threads,
                     [&](std::size_t j) {
    const std::uint64_t sd = derive_seed(spec.seed, stream::kTrajectory, j);
    Rng rng(sd);
    Vec x_start(dim);
    for (int d = 0; d < dim; ++d)
      x_start(d) = std::sqrt(end_coeffs.var_diag(d)) * rng.normal();
    TrajectoryRecord rec =
        interleaved ? naive_sample(spec.data, spec.sched, x_start, kappa, grid, rng,
                                   spec.sampler.options)
                    : pfode_integrate(field, spec.sched, x_start, grid, spec.sampler.options);
    rec.seed = sd;
    result.terminals.row(static_cast<Eigen::Index>(j)) = rec.terminal.transpose();
    result.seeds[j] = sd;
    if (keep_trajectories) result.trajectories[j] = std::move(rec);
  });
  return result;
}

inline void write_sample_outputs(const SampleRunResult& result,
                                 const std::filesystem::path& dir, bool dump_trajectories) {
  std::filesystem::create_directories(dir);
  CsvWriter csv(dir / "samples.csv");
  std::vector<std::string> names;
  for (Eigen::Index d = 0; d < result.terminals.cols(); ++d)
    names.push_back("x" + std::to_string(d));
  names.push_back("seed");
  csv.header(names);
  for (Eigen::Index r = 0; r < result.terminals.rows(); ++r) {
    std::vector<double> row(result.terminals.cols());
    for (Eigen::Index d = 0; d < result.terminals.cols(); ++d)
      row[static_cast<std::size_t>(d)] = result.terminals(r, d);
    csv.row_with_tag(row, result.seeds[static_cast<std::size_t>(r)]);
  }
  if (!dump_trajectories) return;
  for (std::size_t j = 0; j < result.trajectories.size(); ++j) {
    const TrajectoryRecord& rec = result.trajectories[j];
    CsvWriter traj(dir / ("trajectory_" + std::to_string(j) + ".csv"));
    std::vector<std::string> tn{"time"};
    for (Eigen::Index d = 0; d < result.terminals.cols(); ++d)
      tn.push_back("x" + std::to_string(d));
    traj.header(tn);
    for (std::size_t i = 0; i < rec.times.size(); ++i) {
      std::vector<double> row{rec.times[i]};
      for (Eigen::Index d = 0; d < rec.states[i].size(); ++d) row.push_back(rec.states[i](d));
      traj.row(row);
    }
  }
}

// ---------------------------------------------------------------------------
// `vkernel` command: evaluate a V-kernel on 1-D probe pairs, CSV out.

struct VKernelRunSpec {
  std::string kind;  // naive | linear | ntk
  std::vector<Probe> probes;
  double kappa = 0.5;
  double tau = 1.0;
  int mc_nodes = 20000;
};

inline VKernelRunSpec vkernel_spec_from_config(const ExperimentConfig& cfg) {
  VKernelRunSpec spec;
  spec.kind = cfg.toml().text("vkernel", "kind", "linear");
  spec.kappa = cfg.toml().number("vkernel", "kappa", 0.5);
  spec.tau = cfg.toml().number("vkernel", "tau", 1.0);
  spec.mc_nodes = static_cast<int>(cfg.toml().integer("vkernel", "mc_nodes", 20000));
  if (!cfg.toml().has("vkernel", "probes"))
    throw config_error("[vkernel] probes = [[x, t], ...] required");
  for (const TomlValue& row : cfg.toml().get("vkernel", "probes").as_array()) {
    const std::vector<double> xt = row.as_number_list();
    if (xt.size() != 2) throw config_error("[vkernel] probes must be [x, t] pairs (1-D)");
    Probe p;
    p.x = Vec::Constant(1, xt[0]);
    p.t = xt[1];
    spec.probes.push_back(std::move(p));
  }
  return spec;
}

inline void run_vkernel_command(const ExperimentConfig& cfg,
                                const std::filesystem::path& dir,
                                std::optional<std::uint64_t> seed_override) {
  const MixtureData dist = cfg.data();
  if (dist.dim() != 1) throw config_error("vkernel command expects a 1-D preset");
  const ForwardSchedule sched = cfg.schedule(1);
  const VKernelRunSpec spec = vkernel_spec_from_config(cfg);
  const std::uint64_t seed = seed_override ? *seed_override : cfg.seed();
  Rng rng(derive_seed(seed, stream::kNodes));
  const TimeDist td = cfg.time_dist(sched);
  const WeightFn weight = cfg.weight(sched);

  std::filesystem::create_directories(dir);
  CsvWriter csv(dir / "vkernel.csv");
  csv.header({"xi", "ti", "xj", "tj", "block_row", "block_col", "value", "mc_se"});

  std::optional<LinearVKernel> linear;
  std::optional<NtkVKernel> ntk;
  if (spec.kind == "linear")
    linear.emplace(cfg.features(sched, 1), dist, sched, spec.kappa, spec.mc_nodes, td,
                   weight, rng);
  else if (spec.kind == "ntk")
    ntk.emplace(cfg.features(sched, 1), dist, sched, spec.kappa, spec.tau, spec.mc_nodes,
                td, weight, rng);
  else if (spec.kind != "naive")
    throw config_error("[vkernel] unknown kind '" + spec.kind + "'");

  for (const Probe& a : spec.probes)
    for (const Probe& b : spec.probes) {
      VKernelValue v;
      if (linear) {
        v = linear->eval(a.x, a.t, b.x, b.t);
      } else if (ntk) {
        v = ntk->eval(a.x, a.t, b.x, b.t);
      } else {
        // white-in-time: diagonal in (t, t'), off-diagonal pairs are zero
        v.value = (a.x == b.x && a.t == b.t)
                      ? vkernel_naive(dist, sched, spec.kappa, a.x, a.t)
                      : Mat::Zero(1, 1);
        v.se = Mat::Zero(1, 1);
      }
      for (Eigen::Index r = 0; r < v.value.rows(); ++r)
        for (Eigen::Index c = 0; c < v.value.cols(); ++c)
          csv.row({a.x(0), a.t, b.x(0), b.t, static_cast<double>(r),
                   static_cast<double>(c), v.value(r, c), v.se(r, c)});
    }
}

}  // namespace difflab
