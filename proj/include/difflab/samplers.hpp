#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "difflab/estimators.hpp"
#include "difflab/mixture.hpp"
#include "difflab/numerics.hpp"
#include "difflab/rng.hpp"
#include "difflab/schedule.hpp"

namespace difflab {

// Strictly decreasing integration grid T = t_0 > ... > t_N = eps.
struct TimeGrid {
  std::vector<double> times;

  int steps() const { return static_cast<int>(times.size()) - 1; }

  static TimeGrid uniform(const ForwardSchedule& sched, int n_steps) {
    if (n_steps < 1) throw std::invalid_argument("TimeGrid: n_steps >= 1 required");
    TimeGrid g;
    g.times.resize(static_cast<std::size_t>(n_steps) + 1);
    const double hi = sched.end_time(), lo = sched.cutoff();
    for (int i = 0; i <= n_steps; ++i)
      g.times[static_cast<std::size_t>(i)] =
          hi + (lo - hi) * static_cast<double>(i) / n_steps;
    g.times.front() = hi;
    g.times.back() = lo;
    return g;
  }

  // Polynomial spacing t_i = (T^(1/rho) + i/N (eps^(1/rho) - T^(1/rho)))^rho;
  // clusters steps near the cutoff, where score fields are stiff.
  static TimeGrid edm_poly(const ForwardSchedule& sched, int n_steps, double rho = 7.0) {
    if (n_steps < 1) throw std::invalid_argument("TimeGrid: n_steps >= 1 required");
    TimeGrid g;
    g.times.resize(static_cast<std::size_t>(n_steps) + 1);
    const double a = std::pow(sched.end_time(), 1.0 / rho);
    const double b = std::pow(sched.cutoff(), 1.0 / rho);
    for (int i = 0; i <= n_steps; ++i) {
      const double u = a + (b - a) * static_cast<double>(i) / n_steps;
      g.times[static_cast<std::size_t>(i)] = std::pow(u, rho);
    }
    g.times.front() = sched.end_time();
    g.times.back() = sched.cutoff();
    return g;
  }
};

struct TrajectoryRecord {
  std::vector<double> times;   // decimated subset of the grid, terminal included
  std::vector<Vec> states;
  Vec terminal;                // x_eps, always exact
  std::uint64_t seed = 0;
};

struct SamplerOptions {
  int max_recorded = 256;  // bound on stored states per trajectory
};

namespace detail {

struct Recorder {
  explicit Recorder(int grid_points, int max_recorded)
      : stride(std::max(1, (grid_points + max_recorded - 1) / max_recorded)) {}

  void push(TrajectoryRecord& rec, int index, double t, const Vec& x, bool last) const {
    if (index % stride == 0 || last) {
      rec.times.push_back(t);
      rec.states.push_back(x);
    }
  }

  int stride;
};

inline void check_state(const Vec& x, double t, int step) {
  if (!x.allFinite())
    throw numeric_error("sampler: non-finite state at step " + std::to_string(step) +
                        " (t = " + std::to_string(t) + ")");
}

// Backward Euler step of the reverse process from t to t - dt:
// x <- x + dt (beta_t x + D_t score).
inline Vec euler_step(const Vec& x, const ScheduleCoeffs& c, double dt, const Vec& score) {
  return x + dt * (c.beta * x + c.diff_diag.cwiseProduct(score).eval());
}

}  // namespace detail

// Deterministic probability-flow integration of x' = -beta x - D s from T
// down to eps with first-order Euler updates.
inline TrajectoryRecord pfode_integrate(const ScoreField& score,
                                        const ForwardSchedule& sched, const Vec& x_start,
                                        const TimeGrid& grid, SamplerOptions opts = {}) {
  TrajectoryRecord rec;
  const detail::Recorder recorder(static_cast<int>(grid.times.size()), opts.max_recorded);
  Vec x = x_start;
  recorder.push(rec, 0, grid.times.front(), x, false);
  for (int i = 0; i < grid.steps(); ++i) {
    const double t = grid.times[static_cast<std::size_t>(i)];
    const double dt = t - grid.times[static_cast<std::size_t>(i) + 1];
    const ScheduleCoeffs c = sched.coeffs(t);
    x = detail::euler_step(x, c, dt, score(x, t));
    detail::check_state(x, t, i);
    recorder.push(rec, i + 1, grid.times[static_cast<std::size_t>(i) + 1], x,
                  i + 1 == grid.steps());
  }
  rec.terminal = x;
  return rec;
}

inline TrajectoryRecord pfode_integrate(const ScoreField& score,
                                        const ForwardSchedule& sched, const Vec& x_start,
                                        int n_steps, SamplerOptions opts = {}) {
  return pfode_integrate(score, sched, x_start, TimeGrid::uniform(sched, n_steps), opts);
}

// Interleaved sampler: at each step a fresh x0 ~ p(x0 | x_t, t) builds the
// estimate s + sqrt(kappa/dt) (s~ - s), which drives the Euler update.
// kappa = 0 reduces to pfode_integrate bit-exactly on the same grid.
inline TrajectoryRecord naive_sample(const MixtureData& dist, const ForwardSchedule& sched,
                                     const Vec& x_start, double kappa, const TimeGrid& grid,
                                     Rng& rng, SamplerOptions opts = {}) {
  if (kappa < 0.0) throw std::invalid_argument("naive_sample: kappa >= 0 required");
  TrajectoryRecord rec;
  const detail::Recorder recorder(static_cast<int>(grid.times.size()), opts.max_recorded);
  Vec x = x_start;
  recorder.push(rec, 0, grid.times.front(), x, false);
  for (int i = 0; i < grid.steps(); ++i) {
    const double t = grid.times[static_cast<std::size_t>(i)];
    const double dt = t - grid.times[static_cast<std::size_t>(i) + 1];
    const ScheduleCoeffs c = sched.coeffs(t);
    Vec estimate = dist.true_score(sched, x, t);
    if (kappa > 0.0) {
      const Vec x0 = dist.sample_posterior(sched, x, t, rng);
      const Vec tgt = proxy_score(sched, x, x0, t);
      estimate += std::sqrt(kappa / dt) * (tgt - estimate);
    }
    x = detail::euler_step(x, c, dt, estimate);
    detail::check_state(x, t, i);
    recorder.push(rec, i + 1, grid.times[static_cast<std::size_t>(i) + 1], x,
                  i + 1 == grid.steps());
  }
  rec.terminal = x;
  return rec;
}

inline TrajectoryRecord naive_sample(const MixtureData& dist, const ForwardSchedule& sched,
                                     const Vec& x_start, double kappa, int n_steps,
                                     Rng& rng, SamplerOptions opts = {}) {
  return naive_sample(dist, sched, x_start, kappa, TimeGrid::uniform(sched, n_steps), rng,
                      opts);
}

// White-in-time noise amplitude A(x, t); the per-step noise increment is
// N(0, A dt).
using NoiseAmplitude = std::function<Mat(const Vec&, double)>;

// Euler-Maruyama integration (Ito convention, amplitude at step start) of
// x' = -beta x - D s_avg + xi, with xi white in time. A zero amplitude
// reproduces pfode_integrate exactly.
inline TrajectoryRecord effective_sde_sample(const ScoreField& mean_score,
                                             const NoiseAmplitude& white_v,
                                             const ForwardSchedule& sched,
                                             const Vec& x_start, const TimeGrid& grid,
                                             Rng& rng, SamplerOptions opts = {}) {
  TrajectoryRecord rec;
  const detail::Recorder recorder(static_cast<int>(grid.times.size()), opts.max_recorded);
  Vec x = x_start;
  const int dim = static_cast<int>(x.size());
  recorder.push(rec, 0, grid.times.front(), x, false);
  for (int i = 0; i < grid.steps(); ++i) {
    const double t = grid.times[static_cast<std::size_t>(i)];
    const double dt = t - grid.times[static_cast<std::size_t>(i) + 1];
    const ScheduleCoeffs c = sched.coeffs(t);
    const Mat amp = white_v(x, t);
    Mat root;
    try {
      root = sqrt_psd(amp);
    } catch (const numeric_error& e) {
      throw numeric_error("effective_sde_sample: amplitude at step " + std::to_string(i) +
                          ": " + e.what());
    }
    Vec noise(dim);
    for (int k = 0; k < dim; ++k) noise(k) = rng.normal();
    x = detail::euler_step(x, c, dt, mean_score(x, t)) + std::sqrt(dt) * (root * noise);
    detail::check_state(x, t, i);
    recorder.push(rec, i + 1, grid.times[static_cast<std::size_t>(i) + 1], x,
                  i + 1 == grid.steps());
  }
  rec.terminal = x;
  return rec;
}

}  // namespace difflab
