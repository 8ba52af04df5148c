#pragma once

#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <variant>

#include "difflab/numerics.hpp"
#include "difflab/rng.hpp"

namespace difflab {

// Coefficients of the forward process at a single time: decay alpha_t,
// drift beta_t, and the diagonals of the marginal covariance S_t and the
// diffusion tensor D_t = g_t^2 / 2.
struct ScheduleCoeffs {
  double alpha = 1.0;
  double beta = 0.0;
  Vec var_diag;   // diag of S_t
  Vec diff_diag;  // diag of D_t
};

struct VpSde {
  double beta_min = 0.1;
  double beta_d = 19.9;
};

struct EdmProcess {};

// Generic diagonal-anisotropic process: beta(t) plus a per-axis noise
// amplitude g(t). S_t is obtained by adaptive quadrature of 2 D alpha^2.
struct CustomDiagonal {
  std::function<double(double)> beta;
  std::function<Vec(double)> g_diag;
};

/// Time-dependent coefficient schedule of the forward process x' = -beta x + g eta.
///
/// alpha_t = exp(-int_0^t beta), S_t = int_0^t 2 D alpha^2, with D = g^2/2.
/// All quantities are diagonal; anisotropy enters only through per-axis g.
class ForwardSchedule {
 public:
  using Kind = std::variant<VpSde, EdmProcess, CustomDiagonal>;

  ForwardSchedule(Kind kind, int dim, double end_time = 1.0, double cutoff = 1e-3)
      : kind_(std::move(kind)), dim_(dim), end_time_(end_time), cutoff_(cutoff) {
    if (dim_ < 1) throw std::invalid_argument("ForwardSchedule: dim must be >= 1");
    if (!(cutoff_ > 0.0) || !(cutoff_ < end_time_))
      throw std::invalid_argument("ForwardSchedule: need 0 < eps < T");
    if (coeffs(cutoff_).alpha <= 0.0)
      throw std::invalid_argument("ForwardSchedule: alpha at cutoff must be positive");
  }

  static ForwardSchedule vp_sde(int dim, double beta_min = 0.1, double beta_d = 19.9,
                                double end_time = 1.0, double cutoff = 1e-3) {
    return ForwardSchedule(VpSde{beta_min, beta_d}, dim, end_time, cutoff);
  }
  static ForwardSchedule edm(int dim, double end_time = 1.0, double cutoff = 1e-3) {
    return ForwardSchedule(EdmProcess{}, dim, end_time, cutoff);
  }
  static ForwardSchedule custom(std::function<double(double)> beta,
                                std::function<Vec(double)> g_diag, int dim,
                                double end_time, double cutoff) {
    return ForwardSchedule(CustomDiagonal{std::move(beta), std::move(g_diag)}, dim,
                           end_time, cutoff);
  }

  int dim() const { return dim_; }
  double end_time() const { return end_time_; }
  double cutoff() const { return cutoff_; }

  ScheduleCoeffs coeffs(double t) const {
    check_time(t);
    ScheduleCoeffs c;
    if (const auto* vp = std::get_if<VpSde>(&kind_)) {
      const double integral = vp->beta_min * t + 0.5 * vp->beta_d * t * t;
      c.alpha = std::exp(-integral);
      c.beta = vp->beta_min + vp->beta_d * t;
      const double sigma2 = 1.0 - std::exp(-2.0 * integral);
      c.var_diag = Vec::Constant(dim_, sigma2);
      c.diff_diag = Vec::Constant(dim_, c.beta);  // g^2/2 = beta
    } else if (std::holds_alternative<EdmProcess>(kind_)) {
      c.alpha = 1.0;
      c.beta = 0.0;
      c.var_diag = Vec::Constant(dim_, t * t);
      c.diff_diag = Vec::Constant(dim_, t);  // g = sqrt(2 t)
    } else {
      const auto& cd = std::get<CustomDiagonal>(kind_);
      c.beta = cd.beta(t);
      const double integral =
          adaptive_simpson([&](double u) { return cd.beta(u); }, 0.0, t, 1e-12);
      c.alpha = std::exp(-integral);
      c.diff_diag = cd.g_diag(t).array().square() * 0.5;
      c.var_diag = Vec(dim_);
      for (int k = 0; k < dim_; ++k) {
        c.var_diag(k) = adaptive_simpson(
            [&](double u) {
              const double au = std::exp(
                  -adaptive_simpson([&](double w) { return cd.beta(w); }, 0.0, u, 1e-12));
              const double g = cd.g_diag(u)(k);
              return g * g * au * au;  // 2 D alpha^2 = g^2 alpha^2
            },
            0.0, t, 1e-10);
      }
    }
    return c;
  }

  double alpha(double t) const { return coeffs(t).alpha; }

  // Isotropic noise scale sigma_t. Throws for anisotropic schedules.
  double sigma(double t) const {
    const ScheduleCoeffs c = coeffs(t);
    require_isotropic(c);
    return std::sqrt(c.var_diag(0));
  }

  bool is_isotropic() const {
    if (!std::holds_alternative<CustomDiagonal>(kind_)) return true;
    const Vec g = std::get<CustomDiagonal>(kind_).g_diag(end_time_);
    return (g.array() - g(0)).abs().maxCoeff() == 0.0;
  }

  // One draw from the transition kernel p(x | x0, t) = N(alpha_t x0, S_t).
  Vec transition_sample(const Vec& x0, double t, Rng& rng) const {
    const ScheduleCoeffs c = coeffs(t);
    Vec x(dim_);
    for (int k = 0; k < dim_; ++k)
      x(k) = c.alpha * x0(k) + std::sqrt(c.var_diag(k)) * rng.normal();
    return x;
  }

  static void require_isotropic(const ScheduleCoeffs& c) {
    const double ref = c.var_diag(0);
    for (Eigen::Index k = 1; k < c.var_diag.size(); ++k)
      if (c.var_diag(k) != ref)
        throw std::invalid_argument("schedule: operation requires isotropic S_t");
  }

 private:
  void check_time(double t) const {
    if (!(t >= cutoff_) || !(t <= end_time_))
      throw std::out_of_range("schedule: t=" + std::to_string(t) +
                              " outside [eps, T] = [" + std::to_string(cutoff_) +
                              ", " + std::to_string(end_time_) + "]");
  }

  Kind kind_;
  int dim_;
  double end_time_;
  double cutoff_;
};

}  // namespace difflab
