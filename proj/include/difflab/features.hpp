#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <numbers>
#include <stdexcept>
#include <utility>
#include <vector>

#include "difflab/numerics.hpp"

namespace difflab {

// A set of F smooth feature maps phi : (x, t) -> R^F for linear score models
// and for the whitened dictionaries behind the kernel V-kernels.
//
// Gaussian features factorize as exp(-|x - c_x|^2 / 2 w_x^2) * env(t);
// Fourier features are sin/cos of fixed frequency vectors in x, optionally
// modulated by the same Gaussian t-envelopes.
class FeatureSet {
 public:
  using EvalFn = std::function<void(const Vec& x, double t, Vec& out)>;

  FeatureSet(int count, int dim, EvalFn eval, std::string description)
      : count_(count), dim_(dim), eval_(std::move(eval)), description_(std::move(description)) {
    if (count_ < 1) throw std::invalid_argument("FeatureSet: F >= 1 required");
  }

  int count() const { return count_; }
  int dim() const { return dim_; }
  const std::string& description() const { return description_; }

  Vec eval(const Vec& x, double t) const {
    Vec out(count_);
    eval_(x, t, out);
    return out;
  }

  // Tensor grid of isotropic Gaussian bumps: every x-center paired with every
  // t-center. Pass an empty t_centers list for t-independent features. With
  // log_time the t-envelope acts on ln t, which resolves the score's growth
  // toward the cutoff with far fewer centers.
  static FeatureSet gaussian_grid(Mat x_centers, double width_x,
                                  std::vector<double> t_centers, double width_t,
                                  bool log_time = false) {
    const int dim = static_cast<int>(x_centers.cols());
    const int nt = t_centers.empty() ? 1 : static_cast<int>(t_centers.size());
    const int count = static_cast<int>(x_centers.rows()) * nt;
    auto centers = std::make_shared<Mat>(std::move(x_centers));
    auto tc = std::make_shared<std::vector<double>>(std::move(t_centers));
    if (log_time)
      for (double& c : *tc) c = std::log(c);
    auto fn = [centers, tc, width_x, width_t, log_time](const Vec& x, double t, Vec& out) {
      Eigen::Index f = 0;
      const double tv = log_time ? std::log(t) : t;
      for (Eigen::Index i = 0; i < centers->rows(); ++i) {
        const double dx2 = (x - centers->row(i).transpose()).squaredNorm();
        const double gx = std::exp(-dx2 / (2.0 * width_x * width_x));
        if (tc->empty()) {
          out(f++) = gx;
        } else {
          for (double ct : *tc) {
            const double dt = tv - ct;
            out(f++) = gx * std::exp(-dt * dt / (2.0 * width_t * width_t));
          }
        }
      }
    };
    return FeatureSet(count, dim, std::move(fn), "gaussian");
  }

  // sin/cos pairs of the given frequency vectors, times t-envelopes.
  static FeatureSet fourier(Mat frequencies, std::vector<double> t_centers,
                            double width_t, bool log_time = false) {
    const int dim = static_cast<int>(frequencies.cols());
    const int nt = t_centers.empty() ? 1 : static_cast<int>(t_centers.size());
    const int count = 2 * static_cast<int>(frequencies.rows()) * nt;
    auto freqs = std::make_shared<Mat>(std::move(frequencies));
    auto tc = std::make_shared<std::vector<double>>(std::move(t_centers));
    if (log_time)
      for (double& c : *tc) c = std::log(c);
    auto fn = [freqs, tc, width_t, log_time](const Vec& x, double t, Vec& out) {
      Eigen::Index f = 0;
      const double tv = log_time ? std::log(t) : t;
      for (Eigen::Index i = 0; i < freqs->rows(); ++i) {
        const double phase = freqs->row(i).dot(x);
        const double s = std::sin(phase), c = std::cos(phase);
        if (tc->empty()) {
          out(f++) = s;
          out(f++) = c;
        } else {
          for (double ct : *tc) {
            const double dt = tv - ct;
            const double env = std::exp(-dt * dt / (2.0 * width_t * width_t));
            out(f++) = s * env;
            out(f++) = c * env;
          }
        }
      }
    };
    return FeatureSet(count, dim, std::move(fn), "fourier");
  }

  // Arbitrary feature maps; used by tests for degenerate/realizable cases.
  static FeatureSet custom(int count, int dim, EvalFn fn) {
    return FeatureSet(count, dim, std::move(fn), "custom");
  }

  // Evenly spaced 1-D x-centers as an (n x 1) matrix.
  static Mat centers_1d(double lo, double hi, int n) {
    Mat c(n, 1);
    for (int i = 0; i < n; ++i)
      c(i, 0) = n == 1 ? 0.5 * (lo + hi) : lo + (hi - lo) * i / (n - 1.0);
    return c;
  }

  // Tensor-product grid of x-centers in d dimensions, n per axis.
  static Mat centers_grid(double lo, double hi, int n_per_axis, int dim) {
    int total = 1;
    for (int d = 0; d < dim; ++d) total *= n_per_axis;
    Mat c(total, dim);
    for (int i = 0; i < total; ++i) {
      int rem = i;
      for (int d = 0; d < dim; ++d) {
        const int idx = rem % n_per_axis;
        rem /= n_per_axis;
        c(i, d) = n_per_axis == 1 ? 0.5 * (lo + hi)
                                  : lo + (hi - lo) * idx / (n_per_axis - 1.0);
      }
    }
    return c;
  }

  // Axis-aligned frequency stack: multiples q, 2q, ..., nq along each axis.
  static Mat axis_frequencies(double base, int n_per_axis, int dim) {
    Mat f(n_per_axis * dim, dim);
    f.setZero();
    Eigen::Index r = 0;
    for (int d = 0; d < dim; ++d)
      for (int k = 1; k <= n_per_axis; ++k) f(r++, d) = base * k;
    return f;
  }

  static std::vector<double> log_spaced(double lo, double hi, int n) {
    std::vector<double> v(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
      const double frac = n == 1 ? 0.5 : i / (n - 1.0);
      v[static_cast<std::size_t>(i)] = lo * std::pow(hi / lo, frac);
    }
    return v;
  }

 private:
  int count_;
  int dim_;
  EvalFn eval_;
  std::string description_;
};

}  // namespace difflab
