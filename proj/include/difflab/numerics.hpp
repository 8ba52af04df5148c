#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace difflab {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

// Raised when a computation produces non-finite values or hits a structural
// numeric problem (singular matrix without fallback, non-PSD amplitude, ...).
class numeric_error : public std::runtime_error {
 public:
  explicit numeric_error(const std::string& what) : std::runtime_error(what) {}
};

inline double logsumexp(std::span<const double> v) {
  double m = -std::numeric_limits<double>::infinity();
  for (double x : v) m = std::max(m, x);
  if (!std::isfinite(m)) return m;  // all -inf
  double s = 0.0;
  for (double x : v) s += std::exp(x - m);
  return m + std::log(s);
}

namespace detail {
inline double simpson(double fa, double fm, double fb, double a, double b) {
  return (b - a) / 6.0 * (fa + 4.0 * fm + fb);
}

inline double adaptive_simpson_rec(const std::function<double(double)>& f,
                                   double a, double m, double b, double fa,
                                   double fm, double fb, double whole,
                                   double tol, int depth) {
  const double lm = 0.5 * (a + m), rm = 0.5 * (m + b);
  const double flm = f(lm), frm = f(rm);
  const double left = simpson(fa, flm, fm, a, m);
  const double right = simpson(fm, frm, fb, m, b);
  const double delta = left + right - whole;
  if (depth <= 0 || std::abs(delta) <= 15.0 * tol)
    return left + right + delta / 15.0;
  return adaptive_simpson_rec(f, a, lm, m, fa, flm, fm, left, 0.5 * tol,
                              depth - 1) +
         adaptive_simpson_rec(f, m, rm, b, fm, frm, fb, right, 0.5 * tol,
                              depth - 1);
}
}  // namespace detail

// Adaptive Simpson quadrature with absolute tolerance.
inline double adaptive_simpson(const std::function<double(double)>& f,
                               double a, double b, double tol = 1e-10,
                               int max_depth = 40) {
  if (a == b) return 0.0;
  const double m = 0.5 * (a + b);
  const double fa = f(a), fm = f(m), fb = f(b);
  const double whole = detail::simpson(fa, fm, fb, a, b);
  return detail::adaptive_simpson_rec(f, a, m, b, fa, fm, fb, whole, tol,
                                      max_depth);
}

// 4-point Gauss-Legendre nodes/weights on [-1, 1].
struct GaussLegendre4 {
  static constexpr double nodes[4] = {-0.8611363115940526, -0.3399810435848563,
                                      0.3399810435848563, 0.8611363115940526};
  static constexpr double weights[4] = {0.3478548451374538, 0.6521451548625461,
                                        0.6521451548625461,
                                        0.3478548451374538};
};

// Moore-Penrose pseudoinverse; singular values below cutoff_rel * s_max are
// treated as zero.
inline Mat pseudo_inverse(const Mat& a, double cutoff_rel = 1e-10) {
  Eigen::JacobiSVD<Mat> svd(a, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const Vec& s = svd.singularValues();
  const double cutoff = s.size() ? cutoff_rel * s(0) : 0.0;
  Vec inv = Vec::Zero(s.size());
  for (Eigen::Index i = 0; i < s.size(); ++i)
    if (s(i) > cutoff) inv(i) = 1.0 / s(i);
  return svd.matrixV() * inv.asDiagonal() * svd.matrixU().transpose();
}

// Symmetric PSD square root; eigenvalues below -tol_rel * max_eig raise,
// small negatives are clipped to zero.
inline Mat sqrt_psd(const Mat& a, double tol_rel = 1e-10) {
  Eigen::SelfAdjointEigenSolver<Mat> es(a);
  if (es.info() != Eigen::Success)
    throw numeric_error("sqrt_psd: eigendecomposition failed");
  const Vec& ev = es.eigenvalues();
  const double max_ev = ev.size() ? std::max(ev.maxCoeff(), 0.0) : 0.0;
  Vec root = Vec::Zero(ev.size());
  for (Eigen::Index i = 0; i < ev.size(); ++i) {
    if (ev(i) < -tol_rel * std::max(max_ev, 1e-300))
      throw numeric_error("sqrt_psd: matrix is not PSD (min eigenvalue " +
                          std::to_string(ev(i)) + ")");
    root(i) = std::sqrt(std::max(ev(i), 0.0));
  }
  return es.eigenvectors() * root.asDiagonal() * es.eigenvectors().transpose();
}

inline double condition_number(const Mat& sym) {
  Eigen::SelfAdjointEigenSolver<Mat> es(sym);
  const Vec& ev = es.eigenvalues();
  const double lo = ev.minCoeff(), hi = ev.maxCoeff();
  if (lo <= 0.0) return std::numeric_limits<double>::infinity();
  return hi / lo;
}

// Pairwise (fixed-structure) summation: result is independent of how work
// was distributed across threads because inputs arrive in index order.
inline double pairwise_sum(std::span<const double> v) {
  if (v.size() <= 8) {
    double s = 0.0;
    for (double x : v) s += x;
    return s;
  }
  const std::size_t half = v.size() / 2;
  return pairwise_sum(v.subspan(0, half)) + pairwise_sum(v.subspan(half));
}

struct MeanVar {
  double mean = 0.0;
  double var = 0.0;  // unbiased
  std::size_t n = 0;
  double se() const { return n > 1 ? std::sqrt(var / static_cast<double>(n)) : 0.0; }
};

inline MeanVar mean_var(std::span<const double> v) {
  MeanVar r;
  r.n = v.size();
  if (r.n == 0) return r;
  r.mean = pairwise_sum(v) / static_cast<double>(r.n);
  if (r.n < 2) return r;
  double ss = 0.0;
  for (double x : v) ss += (x - r.mean) * (x - r.mean);
  r.var = ss / static_cast<double>(r.n - 1);
  return r;
}

inline double quantile(std::vector<double> v, double q) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(pos);
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return v[lo] * (1.0 - frac) + v[hi] * frac;
}

// Asymptotic Kolmogorov survival function Q(lambda) = 2 sum (-1)^{k-1} e^{-2 k^2 lambda^2}.
inline double kolmogorov_q(double lambda) {
  if (lambda < 1e-8) return 1.0;
  double sum = 0.0;
  double sign = 1.0;
  for (int k = 1; k <= 100; ++k) {
    const double term = std::exp(-2.0 * k * k * lambda * lambda);
    sum += sign * term;
    if (term < 1e-16) break;
    sign = -sign;
  }
  return std::clamp(2.0 * sum, 0.0, 1.0);
}

struct KsResult {
  double statistic = 0.0;
  double p_value = 1.0;
};

// Two-sample Kolmogorov-Smirnov test (1-D), asymptotic p-value with the
// Stephens small-sample correction.
inline KsResult ks_two_sample(std::vector<double> a, std::vector<double> b) {
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  const std::size_t n = a.size(), m = b.size();
  if (n == 0 || m == 0) throw std::invalid_argument("ks_two_sample: empty sample");
  double d = 0.0;
  std::size_t i = 0, j = 0;
  while (i < n && j < m) {
    const double x = std::min(a[i], b[j]);
    while (i < n && a[i] <= x) ++i;
    while (j < m && b[j] <= x) ++j;
    const double fa = static_cast<double>(i) / static_cast<double>(n);
    const double fb = static_cast<double>(j) / static_cast<double>(m);
    d = std::max(d, std::abs(fa - fb));
  }
  const double ne = static_cast<double>(n) * static_cast<double>(m) /
                    static_cast<double>(n + m);
  const double sq = std::sqrt(ne);
  KsResult r;
  r.statistic = d;
  r.p_value = kolmogorov_q((sq + 0.12 + 0.11 / sq) * d);
  return r;
}

inline void check_finite(const Vec& v, const char* where) {
  if (!v.allFinite()) throw numeric_error(std::string(where) + ": non-finite value");
}

}  // namespace difflab
