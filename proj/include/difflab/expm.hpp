#pragma once

#include <Eigen/Dense>
#include <cmath>

#include "difflab/numerics.hpp"

namespace difflab {

namespace detail {

// (p,p)-Pade approximants to exp(A): after each helper, the approximant is
// (V + U)(V - U)^{-1}.
inline void expm_pade3(const Mat& a, Mat& u, Mat& v) {
  const double b[] = {120., 60., 12., 1.};
  const Mat a2 = a * a;
  const Mat id = Mat::Identity(a.rows(), a.cols());
  u.noalias() = a * (b[3] * a2 + b[1] * id);
  v = b[2] * a2 + b[0] * id;
}

inline void expm_pade5(const Mat& a, Mat& u, Mat& v) {
  const double b[] = {30240., 15120., 3360., 420., 30., 1.};
  const Mat a2 = a * a;
  const Mat a4 = a2 * a2;
  const Mat id = Mat::Identity(a.rows(), a.cols());
  u.noalias() = a * (b[5] * a4 + b[3] * a2 + b[1] * id);
  v = b[4] * a4 + b[2] * a2 + b[0] * id;
}

inline void expm_pade7(const Mat& a, Mat& u, Mat& v) {
  const double b[] = {17297280., 8648640., 1995840., 277200., 25200., 1512., 56., 1.};
  const Mat a2 = a * a;
  const Mat a4 = a2 * a2;
  const Mat a6 = a4 * a2;
  const Mat id = Mat::Identity(a.rows(), a.cols());
  u.noalias() = a * (b[7] * a6 + b[5] * a4 + b[3] * a2 + b[1] * id);
  v = b[6] * a6 + b[4] * a4 + b[2] * a2 + b[0] * id;
}

inline void expm_pade9(const Mat& a, Mat& u, Mat& v) {
  const double b[] = {17643225600., 8821612800., 2075673600., 302702400.,
                      30270240.,   2162160.,    110880.,     3960.,
                      90.,         1.};
  const Mat a2 = a * a;
  const Mat a4 = a2 * a2;
  const Mat a6 = a4 * a2;
  const Mat a8 = a6 * a2;
  const Mat id = Mat::Identity(a.rows(), a.cols());
  u.noalias() = a * (b[9] * a8 + b[7] * a6 + b[5] * a4 + b[3] * a2 + b[1] * id);
  v = b[8] * a8 + b[6] * a6 + b[4] * a4 + b[2] * a2 + b[0] * id;
}

inline void expm_pade13(const Mat& a, Mat& u, Mat& v) {
  const double b[] = {64764752532480000., 32382376266240000., 7771770303897600.,
                      1187353796428800.,  129060195264000.,   10559470521600.,
                      670442572800.,      33522128640.,       1323241920.,
                      40840800.,          960960.,            16380.,
                      182.,               1.};
  const Mat a2 = a * a;
  const Mat a4 = a2 * a2;
  const Mat a6 = a4 * a2;
  const Mat id = Mat::Identity(a.rows(), a.cols());
  Mat tmp = a6 * (b[13] * a6 + b[11] * a4 + b[9] * a2);
  tmp += b[7] * a6 + b[5] * a4 + b[3] * a2 + b[1] * id;
  u.noalias() = a * tmp;
  v = a6 * (b[12] * a6 + b[10] * a4 + b[8] * a2);
  v += b[6] * a6 + b[4] * a4 + b[2] * a2 + b[0] * id;
}

}  // namespace detail

// Dense matrix exponential, scaling-and-squaring with Pade approximants
// (degree chosen from the 1-norm as in Higham 2005). Intended for the
// P x P training-kernel matrices, P <= 2000.
inline Mat expm(const Mat& a) {
  if (a.rows() != a.cols()) throw std::invalid_argument("expm: square matrix required");
  if (a.rows() == 0) return a;
  if (!a.allFinite()) throw numeric_error("expm: non-finite input");

  const double norm = a.cwiseAbs().colwise().sum().maxCoeff();  // 1-norm
  Mat u, v;
  int squarings = 0;
  if (norm < 1.495585217958292e-2) {
    detail::expm_pade3(a, u, v);
  } else if (norm < 2.539398330063230e-1) {
    detail::expm_pade5(a, u, v);
  } else if (norm < 9.504178996162932e-1) {
    detail::expm_pade7(a, u, v);
  } else if (norm < 2.097847961257068e0) {
    detail::expm_pade9(a, u, v);
  } else {
    const double theta13 = 5.371920351148152e0;
    squarings = std::max(0, static_cast<int>(std::ceil(std::log2(norm / theta13))));
    const Mat scaled = a * std::pow(2.0, -squarings);
    detail::expm_pade13(scaled, u, v);
  }

  const Mat num = v + u;
  const Mat den = v - u;
  Eigen::PartialPivLU<Mat> lu(den);
  Mat result = lu.solve(num);
  if (!result.allFinite()) throw numeric_error("expm: Pade solve produced non-finite values");
  for (int i = 0; i < squarings; ++i) result = result * result;
  return result;
}

}  // namespace difflab
