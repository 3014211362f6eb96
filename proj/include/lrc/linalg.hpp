#pragma once

#include <algorithm>
#include <cmath>
#include <limits>

#include "lrc/common.hpp"

namespace lrc {

// Dense decomposition kernels shared by every compression routine.
// Exact (non-randomized) decompositions only; sizes here are desk-scale.

struct SvdResult {
  Matrix U;  // d' x r, orthonormal columns
  Vector S;  // r, descending, >= 0
  Matrix V;  // r x d, orthonormal rows; M ~ U * S.asDiagonal() * V
};

namespace detail {

// Deterministic sign gauge: each left-singular column gets a positive
// largest-magnitude entry; the paired right-singular row flips with it.
inline void fix_svd_signs(Matrix& u, Matrix& vt) {
  for (Index j = 0; j < u.cols(); ++j) {
    Index at = 0;
    u.col(j).cwiseAbs().maxCoeff(&at);
    if (u(at, j) < 0.0) {
      u.col(j) = -u.col(j);
      vt.row(j) = -vt.row(j);
    }
  }
}

inline void fix_row_signs(Matrix& rows) {
  for (Index i = 0; i < rows.rows(); ++i) {
    Index at = 0;
    rows.row(i).cwiseAbs().maxCoeff(&at);
    if (rows(i, at) < 0.0) rows.row(i) = -rows.row(i);
  }
}

// Jacobi is near machine precision for the sizes this artifact handles;
// fall back to BDC only for genuinely large inputs.
inline void thin_svd(const Matrix& m, Matrix& u, Vector& s, Matrix& vt) {
  if (std::max(m.rows(), m.cols()) <= 1024) {
    Eigen::JacobiSVD<Matrix> svd(m, Eigen::ComputeThinU | Eigen::ComputeThinV);
    u = svd.matrixU();
    s = svd.singularValues();
    vt = svd.matrixV().transpose();
  } else {
    Eigen::BDCSVD<Matrix> svd(m, Eigen::ComputeThinU | Eigen::ComputeThinV);
    u = svd.matrixU();
    s = svd.singularValues();
    vt = svd.matrixV().transpose();
  }
  fix_svd_signs(u, vt);
}

}  // namespace detail

/// Rank-r truncated SVD of M. The discarded spectrum is returned alongside so
/// callers can report the exact Frobenius residual without re-decomposing.
struct TruncatedSvd {
  SvdResult factors;
  Vector all_singular_values;
  double residual_sq = 0.0;  // sum of squared discarded singular values
};

inline TruncatedSvd truncated_svd_full(const Matrix& m, Index r) {
  require(all_finite(m), "truncated_svd: non-finite input");
  const Index k = std::min(m.rows(), m.cols());
  require(r >= 1 && r <= k, "truncated_svd: rank out of range");

  Matrix u, vt;
  Vector s;
  detail::thin_svd(m, u, s, vt);

  TruncatedSvd out;
  out.all_singular_values = s;
  out.factors.U = u.leftCols(r);
  out.factors.S = s.head(r);
  out.factors.V = vt.topRows(r);
  out.residual_sq = 0.0;
  for (Index i = r; i < s.size(); ++i) out.residual_sq += s[i] * s[i];
  return out;
}

inline SvdResult truncated_svd(const Matrix& m, Index r) {
  return truncated_svd_full(m, r).factors;
}

/// Symmetric PSD square root via eigendecomposition. Rejects asymmetric or
/// significantly indefinite inputs; eigenvalues above -1e-10*||C|| clamp to 0.
inline Matrix psd_sqrt(const Matrix& c) {
  require(all_finite(c), "psd_sqrt: non-finite input");
  require(c.rows() == c.cols(), "psd_sqrt: input must be square");
  const double scale = c.norm();
  if ((c - c.transpose()).norm() > 1e-8 * std::max(scale, 1e-300))
    throw ArgumentError("psd_sqrt: input not symmetric");

  Eigen::SelfAdjointEigenSolver<Matrix> eig((c + c.transpose()) * 0.5);
  Vector ev = eig.eigenvalues();
  const double emax = ev.size() ? ev.cwiseAbs().maxCoeff() : 0.0;
  // Eigenvalues at the roundoff floor must clamp to exactly zero, or the
  // square root amplifies them to sqrt(eps)-sized noise.
  const double floor = static_cast<double>(c.rows()) *
                       std::numeric_limits<double>::epsilon() * emax;
  for (Index i = 0; i < ev.size(); ++i) {
    if (ev[i] < -1e-10 * std::max(emax, 1e-300))
      throw ArgumentError("psd_sqrt: input significantly indefinite");
    ev[i] = ev[i] <= floor ? 0.0 : std::sqrt(ev[i]);
  }
  Matrix s = eig.eigenvectors() * ev.asDiagonal() * eig.eigenvectors().transpose();
  return (s + Matrix(s.transpose())) * 0.5;
}

/// Top-r right-singular subspace of M as r x cols orthonormal rows. For
/// symmetric PSD input these are the leading eigenvector rows.
inline Matrix right_singular(const Matrix& m, Index r) {
  require(all_finite(m), "right_singular: non-finite input");
  require(r >= 1 && r <= m.cols(), "right_singular: rank out of range");
  Matrix u, vt;
  Vector s;
  detail::thin_svd(m, u, s, vt);
  require(r <= vt.rows(), "right_singular: rank exceeds row budget");
  Matrix rows = vt.topRows(r);
  detail::fix_row_signs(rows);
  return rows;
}

inline double default_pinv_tol(const Matrix& m) {
  return static_cast<double>(std::max(m.rows(), m.cols())) *
         std::numeric_limits<double>::epsilon();
}

/// Moore-Penrose pseudo-inverse; singular values <= tol*sigma_max drop to 0.
/// tol < 0 selects the standard max(rows,cols)*eps rank cutoff.
inline Matrix pinv(const Matrix& m, double tol = -1.0) {
  require(all_finite(m), "pinv: non-finite input");
  if (m.size() == 0) return Matrix(m.cols(), m.rows());
  if (tol < 0.0) tol = default_pinv_tol(m);

  Matrix u, vt;
  Vector s;
  detail::thin_svd(m, u, s, vt);
  const double smax = s.size() ? s[0] : 0.0;
  Vector sinv = Vector::Zero(s.size());
  for (Index i = 0; i < s.size(); ++i)
    if (s[i] > tol * smax && s[i] > 0.0) sinv[i] = 1.0 / s[i];
  return vt.transpose() * sinv.asDiagonal() * u.transpose();
}

/// Numerical rank under the same cutoff pinv uses.
inline Index numeric_rank(const Matrix& m, double tol = -1.0) {
  if (m.size() == 0) return 0;
  if (tol < 0.0) tol = default_pinv_tol(m);
  Matrix u, vt;
  Vector s;
  detail::thin_svd(m, u, s, vt);
  const double smax = s.size() ? s[0] : 0.0;
  Index r = 0;
  for (Index i = 0; i < s.size(); ++i)
    if (s[i] > tol * smax && s[i] > 0.0) ++r;
  return r;
}

}  // namespace lrc
