#pragma once

#include <cmath>
#include <optional>

#include "lrc/linalg.hpp"

namespace lrc {

// Activation statistics feeding every compression routine. C is kept
// undivided by the sample length; all downstream math is scale-invariant in
// C, so normalization is a no-op.
struct CalibrationStats {
  Matrix C;    // auto-correlation X X^T + lambda I
  Matrix C0;   // centered covariance (X - mu 1^T)(X - mu 1^T)^T + lambda I
  Vector mu;   // mean token X 1 / l
  long long sample_len = 0;
  double lambda = 0.0;
  double lambda_rel = 0.0;

  Index dim() const { return C.rows(); }
};

enum class PreconditionerKind {
  Identity,
  DiagHessian,     // diag[(XX^T + lambda I)^-1]^(-1/2)
  DiagL1,          // diag[sum_j |X_ij|]^alpha
  DiagL2,          // diag[XX^T]^(1/2)
  Covariance,      // XX^T + lambda I
  RootCovariance,  // (XX^T + lambda I)^(1/2)
};

constexpr double kDefaultLambdaRel = 1e-4;
constexpr double kDefaultL1Alpha = 0.5;

/// Shrunk-estimator statistics from a d x l calibration window. The ridge is
/// trace-relative: lambda = lambda_rel * tr(XX^T)/d (lambda_rel itself when
/// X is all zero, so the damped C stays invertible).
inline CalibrationStats estimate_stats(const Matrix& x, double lambda_rel = kDefaultLambdaRel) {
  require(x.rows() >= 1 && x.cols() >= 1, "estimate_stats: empty activation matrix");
  require(lambda_rel >= 0.0, "estimate_stats: negative lambda_rel");
  require(all_finite(x), "estimate_stats: non-finite activations");

  const Index d = x.rows();
  const auto l = static_cast<double>(x.cols());
  const double trace = x.squaredNorm();
  const double lambda = trace > 0.0 ? lambda_rel * trace / static_cast<double>(d) : lambda_rel;

  CalibrationStats s;
  s.mu = x.rowwise().sum() / l;
  s.C = x * x.transpose() + lambda * Matrix::Identity(d, d);
  // The centered moment takes its ridge from the centered trace; a ridge tied
  // to the raw trace would break C0's shift invariance.
  Matrix centered = x.colwise() - s.mu;
  const double trace0 = centered.squaredNorm();
  const double lambda0 =
      trace0 > 0.0 ? lambda_rel * trace0 / static_cast<double>(d) : lambda_rel;
  s.C0 = centered * centered.transpose() + lambda0 * Matrix::Identity(d, d);
  s.sample_len = x.cols();
  s.lambda = lambda;
  s.lambda_rel = lambda_rel;
  return s;
}

/// Pre-conditioner P applied to weights before the truncated SVD. Diagonal
/// kinds clamp entries to >= 1e-12 so P stays invertible.
inline Matrix make_preconditioner(const CalibrationStats& stats, PreconditionerKind kind,
                                  const Matrix* raw_x = nullptr,
                                  double l1_alpha = kDefaultL1Alpha) {
  const Index d = stats.dim();
  constexpr double kDiagFloor = 1e-12;

  switch (kind) {
    case PreconditionerKind::Identity:
      return Matrix::Identity(d, d);

    case PreconditionerKind::DiagHessian: {
      Matrix cinv = pinv(stats.C);
      Vector p(d);
      for (Index i = 0; i < d; ++i)
        p[i] = std::max(1.0 / std::sqrt(std::max(cinv(i, i), kDiagFloor)), kDiagFloor);
      return Matrix(p.asDiagonal());
    }

    case PreconditionerKind::DiagL1: {
      if (raw_x == nullptr)
        throw ArgumentError("make_preconditioner: DiagL1 needs raw activations");
      require(raw_x->rows() == d, "make_preconditioner: raw activation dim mismatch");
      Vector p(d);
      for (Index i = 0; i < d; ++i) {
        const double s = raw_x->row(i).cwiseAbs().sum();
        p[i] = std::max(std::pow(std::max(s, 0.0), l1_alpha), kDiagFloor);
      }
      return Matrix(p.asDiagonal());
    }

    case PreconditionerKind::DiagL2: {
      Vector p(d);
      for (Index i = 0; i < d; ++i) {
        const double undamped = std::max(stats.C(i, i) - stats.lambda, 0.0);
        p[i] = std::max(std::sqrt(undamped), kDiagFloor);
      }
      return Matrix(p.asDiagonal());
    }

    case PreconditionerKind::Covariance:
      return stats.C;

    case PreconditionerKind::RootCovariance:
      return psd_sqrt(stats.C);
  }
  throw ArgumentError("make_preconditioner: unknown kind");
}

/// Recompute statistics as if the additive positional embedding E had been
/// part of the window: X' = raw_X + E, same damping policy.
inline CalibrationStats additive_pe_adjust(const CalibrationStats& stats, const Matrix& e,
                                           const Matrix& raw_x) {
  require(e.rows() == raw_x.rows() && e.cols() == raw_x.cols(),
          "additive_pe_adjust: embedding/activation shape mismatch");
  require(raw_x.rows() == stats.dim() && raw_x.cols() == stats.sample_len,
          "additive_pe_adjust: window does not match stats");
  return estimate_stats(raw_x + e, stats.lambda_rel);
}

}  // namespace lrc
