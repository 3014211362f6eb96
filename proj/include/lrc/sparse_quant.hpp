#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "lrc/linalg.hpp"

namespace lrc {

// Sparse-residual and quantization operators for W ~ BA + D. Single-shot
// operators only; training loops around them are out of scope.

/// Soft shrinkage T_alpha[x] = sign(x) (|x| - alpha)_+, the prox of alpha|.|_1.
inline Matrix soft_shrink(const Matrix& x, double alpha) {
  require(alpha >= 0.0, "soft_shrink: negative threshold");
  return x.unaryExpr([alpha](double v) {
    const double m = std::abs(v) - alpha;
    return m > 0.0 ? (v > 0.0 ? m : -m) : 0.0;
  });
}

/// Keep exactly the kappa largest-magnitude entries, zero the rest. Ties
/// break deterministically toward smaller row-major index.
inline Matrix hard_shrink_topk(const Matrix& d, Index kappa) {
  require(kappa >= 0 && kappa <= d.size(), "hard_shrink_topk: kappa out of range");
  if (kappa == d.size()) return d;
  Matrix out = Matrix::Zero(d.rows(), d.cols());
  if (kappa == 0) return out;

  std::vector<Index> idx(static_cast<size_t>(d.size()));
  std::iota(idx.begin(), idx.end(), Index{0});
  // d is row-major, so flat index order is row-major index order.
  std::partial_sort(idx.begin(), idx.begin() + kappa, idx.end(), [&](Index a, Index b) {
    const double ma = std::abs(d.data()[a]);
    const double mb = std::abs(d.data()[b]);
    if (ma != mb) return ma > mb;
    return a < b;
  });
  for (Index k = 0; k < kappa; ++k) out.data()[idx[static_cast<size_t>(k)]] = d.data()[idx[static_cast<size_t>(k)]];
  return out;
}

struct SparseResidual {
  Matrix D;
  Index nnz = 0;
  std::vector<double> objective_trace;  // F at each raw iterate
  std::vector<double> best_trace;       // running best, non-increasing
};

namespace detail {

// Deterministic power iteration for the top eigenvalue of a symmetric PSD
// matrix, 1e-8 relative tolerance.
inline double top_eigenvalue(const Matrix& c) {
  const Index n = c.rows();
  Vector v = Vector::Ones(n) / std::sqrt(static_cast<double>(n));
  double prev = 0.0;
  for (int it = 0; it < 10000; ++it) {
    Vector w = c * v;
    const double norm = w.norm();
    if (norm == 0.0) return 0.0;
    v = w / norm;
    const double cur = v.dot(c * v);
    if (std::abs(cur - prev) <= 1e-8 * std::max(std::abs(cur), 1e-300)) return cur;
    prev = cur;
  }
  return prev;
}

}  // namespace detail

/// FISTA for the sparse residual D minimizing
///   F(D) = ||(D + BA - W) C^(1/2)||^2 + lambda ||D||_1,
/// step 1/(2 L) from the top eigenvalue of C, Nesterov momentum mu_1 = 1.
/// Raw FISTA is not monotone, so the best iterate seen wins.
inline SparseResidual fista_sparse(const Matrix& w, const Matrix& ba, const Matrix& c,
                                   double lambda, Index iters) {
  require(lambda >= 0.0, "fista_sparse: negative lambda");
  require(iters >= 1, "fista_sparse: need at least one iteration");
  require(w.rows() == ba.rows() && w.cols() == ba.cols(), "fista_sparse: W/BA shape mismatch");
  require(c.rows() == w.cols() && c.cols() == w.cols(), "fista_sparse: C shape mismatch");
  if ((c - c.transpose()).norm() > 1e-8 * std::max(c.norm(), 1e-300))
    throw ArgumentError("fista_sparse: C not symmetric");

  Eigen::SelfAdjointEigenSolver<Matrix> eig(c);
  const double emax = eig.eigenvalues().cwiseAbs().maxCoeff();
  if (eig.eigenvalues().minCoeff() < -1e-10 * std::max(emax, 1e-300))
    throw ArgumentError("fista_sparse: C must be positive semidefinite");

  const double lip = std::max(detail::top_eigenvalue(c), 1e-300);
  const double step = 1.0 / (2.0 * lip);

  Matrix c_half = psd_sqrt(c);
  Matrix resid_base = ba - w;  // D + resid_base is the smooth-term residual
  auto objective = [&](const Matrix& d) {
    return ((d + resid_base) * c_half).squaredNorm() + lambda * d.cwiseAbs().sum();
  };

  SparseResidual out;
  Matrix d_prev = Matrix::Zero(w.rows(), w.cols());
  Matrix y = d_prev;
  double mu = 1.0;
  double best = objective(d_prev);
  Matrix d_best = d_prev;

  for (Index k = 0; k < iters; ++k) {
    Matrix grad = 2.0 * (y + resid_base) * c;
    Matrix d_cur = soft_shrink(y - step * grad, lambda * step);

    const double f = objective(d_cur);
    out.objective_trace.push_back(f);
    if (f < best) {
      best = f;
      d_best = d_cur;
    }
    out.best_trace.push_back(best);

    const double mu_next = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * mu * mu));
    y = d_cur + ((mu - 1.0) / mu_next) * (d_cur - d_prev);
    mu = mu_next;
    d_prev = d_cur;
  }

  out.D = d_best;
  out.nnz = 0;
  for (Index i = 0; i < out.D.size(); ++i)
    if (out.D.data()[i] != 0.0) ++out.nnz;
  return out;
}

struct QuantChunk {
  double lo = 0.0;
  double hi = 0.0;
};

struct QuantResult {
  Matrix values;
  std::vector<QuantChunk> chunks;
  int bits = 0;
  Index chunk_size = 0;
};

/// Chunk-wise q-bit uniform quantization over the row-major flattening.
/// Constant chunks round-trip exactly; otherwise the elementwise error is
/// bounded by (hi - lo) / (2 (2^q - 1)).
inline QuantResult uniform_quantize(const Matrix& x, int bits, Index chunk) {
  require(bits >= 1, "uniform_quantize: bits must be positive");
  require(chunk >= 1, "uniform_quantize: chunk must be positive");
  require(all_finite(x), "uniform_quantize: non-finite input");

  QuantResult out;
  out.values = x;
  out.bits = bits;
  out.chunk_size = chunk;
  const double levels = std::pow(2.0, bits) - 1.0;
  for (Index start = 0; start < x.size(); start += chunk) {
    const Index len = std::min(chunk, x.size() - start);
    double lo = x.data()[start], hi = x.data()[start];
    for (Index i = 1; i < len; ++i) {
      lo = std::min(lo, x.data()[start + i]);
      hi = std::max(hi, x.data()[start + i]);
    }
    out.chunks.push_back({lo, hi});
    if (hi == lo) continue;  // degenerate chunk stores exactly
    const double scale = levels / (hi - lo);
    for (Index i = 0; i < len; ++i) {
      const double v = x.data()[start + i];
      out.values.data()[start + i] = std::round((v - lo) * scale) / scale + lo;
    }
  }
  return out;
}

}  // namespace lrc
