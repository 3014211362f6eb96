#pragma once

#include <optional>
#include <utility>
#include <vector>

#include "lrc/calibration.hpp"
#include "lrc/linalg.hpp"

namespace lrc {

// Single-layer activation-aware compression: whitened truncated SVD plus the
// storage gauges a junction matrix buys. The product B*A never changes under
// a gauge switch; only the stored-parameter accounting does.

enum class JunctionForm {
  LeftSingular,    // singular values live in B, A rows orthonormal
  RightSingular,   // singular values live in A, B columns orthonormal
  Symmetric,       // split sqrt(S) across both
  BlockIdentityA,  // A = [I | V1^+ V2] under a column permutation
  BlockIdentityB,  // mirrored construction on B^T
  LU,              // triangular r x r leading blocks on both sides
};

struct LowRankFactor {
  Matrix B;  // d' x r
  Matrix A;  // r x d
  std::optional<Vector> bias;
  JunctionForm junction_form = JunctionForm::LeftSingular;
  std::optional<std::vector<Index>> col_perm;  // BlockIdentityA / LU pivoting
  std::optional<std::vector<Index>> row_perm;  // BlockIdentityB pivoting
  long long stored_params = 0;
  double whitened_loss = 0.0;

  Index out_dim() const { return B.rows(); }
  Index in_dim() const { return A.cols(); }
  Index rank() const { return B.cols(); }
  Matrix reconstruct() const { return B * A; }
};

inline long long junction_stored_params(JunctionForm form, Index d_out, Index d_in, Index r) {
  const long long dense = static_cast<long long>(r) * (d_out + d_in);
  switch (form) {
    case JunctionForm::LeftSingular:
    case JunctionForm::RightSingular:
    case JunctionForm::Symmetric:
      return dense;
    case JunctionForm::BlockIdentityA:
    case JunctionForm::BlockIdentityB:
    case JunctionForm::LU:
      return dense - static_cast<long long>(r) * r;
  }
  return dense;
}

/// Whitened rank-r factorization of W: with USV = svd_r(W P), B = U diag(S)
/// and A = V P^-1 (LeftSingular gauge). When P is the PSD root of the
/// activation auto-correlation this minimizes ||(W - BA) C^(1/2)||^2.
inline LowRankFactor compress_local(const Matrix& w, const Matrix& p, Index r) {
  require(all_finite(w), "compress_local: non-finite weight");
  require(p.rows() == w.cols() && p.cols() == w.cols(),
          "compress_local: preconditioner shape mismatch");
  require(r >= 1 && r <= std::min(w.rows(), w.cols()), "compress_local: rank out of range");

  // Invert P through its SVD; a whitening matrix at tiny damping can sit
  // right at the edge of singularity.
  Matrix pu, pvt;
  Vector ps;
  detail::thin_svd(p, pu, ps, pvt);
  const double cutoff = default_pinv_tol(p) * (ps.size() ? ps[0] : 0.0);
  if (ps.size() == 0 || ps.minCoeff() <= cutoff)
    throw NumericError("compress_local: singular preconditioner");
  Matrix p_inv = pvt.transpose() * ps.cwiseInverse().asDiagonal() * pu.transpose();

  auto svd = truncated_svd_full(w * p, r);
  LowRankFactor f;
  f.B = svd.factors.U * svd.factors.S.asDiagonal();
  f.A = svd.factors.V * p_inv;
  f.junction_form = JunctionForm::LeftSingular;
  f.stored_params = junction_stored_params(f.junction_form, w.rows(), w.cols(), r);
  f.whitened_loss = svd.residual_sq;
  return f;
}

/// Optimal bias under the factor: b_hat = b + (W - BA) mu. The corrected loss
/// on the calibration window then whitens with the centered covariance.
inline Vector bias_update_local(const Matrix& w, const LowRankFactor& factor,
                                const CalibrationStats& stats, const Vector& b) {
  require(w.rows() == factor.out_dim() && w.cols() == factor.in_dim(),
          "bias_update_local: weight/factor shape mismatch");
  require(b.size() == w.rows(), "bias_update_local: bias length mismatch");
  require(stats.mu.size() == w.cols(), "bias_update_local: stats dim mismatch");
  return b + (w * stats.mu - factor.B * (factor.A * stats.mu));
}

namespace detail {

// Greedy rank-revealing column pivots: indices of r independent columns,
// accepted while the elimination pivot clears 1e-10 * max|A|.
inline std::vector<Index> pivot_columns(const Matrix& a, Index r) {
  Eigen::ColPivHouseholderQR<Matrix> qr(a);
  const double scale = a.cwiseAbs().maxCoeff();
  const Matrix rmat = qr.matrixQR().template triangularView<Eigen::Upper>();
  std::vector<Index> piv;
  for (Index k = 0; k < std::min<Index>(r, rmat.rows()); ++k) {
    if (std::abs(rmat(k, k)) <= 1e-10 * scale) break;
    piv.push_back(qr.colsPermutation().indices()[k]);
  }
  if (static_cast<Index>(piv.size()) < r)
    throw NumericError("apply_junction: no invertible pivot block (rank-deficient factor)");
  return piv;
}

inline std::vector<Index> full_permutation(const std::vector<Index>& piv, Index n) {
  std::vector<bool> used(n, false);
  for (Index i : piv) used[i] = true;
  std::vector<Index> perm = piv;
  for (Index i = 0; i < n; ++i)
    if (!used[i]) perm.push_back(i);
  return perm;
}

// Re-canonicalize B*A as U diag(s) Vt with orthonormal U columns / Vt rows.
inline void canonical_svd_of_product(const Matrix& b, const Matrix& a, Matrix& u, Vector& s,
                                     Matrix& vt) {
  const Index r = b.cols();
  Eigen::HouseholderQR<Matrix> qb(b);
  Matrix qb_thin = qb.householderQ() * Matrix::Identity(b.rows(), r);
  Matrix rb = Matrix(qb.matrixQR().topRows(r).template triangularView<Eigen::Upper>());
  Eigen::HouseholderQR<Matrix> qa(Matrix(a.transpose()));
  Matrix qa_thin = qa.householderQ() * Matrix::Identity(a.cols(), r);
  Matrix ra = Matrix(qa.matrixQR().topRows(r).template triangularView<Eigen::Upper>());

  Matrix core = rb * ra.transpose();  // r x r
  Matrix cu, cvt;
  Vector cs;
  thin_svd(core, cu, cs, cvt);
  u = qb_thin * cu;
  s = cs;
  vt = cvt * qa_thin.transpose();
  fix_svd_signs(u, vt);
}

}  // namespace detail

/// Switch the factor's junction gauge. B'A' equals BA to roundoff; only the
/// storage form and stored_params change. Re-applying the current form is a
/// no-op.
inline LowRankFactor apply_junction(const LowRankFactor& factor, JunctionForm form) {
  if (form == factor.junction_form) return factor;

  const Index d_out = factor.out_dim();
  const Index d_in = factor.in_dim();
  const Index r = factor.rank();
  LowRankFactor out = factor;
  out.col_perm.reset();
  out.row_perm.reset();
  out.junction_form = form;
  out.stored_params = junction_stored_params(form, d_out, d_in, r);

  switch (form) {
    case JunctionForm::LeftSingular:
    case JunctionForm::RightSingular:
    case JunctionForm::Symmetric: {
      Matrix u, vt;
      Vector s;
      detail::canonical_svd_of_product(factor.B, factor.A, u, s, vt);
      if (form == JunctionForm::LeftSingular) {
        out.B = u * s.asDiagonal();
        out.A = vt;
      } else if (form == JunctionForm::RightSingular) {
        out.B = u;
        out.A = s.asDiagonal() * vt;
      } else {
        Vector root = s.cwiseSqrt();
        out.B = u * root.asDiagonal();
        out.A = root.asDiagonal() * vt;
      }
      return out;
    }

    case JunctionForm::BlockIdentityA: {
      auto piv = detail::pivot_columns(factor.A, r);
      Matrix v1(r, r);
      for (Index k = 0; k < r; ++k) v1.col(k) = factor.A.col(piv[k]);
      Eigen::PartialPivLU<Matrix> lu(v1);
      out.A = lu.solve(factor.A);
      for (Index k = 0; k < r; ++k) {
        out.A.col(piv[k]).setZero();
        out.A(k, piv[k]) = 1.0;
      }
      out.B = factor.B * v1;
      out.col_perm = detail::full_permutation(piv, d_in);
      return out;
    }

    case JunctionForm::BlockIdentityB: {
      auto piv = detail::pivot_columns(Matrix(factor.B.transpose()), r);
      Matrix u1(r, r);
      for (Index k = 0; k < r; ++k) u1.row(k) = factor.B.row(piv[k]);
      Eigen::PartialPivLU<Matrix> lu(Matrix(u1.transpose()));
      out.B = lu.solve(Matrix(factor.B.transpose())).transpose();
      for (Index k = 0; k < r; ++k) {
        out.B.row(piv[k]).setZero();
        out.B(piv[k], k) = 1.0;
      }
      out.A = u1 * factor.A;
      out.row_perm = detail::full_permutation(piv, d_out);
      return out;
    }

    case JunctionForm::LU: {
      // Block identity on A first, then shift a triangular factor of B's
      // leading block across the junction: B block becomes unit-lower under
      // a row permutation, A's pivot block upper-triangular. Same r^2 saving.
      LowRankFactor bi = apply_junction(factor, JunctionForm::BlockIdentityA);
      Matrix b1 = bi.B.topRows(r);
      Eigen::PartialPivLU<Matrix> lu(b1);
      Matrix upper = lu.matrixLU().template triangularView<Eigen::Upper>();
      const double scale = std::max(b1.cwiseAbs().maxCoeff(), 1e-300);
      bool ok = true;
      for (Index k = 0; k < r; ++k)
        if (std::abs(upper(k, k)) <= 1e-10 * scale) ok = false;
      if (!ok) return bi;  // ill-conditioned block: keep BlockIdentityA

      out = bi;
      out.junction_form = JunctionForm::LU;
      Matrix upper_inv = upper.template triangularView<Eigen::Upper>().solve(
          Matrix::Identity(r, r));
      out.B = bi.B * upper_inv;
      out.A = upper * bi.A;
      std::vector<Index> rperm(static_cast<size_t>(r));
      const auto& lu_perm = lu.permutationP().indices();
      for (Index k = 0; k < r; ++k) rperm[static_cast<size_t>(lu_perm[k])] = k;
      out.row_perm = std::vector<Index>(rperm.begin(), rperm.end());
      return out;
    }
  }
  throw ArgumentError("apply_junction: unknown form");
}

/// Stacked rank-r factorization of [Wq; Wk; Wv] with a shared compression
/// matrix A. Equivalent to compress_local on the vertical stack.
inline LowRankFactor compress_joint_qkv(const Matrix& wq, const Matrix& wk, const Matrix& wv,
                                        const Matrix& p, Index r) {
  require(wq.cols() == wk.cols() && wk.cols() == wv.cols(),
          "compress_joint_qkv: column count mismatch");
  require(wq.rows() == wk.rows() && wk.rows() == wv.rows(),
          "compress_joint_qkv: row count mismatch");
  Matrix stacked(wq.rows() + wk.rows() + wv.rows(), wq.cols());
  stacked << wq, wk, wv;
  return compress_local(stacked, p, r);
}

/// Per-head whitened SVD baseline: independent factorization of each head
/// slice. Exists for comparison only; the block-diagonal B it implies is a
/// strict restriction of the dense decompression matrix.
inline std::vector<LowRankFactor> compress_split_head(const Matrix& w, Index head_count,
                                                      const Matrix& p, Index r_per_head) {
  require(head_count >= 1, "compress_split_head: head count must be positive");
  require(w.rows() % head_count == 0, "compress_split_head: rows not divisible by heads");
  const Index slice = w.rows() / head_count;
  std::vector<LowRankFactor> out;
  out.reserve(static_cast<size_t>(head_count));
  for (Index i = 0; i < head_count; ++i)
    out.push_back(compress_local(w.middleRows(i * slice, slice), p, r_per_head));
  return out;
}

}  // namespace lrc
