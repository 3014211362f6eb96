#pragma once

#include <optional>
#include <vector>

#include "lrc/calibration.hpp"
#include "lrc/joint_qk.hpp"
#include "lrc/linalg.hpp"

namespace lrc {

// Joint value/output compression. The per-head products Wo_i Wv_i, whitened
// by C^(1/2), form the slices of the same alternating HOSVD used for QK;
// the shared planes here are the output subspace Bo and the value latent Av.

struct VoHeads {
  std::vector<Matrix> wv;  // h entries, d_h x d
  std::vector<Matrix> wo;  // h entries, d' x d_h
  std::optional<std::vector<Vector>> bv;  // per head, d_h
  std::optional<Vector> bo;               // single output bias, d'

  Index num_heads() const { return static_cast<Index>(wv.size()); }
  Index head_dim() const { return wv.empty() ? 0 : wv.front().rows(); }
  Index model_dim() const { return wv.empty() ? 0 : wv.front().cols(); }
  Index out_dim() const { return wo.empty() ? 0 : wo.front().rows(); }

  void validate() const {
    require(!wv.empty() && wv.size() == wo.size(), "vo heads: mismatched head lists");
    for (const auto& m : wv)
      require(m.rows() == head_dim() && m.cols() == model_dim(), "vo heads: value shape");
    for (const auto& m : wo)
      require(m.rows() == out_dim() && m.cols() == head_dim(), "vo heads: output shape");
    if (bv) require(bv->size() == wv.size(), "vo heads: bias count");
  }
};

struct VoFactors {
  Matrix Bo;               // d' x r_o, orthonormal columns
  Matrix Av;               // r_v x d
  std::vector<Matrix> Ao;  // h entries, r_o x d_h
  std::vector<Matrix> Bv;  // h entries, d_h x r_v
  std::optional<Vector> bo_hat;
  std::vector<double> loss_trace;
  long long stored_params = 0;

  Index num_heads() const { return static_cast<Index>(Ao.size()); }
  Index rank_o() const { return Bo.cols(); }
  Index rank_v() const { return Av.rows(); }
  Matrix o_weight(Index i) const { return Bo * Ao[static_cast<size_t>(i)]; }
  Matrix v_weight(Index i) const { return Bv[static_cast<size_t>(i)] * Av; }
};

inline long long vo_stored_params(Index d, Index d_out, Index d_h, Index h, Index r_v,
                                  Index r_o) {
  return static_cast<long long>(r_o) * d_out + static_cast<long long>(r_v) * d +
         static_cast<long long>(h) * d_h * (r_o + r_v);
}

/// Alternating HOSVD on slices G_i = Wo_i Wv_i C^(1/2). use_centered switches
/// the whitening to the centered covariance, the right gauge when the bias
/// update absorbs the means.
inline VoFactors joint_vo(const VoHeads& heads, const CalibrationStats& stats, Index r_v,
                          Index r_o, Index iters = 8, bool use_centered = false) {
  heads.validate();
  const Index d = heads.model_dim();
  const Index d_out = heads.out_dim();
  require(r_v >= 1 && r_v <= d, "joint_vo: value rank out of range");
  require(r_o >= 1 && r_o <= d_out, "joint_vo: output rank out of range");
  require(iters >= 0, "joint_vo: negative iteration count");

  Matrix p = psd_sqrt(use_centered ? stats.C0 : stats.C);
  Matrix pu, pvt;
  Vector ps;
  detail::thin_svd(p, pu, ps, pvt);
  const double cutoff = default_pinv_tol(p) * (ps.size() ? ps[0] : 0.0);
  if (ps.size() == 0 || ps.minCoeff() <= cutoff)
    throw NumericError("joint_vo: singular whitening matrix");
  Matrix p_inv = pvt.transpose() * ps.cwiseInverse().asDiagonal() * pu.transpose();

  std::vector<Matrix> slices;  // d' x d each
  slices.reserve(heads.wv.size());
  for (Index i = 0; i < heads.num_heads(); ++i)
    slices.push_back(heads.wo[static_cast<size_t>(i)] * heads.wv[static_cast<size_t>(i)] * p);

  auto hosvd = detail::alternate_hosvd(slices, r_o, r_v, iters);
  // plane_q spans the output side, plane_k the whitened value side.

  VoFactors f;
  f.loss_trace = std::move(hosvd.loss_trace);
  f.Bo = hosvd.plane_q.transpose();
  for (Index i = 0; i < heads.num_heads(); ++i) {
    f.Ao.push_back(hosvd.plane_q * heads.wo[static_cast<size_t>(i)]);
    f.Bv.push_back(heads.wv[static_cast<size_t>(i)] * p * hosvd.plane_k.transpose());
  }
  f.Av = hosvd.plane_k * p_inv;
  f.stored_params = vo_stored_params(d, d_out, heads.head_dim(), heads.num_heads(), r_v, r_o);
  return f;
}

/// Closed-form output-bias update: the value-side biases fold through the
/// softmax weighting exactly (columns sum to one), so b_v is absorbed into a
/// single corrected b_o and the compressed value path runs bias-free.
inline Vector vo_bias_update(const VoHeads& heads, const VoFactors& factors,
                             const CalibrationStats& stats) {
  heads.validate();
  require(factors.num_heads() == heads.num_heads(), "vo_bias_update: head count mismatch");
  require(stats.mu.size() == heads.model_dim(), "vo_bias_update: stats dim mismatch");

  Vector b = heads.bo ? *heads.bo : Vector::Zero(heads.out_dim());
  for (Index i = 0; i < heads.num_heads(); ++i) {
    const auto ui = static_cast<size_t>(i);
    Vector value_mean = heads.wv[ui] * stats.mu;
    if (heads.bv) value_mean += (*heads.bv)[ui];
    b += heads.wo[ui] * value_mean;
    b -= factors.Bo * (factors.Ao[ui] * (factors.Bv[ui] * (factors.Av * stats.mu)));
  }
  return b;
}

// -- contraction planning ----------------------------------------------------

enum class VoOrder {
  ValueSideWeighting,   // softmax applied to decoded per-head values
  OutputSideWeighting,  // softmax applied to the shared value latent
};

struct ContractionPlan {
  VoOrder order = VoOrder::ValueSideWeighting;
  long long flops_value_side = 0;
  long long flops_output_side = 0;
};

/// Evaluates both contraction-order cost polynomials verbatim and picks the
/// cheaper one (ties keep value-side weighting). Output-side wins exactly
/// when h*r_o < r_v makes its tail cheaper.
inline ContractionPlan vo_contraction_plan(Index d, Index d_out, Index d_h, Index h, Index l,
                                           Index r_v, Index r_o) {
  require(d >= 1 && d_out >= 1 && d_h >= 1 && h >= 1 && l >= 1 && r_v >= 1 && r_o >= 1,
          "vo_contraction_plan: all counts must be positive");
  const auto L = static_cast<long long>(l);
  ContractionPlan plan;
  plan.flops_value_side = L * d * r_v + static_cast<long long>(h) * d_h * L * r_v +
                          static_cast<long long>(h) * d_h * L * L +
                          static_cast<long long>(h) * d_h * L * r_o +
                          static_cast<long long>(h) * d_out * L * r_o;
  plan.flops_output_side = L * d * r_v + static_cast<long long>(r_v) * L * L +
                           static_cast<long long>(h) * d_h * L * r_v +
                           static_cast<long long>(h) * d_h * L * r_o +
                           static_cast<long long>(d_out) * L * r_o;
  plan.order = plan.flops_output_side < plan.flops_value_side ? VoOrder::OutputSideWeighting
                                                              : VoOrder::ValueSideWeighting;
  return plan;
}

/// Block-identity junctions for VO factors: pivots Av into [I | .] form and
/// Bo into a row-pivoted identity block (saving r_v^2 + r_o^2), plus an
/// identity d_h x d_h block in each Bv_i when allowed and the pivot block is
/// invertible (saving d_h^2 per head). Reconstructed products are unchanged.
inline VoFactors apply_vo_block_identity(const VoFactors& factors, bool per_head = true) {
  VoFactors f = factors;
  long long saved = 0;
  const Index r_v = f.rank_v(), r_o = f.rank_o();
  const Index d_h = f.Bv.empty() ? 0 : f.Bv.front().rows();

  try {
    auto piv = detail::pivot_columns(f.Av, r_v);
    Matrix v1(r_v, r_v);
    for (Index k = 0; k < r_v; ++k) v1.col(k) = f.Av.col(piv[k]);
    Eigen::PartialPivLU<Matrix> lu(v1);
    f.Av = lu.solve(f.Av);
    for (Index k = 0; k < r_v; ++k) {
      f.Av.col(piv[k]).setZero();
      f.Av(k, piv[k]) = 1.0;
    }
    for (auto& b : f.Bv) b = b * v1;
    saved += static_cast<long long>(r_v) * r_v;
  } catch (const NumericError&) {
  }

  try {
    auto piv = detail::pivot_columns(Matrix(f.Bo.transpose()), r_o);
    Matrix u1(r_o, r_o);
    for (Index k = 0; k < r_o; ++k) u1.row(k) = f.Bo.row(piv[k]);
    Eigen::PartialPivLU<Matrix> lu(Matrix(u1.transpose()));
    f.Bo = lu.solve(Matrix(f.Bo.transpose())).transpose();
    for (Index k = 0; k < r_o; ++k) {
      f.Bo.row(piv[k]).setZero();
      f.Bo(piv[k], k) = 1.0;
    }
    for (auto& a : f.Ao) a = u1 * a;
    saved += static_cast<long long>(r_o) * r_o;
  } catch (const NumericError&) {
  }

  if (per_head && r_v >= d_h) {
    for (size_t i = 0; i < f.Bv.size(); ++i) {
      std::vector<Index> piv;
      try {
        piv = detail::pivot_columns(f.Bv[i], d_h);
      } catch (const NumericError&) {
        continue;
      }
      Matrix block(d_h, d_h);
      for (Index k = 0; k < d_h; ++k) block.col(k) = f.Bv[i].col(piv[k]);
      Eigen::PartialPivLU<Matrix> lu(block);
      f.Bv[i] = lu.inverse() * f.Bv[i];
      for (Index k = 0; k < d_h; ++k) {
        f.Bv[i].col(piv[k]).setZero();
        f.Bv[i](k, piv[k]) = 1.0;
      }
      f.Ao[i] = f.Ao[i] * block;
      saved += static_cast<long long>(d_h) * d_h;
    }
  }
  f.stored_params = factors.stored_params - saved;
  return f;
}

/// Compressed attention output with the softmax weighting applied to decoded
/// per-head values: sum_i Bo (Ao_i ((Bv_i (Av X)) S_i)).
inline Matrix apply_vo_value_side(const VoFactors& f, const Matrix& x,
                                  const std::vector<Matrix>& softmax_maps) {
  require(softmax_maps.size() == f.Ao.size(), "apply_vo: map count mismatch");
  Matrix latent = f.Av * x;
  Matrix y = Matrix::Zero(f.Bo.rows(), x.cols());
  for (size_t i = 0; i < f.Ao.size(); ++i) {
    Matrix v = f.Bv[i] * latent;
    y += f.Bo * (f.Ao[i] * (v * softmax_maps[i]));
  }
  return y;
}

/// Same output with the weighting applied to the shared latent first:
/// Bo sum_i Ao_i (Bv_i ((Av X) S_i)).
inline Matrix apply_vo_output_side(const VoFactors& f, const Matrix& x,
                                   const std::vector<Matrix>& softmax_maps) {
  require(softmax_maps.size() == f.Ao.size(), "apply_vo: map count mismatch");
  Matrix latent = f.Av * x;
  Matrix acc = Matrix::Zero(f.rank_o(), x.cols());
  for (size_t i = 0; i < f.Ao.size(); ++i)
    acc += f.Ao[i] * (f.Bv[i] * (latent * softmax_maps[i]));
  return f.Bo * acc;
}

}  // namespace lrc
