#pragma once

#include <cmath>
#include <optional>
#include <vector>

#include "lrc/calibration.hpp"
#include "lrc/linalg.hpp"
#include "lrc/local_svd.hpp"

namespace lrc {

// Joint QK factorization: convert per-head query/key projections into latent
// attention with shared compression planes. The alternating top-subspace
// extraction below is exact per half-step, so the recorded loss trace is
// non-increasing by construction.

struct AttentionHeads {
  std::vector<Matrix> wq;  // h entries, d_h x d
  std::vector<Matrix> wk;  // h_kv entries, d_h x d
  std::optional<std::vector<Vector>> bq;  // per query head, d_h
  std::optional<std::vector<Vector>> bk;  // per kv head, d_h

  Index num_q_heads() const { return static_cast<Index>(wq.size()); }
  Index num_kv_heads() const { return static_cast<Index>(wk.size()); }
  Index head_dim() const { return wq.empty() ? 0 : wq.front().rows(); }
  Index model_dim() const { return wq.empty() ? 0 : wq.front().cols(); }
  Index group_size() const { return num_q_heads() / std::max<Index>(num_kv_heads(), 1); }
  // Query head i reads keys from this kv head.
  Index kv_of(Index q_head) const { return q_head / group_size(); }

  void validate() const {
    require(!wq.empty() && !wk.empty(), "attention heads: empty projection list");
    require(num_q_heads() % num_kv_heads() == 0,
            "attention heads: query heads not divisible by kv heads");
    const Index dh = head_dim(), d = model_dim();
    for (const auto& m : wq)
      require(m.rows() == dh && m.cols() == d, "attention heads: inconsistent query shape");
    for (const auto& m : wk)
      require(m.rows() == dh && m.cols() == d, "attention heads: inconsistent key shape");
    if (bq) require(static_cast<Index>(bq->size()) == num_q_heads(), "attention heads: bq count");
    if (bk) require(static_cast<Index>(bk->size()) == num_kv_heads(), "attention heads: bk count");
  }
};

struct MlaFactors {
  Matrix Aq;               // r_q x d
  Matrix Ak;               // r_k x d
  std::vector<Matrix> Bq;  // h entries, d_h x r_q
  std::vector<Matrix> Bk;  // h_kv entries, d_h x r_k
  std::optional<std::vector<Vector>> bq_hat;
  std::optional<std::vector<Vector>> bk_hat;
  std::vector<Matrix> per_head_junctions;  // empty means J_i = I throughout
  std::vector<double> loss_trace;          // whitened-gauge loss per half-step
  long long stored_params = 0;
  std::optional<std::vector<Index>> perm_q;  // block-identity pivots on Aq
  std::optional<std::vector<Index>> perm_k;

  Index rank_q() const { return Aq.rows(); }
  Index rank_k() const { return Ak.rows(); }
  Index num_q_heads() const { return static_cast<Index>(Bq.size()); }
  Index num_kv_heads() const { return static_cast<Index>(Bk.size()); }
  Index head_dim() const { return Bq.empty() ? 0 : Bq.front().rows(); }
  Index group_size() const { return num_q_heads() / std::max<Index>(num_kv_heads(), 1); }
  Index kv_of(Index q_head) const { return q_head / group_size(); }

  Matrix q_weight(Index i) const { return Bq[static_cast<size_t>(i)] * Aq; }
  Matrix k_weight(Index i) const { return Bk[static_cast<size_t>(i)] * Ak; }
};

inline long long mla_stored_params(Index d, Index d_h, Index h, Index h_kv, Index r_q,
                                   Index r_k) {
  return static_cast<long long>(r_q) * (d + d_h * h) +
         static_cast<long long>(r_k) * (d + d_h * h_kv);
}

namespace detail {

// One half-step pair of the alternating HOSVD over slices G_i, with loss
// L = sum_i ||G_i||^2 - ||Aq G_i Ak^T||^2 recorded after each half-step.
// Slices are (q-side dim) x (k-side dim); planes have orthonormal rows.
struct HosvdResult {
  Matrix plane_q;  // r_q x dim_q
  Matrix plane_k;  // r_k x dim_k
  std::vector<double> loss_trace;
};

inline HosvdResult alternate_hosvd(const std::vector<Matrix>& slices, Index r_q, Index r_k,
                                   Index iters) {
  double total_energy = 0.0;
  for (const auto& g : slices) total_energy += g.squaredNorm();
  const Index dim_q = slices.front().rows();
  const Index dim_k = slices.front().cols();

  Matrix gram_q = Matrix::Zero(dim_q, dim_q);
  for (const auto& g : slices) gram_q += g * g.transpose();
  HosvdResult out;
  out.plane_q = right_singular(gram_q, r_q);

  auto captured = [&](const Matrix& aq, const Matrix& ak) {
    double e = 0.0;
    for (const auto& g : slices) e += (aq * g * ak.transpose()).squaredNorm();
    return e;
  };

  // Each half-step is an exact block optimum, so a candidate plane can only
  // lose to the incumbent through roundoff (near-degenerate spectra); those
  // candidates are discarded, which keeps the recorded trace non-increasing.
  double current = std::numeric_limits<double>::infinity();
  auto adopt = [&](Matrix& slot, Matrix candidate) {
    if (slot.size() == 0) {
      slot = std::move(candidate);
      current = total_energy - captured(out.plane_q, out.plane_k);
    } else {
      Matrix saved = slot;
      slot = std::move(candidate);
      const double trial = total_energy - captured(out.plane_q, out.plane_k);
      if (trial <= current)
        current = trial;
      else
        slot = std::move(saved);
    }
    out.loss_trace.push_back(current);
  };

  double prev = std::numeric_limits<double>::infinity();
  for (Index n = 0; n < iters; ++n) {
    Matrix tk = Matrix::Zero(dim_k, dim_k);
    for (const auto& g : slices) {
      Matrix m = out.plane_q * g;  // r_q x dim_k
      tk += m.transpose() * m;
    }
    adopt(out.plane_k, right_singular(tk, r_k));

    Matrix tq = Matrix::Zero(dim_q, dim_q);
    for (const auto& g : slices) {
      Matrix m = g * out.plane_k.transpose();  // dim_q x r_k
      tq += m * m.transpose();
    }
    adopt(out.plane_q, right_singular(tq, r_q));

    const double cur = out.loss_trace.back();
    if (std::isfinite(prev) && prev - cur < 1e-12 * std::max(1.0, std::abs(prev))) break;
    prev = cur;
  }
  if (out.plane_k.size() == 0) {
    // iters == 0: keys still need a plane; one exact half-step, no trace.
    Matrix tk = Matrix::Zero(dim_k, dim_k);
    for (const auto& g : slices) {
      Matrix m = out.plane_q * g;
      tk += m.transpose() * m;
    }
    out.plane_k = right_singular(tk, r_k);
    out.loss_trace.push_back(total_energy - captured(out.plane_q, out.plane_k));
  }
  return out;
}

struct WhitenedQk {
  std::vector<Matrix> wq;  // whitened per query head
  std::vector<Matrix> wk;  // whitened per kv head
  Matrix p_inv;
};

inline WhitenedQk whiten_heads(const AttentionHeads& heads, const Matrix& p) {
  const Index d = heads.model_dim();
  require(p.rows() == d && p.cols() == d, "joint_qk: preconditioner shape mismatch");

  Matrix pu, pvt;
  Vector ps;
  thin_svd(p, pu, ps, pvt);
  const double cutoff = default_pinv_tol(p) * (ps.size() ? ps[0] : 0.0);
  if (ps.size() == 0 || ps.minCoeff() <= cutoff)
    throw NumericError("joint_qk: singular preconditioner");

  WhitenedQk w;
  w.p_inv = pvt.transpose() * ps.cwiseInverse().asDiagonal() * pu.transpose();
  w.wq.reserve(heads.wq.size());
  w.wk.reserve(heads.wk.size());
  for (const auto& m : heads.wq) w.wq.push_back(m * p);
  for (const auto& m : heads.wk) w.wk.push_back(m * p);
  return w;
}

}  // namespace detail

/// Alternating joint SVD for QK projections. Whitens with P, forms the
/// per-head cross Grams G_i, extracts shared top subspaces for queries and
/// keys, and emits per-head decompression matrices (identity junctions).
/// Handles grouped queries: query head i pairs with kv head i / group_size.
inline MlaFactors joint_qk(const AttentionHeads& heads, const Matrix& p, Index r_q, Index r_k,
                           Index iters = 8) {
  heads.validate();
  const Index d = heads.model_dim();
  require(r_q >= 1 && r_q <= d && r_k >= 1 && r_k <= d, "joint_qk: rank out of range");
  require(iters >= 0, "joint_qk: negative iteration count");

  auto w = detail::whiten_heads(heads, p);
  std::vector<Matrix> slices;
  slices.reserve(w.wq.size());
  for (Index i = 0; i < heads.num_q_heads(); ++i)
    slices.push_back(w.wq[static_cast<size_t>(i)].transpose() *
                     w.wk[static_cast<size_t>(heads.kv_of(i))]);

  auto hosvd = detail::alternate_hosvd(slices, r_q, r_k, iters);

  MlaFactors f;
  f.loss_trace = std::move(hosvd.loss_trace);
  f.Bq.reserve(w.wq.size());
  for (const auto& m : w.wq) f.Bq.push_back(m * hosvd.plane_q.transpose());
  f.Bk.reserve(w.wk.size());
  for (const auto& m : w.wk) f.Bk.push_back(m * hosvd.plane_k.transpose());
  f.Aq = hosvd.plane_q * w.p_inv;
  f.Ak = hosvd.plane_k * w.p_inv;
  f.stored_params = mla_stored_params(d, heads.head_dim(), heads.num_q_heads(),
                                      heads.num_kv_heads(), r_q, r_k);
  return f;
}

/// joint_qk with the attention-map-optimal whitening P = C^(1/2).
inline MlaFactors joint_qk_attention_aware(const AttentionHeads& heads,
                                           const CalibrationStats& stats, Index r_q, Index r_k,
                                           Index iters = 8) {
  return joint_qk(heads, psd_sqrt(stats.C), r_q, r_k, iters);
}

/// GQA entry point; requires fewer kv heads than query heads (group size > 1
/// is the point, but group size 1 degenerates to joint_qk).
inline MlaFactors joint_qk_gqa(const AttentionHeads& heads, const Matrix& p, Index r_q,
                               Index r_k, Index iters = 8) {
  require(!heads.wq.empty() && !heads.wk.empty(), "joint_qk_gqa: empty heads");
  require(heads.num_q_heads() % heads.num_kv_heads() == 0,
          "joint_qk_gqa: query heads not divisible by kv heads");
  return joint_qk(heads, p, r_q, r_k, iters);
}

/// Bias-aware variant. The planes come from the centered-whitened Grams (the
/// solution when no mean or bias is present), which keeps them invariant
/// under constant calibration shifts; the closed-form bias updates absorb
/// the mean terms. Decompression is C0-gauge: B = W C0 A^T with A C0 A^T = I.
inline MlaFactors joint_qk_bias_aware(const AttentionHeads& heads, const CalibrationStats& stats,
                                      Index r_q, Index r_k, Index iters = 8) {
  heads.validate();
  require(heads.bq.has_value() && heads.bk.has_value(), "joint_qk_bias_aware: biases missing");

  MlaFactors f = joint_qk(heads, psd_sqrt(stats.C0), r_q, r_k, iters);

  const Matrix& c0 = stats.C0;
  const Vector& mu = stats.mu;
  std::vector<Vector> bq_hat, bk_hat;
  bq_hat.reserve(heads.wq.size());
  for (Index i = 0; i < heads.num_q_heads(); ++i) {
    const Matrix& wq = heads.wq[static_cast<size_t>(i)];
    const Vector& b = (*heads.bq)[static_cast<size_t>(i)];
    bq_hat.push_back(b + wq * mu - wq * (c0 * (f.Aq.transpose() * (f.Aq * mu))));
  }
  bk_hat.reserve(heads.wk.size());
  for (Index i = 0; i < heads.num_kv_heads(); ++i) {
    const Matrix& wk = heads.wk[static_cast<size_t>(i)];
    const Vector& b = (*heads.bk)[static_cast<size_t>(i)];
    bk_hat.push_back(b + wk * mu - wk * (c0 * (f.Ak.transpose() * (f.Ak * mu))));
  }
  f.bq_hat = std::move(bq_hat);
  f.bk_hat = std::move(bk_hat);
  return f;
}

/// Block-diagonal rotary rotation for offset m: d_h/2 planar rotations with
/// angles m * theta^(-2j/d_h).
inline Matrix rope_rotation(Index d_h, double theta, double m) {
  require(d_h % 2 == 0, "rope_rotation: head dim must be even");
  Matrix r = Matrix::Zero(d_h, d_h);
  for (Index j = 0; j < d_h / 2; ++j) {
    const double freq = std::pow(theta, -2.0 * static_cast<double>(j) / static_cast<double>(d_h));
    const double a = m * freq;
    const double c = std::cos(a), s = std::sin(a);
    r(2 * j, 2 * j) = c;
    r(2 * j, 2 * j + 1) = -s;
    r(2 * j + 1, 2 * j) = s;
    r(2 * j + 1, 2 * j + 1) = c;
  }
  return r;
}

/// RoPE-aware joint QK: the objective sums attention-map error over causal
/// token offsets 0..window, each offset contributing the rotated cross Gram
/// C^(1/2) Wq^T Theta_delta Wk C^(1/2). Decompression stays (Bq, Bk); the
/// rotations are applied to latent-decoded features at inference.
inline MlaFactors joint_qk_rope(const AttentionHeads& heads, const CalibrationStats& stats,
                                Index r_q, Index r_k, Index iters = 8, Index window = 10,
                                double theta = 1e4) {
  heads.validate();
  require(heads.head_dim() % 2 == 0, "joint_qk_rope: head dim must be even");
  require(window >= 0, "joint_qk_rope: negative window");
  const Index d = heads.model_dim();
  require(r_q >= 1 && r_q <= d && r_k >= 1 && r_k <= d, "joint_qk_rope: rank out of range");

  Matrix p = psd_sqrt(stats.C);
  auto w = detail::whiten_heads(heads, p);

  std::vector<Matrix> slices;
  slices.reserve(static_cast<size_t>(heads.num_q_heads() * (window + 1)));
  for (Index delta = 0; delta <= window; ++delta) {
    Matrix rot = rope_rotation(heads.head_dim(), theta, static_cast<double>(delta));
    for (Index i = 0; i < heads.num_q_heads(); ++i)
      slices.push_back(w.wq[static_cast<size_t>(i)].transpose() * rot *
                       w.wk[static_cast<size_t>(heads.kv_of(i))]);
  }

  auto hosvd = detail::alternate_hosvd(slices, r_q, r_k, iters);

  MlaFactors f;
  f.loss_trace = std::move(hosvd.loss_trace);
  for (const auto& m : w.wq) f.Bq.push_back(m * hosvd.plane_q.transpose());
  for (const auto& m : w.wk) f.Bk.push_back(m * hosvd.plane_k.transpose());
  f.Aq = hosvd.plane_q * w.p_inv;
  f.Ak = hosvd.plane_k * w.p_inv;
  f.stored_params = mla_stored_params(d, heads.head_dim(), heads.num_q_heads(),
                                      heads.num_kv_heads(), r_q, r_k);
  return f;
}

/// Pre-softmax attention maps M_i = (Wq_i X + bq 1^T)^T (Wk X + bk 1^T) for
/// the original parameterization.
inline std::vector<Matrix> reconstruct_attention_maps(const AttentionHeads& heads,
                                                      const Matrix& x) {
  heads.validate();
  require(x.rows() == heads.model_dim(), "reconstruct_attention_maps: token dim mismatch");
  std::vector<Matrix> maps;
  maps.reserve(heads.wq.size());
  for (Index i = 0; i < heads.num_q_heads(); ++i) {
    Matrix q = heads.wq[static_cast<size_t>(i)] * x;
    if (heads.bq) q.colwise() += (*heads.bq)[static_cast<size_t>(i)];
    Matrix k = heads.wk[static_cast<size_t>(heads.kv_of(i))] * x;
    if (heads.bk) k.colwise() += (*heads.bk)[static_cast<size_t>(heads.kv_of(i))];
    maps.push_back(q.transpose() * k);
  }
  return maps;
}

/// Same maps through the latent parameterization.
inline std::vector<Matrix> reconstruct_attention_maps(const MlaFactors& f, const Matrix& x) {
  require(x.rows() == f.Aq.cols(), "reconstruct_attention_maps: token dim mismatch");
  Matrix lat_q = f.Aq * x;
  Matrix lat_k = f.Ak * x;
  std::vector<Matrix> maps;
  maps.reserve(f.Bq.size());
  for (Index i = 0; i < f.num_q_heads(); ++i) {
    Matrix q = f.Bq[static_cast<size_t>(i)] * lat_q;
    if (f.bq_hat) q.colwise() += (*f.bq_hat)[static_cast<size_t>(i)];
    Matrix k = f.Bk[static_cast<size_t>(f.kv_of(i))] * lat_k;
    if (f.bk_hat) k.colwise() += (*f.bk_hat)[static_cast<size_t>(f.kv_of(i))];
    maps.push_back(q.transpose() * k);
  }
  return maps;
}

inline double attention_map_error(const std::vector<Matrix>& a, const std::vector<Matrix>& b) {
  require(a.size() == b.size(), "attention_map_error: head count mismatch");
  double e = 0.0;
  for (size_t i = 0; i < a.size(); ++i) e += (a[i] - b[i]).squaredNorm();
  return e;
}

/// Apply block-identity junctions to MLA factors: pivots Aq and Ak into
/// [I | .] form (saving r^2 each) and, per head with an invertible pivot
/// block, rotates the head gauge so Bq_i carries an identity d_h x d_h block
/// (saving d_h^2). Heads with no acceptable pivot stay dense and the
/// accounting reflects it. Reconstructed attention maps are unchanged.
inline MlaFactors apply_mla_block_identity(const MlaFactors& factors) {
  MlaFactors f = factors;
  const Index r_q = f.rank_q(), r_k = f.rank_k();
  const Index d_h = f.head_dim();

  auto pivot_plane = [](Matrix& plane, std::vector<Matrix>& decomp,
                        std::optional<std::vector<Index>>& perm_out) -> long long {
    const Index r = plane.rows();
    std::vector<Index> piv;
    try {
      piv = detail::pivot_columns(plane, r);
    } catch (const NumericError&) {
      return 0;  // keep the dense plane
    }
    Matrix v1(r, r);
    for (Index k = 0; k < r; ++k) v1.col(k) = plane.col(piv[k]);
    Eigen::PartialPivLU<Matrix> lu(v1);
    plane = lu.solve(plane);
    for (Index k = 0; k < r; ++k) {
      plane.col(piv[k]).setZero();
      plane(k, piv[k]) = 1.0;
    }
    for (auto& b : decomp) b = b * v1;
    perm_out = detail::full_permutation(piv, plane.cols());
    return static_cast<long long>(r) * r;
  };

  long long saved = 0;
  saved += pivot_plane(f.Aq, f.Bq, f.perm_q);
  saved += pivot_plane(f.Ak, f.Bk, f.perm_k);

  // Per-head gauge: only meaningful when the q and k decompression pair
  // shares a head index (MHA); grouped kv heads keep identity junctions.
  if (f.num_q_heads() == f.num_kv_heads() && r_q >= d_h) {
    f.per_head_junctions.assign(f.Bq.size(), Matrix::Identity(d_h, d_h));
    for (size_t i = 0; i < f.Bq.size(); ++i) {
      std::vector<Index> piv;
      try {
        piv = detail::pivot_columns(f.Bq[i], d_h);
      } catch (const NumericError&) {
        continue;  // this head stays dense
      }
      Matrix block(d_h, d_h);
      for (Index k = 0; k < d_h; ++k) block.col(k) = f.Bq[i].col(piv[k]);
      Eigen::PartialPivLU<Matrix> lu(block);
      Matrix t_inv = lu.inverse();
      f.Bq[i] = t_inv * f.Bq[i];
      for (Index k = 0; k < d_h; ++k) {
        f.Bq[i].col(piv[k]).setZero();
        f.Bq[i](k, piv[k]) = 1.0;
      }
      f.Bk[i] = block.transpose() * f.Bk[i];
      if (f.bq_hat) (*f.bq_hat)[i] = t_inv * (*f.bq_hat)[i];
      if (f.bk_hat) (*f.bk_hat)[i] = block.transpose() * (*f.bk_hat)[i];
      f.per_head_junctions[i] = block;
      saved += static_cast<long long>(d_h) * d_h;
    }
  }
  f.stored_params = factors.stored_params - saved;
  return f;
}

}  // namespace lrc
