#pragma once

#include <algorithm>
#include <chrono>
#include <string>
#include <vector>

#include <json.hpp>

#include "lrc/archive.hpp"
#include "lrc/calibration.hpp"
#include "lrc/joint_mlp.hpp"
#include "lrc/joint_qk.hpp"
#include "lrc/joint_vo.hpp"
#include "lrc/local_svd.hpp"
#include "lrc/model.hpp"

namespace lrc {

// Whole-model orchestration: rank planning from a parameter budget, layerwise
// compression dispatch, the Table-style params/FLOPs accounting, and the
// original-vs-compressed evaluator.

enum class JunctionPolicy { Dense, BlockIdentity, LU };

struct PlanFlags {
  bool joint_qk = true;
  bool joint_vo = false;  // split V/O is the recommended default
  bool joint_ud = false;
  bool bias_aware = false;
  bool rope_aware = false;
};

struct LayerRanks {
  Index r_q = 1, r_k = 1, r_v = 1, r_o = 1, r_u = 1, r_d = 1;
};

struct CompressionPlan {
  double target_ratio = 0.2;
  std::vector<LayerRanks> ranks;  // one entry per layer
  PreconditionerKind precond = PreconditionerKind::RootCovariance;
  double l1_alpha = kDefaultL1Alpha;
  JunctionPolicy junction = JunctionPolicy::BlockIdentity;
  Index iters_qk = 8;
  Index iters_ud = 4;
  double lambda_rel = kDefaultLambdaRel;
  Index rope_window = 10;
  uint64_t seed = 0;
  PlanFlags flags;
};

struct ModuleReport {
  std::string name;
  long long stored = 0;
  long long dense = 0;
  double whitened_loss = 0.0;
};

struct CompressionReport {
  long long params_total = 0;        // embeddings + norms + biases + linear
  long long dense_params_total = 0;  // same model, uncompressed
  long long linear_stored = 0;
  long long linear_dense = 0;
  long long macs = 0;
  long long flops = 0;
  Index token_len = 0;
  std::vector<ModuleReport> modules;
  double wall_ms = 0.0;  // never serialized; reruns must be byte-identical
};

// -- accounting ---------------------------------------------------------------

namespace accounting {

inline long long local_stored(JunctionPolicy j, Index d_out, Index d_in, Index r) {
  const long long dense = static_cast<long long>(r) * (d_out + d_in);
  return j == JunctionPolicy::Dense ? dense : dense - static_cast<long long>(r) * r;
}

inline long long qk_joint_stored(const ModelConfig& c, JunctionPolicy j, Index r) {
  long long stored = static_cast<long long>(r) * (c.d + c.q_rows()) +
                     static_cast<long long>(r) * (c.d + c.kv_rows());
  if (j != JunctionPolicy::Dense) {
    stored -= 2LL * r * r;
    if (c.heads == c.kv_heads && r >= c.head_dim)
      stored -= static_cast<long long>(c.heads) * c.head_dim * c.head_dim;
  }
  return stored;
}

inline long long vo_joint_stored(const ModelConfig& c, JunctionPolicy j, Index r) {
  long long stored = static_cast<long long>(r) * c.d /* Bo */ +
                     static_cast<long long>(r) * c.d /* Av */ +
                     static_cast<long long>(c.heads) * r * c.head_dim /* Ao */ +
                     static_cast<long long>(c.kv_heads) * c.head_dim * r /* Bv */;
  if (j != JunctionPolicy::Dense) {
    stored -= 2LL * r * r;
    if (c.heads == c.kv_heads && r >= c.head_dim)
      stored -= static_cast<long long>(c.heads) * c.head_dim * c.head_dim;
  }
  return stored;
}

struct LayerDense {
  long long q, k, v, o, u, d;
  long long total() const { return q + k + v + o + u + d; }
};

inline LayerDense layer_dense(const ModelConfig& c) {
  LayerDense m;
  m.q = static_cast<long long>(c.q_rows()) * c.d;
  m.k = static_cast<long long>(c.kv_rows()) * c.d;
  m.v = static_cast<long long>(c.kv_rows()) * c.d;
  m.o = static_cast<long long>(c.d) * c.q_rows();
  m.u = static_cast<long long>(c.d_i) * c.d;
  m.d = static_cast<long long>(c.d) * c.d_i;
  return m;
}

inline long long overhead_params(const ModelConfig& c) {
  long long per_layer = 4LL * c.d;  // two layer norms, weight + bias
  if (c.qkv_bias) per_layer += c.q_rows() + 2LL * c.kv_rows() + c.d;
  if (c.mlp_bias) per_layer += c.d_i + c.d;
  return c.layers * per_layer + 2LL * c.d /* final norm */ +
         static_cast<long long>(c.vocab) * c.d + static_cast<long long>(c.max_pos) * c.d;
}

}  // namespace accounting

/// Largest rank whose stored-parameter count fits the budget; the integer
/// sweep is the normative rule. stored must be non-decreasing on [1, r_max].
template <typename StoredFn>
inline Index solve_rank_sweep(Index r_max, long long budget, StoredFn stored) {
  for (Index r = r_max; r >= 1; --r)
    if (stored(r) <= budget) return r;
  throw NumericError("solve_ranks: no feasible rank fits the parameter budget");
}

/// Per-module ranks meeting (1 - target_ratio) of the dense linear budget
/// under the plan's junction accounting. Joint QK couples r_q = r_k; joint
/// VO couples r_v = r_o.
inline std::vector<LayerRanks> solve_ranks(const ModelConfig& cfg, double target_ratio,
                                           const PlanFlags& flags, JunctionPolicy junction) {
  cfg.validate();
  require(target_ratio >= 0.0 && target_ratio < 1.0, "solve_ranks: ratio must be in [0, 1)");
  const double keep = 1.0 - target_ratio;
  const auto dense = accounting::layer_dense(cfg);
  auto budget = [&](long long dense_params) {
    return static_cast<long long>(keep * static_cast<double>(dense_params));
  };

  LayerRanks r;
  if (flags.joint_qk) {
    const Index cap = cfg.d;  // latent planes are r x d
    r.r_q = r.r_k = solve_rank_sweep(cap, budget(dense.q + dense.k), [&](Index rr) {
      return accounting::qk_joint_stored(cfg, junction, rr);
    });
  } else {
    r.r_q = solve_rank_sweep(std::min(cfg.q_rows(), cfg.d), budget(dense.q), [&](Index rr) {
      return accounting::local_stored(junction, cfg.q_rows(), cfg.d, rr);
    });
    r.r_k = solve_rank_sweep(std::min(cfg.kv_rows(), cfg.d), budget(dense.k), [&](Index rr) {
      return accounting::local_stored(junction, cfg.kv_rows(), cfg.d, rr);
    });
  }

  if (flags.joint_vo) {
    r.r_v = r.r_o = solve_rank_sweep(cfg.d, budget(dense.v + dense.o), [&](Index rr) {
      return accounting::vo_joint_stored(cfg, junction, rr);
    });
  } else {
    r.r_v = solve_rank_sweep(std::min(cfg.kv_rows(), cfg.d), budget(dense.v), [&](Index rr) {
      return accounting::local_stored(junction, cfg.kv_rows(), cfg.d, rr);
    });
    r.r_o = solve_rank_sweep(std::min(cfg.d, cfg.q_rows()), budget(dense.o), [&](Index rr) {
      return accounting::local_stored(junction, cfg.d, cfg.q_rows(), rr);
    });
  }

  r.r_u = solve_rank_sweep(std::min(cfg.d_i, cfg.d), budget(dense.u), [&](Index rr) {
    return accounting::local_stored(junction, cfg.d_i, cfg.d, rr);
  });
  r.r_d = solve_rank_sweep(std::min(cfg.d, cfg.d_i), budget(dense.d), [&](Index rr) {
    return accounting::local_stored(junction, cfg.d, cfg.d_i, rr);
  });

  return std::vector<LayerRanks>(static_cast<size_t>(cfg.layers), r);
}

inline CompressionPlan make_plan(const ModelConfig& cfg, double target_ratio,
                                 const PlanFlags& flags = {},
                                 JunctionPolicy junction = JunctionPolicy::BlockIdentity,
                                 PreconditionerKind precond = PreconditionerKind::RootCovariance) {
  CompressionPlan plan;
  plan.target_ratio = target_ratio;
  plan.flags = flags;
  plan.junction = junction;
  plan.precond = precond;
  plan.ranks = solve_ranks(cfg, target_ratio, flags, junction);
  return plan;
}

// -- params / FLOPs -----------------------------------------------------------

/// Dense or compressed accounting at a given token length. MACs charge every
/// stored matrix parameter once per token (identity blocks are free), plus
/// the attention map/apply terms and the tied vocabulary head; FLOPs = 2 MACs.
inline CompressionReport count_params_flops(const ModelConfig& cfg,
                                            const CompressionPlan* plan, Index token_len) {
  cfg.validate();
  require(token_len >= 1, "count_params_flops: token length must be positive");
  const auto dense = accounting::layer_dense(cfg);
  const long long overhead = accounting::overhead_params(cfg);

  CompressionReport rep;
  rep.token_len = token_len;
  rep.linear_dense = cfg.layers * dense.total();
  rep.dense_params_total = rep.linear_dense + overhead;

  long long attn_apply = static_cast<long long>(cfg.heads) * cfg.head_dim;  // per l^2
  if (plan == nullptr) {
    rep.linear_stored = rep.linear_dense;
  } else {
    require(static_cast<Index>(plan->ranks.size()) == cfg.layers,
            "count_params_flops: plan layer count mismatch");
    rep.linear_stored = 0;
    for (const auto& r : plan->ranks) {
      if (plan->flags.joint_qk)
        rep.linear_stored += accounting::qk_joint_stored(cfg, plan->junction, r.r_q);
      else
        rep.linear_stored +=
            accounting::local_stored(plan->junction, cfg.q_rows(), cfg.d, r.r_q) +
            accounting::local_stored(plan->junction, cfg.kv_rows(), cfg.d, r.r_k);
      if (plan->flags.joint_vo)
        rep.linear_stored += accounting::vo_joint_stored(cfg, plan->junction, r.r_v);
      else
        rep.linear_stored +=
            accounting::local_stored(plan->junction, cfg.kv_rows(), cfg.d, r.r_v) +
            accounting::local_stored(plan->junction, cfg.d, cfg.q_rows(), r.r_o);
      rep.linear_stored += accounting::local_stored(plan->junction, cfg.d_i, cfg.d, r.r_u) +
                           accounting::local_stored(plan->junction, cfg.d, cfg.d_i, r.r_d);
    }
    if (plan->flags.joint_vo && !plan->ranks.empty()) {
      // The apply term follows the cheaper contraction order.
      const Index r_v = plan->ranks.front().r_v;
      const Index r_o = plan->ranks.front().r_o;
      auto cp = vo_contraction_plan(cfg.d, cfg.d, cfg.head_dim, cfg.heads, token_len, r_v, r_o);
      if (cp.order == VoOrder::OutputSideWeighting) attn_apply = r_v;
    }
  }
  rep.params_total = rep.linear_stored + overhead;

  const long long l = token_len;
  const long long map_term = static_cast<long long>(cfg.heads) * cfg.head_dim;  // per l^2
  rep.macs = l * rep.linear_stored + l * static_cast<long long>(cfg.vocab) * cfg.d +
             cfg.layers * (map_term + attn_apply) * l * l;
  rep.flops = 2 * rep.macs;
  return rep;
}

// -- plan (de)serialization ---------------------------------------------------

inline const char* precond_name(PreconditionerKind k) {
  switch (k) {
    case PreconditionerKind::Identity: return "identity";
    case PreconditionerKind::DiagHessian: return "hessian";
    case PreconditionerKind::DiagL1: return "l1";
    case PreconditionerKind::DiagL2: return "l2";
    case PreconditionerKind::Covariance: return "cov";
    case PreconditionerKind::RootCovariance: return "rootcov";
  }
  return "rootcov";
}

inline PreconditionerKind precond_from_name(const std::string& s) {
  if (s == "identity") return PreconditionerKind::Identity;
  if (s == "hessian") return PreconditionerKind::DiagHessian;
  if (s == "l1") return PreconditionerKind::DiagL1;
  if (s == "l2") return PreconditionerKind::DiagL2;
  if (s == "cov") return PreconditionerKind::Covariance;
  if (s == "rootcov") return PreconditionerKind::RootCovariance;
  throw ArgumentError("unknown preconditioner '" + s + "'");
}

inline const char* junction_name(JunctionPolicy j) {
  switch (j) {
    case JunctionPolicy::Dense: return "dense";
    case JunctionPolicy::BlockIdentity: return "block-identity";
    case JunctionPolicy::LU: return "lu";
  }
  return "dense";
}

inline JunctionPolicy junction_from_name(const std::string& s) {
  if (s == "dense") return JunctionPolicy::Dense;
  if (s == "block-identity") return JunctionPolicy::BlockIdentity;
  if (s == "lu") return JunctionPolicy::LU;
  throw ArgumentError("unknown junction policy '" + s + "'");
}

inline void to_json(nlohmann::json& j, const CompressionPlan& p) {
  nlohmann::json ranks = nlohmann::json::array();
  for (const auto& r : p.ranks)
    ranks.push_back({{"r_q", r.r_q},
                     {"r_k", r.r_k},
                     {"r_v", r.r_v},
                     {"r_o", r.r_o},
                     {"r_u", r.r_u},
                     {"r_d", r.r_d}});
  j = nlohmann::json{{"target_ratio", p.target_ratio},
                     {"precond", precond_name(p.precond)},
                     {"l1_alpha", p.l1_alpha},
                     {"junction", junction_name(p.junction)},
                     {"iters_qk", p.iters_qk},
                     {"iters_ud", p.iters_ud},
                     {"lambda_rel", p.lambda_rel},
                     {"rope_window", p.rope_window},
                     {"seed", p.seed},
                     {"flags",
                      {{"joint_qk", p.flags.joint_qk},
                       {"joint_vo", p.flags.joint_vo},
                       {"joint_ud", p.flags.joint_ud},
                       {"bias_aware", p.flags.bias_aware},
                       {"rope_aware", p.flags.rope_aware}}},
                     {"ranks", ranks}};
}

inline void from_json(const nlohmann::json& j, CompressionPlan& p) {
  j.at("target_ratio").get_to(p.target_ratio);
  p.precond = precond_from_name(j.at("precond").get<std::string>());
  j.at("l1_alpha").get_to(p.l1_alpha);
  p.junction = junction_from_name(j.at("junction").get<std::string>());
  j.at("iters_qk").get_to(p.iters_qk);
  j.at("iters_ud").get_to(p.iters_ud);
  j.at("lambda_rel").get_to(p.lambda_rel);
  j.at("rope_window").get_to(p.rope_window);
  j.at("seed").get_to(p.seed);
  const auto& f = j.at("flags");
  f.at("joint_qk").get_to(p.flags.joint_qk);
  f.at("joint_vo").get_to(p.flags.joint_vo);
  f.at("joint_ud").get_to(p.flags.joint_ud);
  f.at("bias_aware").get_to(p.flags.bias_aware);
  f.at("rope_aware").get_to(p.flags.rope_aware);
  p.ranks.clear();
  for (const auto& r : j.at("ranks")) {
    LayerRanks lr;
    r.at("r_q").get_to(lr.r_q);
    r.at("r_k").get_to(lr.r_k);
    r.at("r_v").get_to(lr.r_v);
    r.at("r_o").get_to(lr.r_o);
    r.at("r_u").get_to(lr.r_u);
    r.at("r_d").get_to(lr.r_d);
    p.ranks.push_back(lr);
  }
}

inline void to_json(nlohmann::json& j, const CompressionReport& r) {
  nlohmann::json modules = nlohmann::json::array();
  for (const auto& m : r.modules)
    modules.push_back({{"name", m.name},
                       {"stored", m.stored},
                       {"dense", m.dense},
                       {"whitened_loss", m.whitened_loss}});
  j = nlohmann::json{{"params_total", r.params_total},
                     {"dense_params_total", r.dense_params_total},
                     {"linear_stored", r.linear_stored},
                     {"linear_dense", r.linear_dense},
                     {"macs", r.macs},
                     {"flops", r.flops},
                     {"token_len", r.token_len},
                     {"modules", modules}};
}

// -- calibration capture ------------------------------------------------------

struct LayerActivations {
  Matrix attn_in, attn_ctx, mlp_in, mlp_mid;
};

/// Run the calibration sequences with capture and concatenate each module's
/// input windows column-wise.
inline std::vector<LayerActivations> collect_activations(
    const ModelConfig& cfg, const TensorArchive& weights,
    const std::vector<std::vector<Index>>& sequences) {
  require(!sequences.empty(), "calibration: no token sequences");
  std::vector<LayerActivations> acts(static_cast<size_t>(cfg.layers));
  Index total = 0;
  for (const auto& s : sequences) total += static_cast<Index>(s.size());
  for (auto& a : acts) {
    a.attn_in = Matrix(cfg.d, total);
    a.attn_ctx = Matrix(cfg.q_rows(), total);
    a.mlp_in = Matrix(cfg.d, total);
    a.mlp_mid = Matrix(cfg.d_i, total);
  }
  Index at = 0;
  for (const auto& seq : sequences) {
    auto fwd = forward_toy(cfg, weights, seq, true);
    const auto l = static_cast<Index>(seq.size());
    for (Index i = 0; i < cfg.layers; ++i) {
      auto& cap = fwd.capture->layers[static_cast<size_t>(i)];
      auto& a = acts[static_cast<size_t>(i)];
      a.attn_in.middleCols(at, l) = cap.attn_in;
      a.attn_ctx.middleCols(at, l) = cap.attn_ctx;
      a.mlp_in.middleCols(at, l) = cap.mlp_in;
      a.mlp_mid.middleCols(at, l) = cap.mlp_mid;
    }
    at += static_cast<Index>(seq.size());
  }
  return acts;
}

// -- whole-model compression --------------------------------------------------

namespace detail {

inline Matrix stack_rows(const std::vector<Matrix>& blocks) {
  Index rows = 0;
  for (const auto& b : blocks) rows += b.rows();
  Matrix out(rows, blocks.front().cols());
  Index at = 0;
  for (const auto& b : blocks) {
    out.middleRows(at, b.rows()) = b;
    at += b.rows();
  }
  return out;
}

inline Vector stack_vectors(const std::vector<Vector>& vs) {
  Index n = 0;
  for (const auto& v : vs) n += v.size();
  Vector out(n);
  Index at = 0;
  for (const auto& v : vs) {
    out.segment(at, v.size()) = v;
    at += v.size();
  }
  return out;
}

inline void emit_local(TensorArchive& out, const std::string& prefix, const LowRankFactor& f,
                       const std::optional<Vector>& bias) {
  out.put_matrix(prefix + ".b", f.B);
  out.put_matrix(prefix + ".a", f.A);
  if (bias) out.put_vector(prefix + ".bias", *bias);
}

inline JunctionForm junction_form_of(JunctionPolicy p) {
  switch (p) {
    case JunctionPolicy::Dense: return JunctionForm::LeftSingular;
    case JunctionPolicy::BlockIdentity: return JunctionForm::BlockIdentityA;
    case JunctionPolicy::LU: return JunctionForm::LU;
  }
  return JunctionForm::LeftSingular;
}

}  // namespace detail

struct CompressionResult {
  TensorArchive weights;
  CompressionReport report;
};

/// Compress every linear layer of the model per the plan: capture
/// activations, estimate per-module statistics, dispatch the joint or local
/// routines, apply the junction policy, and emit factors plus a report.
inline CompressionResult compress_model(const TensorArchive& weights, const ModelConfig& cfg,
                                        const CompressionPlan& plan,
                                        const std::vector<std::vector<Index>>& sequences) {
  cfg.validate();
  require(static_cast<Index>(plan.ranks.size()) == cfg.layers,
          "compress_model: plan layer count mismatch");
  const auto t0 = std::chrono::steady_clock::now();

  auto acts = collect_activations(cfg, weights, sequences);

  CompressionResult result;
  TensorArchive& out = result.weights;
  out.put_matrix("embed.tok", weights.matrix("embed.tok"));
  out.put_matrix("embed.pos", weights.matrix("embed.pos"));
  out.put_vector("final_ln.w", weights.vector("final_ln.w"));
  out.put_vector("final_ln.b", weights.vector("final_ln.b"));

  const auto dense = accounting::layer_dense(cfg);
  const Index d_h = cfg.head_dim;
  const JunctionForm local_form = detail::junction_form_of(plan.junction);

  auto compress_one = [&](const std::string& name, const Matrix& w,
                          const CalibrationStats& stats, const Matrix* raw, Index r,
                          const std::optional<Vector>& bias) {
    Matrix p = make_preconditioner(stats, plan.precond, raw, plan.l1_alpha);
    LowRankFactor f = compress_local(w, p, r);
    std::optional<Vector> b_hat;
    if (bias) b_hat = bias_update_local(w, f, stats, *bias);
    if (plan.junction != JunctionPolicy::Dense) f = apply_junction(f, local_form);
    detail::emit_local(out, name, f, b_hat);
    return f;
  };

  auto compress_layer = [&](Index layer) {
    const auto n = [&](const char* s) { return names::layer(layer, s); };
    const auto& act = acts[static_cast<size_t>(layer)];
    const auto& ranks = plan.ranks[static_cast<size_t>(layer)];

    out.put_vector(n("ln1.w"), weights.vector(n("ln1.w")));
    out.put_vector(n("ln1.b"), weights.vector(n("ln1.b")));
    out.put_vector(n("ln2.w"), weights.vector(n("ln2.w")));
    out.put_vector(n("ln2.b"), weights.vector(n("ln2.b")));

    auto attn_stats = estimate_stats(act.attn_in, plan.lambda_rel);
    Matrix wq = weights.matrix(n("attn.wq"));
    Matrix wk = weights.matrix(n("attn.wk"));
    Matrix wv = weights.matrix(n("attn.wv"));
    Matrix wo = weights.matrix(n("attn.wo"));
    std::optional<Vector> bq, bk, bv, bo;
    if (cfg.qkv_bias) {
      bq = weights.vector(n("attn.bq"));
      bk = weights.vector(n("attn.bk"));
      bv = weights.vector(n("attn.bv"));
      bo = weights.vector(n("attn.bo"));
    }

    if (plan.flags.joint_qk) {
      AttentionHeads heads;
      for (Index i = 0; i < cfg.heads; ++i) heads.wq.push_back(wq.middleRows(i * d_h, d_h));
      for (Index i = 0; i < cfg.kv_heads; ++i) heads.wk.push_back(wk.middleRows(i * d_h, d_h));
      if (cfg.qkv_bias) {
        std::vector<Vector> vbq, vbk;
        for (Index i = 0; i < cfg.heads; ++i) vbq.push_back(bq->segment(i * d_h, d_h));
        for (Index i = 0; i < cfg.kv_heads; ++i) vbk.push_back(bk->segment(i * d_h, d_h));
        heads.bq = vbq;
        heads.bk = vbk;
      }

      MlaFactors mla;
      if (plan.flags.rope_aware && cfg.rope_theta) {
        mla = joint_qk_rope(heads, attn_stats, ranks.r_q, ranks.r_k, plan.iters_qk,
                            plan.rope_window, *cfg.rope_theta);
        if (cfg.qkv_bias) {
          mla.bq_hat = *heads.bq;  // rope path keeps original biases
          mla.bk_hat = *heads.bk;
        }
      } else if (plan.flags.bias_aware && cfg.qkv_bias) {
        mla = joint_qk_bias_aware(heads, attn_stats, ranks.r_q, ranks.r_k, plan.iters_qk);
      } else {
        Matrix p = make_preconditioner(attn_stats, plan.precond, &act.attn_in, plan.l1_alpha);
        mla = joint_qk(heads, p, ranks.r_q, ranks.r_k, plan.iters_qk);
        if (cfg.qkv_bias) {
          mla.bq_hat = *heads.bq;
          mla.bk_hat = *heads.bk;
        }
      }
      if (plan.junction != JunctionPolicy::Dense) mla = apply_mla_block_identity(mla);

      out.put_matrix(n("attn.mla.aq"), mla.Aq);
      out.put_matrix(n("attn.mla.ak"), mla.Ak);
      out.put_matrix(n("attn.mla.bq"), detail::stack_rows(mla.Bq));
      out.put_matrix(n("attn.mla.bk"), detail::stack_rows(mla.Bk));
      if (mla.bq_hat) out.put_vector(n("attn.mla.bq_bias"), detail::stack_vectors(*mla.bq_hat));
      if (mla.bk_hat) out.put_vector(n("attn.mla.bk_bias"), detail::stack_vectors(*mla.bk_hat));
      result.report.modules.push_back({n("attn.qk"), mla.stored_params, dense.q + dense.k,
                                       mla.loss_trace.empty() ? 0.0 : mla.loss_trace.back()});
    } else {
      auto fq = compress_one(n("attn.q"), wq, attn_stats, &act.attn_in, ranks.r_q, bq);
      auto fk = compress_one(n("attn.k"), wk, attn_stats, &act.attn_in, ranks.r_k, bk);
      result.report.modules.push_back({n("attn.q"), fq.stored_params, dense.q, fq.whitened_loss});
      result.report.modules.push_back({n("attn.k"), fk.stored_params, dense.k, fk.whitened_loss});
    }

    if (plan.flags.joint_vo) {
      VoHeads vo;
      const Index group = cfg.heads / cfg.kv_heads;
      for (Index i = 0; i < cfg.heads; ++i) {
        vo.wv.push_back(wv.middleRows((i / group) * d_h, d_h));  // repeat-interleave
        vo.wo.push_back(wo.middleCols(i * d_h, d_h));
      }
      if (cfg.qkv_bias) {
        std::vector<Vector> vbv;
        for (Index i = 0; i < cfg.heads; ++i) vbv.push_back(bv->segment((i / group) * d_h, d_h));
        vo.bv = vbv;
        vo.bo = *bo;
      }
      const bool centered = plan.flags.bias_aware && cfg.qkv_bias;
      VoFactors f = joint_vo(vo, attn_stats, ranks.r_v, ranks.r_o, plan.iters_qk, centered);
      std::optional<Vector> bo_hat;
      if (cfg.qkv_bias) bo_hat = vo_bias_update(vo, f, attn_stats);
      if (plan.junction != JunctionPolicy::Dense)
        f = apply_vo_block_identity(f, /*per_head=*/cfg.heads == cfg.kv_heads);

      out.put_matrix(n("attn.vo.av"), f.Av);
      out.put_matrix(n("attn.vo.bo"), f.Bo);
      out.put_matrix(n("attn.vo.ao"), detail::stack_rows(f.Ao));
      std::vector<Matrix> bv_unique;  // one per kv head; group members coincide
      for (Index i = 0; i < cfg.kv_heads; ++i)
        bv_unique.push_back(f.Bv[static_cast<size_t>(i * group)]);
      out.put_matrix(n("attn.vo.bv"), detail::stack_rows(bv_unique));
      if (bo_hat) out.put_vector(n("attn.vo.bias"), *bo_hat);
      result.report.modules.push_back({n("attn.vo"),
                                       accounting::vo_joint_stored(cfg, plan.junction, ranks.r_v),
                                       dense.v + dense.o,
                                       f.loss_trace.empty() ? 0.0 : f.loss_trace.back()});
    } else {
      auto ctx_stats = estimate_stats(act.attn_ctx, plan.lambda_rel);
      auto fv = compress_one(n("attn.v"), wv, attn_stats, &act.attn_in, ranks.r_v, bv);
      auto fo = compress_one(n("attn.o"), wo, ctx_stats, &act.attn_ctx, ranks.r_o, bo);
      result.report.modules.push_back({n("attn.v"), fv.stored_params, dense.v, fv.whitened_loss});
      result.report.modules.push_back({n("attn.o"), fo.stored_params, dense.o, fo.whitened_loss});
    }

    Matrix wu = weights.matrix(n("mlp.wu"));
    Matrix wd = weights.matrix(n("mlp.wd"));
    std::optional<Vector> bu, bd;
    if (cfg.mlp_bias) {
      bu = weights.vector(n("mlp.bu"));
      bd = weights.vector(n("mlp.bd"));
    }
    auto mlp_stats = estimate_stats(act.mlp_in, plan.lambda_rel);

    if (plan.flags.joint_ud) {
      MlpCompressionOptions opts;
      opts.iters = plan.iters_ud;
      opts.bu = bu;
      opts.bd = bd;
      opts.gelu_activation = cfg.activation == Activation::Gelu;
      MlpFactors f = compress_mlp(wu, wd, act.mlp_in, std::nullopt, mlp_stats, ranks.r_u,
                                  ranks.r_d, opts);
      LowRankFactor up = f.up, down = f.down;
      if (plan.junction != JunctionPolicy::Dense) {
        up = apply_junction(up, local_form);
        down = apply_junction(down, local_form);
      }
      detail::emit_local(out, n("mlp.u"), up, f.up.bias);
      detail::emit_local(out, n("mlp.d"), down, f.down.bias);
      result.report.modules.push_back({n("mlp.ud"), up.stored_params + down.stored_params,
                                       dense.u + dense.d,
                                       f.loss_trace.empty() ? 0.0 : f.loss_trace.back()});
    } else {
      auto mid_stats = estimate_stats(act.mlp_mid, plan.lambda_rel);
      auto fu = compress_one(n("mlp.u"), wu, mlp_stats, &act.mlp_in, ranks.r_u, bu);
      auto fd = compress_one(n("mlp.d"), wd, mid_stats, &act.mlp_mid, ranks.r_d, bd);
      result.report.modules.push_back({n("mlp.u"), fu.stored_params, dense.u, fu.whitened_loss});
      result.report.modules.push_back({n("mlp.d"), fd.stored_params, dense.d, fd.whitened_loss});
    }
  };

  // Module failures are annotated with the layer they came from.
  for (Index layer = 0; layer < cfg.layers; ++layer) {
    try {
      compress_layer(layer);
    } catch (const ArgumentError& e) {
      throw ArgumentError("layer " + std::to_string(layer) + ": " + e.what());
    } catch (const NumericError& e) {
      throw NumericError("layer " + std::to_string(layer) + ": " + e.what());
    }
  }

  CompressionReport counts = count_params_flops(cfg, &plan, 128);
  result.report.token_len = counts.token_len;
  result.report.macs = counts.macs;
  result.report.flops = counts.flops;
  result.report.dense_params_total = counts.dense_params_total;
  result.report.linear_dense = counts.linear_dense;
  result.report.linear_stored = 0;
  for (const auto& m : result.report.modules) result.report.linear_stored += m.stored;
  result.report.params_total = result.report.linear_stored + accounting::overhead_params(cfg);

  const auto t1 = std::chrono::steady_clock::now();
  result.report.wall_ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
  return result;
}

// -- evaluation ---------------------------------------------------------------

struct EvalMetrics {
  std::vector<double> layer_activation_mse;  // residual stream, per layer
  std::vector<double> layer_attention_mse;   // scaled pre-softmax maps
  double logit_mse = 0.0;
  double ce_original = 0.0;
  double ce_compressed = 0.0;
  double ce_delta = 0.0;
  double perplexity_ratio = 1.0;
};

inline void to_json(nlohmann::json& j, const EvalMetrics& m) {
  j = nlohmann::json{{"layer_activation_mse", m.layer_activation_mse},
                     {"layer_attention_mse", m.layer_attention_mse},
                     {"logit_mse", m.logit_mse},
                     {"ce_original", m.ce_original},
                     {"ce_compressed", m.ce_compressed},
                     {"ce_delta", m.ce_delta},
                     {"perplexity_ratio", m.perplexity_ratio}};
}

namespace detail {

inline double next_token_ce(const Matrix& logits, const std::vector<Index>& tokens) {
  const auto l = static_cast<Index>(tokens.size());
  if (l < 2) return 0.0;
  double ce = 0.0;
  for (Index t = 0; t + 1 < l; ++t) {
    const Vector col = logits.col(t);
    const double m = col.maxCoeff();
    const double lse = m + std::log((col.array() - m).exp().sum());
    ce += lse - col[tokens[static_cast<size_t>(t + 1)]];
  }
  return ce / static_cast<double>(l - 1);
}

}  // namespace detail

/// Compare the original and compressed models on the supplied sequences:
/// per-layer residual-stream MSE, per-layer attention-map MSE, final-logit
/// MSE, and the next-token cross-entropy delta (toy perplexity ratio).
inline EvalMetrics evaluate(const TensorArchive& original, const TensorArchive& compressed,
                            const ModelConfig& cfg,
                            const std::vector<std::vector<Index>>& sequences) {
  cfg.validate();
  require(!sequences.empty(), "evaluate: no token sequences");

  EvalMetrics m;
  m.layer_activation_mse.assign(static_cast<size_t>(cfg.layers), 0.0);
  m.layer_attention_mse.assign(static_cast<size_t>(cfg.layers), 0.0);
  double logit_num = 0.0, logit_den = 0.0;
  std::vector<double> act_den(static_cast<size_t>(cfg.layers), 0.0);
  std::vector<double> map_den(static_cast<size_t>(cfg.layers), 0.0);

  for (const auto& seq : sequences) {
    auto fo = forward_toy(cfg, original, seq, true);
    auto fc = forward_toy(cfg, compressed, seq, true);
    for (Index i = 0; i < cfg.layers; ++i) {
      const auto ui = static_cast<size_t>(i);
      const auto& lo = fo.capture->layers[ui];
      const auto& lc = fc.capture->layers[ui];
      m.layer_activation_mse[ui] += (lo.layer_out - lc.layer_out).squaredNorm();
      act_den[ui] += static_cast<double>(lo.layer_out.size());
      for (size_t h = 0; h < lo.attn_maps.size(); ++h) {
        m.layer_attention_mse[ui] += (lo.attn_maps[h] - lc.attn_maps[h]).squaredNorm();
        map_den[ui] += static_cast<double>(lo.attn_maps[h].size());
      }
    }
    logit_num += (fo.logits - fc.logits).squaredNorm();
    logit_den += static_cast<double>(fo.logits.size());
    m.ce_original += detail::next_token_ce(fo.logits, seq);
    m.ce_compressed += detail::next_token_ce(fc.logits, seq);
  }

  const auto n_seq = static_cast<double>(sequences.size());
  for (size_t i = 0; i < m.layer_activation_mse.size(); ++i) {
    m.layer_activation_mse[i] /= std::max(act_den[i], 1.0);
    m.layer_attention_mse[i] /= std::max(map_den[i], 1.0);
  }
  m.logit_mse = logit_num / std::max(logit_den, 1.0);
  m.ce_original /= n_seq;
  m.ce_compressed /= n_seq;
  m.ce_delta = m.ce_compressed - m.ce_original;
  m.perplexity_ratio = std::exp(m.ce_delta);
  return m;
}

}  // namespace lrc
