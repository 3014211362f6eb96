#pragma once

#include <cmath>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "lrc/archive.hpp"
#include "lrc/joint_qk.hpp"
#include "lrc/joint_vo.hpp"

namespace lrc {

// Toy decoder-only transformer used to exercise the compression pipeline
// end to end: learned positional embeddings, pre-norm MHA with causal
// masking and 1/sqrt(d_h) scaling, a 2-layer MLP, and a tied output head.
// Weights live in a TensorArchive; compressed archives swap dense weights
// for latent factors module by module and the forward follows the factors.

enum class Activation { Relu, Gelu };

struct ModelConfig {
  Index layers = 2;
  Index d = 32;
  Index heads = 4;
  Index kv_heads = 4;
  Index head_dim = 8;
  Index d_i = 128;
  Index vocab = 64;
  Index max_pos = 128;
  Activation activation = Activation::Relu;
  bool qkv_bias = true;
  bool mlp_bias = true;
  std::optional<double> rope_theta;

  Index q_rows() const { return heads * head_dim; }
  Index kv_rows() const { return kv_heads * head_dim; }

  void validate() const {
    require(layers >= 0 && d >= 1 && heads >= 1 && kv_heads >= 1 && head_dim >= 1 &&
                d_i >= 1 && vocab >= 1 && max_pos >= 1,
            "model config: all counts must be positive");
    require(heads % kv_heads == 0, "model config: heads not divisible by kv heads");
  }
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"layers", c.layers},
                     {"d", c.d},
                     {"heads", c.heads},
                     {"kv_heads", c.kv_heads},
                     {"head_dim", c.head_dim},
                     {"d_i", c.d_i},
                     {"vocab", c.vocab},
                     {"max_pos", c.max_pos},
                     {"activation", c.activation == Activation::Relu ? "relu" : "gelu"},
                     {"qkv_bias", c.qkv_bias},
                     {"mlp_bias", c.mlp_bias}};
  if (c.rope_theta)
    j["rope_theta"] = *c.rope_theta;
  else
    j["rope_theta"] = nullptr;
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  j.at("layers").get_to(c.layers);
  j.at("d").get_to(c.d);
  j.at("heads").get_to(c.heads);
  j.at("kv_heads").get_to(c.kv_heads);
  j.at("head_dim").get_to(c.head_dim);
  j.at("d_i").get_to(c.d_i);
  j.at("vocab").get_to(c.vocab);
  j.at("max_pos").get_to(c.max_pos);
  const std::string act = j.at("activation").get<std::string>();
  if (act == "relu")
    c.activation = Activation::Relu;
  else if (act == "gelu")
    c.activation = Activation::Gelu;
  else
    throw FormatError("model config: unknown activation '" + act + "'");
  j.at("qkv_bias").get_to(c.qkv_bias);
  j.at("mlp_bias").get_to(c.mlp_bias);
  if (j.contains("rope_theta") && !j.at("rope_theta").is_null())
    c.rope_theta = j.at("rope_theta").get<double>();
  else
    c.rope_theta.reset();
}

/// Built-in presets mirroring the model-family tables: the OPT line plus a
/// few GQA/RoPE configurations. Returns nothing for unknown names.
inline std::optional<ModelConfig> preset(const std::string& name) {
  auto opt = [](Index layers, Index heads, Index d, Index d_h, Index d_i) {
    ModelConfig c;
    c.layers = layers;
    c.heads = heads;
    c.kv_heads = heads;
    c.d = d;
    c.head_dim = d_h;
    c.d_i = d_i;
    c.vocab = 50272;
    c.max_pos = 2048;
    c.activation = Activation::Relu;
    c.qkv_bias = true;
    c.mlp_bias = true;
    return c;
  };
  if (name == "opt-125m") return opt(12, 12, 768, 64, 3072);
  if (name == "opt-350m") return opt(24, 16, 1024, 64, 4096);
  if (name == "opt-1.3b") return opt(24, 32, 2048, 64, 8192);
  if (name == "opt-2.7b") return opt(32, 32, 2560, 80, 10240);
  if (name == "opt-6.7b") return opt(32, 32, 4096, 128, 16384);
  if (name == "opt-13b") return opt(40, 40, 5120, 128, 20480);
  if (name == "opt-30b") return opt(48, 56, 7168, 128, 28672);
  if (name == "opt-66b") return opt(64, 72, 9216, 128, 36864);
  if (name == "opt-175b") return opt(96, 96, 12288, 128, 49152);

  if (name == "llama2-7b") {
    ModelConfig c;
    c.layers = 32;
    c.heads = 32;
    c.kv_heads = 32;
    c.d = 4096;
    c.head_dim = 128;
    c.d_i = 11008;
    c.vocab = 32000;
    c.max_pos = 4096;
    c.activation = Activation::Gelu;
    c.qkv_bias = false;
    c.mlp_bias = false;
    c.rope_theta = 1e4;
    return c;
  }
  if (name == "qwen2-0.5b") {
    ModelConfig c;
    c.layers = 24;
    c.heads = 14;
    c.kv_heads = 2;
    c.d = 896;
    c.head_dim = 64;
    c.d_i = 4864;
    c.vocab = 151936;
    c.max_pos = 2048;
    c.activation = Activation::Gelu;
    c.qkv_bias = true;
    c.mlp_bias = false;
    c.rope_theta = 1e6;
    return c;
  }
  if (name == "toy") return ModelConfig{};
  return std::nullopt;
}

namespace names {

inline std::string layer(Index i, const std::string& suffix) {
  return "layers." + std::to_string(i) + "." + suffix;
}

}  // namespace names

struct LayerCapture {
  Matrix attn_in;   // input of Wq/Wk/Wv
  Matrix attn_ctx;  // input of Wo (concatenated head contexts)
  Matrix mlp_in;    // input of Wu
  Matrix mlp_mid;   // input of Wd (post-activation)
  std::vector<Matrix> attn_maps;  // scaled pre-softmax maps, unmasked
  Matrix layer_out;               // residual stream after the layer
};

struct ForwardCapture {
  std::vector<LayerCapture> layers;
  Matrix final_hidden;
};

struct ForwardResult {
  Matrix logits;  // vocab x l
  std::optional<ForwardCapture> capture;
};

namespace detail {

inline Matrix layer_norm(const Matrix& x, const Vector& w, const Vector& b) {
  constexpr double eps = 1e-5;
  Matrix out(x.rows(), x.cols());
  for (Index c = 0; c < x.cols(); ++c) {
    const double mean = x.col(c).mean();
    const double var = (x.col(c).array() - mean).square().mean();
    out.col(c) = (((x.col(c).array() - mean) / std::sqrt(var + eps)) * w.array()) + b.array();
  }
  return out;
}

inline Matrix activate(const Matrix& x, Activation act) {
  if (act == Activation::Relu) return x.cwiseMax(0.0);
  return x.unaryExpr([](double v) { return 0.5 * v * (1.0 + std::erf(v / std::sqrt(2.0))); });
}

// Per-module views over either dense weights or latent factors.
struct AttnWeights {
  bool mla = false;           // shared-latent QK factors
  bool split_q = false;       // locally factored Wq/Wk
  bool vo_joint = false;      // shared-latent VO factors
  bool split_v = false, split_o = false;
  Matrix wq, wk, wv, wo;      // dense forms when present
  Matrix q_b, q_a, k_b, k_a;  // split factors
  Matrix v_b, v_a, o_b, o_a;
  Matrix aq, ak, bq, bk;      // MLA planes + stacked per-head decompression
  Matrix av, bo_plane, ao, bv;  // VO planes, stacked
  std::optional<Vector> bq_bias, bk_bias, bv_bias, bo_bias;
};

inline AttnWeights load_attn(const TensorArchive& a, const ModelConfig& cfg, Index layer) {
  AttnWeights w;
  const auto n = [&](const char* s) { return names::layer(layer, s); };

  if (a.contains(n("attn.mla.aq"))) {
    w.mla = true;
    w.aq = a.matrix(n("attn.mla.aq"));
    w.ak = a.matrix(n("attn.mla.ak"));
    w.bq = a.matrix(n("attn.mla.bq"));
    w.bk = a.matrix(n("attn.mla.bk"));
    if (a.contains(n("attn.mla.bq_bias"))) w.bq_bias = a.vector(n("attn.mla.bq_bias"));
    if (a.contains(n("attn.mla.bk_bias"))) w.bk_bias = a.vector(n("attn.mla.bk_bias"));
  } else if (a.contains(n("attn.q.a"))) {
    w.split_q = true;
    w.q_b = a.matrix(n("attn.q.b"));
    w.q_a = a.matrix(n("attn.q.a"));
    w.k_b = a.matrix(n("attn.k.b"));
    w.k_a = a.matrix(n("attn.k.a"));
    if (a.contains(n("attn.q.bias"))) w.bq_bias = a.vector(n("attn.q.bias"));
    if (a.contains(n("attn.k.bias"))) w.bk_bias = a.vector(n("attn.k.bias"));
  } else {
    w.wq = a.matrix(n("attn.wq"));
    w.wk = a.matrix(n("attn.wk"));
    if (cfg.qkv_bias) {
      w.bq_bias = a.vector(n("attn.bq"));
      w.bk_bias = a.vector(n("attn.bk"));
    }
  }

  if (a.contains(n("attn.vo.av"))) {
    w.vo_joint = true;
    w.av = a.matrix(n("attn.vo.av"));
    w.bo_plane = a.matrix(n("attn.vo.bo"));
    w.ao = a.matrix(n("attn.vo.ao"));
    w.bv = a.matrix(n("attn.vo.bv"));
    if (a.contains(n("attn.vo.bias"))) w.bo_bias = a.vector(n("attn.vo.bias"));
  } else {
    if (a.contains(n("attn.v.a"))) {
      w.split_v = true;
      w.v_b = a.matrix(n("attn.v.b"));
      w.v_a = a.matrix(n("attn.v.a"));
      if (a.contains(n("attn.v.bias"))) w.bv_bias = a.vector(n("attn.v.bias"));
    } else {
      w.wv = a.matrix(n("attn.wv"));
      if (cfg.qkv_bias) w.bv_bias = a.vector(n("attn.bv"));
    }
    if (a.contains(n("attn.o.a"))) {
      w.split_o = true;
      w.o_b = a.matrix(n("attn.o.b"));
      w.o_a = a.matrix(n("attn.o.a"));
      if (a.contains(n("attn.o.bias"))) w.bo_bias = a.vector(n("attn.o.bias"));
    } else {
      w.wo = a.matrix(n("attn.wo"));
      if (cfg.qkv_bias) w.bo_bias = a.vector(n("attn.bo"));
    }
  }
  return w;
}

struct MlpWeights {
  bool factored = false;
  Matrix wu, wd;
  Matrix u_b, u_a, d_b, d_a;
  std::optional<Vector> bu, bd;
};

inline MlpWeights load_mlp(const TensorArchive& a, const ModelConfig& cfg, Index layer) {
  MlpWeights w;
  const auto n = [&](const char* s) { return names::layer(layer, s); };
  if (a.contains(n("mlp.u.a"))) {
    w.factored = true;
    w.u_b = a.matrix(n("mlp.u.b"));
    w.u_a = a.matrix(n("mlp.u.a"));
    w.d_b = a.matrix(n("mlp.d.b"));
    w.d_a = a.matrix(n("mlp.d.a"));
    if (a.contains(n("mlp.u.bias"))) w.bu = a.vector(n("mlp.u.bias"));
    if (a.contains(n("mlp.d.bias"))) w.bd = a.vector(n("mlp.d.bias"));
  } else {
    w.wu = a.matrix(n("mlp.wu"));
    w.wd = a.matrix(n("mlp.wd"));
    if (cfg.mlp_bias) {
      w.bu = a.vector(n("mlp.bu"));
      w.bd = a.vector(n("mlp.bd"));
    }
  }
  return w;
}

}  // namespace detail

/// Deterministic causal forward pass. capture=true additionally records the
/// input of every linear module, the scaled pre-softmax attention maps, and
/// the residual stream after each layer (the calibration interface).
inline ForwardResult forward_toy(const ModelConfig& cfg, const TensorArchive& weights,
                                 const std::vector<Index>& tokens, bool capture = false) {
  cfg.validate();
  require(!tokens.empty(), "forward_toy: empty token sequence");
  const auto l = static_cast<Index>(tokens.size());
  require(l <= cfg.max_pos, "forward_toy: sequence longer than max positions");
  for (Index t : tokens) require(t >= 0 && t < cfg.vocab, "forward_toy: token id out of range");

  const Matrix tok = weights.matrix("embed.tok");
  const Matrix pos = weights.matrix("embed.pos");
  if (tok.rows() != cfg.vocab || tok.cols() != cfg.d)
    throw FormatError("forward_toy: embedding shape mismatch");

  Matrix x(cfg.d, l);
  for (Index t = 0; t < l; ++t)
    x.col(t) = tok.row(tokens[static_cast<size_t>(t)]).transpose() + pos.row(t).transpose();

  ForwardResult result;
  if (capture) result.capture.emplace();

  const Index d_h = cfg.head_dim;
  const double scale = 1.0 / std::sqrt(static_cast<double>(d_h));
  std::vector<Matrix> rope;
  if (cfg.rope_theta) {
    rope.reserve(static_cast<size_t>(l));
    for (Index m = 0; m < l; ++m)
      rope.push_back(rope_rotation(d_h, *cfg.rope_theta, static_cast<double>(m)));
  }

  for (Index layer = 0; layer < cfg.layers; ++layer) {
    LayerCapture cap;
    const auto n = [&](const char* s) { return names::layer(layer, s); };

    Matrix x1 = detail::layer_norm(x, weights.vector(n("ln1.w")), weights.vector(n("ln1.b")));
    if (capture) cap.attn_in = x1;

    auto aw = detail::load_attn(weights, cfg, layer);

    Matrix q, k, v;
    if (aw.mla) {
      q = aw.bq * (aw.aq * x1);
      k = aw.bk * (aw.ak * x1);
    } else if (aw.split_q) {
      q = aw.q_b * (aw.q_a * x1);
      k = aw.k_b * (aw.k_a * x1);
    } else {
      q = aw.wq * x1;
      k = aw.wk * x1;
    }
    if (aw.bq_bias) q.colwise() += *aw.bq_bias;
    if (aw.bk_bias) k.colwise() += *aw.bk_bias;

    Matrix v_latent;
    if (aw.vo_joint) {
      v_latent = aw.av * x1;  // r_v x l; per-head values decode below
    } else if (aw.split_v) {
      v = aw.v_b * (aw.v_a * x1);
      if (aw.bv_bias) v.colwise() += *aw.bv_bias;
    } else {
      v = aw.wv * x1;
      if (aw.bv_bias) v.colwise() += *aw.bv_bias;
    }

    if (cfg.rope_theta) {
      for (Index i = 0; i < cfg.heads; ++i)
        for (Index m = 0; m < l; ++m)
          q.block(i * d_h, m, d_h, 1) = rope[static_cast<size_t>(m)] * q.block(i * d_h, m, d_h, 1);
      for (Index i = 0; i < cfg.kv_heads; ++i)
        for (Index m = 0; m < l; ++m)
          k.block(i * d_h, m, d_h, 1) = rope[static_cast<size_t>(m)] * k.block(i * d_h, m, d_h, 1);
    }

    const Index group = cfg.heads / cfg.kv_heads;
    const Index r_o = aw.vo_joint ? aw.bo_plane.cols() : 0;
    Matrix ctx;                 // concatenated decoded head contexts
    Matrix vo_acc;              // latent accumulator for the joint VO path
    if (aw.vo_joint)
      vo_acc = Matrix::Zero(r_o, l);
    else
      ctx = Matrix(cfg.q_rows(), l);

    for (Index i = 0; i < cfg.heads; ++i) {
      const Index kv = i / group;
      Matrix qi = q.middleRows(i * d_h, d_h);
      Matrix ki = k.middleRows(kv * d_h, d_h);
      Matrix scores = (ki.transpose() * qi) * scale;  // rows=keys, cols=queries
      if (capture) cap.attn_maps.push_back(scores.transpose());

      Matrix att(l, l);
      for (Index c = 0; c < l; ++c) {
        Vector col = scores.col(c);
        for (Index rix = c + 1; rix < l; ++rix) col[rix] = -std::numeric_limits<double>::infinity();
        const double m = col.head(c + 1).maxCoeff();
        Vector e = (col.array() - m).exp();
        for (Index rix = c + 1; rix < l; ++rix) e[rix] = 0.0;
        att.col(c) = e / e.sum();
      }

      if (aw.vo_joint) {
        Matrix vi = aw.bv.middleRows(kv * d_h, d_h) * v_latent;
        vo_acc += aw.ao.middleRows(i * r_o, r_o) * (vi * att);
      } else {
        Matrix vi = v.middleRows(kv * d_h, d_h);
        ctx.middleRows(i * d_h, d_h) = vi * att;
      }
    }

    Matrix attn_out;
    if (aw.vo_joint) {
      attn_out = aw.bo_plane * vo_acc;
      if (capture) cap.attn_ctx = Matrix::Zero(cfg.q_rows(), l);  // no dense ctx exists
    } else {
      if (capture) cap.attn_ctx = ctx;
      attn_out = aw.split_o ? Matrix(aw.o_b * (aw.o_a * ctx)) : Matrix(aw.wo * ctx);
    }
    if (aw.bo_bias) attn_out.colwise() += *aw.bo_bias;
    x += attn_out;

    Matrix x2 = detail::layer_norm(x, weights.vector(n("ln2.w")), weights.vector(n("ln2.b")));
    if (capture) cap.mlp_in = x2;

    auto mw = detail::load_mlp(weights, cfg, layer);
    Matrix mid = mw.factored ? Matrix(mw.u_b * (mw.u_a * x2)) : Matrix(mw.wu * x2);
    if (mw.bu) mid.colwise() += *mw.bu;
    mid = detail::activate(mid, cfg.activation);
    if (capture) cap.mlp_mid = mid;
    Matrix mlp_out = mw.factored ? Matrix(mw.d_b * (mw.d_a * mid)) : Matrix(mw.wd * mid);
    if (mw.bd) mlp_out.colwise() += *mw.bd;
    x += mlp_out;

    if (capture) {
      cap.layer_out = x;
      result.capture->layers.push_back(std::move(cap));
    }
  }

  Matrix h = detail::layer_norm(x, weights.vector("final_ln.w"), weights.vector("final_ln.b"));
  if (capture) result.capture->final_hidden = h;
  result.logits = tok * h;  // tied output head
  return result;
}

/// Random toy weights for the given config, seeded and reproducible.
inline TensorArchive random_toy_weights(const ModelConfig& cfg, uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, 1.0);
  const double w_scale = 0.8 / std::sqrt(static_cast<double>(cfg.d));
  auto mat = [&](Index rows, Index cols, double s) {
    Matrix m(rows, cols);
    for (Index i = 0; i < rows; ++i)
      for (Index j = 0; j < cols; ++j) m(i, j) = s * dist(rng);
    return m;
  };

  TensorArchive a;
  a.put_matrix("embed.tok", mat(cfg.vocab, cfg.d, 0.5));
  a.put_matrix("embed.pos", mat(cfg.max_pos, cfg.d, 0.1));
  for (Index i = 0; i < cfg.layers; ++i) {
    const auto n = [&](const char* s) { return names::layer(i, s); };
    a.put_vector(n("ln1.w"), Vector::Ones(cfg.d));
    a.put_vector(n("ln1.b"), Vector::Zero(cfg.d));
    a.put_matrix(n("attn.wq"), mat(cfg.q_rows(), cfg.d, w_scale));
    a.put_matrix(n("attn.wk"), mat(cfg.kv_rows(), cfg.d, w_scale));
    a.put_matrix(n("attn.wv"), mat(cfg.kv_rows(), cfg.d, w_scale));
    a.put_matrix(n("attn.wo"), mat(cfg.d, cfg.q_rows(), w_scale));
    if (cfg.qkv_bias) {
      a.put_vector(n("attn.bq"), 0.02 * Vector(mat(cfg.q_rows(), 1, 1.0)));
      a.put_vector(n("attn.bk"), 0.02 * Vector(mat(cfg.kv_rows(), 1, 1.0)));
      a.put_vector(n("attn.bv"), 0.02 * Vector(mat(cfg.kv_rows(), 1, 1.0)));
      a.put_vector(n("attn.bo"), 0.02 * Vector(mat(cfg.d, 1, 1.0)));
    }
    a.put_vector(n("ln2.w"), Vector::Ones(cfg.d));
    a.put_vector(n("ln2.b"), Vector::Zero(cfg.d));
    a.put_matrix(n("mlp.wu"), mat(cfg.d_i, cfg.d, w_scale));
    a.put_matrix(n("mlp.wd"), mat(cfg.d, cfg.d_i, 0.8 / std::sqrt(static_cast<double>(cfg.d_i))));
    if (cfg.mlp_bias) {
      a.put_vector(n("mlp.bu"), 0.02 * Vector(mat(cfg.d_i, 1, 1.0)));
      a.put_vector(n("mlp.bd"), 0.02 * Vector(mat(cfg.d, 1, 1.0)));
    }
  }
  a.put_vector("final_ln.w", Vector::Ones(cfg.d));
  a.put_vector("final_ln.b", Vector::Zero(cfg.d));
  return a;
}

inline std::vector<Index> random_tokens(const ModelConfig& cfg, Index count, uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<Index> dist(0, cfg.vocab - 1);
  std::vector<Index> tokens(static_cast<size_t>(count));
  for (auto& t : tokens) t = dist(rng);
  return tokens;
}

}  // namespace lrc
