// Command-line driver: build toy models, capture calibration statistics,
// compress, report accounting, and evaluate original vs compressed weights.

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "lrc/pipeline.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

lrc::ModelConfig load_config(const fs::path& dir) {
  std::ifstream in(dir / "config.json");
  if (!in) throw lrc::FormatError("missing config.json in " + dir.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw lrc::FormatError(std::string("bad config.json: ") + e.what());
  }
  return j.get<lrc::ModelConfig>();
}

void save_config(const lrc::ModelConfig& cfg, const fs::path& dir) {
  std::ofstream out(dir / "config.json");
  out << json(cfg).dump(2) << '\n';
}

// One whitespace-separated token sequence per line.
std::vector<std::vector<lrc::Index>> load_tokens(const fs::path& file) {
  std::ifstream in(file);
  if (!in) throw lrc::FormatError("cannot open token file " + file.string());
  std::vector<std::vector<lrc::Index>> sequences;
  std::string line;
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::vector<lrc::Index> seq;
    long long t;
    while (ls >> t) seq.push_back(static_cast<lrc::Index>(t));
    if (ls.fail() && !ls.eof()) throw lrc::FormatError("token file has non-integer content");
    if (!seq.empty()) sequences.push_back(std::move(seq));
  }
  if (sequences.empty()) throw lrc::FormatError("token file has no sequences");
  return sequences;
}

void save_tokens(const std::vector<std::vector<lrc::Index>>& sequences, const fs::path& file) {
  std::ofstream out(file);
  for (const auto& seq : sequences) {
    for (size_t i = 0; i < seq.size(); ++i) out << (i ? " " : "") << seq[i];
    out << '\n';
  }
}

std::string human_count(double v) {
  char buf[64];
  if (v >= 1e12)
    std::snprintf(buf, sizeof buf, "%.2fT", v / 1e12);
  else if (v >= 1e9)
    std::snprintf(buf, sizeof buf, "%.2fB", v / 1e9);
  else if (v >= 1e6)
    std::snprintf(buf, sizeof buf, "%.2fM", v / 1e6);
  else if (v >= 1e3)
    std::snprintf(buf, sizeof buf, "%.2fK", v / 1e3);
  else
    std::snprintf(buf, sizeof buf, "%.0f", v);
  return buf;
}

void print_report_table(const lrc::CompressionReport& rep) {
  if (!rep.modules.empty()) {
    std::printf("%-22s %14s %14s %16s\n", "module", "stored", "dense", "whitened loss");
    for (const auto& m : rep.modules)
      std::printf("%-22s %14lld %14lld %16.6g\n", m.name.c_str(), m.stored, m.dense,
                  m.whitened_loss);
    std::printf("\n");
  }
  std::printf("linear params    %s of %s (%.2f%%)\n",
              human_count(double(rep.linear_stored)).c_str(),
              human_count(double(rep.linear_dense)).c_str(),
              100.0 * double(rep.linear_stored) / double(std::max<long long>(rep.linear_dense, 1)));
  std::printf("total params     %s of %s\n", human_count(double(rep.params_total)).c_str(),
              human_count(double(rep.dense_params_total)).c_str());
  std::printf("MACs  @%lld tokens   %s\n", static_cast<long long>(rep.token_len),
              human_count(double(rep.macs)).c_str());
  std::printf("FLOPs @%lld tokens   %s\n", static_cast<long long>(rep.token_len),
              human_count(double(rep.flops)).c_str());
}

int run_init_toy(const fs::path& dir, const std::string& preset_name, lrc::ModelConfig cfg,
                 bool use_preset, uint64_t seed, lrc::Index sequences, lrc::Index seq_len) {
  if (use_preset) {
    auto p = lrc::preset(preset_name);
    if (!p) throw lrc::ArgumentError("unknown preset '" + preset_name + "'");
    cfg = *p;
  }
  cfg.validate();
  fs::create_directories(dir);
  auto weights = lrc::random_toy_weights(cfg, seed);
  lrc::save_archive(weights, dir);
  save_config(cfg, dir);
  std::vector<std::vector<lrc::Index>> seqs;
  for (lrc::Index s = 0; s < sequences; ++s)
    seqs.push_back(lrc::random_tokens(cfg, seq_len, seed + 1 + static_cast<uint64_t>(s)));
  save_tokens(seqs, dir / "tokens.txt");
  std::printf("wrote toy model (%lld layers, d=%lld) and %lld sequences to %s\n",
              static_cast<long long>(cfg.layers), static_cast<long long>(cfg.d),
              static_cast<long long>(sequences), dir.string().c_str());
  return 0;
}

int run_calibrate(const fs::path& model_dir, const fs::path& tokens_file, const fs::path& out,
                  double lambda_rel) {
  auto cfg = load_config(model_dir);
  auto weights = lrc::load_archive(model_dir);
  auto sequences = load_tokens(tokens_file);
  auto acts = lrc::collect_activations(cfg, weights, sequences);

  lrc::TensorArchive stats_out;
  json meta;
  meta["lambda_rel"] = lambda_rel;
  for (lrc::Index i = 0; i < cfg.layers; ++i) {
    const auto& act = acts[static_cast<size_t>(i)];
    const std::pair<const char*, const lrc::Matrix*> sites[] = {
        {"attn_in", &act.attn_in}, {"attn_ctx", &act.attn_ctx},
        {"mlp_in", &act.mlp_in},   {"mlp_mid", &act.mlp_mid}};
    for (const auto& [site, x] : sites) {
      auto stats = lrc::estimate_stats(*x, lambda_rel);
      const std::string prefix = lrc::names::layer(i, site);
      stats_out.put_matrix(prefix + ".C", stats.C);
      stats_out.put_matrix(prefix + ".C0", stats.C0);
      stats_out.put_vector(prefix + ".mu", stats.mu);
      meta[prefix] = {{"sample_len", stats.sample_len}, {"lambda", stats.lambda}};
    }
  }
  fs::create_directories(out);
  lrc::save_archive(stats_out, out);
  std::ofstream mf(out / "stats.json");
  mf << meta.dump(2) << '\n';
  std::printf("calibration statistics for %lld layers written to %s\n",
              static_cast<long long>(cfg.layers), out.string().c_str());
  return 0;
}

int run_compress(const fs::path& model_dir, const fs::path& out, lrc::CompressionPlan plan,
                 const std::string& tokens_opt) {
  auto cfg = load_config(model_dir);
  auto weights = lrc::load_archive(model_dir);

  fs::path tokens_file = tokens_opt.empty() ? model_dir / "tokens.txt" : fs::path(tokens_opt);
  auto sequences = load_tokens(tokens_file);

  plan.ranks = lrc::solve_ranks(cfg, plan.target_ratio, plan.flags, plan.junction);
  if (plan.flags.joint_qk && !plan.ranks.empty() &&
      (plan.ranks[0].r_q < cfg.head_dim || plan.ranks[0].r_k < cfg.head_dim))
    std::fprintf(stderr,
                 "warning: latent rank below the head dimension (%lld); some heads "
                 "will be redundant\n",
                 static_cast<long long>(cfg.head_dim));
  auto result = lrc::compress_model(weights, cfg, plan, sequences);

  fs::create_directories(out);
  lrc::save_archive(result.weights, out);
  save_config(cfg, out);
  {
    std::ofstream pf(out / "plan.json");
    pf << json(plan).dump(2) << '\n';
    json report_json = result.report;
    report_json["plan"] = plan;  // echo so the report stands alone
    std::ofstream rf(out / "report.json");
    rf << report_json.dump(2) << '\n';
  }
  print_report_table(result.report);
  std::printf("wall time        %.1f ms\n", result.report.wall_ms);
  std::printf("compressed model written to %s\n", out.string().c_str());
  return 0;
}

int run_report(const fs::path& dir, lrc::Index token_len) {
  auto cfg = load_config(dir);
  lrc::CompressionReport rep;
  if (fs::exists(dir / "plan.json")) {
    std::ifstream pf(dir / "plan.json");
    json j;
    pf >> j;
    auto plan = j.get<lrc::CompressionPlan>();
    rep = lrc::count_params_flops(cfg, &plan, token_len);
    if (fs::exists(dir / "report.json")) {
      std::ifstream rf(dir / "report.json");
      json rj;
      rf >> rj;
      for (const auto& m : rj.at("modules"))
        rep.modules.push_back({m.at("name").get<std::string>(), m.at("stored").get<long long>(),
                               m.at("dense").get<long long>(),
                               m.at("whitened_loss").get<double>()});
    }
  } else {
    rep = lrc::count_params_flops(cfg, nullptr, token_len);
  }
  print_report_table(rep);
  std::cout << json(rep).dump(2) << '\n';
  return 0;
}

int run_evaluate(const fs::path& orig_dir, const fs::path& comp_dir, const fs::path& tokens) {
  auto cfg = load_config(orig_dir);
  auto orig = lrc::load_archive(orig_dir);
  auto comp = lrc::load_archive(comp_dir);
  auto sequences = load_tokens(tokens);
  auto m = lrc::evaluate(orig, comp, cfg, sequences);

  std::printf("%-8s %18s %18s\n", "layer", "activation MSE", "attention MSE");
  for (size_t i = 0; i < m.layer_activation_mse.size(); ++i)
    std::printf("%-8zu %18.8g %18.8g\n", i, m.layer_activation_mse[i],
                m.layer_attention_mse[i]);
  std::printf("logit MSE        %.8g\n", m.logit_mse);
  std::printf("CE original      %.6f\n", m.ce_original);
  std::printf("CE compressed    %.6f\n", m.ce_compressed);
  std::printf("perplexity ratio %.6f\n", m.perplexity_ratio);
  std::cout << json(m).dump(2) << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Low-rank transformer compression toolkit"};
  app.require_subcommand(1);

  auto* init = app.add_subcommand("init-toy", "create a random toy model + token file");
  std::string init_dir, init_preset;
  lrc::ModelConfig init_cfg;
  uint64_t init_seed = 1;
  lrc::Index init_sequences = 64, init_seq_len = 128;
  lrc::Index init_kv_heads = 0, init_head_dim = 0;
  double init_rope = 0.0;
  bool no_qkv_bias = false, no_mlp_bias = false;
  init->add_option("dir", init_dir, "output directory")->required();
  init->add_option("--preset", init_preset, "named config preset (e.g. opt-125m, toy)");
  init->add_option("--layers", init_cfg.layers);
  init->add_option("--d", init_cfg.d);
  init->add_option("--heads", init_cfg.heads);
  init->add_option("--kv-heads", init_kv_heads, "defaults to --heads");
  init->add_option("--head-dim", init_head_dim, "defaults to d/heads");
  init->add_option("--d-i", init_cfg.d_i);
  init->add_option("--vocab", init_cfg.vocab);
  init->add_option("--max-pos", init_cfg.max_pos);
  init->add_option("--rope-theta", init_rope, "enable rotary embeddings with this base");
  init->add_flag("--no-qkv-bias", no_qkv_bias);
  init->add_flag("--no-mlp-bias", no_mlp_bias);
  init->add_option("--seed", init_seed);
  init->add_option("--sequences", init_sequences, "token sequences to generate");
  init->add_option("--seq-len", init_seq_len, "length of each sequence");

  auto* cal = app.add_subcommand("calibrate", "export per-module activation statistics");
  std::string cal_model, cal_tokens, cal_out;
  double cal_lambda = lrc::kDefaultLambdaRel;
  cal->add_option("model-dir", cal_model)->required();
  cal->add_option("tokens", cal_tokens)->required();
  cal->add_option("-o,--out", cal_out, "output stats directory")->required();
  cal->add_option("--lambda-rel", cal_lambda, "trace-relative damping");

  auto* cmp = app.add_subcommand("compress", "compress all linear layers to a target ratio");
  std::string cmp_model, cmp_out, cmp_tokens;
  std::string cmp_precond = "rootcov", cmp_junction = "block-identity";
  lrc::CompressionPlan plan;
  bool no_joint_qk = false;
  cmp->add_option("model-dir", cmp_model)->required();
  cmp->add_option("--ratio", plan.target_ratio, "target linear-parameter reduction in [0,1)")
      ->required();
  cmp->add_option("--tokens", cmp_tokens,
                  "calibration token file (default model-dir/tokens.txt)");
  cmp->add_option("--precond", cmp_precond, "identity|hessian|l1|l2|cov|rootcov");
  cmp->add_option("--junction", cmp_junction, "dense|block-identity|lu");
  cmp->add_flag("--no-joint-qk", no_joint_qk, "fall back to split Q/K local compression");
  cmp->add_flag("--joint-qk", plan.flags.joint_qk, "joint QK factorization (default on)");
  cmp->add_flag("--joint-ud", plan.flags.joint_ud, "joint up/down MLP compression");
  cmp->add_flag("--joint-vo", plan.flags.joint_vo, "joint value/output compression");
  cmp->add_flag("--bias-aware", plan.flags.bias_aware, "bias-aware QK/VO updates");
  cmp->add_flag("--rope", plan.flags.rope_aware, "RoPE-aware windowed QK objective");
  cmp->add_option("--iters-qk", plan.iters_qk);
  cmp->add_option("--iters-ud", plan.iters_ud);
  cmp->add_option("--lambda-rel", plan.lambda_rel);
  cmp->add_option("--l1-alpha", plan.l1_alpha);
  cmp->add_option("--rope-window", plan.rope_window);
  cmp->add_option("--seed", plan.seed);
  cmp->add_option("-o,--out", cmp_out, "output directory")->required();

  auto* rpt = app.add_subcommand("report", "parameter/FLOPs accounting for a model directory");
  std::string rpt_dir;
  lrc::Index rpt_tokens = 128;
  rpt->add_option("dir", rpt_dir)->required();
  rpt->add_option("--tokens", rpt_tokens, "token length for FLOPs");

  auto* ev = app.add_subcommand("evaluate", "compare original and compressed models");
  std::string ev_orig, ev_comp, ev_tokens;
  ev->add_option("original", ev_orig)->required();
  ev->add_option("compressed", ev_comp)->required();
  ev->add_option("tokens", ev_tokens)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*init) {
      init_cfg.kv_heads = init_kv_heads > 0 ? init_kv_heads : init_cfg.heads;
      init_cfg.head_dim = init_head_dim > 0 ? init_head_dim : init_cfg.d / init_cfg.heads;
      if (init_rope > 0.0) init_cfg.rope_theta = init_rope;
      init_cfg.qkv_bias = !no_qkv_bias;
      init_cfg.mlp_bias = !no_mlp_bias;
      return run_init_toy(init_dir, init_preset, init_cfg, !init_preset.empty(), init_seed,
                          init_sequences, init_seq_len);
    }
    if (*cal) return run_calibrate(cal_model, cal_tokens, cal_out, cal_lambda);
    if (*cmp) {
      plan.flags.joint_qk = !no_joint_qk;
      plan.precond = lrc::precond_from_name(cmp_precond);
      plan.junction = lrc::junction_from_name(cmp_junction);
      return run_compress(cmp_model, cmp_out, plan, cmp_tokens);
    }
    if (*rpt) return run_report(rpt_dir, rpt_tokens);
    if (*ev) return run_evaluate(ev_orig, ev_comp, ev_tokens);
  } catch (const lrc::ArgumentError& e) {
    std::cerr << "argument error: " << e.what() << '\n';
    return 2;
  } catch (const lrc::FormatError& e) {
    std::cerr << "format error: " << e.what() << '\n';
    return 3;
  } catch (const lrc::NumericError& e) {
    std::cerr << "numeric error: " << e.what() << '\n';
    return 4;
  }
  return 0;
}
