#include <catch2/catch_amalgamated.hpp>

#include "lrc/joint_vo.hpp"
#include "test_util.hpp"

using namespace lrc;
using testutil::randn;
using testutil::random_orthonormal_rows;
using testutil::random_spd;

namespace {

VoHeads make_vo(std::mt19937_64& rng, Index h, Index d_h, Index d, Index d_out,
                bool with_bias = false) {
  VoHeads heads;
  for (Index i = 0; i < h; ++i) {
    heads.wv.push_back(randn(rng, d_h, d));
    heads.wo.push_back(randn(rng, d_out, d_h));
  }
  if (with_bias) {
    std::vector<Vector> bv;
    for (Index i = 0; i < h; ++i) bv.push_back(testutil::randn_vec(rng, d_h));
    heads.bv = bv;
    heads.bo = testutil::randn_vec(rng, d_out);
  }
  return heads;
}

CalibrationStats identity_stats(Index d) {
  CalibrationStats s;
  s.C = Matrix::Identity(d, d);
  s.C0 = Matrix::Identity(d, d);
  s.mu = Vector::Zero(d);
  s.sample_len = 1;
  return s;
}

std::vector<Matrix> random_softmax_maps(std::mt19937_64& rng, Index h, Index l) {
  std::vector<Matrix> maps;
  for (Index i = 0; i < h; ++i) {
    Matrix raw = randn(rng, l, l);
    Matrix soft(l, l);
    for (Index c = 0; c < l; ++c) {
      Vector col = raw.col(c);
      col = (col.array() - col.maxCoeff()).exp();
      soft.col(c) = col / col.sum();
    }
    maps.push_back(soft);
  }
  return maps;
}

// Eigen-only restart oracle, mirroring the one in the QK tests.
double vo_restart_oracle(std::mt19937_64& rng, const std::vector<Matrix>& slices, Index r_o,
                         Index r_v, int restarts, int iters) {
  double energy = 0.0;
  for (const auto& g : slices) energy += g.squaredNorm();
  double best = std::numeric_limits<double>::infinity();
  for (int t = 0; t < restarts; ++t) {
    Matrix bo = random_orthonormal_rows(rng, r_o, slices.front().rows());
    Matrix av;
    for (int n = 0; n < iters; ++n) {
      Matrix tv = Matrix::Zero(slices.front().cols(), slices.front().cols());
      for (const auto& g : slices) tv += g.transpose() * bo.transpose() * bo * g;
      Eigen::SelfAdjointEigenSolver<Matrix> ev(tv);
      av = ev.eigenvectors().rightCols(r_v).transpose();
      Matrix to = Matrix::Zero(slices.front().rows(), slices.front().rows());
      for (const auto& g : slices) to += g * av.transpose() * av * g.transpose();
      Eigen::SelfAdjointEigenSolver<Matrix> eo(to);
      bo = eo.eigenvectors().rightCols(r_o).transpose();
    }
    double captured = 0.0;
    for (const auto& g : slices) captured += (bo * g * av.transpose()).squaredNorm();
    best = std::min(best, energy - captured);
  }
  return best;
}

}  // namespace

TEST_CASE("single head at full ranks reproduces Wo Wv") {
  std::mt19937_64 rng(1);
  const Index d = 6, d_h = 3;
  auto heads = make_vo(rng, 1, d_h, d, d);
  auto f = joint_vo(heads, identity_stats(d), d, d, 8);
  Matrix target = heads.wo[0] * heads.wv[0];
  Matrix got = f.o_weight(0) * f.v_weight(0);
  REQUIRE(testutil::rel_err(got, target) <= 1e-8);
}

TEST_CASE("single head reduced rank loses exactly the discarded spectrum") {
  std::mt19937_64 rng(2);
  const Index d = 6, d_h = 4, r = 2;
  auto heads = make_vo(rng, 1, d_h, d, d);
  auto f = joint_vo(heads, identity_stats(d), r, r, 16);
  Matrix g = heads.wo[0] * heads.wv[0];
  Eigen::JacobiSVD<Matrix> svd(g);
  double expect = 0.0;
  for (Index i = r; i < svd.singularValues().size(); ++i)
    expect += svd.singularValues()[i] * svd.singularValues()[i];
  REQUIRE(f.loss_trace.back() == Catch::Approx(expect).margin(1e-8));
}

TEST_CASE("two-head instance: monotone trace and 100-restart oracle") {
  std::mt19937_64 rng(3);
  const Index d = 8, d_h = 4, h = 2, r = 3;
  auto heads = make_vo(rng, h, d_h, d, d);
  auto stats = identity_stats(d);
  auto f = joint_vo(heads, stats, r, r, 50);
  for (size_t i = 1; i < f.loss_trace.size(); ++i)
    REQUIRE(f.loss_trace[i] <= f.loss_trace[i - 1] + 1e-10);

  std::vector<Matrix> slices;
  for (Index i = 0; i < h; ++i)
    slices.push_back(heads.wo[static_cast<size_t>(i)] * heads.wv[static_cast<size_t>(i)]);
  const double best = vo_restart_oracle(rng, slices, r, r, 100, 50);
  REQUIRE(std::abs(f.loss_trace.back() - best) <= 1e-6 * std::max(1.0, std::abs(best)));
}

TEST_CASE("joint_vo loss trace stays monotone across 100 seeded instances") {
  std::mt19937_64 rng(600);
  for (int trial = 0; trial < 100; ++trial) {
    const Index d_h = 2 + static_cast<Index>(rng() % 3);
    const Index h = 1 + static_cast<Index>(rng() % 3);
    const Index d = d_h * h;
    const Index r_v = 1 + static_cast<Index>(rng() % d);
    const Index r_o = 1 + static_cast<Index>(rng() % d);
    auto heads = make_vo(rng, h, d_h, d, d);
    Matrix x = randn(rng, d, 3 * d);
    auto f = joint_vo(heads, estimate_stats(x), r_v, r_o, 5);
    for (size_t i = 1; i < f.loss_trace.size(); ++i)
      REQUIRE(f.loss_trace[i] <= f.loss_trace[i - 1] + 1e-10);
  }
}

TEST_CASE("vo_bias_update vanishes with zero means and biases") {
  std::mt19937_64 rng(4);
  const Index d = 6, d_h = 2, h = 2;
  auto heads = make_vo(rng, h, d_h, d, d, true);
  for (auto& b : *heads.bv) b.setZero();
  heads.bo->setZero();
  auto stats = identity_stats(d);  // mu = 0
  auto f = joint_vo(heads, stats, 3, 3, 8);
  Vector b_hat = vo_bias_update(heads, f, stats);
  REQUIRE(b_hat.norm() <= 1e-10);
}

TEST_CASE("vo_bias_update at full ranks preserves the output path exactly") {
  std::mt19937_64 rng(5);
  const Index d = 6, d_h = 3, h = 2, l = 20;
  auto heads = make_vo(rng, h, d_h, d, d, true);
  Matrix x = randn(rng, d, l);
  auto stats = estimate_stats(x);
  auto f = joint_vo(heads, stats, d, d, 8, true);
  Vector b_hat = vo_bias_update(heads, f, stats);

  auto maps = random_softmax_maps(rng, h, l);
  Matrix y_orig = Matrix::Zero(d, l);
  for (Index i = 0; i < h; ++i) {
    const auto ui = static_cast<size_t>(i);
    Matrix v = heads.wv[ui] * x;
    v.colwise() += (*heads.bv)[ui];
    y_orig += heads.wo[ui] * (v * maps[ui]);
  }
  y_orig.colwise() += *heads.bo;

  Matrix y_comp = apply_vo_value_side(f, x, maps);
  y_comp.colwise() += b_hat;
  REQUIRE((y_orig - y_comp).norm() <= 1e-8 * std::max(1.0, y_orig.norm()));
}

TEST_CASE("vo_bias_update is the finite-difference optimum of the map-free loss") {
  std::mt19937_64 rng(6);
  const Index d = 6, d_h = 2, h = 2, l = 48;
  auto heads = make_vo(rng, h, d_h, d, d, true);
  Matrix x = randn(rng, d, l);
  x.colwise() += Vector(testutil::randn_vec(rng, d, 1.5));
  auto stats = estimate_stats(x);
  auto f = joint_vo(heads, stats, 3, 3, 8, true);
  Vector b_hat = vo_bias_update(heads, f, stats);

  // VO path evaluated without softmax weighting; the bias choice only moves
  // the column means, which the closed form matches exactly.
  auto loss = [&](const Vector& b) {
    Matrix y = Matrix::Zero(d, l);
    for (Index i = 0; i < h; ++i) {
      const auto ui = static_cast<size_t>(i);
      Matrix v = heads.wv[ui] * x;
      v.colwise() += (*heads.bv)[ui];
      y += heads.wo[ui] * v;
    }
    y.colwise() += *heads.bo;
    Matrix y_hat = Matrix::Zero(d, l);
    for (Index i = 0; i < h; ++i)
      y_hat += f.o_weight(i) * (f.v_weight(i) * x);
    y_hat.colwise() += b;
    return (y - y_hat).squaredNorm();
  };

  const double at_opt = loss(b_hat);
  const double eps = 1e-3;
  for (Index i = 0; i < d; ++i) {
    Vector up = b_hat, dn = b_hat;
    up[i] += eps;
    dn[i] -= eps;
    REQUIRE(loss(up) > at_opt);
    REQUIRE(loss(dn) > at_opt);
  }

  // Centered residual is independent of the bias choice.
  Matrix centered = x.colwise() - stats.mu;
  double centered_loss = 0.0;
  Matrix delta = Matrix::Zero(d, d);
  for (Index i = 0; i < h; ++i)
    delta += heads.wo[static_cast<size_t>(i)] * heads.wv[static_cast<size_t>(i)] -
             f.o_weight(i) * f.v_weight(i);
  centered_loss = (delta * centered).squaredNorm();
  REQUIRE(at_opt == Catch::Approx(centered_loss).epsilon(1e-8));
}

TEST_CASE("contraction plan ties break to value-side weighting") {
  auto plan = vo_contraction_plan(4, 4, 4, 1, 16, 4, 3);
  REQUIRE(plan.flops_value_side == plan.flops_output_side);
  REQUIRE(plan.order == VoOrder::ValueSideWeighting);
}

TEST_CASE("contraction plan on the worked configuration") {
  // d=64, h=4, d_h=16, l=128, r_v=32, r_o=4: h*r_o = 16 < 32 = r_v.
  auto plan = vo_contraction_plan(64, 64, 16, 4, 128, 32, 4);
  REQUIRE(4 * 4 < 32);
  REQUIRE(plan.order == VoOrder::OutputSideWeighting);
  const long long l = 128;
  const long long value = l * 64 * 32 + 4 * 16 * l * 32 + 4 * 16 * l * l + 4 * 16 * l * 4 +
                          4 * 64 * l * 4;
  const long long output = l * 64 * 32 + 32 * l * l + 4 * 16 * l * 32 + 4 * 16 * l * 4 +
                           64 * l * 4;
  REQUIRE(plan.flops_value_side == value);
  REQUIRE(plan.flops_output_side == output);
}

TEST_CASE("plan difference equals the closed-form reduction on random configs") {
  std::mt19937_64 rng(7);
  for (int t = 0; t < 20; ++t) {
    const Index d_h = 1 + static_cast<Index>(rng() % 8);
    const Index h = 1 + static_cast<Index>(rng() % 8);
    const Index d = d_h * h;  // square attention: the identity assumes d = h*d_h
    const Index l = 1 + static_cast<Index>(rng() % 64);
    const Index r_v = 1 + static_cast<Index>(rng() % d);
    const Index r_o = 1 + static_cast<Index>(rng() % d);
    auto plan = vo_contraction_plan(d, d, d_h, h, l, r_v, r_o);
    const long long expect = static_cast<long long>(d - r_v) * l * l +
                             static_cast<long long>(h - 1) * d * l * r_o;
    REQUIRE(plan.flops_value_side - plan.flops_output_side == expect);
  }
}

TEST_CASE("both contraction orders produce the same output") {
  std::mt19937_64 rng(8);
  const Index d = 8, d_h = 2, h = 3, l = 12;
  auto heads = make_vo(rng, h, d_h, d, d);
  Matrix x = randn(rng, d, l);
  auto f = joint_vo(heads, estimate_stats(x), 4, 4, 8);
  auto maps = random_softmax_maps(rng, h, l);
  Matrix a = apply_vo_value_side(f, x, maps);
  Matrix b = apply_vo_output_side(f, x, maps);
  REQUIRE((a - b).norm() <= 1e-9 * std::max(1.0, a.norm()));
}

TEST_CASE("full-rank VO factors reproduce the MHA output for any maps") {
  std::mt19937_64 rng(9);
  const Index d = 6, d_h = 3, h = 2, l = 10;
  auto heads = make_vo(rng, h, d_h, d, d);
  Matrix x = randn(rng, d, l);
  auto f = joint_vo(heads, estimate_stats(x), d, d, 8);
  auto maps = random_softmax_maps(rng, h, l);

  Matrix y = Matrix::Zero(d, l);
  for (Index i = 0; i < h; ++i)
    y += heads.wo[static_cast<size_t>(i)] *
         ((heads.wv[static_cast<size_t>(i)] * x) * maps[static_cast<size_t>(i)]);
  Matrix y_hat = apply_vo_value_side(f, x, maps);
  REQUIRE((y - y_hat).norm() <= 1e-8 * std::max(1.0, y.norm()));
}

TEST_CASE("VO block-identity junctions keep the output and save parameters") {
  std::mt19937_64 rng(11);
  const Index d = 8, d_h = 2, h = 4, l = 10, r = 4;
  auto heads = make_vo(rng, h, d_h, d, d);
  Matrix x = randn(rng, d, l);
  auto f = joint_vo(heads, estimate_stats(x), r, r, 8);
  auto g = apply_vo_block_identity(f);

  auto maps = random_softmax_maps(rng, h, l);
  Matrix before = apply_vo_value_side(f, x, maps);
  Matrix after = apply_vo_value_side(g, x, maps);
  REQUIRE((before - after).norm() <= 1e-8 * std::max(1.0, before.norm()));
  REQUIRE(g.stored_params == f.stored_params - r * r - r * r - h * d_h * d_h);

  // Identity blocks planted: r exact unit columns in Av, r unit rows in Bo.
  auto is_unit = [](const Vector& v) {
    Index ones = 0;
    for (Index i = 0; i < v.size(); ++i) {
      if (v[i] == 1.0)
        ++ones;
      else if (v[i] != 0.0)
        return false;
    }
    return ones == 1;
  };
  Index unit_cols = 0;
  for (Index c = 0; c < g.Av.cols(); ++c)
    if (is_unit(g.Av.col(c))) ++unit_cols;
  REQUIRE(unit_cols >= r);
  Index unit_rows = 0;
  for (Index i = 0; i < g.Bo.rows(); ++i)
    if (is_unit(g.Bo.row(i).transpose())) ++unit_rows;
  REQUIRE(unit_rows >= r);
}

TEST_CASE("joint_vo validates ranks") {
  std::mt19937_64 rng(10);
  auto heads = make_vo(rng, 2, 2, 6, 6);
  REQUIRE_THROWS_AS(joint_vo(heads, identity_stats(6), 0, 2), ArgumentError);
  REQUIRE_THROWS_AS(joint_vo(heads, identity_stats(6), 2, 7), ArgumentError);
}
