#pragma once

#include <optional>
#include <vector>

#include "lrc/calibration.hpp"
#include "lrc/local_svd.hpp"

namespace lrc {

// Joint up/down MLP compression on the decoupled loss
//   L4 = alpha ||Wu X - Z||^2 + beta ||Z' - relu(Z)||^2 + gamma ||Wd Z' - Y||^2
// with auxiliary pre/post-activation variables. Every block update below is
// an exact minimizer except the two factor steps, which are damped.

struct MlpFactors {
  LowRankFactor up;    // Bu (d_i x r_u), Au (r_u x d), optional folded bias
  LowRankFactor down;  // Bd (d x r_d), Ad (r_d x d_i), optional folded bias
  Matrix Z;            // d_i x l pre-activation auxiliary
  Matrix Zp;           // d_i x l post-activation auxiliary
  std::vector<double> loss_trace;  // L4 after each outer iteration
  double alpha = 1.0, beta = 1.0, gamma = 1.0;
};

namespace detail {

inline Matrix solve_zprime_from_activated(const Matrix& wd, const Matrix& sigma_z,
                                          const Matrix& y, double beta, double gamma) {
  require(beta >= 0.0 && gamma >= 0.0, "solve_zprime: negative weight");
  require(beta > 0.0 || gamma > 0.0, "solve_zprime: both weights zero");
  require(wd.cols() == sigma_z.rows() && wd.rows() == y.rows() && sigma_z.cols() == y.cols(),
          "solve_zprime: shape mismatch");

  const Index n = wd.cols();
  Matrix rhs = beta * sigma_z + gamma * (wd.transpose() * y);
  Matrix normal = gamma * (wd.transpose() * wd) + beta * Matrix::Identity(n, n);
  if (beta > 0.0) {
    Eigen::LDLT<Matrix> ldlt(normal);
    return ldlt.solve(rhs);
  }
  return pinv(normal) * rhs;  // gamma-only: the normal matrix may be singular
}

}  // namespace detail

/// Exact block minimizer for Z': (gamma Wd^T Wd + beta I)^+ (beta relu(Z) +
/// gamma Wd^T Y).
inline Matrix solve_zprime(const Matrix& wd, const Matrix& z, const Matrix& y, double beta,
                           double gamma) {
  return detail::solve_zprime_from_activated(wd, z.cwiseMax(0.0), y, beta, gamma);
}

/// Elementwise exact Z step of the decoupled ReLU objective
///   alpha (z - z_minus)^2 + beta (z_prime - relu(z))^2.
/// The active branch offers z_plus = (alpha z- + beta z')/(alpha+beta) when
/// nonnegative; the inactive branch min(z-, 0) covers the rest, with the
/// boundary z = 0 arising as its clamp. Ties prefer the active branch.
inline Matrix solve_z_relu(const Matrix& z_minus, const Matrix& z_prime, double alpha,
                           double beta) {
  require(alpha >= 0.0 && beta >= 0.0 && alpha + beta > 0.0, "solve_z_relu: bad weights");
  require(z_minus.rows() == z_prime.rows() && z_minus.cols() == z_prime.cols(),
          "solve_z_relu: shape mismatch");

  Matrix z(z_minus.rows(), z_minus.cols());
  for (Index i = 0; i < z.rows(); ++i) {
    for (Index j = 0; j < z.cols(); ++j) {
      const double zm = z_minus(i, j);
      const double zp = z_prime(i, j);
      const double active = (alpha * zm + beta * zp) / (alpha + beta);
      const double inactive = std::min(zm, 0.0);
      const double f_inactive =
          alpha * (inactive - zm) * (inactive - zm) + beta * zp * zp;
      if (active >= 0.0) {
        const double f_active =
            alpha * (active - zm) * (active - zm) + beta * (zp - active) * (zp - active);
        z(i, j) = f_active <= f_inactive ? active : inactive;
      } else {
        z(i, j) = inactive;
      }
    }
  }
  return z;
}

struct MlpCompressionOptions {
  Index iters = 4;
  double alpha = 1.0;
  double beta = 1.0;
  double gamma = 1.0;
  std::optional<Vector> bu;  // original biases; folded via centered updates
  std::optional<Vector> bd;
  // The closed-form Z step is relu-specific. Other activations keep the
  // alternation but pin Z to the up-projection output.
  bool gelu_activation = false;
};

namespace detail {

// Damped least-squares effective weight mapping inputs onto targets:
// T In^T (In In^T + lambda I)^-1, with the trace-relative ridge policy.
inline Matrix effective_weight(const Matrix& targets, const Matrix& inputs, double lambda_rel) {
  const Index d = inputs.rows();
  const double trace = inputs.squaredNorm();
  const double lambda = trace > 0.0 ? lambda_rel * trace / static_cast<double>(d) : lambda_rel;
  Matrix gram = inputs * inputs.transpose() + lambda * Matrix::Identity(d, d);
  Eigen::LDLT<Matrix> ldlt(gram);
  return ldlt.solve(inputs * targets.transpose()).transpose();
}

}  // namespace detail

/// Block-coordinate descent for the joint up/down factorization. Y defaults
/// to the original MLP output on the calibration window. Bias-bearing MLPs
/// center every regression and factor step and carry updated biases in the
/// returned factors.
inline MlpFactors compress_mlp(const Matrix& wu, const Matrix& wd, const Matrix& x,
                               std::optional<Matrix> y_opt, const CalibrationStats& stats,
                               Index r_u, Index r_d, const MlpCompressionOptions& opts = {}) {
  require(x.cols() >= 1, "compress_mlp: empty calibration window");
  require(wu.cols() == x.rows() && wd.cols() == wu.rows(), "compress_mlp: shape mismatch");
  require(r_u >= 1 && r_u <= std::min(wu.rows(), wu.cols()), "compress_mlp: up rank range");
  require(r_d >= 1 && r_d <= std::min(wd.rows(), wd.cols()), "compress_mlp: down rank range");
  require(opts.iters >= 1, "compress_mlp: need at least one iteration");
  require(opts.alpha > 0.0 && opts.beta > 0.0 && opts.gamma > 0.0,
          "compress_mlp: loss weights must be positive");

  const bool biased = opts.bu.has_value() || opts.bd.has_value();
  const Vector bu0 = opts.bu ? *opts.bu : Vector::Zero(wu.rows());
  const Vector bd0 = opts.bd ? *opts.bd : Vector::Zero(wd.rows());
  const double lambda_rel = stats.lambda_rel > 0.0 ? stats.lambda_rel : kDefaultLambdaRel;

  auto sigma = [&](const Matrix& z) -> Matrix {
    if (!opts.gelu_activation) return z.cwiseMax(0.0);
    return z.unaryExpr(
        [](double v) { return 0.5 * v * (1.0 + std::erf(v / std::sqrt(2.0))); });
  };

  MlpFactors f;
  f.alpha = opts.alpha;
  f.beta = opts.beta;
  f.gamma = opts.gamma;

  f.Z = wu * x;
  if (biased) f.Z.colwise() += bu0;
  f.Zp = sigma(f.Z);
  Matrix y;
  if (y_opt) {
    y = std::move(*y_opt);
    require(y.rows() == wd.rows() && y.cols() == x.cols(), "compress_mlp: output shape");
  } else {
    y = wd * f.Zp;
    if (biased) y.colwise() += bd0;
  }

  Matrix wu_hat = wu;
  Matrix wd_hat = wd;
  Vector bu_hat = bu0;
  Vector bd_hat = bd0;

  auto factor_step = [&](const Matrix& targets, const Matrix& inputs, const Vector& b0,
                         Index r, Matrix& w_hat, Vector& b_hat) -> LowRankFactor {
    auto in_stats = estimate_stats(inputs, lambda_rel);
    LowRankFactor factor;
    if (biased) {
      Matrix t_centered = targets.colwise() - Vector(targets.rowwise().mean());
      Matrix in_centered = inputs.colwise() - in_stats.mu;
      Matrix eff = detail::effective_weight(t_centered, in_centered, lambda_rel);
      factor = compress_local(eff, psd_sqrt(in_stats.C0), r);
      w_hat = factor.reconstruct();
      b_hat = targets.rowwise().mean() - w_hat * in_stats.mu;
      factor.bias = b_hat;
    } else {
      Matrix eff = detail::effective_weight(targets, inputs, lambda_rel);
      factor = compress_local(eff, psd_sqrt(in_stats.C), r);
      w_hat = factor.reconstruct();
      b_hat = b0;  // zero
    }
    return factor;
  };

  auto l4 = [&]() {
    Matrix up_fit = wu_hat * x;
    if (biased) up_fit.colwise() += bu_hat;
    Matrix down_fit = wd_hat * f.Zp;
    if (biased) down_fit.colwise() += bd_hat;
    return f.alpha * (up_fit - f.Z).squaredNorm() +
           f.beta * (f.Zp - sigma(f.Z)).squaredNorm() +
           f.gamma * (down_fit - y).squaredNorm();
  };

  for (Index it = 0; it < opts.iters; ++it) {
    f.up = factor_step(f.Z, x, bu0, r_u, wu_hat, bu_hat);

    Matrix z_minus = wu_hat * x;
    if (biased) z_minus.colwise() += bu_hat;

    // Z' sees the current auxiliary Z; Z itself updates right after.
    Matrix y_target = biased ? Matrix(y.colwise() - bd_hat) : y;
    f.Zp = detail::solve_zprime_from_activated(wd_hat, sigma(f.Z), y_target, f.beta, f.gamma);

    f.Z = opts.gelu_activation ? z_minus : solve_z_relu(z_minus, f.Zp, f.alpha, f.beta);

    f.down = factor_step(y, f.Zp, bd0, r_d, wd_hat, bd_hat);

    f.loss_trace.push_back(l4());
  }
  return f;
}

}  // namespace lrc
