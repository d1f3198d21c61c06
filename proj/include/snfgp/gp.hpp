#pragma once

#include <cmath>
#include <limits>
#include <numbers>
#include <string>
#include <utility>

#include <Eigen/Cholesky>
#include <Eigen/Dense>

#include "snfgp/common.hpp"

namespace snfgp {

// ARD squared-exponential hyperparameters. Stored as unconstrained logs so
// optimizers work in a box-free space; exponentiation guarantees positivity.
struct GpHyperparams {
  double log_signal_variance = 0.0;
  Vector log_length_scales;
  double log_noise_variance = std::log(0.1);

  static GpHyperparams make(double signal_variance, const Vector& length_scales,
                            double noise_variance) {
    if (!(signal_variance > 0.0))
      throw InputError("GpHyperparams: signal_variance must be > 0");
    if (length_scales.size() == 0)
      throw InputError("GpHyperparams: at least one length scale required");
    if (!(length_scales.array() > 0.0).all())
      throw InputError("GpHyperparams: every length_scale must be > 0");
    if (noise_variance < 0.0)
      throw InputError("GpHyperparams: noise_variance must be >= 0");
    GpHyperparams h;
    h.log_signal_variance = std::log(signal_variance);
    h.log_length_scales = length_scales.array().log();
    h.log_noise_variance = std::log(noise_variance);  // -inf encodes exact zero
    return h;
  }

  double signal_variance() const { return std::exp(log_signal_variance); }
  Vector length_scales() const { return log_length_scales.array().exp(); }
  double noise_variance() const { return std::exp(log_noise_variance); }
  int input_dim() const { return static_cast<int>(log_length_scales.size()); }
};

struct GpPredictive {
  double mean = 0.0;
  double variance = 0.0;
};

// Gradients of the log marginal likelihood, in log-parameter space.
struct GpGradients {
  Vector grad_z;
  double d_log_signal_variance = 0.0;
  Vector d_log_length_scales;
  double d_log_noise_variance = 0.0;
};

// Entry (i,j) = s2 * exp(-sum_d (x1_id - x2_jd)^2 / (2 l_d^2)).
inline Matrix kernel_matrix(const Matrix& x1, const Matrix& x2, const GpHyperparams& hyper) {
  const int dim = hyper.input_dim();
  if (x1.cols() != dim || x2.cols() != dim)
    throw InputError("kernel_matrix: input dimension mismatch (X1 has " +
                     std::to_string(x1.cols()) + " cols, X2 has " + std::to_string(x2.cols()) +
                     ", hyperparams expect " + std::to_string(dim) + ")");
  const double s2 = hyper.signal_variance();
  const Vector ls = hyper.length_scales();
  Matrix k(x1.rows(), x2.rows());
  for (Eigen::Index i = 0; i < x1.rows(); ++i) {
    for (Eigen::Index j = 0; j < x2.rows(); ++j) {
      double q = 0.0;
      for (int d = 0; d < dim; ++d) {
        const double diff = x1(i, d) - x2(j, d);
        q += diff * diff / (ls[d] * ls[d]);
      }
      k(i, j) = s2 * std::exp(-0.5 * q);
    }
  }
  return k;
}

namespace detail {
constexpr double kJitterBaseFraction = 1e-8;  // of signal variance, added up front
constexpr double kJitterMaxFraction = 1e-2;   // escalation ceiling
}  // namespace detail

// Exact GP over one output dimension: factorize the training covariance once,
// then answer marginal-likelihood, gradient, and predictive queries.
class GpPosterior {
 public:
  GpPosterior(Matrix x, Vector z, GpHyperparams hyper)
      : x_(std::move(x)), z_(std::move(z)), hyper_(std::move(hyper)) {
    const Eigen::Index n = x_.rows();
    if (n < 1) throw InputError("GpPosterior: need at least one training point");
    if (z_.size() != n)
      throw InputError("GpPosterior: z has " + std::to_string(z_.size()) +
                       " entries for " + std::to_string(n) + " inputs");
    signal_cov_ = kernel_matrix(x_, x_, hyper_);
    if (!signal_cov_.allFinite() || !z_.allFinite())
      throw NumericalError("GpPosterior: non-finite covariance or targets");

    const double s2 = hyper_.signal_variance();
    const double eps2 = hyper_.noise_variance();
    double jitter = detail::kJitterBaseFraction * s2;
    const double jitter_max = detail::kJitterMaxFraction * s2;
    for (;;) {
      Matrix k = signal_cov_;
      k.diagonal().array() += eps2 + jitter;
      llt_.compute(k);
      if (llt_.info() == Eigen::Success) break;
      jitter *= 10.0;
      if (jitter > jitter_max * (1.0 + 1e-12))
        throw NumericalError("GpPosterior: Cholesky failed after jitter escalation to " +
                             format_double(jitter / 10.0));
    }
    jitter_ = jitter;
    alpha_ = llt_.solve(z_);
  }

  double log_marginal() const {
    const double n = static_cast<double>(z_.size());
    const double log_det_half = llt_.matrixLLT().diagonal().array().log().sum();
    return -0.5 * z_.dot(alpha_) - log_det_half - 0.5 * n * std::log(2.0 * std::numbers::pi);
  }

  // d(log marginal)/d(log hyper) via 1/2 tr[(aa^T - K^-1) dK/d eta], a = K^-1 z.
  GpGradients gradients() const {
    const Eigen::Index n = z_.size();
    const Matrix kinv = llt_.solve(Matrix::Identity(n, n));
    const Matrix a = alpha_ * alpha_.transpose() - kinv;

    GpGradients g;
    g.grad_z = -alpha_;

    // Signal part and the proportional jitter both scale with s2.
    Matrix dk = signal_cov_;
    dk.diagonal().array() += jitter_;
    g.d_log_signal_variance = 0.5 * a.cwiseProduct(dk).sum();

    const Vector ls = hyper_.length_scales();
    const int dim = hyper_.input_dim();
    g.d_log_length_scales.resize(dim);
    for (int d = 0; d < dim; ++d) {
      double acc = 0.0;
      for (Eigen::Index i = 0; i < n; ++i) {
        for (Eigen::Index j = 0; j < n; ++j) {
          const double diff = x_(i, d) - x_(j, d);
          acc += a(i, j) * signal_cov_(i, j) * diff * diff / (ls[d] * ls[d]);
        }
      }
      g.d_log_length_scales[d] = 0.5 * acc;
    }

    const double eps2 = hyper_.noise_variance();
    g.d_log_noise_variance = 0.5 * eps2 * (alpha_.squaredNorm() - kinv.trace());
    return g;
  }

  GpPredictive predict(const Vector& x_star, bool include_noise) const {
    if (x_star.size() != hyper_.input_dim())
      throw InputError("predict: x_star has " + std::to_string(x_star.size()) +
                       " entries, expected " + std::to_string(hyper_.input_dim()));
    const double s2 = hyper_.signal_variance();
    const Vector ls = hyper_.length_scales();
    Vector k_star(x_.rows());
    for (Eigen::Index i = 0; i < x_.rows(); ++i) {
      double q = 0.0;
      for (int d = 0; d < hyper_.input_dim(); ++d) {
        const double diff = x_(i, d) - x_star[d];
        q += diff * diff / (ls[d] * ls[d]);
      }
      k_star[i] = s2 * std::exp(-0.5 * q);
    }
    GpPredictive out;
    out.mean = k_star.dot(alpha_);
    out.variance = std::max(0.0, s2 - k_star.dot(llt_.solve(k_star)));
    if (include_noise) out.variance += hyper_.noise_variance();
    return out;
  }

  double applied_jitter() const { return jitter_; }
  const GpHyperparams& hyper() const { return hyper_; }
  const Matrix& inputs() const { return x_; }
  const Vector& targets() const { return z_; }

 private:
  Matrix x_;
  Vector z_;
  GpHyperparams hyper_;
  Matrix signal_cov_;
  Eigen::LLT<Matrix> llt_;
  Vector alpha_;
  double jitter_ = 0.0;
};

inline double log_marginal_likelihood(const Vector& z, const Matrix& x,
                                      const GpHyperparams& hyper) {
  return GpPosterior(x, z, hyper).log_marginal();
}

inline GpGradients log_marginal_gradients(const Vector& z, const Matrix& x,
                                          const GpHyperparams& hyper) {
  return GpPosterior(x, z, hyper).gradients();
}

inline GpPredictive predict(const Vector& x_star, const Vector& z, const Matrix& x,
                            const GpHyperparams& hyper, bool include_noise) {
  return GpPosterior(x, z, hyper).predict(x_star, include_noise);
}

}  // namespace snfgp
