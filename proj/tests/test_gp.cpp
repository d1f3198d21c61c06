#include "snfgp/gp.hpp"

#include <cmath>
#include <numbers>
#include <random>

#include <catch2/catch_amalgamated.hpp>

#include "test_helpers.hpp"

using namespace snfgp;
using snfgp::testing::central_diff;
using snfgp::testing::random_matrix;
using snfgp::testing::random_vector;
using snfgp::testing::rel_err;

namespace {

// Dense-algebra oracle: same effective covariance (noise plus the base jitter
// the implementation always applies), evaluated through explicit inverse and
// determinant instead of a Cholesky factor.
double dense_log_marginal(const Vector& z, const Matrix& x, const GpHyperparams& h) {
  const Eigen::Index n = z.size();
  Matrix k(n, n);
  const Vector ls = h.length_scales();
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < n; ++j) {
      double q = 0.0;
      for (int d = 0; d < x.cols(); ++d) {
        const double diff = x(i, d) - x(j, d);
        q += diff * diff / (ls[d] * ls[d]);
      }
      k(i, j) = h.signal_variance() * std::exp(-0.5 * q);
    }
  }
  k.diagonal().array() += h.noise_variance() + 1e-8 * h.signal_variance();
  return -0.5 * z.dot(k.inverse() * z) - 0.5 * std::log(k.determinant()) -
         0.5 * static_cast<double>(n) * std::log(2.0 * std::numbers::pi);
}

GpHyperparams toy_hyper(double s2, double l, double eps2) {
  Vector ls(1);
  ls << l;
  return GpHyperparams::make(s2, ls, eps2);
}

}  // namespace

TEST_CASE("kernel matrix matches the ARD squared-exponential form", "[gp]") {
  SECTION("zero distance yields the signal variance") {
    Matrix x(1, 1);
    x << 0.3;
    const Matrix k = kernel_matrix(x, x, toy_hyper(2.0, 1.0, 0.0));
    REQUIRE(k(0, 0) == 2.0);
  }
  SECTION("unit distance, unit length scale") {
    Matrix x1(1, 1), x2(1, 1);
    x1 << 0.0;
    x2 << 1.0;
    const Matrix k = kernel_matrix(x1, x2, toy_hyper(1.0, 1.0, 0.0));
    REQUIRE_THAT(k(0, 0), Catch::Matchers::WithinAbs(0.60653065971263342, 1e-15));
  }
  SECTION("two input dimensions with distinct length scales") {
    Matrix x1(1, 2), x2(1, 2);
    x1 << 0.0, 0.0;
    x2 << 1.0, 2.0;
    Vector ls(2);
    ls << 1.0, 2.0;
    const auto h = GpHyperparams::make(1.0, ls, 0.0);
    const Matrix k = kernel_matrix(x1, x2, h);
    REQUIRE_THAT(k(0, 0), Catch::Matchers::WithinAbs(0.36787944117144233, 1e-15));
  }
  SECTION("dimension mismatch is an input error") {
    Matrix x1(1, 2), x2(1, 1);
    x1.setZero();
    x2.setZero();
    REQUIRE_THROWS_AS(kernel_matrix(x1, x2, toy_hyper(1.0, 1.0, 0.0)), InputError);
  }
  SECTION("symmetric with diagonal s2 on identical inputs") {
    std::mt19937_64 rng(17);
    const Matrix x = random_matrix(rng, 6, 2);
    Vector ls(2);
    ls << 0.7, 1.3;
    const auto h = GpHyperparams::make(1.9, ls, 0.0);
    const Matrix k = kernel_matrix(x, x, h);
    REQUIRE((k - k.transpose()).cwiseAbs().maxCoeff() == 0.0);
    REQUIRE((k.diagonal().array() - 1.9).abs().maxCoeff() == 0.0);
  }
}

TEST_CASE("hyperparameter construction enforces positivity", "[gp]") {
  Vector ls(1);
  ls << 1.0;
  REQUIRE_THROWS_AS(GpHyperparams::make(0.0, ls, 0.1), InputError);
  REQUIRE_THROWS_AS(GpHyperparams::make(-1.0, ls, 0.1), InputError);
  Vector bad_ls(2);
  bad_ls << 1.0, -0.5;
  REQUIRE_THROWS_AS(GpHyperparams::make(1.0, bad_ls, 0.1), InputError);
  REQUIRE_THROWS_AS(GpHyperparams::make(1.0, ls, -0.1), InputError);
  // noise variance of exactly zero is allowed
  const auto h = GpHyperparams::make(1.0, ls, 0.0);
  REQUIRE(h.noise_variance() == 0.0);
}

TEST_CASE("log marginal likelihood agrees with dense-algebra oracles", "[gp]") {
  SECTION("univariate zero at mode") {
    Matrix x(1, 1);
    x << 0.4;
    Vector z(1);
    z << 0.0;
    const double got = log_marginal_likelihood(z, x, toy_hyper(1.0, 1.0, 0.5));
    const double want = -0.5 * std::log(2.0 * std::numbers::pi * (1.5 + 1e-8));
    REQUIRE_THAT(got, Catch::Matchers::WithinAbs(want, 1e-14));
  }
  SECTION("two-point case, frozen value and dense oracle") {
    Matrix x(2, 1);
    x << 0.0, 1.0;
    Vector z(2);
    z << 1.0, -1.0;
    const auto h = toy_hyper(1.0, 1.0, 0.1);
    const double got = log_marginal_likelihood(z, x, h);
    REQUIRE_THAT(got, Catch::Matchers::WithinAbs(-3.7784293420946788, 1e-12));
    REQUIRE_THAT(got, Catch::Matchers::WithinAbs(dense_log_marginal(z, x, h), 1e-12));
  }
  SECTION("vanishing kernel reduces to iid standard normal") {
    Matrix x(3, 1);
    x << 0.0, 0.5, 1.0;
    Vector z(3);
    z << 0.3, -0.8, 1.2;
    const double got = log_marginal_likelihood(z, x, toy_hyper(1e-30, 1.0, 1.0));
    const double want =
        -0.5 * z.squaredNorm() - 1.5 * std::log(2.0 * std::numbers::pi);
    REQUIRE_THAT(got, Catch::Matchers::WithinAbs(want, 1e-10));
  }
  SECTION("Cholesky/oracle equivalence for N <= 8") {
    std::mt19937_64 rng(21);
    for (int trial = 0; trial < 12; ++trial) {
      const int n = 2 + static_cast<int>(rng() % 7);
      const int d = 1 + static_cast<int>(rng() % 2);
      const Matrix x = random_matrix(rng, n, d);
      const Vector z = random_vector(rng, n);
      Vector ls = random_vector(rng, d).array().abs() + 0.5;
      const auto h = GpHyperparams::make(0.8, ls, 0.2);
      REQUIRE_THAT(log_marginal_likelihood(z, x, h),
                   Catch::Matchers::WithinAbs(dense_log_marginal(z, x, h), 1e-8));
    }
  }
  SECTION("non-finite inputs raise a numerical error") {
    Matrix x(2, 1);
    x << 0.0, std::numeric_limits<double>::quiet_NaN();
    Vector z(2);
    z << 1.0, -1.0;
    REQUIRE_THROWS_AS(log_marginal_likelihood(z, x, toy_hyper(1.0, 1.0, 0.1)),
                      NumericalError);
  }
}

TEST_CASE("marginal likelihood gradients match finite differences", "[gp]") {
  SECTION("grad_z vanishes at the mode") {
    Matrix x(1, 1);
    x << 0.2;
    Vector z(1);
    z << 0.0;
    const auto g = log_marginal_gradients(z, x, toy_hyper(1.0, 1.0, 0.5));
    REQUIRE(g.grad_z[0] == 0.0);
  }
  SECTION("random instances, all parameters") {
    std::mt19937_64 rng(99);
    const double step = 1e-5;
    for (int trial = 0; trial < 20; ++trial) {
      const int n = 4;
      const int d = 1 + static_cast<int>(rng() % 2);
      const Matrix x = random_matrix(rng, n, d);
      const Vector z = random_vector(rng, n);
      GpHyperparams h;
      h.log_signal_variance = 0.3 * random_vector(rng, 1)[0];
      h.log_length_scales = random_vector(rng, d) * 0.3;
      h.log_noise_variance = std::log(0.3) + 0.3 * random_vector(rng, 1)[0];

      const auto g = log_marginal_gradients(z, x, h);

      auto eval_sig = [&](double v) {
        GpHyperparams hh = h;
        hh.log_signal_variance = v;
        return log_marginal_likelihood(z, x, hh);
      };
      REQUIRE(rel_err(g.d_log_signal_variance,
                      central_diff(eval_sig, h.log_signal_variance, step)) < 1e-4);

      for (int dd = 0; dd < d; ++dd) {
        auto eval_ls = [&](double v) {
          GpHyperparams hh = h;
          hh.log_length_scales[dd] = v;
          return log_marginal_likelihood(z, x, hh);
        };
        REQUIRE(rel_err(g.d_log_length_scales[dd],
                        central_diff(eval_ls, h.log_length_scales[dd], step)) < 1e-4);
      }

      auto eval_eps = [&](double v) {
        GpHyperparams hh = h;
        hh.log_noise_variance = v;
        return log_marginal_likelihood(z, x, hh);
      };
      REQUIRE(rel_err(g.d_log_noise_variance,
                      central_diff(eval_eps, h.log_noise_variance, step)) < 1e-4);

      for (int i = 0; i < n; ++i) {
        auto eval_z = [&](double v) {
          Vector zz = z;
          zz[i] = v;
          return log_marginal_likelihood(zz, x, h);
        };
        REQUIRE(rel_err(g.grad_z[i], central_diff(eval_z, z[i], step)) < 1e-4);
      }
    }
  }
  SECTION("noise gradient is negative at z = 0") {
    Matrix x(3, 1);
    x << 0.0, 0.4, 1.0;
    Vector z = Vector::Zero(3);
    const auto h = toy_hyper(1.0, 0.8, 0.2);
    const auto g = log_marginal_gradients(z, x, h);
    REQUIRE(g.d_log_noise_variance < 0.0);
    auto eval_eps = [&](double v) {
      GpHyperparams hh = h;
      hh.log_noise_variance = v;
      return log_marginal_likelihood(z, x, hh);
    };
    REQUIRE(rel_err(g.d_log_noise_variance,
                    central_diff(eval_eps, h.log_noise_variance, 1e-5)) < 1e-4);
  }
}

TEST_CASE("predictive distribution", "[gp]") {
  SECTION("far queries revert to the prior") {
    Matrix x(2, 1);
    x << 0.0, 1.0;
    Vector z(2);
    z << 1.0, -0.5;
    const auto h = toy_hyper(1.3, 0.5, 0.2);
    Vector x_star(1);
    x_star << 50.0;
    const auto p = predict(x_star, z, x, h, false);
    REQUIRE(std::abs(p.mean) < 1e-9);
    REQUIRE_THAT(p.variance, Catch::Matchers::WithinAbs(1.3, 1e-9));
    const auto pn = predict(x_star, z, x, h, true);
    REQUIRE_THAT(pn.variance, Catch::Matchers::WithinAbs(1.5, 1e-9));
  }
  SECTION("noise-free interpolation reproduces a training target") {
    Matrix x(3, 1);
    x << 0.0, 0.5, 1.0;
    Vector z(3);
    z << 0.7, -0.2, 0.4;
    const auto h = toy_hyper(1.0, 0.6, 0.0);
    Vector x_star(1);
    x_star << 0.5;
    const auto p = predict(x_star, z, x, h, false);
    REQUIRE_THAT(p.mean, Catch::Matchers::WithinAbs(-0.2, 1e-5));
    REQUIRE(p.variance >= 0.0);
    REQUIRE(p.variance < 1e-5);
  }
  SECTION("two-point dense oracle at the midpoint") {
    Matrix x(2, 1);
    x << 0.0, 1.0;
    Vector z(2);
    z << 1.0, -1.0;
    const auto h = toy_hyper(1.0, 1.0, 0.1);
    Vector x_star(1);
    x_star << 0.5;
    const auto p = predict(x_star, z, x, h, false);
    // Frozen from the dense 2x2 conditional-Gaussian oracle.
    REQUIRE_THAT(p.mean, Catch::Matchers::WithinAbs(0.0, 1e-12));
    REQUIRE_THAT(p.variance,
                 Catch::Matchers::WithinAbs(0.087270100803346184, 1e-10));
    const auto pn = predict(x_star, z, x, h, true);
    REQUIRE_THAT(pn.variance,
                 Catch::Matchers::WithinAbs(0.18727010080334619, 1e-10));
  }
  SECTION("posterior never exceeds the prior and contracts with duplicates") {
    std::mt19937_64 rng(5);
    Matrix x = random_matrix(rng, 6, 1);
    Vector z = random_vector(rng, 6);
    const auto h = toy_hyper(0.9, 0.7, 0.15);
    Vector x_star(1);
    x_star << 0.33;
    for (int trial = 0; trial < 10; ++trial) {
      Vector q = random_vector(rng, 1, 3.0);
      const auto p = predict(q, z, x, h, true);
      REQUIRE(p.variance <= 0.9 + 0.15 + 1e-9);
    }
    const auto before = predict(x_star, z, x, h, false);
    Matrix x2(7, 1);
    x2 << x, x_star;
    Vector z2(7);
    z2 << z, 0.1;
    const auto after = predict(x_star, z2, x2, h, false);
    REQUIRE(after.variance <= before.variance + 1e-12);
  }
  SECTION("prior reversion is monotone along a ray") {
    std::mt19937_64 rng(7);
    Matrix x = random_matrix(rng, 5, 1);
    Vector z = random_vector(rng, 5);
    const auto h = toy_hyper(1.0, 0.8, 0.05);
    GpPosterior post(x, z, h);
    const double x_max = x.col(0).maxCoeff();
    double prev_var = -1.0;
    double prev_mean = std::numeric_limits<double>::infinity();
    for (double dist = 3.0; dist <= 10.0; dist += 1.0) {
      Vector q(1);
      q << x_max + dist * 0.8;
      const auto p = post.predict(q, false);
      REQUIRE(p.variance >= prev_var);
      REQUIRE(std::abs(p.mean) <= prev_mean);
      prev_var = p.variance;
      prev_mean = std::abs(p.mean);
    }
    REQUIRE_THAT(prev_var, Catch::Matchers::WithinAbs(1.0, 1e-6));
    REQUIRE(prev_mean < 1e-6);
  }
}
