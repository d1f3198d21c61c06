#include "snfgp/flow.hpp"

#include <cmath>
#include <random>

#include <catch2/catch_amalgamated.hpp>

#include "test_helpers.hpp"

using namespace snfgp;
using snfgp::testing::random_matrix;
using snfgp::testing::random_vector;
using snfgp::testing::rel_err;

namespace {

// Flow with non-trivial output layers so forward is not the identity.
FlowParams random_flow(int dim, int n_layers, int hidden, std::mt19937_64& rng,
                       double out_scale = 0.4) {
  FlowParams params = make_flow(dim, n_layers, hidden, 2.0, rng);
  std::normal_distribution<double> normal(0.0, out_scale);
  for (auto& layer : params.layers) {
    for (auto* net : {&layer.scale_net, &layer.translate_net}) {
      for (Eigen::Index i = 0; i < net->w3.rows(); ++i)
        for (Eigen::Index j = 0; j < net->w3.cols(); ++j) net->w3(i, j) = normal(rng);
      for (Eigen::Index i = 0; i < net->b3.size(); ++i) net->b3[i] = normal(rng);
    }
  }
  return params;
}

// log|det| of a finite-difference Jacobian of the forward map.
double numerical_log_det(const Vector& w, const FlowParams& params, double step = 1e-6) {
  const int k = static_cast<int>(w.size());
  Matrix jac(k, k);
  for (int j = 0; j < k; ++j) {
    Vector hi = w, lo = w;
    hi[j] += step;
    lo[j] -= step;
    jac.col(j) = (flow_forward(hi, params).first - flow_forward(lo, params).first) /
                 (2.0 * step);
  }
  return std::log(std::abs(jac.fullPivLu().determinant()));
}

}  // namespace

TEST_CASE("identity initialization gives the identity map", "[flow]") {
  std::mt19937_64 rng(3);
  const auto params = make_flow(4, 6, 8, 2.0, rng);
  const Vector w = random_vector(rng, 4);
  const auto [z, ld] = flow_forward(w, params);
  REQUIRE((z - w).cwiseAbs().maxCoeff() == 0.0);
  REQUIRE(ld == 0.0);

  SECTION("all-zero nets are also the identity") {
    auto zeroed = zero_like(params);
    const auto [z0, ld0] = flow_forward(w, zeroed);
    REQUIRE((z0 - w).cwiseAbs().maxCoeff() == 0.0);
    REQUIRE(ld0 == 0.0);
  }
}

TEST_CASE("forward and inverse are mutual inverses", "[flow]") {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    const int k = 2 + static_cast<int>(rng() % 5);
    const auto params = random_flow(k, 4, 10, rng);
    const Vector w = random_vector(rng, k, 1.5);
    const auto [z, ld_fwd] = flow_forward(w, params);
    const auto [w_back, ld_inv] = flow_inverse(z, params);
    REQUIRE((w_back - w).cwiseAbs().maxCoeff() < 1e-6);
    REQUIRE_THAT(ld_fwd + ld_inv, Catch::Matchers::WithinAbs(0.0, 1e-8));
    const auto [z_back, ld2] = flow_forward(w_back, params);
    REQUIRE((z_back - z).cwiseAbs().maxCoeff() < 1e-6);
  }
}

TEST_CASE("log-determinant matches a numerical Jacobian", "[flow]") {
  std::mt19937_64 rng(23);
  for (int k : {2, 3, 5}) {
    for (int trial = 0; trial < 10; ++trial) {
      const auto params = random_flow(k, 4, 8, rng);
      const Vector w = random_vector(rng, k);
      const auto [z, ld] = flow_forward(w, params);
      REQUIRE_THAT(ld, Catch::Matchers::WithinAbs(numerical_log_det(w, params), 1e-4));
    }
  }
}

TEST_CASE("per-layer log-determinants sum to the total", "[flow]") {
  std::mt19937_64 rng(31);
  const auto params = random_flow(4, 6, 8, rng);
  const Matrix w = random_matrix(rng, 5, 4);
  FlowTrace trace;
  const auto [z, ld] = flow_forward_batch(w, params, &trace);
  Vector sum = Vector::Zero(5);
  for (const auto& lt : trace.layers) sum += lt.log_det;
  REQUIRE((sum - ld).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("log-scales are bounded by s_max", "[flow]") {
  std::mt19937_64 rng(37);
  auto params = random_flow(4, 6, 8, rng, 10.0);  // extreme output weights
  const Matrix w = random_matrix(rng, 20, 4, 3.0);
  FlowTrace trace;
  flow_forward_batch(w, params, &trace);
  for (const auto& lt : trace.layers)
    REQUIRE(lt.s.cwiseAbs().maxCoeff() <= 2.0 + 1e-12);
}

TEST_CASE("backward pass matches finite differences", "[flow]") {
  std::mt19937_64 rng(41);
  const int k = 4, hidden = 8;
  const auto params = random_flow(k, 3, hidden, rng);
  const Vector w = random_vector(rng, k);
  const Vector grad_z = random_vector(rng, k);
  const double grad_ld = 0.7;

  const auto res = flow_backward(w, params, grad_z, grad_ld);
  const Vector packed = flow_pack(params);
  const Vector grad_packed = flow_pack(res.grads);

  auto objective = [&](const Vector& p, const Vector& w_in) {
    FlowParams pp = params;
    flow_unpack(p, pp);
    const auto [z, ld] = flow_forward(w_in, pp);
    return grad_z.dot(z) + grad_ld * ld;
  };

  SECTION("parameter gradients") {
    const double step = 1e-5;
    for (Eigen::Index i = 0; i < packed.size(); i += 7) {
      Vector hi = packed, lo = packed;
      hi[i] += step;
      lo[i] -= step;
      const double fd = (objective(hi, w) - objective(lo, w)) / (2.0 * step);
      REQUIRE(rel_err(grad_packed[i], fd, 1e-6) < 1e-4);
    }
  }

  SECTION("input gradients") {
    const double step = 1e-6;
    for (int i = 0; i < k; ++i) {
      Vector hi = w, lo = w;
      hi[i] += step;
      lo[i] -= step;
      const double fd = (objective(packed, hi) - objective(packed, lo)) / (2.0 * step);
      REQUIRE(rel_err(res.grad_w(0, i), fd, 1e-6) < 1e-4);
    }
  }
}

TEST_CASE("backward at identity initialization", "[flow]") {
  std::mt19937_64 rng(43);
  const auto params = make_flow(4, 4, 8, 2.0, rng);
  const Vector w = random_vector(rng, 4);

  SECTION("identity Jacobian passes grad_z through") {
    const Vector grad_z = random_vector(rng, 4);
    const auto res = flow_backward(w, params, grad_z, 0.0);
    REQUIRE((res.grad_w.row(0).transpose() - grad_z).cwiseAbs().maxCoeff() < 1e-12);
  }

  SECTION("log-det gradient reaches only scale-net output layers") {
    const auto res = flow_backward(w, params, Vector::Zero(4), 1.0);
    for (const auto& layer : res.grads.layers) {
      REQUIRE(layer.translate_net.w1.cwiseAbs().maxCoeff() == 0.0);
      REQUIRE(layer.translate_net.w3.cwiseAbs().maxCoeff() == 0.0);
      REQUIRE(layer.translate_net.b3.cwiseAbs().maxCoeff() == 0.0);
      REQUIRE(layer.scale_net.w1.cwiseAbs().maxCoeff() == 0.0);
      REQUIRE(layer.scale_net.w2.cwiseAbs().maxCoeff() == 0.0);
      const double out_grad = layer.scale_net.w3.cwiseAbs().maxCoeff() +
                              layer.scale_net.b3.cwiseAbs().maxCoeff();
      REQUIRE(out_grad > 0.0);
    }
  }
}

TEST_CASE("flow input validation", "[flow]") {
  std::mt19937_64 rng(47);
  const auto params = make_flow(3, 2, 4, 2.0, rng);
  Vector bad(3);
  bad << 0.0, std::numeric_limits<double>::quiet_NaN(), 1.0;
  REQUIRE_THROWS_AS(flow_forward(bad, params), NumericalError);
  REQUIRE_THROWS_AS(flow_inverse(bad, params), NumericalError);
  Vector wrong(4);
  wrong.setZero();
  REQUIRE_THROWS_AS(flow_forward(wrong, params), InputError);

  SECTION("mask validation") {
    auto broken = params;
    broken.layers[0].mask.setOnes();
    REQUIRE_THROWS_AS(validate_flow(broken), InputError);
    broken = params;
    broken.layers[1].mask = broken.layers[0].mask;  // not complementary
    REQUIRE_THROWS_AS(validate_flow(broken), InputError);
  }
}

TEST_CASE("round trips and packing on the full-size flow", "[flow]") {
  std::mt19937_64 rng(53);
  auto params = random_flow(15, 6, 64, rng);
  const Matrix w = random_matrix(rng, 100, 15, 2.0);
  const auto [z, ld] = flow_forward_batch(w, params);
  const auto [w_back, ld_inv] = flow_inverse_batch(z, params);
  REQUIRE((w_back - w).cwiseAbs().maxCoeff() < 1e-6);
  REQUIRE((ld + ld_inv).cwiseAbs().maxCoeff() < 1e-8);

  // pack/unpack is a lossless round trip
  const Vector packed = flow_pack(params);
  auto params2 = make_flow(15, 6, 64, 2.0, rng);
  flow_unpack(packed, params2);
  REQUIRE((flow_pack(params2) - packed).cwiseAbs().maxCoeff() == 0.0);
  const auto [z2, ld2] = flow_forward_batch(w, params2);
  REQUIRE((z2 - z).cwiseAbs().maxCoeff() == 0.0);
}
