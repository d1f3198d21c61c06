#pragma once

#include <cmath>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "snfgp/common.hpp"

namespace snfgp {

// Small dense net, input -> H -> H -> output, tanh hidden activations,
// linear output layer.
struct DenseNet {
  Matrix w1, w2, w3;  // H x K, H x H, K x H
  Vector b1, b2, b3;  // H, H, K

  Eigen::Index num_params() const {
    return w1.size() + w2.size() + w3.size() + b1.size() + b2.size() + b3.size();
  }
  void set_zero() {
    w1.setZero();
    w2.setZero();
    w3.setZero();
    b1.setZero();
    b2.setZero();
    b3.setZero();
  }
};

// One RealNVP-style affine coupling layer. Coordinates with mask = 1 pass
// through untouched and drive the nets; coordinates with mask = 0 are scaled
// and shifted. The log-scale is tanh-bounded by s_max, which keeps the layer
// invertible with a bounded log-determinant.
struct CouplingLayer {
  Vector mask;  // entries 0.0 or 1.0
  DenseNet scale_net;
  DenseNet translate_net;
  double s_max = 2.0;
};

struct FlowParams {
  int dim = 0;
  std::vector<CouplingLayer> layers;
};

namespace detail {

struct NetTrace {
  Matrix h0, h1, h2;  // batch-major activations (B x K, B x H, B x H)
};

inline Matrix net_forward(const DenseNet& net, const Matrix& in, NetTrace* trace) {
  Matrix h1 = ((in * net.w1.transpose()).rowwise() + net.b1.transpose()).array().tanh();
  Matrix h2 = ((h1 * net.w2.transpose()).rowwise() + net.b2.transpose()).array().tanh();
  Matrix out = (h2 * net.w3.transpose()).rowwise() + net.b3.transpose();
  if (trace) {
    trace->h0 = in;
    trace->h1 = std::move(h1);
    trace->h2 = std::move(h2);
  }
  return out;
}

// Accumulates parameter gradients into grad, returns the input gradient.
inline Matrix net_backward(const DenseNet& net, const NetTrace& trace,
                           const Matrix& grad_out, DenseNet& grad) {
  grad.w3 += grad_out.transpose() * trace.h2;
  grad.b3 += grad_out.colwise().sum().transpose();
  Matrix da2 =
      (grad_out * net.w3).array() * (1.0 - trace.h2.array().square());
  grad.w2 += da2.transpose() * trace.h1;
  grad.b2 += da2.colwise().sum().transpose();
  Matrix da1 = (da2 * net.w2).array() * (1.0 - trace.h1.array().square());
  grad.w1 += da1.transpose() * trace.h0;
  grad.b1 += da1.colwise().sum().transpose();
  return da1 * net.w1;
}

struct LayerTrace {
  Matrix w_in;       // layer input, B x K
  NetTrace scale;
  NetTrace translate;
  Matrix tanh_raw;   // tanh of the raw scale-net output
  Matrix s;          // bounded log-scale, s_max * tanh_raw
  Matrix exp_s;
  Vector log_det;    // per-sample contribution of this layer
};

}  // namespace detail

struct FlowTrace {
  std::vector<detail::LayerTrace> layers;
};

inline void validate_flow(const FlowParams& params) {
  if (params.dim < 2)
    throw InputError("flow: dimension must be at least 2 for coupling masks");
  if (params.layers.empty()) throw InputError("flow: no coupling layers");
  const int k = params.dim;
  const Vector* prev_mask = nullptr;
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    const auto& layer = params.layers[l];
    if (layer.mask.size() != k)
      throw InputError("flow: layer " + std::to_string(l) + " mask size mismatch");
    const double ones = layer.mask.sum();
    for (Eigen::Index i = 0; i < k; ++i)
      if (layer.mask[i] != 0.0 && layer.mask[i] != 1.0)
        throw InputError("flow: mask entries must be 0 or 1");
    if (ones == 0.0 || ones == static_cast<double>(k))
      throw InputError("flow: mask must be neither all-zeros nor all-ones");
    if (prev_mask && ((layer.mask + *prev_mask).array() != 1.0).any())
      throw InputError("flow: consecutive layers must use complementary masks");
    prev_mask = &layer.mask;
    if (!(layer.s_max > 0.0)) throw InputError("flow: s_max must be positive");
    for (const DenseNet* net : {&layer.scale_net, &layer.translate_net}) {
      const Eigen::Index h = net->w1.rows();
      if (net->w1.cols() != k || net->w2.rows() != h || net->w2.cols() != h ||
          net->w3.rows() != k || net->w3.cols() != h || net->b1.size() != h ||
          net->b2.size() != h || net->b3.size() != k)
        throw InputError("flow: inconsistent net shapes in layer " + std::to_string(l));
    }
  }
}

// Alternating even/odd masks, random tanh hidden layers, zero-initialized
// output layers so the flow starts as the identity map.
inline FlowParams make_flow(int dim, int n_layers, int hidden, double s_max,
                            std::mt19937_64& rng) {
  if (dim < 2) throw InputError("make_flow: dim must be >= 2");
  if (n_layers < 1 || hidden < 1)
    throw InputError("make_flow: need at least one layer and one hidden unit");
  FlowParams params;
  params.dim = dim;
  params.layers.resize(n_layers);
  std::normal_distribution<double> normal(0.0, 1.0);
  auto init_net = [&](DenseNet& net) {
    net.w1.resize(hidden, dim);
    net.w2.resize(hidden, hidden);
    net.w3.resize(dim, hidden);
    net.b1 = Vector::Zero(hidden);
    net.b2 = Vector::Zero(hidden);
    net.b3 = Vector::Zero(dim);
    const double sd1 = 1.0 / std::sqrt(static_cast<double>(dim));
    const double sd2 = 1.0 / std::sqrt(static_cast<double>(hidden));
    for (Eigen::Index i = 0; i < net.w1.rows(); ++i)
      for (Eigen::Index j = 0; j < net.w1.cols(); ++j) net.w1(i, j) = sd1 * normal(rng);
    for (Eigen::Index i = 0; i < net.w2.rows(); ++i)
      for (Eigen::Index j = 0; j < net.w2.cols(); ++j) net.w2(i, j) = sd2 * normal(rng);
    net.w3.setZero();
  };
  for (int l = 0; l < n_layers; ++l) {
    auto& layer = params.layers[l];
    layer.s_max = s_max;
    layer.mask.resize(dim);
    for (int i = 0; i < dim; ++i) layer.mask[i] = ((i + l) % 2 == 0) ? 1.0 : 0.0;
    init_net(layer.scale_net);
    init_net(layer.translate_net);
  }
  validate_flow(params);
  return params;
}

// z = f(w). Rows of w are samples. Returns (z, per-sample log|df/dw|).
inline std::pair<Matrix, Vector> flow_forward_batch(const Matrix& w,
                                                    const FlowParams& params,
                                                    FlowTrace* trace = nullptr) {
  if (w.cols() != params.dim)
    throw InputError("flow_forward: input has " + std::to_string(w.cols()) +
                     " columns, flow dimension is " + std::to_string(params.dim));
  if (!w.allFinite()) throw NumericalError("flow_forward: non-finite input");
  Matrix cur = w;
  Vector log_det = Vector::Zero(w.rows());
  if (trace) trace->layers.resize(params.layers.size());
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    const auto& layer = params.layers[l];
    const auto active = (1.0 - layer.mask.array()).matrix();
    const Matrix masked = cur.array().rowwise() * layer.mask.transpose().array();
    detail::LayerTrace* lt = trace ? &trace->layers[l] : nullptr;
    Matrix raw_s = detail::net_forward(layer.scale_net, masked, lt ? &lt->scale : nullptr);
    Matrix t = detail::net_forward(layer.translate_net, masked, lt ? &lt->translate : nullptr);
    Matrix tanh_raw = raw_s.array().tanh();
    Matrix s = (layer.s_max * tanh_raw.array()).matrix();
    Matrix exp_s = s.array().exp();
    Vector layer_ld = (s.array().rowwise() * active.transpose().array()).rowwise().sum();
    Matrix next = (cur.array() * exp_s.array() + t.array()).matrix();
    next = masked + (next.array().rowwise() * active.transpose().array()).matrix();
    if (lt) {
      lt->w_in = std::move(cur);
      lt->tanh_raw = std::move(tanh_raw);
      lt->s = std::move(s);
      lt->exp_s = std::move(exp_s);
      lt->log_det = layer_ld;
    }
    log_det += layer_ld;
    cur = std::move(next);
  }
  if (!cur.allFinite() || !log_det.allFinite())
    throw NumericalError("flow_forward: non-finite output (check parameters)");
  return {std::move(cur), std::move(log_det)};
}

inline std::pair<Vector, double> flow_forward(const Vector& w, const FlowParams& params) {
  auto [z, ld] = flow_forward_batch(w.transpose(), params);
  return {z.row(0).transpose(), ld[0]};
}

// w = f^{-1}(z). The returned log-determinant is that of the inverse map,
// i.e. the negative of the forward log-determinant at w.
inline std::pair<Matrix, Vector> flow_inverse_batch(const Matrix& z,
                                                    const FlowParams& params) {
  if (z.cols() != params.dim)
    throw InputError("flow_inverse: input has " + std::to_string(z.cols()) +
                     " columns, flow dimension is " + std::to_string(params.dim));
  if (!z.allFinite()) throw NumericalError("flow_inverse: non-finite input");
  Matrix cur = z;
  Vector log_det = Vector::Zero(z.rows());
  for (auto it = params.layers.rbegin(); it != params.layers.rend(); ++it) {
    const auto& layer = *it;
    const auto active = (1.0 - layer.mask.array()).matrix();
    const Matrix masked = cur.array().rowwise() * layer.mask.transpose().array();
    Matrix raw_s = detail::net_forward(layer.scale_net, masked, nullptr);
    Matrix t = detail::net_forward(layer.translate_net, masked, nullptr);
    Matrix s = (layer.s_max * raw_s.array().tanh()).matrix();
    Vector layer_ld = (s.array().rowwise() * active.transpose().array()).rowwise().sum();
    Matrix prev = ((cur.array() - t.array()) * (-s).array().exp()).matrix();
    cur = masked + (prev.array().rowwise() * active.transpose().array()).matrix();
    log_det -= layer_ld;
  }
  if (!cur.allFinite())
    throw NumericalError("flow_inverse: non-finite output (check parameters)");
  return {std::move(cur), std::move(log_det)};
}

inline std::pair<Vector, double> flow_inverse(const Vector& z, const FlowParams& params) {
  auto [w, ld] = flow_inverse_batch(z.transpose(), params);
  return {w.row(0).transpose(), ld[0]};
}

inline FlowParams zero_like(const FlowParams& params) {
  FlowParams g = params;
  for (auto& layer : g.layers) {
    layer.scale_net.set_zero();
    layer.translate_net.set_zero();
  }
  return g;
}

struct FlowBackwardResult {
  Matrix grad_w;     // gradient with respect to the flow input, B x K
  FlowParams grads;  // parameter gradients in FlowParams shape
};

// Reverse-mode gradients of sum_i <grad_z_i, z_i> + grad_log_det_i * log_det_i
// with respect to the inputs and every net parameter. Requires the trace
// cached by flow_forward_batch.
inline FlowBackwardResult flow_backward_batch(const FlowParams& params,
                                              const FlowTrace& trace,
                                              const Matrix& grad_z,
                                              const Vector& grad_log_det) {
  if (trace.layers.size() != params.layers.size())
    throw InputError("flow_backward: trace does not match the flow");
  FlowBackwardResult res;
  res.grads = zero_like(params);
  Matrix d_cur = grad_z;
  for (std::size_t li = params.layers.size(); li-- > 0;) {
    const auto& layer = params.layers[li];
    const auto& lt = trace.layers[li];
    auto& g = res.grads.layers[li];
    const auto mask = layer.mask.transpose().array();
    const auto active = 1.0 - mask;

    // z = m.w + (1-m).(w exp(s) + t), log_det = sum_active s
    Matrix ds = (((d_cur.array() * lt.w_in.array() * lt.exp_s.array()).colwise() +
                  grad_log_det.array())
                     .rowwise() *
                 active)
                    .matrix();
    Matrix dt = (d_cur.array().rowwise() * active).matrix();
    Matrix d_w_direct = (d_cur.array().rowwise() * mask).matrix() +
                        ((d_cur.array() * lt.exp_s.array()).rowwise() * active).matrix();

    // through the tanh bound: s = s_max * tanh(raw)
    Matrix d_raw_s =
        (ds.array() * layer.s_max * (1.0 - lt.tanh_raw.array().square())).matrix();

    Matrix d_masked = detail::net_backward(layer.scale_net, lt.scale, d_raw_s, g.scale_net);
    d_masked += detail::net_backward(layer.translate_net, lt.translate, dt, g.translate_net);
    d_cur = d_w_direct + (d_masked.array().rowwise() * mask).matrix();
  }
  res.grad_w = std::move(d_cur);
  return res;
}

inline FlowBackwardResult flow_backward(const Vector& w, const FlowParams& params,
                                        const Vector& grad_z, double grad_log_det) {
  FlowTrace trace;
  flow_forward_batch(w.transpose(), params, &trace);
  Vector gld(1);
  gld << grad_log_det;
  return flow_backward_batch(params, trace, grad_z.transpose(), gld);
}

inline Eigen::Index flow_param_count(const FlowParams& params) {
  Eigen::Index n = 0;
  for (const auto& layer : params.layers)
    n += layer.scale_net.num_params() + layer.translate_net.num_params();
  return n;
}

namespace detail {
template <typename Params, typename Fn>
void for_each_net_array(Params& params, Fn&& fn) {
  for (auto& layer : params.layers) {
    for (auto* net : {&layer.scale_net, &layer.translate_net}) {
      fn(net->w1);
      fn(net->b1);
      fn(net->w2);
      fn(net->b2);
      fn(net->w3);
      fn(net->b3);
    }
  }
}
}  // namespace detail

inline Vector flow_pack(const FlowParams& params) {
  Vector out(flow_param_count(params));
  Eigen::Index pos = 0;
  detail::for_each_net_array(params, [&](const auto& arr) {
    out.segment(pos, arr.size()) = Eigen::Map<const Vector>(arr.data(), arr.size());
    pos += arr.size();
  });
  return out;
}

inline void flow_unpack(const Vector& packed, FlowParams& params) {
  if (packed.size() != flow_param_count(params))
    throw InputError("flow_unpack: parameter vector size mismatch");
  Eigen::Index pos = 0;
  detail::for_each_net_array(params, [&](auto& arr) {
    Eigen::Map<Vector>(arr.data(), arr.size()) = packed.segment(pos, arr.size());
    pos += arr.size();
  });
}

}  // namespace snfgp
