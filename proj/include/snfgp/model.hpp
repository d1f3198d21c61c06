#pragma once

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "snfgp/common.hpp"
#include "snfgp/data.hpp"
#include "snfgp/flow.hpp"
#include "snfgp/gp.hpp"
#include "snfgp/pca.hpp"

namespace snfgp {

struct ModelMeta {
  int k = 0, d = 0, p = 0, n_train = 0;
  int coupling_layers = 0, hidden_width = 0;
  double s_max = 0.0;
  std::uint64_t seed = 0;
  int epochs = 0;
};

// PCA basis + flow + K independent latent GPs + the retained training set.
// train_w holds the PCA scores of the training spectra; train_z must equal
// flow_forward(train_w) at the stored parameters, which load_model verifies.
struct SnfgpModel {
  PcaBasis pca;
  FlowParams flow;
  std::vector<GpHyperparams> gps;
  Matrix train_x;  // N x D
  Matrix train_w;  // N x K
  Matrix train_z;  // N x K
  ModelMeta meta;
};

inline void validate_model(const SnfgpModel& m) {
  const int k = m.meta.k, d = m.meta.d, p = m.meta.p, n = m.meta.n_train;
  if (m.pca.latent_dim() != k)
    throw SerializationError("model: pca.basis has " + std::to_string(m.pca.latent_dim()) +
                             " columns, header K is " + std::to_string(k));
  if (m.pca.output_dim() != p)
    throw SerializationError("model: pca.basis has " + std::to_string(m.pca.output_dim()) +
                             " rows, header P is " + std::to_string(p));
  if (m.flow.dim != k)
    throw SerializationError("model: flow.dim " + std::to_string(m.flow.dim) +
                             " does not match K = " + std::to_string(k));
  if (static_cast<int>(m.gps.size()) != k)
    throw SerializationError("model: gps holds " + std::to_string(m.gps.size()) +
                             " entries, expected K = " + std::to_string(k));
  for (const auto& h : m.gps)
    if (h.input_dim() != d)
      throw SerializationError("model: gp length_scales dimension != D");
  if (m.train_x.rows() != n || m.train_x.cols() != d)
    throw SerializationError("model: train_x shape mismatch");
  if (m.train_w.rows() != n || m.train_w.cols() != k)
    throw SerializationError("model: train_w shape mismatch");
  if (m.train_z.rows() != n || m.train_z.cols() != k)
    throw SerializationError("model: train_z shape mismatch");
  validate_basis(m.pca);
  validate_flow(m.flow);
  if (n > 0) {
    const auto [z, ld] = flow_forward_batch(m.train_w, m.flow);
    const double err = (z - m.train_z).cwiseAbs().maxCoeff();
    if (err > 1e-9)
      throw SerializationError("model: train_z is not flow_forward(train_w), max error " +
                               format_double(err));
  }
}

// --- joint conditional likelihood (GP sum + flow log-dets + PCA term) ------

struct LikelihoodTerms {
  double gp = 0.0;
  double flow_log_det = 0.0;
  double pca_correction = 0.0;
  double total() const { return gp + flow_log_det + pca_correction; }
};

inline LikelihoodTerms conditional_log_likelihood_terms(
    const Matrix& y, const Matrix& x, const PcaBasis& pca, const FlowParams& flow,
    const std::vector<GpHyperparams>& gps) {
  if (y.rows() < 1) throw InputError("conditional_log_likelihood: empty batch");
  if (x.rows() != y.rows())
    throw InputError("conditional_log_likelihood: X and Y row counts differ");
  if (static_cast<int>(gps.size()) != pca.latent_dim() || flow.dim != pca.latent_dim())
    throw InputError("conditional_log_likelihood: component dimensions disagree");
  const Matrix w = pca_project_batch(y, pca);
  const auto [z, log_dets] = flow_forward_batch(w, flow);
  LikelihoodTerms terms;
  for (int k = 0; k < flow.dim; ++k)
    terms.gp += GpPosterior(x, z.col(k), gps[k]).log_marginal();
  terms.flow_log_det = log_dets.sum();
  terms.pca_correction = static_cast<double>(y.rows()) * pca_log_det_correction(pca);
  return terms;
}

inline LikelihoodTerms conditional_log_likelihood_terms(const Matrix& y, const Matrix& x,
                                                        const SnfgpModel& m) {
  return conditional_log_likelihood_terms(y, x, m.pca, m.flow, m.gps);
}

inline double conditional_log_likelihood(const Matrix& y, const Matrix& x,
                                         const SnfgpModel& m) {
  return conditional_log_likelihood_terms(y, x, m).total();
}

// GP hyperparameters flattened per latent: [log s2, log l_1..D, log eps2].
inline Vector gp_pack(const std::vector<GpHyperparams>& gps) {
  const int d = gps.empty() ? 0 : gps[0].input_dim();
  Vector out(static_cast<Eigen::Index>(gps.size()) * (d + 2));
  Eigen::Index pos = 0;
  for (const auto& h : gps) {
    out[pos++] = h.log_signal_variance;
    out.segment(pos, d) = h.log_length_scales;
    pos += d;
    out[pos++] = h.log_noise_variance;
  }
  return out;
}

inline void gp_unpack(const Vector& packed, std::vector<GpHyperparams>& gps) {
  const int d = gps.empty() ? 0 : gps[0].input_dim();
  if (packed.size() != static_cast<Eigen::Index>(gps.size()) * (d + 2))
    throw InputError("gp_unpack: parameter vector size mismatch");
  Eigen::Index pos = 0;
  for (auto& h : gps) {
    h.log_signal_variance = packed[pos++];
    h.log_length_scales = packed.segment(pos, d);
    pos += d;
    h.log_noise_variance = packed[pos++];
  }
}

struct ObjectiveGradients {
  LikelihoodTerms terms;
  Vector flow_grad;  // flow_pack order
  Vector gp_grad;    // gp_pack order
};

// Value and analytic gradients of the batch conditional log-likelihood with
// respect to all flow parameters and GP log-hyperparameters.
inline ObjectiveGradients conditional_log_likelihood_with_gradients(
    const Matrix& y, const Matrix& x, const PcaBasis& pca, const FlowParams& flow,
    const std::vector<GpHyperparams>& gps) {
  if (y.rows() < 1) throw InputError("conditional_log_likelihood: empty batch");
  if (x.rows() != y.rows())
    throw InputError("conditional_log_likelihood: X and Y row counts differ");
  const int k_dim = flow.dim;
  const int d = static_cast<int>(x.cols());
  const Matrix w = pca_project_batch(y, pca);
  FlowTrace trace;
  const auto [z, log_dets] = flow_forward_batch(w, flow, &trace);

  ObjectiveGradients out;
  Matrix grad_z(y.rows(), k_dim);
  out.gp_grad.resize(static_cast<Eigen::Index>(k_dim) * (d + 2));
  for (int k = 0; k < k_dim; ++k) {
    GpPosterior post(x, z.col(k), gps[k]);
    out.terms.gp += post.log_marginal();
    const auto g = post.gradients();
    grad_z.col(k) = g.grad_z;
    Eigen::Index pos = static_cast<Eigen::Index>(k) * (d + 2);
    out.gp_grad[pos] = g.d_log_signal_variance;
    out.gp_grad.segment(pos + 1, d) = g.d_log_length_scales;
    out.gp_grad[pos + 1 + d] = g.d_log_noise_variance;
  }
  const auto back =
      flow_backward_batch(flow, trace, grad_z, Vector::Ones(y.rows()));
  out.flow_grad = flow_pack(back.grads);
  out.terms.flow_log_det = log_dets.sum();
  out.terms.pca_correction = static_cast<double>(y.rows()) * pca_log_det_correction(pca);
  return out;
}

// --- training ---------------------------------------------------------------

struct TrainConfig {
  int k = 15;
  int batch_size = 512;
  double learning_rate = 5e-4;
  int epochs = 200;
  std::uint64_t seed = 0;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_epsilon = 1e-8;
  bool freeze_gp_noise = false;  // pin log noise variances at their init
  bool freeze_gp = false;        // pin all GP hyperparameters
  int coupling_layers = 6;
  int hidden_width = 64;
  double s_max = 2.0;
};

struct TraceRow {
  int epoch = 0;
  double train_objective = 0.0;
  double val_objective = 0.0;  // NaN when the validation split is empty
  std::int64_t wall_ms = 0;
};

struct TrainingTrace {
  std::vector<TraceRow> rows;
};

inline void write_trace_csv(const TrainingTrace& trace, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw InputError("write_trace_csv: cannot open '" + path + "'");
  out << "epoch,train_objective,val_objective,wall_ms\n";
  for (const auto& r : trace.rows)
    out << r.epoch << "," << format_double(r.train_objective) << ","
        << format_double(r.val_objective) << "," << r.wall_ms << "\n";
}

class AdamOptimizer {
 public:
  AdamOptimizer(Eigen::Index n, double lr, double beta1, double beta2, double eps)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps),
        m_(Vector::Zero(n)), v_(Vector::Zero(n)) {}

  // one descent step on the given gradient
  void step(Vector& params, const Vector& grad) {
    ++t_;
    m_ = beta1_ * m_ + (1.0 - beta1_) * grad;
    v_ = beta2_ * v_ + (1.0 - beta2_) * grad.array().square().matrix();
    const double bc1 = 1.0 - std::pow(beta1_, t_);
    const double bc2 = 1.0 - std::pow(beta2_, t_);
    params.array() -=
        lr_ * (m_.array() / bc1) / ((v_.array() / bc2).sqrt() + eps_);
  }

 private:
  double lr_, beta1_, beta2_, eps_;
  Vector m_, v_;
  long t_ = 0;
};

namespace detail {

inline std::vector<GpHyperparams> init_gp_hyperparams(const Matrix& w_train,
                                                      const Matrix& x_train) {
  const int k_dim = static_cast<int>(w_train.cols());
  const int d = static_cast<int>(x_train.cols());
  std::vector<GpHyperparams> gps;
  gps.reserve(k_dim);
  Vector half_range(d);
  for (int j = 0; j < d; ++j) {
    const double r = x_train.col(j).maxCoeff() - x_train.col(j).minCoeff();
    half_range[j] = r > 0.0 ? 0.5 * r : 0.5;
  }
  const double n = static_cast<double>(w_train.rows());
  for (int k = 0; k < k_dim; ++k) {
    const double mean = w_train.col(k).mean();
    const double var =
        (w_train.col(k).array() - mean).square().sum() / std::max(1.0, n - 1.0);
    const double s2 = std::max(var, 1e-12);
    gps.push_back(GpHyperparams::make(s2, half_range, 0.1 * s2));
  }
  return gps;
}

}  // namespace detail

// Mini-batch ascent on the conditional log-likelihood. PCA is fit on the
// training split first and frozen. Each batch's GP terms use that batch's
// own covariance. Rows already appended to `trace` survive a TrainingError,
// so a partial trace can still be written after divergence.
inline SnfgpModel train(const Dataset& ds, const TrainConfig& cfg, TrainingTrace& trace) {
  if (cfg.batch_size < 2) throw InputError("train: batch_size must be >= 2");
  if (!(cfg.learning_rate > 0.0)) throw InputError("train: learning_rate must be > 0");
  if (cfg.epochs < 0) throw InputError("train: epochs must be >= 0");

  const auto train_rows = ds.rows_in(Split::kTrain);
  if (train_rows.empty()) throw InputError("train: training split is empty");
  const auto val_rows = ds.rows_in(Split::kVal);

  const int n = static_cast<int>(train_rows.size());
  const int d = ds.input_dim();
  const int p = ds.channels();
  Matrix y_train(n, p), x_train(n, d);
  for (int i = 0; i < n; ++i) {
    y_train.row(i) = ds.y.row(train_rows[i]);
    x_train.row(i) = ds.x.row(train_rows[i]);
  }
  Matrix y_val(val_rows.size(), p), x_val(val_rows.size(), d);
  for (std::size_t i = 0; i < val_rows.size(); ++i) {
    y_val.row(i) = ds.y.row(val_rows[i]);
    x_val.row(i) = ds.x.row(val_rows[i]);
  }

  SnfgpModel model;
  model.pca = pca_fit(y_train, cfg.k);
  const Matrix w_train = pca_project_batch(y_train, model.pca);

  std::mt19937_64 rng(cfg.seed);
  model.flow = make_flow(cfg.k, cfg.coupling_layers, cfg.hidden_width, cfg.s_max, rng);
  model.gps = detail::init_gp_hyperparams(w_train, x_train);

  const Eigen::Index n_flow = flow_param_count(model.flow);
  const Eigen::Index n_gp = static_cast<Eigen::Index>(cfg.k) * (d + 2);
  Vector params(n_flow + n_gp);
  params.head(n_flow) = flow_pack(model.flow);
  params.tail(n_gp) = gp_pack(model.gps);
  AdamOptimizer adam(params.size(), cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2,
                     cfg.adam_epsilon);

  const int batch = std::min(cfg.batch_size, n);
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_sum = 0.0;
    int n_batches = 0;
    for (int start = 0; start < n; start += batch) {
      const int b = std::min(batch, n - start);
      if (b < 2) continue;  // a trailing singleton carries no GP information
      Matrix y_b(b, p), x_b(b, d);
      for (int i = 0; i < b; ++i) {
        y_b.row(i) = y_train.row(order[start + i]);
        x_b.row(i) = x_train.row(order[start + i]);
      }
      const auto res =
          conditional_log_likelihood_with_gradients(y_b, x_b, model.pca, model.flow, model.gps);
      const double obj = res.terms.total();
      if (!std::isfinite(obj))
        throw TrainingError("train: non-finite objective at epoch " +
                                std::to_string(epoch) + ", batch " +
                                std::to_string(n_batches),
                            epoch, n_batches);
      Vector grad(params.size());
      grad.head(n_flow) = -res.flow_grad;
      grad.tail(n_gp) = -res.gp_grad;
      if (cfg.freeze_gp) {
        grad.tail(n_gp).setZero();
      } else if (cfg.freeze_gp_noise) {
        for (int k = 0; k < cfg.k; ++k)
          grad[n_flow + static_cast<Eigen::Index>(k) * (d + 2) + d + 1] = 0.0;
      }
      adam.step(params, grad);
      flow_unpack(params.head(n_flow), model.flow);
      gp_unpack(params.tail(n_gp), model.gps);
      epoch_sum += obj;
      ++n_batches;
    }
    double val_obj = std::numeric_limits<double>::quiet_NaN();
    if (y_val.rows() > 0)
      val_obj =
          conditional_log_likelihood_terms(y_val, x_val, model.pca, model.flow, model.gps)
              .total();
    const auto t1 = std::chrono::steady_clock::now();
    trace.rows.push_back(
        {epoch, epoch_sum / std::max(1, n_batches), val_obj,
         std::chrono::duration_cast<std::chrono::milliseconds>(t1 - t0).count()});
  }

  model.train_x = std::move(x_train);
  model.train_w = w_train;
  model.train_z = flow_forward_batch(w_train, model.flow).first;
  model.meta = {cfg.k,  d,
                p,      n,
                cfg.coupling_layers, cfg.hidden_width,
                cfg.s_max, cfg.seed,
                cfg.epochs};
  return model;
}

// --- conditional sampling ---------------------------------------------------

// K factorized posteriors over the full retained training set.
class LatentPredictor {
 public:
  explicit LatentPredictor(const SnfgpModel& m)
      : LatentPredictor(m.train_x, m.train_z, m.gps) {}

  LatentPredictor(const Matrix& train_x, const Matrix& train_z,
                  const std::vector<GpHyperparams>& gps) {
    if (train_z.cols() != static_cast<Eigen::Index>(gps.size()))
      throw InputError("LatentPredictor: latent count does not match GP count");
    posts_.reserve(gps.size());
    for (std::size_t k = 0; k < gps.size(); ++k)
      posts_.emplace_back(train_x, train_z.col(k), gps[k]);
  }
  int latent_dim() const { return static_cast<int>(posts_.size()); }
  const GpPosterior& posterior(int k) const { return posts_[k]; }

 private:
  std::vector<GpPosterior> posts_;
};

inline Matrix sample_conditional(const Vector& x_star, const SnfgpModel& m,
                                 const LatentPredictor& predictor, int n_samples,
                                 std::uint64_t seed) {
  if (n_samples < 1) throw InputError("sample_conditional: n_samples must be >= 1");
  const int k_dim = predictor.latent_dim();
  Vector mean(k_dim), sd(k_dim);
  for (int k = 0; k < k_dim; ++k) {
    const auto pred = predictor.posterior(k).predict(x_star, true);
    mean[k] = pred.mean;
    sd[k] = std::sqrt(pred.variance);
  }
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix z(n_samples, k_dim);
  for (int i = 0; i < n_samples; ++i)
    for (int k = 0; k < k_dim; ++k) z(i, k) = mean[k] + sd[k] * normal(rng);
  const Matrix w = flow_inverse_batch(z, m.flow).first;
  return (w * m.pca.basis.transpose()).rowwise() + m.pca.mean.transpose();
}

inline Matrix sample_conditional(const Vector& x_star, const SnfgpModel& m, int n_samples,
                                 std::uint64_t seed) {
  return sample_conditional(x_star, m, LatentPredictor(m), n_samples, seed);
}

// --- serialization: "snfgp-v1" archive --------------------------------------
//
// Layout: 8-byte magic "SNFGPARC", u64 little-endian header length, JSON
// header, then raw little-endian f64 arrays (row-major) at the offsets the
// header's array directory records.

namespace detail {

static_assert(std::endian::native == std::endian::little,
              "snfgp-v1 archives are little-endian");

constexpr char kArchiveMagic[8] = {'S', 'N', 'F', 'G', 'P', 'A', 'R', 'C'};

struct ArrayDirectory {
  nlohmann::ordered_json entries = nlohmann::ordered_json::array();
  std::vector<Matrix> storage;
  std::uint64_t offset = 0;

  void add(const std::string& name, const Matrix& m) {
    entries.push_back({{"name", name},
                       {"rows", m.rows()},
                       {"cols", m.cols()},
                       {"offset", offset}});
    storage.push_back(m);
    offset += static_cast<std::uint64_t>(m.size()) * sizeof(double);
  }
  void add(const std::string& name, const Vector& v) { add(name, Matrix(v)); }
};

inline void write_matrix_row_major(std::ofstream& out, const Matrix& m) {
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      const double v = m(i, j);
      out.write(reinterpret_cast<const char*>(&v), sizeof(double));
    }
}

}  // namespace detail

inline void save_model(const SnfgpModel& m, const std::string& path) {
  validate_model(m);
  detail::ArrayDirectory dir;
  dir.add("pca.mean", m.pca.mean);
  dir.add("pca.basis", m.pca.basis);
  dir.add("pca.explained_variance", m.pca.explained_variance);
  Matrix gp_params(m.meta.k, m.meta.d + 2);
  for (int k = 0; k < m.meta.k; ++k) {
    gp_params(k, 0) = m.gps[k].log_signal_variance;
    gp_params.row(k).segment(1, m.meta.d) = m.gps[k].log_length_scales.transpose();
    gp_params(k, m.meta.d + 1) = m.gps[k].log_noise_variance;
  }
  dir.add("gp.log_params", gp_params);
  for (std::size_t l = 0; l < m.flow.layers.size(); ++l) {
    const auto& layer = m.flow.layers[l];
    const std::string prefix = "flow.layer" + std::to_string(l) + ".";
    dir.add(prefix + "mask", layer.mask);
    const char* net_names[2] = {"scale.", "translate."};
    const DenseNet* nets[2] = {&layer.scale_net, &layer.translate_net};
    for (int nn = 0; nn < 2; ++nn) {
      dir.add(prefix + net_names[nn] + "w1", nets[nn]->w1);
      dir.add(prefix + net_names[nn] + "b1", nets[nn]->b1);
      dir.add(prefix + net_names[nn] + "w2", nets[nn]->w2);
      dir.add(prefix + net_names[nn] + "b2", nets[nn]->b2);
      dir.add(prefix + net_names[nn] + "w3", nets[nn]->w3);
      dir.add(prefix + net_names[nn] + "b3", nets[nn]->b3);
    }
  }
  dir.add("train.x", m.train_x);
  dir.add("train.w", m.train_w);
  dir.add("train.z", m.train_z);

  nlohmann::ordered_json header;
  header["format"] = "snfgp-v1";
  header["k"] = m.meta.k;
  header["d"] = m.meta.d;
  header["p"] = m.meta.p;
  header["n_train"] = m.meta.n_train;
  header["flow"] = {{"layers", m.meta.coupling_layers},
                    {"hidden", m.meta.hidden_width},
                    {"s_max", m.meta.s_max}};
  header["pca"] = {{"total_variance_fraction", m.pca.total_variance_fraction}};
  header["training"] = {{"seed", m.meta.seed}, {"epochs", m.meta.epochs}};
  header["arrays"] = dir.entries;
  const std::string header_str = header.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("save_model: cannot open '" + path + "' for writing");
  out.write(detail::kArchiveMagic, sizeof(detail::kArchiveMagic));
  const std::uint64_t header_len = header_str.size();
  out.write(reinterpret_cast<const char*>(&header_len), sizeof(header_len));
  out.write(header_str.data(), static_cast<std::streamsize>(header_str.size()));
  for (const auto& stored : dir.storage) detail::write_matrix_row_major(out, stored);
  if (!out) throw InputError("save_model: failed while writing '" + path + "'");
}

inline SnfgpModel load_model(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("load_model: cannot open '" + path + "'");
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, detail::kArchiveMagic, sizeof(magic)) != 0)
    throw SerializationError("load_model: '" + path + "' is not an snfgp archive");
  std::uint64_t header_len = 0;
  in.read(reinterpret_cast<char*>(&header_len), sizeof(header_len));
  if (!in || header_len == 0 || header_len > (1u << 24))
    throw SerializationError("load_model: corrupt header length");
  std::string header_str(header_len, '\0');
  in.read(header_str.data(), static_cast<std::streamsize>(header_len));
  if (!in) throw SerializationError("load_model: truncated file (header)");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(header_str);
  } catch (const nlohmann::json::exception& e) {
    throw SerializationError("load_model: corrupt header JSON: " + std::string(e.what()));
  }
  if (!header.contains("format") || header["format"] != "snfgp-v1")
    throw SerializationError("load_model: format version mismatch (expected snfgp-v1)");

  SnfgpModel m;
  try {
    m.meta.k = header.at("k").get<int>();
    m.meta.d = header.at("d").get<int>();
    m.meta.p = header.at("p").get<int>();
    m.meta.n_train = header.at("n_train").get<int>();
    m.meta.coupling_layers = header.at("flow").at("layers").get<int>();
    m.meta.hidden_width = header.at("flow").at("hidden").get<int>();
    m.meta.s_max = header.at("flow").at("s_max").get<double>();
    m.pca.total_variance_fraction =
        header.at("pca").at("total_variance_fraction").get<double>();
    m.meta.seed = header.at("training").at("seed").get<std::uint64_t>();
    m.meta.epochs = header.at("training").at("epochs").get<int>();
  } catch (const nlohmann::json::exception& e) {
    throw SerializationError("load_model: missing header field: " + std::string(e.what()));
  }

  // read the blob, then hand arrays out by name with shape checks
  const std::uint64_t blob_start = sizeof(detail::kArchiveMagic) + sizeof(header_len) +
                                   header_len;
  in.seekg(0, std::ios::end);
  const std::uint64_t file_size = static_cast<std::uint64_t>(in.tellg());
  in.seekg(static_cast<std::streamoff>(blob_start));

  struct Entry {
    Eigen::Index rows, cols;
    std::uint64_t offset;
  };
  std::map<std::string, Entry> directory;
  std::uint64_t blob_len = 0;
  for (const auto& e : header.at("arrays")) {
    const Entry entry{e.at("rows").get<Eigen::Index>(), e.at("cols").get<Eigen::Index>(),
                      e.at("offset").get<std::uint64_t>()};
    directory[e.at("name").get<std::string>()] = entry;
    blob_len = std::max(blob_len, entry.offset + static_cast<std::uint64_t>(entry.rows) *
                                                     entry.cols * sizeof(double));
  }
  if (file_size < blob_start + blob_len)
    throw SerializationError("load_model: truncated file (blob is " +
                             std::to_string(file_size - blob_start) + " bytes, need " +
                             std::to_string(blob_len) + ")");

  std::vector<double> blob(blob_len / sizeof(double));
  in.read(reinterpret_cast<char*>(blob.data()), static_cast<std::streamsize>(blob_len));
  if (!in) throw SerializationError("load_model: truncated file (blob)");

  auto fetch = [&](const std::string& name, Eigen::Index rows, Eigen::Index cols) {
    const auto it = directory.find(name);
    if (it == directory.end())
      throw SerializationError("load_model: missing array '" + name + "'");
    if (it->second.rows != rows || it->second.cols != cols)
      throw SerializationError("load_model: array '" + name + "' has shape " +
                               std::to_string(it->second.rows) + "x" +
                               std::to_string(it->second.cols) + ", expected " +
                               std::to_string(rows) + "x" + std::to_string(cols));
    Matrix out(rows, cols);
    const double* src = blob.data() + it->second.offset / sizeof(double);
    for (Eigen::Index i = 0; i < rows; ++i)
      for (Eigen::Index j = 0; j < cols; ++j) out(i, j) = *src++;
    return out;
  };

  const int k = m.meta.k, d = m.meta.d, p = m.meta.p, n = m.meta.n_train;
  m.pca.mean = fetch("pca.mean", p, 1).col(0);
  m.pca.basis = fetch("pca.basis", p, k);
  m.pca.explained_variance = fetch("pca.explained_variance", k, 1).col(0);
  const Matrix gp_params = fetch("gp.log_params", k, d + 2);
  m.gps.resize(k);
  for (int kk = 0; kk < k; ++kk) {
    m.gps[kk].log_signal_variance = gp_params(kk, 0);
    m.gps[kk].log_length_scales = gp_params.row(kk).segment(1, d).transpose();
    m.gps[kk].log_noise_variance = gp_params(kk, d + 1);
  }
  m.flow.dim = k;
  m.flow.layers.resize(m.meta.coupling_layers);
  const int h = m.meta.hidden_width;
  for (int l = 0; l < m.meta.coupling_layers; ++l) {
    auto& layer = m.flow.layers[l];
    const std::string prefix = "flow.layer" + std::to_string(l) + ".";
    layer.mask = fetch(prefix + "mask", k, 1).col(0);
    layer.s_max = m.meta.s_max;
    const char* net_names[2] = {"scale.", "translate."};
    DenseNet* nets[2] = {&layer.scale_net, &layer.translate_net};
    for (int nn = 0; nn < 2; ++nn) {
      nets[nn]->w1 = fetch(prefix + net_names[nn] + "w1", h, k);
      nets[nn]->b1 = fetch(prefix + net_names[nn] + "b1", h, 1).col(0);
      nets[nn]->w2 = fetch(prefix + net_names[nn] + "w2", h, h);
      nets[nn]->b2 = fetch(prefix + net_names[nn] + "b2", h, 1).col(0);
      nets[nn]->w3 = fetch(prefix + net_names[nn] + "w3", k, h);
      nets[nn]->b3 = fetch(prefix + net_names[nn] + "b3", k, 1).col(0);
    }
  }
  m.train_x = fetch("train.x", n, d);
  m.train_w = fetch("train.w", n, k);
  m.train_z = fetch("train.z", n, k);

  validate_model(m);
  return m;
}

}  // namespace snfgp
