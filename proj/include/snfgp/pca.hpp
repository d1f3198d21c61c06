#pragma once

#include <cmath>
#include <string>

#include <Eigen/Dense>
#include <Eigen/SVD>

#include "snfgp/common.hpp"

namespace snfgp {

// Linear dimension reduction y -> basis^T (y - mean). Columns of basis are
// orthonormal, so reconstruction is the pseudo-inverse mean + basis * w.
struct PcaBasis {
  Vector mean;                // P
  Matrix basis;               // P x K, orthonormal columns
  Vector explained_variance;  // K, non-increasing
  double total_variance_fraction = 1.0;

  int output_dim() const { return static_cast<int>(basis.rows()); }
  int latent_dim() const { return static_cast<int>(basis.cols()); }
};

inline void validate_basis(const PcaBasis& b, double tol = 1e-8) {
  if (b.mean.size() != b.basis.rows())
    throw InputError("pca: mean length does not match basis rows");
  if (b.explained_variance.size() != b.basis.cols())
    throw InputError("pca: explained_variance length does not match basis columns");
  const Matrix gram = b.basis.transpose() * b.basis;
  const double err =
      (gram - Matrix::Identity(gram.rows(), gram.cols())).cwiseAbs().maxCoeff();
  if (err > tol)
    throw NumericalError("pca: basis columns not orthonormal (max deviation " +
                         format_double(err) + ")");
  for (Eigen::Index k = 1; k < b.explained_variance.size(); ++k)
    if (b.explained_variance[k] > b.explained_variance[k - 1] + 1e-12)
      throw InputError("pca: explained variances must be non-increasing");
}

// Thin SVD of the centered data; columns signed so the largest-magnitude
// entry of each is positive, which keeps serialized bases reproducible.
inline PcaBasis pca_fit(const Matrix& y, int k) {
  const Eigen::Index n = y.rows();
  const Eigen::Index p = y.cols();
  if (k < 1 || k > std::min<Eigen::Index>(n - 1, p))
    throw InputError("pca_fit: K = " + std::to_string(k) + " out of range for " +
                     std::to_string(n) + " x " + std::to_string(p) + " data");
  PcaBasis out;
  out.mean = y.colwise().mean();
  Matrix centered = y.rowwise() - out.mean.transpose();

  Eigen::BDCSVD<Matrix> svd(centered, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const Vector& sv = svd.singularValues();
  if (sv[k - 1] <= sv[0] * 1e-12)
    throw NumericalError("pca_fit: data rank below requested K = " + std::to_string(k));

  out.basis = svd.matrixV().leftCols(k);
  for (int j = 0; j < k; ++j) {
    Eigen::Index imax;
    out.basis.col(j).cwiseAbs().maxCoeff(&imax);
    if (out.basis(imax, j) < 0.0) out.basis.col(j) = -out.basis.col(j);
  }

  const double denom = static_cast<double>(n - 1);
  out.explained_variance = sv.head(k).array().square() / denom;
  const double total = centered.squaredNorm() / denom;
  out.total_variance_fraction = out.explained_variance.sum() / total;
  return out;
}

inline Vector pca_project(const Vector& y, const PcaBasis& b) {
  if (y.size() != b.basis.rows())
    throw InputError("pca_project: spectrum length " + std::to_string(y.size()) +
                     " does not match basis rows " + std::to_string(b.basis.rows()));
  return b.basis.transpose() * (y - b.mean);
}

// Rows of y are spectra; rows of the result are latent score vectors.
inline Matrix pca_project_batch(const Matrix& y, const PcaBasis& b) {
  if (y.cols() != b.basis.rows())
    throw InputError("pca_project: spectrum length " + std::to_string(y.cols()) +
                     " does not match basis rows " + std::to_string(b.basis.rows()));
  return (y.rowwise() - b.mean.transpose()) * b.basis;
}

inline Vector pca_reconstruct(const Vector& w, const PcaBasis& b) {
  if (w.size() != b.basis.cols())
    throw InputError("pca_reconstruct: score length " + std::to_string(w.size()) +
                     " does not match basis columns " + std::to_string(b.basis.cols()));
  return b.mean + b.basis * w;
}

// -1/2 sum_k log(w_kk), w_kk = diag of basis^T basis. Exactly zero for an
// orthonormal basis; the general form handles non-unit-norm columns.
inline double pca_log_det_correction(const PcaBasis& b) {
  const Vector diag = (b.basis.transpose() * b.basis).diagonal();
  double acc = 0.0;
  for (Eigen::Index j = 0; j < diag.size(); ++j) {
    if (diag[j] <= 0.0)
      throw NumericalError("pca_log_det_correction: degenerate basis column " +
                           std::to_string(j));
    acc += std::log(diag[j]);
  }
  return -0.5 * acc;
}

}  // namespace snfgp
