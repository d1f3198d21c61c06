#pragma once

#include <cmath>
#include <fstream>
#include <functional>
#include <limits>
#include <numbers>
#include <string>
#include <vector>

#include "snfgp/common.hpp"
#include "snfgp/model.hpp"

namespace snfgp {

namespace detail {

// Acklam's rational approximation to the standard normal quantile, polished
// with one Halley step through erfc.
inline double normal_quantile(double p) {
  if (!(p > 0.0 && p < 1.0))
    throw InputError("normal_quantile: p must lie in (0, 1)");
  static constexpr double a[] = {-3.969683028665376e+01, 2.209460984245205e+02,
                                 -2.759285104469687e+02, 1.383577518672690e+02,
                                 -3.066479806614716e+01, 2.506628277459239e+00};
  static constexpr double b[] = {-5.447609879822406e+01, 1.615858368580409e+02,
                                 -1.556989798598866e+02, 6.680131188771972e+01,
                                 -1.328068155288572e+01};
  static constexpr double c[] = {-7.784894002430293e-03, -3.223964580411365e-01,
                                 -2.400758277161838e+00, -2.549732539343734e+00,
                                 4.374664141464968e+00,  2.938163982698783e+00};
  static constexpr double d[] = {7.784695709041462e-03, 3.224671290700398e-01,
                                 2.445134137142996e+00, 3.754408661907416e+00};
  constexpr double p_low = 0.02425;
  double x;
  if (p < p_low) {
    const double q = std::sqrt(-2.0 * std::log(p));
    x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  } else if (p <= 1.0 - p_low) {
    const double q = p - 0.5;
    const double r = q * q;
    x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
        (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
  } else {
    const double q = std::sqrt(-2.0 * std::log(1.0 - p));
    x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  }
  const double e = 0.5 * std::erfc(-x / std::numbers::sqrt2) - p;
  const double u = e * std::sqrt(2.0 * std::numbers::pi) * std::exp(0.5 * x * x);
  return x - u / (1.0 + 0.5 * x * u);
}

}  // namespace detail

// Quantile of the chi-squared distribution with one degree of freedom.
inline double chi2_quantile_1df(double p) {
  const double z = detail::normal_quantile(0.5 * (1.0 + p));
  return z * z;
}

// Sum over latents of log N(z*_k; mean_k(x), var_k(x) + noise), conditioning
// each GP on the full retained training set. The flow and PCA Jacobian terms
// are constant in x and intentionally excluded, so values are comparable only
// within one spectrum's profile.
inline double latent_predictive_loglik(const Vector& z_star, const Vector& x,
                                       const LatentPredictor& predictor) {
  if (z_star.size() != predictor.latent_dim())
    throw InputError("latent_predictive_loglik: z_star length mismatch");
  double acc = 0.0;
  for (int k = 0; k < predictor.latent_dim(); ++k) {
    const auto pred = predictor.posterior(k).predict(x, true);
    const double resid = z_star[k] - pred.mean;
    acc += -0.5 * resid * resid / pred.variance -
           0.5 * std::log(2.0 * std::numbers::pi * pred.variance);
  }
  return acc;
}

inline double latent_predictive_loglik(const Vector& z_star, const Vector& x,
                                       const SnfgpModel& m) {
  return latent_predictive_loglik(z_star, x, LatentPredictor(m));
}

struct GridSpec {
  double min_x = 0.0;
  double max_x = 1.0;
  int points = 201;
};

struct ProfilePoint {
  double x = 0.0;
  double log_lik = 0.0;
  bool in_interval = false;
};

struct InferenceResult {
  double x_mle = 0.0;
  double log_lik_mle = 0.0;
  double interval_low = 0.0;
  double interval_high = 0.0;
  double confidence = 0.0;
  double deviance_threshold = 0.0;
  bool clipped_low = false;
  bool clipped_high = false;
  bool extra_components = false;
  std::vector<ProfilePoint> profile;
};

struct LikelihoodInterval {
  double low = 0.0;
  double high = 0.0;
  bool clipped_low = false;
  bool clipped_high = false;
  bool extra_components = false;
};

// Deviance-threshold interval on a profile: the connected run of grid points
// around the MLE with 2(l_mle - l(x)) <= threshold, endpoints refined by
// bisection on the deviance. Disconnected qualifying runs only raise a flag.
inline LikelihoodInterval likelihood_interval(
    std::vector<ProfilePoint>& profile, double x_mle, double log_lik_mle,
    double deviance_threshold, const std::function<double(double)>& log_lik) {
  if (profile.size() < 2) throw InputError("likelihood_interval: profile too short");
  auto deviance = [&](double ll) { return 2.0 * (log_lik_mle - ll); };

  const int n = static_cast<int>(profile.size());
  int mle_idx = 0;
  double best_dist = std::numeric_limits<double>::infinity();
  for (int i = 0; i < n; ++i) {
    profile[i].in_interval = std::isfinite(profile[i].log_lik) &&
                             deviance(profile[i].log_lik) <= deviance_threshold;
    const double dist = std::abs(profile[i].x - x_mle);
    if (dist < best_dist) {
      best_dist = dist;
      mle_idx = i;
    }
  }

  // connected qualifying run around the MLE; empty when the peak is narrower
  // than one grid cell
  int lo_idx = -1, hi_idx = -2;
  if (profile[mle_idx].in_interval) {
    lo_idx = hi_idx = mle_idx;
    while (lo_idx > 0 && profile[lo_idx - 1].in_interval) --lo_idx;
    while (hi_idx + 1 < n && profile[hi_idx + 1].in_interval) ++hi_idx;
  }

  LikelihoodInterval out;
  for (int i = 0; i < n; ++i)
    if (profile[i].in_interval && (i < lo_idx || i > hi_idx)) out.extra_components = true;

  auto refine = [&](double inside_x, double outside_x) {
    double lo = inside_x, hi = outside_x;
    double mid = 0.5 * (lo + hi);
    for (int it = 0; it < 200; ++it) {
      mid = 0.5 * (lo + hi);
      const double dev = deviance(log_lik(mid));
      if (std::abs(hi - lo) <= 1e-4 && std::abs(dev - deviance_threshold) <= 1e-3) break;
      if (dev <= deviance_threshold)
        lo = mid;
      else
        hi = mid;
      if (hi == lo) break;
    }
    return mid;
  };

  if (lo_idx >= 0) {
    if (lo_idx == 0) {
      out.low = profile.front().x;
      out.clipped_low = true;
    } else {
      out.low = refine(profile[lo_idx].x, profile[lo_idx - 1].x);
    }
    if (hi_idx == n - 1) {
      out.high = profile.back().x;
      out.clipped_high = true;
    } else {
      out.high = refine(profile[hi_idx].x, profile[hi_idx + 1].x);
    }
  } else {
    // sub-cell interval: bisect outward from the MLE itself (deviance 0)
    int below = -1, above = -1;
    for (int i = 0; i < n; ++i) {
      if (profile[i].x < x_mle) below = i;
      if (profile[i].x > x_mle && above < 0) above = i;
    }
    if (below < 0) {
      out.low = profile.front().x;
      out.clipped_low = true;
    } else {
      out.low = refine(x_mle, profile[below].x);
    }
    if (above < 0) {
      out.high = profile.back().x;
      out.clipped_high = true;
    } else {
      out.high = refine(x_mle, profile[above].x);
    }
  }
  return out;
}

namespace detail {

// Golden-section maximization on [lo, hi].
inline double golden_section_max(const std::function<double(double)>& f, double lo,
                                 double hi) {
  constexpr double inv_phi = 0.61803398874989484820;
  double a = lo, b = hi;
  double c = b - inv_phi * (b - a);
  double d = a + inv_phi * (b - a);
  double fc = f(c), fd = f(d);
  for (int it = 0; it < 80 && (b - a) > 1e-12 * std::max(1.0, std::abs(hi - lo)); ++it) {
    if (fc > fd) {
      b = d;
      d = c;
      fd = fc;
      c = b - inv_phi * (b - a);
      fc = f(c);
    } else {
      a = c;
      c = d;
      fc = fd;
      d = a + inv_phi * (b - a);
      fd = f(d);
    }
  }
  return fc > fd ? c : d;
}

}  // namespace detail

// Grid-search MLE of the composition for one spectrum, with a golden-section
// refinement between the best grid point's neighbors and a likelihood-ratio
// interval at the given confidence. Scalar inputs only (D = 1).
inline InferenceResult infer_mle(const Vector& y_star, const SnfgpModel& m,
                                 const GridSpec& grid, double confidence = 0.95) {
  if (grid.points < 50) throw InputError("infer_mle: grid needs at least 50 points");
  if (!(grid.max_x > grid.min_x))
    throw InputError("infer_mle: grid range is empty");
  if (!(confidence > 0.0 && confidence < 1.0))
    throw InputError("infer_mle: confidence must lie in (0, 1)");
  if (m.meta.d != 1)
    throw InputError("infer_mle: interval construction requires scalar inputs (D = 1)");

  const Vector w_star = pca_project(y_star, m.pca);
  const Vector z_star = flow_forward(w_star, m.flow).first;
  const LatentPredictor predictor(m);
  auto log_lik = [&](double x) {
    Vector xv(1);
    xv << x;
    return latent_predictive_loglik(z_star, xv, predictor);
  };

  InferenceResult res;
  res.confidence = confidence;
  res.deviance_threshold = chi2_quantile_1df(confidence);
  res.profile.resize(grid.points);
  const double step = (grid.max_x - grid.min_x) / (grid.points - 1);
  int best = -1;
  for (int i = 0; i < grid.points; ++i) {
    const double x = grid.min_x + i * step;
    double ll = -std::numeric_limits<double>::infinity();
    try {
      ll = log_lik(x);
    } catch (const NumericalError&) {
      // recorded as -inf; the grid may partially fail
    }
    res.profile[i] = {x, ll, false};
    if (std::isfinite(ll) && (best < 0 || ll > res.profile[best].log_lik)) best = i;
  }
  if (best < 0)
    throw NumericalError("infer_mle: likelihood evaluation failed on the whole grid");

  const double bracket_lo = res.profile[std::max(0, best - 1)].x;
  const double bracket_hi = res.profile[std::min(grid.points - 1, best + 1)].x;
  const double refined = detail::golden_section_max(log_lik, bracket_lo, bracket_hi);
  const double ll_refined = log_lik(refined);
  if (ll_refined > res.profile[best].log_lik) {
    res.x_mle = refined;
    res.log_lik_mle = ll_refined;
  } else {
    res.x_mle = res.profile[best].x;
    res.log_lik_mle = res.profile[best].log_lik;
  }

  const auto interval = likelihood_interval(res.profile, res.x_mle, res.log_lik_mle,
                                            res.deviance_threshold, log_lik);
  res.interval_low = interval.low;
  res.interval_high = interval.high;
  res.clipped_low = interval.clipped_low;
  res.clipped_high = interval.clipped_high;
  res.extra_components = interval.extra_components;
  return res;
}

inline void write_profile_csv(const InferenceResult& res, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw InputError("write_profile_csv: cannot open '" + path + "'");
  out << "x,loglik,in_interval\n";
  for (const auto& pt : res.profile)
    out << format_double(pt.x) << "," << format_double(pt.log_lik) << ","
        << (pt.in_interval ? 1 : 0) << "\n";
}

}  // namespace snfgp
