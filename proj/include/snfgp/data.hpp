#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "snfgp/common.hpp"

namespace snfgp {

enum class Split { kTrain, kVal, kTestInterp, kTestExtrap };

inline const char* split_name(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    case Split::kTestInterp: return "test_interp";
    case Split::kTestExtrap: return "test_extrap";
  }
  return "?";
}

inline Split split_from_name(const std::string& name) {
  if (name == "train") return Split::kTrain;
  if (name == "val") return Split::kVal;
  if (name == "test_interp") return Split::kTestInterp;
  if (name == "test_extrap") return Split::kTestExtrap;
  throw ParseError("unknown split label '" + name + "'");
}

// Half-open channel range [begin, end) tagged with its wavelength window.
struct SegmentRange {
  int begin = 0;
  int end = 0;
  double wavelength_lo = 0.0;
  double wavelength_hi = 0.0;
};

using SegmentLayout = std::vector<SegmentRange>;

inline void validate_layout(const SegmentLayout& layout, int p) {
  if (layout.empty()) throw InputError("segment layout is empty");
  int cursor = 0;
  for (std::size_t s = 0; s < layout.size(); ++s) {
    if (layout[s].begin != cursor || layout[s].end <= layout[s].begin)
      throw InputError("segments must partition [0, P) without gaps or overlap");
    cursor = layout[s].end;
  }
  if (cursor != p)
    throw InputError("segment layout covers [0, " + std::to_string(cursor) +
                     ") but spectra have " + std::to_string(p) + " channels");
}

struct Spectrum {
  Vector intensities;
  SegmentLayout layout;
};

// Divide each segment by its own sum, the per-spectrometer convention.
inline Spectrum normalize_segments(const Vector& raw, const SegmentLayout& layout) {
  validate_layout(layout, static_cast<int>(raw.size()));
  Spectrum out{raw, layout};
  for (std::size_t s = 0; s < layout.size(); ++s) {
    const auto seg = out.intensities.segment(layout[s].begin, layout[s].end - layout[s].begin);
    const double total = seg.sum();
    if (!(total > 0.0))
      throw InputError("normalize_segments: segment " + std::to_string(s) +
                       " has non-positive sum " + format_double(total));
    out.intensities.segment(layout[s].begin, layout[s].end - layout[s].begin) /= total;
  }
  return out;
}

struct Dataset {
  Matrix x;                       // N x D composition inputs
  Matrix y;                       // N x P normalized spectra
  std::vector<int> material_id;   // N
  std::vector<Split> split;       // N
  SegmentLayout layout;

  Eigen::Index rows() const { return x.rows(); }
  int input_dim() const { return static_cast<int>(x.cols()); }
  int channels() const { return static_cast<int>(y.cols()); }

  // Row indices of one split, in dataset order.
  std::vector<int> rows_in(Split s) const {
    std::vector<int> idx;
    for (std::size_t i = 0; i < split.size(); ++i)
      if (split[i] == s) idx.push_back(static_cast<int>(i));
    return idx;
  }
};

// Gaussian-shaped emission line whose height follows a quadratic in the
// composition: amplitude(x) = amp0 + amp1 x + amp2 x^2.
struct Peak {
  int center = 0;
  double width = 1.0;
  double amp0 = 0.0, amp1 = 0.0, amp2 = 0.0;

  double amplitude(double x) const { return amp0 + amp1 * x + amp2 * x * x; }
};

struct SyntheticSpec {
  int channels = 256;
  SegmentLayout segments;
  std::vector<Peak> peaks;
  double baseline = 0.02;
  double noise_scale = 0.08;
  int replicates_per_material = 5;
};

// Desk-scale stand-in for the three-spectrometer instrument: 256 channels in
// proportions mirroring the UV/VIO/VNIR ranges, 12 lines with mixed
// increasing/decreasing quadratic responses.
inline SyntheticSpec default_synthetic_spec() {
  SyntheticSpec spec;
  spec.segments = {{0, 44, 246.0, 338.0}, {44, 87, 382.0, 473.0}, {87, 256, 492.0, 849.0}};
  spec.peaks = {
      {8, 2.0, 0.20, 1.80, 0.00},   {20, 2.5, 1.00, -0.85, 0.00},
      {33, 1.8, 0.40, 0.00, 0.90},  {52, 2.2, 0.90, -1.20, 0.60},
      {63, 3.0, 0.15, 1.10, -0.45}, {76, 2.0, 0.60, 0.25, 0.00},
      {100, 3.5, 0.80, -0.50, 0.00}, {126, 2.5, 0.10, 0.30, 1.10},
      {150, 4.0, 1.20, 0.00, -0.70}, {178, 3.0, 0.50, 0.90, -0.40},
      {205, 2.2, 0.95, -0.90, 0.35}, {235, 3.2, 0.30, 0.55, 0.25},
  };
  return spec;
}

inline void validate_spec(const SyntheticSpec& spec) {
  validate_layout(spec.segments, spec.channels);
  if (spec.peaks.empty()) throw InputError("synthetic spec: no peaks");
  for (const auto& pk : spec.peaks) {
    if (!(pk.width > 0.0)) throw InputError("synthetic spec: peak width must be > 0");
    bool inside = false;
    for (const auto& seg : spec.segments)
      inside = inside || (pk.center >= seg.begin && pk.center < seg.end);
    if (!inside)
      throw InputError("synthetic spec: peak center " + std::to_string(pk.center) +
                       " outside segment bounds");
  }
  if (!(spec.baseline > 0.0)) throw InputError("synthetic spec: baseline must be > 0");
  if (spec.noise_scale < 0.0) throw InputError("synthetic spec: noise_scale must be >= 0");
  if (spec.replicates_per_material < 1)
    throw InputError("synthetic spec: replicates_per_material must be >= 1");
}

// Noiseless signal at composition x, before segment normalization.
inline Vector synthetic_signal(const SyntheticSpec& spec, double x,
                               const Vector* peak_multipliers = nullptr) {
  Vector y = Vector::Constant(spec.channels, spec.baseline);
  for (std::size_t j = 0; j < spec.peaks.size(); ++j) {
    const auto& pk = spec.peaks[j];
    double amp = pk.amplitude(x);
    if (peak_multipliers) amp *= (*peak_multipliers)[j];
    if (amp == 0.0) continue;
    const int lo = std::max(0, pk.center - static_cast<int>(6.0 * pk.width) - 1);
    const int hi = std::min(spec.channels - 1, pk.center + static_cast<int>(6.0 * pk.width) + 1);
    for (int p = lo; p <= hi; ++p) {
      const double d = (p - pk.center) / pk.width;
      y[p] += amp * std::exp(-0.5 * d * d);
    }
  }
  return y.cwiseMax(0.0);
}

// Compositions are uniform on (0,1). Shot-to-shot variation is a lognormal
// multiplier per peak with sigma = noise_scale, driven by two shared factors
// per shot so the lines fluctuate coherently, the way coupled plasma
// conditions modulate whole line groups.
inline Dataset generate_synthetic(const SyntheticSpec& spec, int n_materials,
                                  std::uint64_t seed) {
  validate_spec(spec);
  if (n_materials < 4) throw InputError("generate_synthetic: need at least 4 materials");

  const int reps = spec.replicates_per_material;
  const int n = n_materials * reps;
  const int j_peaks = static_cast<int>(spec.peaks.size());

  Dataset ds;
  ds.layout = spec.segments;
  ds.x.resize(n, 1);
  ds.y.resize(n, spec.channels);
  ds.material_id.resize(n);
  ds.split.assign(n, Split::kTrain);

  // Fixed per-peak phases spread the two shot factors across the lines.
  Vector cos_phase(j_peaks), sin_phase(j_peaks);
  for (int j = 0; j < j_peaks; ++j) {
    const double phase = 2.39996322972865332 * j;  // golden angle
    cos_phase[j] = std::cos(phase);
    sin_phase[j] = std::sin(phase);
  }

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);

  int row = 0;
  for (int m = 0; m < n_materials; ++m) {
    const double x = uniform(rng);
    for (int r = 0; r < reps; ++r, ++row) {
      Vector mult = Vector::Ones(j_peaks);
      if (spec.noise_scale > 0.0) {
        const double u1 = normal(rng);
        const double u2 = normal(rng);
        for (int j = 0; j < j_peaks; ++j)
          mult[j] = std::exp(spec.noise_scale * (cos_phase[j] * u1 + sin_phase[j] * u2));
      }
      const Vector raw = synthetic_signal(spec, x, &mult);
      ds.y.row(row) = normalize_segments(raw, spec.segments).intensities;
      ds.x(row, 0) = x;
      ds.material_id[row] = m;
    }
  }
  return ds;
}

// Material-level random split. Materials above the extrapolation test cutoff
// are forced into test_extrap; materials at or above the train cutoff are
// kept out of the training set.
inline Dataset split_dataset(Dataset ds, const std::vector<double>& fractions,
                             double extrap_train_cutoff, double extrap_test_cutoff,
                             std::uint64_t seed) {
  if (fractions.size() != 3)
    throw InputError("split_dataset: need 3 fractions (train, val, test_interp)");
  const double total = std::accumulate(fractions.begin(), fractions.end(), 0.0);
  if (std::abs(total - 1.0) > 1e-9)
    throw InputError("split_dataset: fractions sum to " + format_double(total) +
                     ", expected 1");
  for (double f : fractions)
    if (f < 0.0) throw InputError("split_dataset: fractions must be non-negative");
  if (extrap_train_cutoff > extrap_test_cutoff)
    throw InputError("split_dataset: extrap_train_cutoff must be <= extrap_test_cutoff");

  // material -> composition (first input dimension) and row list
  std::vector<int> mat_ids;
  std::vector<double> mat_x;
  std::vector<std::vector<int>> mat_rows;
  for (Eigen::Index i = 0; i < ds.rows(); ++i) {
    const int m = ds.material_id[i];
    auto it = std::find(mat_ids.begin(), mat_ids.end(), m);
    std::size_t pos;
    if (it == mat_ids.end()) {
      mat_ids.push_back(m);
      mat_x.push_back(ds.x(i, 0));
      mat_rows.emplace_back();
      pos = mat_ids.size() - 1;
    } else {
      pos = static_cast<std::size_t>(it - mat_ids.begin());
    }
    mat_rows[pos].push_back(static_cast<int>(i));
  }

  std::vector<std::size_t> low, mid, extrap;
  for (std::size_t m = 0; m < mat_ids.size(); ++m) {
    if (mat_x[m] > extrap_test_cutoff)
      extrap.push_back(m);
    else if (mat_x[m] >= extrap_train_cutoff)
      mid.push_back(m);
    else
      low.push_back(m);
  }

  std::mt19937_64 rng(seed);
  std::shuffle(low.begin(), low.end(), rng);
  std::shuffle(mid.begin(), mid.end(), rng);

  std::vector<Split> mat_split(mat_ids.size(), Split::kTrain);
  for (std::size_t m : extrap) mat_split[m] = Split::kTestExtrap;

  // low-composition materials honor the requested fractions
  const std::size_t n_low = low.size();
  std::size_t n_train = static_cast<std::size_t>(fractions[0] * n_low);
  std::size_t n_val = static_cast<std::size_t>(fractions[1] * n_low);
  for (std::size_t i = 0; i < n_low; ++i) {
    if (i < n_train)
      mat_split[low[i]] = Split::kTrain;
    else if (i < n_train + n_val)
      mat_split[low[i]] = Split::kVal;
    else
      mat_split[low[i]] = Split::kTestInterp;
  }

  // mid-band materials are barred from training; split val vs test_interp
  const double vt = fractions[1] + fractions[2];
  const double val_share = vt > 0.0 ? fractions[1] / vt : 0.0;
  const std::size_t n_mid_val = static_cast<std::size_t>(val_share * mid.size());
  for (std::size_t i = 0; i < mid.size(); ++i)
    mat_split[mid[i]] = i < n_mid_val ? Split::kVal : Split::kTestInterp;

  for (std::size_t m = 0; m < mat_ids.size(); ++m)
    for (int row : mat_rows[m]) ds.split[row] = mat_split[m];
  return ds;
}

namespace detail {
inline std::filesystem::path sidecar_path(const std::filesystem::path& csv_path) {
  return std::filesystem::path(csv_path.string() + ".meta.json");
}
}  // namespace detail

// CSV (material_id, x_*, split, y_*) plus a JSON sidecar carrying the
// segment layout. Floats are written with 17 significant digits so the
// round trip is exact.
inline void write_dataset(const Dataset& ds, const std::string& path) {
  validate_layout(ds.layout, ds.channels());
  std::ofstream csv(path);
  if (!csv) throw InputError("write_dataset: cannot open '" + path + "' for writing");
  const int d = ds.input_dim();
  const int p = ds.channels();
  csv << "material_id";
  for (int j = 0; j < d; ++j) csv << ",x_" << j;
  csv << ",split";
  for (int j = 0; j < p; ++j) csv << ",y_" << j;
  csv << "\n";
  for (Eigen::Index i = 0; i < ds.rows(); ++i) {
    csv << ds.material_id[i];
    for (int j = 0; j < d; ++j) csv << "," << format_double(ds.x(i, j));
    csv << "," << split_name(ds.split[i]);
    for (int j = 0; j < p; ++j) csv << "," << format_double(ds.y(i, j));
    csv << "\n";
  }
  if (!csv) throw InputError("write_dataset: failed while writing '" + path + "'");

  nlohmann::ordered_json meta;
  meta["format"] = "snfgp-dataset-v1";
  meta["d"] = d;
  meta["p"] = p;
  meta["segments"] = nlohmann::ordered_json::array();
  for (const auto& seg : ds.layout)
    meta["segments"].push_back({{"begin", seg.begin},
                                {"end", seg.end},
                                {"wavelength_lo", seg.wavelength_lo},
                                {"wavelength_hi", seg.wavelength_hi}});
  std::ofstream side(detail::sidecar_path(path));
  if (!side)
    throw InputError("write_dataset: cannot open sidecar '" +
                     detail::sidecar_path(path).string() + "'");
  side << meta.dump(2) << "\n";
}

inline Dataset read_dataset(const std::string& path) {
  const auto side_path = detail::sidecar_path(path);
  std::ifstream side(side_path);
  if (!side)
    throw InputError("read_dataset: missing sidecar '" + side_path.string() + "'");
  nlohmann::json meta;
  try {
    side >> meta;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("read_dataset: malformed sidecar: " + std::string(e.what()));
  }
  if (!meta.contains("format") || meta["format"] != "snfgp-dataset-v1")
    throw ParseError("read_dataset: sidecar format is not snfgp-dataset-v1");
  Dataset ds;
  const int d = meta.at("d").get<int>();
  const int p = meta.at("p").get<int>();
  for (const auto& seg : meta.at("segments"))
    ds.layout.push_back({seg.at("begin").get<int>(), seg.at("end").get<int>(),
                         seg.at("wavelength_lo").get<double>(),
                         seg.at("wavelength_hi").get<double>()});
  validate_layout(ds.layout, p);

  std::ifstream csv(path);
  if (!csv) throw InputError("read_dataset: cannot open '" + path + "'");
  std::string line;
  if (!std::getline(csv, line)) throw ParseError("read_dataset: empty file '" + path + "'");

  const std::size_t want_cols = static_cast<std::size_t>(2 + d + p);
  std::vector<double> xs, ys;
  std::vector<int> mats;
  std::vector<Split> splits;
  int line_no = 1;
  std::vector<std::string> fields;
  while (std::getline(csv, line)) {
    ++line_no;
    if (line.empty()) continue;
    fields.clear();
    std::size_t start = 0;
    while (true) {
      const std::size_t comma = line.find(',', start);
      fields.push_back(line.substr(start, comma - start));
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
    if (fields.size() != want_cols)
      throw ParseError("read_dataset: line " + std::to_string(line_no) + " has " +
                       std::to_string(fields.size()) + " columns, expected " +
                       std::to_string(want_cols));
    try {
      std::size_t idx = 0;
      mats.push_back(std::stoi(fields[idx++]));
      for (int j = 0; j < d; ++j) xs.push_back(std::stod(fields[idx++]));
      splits.push_back(split_from_name(fields[idx++]));
      for (int j = 0; j < p; ++j) ys.push_back(std::stod(fields[idx++]));
    } catch (const ParseError&) {
      throw;
    } catch (const std::exception&) {
      throw ParseError("read_dataset: line " + std::to_string(line_no) +
                       " has a malformed value");
    }
  }
  const Eigen::Index n = static_cast<Eigen::Index>(mats.size());
  ds.x = Eigen::Map<Matrix>(xs.data(), d, n).transpose();
  ds.y = Eigen::Map<Matrix>(ys.data(), p, n).transpose();
  ds.material_id = std::move(mats);
  ds.split = std::move(splits);
  return ds;
}

}  // namespace snfgp
