#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "quantkit/graph.hpp"
#include "quantkit/nnexec.hpp"
#include "quantkit/quant_params.hpp"

namespace quantkit {

inline constexpr std::size_t kHistogramBins = 2048;

/// Absolute-value activation histogram with zeros excluded.
struct Histogram {
  std::vector<std::uint64_t> bins = std::vector<std::uint64_t>(kHistogramBins, 0);
  double bin_width = 0.0;  // max_value / 2048
  double max_value = 0.0;
  std::uint64_t total = 0;

  /// |v| for nonzero v; the value equal to max_value lands in the top bin.
  static Histogram from_values(std::span<const float> values);
  void validate() const;
};

/// KL divergence per candidate bin count j in [start_index, 2048].
struct KLCurve {
  std::size_t start_index = 0;
  std::vector<double> kl;  // kl[j - start_index]
  std::size_t id_min = 0;
  double kl_min = 0.0;
  std::size_t id_opt = 0;
  double tolerance = 1.0;

  double at(std::size_t j) const { return kl.at(j - start_index); }
};

/// Reference P (clipped to j bins, outliers in bin j-1) and its L-level
/// approximation Q (in-range bins merged at fractional width j/L and expanded
/// over the bins nonzero in P). Both normalized, 2048 long, zero from j on.
std::pair<std::vector<double>, std::vector<double>> merge_and_expand(const Histogram& h, std::size_t j,
                                                                      std::size_t levels);

/// Zero-probability substitute for Q where P is positive.
inline constexpr double kKlEpsilon = 1e-9;

/// sum P_i ln(P_i / Q_i) over P_i > 0.
double kl_divergence(std::span<const double> p, std::span<const double> q);

struct CalibConfig {
  double tolerance = 1.3;
  std::size_t batches = 8;
  std::size_t batch_size = 32;
  int bitwidth = 8;

  void validate() const;
};

struct SweepResult {
  double scale = 0.0;
  KLCurve curve;
};

/// Tolerance-KL scale search: the largest j with KL_j <= T * KL_min,
/// scale = (j + 0.5) * bin_width / levels.
SweepResult sweep_scale(const Histogram& h, double tolerance, std::size_t levels);
SweepResult sweep_scale(const Histogram& h, const CalibConfig& cfg, Signedness signedness);

/// Pooled histograms for each site over the first `batches` batches of `data`.
std::map<std::string, Histogram> collect_histograms(const ModelGraph& g, const Dataset& data, std::size_t batches,
                                                    std::size_t batch_size, std::span<const std::string> sites);

struct SiteCalibration {
  QuantParams params;
  KLCurve curve;
};

struct CalibrationProfile {
  std::map<std::string, SiteCalibration> sites;

  const QuantParams& params(const std::string& site_id) const;
};

/// Calibrates every quantize=true site of the placement plan on `g`.
CalibrationProfile calibrate(const ModelGraph& g, const Dataset& calib_data, const CalibConfig& cfg);

/// MinMax: max|w| / (2^(b-1) - 1), per output channel when channel-wise.
QuantParams minmax_scale(const Tensor& w, int bitwidth, Granularity granularity);

void save_profile(const CalibrationProfile& profile, const std::filesystem::path& path);
CalibrationProfile load_profile(const std::filesystem::path& path);
/// One CSV (j,kl) per site, kl_<producer>__<consumer>.csv. Returns written paths.
std::vector<std::filesystem::path> dump_kl_curves(const CalibrationProfile& profile, const std::filesystem::path& dir);

}  // namespace quantkit
