#include "quantkit/calib.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

#include "graph_json.hpp"

namespace quantkit {

std::string_view granularity_name(Granularity g) { return g == Granularity::LayerWise ? "layer" : "channel"; }

Granularity parse_granularity(std::string_view name) {
  if (name == "layer") return Granularity::LayerWise;
  if (name == "channel") return Granularity::ChannelWise;
  throw ValidationError("unknown granularity '" + std::string(name) + "'");
}

void QuantParams::validate() const {
  if (bitwidth < 2 || bitwidth > 8) throw ValidationError("bitwidth must be in [2, 8], got " + std::to_string(bitwidth));
  if (scales.empty()) throw ValidationError("quantization params have no scales");
  if (granularity == Granularity::LayerWise && scales.size() != 1)
    throw ValidationError("layer-wise params need exactly one scale");
  for (double s : scales)
    if (!(s > 0.0) || !std::isfinite(s)) throw ValidationError("quantization scales must be positive and finite");
}

Histogram Histogram::from_values(std::span<const float> values) {
  Histogram h;
  float max_abs = 0.0f;
  for (float v : values) {
    if (!std::isfinite(v)) throw NumericError("non-finite activation in histogram input");
    max_abs = std::max(max_abs, std::fabs(v));
  }
  h.max_value = max_abs;
  h.bin_width = h.max_value / static_cast<double>(kHistogramBins);
  if (max_abs == 0.0f) return h;
  for (float v : values) {
    if (v == 0.0f) continue;
    const auto idx = static_cast<std::size_t>(std::fabs(static_cast<double>(v)) / h.bin_width);
    ++h.bins[std::min(idx, kHistogramBins - 1)];
    ++h.total;
  }
  return h;
}

void Histogram::validate() const {
  if (bins.size() != kHistogramBins) throw ValidationError("histogram must have 2048 bins");
  std::uint64_t sum = 0;
  for (auto b : bins) sum += b;
  if (sum != total) throw ValidationError("histogram total does not match bin counts");
}

namespace {

/// Coarse bin k spans [k*w, (k+1)*w) in fine-bin coordinates; the last one ends exactly at j.
struct CoarseGrid {
  std::size_t j;
  std::size_t levels;
  double width;

  double lower(std::size_t k) const { return static_cast<double>(k) * width; }
  double upper(std::size_t k) const { return k + 1 == levels ? static_cast<double>(j) : static_cast<double>(k + 1) * width; }
  double overlap(std::size_t i, std::size_t k) const {
    const double lo = std::max(static_cast<double>(i), lower(k));
    const double hi = std::min(static_cast<double>(i + 1), upper(k));
    return hi > lo ? hi - lo : 0.0;
  }
  std::size_t first_coarse(std::size_t i) const {
    auto k = static_cast<std::size_t>(static_cast<double>(i) / width);
    k = std::min(k, levels - 1);
    while (k > 0 && lower(k) > static_cast<double>(i)) --k;
    return k;
  }
};

void check_candidate(const Histogram& h, std::size_t j, std::size_t levels) {
  if (levels < 1) throw ValidationError("level count must be positive");
  if (j < levels || j > kHistogramBins)
    throw ValidationError("candidate " + std::to_string(j) + " outside [" + std::to_string(levels) + ", 2048]");
  if (h.total == 0) throw ValidationError("histogram is empty");
}

}  // namespace

std::pair<std::vector<double>, std::vector<double>> merge_and_expand(const Histogram& h, std::size_t j,
                                                                      std::size_t levels) {
  check_candidate(h, j, levels);
  const double total = static_cast<double>(h.total);
  std::vector<double> p(kHistogramBins, 0.0), q(kHistogramBins, 0.0);
  for (std::size_t i = 0; i < kHistogramBins; ++i) p[std::min(i, j - 1)] += static_cast<double>(h.bins[i]);

  const CoarseGrid grid{j, levels, static_cast<double>(j) / static_cast<double>(levels)};
  std::vector<double> mass(levels, 0.0), support(levels, 0.0);
  for (std::size_t i = 0; i < j; ++i) {
    for (std::size_t k = grid.first_coarse(i); k < levels && grid.lower(k) < static_cast<double>(i + 1); ++k) {
      const double ov = grid.overlap(i, k);
      mass[k] += static_cast<double>(h.bins[i]) * ov;
      if (p[i] > 0.0) support[k] += ov;
    }
  }
  for (std::size_t i = 0; i < j; ++i) {
    if (p[i] == 0.0) continue;
    for (std::size_t k = grid.first_coarse(i); k < levels && grid.lower(k) < static_cast<double>(i + 1); ++k) {
      const double ov = grid.overlap(i, k);
      if (ov > 0.0 && support[k] > 0.0) q[i] += mass[k] * ov / support[k];
    }
  }
  double qsum = 0.0;
  for (std::size_t i = 0; i < j; ++i) {
    p[i] /= total;
    q[i] /= total;
    if (p[i] > 0.0 && q[i] == 0.0) q[i] = kKlEpsilon;
    qsum += q[i];
  }
  for (std::size_t i = 0; i < j; ++i) q[i] /= qsum;
  return {std::move(p), std::move(q)};
}

double kl_divergence(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw ValidationError("kl_divergence: distributions differ in length");
  double kl = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] <= 0.0) continue;
    const double qi = q[i] > 0.0 ? q[i] : kKlEpsilon;
    kl += p[i] * std::log(p[i] / qi);
  }
  return kl;
}

void CalibConfig::validate() const {
  if (!(tolerance >= 1.0)) throw ValidationError("tolerance must be >= 1");
  if (batches < 1) throw ValidationError("calibration needs at least one batch");
  if (batch_size < 1) throw ValidationError("calibration batch size must be positive");
  if (bitwidth < 2 || bitwidth > 8) throw ValidationError("calibration bitwidth must be in [2, 8]");
}

namespace {

/// KL_j for every candidate in O(levels) per candidate using prefix sums; the
/// arithmetic is that of merge_and_expand + kl_divergence regrouped per coarse bin.
class KlSweeper {
 public:
  explicit KlSweeper(const Histogram& h) : c_(h.bins), n_(static_cast<double>(h.total)) {
    const auto nb = kHistogramBins;
    cum_.assign(nb + 1, 0.0);
    nz_.assign(nb + 1, 0.0);
    clogc_.assign(nb + 1, 0.0);
    for (std::size_t i = 0; i < nb; ++i) {
      const double ci = static_cast<double>(c_[i]);
      cum_[i + 1] = cum_[i] + ci;
      nz_[i + 1] = nz_[i] + (ci > 0.0 ? 1.0 : 0.0);
      clogc_[i + 1] = clogc_[i] + (ci > 0.0 ? ci * std::log(ci) : 0.0);
    }
  }

  double kl(std::size_t j, std::size_t levels) const {
    const CoarseGrid grid{j, levels, static_cast<double>(j) / static_cast<double>(levels)};
    const double tail = n_ - cum_[j];
    const double c_last = static_cast<double>(c_[j - 1]);
    const double p_last = c_last + tail;  // unnormalized P_{j-1}
    const bool extra_support = c_last == 0.0 && p_last > 0.0;

    auto counts_upto = [&](double x) {  // in-range count over [0, x)
      const auto i = static_cast<std::size_t>(x);
      if (i >= j) return cum_[j];
      return cum_[i] + (x - static_cast<double>(i)) * static_cast<double>(c_[i]);
    };
    auto support_upto = [&](double x) {  // measure of P-nonzero fine bins over [0, x)
      const auto i = static_cast<std::size_t>(x);
      double s = i >= j ? nz_[j] : nz_[i] + (x - static_cast<double>(i)) * (c_[i] > 0 ? 1.0 : 0.0);
      if (extra_support && x > static_cast<double>(j - 1)) s += std::min(x, static_cast<double>(j)) - static_cast<double>(j - 1);
      return s;
    };

    ratio_.resize(levels);
    for (std::size_t k = 0; k < levels; ++k) {
      const double lo = grid.lower(k), hi = grid.upper(k);
      const double m = counts_upto(hi) - counts_upto(lo);
      const double d = support_upto(hi) - support_upto(lo);
      ratio_[k] = d > 0.0 ? m / d : 0.0;
    }

    // sum over P-nonzero bins of P_i * ln(raw Q_i * N)   (raw Q before normalization)
    double p_log_q = 0.0;
    double eps_mass = 0.0;
    auto special_q = [&](std::size_t i) {
      double q = 0.0;
      for (std::size_t k = grid.first_coarse(i); k < levels && grid.lower(k) < static_cast<double>(i + 1); ++k)
        q += ratio_[k] * grid.overlap(i, k);
      return q;
    };
    auto add_special = [&](std::size_t i, double p_count) {
      if (p_count <= 0.0) return;
      const double q = special_q(i);
      if (q > 0.0) {
        p_log_q += p_count * std::log(q);
      } else {
        p_log_q += p_count * std::log(kKlEpsilon * n_);
        eps_mass += kKlEpsilon;
      }
    };

    std::size_t i = 0;
    for (std::size_t k = 0; k < levels && i < j - 1; ++k) {
      const double hi = grid.upper(k);
      // bins [i, end) lie entirely inside coarse bin k
      auto end = static_cast<std::size_t>(std::floor(hi));
      end = std::min(end, j - 1);
      if (end > i) {
        const double interior = cum_[end] - cum_[i];
        if (interior > 0.0) p_log_q += interior * std::log(ratio_[k]);
        i = end;
      }
      if (i < j - 1 && static_cast<double>(i) < hi && static_cast<double>(i + 1) > hi) {
        add_special(i, static_cast<double>(c_[i]));  // straddles the boundary
        ++i;
      }
    }
    add_special(j - 1, p_last);

    const double sum_plogp = (clogc_[j - 1] + (p_last > 0.0 ? p_last * std::log(p_last) : 0.0)) / n_ - std::log(n_);
    const double raw_total = cum_[j] / n_ + eps_mass;
    return sum_plogp - (p_log_q / n_ - std::log(n_)) + std::log(raw_total);
  }

 private:
  const std::vector<std::uint64_t>& c_;
  double n_;
  std::vector<double> cum_, nz_, clogc_;
  mutable std::vector<double> ratio_;
};

}  // namespace

SweepResult sweep_scale(const Histogram& h, double tolerance, std::size_t levels) {
  h.validate();
  if (h.total == 0) throw DegenerateSiteError("<histogram>", "no nonzero values");
  if (!(tolerance >= 1.0)) throw ValidationError("tolerance must be >= 1");
  if (levels < 1 || levels > kHistogramBins) throw ValidationError("level count out of range");
  SweepResult r;
  auto& curve = r.curve;
  curve.start_index = levels;
  curve.tolerance = tolerance;
  KlSweeper sweeper(h);
  for (std::size_t j = levels; j <= kHistogramBins; ++j) curve.kl.push_back(std::max(0.0, sweeper.kl(j, levels)));
  curve.id_min = levels;
  curve.kl_min = curve.kl[0];
  for (std::size_t j = levels; j <= kHistogramBins; ++j) {
    if (curve.at(j) < curve.kl_min) {
      curve.kl_min = curve.at(j);
      curve.id_min = j;
    }
  }
  curve.id_opt = curve.id_min;
  for (std::size_t j = levels; j <= kHistogramBins; ++j)
    if (curve.at(j) <= tolerance * curve.kl_min && j > curve.id_opt) curve.id_opt = j;
  r.scale = (static_cast<double>(curve.id_opt) + 0.5) * h.bin_width / static_cast<double>(levels);
  return r;
}

SweepResult sweep_scale(const Histogram& h, const CalibConfig& cfg, Signedness signedness) {
  cfg.validate();
  return sweep_scale(h, cfg.tolerance, static_cast<std::size_t>(level_count(cfg.bitwidth, signedness)));
}

std::map<std::string, Histogram> collect_histograms(const ModelGraph& g, const Dataset& data, std::size_t batches,
                                                    std::size_t batch_size, std::span<const std::string> sites) {
  if (batches < 1 || batch_size < 1) throw ValidationError("calibration needs at least one nonempty batch");
  if (data.size() <= (batches - 1) * batch_size)
    throw ValidationError("calibration set has fewer than " + std::to_string(batches) + " batches");
  std::map<std::string, std::vector<float>> pooled;
  for (std::size_t b = 0; b < batches; ++b) {
    const auto begin = b * batch_size, end = std::min(data.size(), begin + batch_size);
    const auto result = forward(g, data.batch(begin, end).inputs, sites);
    for (const auto& site : sites) {
      const auto values = result.trace.at(site).f32();
      auto& dst = pooled[site];
      dst.insert(dst.end(), values.begin(), values.end());
    }
  }
  std::map<std::string, Histogram> out;
  for (const auto& site : sites) {
    auto h = Histogram::from_values(pooled[site]);
    if (h.total == 0) throw DegenerateSiteError(site, "all calibration activations are zero");
    out.emplace(site, std::move(h));
  }
  return out;
}

const QuantParams& CalibrationProfile::params(const std::string& site_id) const {
  auto it = sites.find(site_id);
  if (it == sites.end()) throw ValidationError("calibration profile has no site '" + site_id + "'");
  return it->second.params;
}

CalibrationProfile calibrate(const ModelGraph& g, const Dataset& calib_data, const CalibConfig& cfg) {
  cfg.validate();
  std::vector<std::string> site_ids;
  std::map<std::string, Signedness> signedness;
  for (const auto& s : g.quant_sites) {
    if (!s.quantize) continue;
    site_ids.push_back(s.site_id());
    signedness[s.site_id()] = s.signedness;
  }
  if (site_ids.empty()) throw ValidationError("graph has no quantized sites; run placement planning first");
  const auto histograms = collect_histograms(g, calib_data, cfg.batches, cfg.batch_size, site_ids);
  CalibrationProfile profile;
  for (const auto& id : site_ids) {
    SweepResult r;
    try {
      r = sweep_scale(histograms.at(id), cfg, signedness.at(id));
    } catch (const DegenerateSiteError&) {
      throw DegenerateSiteError(id, "empty histogram");
    }
    QuantParams p;
    p.scales = {r.scale};
    p.bitwidth = cfg.bitwidth;
    p.signedness = signedness.at(id);
    p.granularity = Granularity::LayerWise;
    profile.sites[id] = {std::move(p), std::move(r.curve)};
  }
  return profile;
}

QuantParams minmax_scale(const Tensor& w, int bitwidth, Granularity granularity) {
  if (w.empty() || w.numel() == 0) throw ValidationError("minmax_scale needs a nonempty tensor");
  if (bitwidth < 2 || bitwidth > 8) throw ValidationError("bitwidth must be in [2, 8]");
  const double qmax = static_cast<double>((1 << (bitwidth - 1)) - 1);
  const auto values = w.f32();
  const std::size_t channels = granularity == Granularity::LayerWise ? 1 : w.dim(0);
  const std::size_t per = values.size() / channels;
  QuantParams p;
  p.bitwidth = bitwidth;
  p.signedness = Signedness::Signed;
  p.granularity = granularity;
  for (std::size_t c = 0; c < channels; ++c) {
    float m = 0.0f;
    for (std::size_t i = c * per; i < (c + 1) * per; ++i) m = std::max(m, std::fabs(values[i]));
    p.scales.push_back(m > 0.0f ? m / qmax : static_cast<double>(std::numeric_limits<float>::min()));
  }
  return p;
}

namespace {

nlohmann::json params_json(const QuantParams& p) {
  nlohmann::json j{{"scales", p.scales},
                   {"bitwidth", p.bitwidth},
                   {"signedness", signedness_name(p.signedness)},
                   {"granularity", granularity_name(p.granularity)}};
  if (p.granularity == Granularity::LayerWise) j["scale"] = p.scales.at(0);
  return j;
}

}  // namespace

namespace detail {

nlohmann::json quant_params_to_json(const QuantParams& p) { return params_json(p); }

QuantParams quant_params_from_json(const nlohmann::json& j) {
  QuantParams p;
  p.scales = j.at("scales").get<std::vector<double>>();
  p.bitwidth = j.at("bitwidth").get<int>();
  p.signedness = parse_signedness(j.at("signedness").get<std::string>());
  p.granularity = parse_granularity(j.at("granularity").get<std::string>());
  p.validate();
  return p;
}

}  // namespace detail

void save_profile(const CalibrationProfile& profile, const std::filesystem::path& path) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [id, s] : profile.sites) {
    auto e = params_json(s.params);
    e["id_min"] = s.curve.id_min;
    e["id_opt"] = s.curve.id_opt;
    e["kl_min"] = s.curve.kl_min;
    e["T"] = s.curve.tolerance;
    j[id] = std::move(e);
  }
  detail::write_json_file(j, path);
}

CalibrationProfile load_profile(const std::filesystem::path& path) {
  const auto j = detail::read_json_file(path);
  CalibrationProfile profile;
  try {
    for (const auto& [id, e] : j.items()) {
      SiteCalibration s;
      s.params = detail::quant_params_from_json(e);
      s.curve.id_min = e.value("id_min", std::size_t{0});
      s.curve.id_opt = e.value("id_opt", std::size_t{0});
      s.curve.kl_min = e.value("kl_min", 0.0);
      s.curve.tolerance = e.value("T", 1.0);
      profile.sites.emplace(id, std::move(s));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  return profile;
}

std::vector<std::filesystem::path> dump_kl_curves(const CalibrationProfile& profile, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string());
  std::vector<std::filesystem::path> written;
  for (const auto& [id, s] : profile.sites) {
    std::string name = id;
    for (auto pos = name.find("->"); pos != std::string::npos; pos = name.find("->")) name.replace(pos, 2, "__");
    const auto path = dir / ("kl_" + name + ".csv");
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out.precision(17);
    out << "j,kl\n";
    for (std::size_t k = 0; k < s.curve.kl.size(); ++k) out << s.curve.start_index + k << "," << s.curve.kl[k] << "\n";
    written.push_back(path);
  }
  return written;
}

}  // namespace quantkit
