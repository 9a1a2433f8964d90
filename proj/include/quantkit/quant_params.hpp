#pragma once

#include <cmath>
#include <cstddef>
#include <string_view>
#include <vector>

#include "quantkit/graph.hpp"

namespace quantkit {

enum class Granularity { LayerWise, ChannelWise };

std::string_view granularity_name(Granularity g);
Granularity parse_granularity(std::string_view name);

/// Symmetric quantization parameters for one site or weight tensor.
/// Channel-wise scales index axis 0 (output channel of OIHW weights).
struct QuantParams {
  std::vector<double> scales;
  int bitwidth = 8;
  Signedness signedness = Signedness::Signed;
  Granularity granularity = Granularity::LayerWise;

  /// Signed ranges are symmetric: -2^(b-1) is never produced.
  int qmin() const noexcept { return signedness == Signedness::Signed ? -((1 << (bitwidth - 1)) - 1) : 0; }
  int qmax() const noexcept {
    return signedness == Signedness::Signed ? (1 << (bitwidth - 1)) - 1 : (1 << bitwidth) - 1;
  }
  double scale_for(std::size_t channel) const { return granularity == Granularity::LayerWise ? scales.at(0) : scales.at(channel); }

  /// Throws ValidationError unless 2 <= bitwidth <= 8, scales nonempty and positive.
  void validate() const;
  bool operator==(const QuantParams&) const = default;
};

/// Level count of the KL sweep: 2^(b-1) signed, 2^b - 1 unsigned.
inline int level_count(int bitwidth, Signedness s) {
  return s == Signedness::Signed ? 1 << (bitwidth - 1) : (1 << bitwidth) - 1;
}

/// round-half-away-from-zero of x/scale, saturated to [qmin, qmax].
inline int quantize_value(float x, double scale, int qmin, int qmax) {
  const double r = std::round(static_cast<double>(x) / scale);
  if (r < qmin) return qmin;
  if (r > qmax) return qmax;
  return static_cast<int>(r);
}

inline float dequantize_value(int q, double scale) { return static_cast<float>(q * scale); }

/// STE pass-through test: x/scale inside [qmin, qmax], bounds inclusive up to
/// 1e-9 relative slack so a MinMax maximum is not lost to division roundoff.
inline bool within_quant_range(float x, double scale, int qmin, int qmax) {
  const double v = static_cast<double>(x) / scale;
  return v >= qmin * (1.0 + 1e-9) && v <= qmax * (1.0 + 1e-9);
}

}  // namespace quantkit
