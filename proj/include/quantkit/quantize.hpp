#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "quantkit/calib.hpp"
#include "quantkit/graph.hpp"
#include "quantkit/ops.hpp"
#include "quantkit/quant_params.hpp"

namespace quantkit {

// ---- BN folding -----------------------------------------------------------

struct BNParams {
  Tensor gamma, beta, mean, var;
  float eps = 1e-5f;
};

BNParams bn_params(const ModelGraph& g, const LayerNode& bn);

struct FoldedConv {
  Tensor w_hat;
  Tensor b_hat;
  std::vector<double> s_w_hat;  // only when S_W was supplied
};

/// W_hat = gamma W / sqrt(var + eps), B_hat = beta + gamma (bias - mean) / sqrt(var + eps),
/// S_W_hat = |gamma| S_W / sqrt(var + eps). Works for OIHW and [O, I] weights.
FoldedConv fold_bn(const Tensor& w, const Tensor* bias, const BNParams& bn,
                   const std::optional<std::vector<double>>& s_w = std::nullopt);

struct FoldResult {
  ModelGraph graph;
  std::map<std::string, std::vector<double>> weight_scales;  // S_W_hat per folded layer, when S_W given
  std::map<std::string, std::string> absorbed;                // BN id -> layer id
};

/// Folds every BatchNorm that directly follows a Conv2D/FC with no other consumer.
/// The layer keeps its id; readers of the BN and placement annotations are redirected.
FoldResult fold_batchnorms(const ModelGraph& g, const std::map<std::string, QuantParams>& weight_scales = {});

// ---- placement ------------------------------------------------------------

struct PlacementOptions {
  bool quantize_add_inputs = false;  // guideline violation, for ablation only
  bool signed_only = false;
};

/// Annotates every input edge of quantizable Conv2D/FC layers, and every Add input
/// (unquantized unless `quantize_add_inputs`). Edges from ReLU, or from pools over
/// non-negative values, are unsigned.
ModelGraph plan_placement(const ModelGraph& g, const PlacementOptions& options = {});

/// Throws ValidationError when a quantized edge enters an Add or a quantized
/// ReLU-sourced edge is signed.
void check_placement_guideline(const ModelGraph& g);

/// plan_placement followed by fold_batchnorms: the graph calibration and build_quantized expect.
FoldResult prepare_ptq(const ModelGraph& g, const PlacementOptions& options = {});

// ---- tensor quantization --------------------------------------------------

/// Integer tensor (I8 for signed, U8 for unsigned); channel-wise scales index axis 0.
Tensor quantize_tensor(const Tensor& x, const QuantParams& p);
Tensor dequantize_tensor(const Tensor& q, const QuantParams& p);

// ---- integer kernels ------------------------------------------------------

enum class AccumMode { Int32, Int16 };

std::string_view accum_mode_name(AccumMode m);
AccumMode parse_accum_mode(std::string_view name);

struct OverflowAudit {
  std::uint64_t saturated = 0;
  std::uint64_t total = 0;

  OverflowAudit& operator+=(const OverflowAudit& o) {
    saturated += o.saturated;
    total += o.total;
    return *this;
  }
  bool operator==(const OverflowAudit&) const = default;
};

/// Accumulator clamping at the extrema of its width; every clamped add is one event.
class SaturatingAccumulator {
 public:
  explicit SaturatingAccumulator(AccumMode mode) : lo_(mode == AccumMode::Int16 ? INT16_MIN : INT32_MIN),
                                                   hi_(mode == AccumMode::Int16 ? INT16_MAX : INT32_MAX) {}
  void add(std::int64_t product) {
    std::int64_t v = value_ + product;
    ++steps_;
    if (v > hi_ || v < lo_) {
      v = v > hi_ ? hi_ : lo_;
      ++saturated_;
    }
    value_ = v;
  }
  std::int64_t value() const { return value_; }
  std::uint64_t saturated() const { return saturated_; }
  std::uint64_t steps() const { return steps_; }

 private:
  std::int64_t lo_, hi_;
  std::int64_t value_ = 0;
  std::uint64_t saturated_ = 0;
  std::uint64_t steps_ = 0;
};

/// Throws ValidationError for INT16 accumulation when abits + wbits > 14.
void check_accum_contract(AccumMode mode, int abits, int wbits);

struct QuantizedConvResult {
  Tensor output;
  OverflowAudit audit;
};

/// Integer convolution: O = acc * S_A * S_W,o + bias. `s_w` has one entry or one per output channel.
QuantizedConvResult quantized_conv(const Tensor& a_int, const Tensor& w_int, double s_a, const std::vector<double>& s_w,
                                   const Tensor* bias, ops::ConvGeometry geo, AccumMode mode);
/// [N, F] activations against [O, F] weights.
QuantizedConvResult quantized_fc(const Tensor& a_int, const Tensor& w_int, double s_a, const std::vector<double>& s_w,
                                 const Tensor* bias, AccumMode mode);

// ---- quantized model ------------------------------------------------------

struct WeightQuantConfig {
  int bitwidth = 8;
  Granularity granularity = Granularity::ChannelWise;
};

struct QuantizedLayer {
  Tensor w_int;
  QuantParams weight;
  std::string input_site;  // site id of the quantized input edge
};

struct QuantizedModel {
  ModelGraph graph;  // BN folded, annotated
  std::map<std::string, QuantizedLayer> layers;
  std::map<std::string, QuantParams> activations;  // site id -> params
  AccumMode accum = AccumMode::Int32;
};

/// `weight_scale_overrides` replaces MinMax for the listed layers (e.g. folded S_W_hat).
QuantizedModel build_quantized(const ModelGraph& folded, const CalibrationProfile& profile, const WeightQuantConfig& wcfg,
                               AccumMode accum,
                               const std::map<std::string, std::vector<double>>& weight_scale_overrides = {});

struct QuantizedRun {
  Tensor output;
  std::map<std::string, OverflowAudit> audits;  // per quantized layer

  OverflowAudit total() const;
};

QuantizedRun run_quantized(const QuantizedModel& qm, const Tensor& x);
Accuracy evaluate_quantized(const QuantizedModel& qm, const Dataset& data);

void save_quantized(const QuantizedModel& qm, const std::filesystem::path& dir);
QuantizedModel load_quantized(const std::filesystem::path& dir);

}  // namespace quantkit
