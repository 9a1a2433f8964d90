#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "quantkit/calib.hpp"
#include "quantkit/nnexec.hpp"
#include "quantkit/quantize.hpp"

namespace quantkit {

/// dequantize(quantize(x, p), p).
Tensor fake_quant_forward(const Tensor& x, const QuantParams& p);
/// Straight-through: g where x/scale lies in [qmin, qmax] (inclusive), 0 elsewhere.
Tensor fake_quant_backward(const Tensor& grad, const Tensor& x, const QuantParams& p);

struct FoldedLayerGrads {
  Tensor output;
  Tensor d_weight;
  Tensor d_gamma;
  Tensor d_beta;
};

/// Conv with BN folded in from running statistics and the folded weights
/// fake-quantized with S_W_hat = |gamma| S_W / sigma (skipped when `s_w` is empty).
/// Backward maps dL/dW_hat onto W, gamma and beta through the folding expressions.
FoldedLayerGrads fold_forward_unfold_backward(const Tensor& w, const Tensor* bias, const BNParams& bn,
                                              ops::ConvGeometry geo, const Tensor& x, const Tensor& dy,
                                              const std::optional<QuantParams>& s_w);

struct QatConfig {
  int epochs = 20;
  double learning_rate = 5e-4;
  double decay_factor = 5.0;
  int decay_epoch = 10;
  double momentum = 0.9;
  std::size_t batch_size = 32;
  Augmentation augmentation = Augmentation::WeakCrop;
  std::uint64_t seed = 1;
  int weight_bits = 8;
  bool quantize_weights = true;
  bool quantize_activations = true;
  std::filesystem::path checkpoint_dir;  // empty: no checkpoints

  void validate() const;
  TrainConfig train_config() const;
};

/// JSON keys: epochs, learning_rate, decay_factor, decay_epoch, momentum, batch_size,
/// augmentation, seed, weight_bits. Missing keys keep their defaults.
QatConfig read_qat_config(const std::filesystem::path& path);

/// Simulated quantization for fine-tuning an unfolded graph: activation sites of
/// `profile` are fake-quantized on the corresponding edges and every quantized
/// Conv2D/FC runs with folded, fake-quantized weights.
class QatHooks final : public ExecutionHooks {
 public:
  QatHooks(const ModelGraph& g, const CalibrationProfile& profile, std::map<std::string, QuantParams> weight_scales,
           bool quantize_weights, bool quantize_activations);

  void transform_edge(std::string_view producer, const LayerNode& consumer, Tensor& activation,
                      std::vector<std::uint8_t>& pass_mask) const override;
  std::optional<EffectiveParams> effective_params(const ModelGraph& g, const LayerNode& layer) const override;
  void accumulate_param_grads(const ModelGraph& g, const LayerNode& layer, const EffectiveParams& eff,
                              const Tensor& grad_weight, const Tensor& grad_bias, GradMap& grads) const override;

 private:
  const CalibrationProfile& profile_;
  std::map<std::string, QuantParams> weight_scales_;
  std::map<std::string, std::string> folded_id_;  // BN id -> layer id
  std::map<std::string, std::string> bn_of_;      // layer id -> BN id
  bool quantize_weights_;
  bool quantize_activations_;
};

/// Channel-wise MinMax S_W of every quantizable Conv2D/FC weight.
std::map<std::string, QuantParams> frozen_weight_scales(const ModelGraph& g, int bits);

struct QatResult {
  ModelGraph graph;                                   // fp master weights, BN unfolded
  std::map<std::string, QuantParams> weight_scales;  // frozen S_W
};

/// Fine-tunes `g` (annotated, unfolded) under simulated quantization with frozen
/// weight scales, frozen activation scales and frozen BN statistics.
QatResult qat_finetune(const ModelGraph& g, const CalibrationProfile& profile, const Dataset& data, const QatConfig& cfg,
                       const std::function<void(ModelGraph&)>& after_step = {});

/// Integer model of a QAT result: BN folded with S_W_hat from the frozen scales.
QuantizedModel build_qat_model(const QatResult& r, const CalibrationProfile& profile, AccumMode accum);

}  // namespace quantkit
