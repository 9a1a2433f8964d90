#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "quantkit/graph.hpp"

namespace quantkit {

using GradMap = std::map<std::string, Tensor>;

enum class BnMode {
  BatchStats,  // training: normalize with batch statistics, update running ones
  Running,     // inference: normalize with running statistics
};

/// Parameters a hook substitutes for a Conv2D/FullyConnected layer. When
/// `absorbed_bn` is set that BatchNorm node executes as identity.
struct EffectiveParams {
  Tensor weight;
  std::optional<Tensor> bias;
  std::string absorbed_bn;
  std::vector<std::uint8_t> weight_pass;  // STE mask over weight, empty = all pass
};

/// Customization points used by quantization simulation. Defaults are pass-through.
class ExecutionHooks {
 public:
  virtual ~ExecutionHooks() = default;

  /// May rewrite the activation flowing along producer -> consumer. A nonempty
  /// `pass_mask` gates the backward gradient elementwise.
  virtual void transform_edge(std::string_view /*producer*/, const LayerNode& /*consumer*/, Tensor& /*activation*/,
                              std::vector<std::uint8_t>& /*pass_mask*/) const {}

  virtual std::optional<EffectiveParams> effective_params(const ModelGraph& /*g*/, const LayerNode& /*layer*/) const {
    return std::nullopt;
  }

  /// Maps gradients of the substituted parameters back onto graph parameters.
  virtual void accumulate_param_grads(const ModelGraph& /*g*/, const LayerNode& /*layer*/, const EffectiveParams& /*eff*/,
                                      const Tensor& /*grad_weight*/, const Tensor& /*grad_bias*/, GradMap& /*grads*/) const {}
};

struct ForwardResult {
  Tensor output;
  std::map<std::string, Tensor> trace;
};

/// Inference-mode forward of a batch [N, input_shape...]. `sites` are node ids
/// or edge ids "producer->consumer"; the trace maps each to the producer output.
ForwardResult forward(const ModelGraph& g, const Tensor& x, std::span<const std::string> sites = {},
                      const ExecutionHooks* hooks = nullptr);

struct Batch {
  Tensor inputs;
  std::vector<std::size_t> labels;
};

struct LossGrads {
  double loss = 0.0;
  GradMap grads;                        // every trainable parameter
  std::map<std::string, Tensor> running_stats;  // updated mean/var (BatchStats mode only)
  Tensor logits;
};

/// Names of trainable tensors: conv/fc weight and bias, BN gamma and beta.
std::vector<std::string> trainable_params(const ModelGraph& g);

/// Softmax cross-entropy over the graph output (the input of a trailing Softmax node).
LossGrads loss_and_grads(const ModelGraph& g, const Batch& batch, BnMode mode = BnMode::BatchStats,
                         const ExecutionHooks* hooks = nullptr);

enum class Augmentation { None, WeakCrop, AggressiveCrop };

std::string_view augmentation_name(Augmentation a);
Augmentation parse_augmentation(std::string_view name);

struct TrainConfig {
  double learning_rate = 0.05;
  double decay_factor = 10.0;
  std::vector<int> decay_epochs;  // learning rate divided by decay_factor at each listed epoch
  double momentum = 0.9;
  std::size_t batch_size = 32;
  int epochs = 10;
  std::uint64_t seed = 1;
  Augmentation augmentation = Augmentation::None;
  BnMode bn_mode = BnMode::BatchStats;

  void validate() const;
  double learning_rate_at(int epoch) const;
};

struct Sample {
  Tensor input;  // per-sample C,H,W
  std::size_t label = 0;
};

struct Dataset {
  std::vector<Sample> samples;
  std::size_t num_classes = 0;

  std::size_t size() const noexcept { return samples.size(); }
  void validate() const;
  Batch batch(std::span<const std::size_t> indices) const;
  Batch batch(std::size_t begin, std::size_t end) const;
};

struct TrainCallbacks {
  const ExecutionHooks* hooks = nullptr;
  /// Runs after every optimizer update (e.g. re-applying a pruning mask).
  std::function<void(ModelGraph&)> after_step;
  std::function<void(int epoch, const ModelGraph&)> after_epoch;
};

/// Momentum SGD on mean softmax cross-entropy. Single-threaded and bit-reproducible for a fixed seed.
ModelGraph train(const ModelGraph& g, const Dataset& data, const TrainConfig& cfg, const TrainCallbacks& callbacks = {});

struct Accuracy {
  double top1 = 0.0;
  std::optional<double> top5;  // only when num_classes >= 5
  std::size_t count = 0;
};

/// Counts top-1/top-5 hits of a batch-scoring function; ties rank the lower class index first.
Accuracy evaluate_with(const Dataset& data, const std::function<Tensor(const Tensor&)>& predict,
                       std::size_t batch_size = 64);
Accuracy evaluate(const ModelGraph& g, const Dataset& data);

/// Deterministic uniform/normal draws that do not depend on the standard library's distributions.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  std::size_t index(std::size_t n) { return static_cast<std::size_t>(uniform() * static_cast<double>(n)) % n; }
  double normal();
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[index(i)]);
  }

 private:
  std::mt19937_64 engine_;
  std::optional<double> spare_;
};

/// Crop-window jitter on a C,H,W image: weak = 1-pixel-margin random shift,
/// aggressive = random-scale crop resized back with bilinear sampling.
Tensor augment(const Tensor& image, Augmentation mode, Rng& rng);

struct DatasetSplit {
  Dataset train;
  Dataset eval;
};

struct ToyDataOptions {
  std::uint64_t seed = 1;
  std::size_t classes = 10;
  std::size_t per_class = 200;  // train + eval samples per class
  std::size_t image_size = 12;
  std::size_t channels = 3;
  double eval_fraction = 0.2;
  double noise = 1.5;
};

/// Seeded synthetic classification set: per-class smooth templates, random shifts,
/// amplitude jitter, distractors and Gaussian noise.
DatasetSplit make_toy_dataset(const ToyDataOptions& options);
DatasetSplit make_toy_dataset(std::uint64_t seed, std::size_t classes, std::size_t per_class, std::size_t image_size);

/// Directory of NNNNN.qt input blobs plus labels.csv (filename,label).
void save_dataset(const Dataset& data, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& dir);

/// Stacks per-sample tensors into one [N, ...] batch.
Tensor stack(std::span<const Tensor> samples);

}  // namespace quantkit
