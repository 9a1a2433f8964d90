#include <algorithm>
#include <cmath>
#include <numeric>

#include "quantkit/nnexec.hpp"

namespace quantkit {

std::string_view augmentation_name(Augmentation a) {
  switch (a) {
    case Augmentation::None: return "none";
    case Augmentation::WeakCrop: return "weak_crop";
    case Augmentation::AggressiveCrop: return "aggressive_crop";
  }
  return "?";
}

Augmentation parse_augmentation(std::string_view name) {
  if (name == "none") return Augmentation::None;
  if (name == "weak_crop") return Augmentation::WeakCrop;
  if (name == "aggressive_crop") return Augmentation::AggressiveCrop;
  throw ValidationError("unknown augmentation '" + std::string(name) + "'");
}

void TrainConfig::validate() const {
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) throw ValidationError("learning rate must be >= 0");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ValidationError("momentum must be in [0, 1)");
  if (!(decay_factor > 0.0)) throw ValidationError("decay factor must be positive");
  if (batch_size == 0) throw ValidationError("batch size must be positive");
  if (epochs < 0) throw ValidationError("epoch count must be non-negative");
}

double TrainConfig::learning_rate_at(int epoch) const {
  double lr = learning_rate;
  for (int e : decay_epochs)
    if (epoch >= e) lr /= decay_factor;
  return lr;
}

ModelGraph train(const ModelGraph& g, const Dataset& data, const TrainConfig& cfg, const TrainCallbacks& callbacks) {
  cfg.validate();
  data.validate();
  g.validate();
  ModelGraph cur = g;
  const auto names = trainable_params(cur);
  std::map<std::string, std::vector<float>> velocity;
  for (const auto& name : names) velocity[name].assign(cur.params.at(name).numel(), 0.0f);

  Rng rng(cfg.seed);
  std::vector<std::size_t> order(data.size());
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = cfg.learning_rate_at(epoch);
    std::iota(order.begin(), order.end(), std::size_t{0});
    rng.shuffle(order);
    for (std::size_t begin = 0; begin < order.size(); begin += cfg.batch_size) {
      const auto end = std::min(order.size(), begin + cfg.batch_size);
      std::vector<Tensor> inputs;
      Batch batch;
      for (std::size_t k = begin; k < end; ++k) {
        const auto& s = data.samples[order[k]];
        inputs.push_back(augment(s.input, cfg.augmentation, rng));
        batch.labels.push_back(s.label);
      }
      batch.inputs = stack(inputs);
      auto lg = loss_and_grads(cur, batch, cfg.bn_mode, callbacks.hooks);
      if (lr > 0.0) {
        for (const auto& name : names) {
          auto& v = velocity[name];
          auto p = cur.params.at(name).f32();
          const auto grad = lg.grads.at(name).f32();
          for (std::size_t i = 0; i < p.size(); ++i) {
            v[i] = static_cast<float>(cfg.momentum * v[i] + grad[i]);
            p[i] = static_cast<float>(p[i] - lr * v[i]);
          }
        }
      }
      for (auto& [name, t] : lg.running_stats) cur.params.at(name) = std::move(t);
      if (callbacks.after_step) callbacks.after_step(cur);
    }
    if (callbacks.after_epoch) callbacks.after_epoch(epoch, cur);
  }
  return cur;
}

Accuracy evaluate_with(const Dataset& data, const std::function<Tensor(const Tensor&)>& predict,
                       std::size_t batch_size) {
  data.validate();
  if (data.size() == 0) throw ValidationError("evaluation set is empty");
  std::size_t hit1 = 0, hit5 = 0;
  for (std::size_t begin = 0; begin < data.size(); begin += batch_size) {
    const auto end = std::min(data.size(), begin + batch_size);
    const auto batch = data.batch(begin, end);
    const auto scores = predict(batch.inputs);
    const auto n = end - begin;
    const auto k = scores.numel() / n;
    for (std::size_t b = 0; b < n; ++b) {
      const float* row = scores.f32().data() + b * k;
      const auto label = batch.labels[b];
      // rank = number of classes ranked strictly ahead of the label
      std::size_t rank = 0;
      for (std::size_t c = 0; c < k; ++c)
        if (row[c] > row[label] || (row[c] == row[label] && c < label)) ++rank;
      if (rank == 0) ++hit1;
      if (rank < 5) ++hit5;
    }
  }
  Accuracy acc;
  acc.count = data.size();
  acc.top1 = static_cast<double>(hit1) / static_cast<double>(data.size());
  if (data.num_classes >= 5) acc.top5 = static_cast<double>(hit5) / static_cast<double>(data.size());
  return acc;
}

Accuracy evaluate(const ModelGraph& g, const Dataset& data) {
  return evaluate_with(data, [&g](const Tensor& x) { return forward(g, x).output; });
}

}  // namespace quantkit
