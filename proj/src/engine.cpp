#include <algorithm>
#include <cmath>
#include <set>

#include "quantkit/nnexec.hpp"
#include "quantkit/ops.hpp"

namespace quantkit {

namespace {

struct NodeState {
  std::vector<Tensor> inputs;                        // activations as consumed (after edge transforms)
  std::vector<std::vector<std::uint8_t>> pass_masks;  // per input slot
  Tensor output;
  ops::BatchNormCache bn_cache;
  std::vector<std::uint32_t> argmax;
  std::optional<EffectiveParams> effective;
};

ops::ConvGeometry geometry(const LayerNode& n) { return {n.stride, n.padding, n.groups}; }

const Tensor* optional_param(const ModelGraph& g, const LayerNode& n, std::string_view role) {
  return n.has_param(role) ? &g.param(n, role) : nullptr;
}

bool all_finite(const Tensor& t) {
  return std::all_of(t.f32().begin(), t.f32().end(), [](float v) { return std::isfinite(v); });
}

/// Forward pass retaining everything backward needs.
class Tape {
 public:
  Tape(const ModelGraph& g, BnMode mode, const ExecutionHooks* hooks) : g_(g), mode_(mode), hooks_(hooks) {
    order_ = topo_order(g);
    output_id_ = g.output_id();
  }

  void run(const Tensor& x) {
    check_input(x);
    input_ = x;
    for (const auto& id : order_) {
      const auto& n = g_.node(id);
      auto& st = states_[id];
      st.inputs.clear();
      st.pass_masks.assign(n.inputs.size(), {});
      for (std::size_t slot = 0; slot < n.inputs.size(); ++slot) {
        Tensor act = value_of(n.inputs[slot]);
        if (hooks_) hooks_->transform_edge(n.inputs[slot], n, act, st.pass_masks[slot]);
        st.inputs.push_back(std::move(act));
      }
      st.output = compute(n, st);
    }
  }

  const Tensor& value_of(const std::string& id) const {
    if (id == kGraphInput) return input_;
    return states_.at(id).output;
  }

  const Tensor& output() const { return states_.at(output_id_).output; }

  /// Node whose output is the logits: the graph output, or the input of a trailing Softmax.
  std::string logits_id() const {
    const auto& out = g_.node(output_id_);
    return out.kind == LayerKind::Softmax ? out.inputs[0] : output_id_;
  }

  const std::string& first_non_finite() const {
    static const std::string none;
    for (const auto& id : order_)
      if (!all_finite(states_.at(id).output)) return id;
    return none;
  }

  void backward(const std::string& from, Tensor grad, GradMap& param_grads) {
    std::map<std::string, Tensor> grads;
    grads[from] = std::move(grad);
    for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
      const auto& n = g_.node(*it);
      auto git = grads.find(n.id);
      if (git == grads.end()) continue;
      auto input_grads = backward_node(n, states_.at(n.id), git->second, param_grads);
      grads.erase(git);
      for (std::size_t slot = 0; slot < n.inputs.size(); ++slot) {
        const auto& src = n.inputs[slot];
        if (src == kGraphInput || input_grads[slot].empty()) continue;
        auto& gin = input_grads[slot];
        const auto& mask = states_.at(n.id).pass_masks[slot];
        if (!mask.empty())
          for (std::size_t i = 0; i < gin.numel(); ++i)
            if (!mask[i]) gin.f32()[i] = 0.0f;
        auto [pos, inserted] = grads.try_emplace(src, gin);
        if (!inserted)
          for (std::size_t i = 0; i < gin.numel(); ++i) pos->second.f32()[i] += gin.f32()[i];
      }
    }
  }

  std::map<std::string, Tensor> running_stats(double momentum) const {
    std::map<std::string, Tensor> out;
    if (mode_ != BnMode::BatchStats) return out;
    for (const auto& n : g_.nodes) {
      if (n.kind != LayerKind::BatchNorm || absorbed_.count(n.id)) continue;
      const auto& cache = states_.at(n.id).bn_cache;
      Tensor mean = g_.param(n, "mean"), var = g_.param(n, "var");
      const double count = static_cast<double>(states_.at(n.id).inputs[0].numel() / cache.mean.size());
      const double unbias = count > 1 ? count / (count - 1) : 1.0;
      for (std::size_t c = 0; c < cache.mean.size(); ++c) {
        mean.f32()[c] = static_cast<float>((1 - momentum) * mean.f32()[c] + momentum * cache.mean[c]);
        var.f32()[c] = static_cast<float>((1 - momentum) * var.f32()[c] + momentum * cache.var[c] * unbias);
      }
      out[n.param("mean")] = std::move(mean);
      out[n.param("var")] = std::move(var);
    }
    return out;
  }

 private:
  void check_input(const Tensor& x) const {
    if (x.dtype() != DType::F32 || x.rank() != g_.input_shape.size() + 1 ||
        !std::equal(g_.input_shape.begin(), g_.input_shape.end(), x.shape().begin() + 1)) {
      throw ValidationError("input shape " + shape_string(x.shape()) + " does not match graph input [N]" +
                            shape_string(g_.input_shape));
    }
  }

  Tensor compute(const LayerNode& n, NodeState& st) {
    const auto& x = st.inputs[0];
    switch (n.kind) {
      case LayerKind::Conv2D:
      case LayerKind::FullyConnected: {
        if (hooks_) st.effective = hooks_->effective_params(g_, n);
        const Tensor* w = &g_.param(n, "weight");
        const Tensor* b = optional_param(g_, n, "bias");
        if (st.effective) {
          w = &st.effective->weight;
          b = st.effective->bias ? &*st.effective->bias : nullptr;
          if (!st.effective->absorbed_bn.empty()) absorbed_.insert(st.effective->absorbed_bn);
        }
        return n.kind == LayerKind::Conv2D ? ops::conv2d(x, *w, b, geometry(n)) : ops::fully_connected(x, *w, b);
      }
      case LayerKind::BatchNorm:
        if (absorbed_.count(n.id)) return x;
        if (mode_ == BnMode::BatchStats)
          return ops::batchnorm_train(x, g_.param(n, "gamma"), g_.param(n, "beta"), n.eps, st.bn_cache);
        return ops::batchnorm_inference(x, g_.param(n, "gamma"), g_.param(n, "beta"), g_.param(n, "mean"),
                                        g_.param(n, "var"), n.eps);
      case LayerKind::ReLU: return ops::relu(x);
      case LayerKind::Add: return ops::add(x, st.inputs[1]);
      case LayerKind::AvgPool: return ops::avg_pool(x, n.kernel);
      case LayerKind::MaxPool: return ops::max_pool(x, n.kernel, &st.argmax);
      case LayerKind::Softmax: return ops::softmax(x.reshaped({x.dim(0), x.numel() / x.dim(0)}));
    }
    throw ValidationError("unsupported layer kind");
  }

  static void add_into(GradMap& grads, const std::string& name, const Tensor& g) {
    auto [it, inserted] = grads.try_emplace(name, g);
    if (!inserted)
      for (std::size_t i = 0; i < g.numel(); ++i) it->second.f32()[i] += g.f32()[i];
  }

  std::vector<Tensor> backward_node(const LayerNode& n, const NodeState& st, const Tensor& dy, GradMap& pg) {
    std::vector<Tensor> out(n.inputs.size());
    const bool need_dx = n.inputs[0] != kGraphInput;
    switch (n.kind) {
      case LayerKind::Conv2D:
      case LayerKind::FullyConnected: {
        const Tensor& w = st.effective ? st.effective->weight : g_.param(n, "weight");
        auto cg = n.kind == LayerKind::Conv2D ? ops::conv2d_backward(st.inputs[0], w, dy, geometry(n), need_dx)
                                              : ops::fully_connected_backward(st.inputs[0], w, dy, need_dx);
        if (st.effective) {
          hooks_->accumulate_param_grads(g_, n, *st.effective, cg.dw, cg.db, pg);
        } else {
          add_into(pg, n.param("weight"), cg.dw);
          if (n.has_param("bias")) add_into(pg, n.param("bias"), cg.db);
        }
        out[0] = std::move(cg.dx);
        break;
      }
      case LayerKind::BatchNorm: {
        if (absorbed_.count(n.id)) {
          out[0] = dy;
          break;
        }
        auto bg = mode_ == BnMode::BatchStats
                      ? ops::batchnorm_train_backward(dy, g_.param(n, "gamma"), st.bn_cache)
                      : ops::batchnorm_inference_backward(st.inputs[0], dy, g_.param(n, "gamma"),
                                                          g_.param(n, "mean"), g_.param(n, "var"), n.eps);
        add_into(pg, n.param("gamma"), bg.dgamma);
        add_into(pg, n.param("beta"), bg.dbeta);
        out[0] = std::move(bg.dx);
        break;
      }
      case LayerKind::ReLU: out[0] = ops::relu_backward(st.inputs[0], dy); break;
      case LayerKind::Add:
        out[0] = dy;
        out[1] = dy;
        break;
      case LayerKind::AvgPool: out[0] = ops::avg_pool_backward(dy, st.inputs[0].shape(), n.kernel); break;
      case LayerKind::MaxPool: out[0] = ops::max_pool_backward(dy, st.inputs[0].shape(), st.argmax); break;
      case LayerKind::Softmax: {
        // dx = y * (dy - sum(dy * y)) per row
        const auto& y = st.output;
        const auto rows = y.dim(0), k = y.dim(1);
        Tensor dx(y.shape(), DType::F32);
        for (std::size_t r = 0; r < rows; ++r) {
          double dot = 0.0;
          for (std::size_t i = 0; i < k; ++i) dot += static_cast<double>(dy.f32()[r * k + i]) * y.f32()[r * k + i];
          for (std::size_t i = 0; i < k; ++i)
            dx.f32()[r * k + i] = static_cast<float>(y.f32()[r * k + i] * (dy.f32()[r * k + i] - dot));
        }
        out[0] = dx.reshaped(st.inputs[0].shape());
        break;
      }
    }
    if (!need_dx) out[0] = Tensor();
    return out;
  }

  const ModelGraph& g_;
  BnMode mode_;
  const ExecutionHooks* hooks_;
  std::vector<std::string> order_;
  std::string output_id_;
  Tensor input_;
  std::map<std::string, NodeState> states_;
  std::set<std::string> absorbed_;
};

}  // namespace

ForwardResult forward(const ModelGraph& g, const Tensor& x, std::span<const std::string> sites,
                      const ExecutionHooks* hooks) {
  Tape tape(g, BnMode::Running, hooks);
  tape.run(x);
  ForwardResult r;
  r.output = tape.output();
  for (const auto& site : sites) {
    const auto arrow = site.find("->");
    const std::string producer = arrow == std::string::npos ? site : site.substr(0, arrow);
    if (producer != kGraphInput && g.find(producer) == nullptr)
      throw ValidationError("trace site '" + site + "' names an unknown node");
    r.trace[site] = tape.value_of(producer);
  }
  return r;
}

std::vector<std::string> trainable_params(const ModelGraph& g) {
  std::vector<std::string> names;
  for (const auto& n : g.nodes) {
    for (const auto* role : {"weight", "bias", "gamma", "beta"})
      if (n.has_param(role)) names.push_back(n.param(role));
  }
  return names;
}

LossGrads loss_and_grads(const ModelGraph& g, const Batch& batch, BnMode mode, const ExecutionHooks* hooks) {
  if (batch.labels.empty()) throw ValidationError("loss_and_grads needs a nonempty batch");
  Tape tape(g, mode, hooks);
  tape.run(batch.inputs);
  const auto logits_id = tape.logits_id();
  const auto& raw = tape.value_of(logits_id);
  LossGrads out;
  out.logits = raw.reshaped({raw.dim(0), raw.numel() / raw.dim(0)});
  Tensor dlogits;
  out.loss = ops::softmax_cross_entropy(out.logits, batch.labels, &dlogits);
  if (!std::isfinite(out.loss)) {
    const auto& bad = tape.first_non_finite();
    throw NumericError("non-finite loss" + (bad.empty() ? std::string() : " (first non-finite output at node '" + bad + "')"));
  }
  tape.backward(logits_id, dlogits.reshaped(raw.shape()), out.grads);
  for (const auto& name : trainable_params(g)) {
    if (!out.grads.count(name)) out.grads.emplace(name, Tensor(g.params.at(name).shape(), DType::F32));
  }
  out.running_stats = tape.running_stats(0.1);
  return out;
}

}  // namespace quantkit
