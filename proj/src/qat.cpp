#include "quantkit/qat.hpp"

#include <cmath>
#include <cstdio>

#include "graph_json.hpp"

namespace quantkit {

Tensor fake_quant_forward(const Tensor& x, const QuantParams& p) { return dequantize_tensor(quantize_tensor(x, p), p); }

Tensor fake_quant_backward(const Tensor& grad, const Tensor& x, const QuantParams& p) {
  if (grad.shape() != x.shape()) throw ValidationError("fake_quant_backward: shape mismatch");
  p.validate();
  const std::size_t channels = p.granularity == Granularity::LayerWise ? 1 : x.dim(0);
  const std::size_t per = x.numel() / channels;
  Tensor out = grad;
  auto o = out.f32();
  const auto xv = x.f32();
  for (std::size_t c = 0; c < channels; ++c)
    for (std::size_t i = c * per; i < (c + 1) * per; ++i)
      if (!within_quant_range(xv[i], p.scale_for(c), p.qmin(), p.qmax())) o[i] = 0.0f;
  return out;
}

namespace {

struct Folding {
  Tensor w_used;  // folded (and possibly fake-quantized) weights
  Tensor b_hat;
  std::vector<double> sigma;
  std::vector<std::uint8_t> pass;
};

Folding fold_and_quantize(const Tensor& w, const Tensor* bias, const BNParams& bn, const std::optional<QuantParams>& s_w) {
  std::optional<std::vector<double>> scales;
  if (s_w) scales = s_w->scales;
  auto f = fold_bn(w, bias, bn, scales);
  Folding out;
  for (std::size_t o = 0; o < w.dim(0); ++o)
    out.sigma.push_back(std::sqrt(static_cast<double>(bn.var.f32()[o]) + static_cast<double>(bn.eps)));
  out.b_hat = std::move(f.b_hat);
  if (s_w) {
    QuantParams p{f.s_w_hat, s_w->bitwidth, Signedness::Signed, Granularity::ChannelWise};
    const std::size_t per = w.numel() / w.dim(0);
    out.pass.resize(w.numel());
    // W_hat / S_W_hat == sign(gamma) W / S_W; the unfolded side avoids float rounding of W_hat
    const auto wv = w.f32();
    for (std::size_t i = 0; i < wv.size(); ++i)
      out.pass[i] = within_quant_range(wv[i], s_w->scale_for(i / per), p.qmin(), p.qmax()) ? 1 : 0;
    out.w_used = fake_quant_forward(f.w_hat, p);
  } else {
    out.w_used = std::move(f.w_hat);
  }
  return out;
}

struct UnfoldedGrads {
  Tensor d_weight, d_bias, d_gamma, d_beta;
};

UnfoldedGrads unfold_grads(const Tensor& w, const Tensor* bias, const BNParams& bn, const Folding& f,
                           const Tensor& d_w_hat, const Tensor& d_b_hat) {
  const std::size_t out = w.dim(0), per = w.numel() / out;
  UnfoldedGrads g{Tensor(w.shape(), DType::F32), Tensor({out}, DType::F32), Tensor({out}, DType::F32),
                  Tensor({out}, DType::F32)};
  const auto wv = w.f32(), dwh = d_w_hat.f32(), dbh = d_b_hat.f32();
  const auto gamma = bn.gamma.f32(), mean = bn.mean.f32();
  auto dw = g.d_weight.f32(), db = g.d_bias.f32(), dgamma = g.d_gamma.f32(), dbeta = g.d_beta.f32();
  for (std::size_t o = 0; o < out; ++o) {
    const double s = f.sigma[o];
    double dg = 0.0;
    for (std::size_t i = o * per; i < (o + 1) * per; ++i) {
      const double d = f.pass.empty() || f.pass[i] ? static_cast<double>(dwh[i]) : 0.0;
      dw[i] = static_cast<float>(d * gamma[o] / s);
      dg += d * wv[i] / s;
    }
    const double b = bias != nullptr ? bias->f32()[o] : 0.0;
    dg += dbh[o] * (b - mean[o]) / s;
    dgamma[o] = static_cast<float>(dg);
    dbeta[o] = dbh[o];
    db[o] = static_cast<float>(dbh[o] * gamma[o] / s);
  }
  return g;
}

}  // namespace

FoldedLayerGrads fold_forward_unfold_backward(const Tensor& w, const Tensor* bias, const BNParams& bn,
                                              ops::ConvGeometry geo, const Tensor& x, const Tensor& dy,
                                              const std::optional<QuantParams>& s_w) {
  const auto f = fold_and_quantize(w, bias, bn, s_w);
  FoldedLayerGrads r;
  r.output = ops::conv2d(x, f.w_used, &f.b_hat, geo);
  if (dy.shape() != r.output.shape()) throw ValidationError("upstream gradient shape does not match the output");
  const auto cg = ops::conv2d_backward(x, f.w_used, dy, geo, false);
  auto u = unfold_grads(w, bias, bn, f, cg.dw, cg.db);
  r.d_weight = std::move(u.d_weight);
  r.d_gamma = std::move(u.d_gamma);
  r.d_beta = std::move(u.d_beta);
  return r;
}

void QatConfig::validate() const {
  if (epochs < 0) throw ValidationError("QAT epoch count must be non-negative");
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw ValidationError("QAT learning rate must be positive");
  if (!(decay_factor > 0.0)) throw ValidationError("QAT decay factor must be positive");
  if (batch_size == 0) throw ValidationError("QAT batch size must be positive");
  if (weight_bits < 2 || weight_bits > 8) throw ValidationError("QAT weight bits must be in [2, 8]");
}

TrainConfig QatConfig::train_config() const {
  TrainConfig t;
  t.learning_rate = learning_rate;
  t.decay_factor = decay_factor;
  t.decay_epochs = {decay_epoch};
  t.momentum = momentum;
  t.batch_size = batch_size;
  t.epochs = epochs;
  t.seed = seed;
  t.augmentation = augmentation;
  t.bn_mode = BnMode::Running;
  return t;
}

QatConfig read_qat_config(const std::filesystem::path& path) {
  const auto j = detail::read_json_file(path);
  QatConfig c;
  try {
    c.epochs = j.value("epochs", c.epochs);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.decay_factor = j.value("decay_factor", c.decay_factor);
    c.decay_epoch = j.value("decay_epoch", c.decay_epoch);
    c.momentum = j.value("momentum", c.momentum);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.augmentation = parse_augmentation(j.value("augmentation", std::string(augmentation_name(c.augmentation))));
    c.seed = j.value("seed", c.seed);
    c.weight_bits = j.value("weight_bits", c.weight_bits);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  c.validate();
  return c;
}

QatHooks::QatHooks(const ModelGraph& g, const CalibrationProfile& profile,
                   std::map<std::string, QuantParams> weight_scales, bool quantize_weights, bool quantize_activations)
    : profile_(profile),
      weight_scales_(std::move(weight_scales)),
      quantize_weights_(quantize_weights),
      quantize_activations_(quantize_activations) {
  for (const auto& n : g.nodes) {
    if (n.kind != LayerKind::BatchNorm) continue;
    const auto* layer = g.find(n.inputs.at(0));
    if (layer == nullptr || (layer->kind != LayerKind::Conv2D && layer->kind != LayerKind::FullyConnected) ||
        g.consumers(layer->id).size() != 1)
      continue;
    folded_id_[n.id] = layer->id;
    bn_of_[layer->id] = n.id;
  }
}

void QatHooks::transform_edge(std::string_view producer, const LayerNode& consumer, Tensor& activation,
                              std::vector<std::uint8_t>& pass_mask) const {
  if (!quantize_activations_) return;
  std::string p(producer);
  if (auto it = folded_id_.find(p); it != folded_id_.end()) p = it->second;
  auto it = profile_.sites.find(p + "->" + consumer.id);
  if (it == profile_.sites.end()) return;
  const auto& qp = it->second.params;
  const auto v = activation.f32();
  pass_mask.resize(v.size());
  for (std::size_t i = 0; i < v.size(); ++i)
    pass_mask[i] = within_quant_range(v[i], qp.scales[0], qp.qmin(), qp.qmax()) ? 1 : 0;
  activation = fake_quant_forward(activation, qp);
}

std::optional<EffectiveParams> QatHooks::effective_params(const ModelGraph& g, const LayerNode& layer) const {
  const auto bn = bn_of_.find(layer.id);
  const auto scale = weight_scales_.find(layer.id);
  const bool fq = quantize_weights_ && scale != weight_scales_.end();
  if (bn == bn_of_.end() && !fq) return std::nullopt;
  const Tensor& w = g.param(layer, "weight");
  const Tensor* bias = layer.has_param("bias") ? &g.param(layer, "bias") : nullptr;
  EffectiveParams eff;
  if (bn != bn_of_.end()) {
    auto f = fold_and_quantize(w, bias, bn_params(g, g.node(bn->second)), fq ? std::optional(scale->second) : std::nullopt);
    eff.weight = std::move(f.w_used);
    eff.bias = std::move(f.b_hat);
    eff.absorbed_bn = bn->second;
    eff.weight_pass = std::move(f.pass);
    return eff;
  }
  const auto& p = scale->second;
  const std::size_t per = w.numel() / w.dim(0);
  eff.weight = fake_quant_forward(w, p);
  if (bias != nullptr) eff.bias = *bias;
  eff.weight_pass.resize(w.numel());
  for (std::size_t i = 0; i < w.numel(); ++i)
    eff.weight_pass[i] = within_quant_range(w.f32()[i], p.scale_for(i / per), p.qmin(), p.qmax()) ? 1 : 0;
  return eff;
}

void QatHooks::accumulate_param_grads(const ModelGraph& g, const LayerNode& layer, const EffectiveParams& eff,
                                      const Tensor& grad_weight, const Tensor& grad_bias, GradMap& grads) const {
  auto add = [&](const std::string& name, const Tensor& t) {
    auto [it, inserted] = grads.try_emplace(name, t);
    if (!inserted)
      for (std::size_t i = 0; i < t.numel(); ++i) it->second.f32()[i] += t.f32()[i];
  };
  const Tensor& w = g.param(layer, "weight");
  const Tensor* bias = layer.has_param("bias") ? &g.param(layer, "bias") : nullptr;
  if (!eff.absorbed_bn.empty()) {
    const auto& bn_node = g.node(eff.absorbed_bn);
    const auto bn = bn_params(g, bn_node);
    Folding f;
    for (std::size_t o = 0; o < w.dim(0); ++o)
      f.sigma.push_back(std::sqrt(static_cast<double>(bn.var.f32()[o]) + static_cast<double>(bn.eps)));
    f.pass = eff.weight_pass;
    auto u = unfold_grads(w, bias, bn, f, grad_weight, grad_bias);
    add(layer.param("weight"), u.d_weight);
    if (bias != nullptr) add(layer.param("bias"), u.d_bias);
    add(bn_node.param("gamma"), u.d_gamma);
    add(bn_node.param("beta"), u.d_beta);
    return;
  }
  Tensor dw = grad_weight;
  if (!eff.weight_pass.empty())
    for (std::size_t i = 0; i < dw.numel(); ++i)
      if (!eff.weight_pass[i]) dw.f32()[i] = 0.0f;
  add(layer.param("weight"), dw);
  if (bias != nullptr) add(layer.param("bias"), grad_bias);
}

std::map<std::string, QuantParams> frozen_weight_scales(const ModelGraph& g, int bits) {
  std::map<std::string, QuantParams> out;
  for (const auto& n : g.nodes)
    if ((n.kind == LayerKind::Conv2D || n.kind == LayerKind::FullyConnected) && n.quantize)
      out[n.id] = minmax_scale(g.param(n, "weight"), bits, Granularity::ChannelWise);
  return out;
}

QatResult qat_finetune(const ModelGraph& g, const CalibrationProfile& profile, const Dataset& data, const QatConfig& cfg,
                       const std::function<void(ModelGraph&)>& after_step) {
  cfg.validate();
  if (profile.sites.empty()) throw ValidationError("QAT needs a post-training calibration profile");
  QatResult r{g, frozen_weight_scales(g, cfg.weight_bits)};
  const bool active = cfg.quantize_weights || cfg.quantize_activations;
  QatHooks hooks(g, profile, r.weight_scales, cfg.quantize_weights, cfg.quantize_activations);
  TrainCallbacks cb;
  if (active) cb.hooks = &hooks;
  cb.after_step = after_step;
  if (!cfg.checkpoint_dir.empty()) {
    cb.after_epoch = [&](int epoch, const ModelGraph& m) {
      char name[32];
      std::snprintf(name, sizeof name, "epoch_%03d", epoch + 1);
      save_model(m, cfg.checkpoint_dir / name);
    };
  }
  r.graph = train(g, data, cfg.train_config(), cb);
  return r;
}

QuantizedModel build_qat_model(const QatResult& r, const CalibrationProfile& profile, AccumMode accum) {
  auto folded = fold_batchnorms(r.graph, r.weight_scales);
  auto overrides = folded.weight_scales;
  int bits = 8;
  for (const auto& [id, p] : r.weight_scales) {
    overrides.try_emplace(id, p.scales);
    bits = p.bitwidth;
  }
  return build_quantized(folded.graph, profile, {bits, Granularity::ChannelWise}, accum, overrides);
}

}  // namespace quantkit
