#include "quantkit/quantize.hpp"

#include <algorithm>
#include <cmath>
#include <functional>

#include "graph_json.hpp"

namespace quantkit {

BNParams bn_params(const ModelGraph& g, const LayerNode& bn) {
  if (bn.kind != LayerKind::BatchNorm) throw ValidationError("node '" + bn.id + "' is not a BatchNorm");
  return {g.param(bn, "gamma"), g.param(bn, "beta"), g.param(bn, "mean"), g.param(bn, "var"), bn.eps};
}

FoldedConv fold_bn(const Tensor& w, const Tensor* bias, const BNParams& bn,
                   const std::optional<std::vector<double>>& s_w) {
  const std::size_t out = w.dim(0);
  for (const Tensor* t : {&bn.gamma, &bn.beta, &bn.mean, &bn.var})
    if (t->numel() != out)
      throw ValidationError("BatchNorm has " + std::to_string(t->numel()) + " channels, layer has " + std::to_string(out));
  if (bias != nullptr && bias->numel() != out) throw ValidationError("bias length does not match output channels");
  if (s_w && s_w->size() != 1 && s_w->size() != out) throw ValidationError("S_W must have 1 or C_out entries");

  const auto gamma = bn.gamma.f32(), beta = bn.beta.f32(), mean = bn.mean.f32(), var = bn.var.f32();
  const std::size_t per = w.numel() / out;
  FoldedConv f{Tensor(w.shape(), DType::F32), Tensor({out}, DType::F32), {}};
  auto wi = w.f32();
  auto wo = f.w_hat.f32();
  auto bo = f.b_hat.f32();
  for (std::size_t o = 0; o < out; ++o) {
    const double denom = static_cast<double>(var[o]) + static_cast<double>(bn.eps);
    if (!(denom > 0.0)) throw NumericError("var + eps <= 0 in channel " + std::to_string(o));
    const double sigma = std::sqrt(denom);
    const double g = gamma[o];
    for (std::size_t i = o * per; i < (o + 1) * per; ++i) wo[i] = static_cast<float>(g * wi[i] / sigma);
    const double b = bias != nullptr ? bias->f32()[o] : 0.0;
    bo[o] = static_cast<float>(beta[o] - g * mean[o] / sigma + g * b / sigma);
    if (s_w) f.s_w_hat.push_back(std::fabs(g) * (*s_w)[s_w->size() == 1 ? 0 : o] / sigma);
  }
  return f;
}

FoldResult fold_batchnorms(const ModelGraph& g, const std::map<std::string, QuantParams>& weight_scales) {
  FoldResult r{g, {}, {}};
  ModelGraph& out = r.graph;
  for (const auto& bn : g.nodes) {
    if (bn.kind != LayerKind::BatchNorm) continue;
    const auto* layer = g.find(bn.inputs.at(0));
    if (layer == nullptr ||
        (layer->kind != LayerKind::Conv2D && layer->kind != LayerKind::FullyConnected) ||
        g.consumers(layer->id).size() != 1)
      continue;
    std::optional<std::vector<double>> s_w;
    if (auto it = weight_scales.find(layer->id); it != weight_scales.end()) s_w = it->second.scales;
    const Tensor* bias = layer->has_param("bias") ? &g.param(*layer, "bias") : nullptr;
    auto folded = fold_bn(g.param(*layer, "weight"), bias, bn_params(g, bn), s_w);

    auto& target = out.node(layer->id);
    out.params[target.param("weight")] = std::move(folded.w_hat);
    if (!target.has_param("bias")) target.params["bias"] = target.id + ".bias";
    out.params[target.param("bias")] = std::move(folded.b_hat);
    if (s_w) r.weight_scales[layer->id] = std::move(folded.s_w_hat);
    for (const auto& [role, name] : bn.params) out.params.erase(name);
    r.absorbed[bn.id] = layer->id;
  }
  std::erase_if(out.nodes, [&](const LayerNode& n) { return r.absorbed.count(n.id) > 0; });
  for (auto& n : out.nodes)
    for (auto& in : n.inputs)
      if (auto it = r.absorbed.find(in); it != r.absorbed.end()) in = it->second;
  std::erase_if(out.quant_sites, [&](const QuantSiteAnnotation& s) { return r.absorbed.count(s.consumer) > 0; });
  for (auto& s : out.quant_sites)
    if (auto it = r.absorbed.find(s.producer); it != r.absorbed.end()) s.producer = it->second;
  out.validate();
  return r;
}

namespace {

bool quantizable(const LayerNode& n) {
  return (n.kind == LayerKind::Conv2D || n.kind == LayerKind::FullyConnected) && n.quantize;
}

/// Whether the output of `id` is non-negative by construction.
bool nonnegative(const ModelGraph& g, const std::string& id) {
  const auto* n = g.find(id);
  if (n == nullptr) return false;
  switch (n->kind) {
    case LayerKind::ReLU:
    case LayerKind::Softmax: return true;
    case LayerKind::MaxPool:
    case LayerKind::AvgPool: return nonnegative(g, n->inputs.at(0));
    default: return false;
  }
}

}  // namespace

ModelGraph plan_placement(const ModelGraph& g, const PlacementOptions& options) {
  g.validate();
  ModelGraph out = g;
  out.quant_sites.clear();
  for (const auto& n : g.nodes) {
    const bool add = n.kind == LayerKind::Add;
    if (!add && !quantizable(n)) continue;
    for (const auto& in : n.inputs) {
      QuantSiteAnnotation s{in, n.id, true, Signedness::Signed, SiteReason::DefaultSigned};
      if (!options.signed_only && nonnegative(g, in)) {
        s.signedness = Signedness::Unsigned;
        s.reason = SiteReason::AfterReluUnsigned;
      }
      if (add && !options.quantize_add_inputs) {
        s.quantize = false;
        s.signedness = Signedness::Signed;
        s.reason = SiteReason::AddInputSkipped;
      }
      out.quant_sites.push_back(std::move(s));
    }
  }
  return out;
}

void check_placement_guideline(const ModelGraph& g) {
  for (const auto& s : g.quant_sites) {
    if (!s.quantize) continue;
    const auto* consumer = g.find(s.consumer);
    const auto* producer = g.find(s.producer);
    if (consumer != nullptr && consumer->kind == LayerKind::Add)
      throw ValidationError("quantized edge " + s.site_id() + " enters an Add");
    if (producer != nullptr && producer->kind == LayerKind::ReLU && s.signedness != Signedness::Unsigned)
      throw ValidationError("quantized ReLU output " + s.site_id() + " is signed");
  }
}

FoldResult prepare_ptq(const ModelGraph& g, const PlacementOptions& options) {
  return fold_batchnorms(plan_placement(g, options));
}

Tensor quantize_tensor(const Tensor& x, const QuantParams& p) {
  p.validate();
  const auto v = x.f32();
  const std::size_t channels = p.granularity == Granularity::LayerWise ? 1 : x.dim(0);
  if (p.granularity == Granularity::ChannelWise && p.scales.size() != channels)
    throw ValidationError("channel-wise params have " + std::to_string(p.scales.size()) + " scales for " +
                          std::to_string(channels) + " channels");
  const std::size_t per = v.size() / channels;
  const int lo = p.qmin(), hi = p.qmax();
  auto fill = [&](auto& q) {
    for (std::size_t c = 0; c < channels; ++c) {
      const double s = p.scale_for(c);
      for (std::size_t i = c * per; i < (c + 1) * per; ++i)
        q[i] = static_cast<std::remove_reference_t<decltype(q[0])>>(quantize_value(v[i], s, lo, hi));
    }
  };
  if (p.signedness == Signedness::Signed) {
    std::vector<std::int8_t> q(v.size());
    fill(q);
    return Tensor(x.shape(), std::move(q));
  }
  std::vector<std::uint8_t> q(v.size());
  fill(q);
  return Tensor(x.shape(), std::move(q));
}

Tensor dequantize_tensor(const Tensor& q, const QuantParams& p) {
  p.validate();
  const std::size_t channels = p.granularity == Granularity::LayerWise ? 1 : q.dim(0);
  const std::size_t per = q.numel() / channels;
  Tensor out(q.shape(), DType::F32);
  auto o = out.f32();
  for (std::size_t c = 0; c < channels; ++c) {
    const double s = p.scale_for(c);
    for (std::size_t i = c * per; i < (c + 1) * per; ++i)
      o[i] = dequantize_value(static_cast<int>(q.value_at(i)), s);
  }
  return out;
}

std::string_view accum_mode_name(AccumMode m) { return m == AccumMode::Int16 ? "int16" : "int32"; }

AccumMode parse_accum_mode(std::string_view name) {
  if (name == "int16") return AccumMode::Int16;
  if (name == "int32") return AccumMode::Int32;
  throw ValidationError("unknown accumulation mode '" + std::string(name) + "'");
}

void check_accum_contract(AccumMode mode, int abits, int wbits) {
  if (mode == AccumMode::Int16 && abits + wbits > 14)
    throw ValidationError("INT16 accumulation needs activation + weight bits <= 14, got " + std::to_string(abits) +
                          " + " + std::to_string(wbits));
}

namespace {

std::vector<std::int32_t> widen(const Tensor& t) {
  if (t.dtype() == DType::F32) throw ValidationError("integer kernel received a floating-point tensor");
  std::vector<std::int32_t> v(t.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<std::int32_t>(t.value_at(i));
  return v;
}

}  // namespace

QuantizedConvResult quantized_conv(const Tensor& a_int, const Tensor& w_int, double s_a, const std::vector<double>& s_w,
                                   const Tensor* bias, ops::ConvGeometry geo, AccumMode mode) {
  if (a_int.rank() != 4 || w_int.rank() != 4) throw ValidationError("quantized_conv expects NCHW and OIHW tensors");
  const std::size_t n = a_int.dim(0), c = a_int.dim(1), h = a_int.dim(2), w = a_int.dim(3);
  const std::size_t oc = w_int.dim(0), icg = w_int.dim(1), kh = w_int.dim(2), kw = w_int.dim(3);
  const auto groups = static_cast<std::size_t>(geo.groups);
  if (groups == 0 || c % groups != 0 || oc % groups != 0 || icg != c / groups)
    throw ValidationError("quantized_conv: channel/group mismatch");
  if (s_w.size() != 1 && s_w.size() != oc) throw ValidationError("quantized_conv: S_W must have 1 or C_out entries");
  if (bias != nullptr && bias->numel() != oc) throw ValidationError("quantized_conv: bias length mismatch");
  const auto pad = static_cast<std::ptrdiff_t>(geo.padding);
  const auto stride = static_cast<std::size_t>(geo.stride);
  const std::size_t oh = (h + 2 * geo.padding - kh) / stride + 1, ow = (w + 2 * geo.padding - kw) / stride + 1;
  const auto a = widen(a_int), wt = widen(w_int);
  const std::size_t ocg = oc / groups;

  QuantizedConvResult r{Tensor({n, oc, oh, ow}, DType::F32), {}};
  auto out = r.output.f32();
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t o = 0; o < oc; ++o) {
      const std::size_t g = o / ocg;
      const double scale = s_a * s_w[s_w.size() == 1 ? 0 : o];
      const double bo = bias != nullptr ? bias->f32()[o] : 0.0;
      for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t x = 0; x < ow; ++x) {
          SaturatingAccumulator acc(mode);
          for (std::size_t ci = 0; ci < icg; ++ci) {
            const std::size_t cin = g * icg + ci;
            for (std::size_t ky = 0; ky < kh; ++ky) {
              const auto iy = static_cast<std::ptrdiff_t>(y * stride + ky) - pad;
              if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
              for (std::size_t kx = 0; kx < kw; ++kx) {
                const auto ix = static_cast<std::ptrdiff_t>(x * stride + kx) - pad;
                if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
                const auto av = a[((b * c + cin) * h + static_cast<std::size_t>(iy)) * w + static_cast<std::size_t>(ix)];
                const auto wv = wt[((o * icg + ci) * kh + ky) * kw + kx];
                acc.add(static_cast<std::int64_t>(av) * wv);
              }
            }
          }
          r.audit.saturated += acc.saturated();
          r.audit.total += acc.steps();
          out[((b * oc + o) * oh + y) * ow + x] = static_cast<float>(static_cast<double>(acc.value()) * scale + bo);
        }
    }
  return r;
}

QuantizedConvResult quantized_fc(const Tensor& a_int, const Tensor& w_int, double s_a, const std::vector<double>& s_w,
                                 const Tensor* bias, AccumMode mode) {
  if (w_int.rank() != 2) throw ValidationError("quantized_fc expects [O, F] weights");
  const std::size_t n = a_int.dim(0), f = a_int.numel() / n;
  if (f != w_int.dim(1)) throw ValidationError("quantized_fc: feature count mismatch");
  auto r = quantized_conv(a_int.reshaped({n, f, 1, 1}), w_int.reshaped({w_int.dim(0), f, 1, 1}), s_a, s_w, bias, {}, mode);
  r.output = r.output.reshaped({n, w_int.dim(0)});
  return r;
}

namespace {

const Tensor* optional_bias(const ModelGraph& g, const LayerNode& n) {
  return n.has_param("bias") ? &g.param(n, "bias") : nullptr;
}

}  // namespace

QuantizedModel build_quantized(const ModelGraph& folded, const CalibrationProfile& profile, const WeightQuantConfig& wcfg,
                               AccumMode accum,
                               const std::map<std::string, std::vector<double>>& weight_scale_overrides) {
  folded.validate();
  if (wcfg.bitwidth < 2 || wcfg.bitwidth > 8) throw ValidationError("weight bitwidth must be in [2, 8]");
  for (const auto& n : folded.nodes)
    if (n.kind == LayerKind::BatchNorm) throw ValidationError("fold BatchNorm '" + n.id + "' before quantizing");

  QuantizedModel qm;
  qm.graph = folded;
  qm.accum = accum;
  for (const auto& s : folded.quant_sites) {
    if (!s.quantize) continue;
    if (!profile.sites.count(s.site_id())) throw ValidationError("calibration profile lacks site " + s.site_id());
    qm.activations[s.site_id()] = profile.params(s.site_id());
  }
  // Quantized Add inputs share one grid so the sum stays on a single scale.
  for (const auto& n : folded.nodes) {
    if (n.kind != LayerKind::Add) continue;
    std::vector<std::string> ids;
    for (const auto& in : n.inputs)
      if (const auto* s = folded.site(in, n.id); s != nullptr && s->quantize) ids.push_back(s->site_id());
    if (ids.size() < 2) continue;
    // widest clipping threshold of the inputs, spread over the shared grid's levels
    QuantParams shared = qm.activations.at(ids[0]);
    double threshold = 0.0;
    for (const auto& id : ids) {
      const auto& p = qm.activations.at(id);
      threshold = std::max(threshold, p.scales.at(0) * p.qmax());
      if (p.signedness == Signedness::Signed) shared.signedness = Signedness::Signed;
    }
    shared.scales = {threshold / shared.qmax()};
    for (const auto& id : ids) qm.activations[id] = shared;
  }

  for (const auto& n : folded.nodes) {
    if (!quantizable(n)) continue;
    const auto* site = folded.site(n.inputs.at(0), n.id);
    if (site == nullptr || !site->quantize) throw ValidationError("layer '" + n.id + "' has no quantized input site");
    const auto& act = qm.activations.at(site->site_id());
    check_accum_contract(accum, act.bitwidth, wcfg.bitwidth);

    const Tensor& w = folded.param(n, "weight");
    QuantParams wp;
    if (auto it = weight_scale_overrides.find(n.id); it != weight_scale_overrides.end()) {
      wp.scales = it->second;
      wp.bitwidth = wcfg.bitwidth;
      wp.signedness = Signedness::Signed;
      wp.granularity = it->second.size() == 1 ? Granularity::LayerWise : Granularity::ChannelWise;
    } else {
      wp = minmax_scale(w, wcfg.bitwidth, wcfg.granularity);
    }
    qm.layers[n.id] = {quantize_tensor(w, wp), wp, site->site_id()};
  }
  return qm;
}

OverflowAudit QuantizedRun::total() const {
  OverflowAudit t;
  for (const auto& [id, a] : audits) t += a;
  return t;
}

QuantizedRun run_quantized(const QuantizedModel& qm, const Tensor& x) {
  const ModelGraph& g = qm.graph;
  Shape expect{x.dim(0)};
  expect.insert(expect.end(), g.input_shape.begin(), g.input_shape.end());
  if (x.shape() != expect) throw ValidationError("input shape " + shape_string(x.shape()) + " does not match model");

  QuantizedRun run;
  std::map<std::string, Tensor> values;
  values.emplace(std::string(kGraphInput), x);
  auto edge_value = [&](const std::string& producer, const LayerNode& consumer) {
    const Tensor& v = values.at(producer);
    const auto* site = g.site(producer, consumer.id);
    if (site == nullptr || !site->quantize || qm.layers.count(consumer.id)) return v;
    const auto& p = qm.activations.at(site->site_id());
    return dequantize_tensor(quantize_tensor(v, p), p);
  };
  for (const auto& id : topo_order(g)) {
    const auto& n = g.node(id);
    Tensor y;
    switch (n.kind) {
      case LayerKind::Conv2D:
      case LayerKind::FullyConnected: {
        const Tensor& in = values.at(n.inputs[0]);
        const Tensor* bias = optional_bias(g, n);
        if (auto it = qm.layers.find(n.id); it != qm.layers.end()) {
          const auto& layer = it->second;
          const auto& act = qm.activations.at(layer.input_site);
          const Tensor a_int = quantize_tensor(in, act);
          auto r = n.kind == LayerKind::Conv2D
                       ? quantized_conv(a_int, layer.w_int, act.scales[0], layer.weight.scales, bias,
                                        {n.stride, n.padding, n.groups}, qm.accum)
                       : quantized_fc(a_int, layer.w_int, act.scales[0], layer.weight.scales, bias, qm.accum);
          run.audits[n.id] = r.audit;
          y = std::move(r.output);
        } else {
          y = n.kind == LayerKind::Conv2D ? ops::conv2d(in, g.param(n, "weight"), bias, {n.stride, n.padding, n.groups})
                                          : ops::fully_connected(in, g.param(n, "weight"), bias);
        }
        break;
      }
      case LayerKind::Add: y = ops::add(edge_value(n.inputs[0], n), edge_value(n.inputs[1], n)); break;
      case LayerKind::ReLU: y = ops::relu(edge_value(n.inputs[0], n)); break;
      case LayerKind::AvgPool: y = ops::avg_pool(edge_value(n.inputs[0], n), n.kernel); break;
      case LayerKind::MaxPool: y = ops::max_pool(edge_value(n.inputs[0], n), n.kernel, nullptr); break;
      case LayerKind::Softmax: {
        const Tensor v = edge_value(n.inputs[0], n);
        y = ops::softmax(v.reshaped({v.dim(0), v.numel() / v.dim(0)}));
        break;
      }
      case LayerKind::BatchNorm: throw ValidationError("unfolded BatchNorm '" + n.id + "' in quantized model");
    }
    for (float v : y.f32())
      if (!std::isfinite(v)) throw NumericError("non-finite value produced by layer '" + n.id + "'");
    values[id] = std::move(y);
  }
  run.output = std::move(values.at(g.output_id()));
  return run;
}

Accuracy evaluate_quantized(const QuantizedModel& qm, const Dataset& data) {
  return evaluate_with(data, [&](const Tensor& x) { return run_quantized(qm, x).output; });
}

void save_quantized(const QuantizedModel& qm, const std::filesystem::path& dir) {
  auto manifest = detail::write_graph_manifest(qm.graph, dir);
  nlohmann::json q{{"accum", accum_mode_name(qm.accum)}};
  auto& acts = q["activations"] = nlohmann::json::object();
  for (const auto& [site, p] : qm.activations) acts[site] = detail::quant_params_to_json(p);
  auto& layers = q["layers"] = nlohmann::json::object();
  for (const auto& [id, layer] : qm.layers) {
    const auto rel = std::filesystem::path("params") / (id + ".wint.qt");
    save_tensor(layer.w_int, dir / rel);
    layers[id] = {{"weight", detail::quant_params_to_json(layer.weight)},
                  {"w_int", rel.generic_string()},
                  {"input_site", layer.input_site}};
  }
  manifest["quantization"] = std::move(q);
  detail::write_json_file(manifest, dir / "model.json");
}

QuantizedModel load_quantized(const std::filesystem::path& path) {
  const auto dir = std::filesystem::is_directory(path) ? path : path.parent_path();
  const auto manifest = detail::read_json_file(dir / "model.json");
  QuantizedModel qm;
  qm.graph = detail::read_graph_manifest(manifest, dir);
  try {
    const auto& q = manifest.at("quantization");
    qm.accum = parse_accum_mode(q.at("accum").get<std::string>());
    for (const auto& [site, p] : q.at("activations").items()) qm.activations[site] = detail::quant_params_from_json(p);
    for (const auto& [id, jl] : q.at("layers").items()) {
      detail::check_param_name(id);
      QuantizedLayer layer;
      layer.weight = detail::quant_params_from_json(jl.at("weight"));
      layer.w_int = load_tensor(dir / jl.at("w_int").get<std::string>());
      layer.input_site = jl.at("input_site").get<std::string>();
      qm.layers[id] = std::move(layer);
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("malformed quantization section: " + std::string(e.what()));
  }
  return qm;
}

}  // namespace quantkit
