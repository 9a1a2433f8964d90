#include "quantkit/prune.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>

#include "graph_json.hpp"

namespace quantkit {

std::size_t PruneMask::size() const {
  std::size_t n = 0;
  for (const auto& [name, k] : keep) n += k.size();
  return n;
}

std::size_t PruneMask::kept() const {
  std::size_t n = 0;
  for (const auto& [name, k] : keep) n += static_cast<std::size_t>(std::count(k.begin(), k.end(), 1));
  return n;
}

std::vector<std::string> prunable_params(const ModelGraph& g) {
  std::vector<std::string> names;
  for (const auto& n : g.nodes)
    if (n.kind == LayerKind::Conv2D || n.kind == LayerKind::FullyConnected) names.push_back(n.param("weight"));
  std::sort(names.begin(), names.end());
  return names;
}

std::pair<ModelGraph, PruneMask> magnitude_prune(const ModelGraph& g, double sparsity) {
  if (!(sparsity >= 0.0 && sparsity < 1.0)) throw ValidationError("sparsity must be in [0, 1)");
  struct Entry {
    float magnitude;
    std::size_t tensor;
    std::size_t index;
  };
  const auto names = prunable_params(g);
  std::vector<Entry> entries;
  PruneMask mask;
  mask.sparsity = sparsity;
  for (std::size_t t = 0; t < names.size(); ++t) {
    const auto v = g.params.at(names[t]).f32();
    mask.keep[names[t]].assign(v.size(), 1);
    for (std::size_t i = 0; i < v.size(); ++i) entries.push_back({std::fabs(v[i]), t, i});
  }
  const auto k = static_cast<std::size_t>(std::floor(sparsity * static_cast<double>(entries.size())));
  std::nth_element(entries.begin(), entries.begin() + static_cast<std::ptrdiff_t>(k), entries.end(),
                   [](const Entry& a, const Entry& b) {
                     if (a.magnitude != b.magnitude) return a.magnitude < b.magnitude;
                     return std::tie(a.tensor, a.index) < std::tie(b.tensor, b.index);
                   });
  for (std::size_t e = 0; e < k; ++e) mask.keep[names[entries[e].tensor]][entries[e].index] = 0;
  return {apply_mask(g, mask), std::move(mask)};
}

void apply_mask_in_place(ModelGraph& g, const PruneMask& mask) {
  for (const auto& [name, keep] : mask.keep) {
    auto it = g.params.find(name);
    if (it == g.params.end()) throw ValidationError("mask refers to unknown tensor '" + name + "'");
    auto v = it->second.f32();
    if (v.size() != keep.size()) throw ValidationError("mask for '" + name + "' has the wrong size");
    for (std::size_t i = 0; i < v.size(); ++i)
      if (!keep[i]) v[i] = 0.0f;
  }
}

ModelGraph apply_mask(const ModelGraph& g, const PruneMask& mask) {
  ModelGraph out = g;
  apply_mask_in_place(out, mask);
  return out;
}

std::size_t count_nonzero(const ModelGraph& g, const PruneMask& mask) {
  std::size_t n = 0;
  for (const auto& [name, keep] : mask.keep)
    for (float v : g.params.at(name).f32()) n += v != 0.0f ? 1 : 0;
  return n;
}

bool masked_weights_are_zero(const QuantizedModel& qm, const PruneMask& mask) {
  for (const auto& [id, layer] : qm.layers) {
    auto it = mask.keep.find(qm.graph.node(id).param("weight"));
    if (it == mask.keep.end()) continue;
    for (std::size_t i = 0; i < it->second.size(); ++i)
      if (!it->second[i] && layer.w_int.value_at(i) != 0.0) return false;
  }
  return true;
}

void PipelineConfig::validate() const {
  if (!(sparsity >= 0.0 && sparsity < 1.0)) throw ValidationError("sparsity must be in [0, 1)");
  finetune.validate();
  calib.validate();
  qat.validate();
}

PipelineState run_pipeline(const ModelGraph& trained, const DatasetSplit& data, const PipelineConfig& cfg) {
  cfg.validate();
  PipelineState st;
  auto record = [&](const std::string& stage, std::size_t nnz, Accuracy acc) {
    st.metrics.push_back({stage, cfg.sparsity, nnz, acc});
    st.stage = stage;
  };
  const auto base_mask = magnitude_prune(trained, 0.0).second;
  record("M0", count_nonzero(trained, base_mask), evaluate(trained, data.eval));
  st.metrics.back().sparsity = 0.0;

  std::tie(st.m1, st.mask) = magnitude_prune(trained, cfg.sparsity);
  record("M1", count_nonzero(st.m1, st.mask), evaluate(st.m1, data.eval));

  TrainCallbacks masked;
  masked.after_step = [&](ModelGraph& m) { apply_mask_in_place(m, st.mask); };
  st.m2 = train(st.m1, data.train, cfg.finetune, masked);
  record("M2", count_nonzero(st.m2, st.mask), evaluate(st.m2, data.eval));
  if (cfg.aggressive_reference) {
    auto alt = cfg.finetune;
    alt.augmentation = Augmentation::AggressiveCrop;
    const auto m2a = train(st.m1, data.train, alt, masked);
    record("M2_aggressive", count_nonzero(m2a, st.mask), evaluate(m2a, data.eval));
    st.stage = "M2";
  }

  const auto planned = plan_placement(st.m2, cfg.placement);
  const auto folded = fold_batchnorms(planned);
  st.profile = calibrate(folded.graph, data.train, cfg.calib);
  st.m3 = build_quantized(folded.graph, st.profile, cfg.weights, cfg.accum);
  if (!masked_weights_are_zero(st.m3, st.mask)) throw NumericError("M3 has nonzero integers at pruned positions");
  record("M3", count_nonzero(st.m3.graph, st.mask), evaluate_quantized(st.m3, data.eval));

  auto qat_cfg = cfg.qat;
  qat_cfg.weight_bits = cfg.weights.bitwidth;
  st.m4_master = qat_finetune(planned, st.profile, data.train, qat_cfg,
                              [&](ModelGraph& m) { apply_mask_in_place(m, st.mask); });
  st.m4 = build_qat_model(st.m4_master, st.profile, cfg.accum);
  if (!masked_weights_are_zero(st.m4, st.mask)) throw NumericError("M4 has nonzero integers at pruned positions");
  record("M4", count_nonzero(st.m4.graph, st.mask), evaluate_quantized(st.m4, data.eval));
  return st;
}

std::filesystem::path write_pipeline_report(const PipelineState& state, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string());
  nlohmann::json rows = nlohmann::json::array();
  std::ostringstream csv, txt;
  csv << "stage,sparsity,nnz,top1,top5\n";
  txt << std::left << std::setw(14) << "stage" << std::right << std::setw(10) << "sparsity" << std::setw(10) << "nnz"
      << std::setw(10) << "top-1" << std::setw(10) << "top-5" << "\n";
  for (const auto& m : state.metrics) {
    const double top5 = m.accuracy.top5.value_or(std::nan(""));
    nlohmann::json row{{"stage", m.stage}, {"sparsity", m.sparsity}, {"nnz", m.nnz}, {"top1", m.accuracy.top1}};
    row["top5"] = m.accuracy.top5 ? nlohmann::json(*m.accuracy.top5) : nlohmann::json(nullptr);
    rows.push_back(std::move(row));
    csv << m.stage << "," << m.sparsity << "," << m.nnz << "," << m.accuracy.top1 << ",";
    if (m.accuracy.top5) csv << top5;
    csv << "\n";
    txt << std::left << std::setw(14) << m.stage << std::right << std::fixed << std::setprecision(2) << std::setw(10)
        << m.sparsity << std::setw(10) << m.nnz << std::setw(10) << 100.0 * m.accuracy.top1 << std::setw(10)
        << (m.accuracy.top5 ? 100.0 * top5 : 0.0) << "\n";
  }
  const auto json_path = dir / "report.json";
  detail::write_json_file({{"rows", rows}}, json_path);
  for (const auto& [name, body] : {std::pair{"report.csv", csv.str()}, std::pair{"report.txt", txt.str()}}) {
    std::ofstream out(dir / name, std::ios::trunc);
    if (!out) throw IoError("cannot write " + (dir / name).string());
    out << body;
  }
  return json_path;
}

}  // namespace quantkit
