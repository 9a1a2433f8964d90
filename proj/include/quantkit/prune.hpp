#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "quantkit/calib.hpp"
#include "quantkit/nnexec.hpp"
#include "quantkit/qat.hpp"
#include "quantkit/quantize.hpp"

namespace quantkit {

/// Keep flags (1 = keep) per Conv2D/FC weight tensor.
struct PruneMask {
  std::map<std::string, std::vector<std::uint8_t>> keep;
  double sparsity = 0.0;

  std::size_t size() const;
  std::size_t kept() const;
};

/// Names of prunable tensors: Conv2D and FullyConnected weights.
std::vector<std::string> prunable_params(const ModelGraph& g);

/// Zeroes the floor(s * N) smallest-magnitude weights over all prunable tensors;
/// ties go to the lower position in name-then-flat-index order.
std::pair<ModelGraph, PruneMask> magnitude_prune(const ModelGraph& g, double sparsity);

ModelGraph apply_mask(const ModelGraph& g, const PruneMask& mask);
void apply_mask_in_place(ModelGraph& g, const PruneMask& mask);

/// Nonzero count over the tensors covered by `mask`.
std::size_t count_nonzero(const ModelGraph& g, const PruneMask& mask);
/// True when every masked position of the integer weights is 0.
bool masked_weights_are_zero(const QuantizedModel& qm, const PruneMask& mask);

struct PipelineConfig {
  double sparsity = 0.0;
  TrainConfig finetune;
  CalibConfig calib;
  WeightQuantConfig weights;
  AccumMode accum = AccumMode::Int32;
  PlacementOptions placement;
  QatConfig qat;
  bool aggressive_reference = false;  // also fine-tune M2 with aggressive cropping, reported only

  void validate() const;
};

struct StageMetrics {
  std::string stage;
  double sparsity = 0.0;
  std::size_t nnz = 0;
  Accuracy accuracy;
};

struct PipelineState {
  ModelGraph m1;
  ModelGraph m2;
  QuantizedModel m3;
  QatResult m4_master;
  QuantizedModel m4;
  PruneMask mask;
  CalibrationProfile profile;
  std::vector<StageMetrics> metrics;  // M0 (input model), M1..M4
  std::string stage;
};

/// Sparsity -> fp fine-tune -> PTQ -> QAT, with the mask re-applied after every update.
PipelineState run_pipeline(const ModelGraph& trained, const DatasetSplit& data, const PipelineConfig& cfg);

/// Writes <dir>/report.json, report.csv and report.txt. Returns the JSON path.
std::filesystem::path write_pipeline_report(const PipelineState& state, const std::filesystem::path& dir);

}  // namespace quantkit
