#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "quantkit/tensor.hpp"

namespace quantkit {

enum class LayerKind { Conv2D, BatchNorm, ReLU, Add, AvgPool, MaxPool, FullyConnected, Softmax };

std::string_view layer_kind_name(LayerKind kind);
LayerKind parse_layer_kind(std::string_view name);

/// Reserved id of the single graph input.
inline constexpr std::string_view kGraphInput = "input";

/// One layer. Attributes not meaningful for a kind keep their defaults.
///
/// Parameter roles: Conv2D/FullyConnected use "weight" (+ optional "bias"),
/// BatchNorm uses "gamma", "beta", "mean", "var".
struct LayerNode {
  std::string id;
  LayerKind kind = LayerKind::ReLU;
  std::vector<std::string> inputs;
  std::map<std::string, std::string> params;

  int stride = 1;
  int padding = 0;
  int groups = 1;
  int kernel = 0;     // pools; 0 means global
  float eps = 1e-5f;  // BatchNorm
  bool quantize = true;  // Conv2D/FullyConnected opt-out from integer execution

  std::string param(std::string_view role) const;
  bool has_param(std::string_view role) const { return params.count(std::string(role)) > 0; }
  bool operator==(const LayerNode&) const = default;
};

enum class Signedness { Signed, Unsigned };
enum class SiteReason { AfterReluUnsigned, AddInputSkipped, DefaultSigned };

std::string_view signedness_name(Signedness s);
Signedness parse_signedness(std::string_view name);
std::string_view site_reason_name(SiteReason r);
SiteReason parse_site_reason(std::string_view name);

/// Placement decision for the edge producer -> consumer.
struct QuantSiteAnnotation {
  std::string producer;
  std::string consumer;
  bool quantize = false;
  Signedness signedness = Signedness::Signed;
  SiteReason reason = SiteReason::DefaultSigned;

  std::string site_id() const { return producer + "->" + consumer; }
  bool operator==(const QuantSiteAnnotation&) const = default;
};

struct ModelGraph {
  std::string name = "model";
  Shape input_shape;  // per-sample C,H,W
  std::vector<LayerNode> nodes;
  std::map<std::string, Tensor> params;
  std::vector<QuantSiteAnnotation> quant_sites;

  const LayerNode& node(std::string_view id) const;
  LayerNode& node(std::string_view id);
  const LayerNode* find(std::string_view id) const;
  const Tensor& param(const LayerNode& n, std::string_view role) const;
  Tensor& param(const LayerNode& n, std::string_view role);

  /// Ids of nodes reading the output of `id` ("input" allowed), in node order.
  std::vector<std::string> consumers(std::string_view id) const;
  /// The unique node nobody consumes.
  std::string output_id() const;
  const QuantSiteAnnotation* site(std::string_view producer, std::string_view consumer) const;

  /// Checks every structural invariant; throws ValidationError.
  void validate() const;
};

/// Per-sample output shape of every node, plus "input". Throws on inconsistent parameters.
std::map<std::string, Shape> infer_shapes(const ModelGraph& g);

/// Deterministic Kahn order; ready nodes are taken in lexicographic id order.
std::vector<std::string> topo_order(const ModelGraph& g);

/// Writes <dir>/model.json and <dir>/params/<name>.qt. Returns the manifest path.
std::filesystem::path save_model(const ModelGraph& g, const std::filesystem::path& dir);
ModelGraph load_model(const std::filesystem::path& manifest);

/// Structural isomorphism with bit-identical parameters (node order may differ).
bool graphs_equivalent(const ModelGraph& a, const ModelGraph& b);

}  // namespace quantkit
