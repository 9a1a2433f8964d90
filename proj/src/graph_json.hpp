#pragma once

#include <filesystem>

#include <json.hpp>

#include "quantkit/graph.hpp"
#include "quantkit/quant_params.hpp"

namespace quantkit::detail {

/// Manifest JSON for `g`; parameter blobs are written under <dir>/params/.
nlohmann::json write_graph_manifest(const ModelGraph& g, const std::filesystem::path& dir);
ModelGraph read_graph_manifest(const nlohmann::json& manifest, const std::filesystem::path& dir);

nlohmann::json read_json_file(const std::filesystem::path& path);
void write_json_file(const nlohmann::json& j, const std::filesystem::path& path);

/// Parameter names become file names, so they are restricted to [A-Za-z0-9_.-].
void check_param_name(const std::string& name);

nlohmann::json quant_params_to_json(const QuantParams& p);
QuantParams quant_params_from_json(const nlohmann::json& j);

}  // namespace quantkit::detail
