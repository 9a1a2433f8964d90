#include "quantkit/graph.hpp"

#include <algorithm>
#include <fstream>
#include <functional>
#include <queue>
#include <set>

#include "graph_json.hpp"

namespace quantkit {

namespace {

constexpr std::pair<LayerKind, std::string_view> kKindNames[] = {
    {LayerKind::Conv2D, "Conv2D"},       {LayerKind::BatchNorm, "BatchNorm"},
    {LayerKind::ReLU, "ReLU"},           {LayerKind::Add, "Add"},
    {LayerKind::AvgPool, "AvgPool"},     {LayerKind::MaxPool, "MaxPool"},
    {LayerKind::FullyConnected, "FullyConnected"}, {LayerKind::Softmax, "Softmax"},
};

}  // namespace

std::string_view layer_kind_name(LayerKind kind) {
  for (auto [k, n] : kKindNames)
    if (k == kind) return n;
  return "?";
}

LayerKind parse_layer_kind(std::string_view name) {
  for (auto [k, n] : kKindNames)
    if (n == name) return k;
  throw ValidationError("unknown layer kind '" + std::string(name) + "'");
}

std::string_view signedness_name(Signedness s) { return s == Signedness::Signed ? "signed" : "unsigned"; }

Signedness parse_signedness(std::string_view name) {
  if (name == "signed") return Signedness::Signed;
  if (name == "unsigned") return Signedness::Unsigned;
  throw ValidationError("unknown signedness '" + std::string(name) + "'");
}

std::string_view site_reason_name(SiteReason r) {
  switch (r) {
    case SiteReason::AfterReluUnsigned: return "after_relu_unsigned";
    case SiteReason::AddInputSkipped: return "add_input_skipped";
    case SiteReason::DefaultSigned: return "default_signed";
  }
  return "?";
}

SiteReason parse_site_reason(std::string_view name) {
  if (name == "after_relu_unsigned") return SiteReason::AfterReluUnsigned;
  if (name == "add_input_skipped") return SiteReason::AddInputSkipped;
  if (name == "default_signed") return SiteReason::DefaultSigned;
  throw ValidationError("unknown site reason '" + std::string(name) + "'");
}

std::string LayerNode::param(std::string_view role) const {
  auto it = params.find(std::string(role));
  if (it == params.end()) throw ValidationError("node '" + id + "' has no '" + std::string(role) + "' parameter");
  return it->second;
}

const LayerNode* ModelGraph::find(std::string_view id) const {
  for (const auto& n : nodes)
    if (n.id == id) return &n;
  return nullptr;
}

const LayerNode& ModelGraph::node(std::string_view id) const {
  if (const auto* n = find(id)) return *n;
  throw ValidationError("unknown node '" + std::string(id) + "'");
}

LayerNode& ModelGraph::node(std::string_view id) {
  return const_cast<LayerNode&>(static_cast<const ModelGraph&>(*this).node(id));
}

const Tensor& ModelGraph::param(const LayerNode& n, std::string_view role) const {
  const auto name = n.param(role);
  auto it = params.find(name);
  if (it == params.end()) throw ValidationError("parameter tensor '" + name + "' of node '" + n.id + "' is missing");
  return it->second;
}

Tensor& ModelGraph::param(const LayerNode& n, std::string_view role) {
  return const_cast<Tensor&>(static_cast<const ModelGraph&>(*this).param(n, role));
}

std::vector<std::string> ModelGraph::consumers(std::string_view id) const {
  std::vector<std::string> out;
  for (const auto& n : nodes)
    if (std::find(n.inputs.begin(), n.inputs.end(), id) != n.inputs.end()) out.push_back(n.id);
  return out;
}

std::string ModelGraph::output_id() const {
  std::string out;
  for (const auto& n : nodes) {
    if (!consumers(n.id).empty()) continue;
    if (!out.empty()) throw ValidationError("graph has more than one output ('" + out + "', '" + n.id + "')");
    out = n.id;
  }
  if (out.empty()) throw ValidationError("graph has no output node");
  return out;
}

const QuantSiteAnnotation* ModelGraph::site(std::string_view producer, std::string_view consumer) const {
  for (const auto& s : quant_sites)
    if (s.producer == producer && s.consumer == consumer) return &s;
  return nullptr;
}

namespace {

std::size_t expected_inputs(LayerKind kind) { return kind == LayerKind::Add ? 2 : 1; }

std::vector<std::string> required_roles(LayerKind kind) {
  switch (kind) {
    case LayerKind::Conv2D:
    case LayerKind::FullyConnected: return {"weight"};
    case LayerKind::BatchNorm: return {"gamma", "beta", "mean", "var"};
    default: return {};
  }
}

}  // namespace

void ModelGraph::validate() const {
  if (nodes.empty()) throw ValidationError("graph '" + name + "' has no nodes");
  if (input_shape.empty()) throw ValidationError("graph '" + name + "' has no input shape");
  std::set<std::string> ids;
  bool reads_input = false;
  for (const auto& n : nodes) {
    if (n.id.empty() || n.id == kGraphInput) throw ValidationError("invalid node id '" + n.id + "'");
    if (n.id.find("->") != std::string::npos) throw ValidationError("node id '" + n.id + "' contains '->'");
    if (!ids.insert(n.id).second) throw ValidationError("duplicate node id '" + n.id + "'");
    if (n.inputs.size() != expected_inputs(n.kind)) {
      throw ValidationError("node '" + n.id + "' (" + std::string(layer_kind_name(n.kind)) + ") needs " +
                            std::to_string(expected_inputs(n.kind)) + " input(s), has " +
                            std::to_string(n.inputs.size()));
    }
    for (const auto& role : required_roles(n.kind)) param(n, role);
    if (n.has_param("bias")) param(n, "bias");
    if (n.kind == LayerKind::Conv2D && (n.stride < 1 || n.padding < 0 || n.groups < 1))
      throw ValidationError("node '" + n.id + "' has invalid conv attributes");
    if ((n.kind == LayerKind::AvgPool || n.kind == LayerKind::MaxPool) && n.kernel < 0)
      throw ValidationError("node '" + n.id + "' has a negative pool kernel");
    if (n.kind == LayerKind::BatchNorm && !(n.eps > 0.0f)) throw ValidationError("node '" + n.id + "' needs eps > 0");
  }
  for (const auto& n : nodes) {
    for (const auto& in : n.inputs) {
      if (in == kGraphInput) {
        reads_input = true;
      } else if (!ids.count(in)) {
        throw ValidationError("node '" + n.id + "' reads unknown input '" + in + "'");
      }
    }
  }
  if (!reads_input) throw ValidationError("no node reads the graph input");
  for (const auto& [pname, t] : params) {
    detail::check_param_name(pname);
    if (t.empty()) throw ValidationError("parameter '" + pname + "' is empty");
  }
  topo_order(*this);
  output_id();
  infer_shapes(*this);
  for (const auto& s : quant_sites) {
    const auto* c = find(s.consumer);
    if (c == nullptr || std::find(c->inputs.begin(), c->inputs.end(), s.producer) == c->inputs.end())
      throw ValidationError("quant site '" + s.site_id() + "' is not an edge of the graph");
  }
}

std::vector<std::string> topo_order(const ModelGraph& g) {
  std::map<std::string, std::size_t> pending;
  std::map<std::string, std::vector<std::string>> users;
  for (const auto& n : g.nodes) {
    std::size_t deps = 0;
    for (const auto& in : n.inputs) {
      if (in == kGraphInput) continue;
      ++deps;
      users[in].push_back(n.id);
    }
    pending[n.id] = deps;
  }
  std::priority_queue<std::string, std::vector<std::string>, std::greater<>> ready;
  for (const auto& [id, deps] : pending)
    if (deps == 0) ready.push(id);
  std::vector<std::string> order;
  while (!ready.empty()) {
    auto id = ready.top();
    ready.pop();
    order.push_back(id);
    for (const auto& u : users[id])
      if (--pending[u] == 0) ready.push(u);
  }
  if (order.size() != g.nodes.size()) throw ValidationError("graph '" + g.name + "' contains a cycle");
  return order;
}

namespace {

void expect(bool ok, const LayerNode& n, const std::string& what) {
  if (!ok) throw ValidationError("node '" + n.id + "': " + what);
}

}  // namespace

std::map<std::string, Shape> infer_shapes(const ModelGraph& g) {
  std::map<std::string, Shape> shapes;
  shapes[std::string(kGraphInput)] = g.input_shape;
  for (const auto& id : topo_order(g)) {
    const auto& n = g.node(id);
    const auto& in = shapes.at(n.inputs.at(0));
    Shape out;
    switch (n.kind) {
      case LayerKind::Conv2D: {
        const auto& w = g.param(n, "weight");
        expect(in.size() == 3, n, "conv input must be C,H,W, got " + shape_string(in));
        expect(w.rank() == 4, n, "conv weight must be OIHW");
        const auto c = in[0], o = w.dim(0), groups = static_cast<std::size_t>(n.groups);
        expect(c % groups == 0 && o % groups == 0, n, "channels not divisible by groups");
        expect(w.dim(1) * groups == c, n,
               "weight expects " + std::to_string(w.dim(1) * groups) + " input channels, got " + std::to_string(c));
        const auto kh = w.dim(2), kw = w.dim(3);
        const auto ph = in[1] + 2 * static_cast<std::size_t>(n.padding), pw = in[2] + 2 * static_cast<std::size_t>(n.padding);
        expect(ph >= kh && pw >= kw, n, "kernel larger than padded input");
        out = {o, (ph - kh) / n.stride + 1, (pw - kw) / n.stride + 1};
        if (n.has_param("bias")) expect(g.param(n, "bias").numel() == o, n, "bias length mismatch");
        break;
      }
      case LayerKind::FullyConnected: {
        const auto& w = g.param(n, "weight");
        expect(w.rank() == 2, n, "fc weight must be [out,in]");
        expect(w.dim(1) == shape_numel(in), n,
               "fc expects " + std::to_string(w.dim(1)) + " features, got " + std::to_string(shape_numel(in)));
        out = {w.dim(0)};
        if (n.has_param("bias")) expect(g.param(n, "bias").numel() == w.dim(0), n, "bias length mismatch");
        break;
      }
      case LayerKind::BatchNorm: {
        for (const auto* role : {"gamma", "beta", "mean", "var"})
          expect(g.param(n, role).numel() == in.at(0), n, std::string(role) + " length must equal channel count");
        for (auto v : g.param(n, "var").f32()) expect(v >= 0.0f, n, "negative running variance");
        out = in;
        break;
      }
      case LayerKind::ReLU:
      case LayerKind::Softmax: out = in; break;
      case LayerKind::Add: {
        expect(shapes.at(n.inputs[1]) == in, n, "add operands differ in shape");
        out = in;
        break;
      }
      case LayerKind::AvgPool:
      case LayerKind::MaxPool: {
        expect(in.size() == 3, n, "pool input must be C,H,W");
        const auto kh = n.kernel == 0 ? in[1] : static_cast<std::size_t>(n.kernel);
        const auto kw = n.kernel == 0 ? in[2] : static_cast<std::size_t>(n.kernel);
        expect(kh <= in[1] && kw <= in[2], n, "pool kernel larger than input");
        out = {in[0], in[1] / kh, in[2] / kw};
        break;
      }
    }
    shapes[id] = out;
  }
  return shapes;
}

namespace detail {

void check_param_name(const std::string& name) {
  if (name.empty() || name == "." || name == "..")
    throw ValidationError("invalid parameter name '" + name + "'");
  for (char c : name) {
    const bool ok = (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') || c == '_' ||
                    c == '.' || c == '-';
    if (!ok) throw ValidationError("invalid character in parameter name '" + name + "'");
  }
}

nlohmann::json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

void write_json_file(const nlohmann::json& j, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << j.dump(2) << "\n";
  if (!out) throw IoError("failed writing " + path.string());
}

nlohmann::json write_graph_manifest(const ModelGraph& g, const std::filesystem::path& dir) {
  g.validate();
  std::error_code ec;
  std::filesystem::create_directories(dir / "params", ec);
  if (ec) throw IoError("cannot create " + (dir / "params").string() + ": " + ec.message());

  nlohmann::json j;
  j["format"] = "quantkit-graph/1";
  j["name"] = g.name;
  j["input_shape"] = g.input_shape;
  auto& nodes = j["nodes"] = nlohmann::json::array();
  for (const auto& n : g.nodes) {
    nlohmann::json jn{{"id", n.id}, {"kind", layer_kind_name(n.kind)}, {"inputs", n.inputs}, {"params", n.params}};
    nlohmann::json attrs = nlohmann::json::object();
    switch (n.kind) {
      case LayerKind::Conv2D:
        attrs = {{"stride", n.stride}, {"padding", n.padding}, {"groups", n.groups}, {"quantize", n.quantize}};
        break;
      case LayerKind::FullyConnected: attrs = {{"quantize", n.quantize}}; break;
      case LayerKind::AvgPool:
      case LayerKind::MaxPool: attrs = {{"kernel", n.kernel}}; break;
      case LayerKind::BatchNorm: attrs = {{"eps", n.eps}}; break;
      default: break;
    }
    jn["attrs"] = attrs;
    nodes.push_back(std::move(jn));
  }
  auto& files = j["param_files"] = nlohmann::json::object();
  for (const auto& [pname, t] : g.params) {
    const auto rel = std::filesystem::path("params") / (pname + ".qt");
    save_tensor(t, dir / rel);
    files[pname] = rel.generic_string();
  }
  auto& sites = j["quant_sites"] = nlohmann::json::array();
  for (const auto& s : g.quant_sites) {
    sites.push_back({{"producer", s.producer},
                     {"consumer", s.consumer},
                     {"quantize", s.quantize},
                     {"signedness", signedness_name(s.signedness)},
                     {"reason", site_reason_name(s.reason)}});
  }
  return j;
}

ModelGraph read_graph_manifest(const nlohmann::json& j, const std::filesystem::path& dir) {
  ModelGraph g;
  try {
    g.name = j.value("name", "model");
    g.input_shape = j.at("input_shape").get<Shape>();
    for (const auto& jn : j.at("nodes")) {
      LayerNode n;
      n.id = jn.at("id").get<std::string>();
      n.kind = parse_layer_kind(jn.at("kind").get<std::string>());
      n.inputs = jn.at("inputs").get<std::vector<std::string>>();
      n.params = jn.value("params", std::map<std::string, std::string>{});
      const auto attrs = jn.value("attrs", nlohmann::json::object());
      n.stride = attrs.value("stride", 1);
      n.padding = attrs.value("padding", 0);
      n.groups = attrs.value("groups", 1);
      n.kernel = attrs.value("kernel", 0);
      n.eps = attrs.value("eps", 1e-5f);
      n.quantize = attrs.value("quantize", true);
      g.nodes.push_back(std::move(n));
    }
    for (const auto& [pname, file] : j.at("param_files").items()) {
      check_param_name(pname);
      const auto path = dir / file.get<std::string>();
      if (!std::filesystem::exists(path)) throw IoError("missing parameter blob " + path.string());
      g.params.emplace(pname, load_tensor(path));
    }
    for (const auto& js : j.value("quant_sites", nlohmann::json::array())) {
      QuantSiteAnnotation s;
      s.producer = js.at("producer").get<std::string>();
      s.consumer = js.at("consumer").get<std::string>();
      s.quantize = js.at("quantize").get<bool>();
      s.signedness = parse_signedness(js.at("signedness").get<std::string>());
      s.reason = parse_site_reason(js.at("reason").get<std::string>());
      g.quant_sites.push_back(std::move(s));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed model manifest: ") + e.what());
  }
  g.validate();
  return g;
}

}  // namespace detail

std::filesystem::path save_model(const ModelGraph& g, const std::filesystem::path& dir) {
  const auto manifest = detail::write_graph_manifest(g, dir);
  const auto path = dir / "model.json";
  detail::write_json_file(manifest, path);
  return path;
}

ModelGraph load_model(const std::filesystem::path& manifest) {
  auto path = manifest;
  if (std::filesystem::is_directory(path)) path /= "model.json";
  return detail::read_graph_manifest(detail::read_json_file(path), path.parent_path());
}

bool graphs_equivalent(const ModelGraph& a, const ModelGraph& b) {
  if (a.name != b.name || a.input_shape != b.input_shape || a.nodes.size() != b.nodes.size()) return false;
  for (const auto& n : a.nodes) {
    const auto* m = b.find(n.id);
    if (m == nullptr || !(*m == n)) return false;
  }
  if (a.params.size() != b.params.size()) return false;
  for (const auto& [k, t] : a.params) {
    auto it = b.params.find(k);
    if (it == b.params.end() || !(it->second == t)) return false;
  }
  auto sorted = [](std::vector<QuantSiteAnnotation> v) {
    std::sort(v.begin(), v.end(), [](const auto& x, const auto& y) { return x.site_id() < y.site_id(); });
    return v;
  };
  return sorted(a.quant_sites) == sorted(b.quant_sites);
}

}  // namespace quantkit
