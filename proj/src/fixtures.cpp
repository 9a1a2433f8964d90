#include "quantkit/fixtures.hpp"

#include <cmath>

namespace quantkit {

GraphBuilder::GraphBuilder(std::string name, Shape input_shape, std::uint64_t seed) : rng_(seed) {
  g_.name = std::move(name);
  g_.input_shape = input_shape;
  shapes_[std::string(kGraphInput)] = std::move(input_shape);
}

Tensor GraphBuilder::he_normal(Shape shape, std::size_t fan_in) {
  Tensor t(std::move(shape), DType::F32);
  const double sd = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (auto& v : t.f32()) v = static_cast<float>(sd * rng_.normal());
  return t;
}

std::string GraphBuilder::push(LayerNode node) {
  g_.nodes.push_back(node);
  // shape of the new node only; the partial graph may still have several outputs
  const auto& in = shapes_.at(node.inputs.at(0));
  Shape out = in;
  switch (node.kind) {
    case LayerKind::Conv2D: {
      const auto& w = g_.params.at(node.param("weight"));
      const auto k = w.dim(2);
      out = {w.dim(0), (in[1] + 2 * node.padding - k) / node.stride + 1, (in[2] + 2 * node.padding - k) / node.stride + 1};
      break;
    }
    case LayerKind::FullyConnected: out = {g_.params.at(node.param("weight")).dim(0)}; break;
    case LayerKind::AvgPool:
    case LayerKind::MaxPool: {
      const auto kh = node.kernel == 0 ? in[1] : static_cast<std::size_t>(node.kernel);
      const auto kw = node.kernel == 0 ? in[2] : static_cast<std::size_t>(node.kernel);
      out = {in[0], in[1] / kh, in[2] / kw};
      break;
    }
    default: break;
  }
  shapes_[node.id] = out;
  return node.id;
}

std::string GraphBuilder::conv(const std::string& id, const std::string& input, std::size_t out_channels,
                               std::size_t kernel, int stride, int padding, int groups, bool bias) {
  const auto in_ch = shapes_.at(input).at(0);
  const auto per_group = in_ch / static_cast<std::size_t>(groups);
  LayerNode n;
  n.id = id;
  n.kind = LayerKind::Conv2D;
  n.inputs = {input};
  n.stride = stride;
  n.padding = padding;
  n.groups = groups;
  n.params["weight"] = id + ".weight";
  g_.params[id + ".weight"] = he_normal({out_channels, per_group, kernel, kernel}, per_group * kernel * kernel);
  if (bias) {
    n.params["bias"] = id + ".bias";
    g_.params[id + ".bias"] = Tensor({out_channels}, DType::F32);
  }
  return push(std::move(n));
}

std::string GraphBuilder::batchnorm(const std::string& id, const std::string& input) {
  const auto c = shapes_.at(input).at(0);
  LayerNode n;
  n.id = id;
  n.kind = LayerKind::BatchNorm;
  n.inputs = {input};
  for (const auto* role : {"gamma", "beta", "mean", "var"}) {
    n.params[role] = id + "." + role;
    Tensor t({c}, DType::F32);
    if (std::string(role) == "gamma" || std::string(role) == "var")
      for (auto& v : t.f32()) v = 1.0f;
    g_.params[id + "." + role] = std::move(t);
  }
  return push(std::move(n));
}

namespace {

LayerNode simple(const std::string& id, LayerKind kind, std::vector<std::string> inputs) {
  LayerNode n;
  n.id = id;
  n.kind = kind;
  n.inputs = std::move(inputs);
  return n;
}

}  // namespace

std::string GraphBuilder::relu(const std::string& id, const std::string& input) {
  return push(simple(id, LayerKind::ReLU, {input}));
}

std::string GraphBuilder::add(const std::string& id, const std::string& a, const std::string& b) {
  return push(simple(id, LayerKind::Add, {a, b}));
}

std::string GraphBuilder::avg_pool(const std::string& id, const std::string& input, int kernel) {
  auto n = simple(id, LayerKind::AvgPool, {input});
  n.kernel = kernel;
  return push(std::move(n));
}

std::string GraphBuilder::max_pool(const std::string& id, const std::string& input, int kernel) {
  auto n = simple(id, LayerKind::MaxPool, {input});
  n.kernel = kernel;
  return push(std::move(n));
}

std::string GraphBuilder::fully_connected(const std::string& id, const std::string& input, std::size_t out, bool bias) {
  const auto in = shape_numel(shapes_.at(input));
  auto n = simple(id, LayerKind::FullyConnected, {input});
  n.params["weight"] = id + ".weight";
  g_.params[id + ".weight"] = he_normal({out, in}, in);
  if (bias) {
    n.params["bias"] = id + ".bias";
    g_.params[id + ".bias"] = Tensor({out}, DType::F32);
  }
  return push(std::move(n));
}

std::string GraphBuilder::softmax(const std::string& id, const std::string& input) {
  return push(simple(id, LayerKind::Softmax, {input}));
}

std::string GraphBuilder::conv_bn_relu(const std::string& prefix, const std::string& input, std::size_t out_channels,
                                       std::size_t kernel, int stride, int groups) {
  const auto c = conv(prefix + "_conv", input, out_channels, kernel, stride, static_cast<int>(kernel / 2), groups);
  const auto b = batchnorm(prefix + "_bn", c);
  return relu(prefix + "_relu", b);
}

ModelGraph GraphBuilder::build() const {
  g_.validate();
  return g_;
}

ModelGraph toy_resnet(const ToyNetOptions& o) {
  GraphBuilder b("ToyResNet", {o.channels, o.image_size, o.image_size}, o.seed);
  auto x = b.conv_bn_relu("stem", std::string(kGraphInput), 16, 3);
  x = b.max_pool("stem_pool", x, 2);
  for (int i = 1; i <= 3; ++i) {
    const auto p = "block" + std::to_string(i);
    auto y = b.conv_bn_relu(p + "_a", x, 8, 1);
    y = b.conv_bn_relu(p + "_b", y, 8, 3);
    y = b.conv(p + "_c_conv", y, 16, 1);
    y = b.batchnorm(p + "_c_bn", y);
    y = b.add(p + "_add", x, y);
    x = b.relu(p + "_relu", y);
  }
  x = b.avg_pool("gap", x, 0);
  b.fully_connected("fc", x, o.classes);
  return b.build();
}

ModelGraph toy_mobilenet(const ToyNetOptions& o) {
  GraphBuilder b("ToyMobileNet", {o.channels, o.image_size, o.image_size}, o.seed);
  auto x = b.conv_bn_relu("stem", std::string(kGraphInput), 16, 3);
  struct Stage {
    std::size_t out;
    int stride;
  };
  const Stage stages[] = {{24, 2}, {32, 1}, {48, 2}};
  int i = 1;
  for (const auto& s : stages) {
    const auto p = "ds" + std::to_string(i++);
    const auto c = b.shape_of(x).at(0);
    x = b.conv_bn_relu(p + "_dw", x, c, 3, s.stride, static_cast<int>(c));
    x = b.conv_bn_relu(p + "_pw", x, s.out, 1);
  }
  x = b.avg_pool("gap", x, 0);
  b.fully_connected("fc", x, o.classes);
  return b.build();
}

ModelGraph toy_residual_block(std::size_t channels, std::size_t image_size, std::uint64_t seed) {
  GraphBuilder b("ResidualBlock", {channels, image_size, image_size}, seed);
  auto y = b.conv_bn_relu("a", std::string(kGraphInput), channels, 3);
  y = b.conv("b_conv", y, channels, 3, 1, 1);
  y = b.batchnorm("b_bn", y);
  y = b.add("add", std::string(kGraphInput), y);
  b.relu("out", y);
  return b.build();
}

}  // namespace quantkit
