#pragma once

#include <cstdint>
#include <string>

#include "quantkit/graph.hpp"
#include "quantkit/nnexec.hpp"

namespace quantkit {

/// Incremental construction of small graphs with He-initialized parameters.
class GraphBuilder {
 public:
  GraphBuilder(std::string name, Shape input_shape, std::uint64_t seed);

  std::string conv(const std::string& id, const std::string& input, std::size_t out_channels, std::size_t kernel,
                   int stride = 1, int padding = 0, int groups = 1, bool bias = false);
  std::string batchnorm(const std::string& id, const std::string& input);
  std::string relu(const std::string& id, const std::string& input);
  std::string add(const std::string& id, const std::string& a, const std::string& b);
  std::string avg_pool(const std::string& id, const std::string& input, int kernel = 0);
  std::string max_pool(const std::string& id, const std::string& input, int kernel);
  std::string fully_connected(const std::string& id, const std::string& input, std::size_t out, bool bias = true);
  std::string softmax(const std::string& id, const std::string& input);

  /// conv -> BN -> ReLU; returns the ReLU id.
  std::string conv_bn_relu(const std::string& prefix, const std::string& input, std::size_t out_channels,
                           std::size_t kernel, int stride = 1, int groups = 1);

  const Shape& shape_of(const std::string& id) const { return shapes_.at(id); }
  ModelGraph build() const;

 private:
  std::string push(LayerNode node);
  Tensor he_normal(Shape shape, std::size_t fan_in);

  ModelGraph g_;
  std::map<std::string, Shape> shapes_;
  Rng rng_;
};

struct ToyNetOptions {
  std::size_t channels = 3;
  std::size_t image_size = 12;
  std::size_t classes = 10;
  std::uint64_t seed = 1;
};

/// Stem conv-BN-ReLU, 2x2 max-pool, three bottleneck residual blocks
/// (1x1 reduce, 3x3, 1x1 expand, BN, Add, ReLU), global average pool, FC.
ModelGraph toy_resnet(const ToyNetOptions& o = {});

/// Stem conv-BN-ReLU, three depthwise-separable blocks
/// (3x3 depthwise conv-BN-ReLU, 1x1 pointwise conv-BN-ReLU), global average pool, FC.
ModelGraph toy_mobilenet(const ToyNetOptions& o = {});

/// One residual block: conv-BN-ReLU, conv-BN, Add(input), ReLU (7 nodes).
ModelGraph toy_residual_block(std::size_t channels = 4, std::size_t image_size = 6, std::uint64_t seed = 1);

}  // namespace quantkit
