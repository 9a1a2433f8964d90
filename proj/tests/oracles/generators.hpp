#pragma once

// Seeded random fixtures shared by unit and acceptance tests.

#include <cstdint>
#include <filesystem>
#include <string>

#include "quantkit/calib.hpp"
#include "quantkit/graph.hpp"
#include "quantkit/nnexec.hpp"

namespace quantkit::testing_support {

Tensor random_tensor(const Shape& shape, Rng& rng, double stddev = 1.0);
/// Any dtype, including NaN/inf/denormal float payloads.
Tensor random_any_tensor(Rng& rng);

/// Random valid graph: conv/BN/ReLU/pool chains with optional residual Adds and an FC head.
ModelGraph random_graph(std::uint64_t seed);

/// Histogram of |x| for 2k-40k draws from a randomly chosen activation-like distribution.
Histogram random_histogram(std::uint64_t seed);

struct ConvBnFixture {
  ModelGraph graph;  // input -> conv -> bn
  Tensor input;      // batched
};
ConvBnFixture random_conv_bn(std::uint64_t seed);

/// Removes the directory on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag);
  ~TempDir();
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

}  // namespace quantkit::testing_support
