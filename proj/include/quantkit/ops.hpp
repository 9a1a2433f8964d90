#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "quantkit/tensor.hpp"

// fp32 layer kernels on batched tensors: NCHW activations, [N,F] features.
namespace quantkit::ops {

struct ConvGeometry {
  int stride = 1;
  int padding = 0;
  int groups = 1;
};

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor* bias, ConvGeometry geo);

struct ConvGrads {
  Tensor dx;  // left empty when not requested
  Tensor dw;
  Tensor db;
};
ConvGrads conv2d_backward(const Tensor& x, const Tensor& w, const Tensor& dy, ConvGeometry geo, bool need_dx);

/// x is [N, ...] and flattened per sample; w is [O, I].
Tensor fully_connected(const Tensor& x, const Tensor& w, const Tensor* bias);
ConvGrads fully_connected_backward(const Tensor& x, const Tensor& w, const Tensor& dy, bool need_dx);

Tensor batchnorm_inference(const Tensor& x, const Tensor& gamma, const Tensor& beta, const Tensor& mean,
                           const Tensor& var, float eps);

struct BatchNormGrads {
  Tensor dx;
  Tensor dgamma;
  Tensor dbeta;
};
BatchNormGrads batchnorm_inference_backward(const Tensor& x, const Tensor& dy, const Tensor& gamma,
                                            const Tensor& mean, const Tensor& var, float eps);

/// Batch statistics. `batch_mean`/`batch_var` (biased) are filled for running-stat updates.
struct BatchNormCache {
  std::vector<double> mean;
  std::vector<double> var;
  std::vector<double> inv_std;
  Tensor xhat;
};
Tensor batchnorm_train(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps, BatchNormCache& cache);
BatchNormGrads batchnorm_train_backward(const Tensor& dy, const Tensor& gamma, const BatchNormCache& cache);

Tensor relu(const Tensor& x);
Tensor relu_backward(const Tensor& x, const Tensor& dy);

Tensor add(const Tensor& a, const Tensor& b);

/// Non-overlapping k x k pooling (stride k); kernel 0 pools the whole plane.
Tensor avg_pool(const Tensor& x, int kernel);
Tensor avg_pool_backward(const Tensor& dy, const Shape& x_shape, int kernel);
Tensor max_pool(const Tensor& x, int kernel, std::vector<std::uint32_t>* argmax);
Tensor max_pool_backward(const Tensor& dy, const Shape& x_shape, std::span<const std::uint32_t> argmax);

/// Row-wise softmax of [N, K].
Tensor softmax(const Tensor& x);

/// Mean cross-entropy of softmax(logits) against labels; fills dlogits when given.
double softmax_cross_entropy(const Tensor& logits, std::span<const std::size_t> labels, Tensor* dlogits);

}  // namespace quantkit::ops
