#include "quantkit/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace quantkit::ops {

namespace {

void require_rank(const Tensor& t, std::size_t rank, const char* what) {
  if (t.rank() != rank) {
    throw ValidationError(std::string(what) + " expects rank " + std::to_string(rank) + ", got " +
                          shape_string(t.shape()));
  }
}

struct ConvDims {
  std::size_t n, c, h, w, o, kh, kw, oh, ow, cg, og;
};

ConvDims conv_dims(const Tensor& x, const Tensor& w, ConvGeometry geo) {
  require_rank(x, 4, "conv2d input");
  require_rank(w, 4, "conv2d weight");
  ConvDims d{};
  d.n = x.dim(0), d.c = x.dim(1), d.h = x.dim(2), d.w = x.dim(3);
  d.o = w.dim(0), d.kh = w.dim(2), d.kw = w.dim(3);
  const auto g = static_cast<std::size_t>(geo.groups);
  if (g == 0 || d.c % g != 0 || d.o % g != 0 || w.dim(1) * g != d.c)
    throw ValidationError("conv2d channel/group mismatch: input " + shape_string(x.shape()) + ", weight " +
                          shape_string(w.shape()));
  d.cg = d.c / g;
  d.og = d.o / g;
  const auto ph = d.h + 2 * geo.padding, pw = d.w + 2 * geo.padding;
  if (ph < d.kh || pw < d.kw) throw ValidationError("conv2d kernel larger than padded input");
  d.oh = (ph - d.kh) / geo.stride + 1;
  d.ow = (pw - d.kw) / geo.stride + 1;
  return d;
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor* bias, ConvGeometry geo) {
  const auto d = conv_dims(x, w, geo);
  Tensor y({d.n, d.o, d.oh, d.ow}, DType::F32);
  const float* xp = x.f32().data();
  const float* wp = w.f32().data();
  float* yp = y.f32().data();
  const long s = geo.stride, p = geo.padding;
  for (std::size_t n = 0; n < d.n; ++n) {
    for (std::size_t o = 0; o < d.o; ++o) {
      const std::size_t c0 = (o / d.og) * d.cg;
      const double b = bias ? bias->f32()[o] : 0.0;
      for (std::size_t i = 0; i < d.oh; ++i) {
        for (std::size_t j = 0; j < d.ow; ++j) {
          double acc = b;
          for (std::size_t c = 0; c < d.cg; ++c) {
            const float* xc = xp + ((n * d.c + c0 + c) * d.h) * d.w;
            const float* wc = wp + ((o * d.cg + c) * d.kh) * d.kw;
            for (std::size_t ki = 0; ki < d.kh; ++ki) {
              const long ih = static_cast<long>(i) * s - p + static_cast<long>(ki);
              if (ih < 0 || ih >= static_cast<long>(d.h)) continue;
              for (std::size_t kj = 0; kj < d.kw; ++kj) {
                const long iw = static_cast<long>(j) * s - p + static_cast<long>(kj);
                if (iw < 0 || iw >= static_cast<long>(d.w)) continue;
                acc += static_cast<double>(xc[ih * d.w + iw]) * wc[ki * d.kw + kj];
              }
            }
          }
          yp[((n * d.o + o) * d.oh + i) * d.ow + j] = static_cast<float>(acc);
        }
      }
    }
  }
  return y;
}

ConvGrads conv2d_backward(const Tensor& x, const Tensor& w, const Tensor& dy, ConvGeometry geo, bool need_dx) {
  const auto d = conv_dims(x, w, geo);
  if (dy.shape() != Shape{d.n, d.o, d.oh, d.ow}) throw ValidationError("conv2d_backward: gradient shape mismatch");
  const float* xp = x.f32().data();
  const float* wp = w.f32().data();
  const float* gp = dy.f32().data();
  std::vector<double> dw(w.numel(), 0.0), db(d.o, 0.0), dx(need_dx ? x.numel() : 0, 0.0);
  const long s = geo.stride, p = geo.padding;
  for (std::size_t n = 0; n < d.n; ++n) {
    for (std::size_t o = 0; o < d.o; ++o) {
      const std::size_t c0 = (o / d.og) * d.cg;
      for (std::size_t i = 0; i < d.oh; ++i) {
        for (std::size_t j = 0; j < d.ow; ++j) {
          const double g = gp[((n * d.o + o) * d.oh + i) * d.ow + j];
          if (g == 0.0) continue;
          db[o] += g;
          for (std::size_t c = 0; c < d.cg; ++c) {
            const std::size_t xoff = ((n * d.c + c0 + c) * d.h) * d.w;
            const std::size_t woff = ((o * d.cg + c) * d.kh) * d.kw;
            for (std::size_t ki = 0; ki < d.kh; ++ki) {
              const long ih = static_cast<long>(i) * s - p + static_cast<long>(ki);
              if (ih < 0 || ih >= static_cast<long>(d.h)) continue;
              for (std::size_t kj = 0; kj < d.kw; ++kj) {
                const long iw = static_cast<long>(j) * s - p + static_cast<long>(kj);
                if (iw < 0 || iw >= static_cast<long>(d.w)) continue;
                const std::size_t xi = xoff + ih * d.w + iw;
                dw[woff + ki * d.kw + kj] += g * xp[xi];
                if (need_dx) dx[xi] += g * wp[woff + ki * d.kw + kj];
              }
            }
          }
        }
      }
    }
  }
  auto to_tensor = [](const Shape& shape, const std::vector<double>& v) {
    Tensor t(shape, DType::F32);
    std::transform(v.begin(), v.end(), t.f32().begin(), [](double a) { return static_cast<float>(a); });
    return t;
  };
  ConvGrads out;
  out.dw = to_tensor(w.shape(), dw);
  out.db = to_tensor({d.o}, db);
  if (need_dx) out.dx = to_tensor(x.shape(), dx);
  return out;
}

Tensor fully_connected(const Tensor& x, const Tensor& w, const Tensor* bias) {
  require_rank(w, 2, "fully_connected weight");
  const auto n = x.dim(0), in = x.numel() / n, out = w.dim(0);
  if (w.dim(1) != in) throw ValidationError("fully_connected: expected " + std::to_string(w.dim(1)) + " features, got " + std::to_string(in));
  Tensor y({n, out}, DType::F32);
  const float* xp = x.f32().data();
  const float* wp = w.f32().data();
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t o = 0; o < out; ++o) {
      double acc = bias ? bias->f32()[o] : 0.0;
      for (std::size_t i = 0; i < in; ++i) acc += static_cast<double>(xp[b * in + i]) * wp[o * in + i];
      y.f32()[b * out + o] = static_cast<float>(acc);
    }
  }
  return y;
}

ConvGrads fully_connected_backward(const Tensor& x, const Tensor& w, const Tensor& dy, bool need_dx) {
  const auto n = x.dim(0), in = x.numel() / n, out = w.dim(0);
  const float* xp = x.f32().data();
  const float* wp = w.f32().data();
  const float* gp = dy.f32().data();
  ConvGrads g;
  g.dw = Tensor(w.shape(), DType::F32);
  g.db = Tensor({out}, DType::F32);
  for (std::size_t o = 0; o < out; ++o) {
    double sb = 0.0;
    for (std::size_t b = 0; b < n; ++b) sb += gp[b * out + o];
    g.db.f32()[o] = static_cast<float>(sb);
    for (std::size_t i = 0; i < in; ++i) {
      double sw = 0.0;
      for (std::size_t b = 0; b < n; ++b) sw += static_cast<double>(gp[b * out + o]) * xp[b * in + i];
      g.dw.f32()[o * in + i] = static_cast<float>(sw);
    }
  }
  if (need_dx) {
    g.dx = Tensor(x.shape(), DType::F32);
    for (std::size_t b = 0; b < n; ++b) {
      for (std::size_t i = 0; i < in; ++i) {
        double acc = 0.0;
        for (std::size_t o = 0; o < out; ++o) acc += static_cast<double>(gp[b * out + o]) * wp[o * in + i];
        g.dx.f32()[b * in + i] = static_cast<float>(acc);
      }
    }
  }
  return g;
}

namespace {

/// Per-sample plane size and channel count for [N,C,...] tensors.
std::pair<std::size_t, std::size_t> channel_layout(const Tensor& x) {
  if (x.rank() < 2) throw ValidationError("batchnorm expects [N,C,...] input");
  return {x.dim(1), x.numel() / (x.dim(0) * x.dim(1))};
}

}  // namespace

Tensor batchnorm_inference(const Tensor& x, const Tensor& gamma, const Tensor& beta, const Tensor& mean,
                           const Tensor& var, float eps) {
  const auto [c, plane] = channel_layout(x);
  const auto n = x.dim(0);
  Tensor y(x.shape(), DType::F32);
  for (std::size_t ch = 0; ch < c; ++ch) {
    const double denom = static_cast<double>(var.f32()[ch]) + eps;
    if (!(denom > 0.0)) throw NumericError("batchnorm: var + eps <= 0");
    const double inv = 1.0 / std::sqrt(denom);
    const double g = gamma.f32()[ch], b = beta.f32()[ch], m = mean.f32()[ch];
    for (std::size_t s = 0; s < n; ++s) {
      const std::size_t off = (s * c + ch) * plane;
      for (std::size_t k = 0; k < plane; ++k)
        y.f32()[off + k] = static_cast<float>(g * (x.f32()[off + k] - m) * inv + b);
    }
  }
  return y;
}

BatchNormGrads batchnorm_inference_backward(const Tensor& x, const Tensor& dy, const Tensor& gamma,
                                            const Tensor& mean, const Tensor& var, float eps) {
  const auto [c, plane] = channel_layout(x);
  const auto n = x.dim(0);
  BatchNormGrads g{Tensor(x.shape(), DType::F32), Tensor({c}, DType::F32), Tensor({c}, DType::F32)};
  for (std::size_t ch = 0; ch < c; ++ch) {
    const double inv = 1.0 / std::sqrt(static_cast<double>(var.f32()[ch]) + eps);
    const double ga = gamma.f32()[ch], m = mean.f32()[ch];
    double sg = 0.0, sb = 0.0;
    for (std::size_t s = 0; s < n; ++s) {
      const std::size_t off = (s * c + ch) * plane;
      for (std::size_t k = 0; k < plane; ++k) {
        const double d = dy.f32()[off + k];
        sb += d;
        sg += d * (x.f32()[off + k] - m) * inv;
        g.dx.f32()[off + k] = static_cast<float>(d * ga * inv);
      }
    }
    g.dgamma.f32()[ch] = static_cast<float>(sg);
    g.dbeta.f32()[ch] = static_cast<float>(sb);
  }
  return g;
}

Tensor batchnorm_train(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps, BatchNormCache& cache) {
  const auto [c, plane] = channel_layout(x);
  const auto n = x.dim(0);
  const double count = static_cast<double>(n * plane);
  cache.mean.assign(c, 0.0);
  cache.var.assign(c, 0.0);
  cache.inv_std.assign(c, 0.0);
  cache.xhat = Tensor(x.shape(), DType::F32);
  Tensor y(x.shape(), DType::F32);
  for (std::size_t ch = 0; ch < c; ++ch) {
    double sum = 0.0;
    for (std::size_t s = 0; s < n; ++s)
      for (std::size_t k = 0; k < plane; ++k) sum += x.f32()[(s * c + ch) * plane + k];
    const double mean = sum / count;
    double sq = 0.0;
    for (std::size_t s = 0; s < n; ++s)
      for (std::size_t k = 0; k < plane; ++k) {
        const double d = x.f32()[(s * c + ch) * plane + k] - mean;
        sq += d * d;
      }
    const double var = sq / count;
    const double inv = 1.0 / std::sqrt(var + eps);
    cache.mean[ch] = mean;
    cache.var[ch] = var;
    cache.inv_std[ch] = inv;
    const double g = gamma.f32()[ch], b = beta.f32()[ch];
    for (std::size_t s = 0; s < n; ++s)
      for (std::size_t k = 0; k < plane; ++k) {
        const std::size_t i = (s * c + ch) * plane + k;
        const double xh = (x.f32()[i] - mean) * inv;
        cache.xhat.f32()[i] = static_cast<float>(xh);
        y.f32()[i] = static_cast<float>(g * xh + b);
      }
  }
  return y;
}

BatchNormGrads batchnorm_train_backward(const Tensor& dy, const Tensor& gamma, const BatchNormCache& cache) {
  const auto [c, plane] = channel_layout(dy);
  const auto n = dy.dim(0);
  const double count = static_cast<double>(n * plane);
  BatchNormGrads g{Tensor(dy.shape(), DType::F32), Tensor({c}, DType::F32), Tensor({c}, DType::F32)};
  for (std::size_t ch = 0; ch < c; ++ch) {
    double sum_dy = 0.0, sum_dy_xh = 0.0;
    for (std::size_t s = 0; s < n; ++s)
      for (std::size_t k = 0; k < plane; ++k) {
        const std::size_t i = (s * c + ch) * plane + k;
        sum_dy += dy.f32()[i];
        sum_dy_xh += static_cast<double>(dy.f32()[i]) * cache.xhat.f32()[i];
      }
    g.dgamma.f32()[ch] = static_cast<float>(sum_dy_xh);
    g.dbeta.f32()[ch] = static_cast<float>(sum_dy);
    const double scale = gamma.f32()[ch] * cache.inv_std[ch] / count;
    for (std::size_t s = 0; s < n; ++s)
      for (std::size_t k = 0; k < plane; ++k) {
        const std::size_t i = (s * c + ch) * plane + k;
        g.dx.f32()[i] =
            static_cast<float>(scale * (count * dy.f32()[i] - sum_dy - cache.xhat.f32()[i] * sum_dy_xh));
      }
  }
  return g;
}

Tensor relu(const Tensor& x) {
  Tensor y(x.shape(), DType::F32);
  std::transform(x.f32().begin(), x.f32().end(), y.f32().begin(), [](float v) { return v > 0.0f ? v : 0.0f; });
  return y;
}

Tensor relu_backward(const Tensor& x, const Tensor& dy) {
  Tensor dx(x.shape(), DType::F32);
  for (std::size_t i = 0; i < x.numel(); ++i) dx.f32()[i] = x.f32()[i] > 0.0f ? dy.f32()[i] : 0.0f;
  return dx;
}

Tensor add(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw ValidationError("add: shape mismatch");
  Tensor y(a.shape(), DType::F32);
  for (std::size_t i = 0; i < a.numel(); ++i) y.f32()[i] = a.f32()[i] + b.f32()[i];
  return y;
}

namespace {

struct PoolDims {
  std::size_t n, c, h, w, kh, kw, oh, ow;
};

PoolDims pool_dims(const Shape& s, int kernel) {
  if (s.size() != 4) throw ValidationError("pool expects NCHW input");
  PoolDims d{s[0], s[1], s[2], s[3], 0, 0, 0, 0};
  d.kh = kernel == 0 ? d.h : static_cast<std::size_t>(kernel);
  d.kw = kernel == 0 ? d.w : static_cast<std::size_t>(kernel);
  if (d.kh == 0 || d.kh > d.h || d.kw > d.w) throw ValidationError("pool kernel does not fit input");
  d.oh = d.h / d.kh;
  d.ow = d.w / d.kw;
  return d;
}

}  // namespace

Tensor avg_pool(const Tensor& x, int kernel) {
  const auto d = pool_dims(x.shape(), kernel);
  Tensor y({d.n, d.c, d.oh, d.ow}, DType::F32);
  const double area = static_cast<double>(d.kh * d.kw);
  for (std::size_t p = 0; p < d.n * d.c; ++p)
    for (std::size_t i = 0; i < d.oh; ++i)
      for (std::size_t j = 0; j < d.ow; ++j) {
        double acc = 0.0;
        for (std::size_t a = 0; a < d.kh; ++a)
          for (std::size_t b = 0; b < d.kw; ++b) acc += x.f32()[(p * d.h + i * d.kh + a) * d.w + j * d.kw + b];
        y.f32()[(p * d.oh + i) * d.ow + j] = static_cast<float>(acc / area);
      }
  return y;
}

Tensor avg_pool_backward(const Tensor& dy, const Shape& x_shape, int kernel) {
  const auto d = pool_dims(x_shape, kernel);
  Tensor dx(x_shape, DType::F32);
  const double area = static_cast<double>(d.kh * d.kw);
  for (std::size_t p = 0; p < d.n * d.c; ++p)
    for (std::size_t i = 0; i < d.oh; ++i)
      for (std::size_t j = 0; j < d.ow; ++j) {
        const auto g = static_cast<float>(dy.f32()[(p * d.oh + i) * d.ow + j] / area);
        for (std::size_t a = 0; a < d.kh; ++a)
          for (std::size_t b = 0; b < d.kw; ++b) dx.f32()[(p * d.h + i * d.kh + a) * d.w + j * d.kw + b] = g;
      }
  return dx;
}

Tensor max_pool(const Tensor& x, int kernel, std::vector<std::uint32_t>* argmax) {
  const auto d = pool_dims(x.shape(), kernel);
  Tensor y({d.n, d.c, d.oh, d.ow}, DType::F32);
  if (argmax) argmax->assign(y.numel(), 0);
  for (std::size_t p = 0; p < d.n * d.c; ++p)
    for (std::size_t i = 0; i < d.oh; ++i)
      for (std::size_t j = 0; j < d.ow; ++j) {
        float best = -std::numeric_limits<float>::infinity();
        std::size_t best_i = 0;
        for (std::size_t a = 0; a < d.kh; ++a)
          for (std::size_t b = 0; b < d.kw; ++b) {
            const std::size_t idx = (p * d.h + i * d.kh + a) * d.w + j * d.kw + b;
            if (x.f32()[idx] > best || (a == 0 && b == 0)) {
              best = x.f32()[idx];
              best_i = idx;
            }
          }
        const std::size_t o = (p * d.oh + i) * d.ow + j;
        y.f32()[o] = best;
        if (argmax) (*argmax)[o] = static_cast<std::uint32_t>(best_i);
      }
  return y;
}

Tensor max_pool_backward(const Tensor& dy, const Shape& x_shape, std::span<const std::uint32_t> argmax) {
  Tensor dx(x_shape, DType::F32);
  for (std::size_t o = 0; o < dy.numel(); ++o) dx.f32()[argmax[o]] += dy.f32()[o];
  return dx;
}

Tensor softmax(const Tensor& x) {
  require_rank(x, 2, "softmax");
  const auto n = x.dim(0), k = x.dim(1);
  Tensor y(x.shape(), DType::F32);
  for (std::size_t b = 0; b < n; ++b) {
    const float* row = x.f32().data() + b * k;
    const double m = *std::max_element(row, row + k);
    double z = 0.0;
    for (std::size_t i = 0; i < k; ++i) z += std::exp(row[i] - m);
    for (std::size_t i = 0; i < k; ++i) y.f32()[b * k + i] = static_cast<float>(std::exp(row[i] - m) / z);
  }
  return y;
}

double softmax_cross_entropy(const Tensor& logits, std::span<const std::size_t> labels, Tensor* dlogits) {
  require_rank(logits, 2, "softmax_cross_entropy");
  const auto n = logits.dim(0), k = logits.dim(1);
  if (labels.size() != n) throw ValidationError("softmax_cross_entropy: label count mismatch");
  if (dlogits) *dlogits = Tensor(logits.shape(), DType::F32);
  double loss = 0.0;
  for (std::size_t b = 0; b < n; ++b) {
    if (labels[b] >= k) throw ValidationError("label out of range");
    const float* row = logits.f32().data() + b * k;
    const double m = *std::max_element(row, row + k);
    double z = 0.0;
    for (std::size_t i = 0; i < k; ++i) z += std::exp(row[i] - m);
    const double log_z = std::log(z) + m;
    loss += log_z - row[labels[b]];
    if (dlogits) {
      for (std::size_t i = 0; i < k; ++i) {
        const double p = std::exp(row[i] - log_z);
        dlogits->f32()[b * k + i] = static_cast<float>((p - (i == labels[b] ? 1.0 : 0.0)) / n);
      }
    }
  }
  return loss / static_cast<double>(n);
}

}  // namespace quantkit::ops
