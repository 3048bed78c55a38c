#pragma once

#include <cmath>
#include <initializer_list>
#include <cstddef>
#include <vector>

#include "tscnn/tensor.hpp"

namespace tscnn {

enum class Mode { Train, Eval };

/// Per-channel running statistics, updated in train mode.
template <class T>
struct BatchNormState {
  Tensor<T> running_mean;
  Tensor<T> running_var;

  explicit BatchNormState(std::size_t channels)
      : running_mean(Tensor<T>::zeros({channels})), running_var(Tensor<T>::ones({channels})) {}
  BatchNormState(Tensor<T> mean, Tensor<T> var) : running_mean(std::move(mean)), running_var(std::move(var)) {}
};

struct BatchNormOptions {
  double momentum = 0.1;
  double eps = 1e-5;
};

/// Batch normalization over (B,H,W) for each channel of input[B,C,H,W].
/// Train mode normalizes by batch statistics and folds them into `state`
/// by exponential moving average; eval mode normalizes by `state`.
template <class T>
Tensor<T> batch_norm2d(const Tensor<T>& input, const Tensor<T>& gamma, const Tensor<T>& beta,
                       BatchNormState<T>& state, Mode mode, BatchNormOptions opt = {}) {
  if (input.rank() != 4) throw InvalidShape("batch_norm2d: input must be [B,C,H,W], got " + shape_str(input.shape()));
  const std::size_t batch = input.dim(0), channels = input.dim(1), plane = input.dim(2) * input.dim(3);
  const Shape per_channel{channels};
  for (const Tensor<T>* t : std::initializer_list<const Tensor<T>*>{&gamma, &beta, &state.running_mean, &state.running_var}) {
    if (t->shape() != per_channel) {
      throw InvalidShape("batch_norm2d: per-channel tensor " + shape_str(t->shape()) + " does not match " +
                         std::to_string(channels) + " channels");
    }
  }
  const std::size_t count = batch * plane;
  const T eps = static_cast<T>(opt.eps);
  std::vector<T> mu(channels), inv_std(channels);
  const auto& x = input.values();

  if (mode == Mode::Train) {
    const T momentum = static_cast<T>(opt.momentum);
    for (std::size_t c = 0; c < channels; ++c) {
      T s = 0;
      for (std::size_t b = 0; b < batch; ++b) {
        const T* p = x.data() + (b * channels + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) s += p[i];
      }
      const T m = s / static_cast<T>(count);
      T sq = 0;
      for (std::size_t b = 0; b < batch; ++b) {
        const T* p = x.data() + (b * channels + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) sq += (p[i] - m) * (p[i] - m);
      }
      const T var = sq / static_cast<T>(count);
      mu[c] = m;
      inv_std[c] = T(1) / std::sqrt(var + eps);
      const T unbiased = count > 1 ? sq / static_cast<T>(count - 1) : var;
      state.running_mean.data()[c] = (T(1) - momentum) * state.running_mean[c] + momentum * m;
      state.running_var.data()[c] = (T(1) - momentum) * state.running_var[c] + momentum * unbiased;
    }
  } else {
    for (std::size_t c = 0; c < channels; ++c) {
      mu[c] = state.running_mean[c];
      inv_std[c] = T(1) / std::sqrt(state.running_var[c] + eps);
    }
  }

  std::vector<T> xhat(x.size()), y(x.size());
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t c = 0; c < channels; ++c) {
      const std::size_t base = (b * channels + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        xhat[base + i] = (x[base + i] - mu[c]) * inv_std[c];
        y[base + i] = gamma[c] * xhat[base + i] + beta[c];
      }
    }
  Tensor<T> out(input.shape(), std::move(y));

  auto xi = input.impl(), gi = gamma.impl(), bi = beta.impl();
  const bool train = mode == Mode::Train;
  detail::attach<T>(out, "batch_norm2d", {xi, gi, bi},
                    [xi, gi, bi, xhat = std::move(xhat), inv_std = std::move(inv_std), batch, channels, plane,
                     count, train](const TensorImpl<T>& o) {
                      std::vector<T> dgamma(channels, T(0)), dbeta(channels, T(0));
                      for (std::size_t b = 0; b < batch; ++b)
                        for (std::size_t c = 0; c < channels; ++c) {
                          const std::size_t base = (b * channels + c) * plane;
                          for (std::size_t i = 0; i < plane; ++i) {
                            dbeta[c] += o.grad[base + i];
                            dgamma[c] += o.grad[base + i] * xhat[base + i];
                          }
                        }
                      if (gi->requires_grad) {
                        gi->ensure_grad();
                        for (std::size_t c = 0; c < channels; ++c) gi->grad[c] += dgamma[c];
                      }
                      if (bi->requires_grad) {
                        bi->ensure_grad();
                        for (std::size_t c = 0; c < channels; ++c) bi->grad[c] += dbeta[c];
                      }
                      if (!xi->requires_grad) return;
                      xi->ensure_grad();
                      const T n = static_cast<T>(count);
                      for (std::size_t b = 0; b < batch; ++b)
                        for (std::size_t c = 0; c < channels; ++c) {
                          const std::size_t base = (b * channels + c) * plane;
                          const T g = gi->data[c];
                          for (std::size_t i = 0; i < plane; ++i) {
                            if (train) {
                              // dgamma/dbeta are exactly sum(dy*xhat) and sum(dy).
                              xi->grad[base + i] += g * inv_std[c] / n *
                                                    (n * o.grad[base + i] - dbeta[c] - xhat[base + i] * dgamma[c]);
                            } else {
                              xi->grad[base + i] += g * inv_std[c] * o.grad[base + i];
                            }
                          }
                        }
                    });
  return out;
}

}  // namespace tscnn
