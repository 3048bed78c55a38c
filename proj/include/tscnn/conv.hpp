#pragma once

// 2D convolution and transposed convolution (NCHW) via im2col + GEMM.

#include <cstddef>
#include <string>
#include <vector>

#include "tscnn/tensor.hpp"

namespace tscnn {

struct ConvGeometry {
  std::size_t batch, in_channels, in_h, in_w;
  std::size_t out_channels, kernel, stride, padding;
  std::size_t out_h, out_w;

  std::size_t col_rows() const { return in_channels * kernel * kernel; }
  std::size_t col_cols() const { return out_h * out_w; }
};

namespace kernels {

template <class T>
void im2col(const T* x, const ConvGeometry& g, T* col) {
  const std::size_t n = g.col_cols();
  for (std::size_t c = 0; c < g.in_channels; ++c) {
    const T* plane = x + c * g.in_h * g.in_w;
    for (std::size_t kh = 0; kh < g.kernel; ++kh) {
      for (std::size_t kw = 0; kw < g.kernel; ++kw) {
        T* dst = col + ((c * g.kernel + kh) * g.kernel + kw) * n;
        for (std::size_t oh = 0; oh < g.out_h; ++oh) {
          const long ih = static_cast<long>(oh * g.stride + kh) - static_cast<long>(g.padding);
          T* row = dst + oh * g.out_w;
          if (ih < 0 || ih >= static_cast<long>(g.in_h)) {
            std::fill_n(row, g.out_w, T(0));
            continue;
          }
          const T* src = plane + static_cast<std::size_t>(ih) * g.in_w;
          for (std::size_t ow = 0; ow < g.out_w; ++ow) {
            const long iw = static_cast<long>(ow * g.stride + kw) - static_cast<long>(g.padding);
            row[ow] = (iw < 0 || iw >= static_cast<long>(g.in_w)) ? T(0) : src[iw];
          }
        }
      }
    }
  }
}

template <class T>
void col2im(const T* col, const ConvGeometry& g, T* x) {
  const std::size_t n = g.col_cols();
  for (std::size_t c = 0; c < g.in_channels; ++c) {
    T* plane = x + c * g.in_h * g.in_w;
    for (std::size_t kh = 0; kh < g.kernel; ++kh) {
      for (std::size_t kw = 0; kw < g.kernel; ++kw) {
        const T* src = col + ((c * g.kernel + kh) * g.kernel + kw) * n;
        for (std::size_t oh = 0; oh < g.out_h; ++oh) {
          const long ih = static_cast<long>(oh * g.stride + kh) - static_cast<long>(g.padding);
          if (ih < 0 || ih >= static_cast<long>(g.in_h)) continue;
          T* dst = plane + static_cast<std::size_t>(ih) * g.in_w;
          const T* row = src + oh * g.out_w;
          for (std::size_t ow = 0; ow < g.out_w; ++ow) {
            const long iw = static_cast<long>(ow * g.stride + kw) - static_cast<long>(g.padding);
            if (iw >= 0 && iw < static_cast<long>(g.in_w)) dst[iw] += row[ow];
          }
        }
      }
    }
  }
}

// C[M,N] += A[M,K] * B[K,N]
template <class T>
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c) {
  for (std::size_t i = 0; i < m; ++i) {
    T* ci = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T aip = a[i * k + p];
      const T* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
}

// C[K,N] += A[M,K]^T * B[M,N]
template <class T>
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* bi = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T aip = a[i * k + p];
      T* cp = c + p * n;
      for (std::size_t j = 0; j < n; ++j) cp[j] += aip * bi[j];
    }
  }
}

// C[M,K] += A[M,N] * Bt[N,K]  (Bt is the transpose of the K x N operand)
template <class T>
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* bt, T* c) {
  for (std::size_t i = 0; i < m; ++i) {
    T* ci = c + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const T aij = a[i * n + j];
      const T* bj = bt + j * k;
      for (std::size_t p = 0; p < k; ++p) ci[p] += aij * bj[p];
    }
  }
}

template <class T>
void transpose(const T* src, std::size_t rows, std::size_t cols, T* dst) {
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) dst[c * rows + r] = src[r * cols + c];
}

/// y[B,Co,Ho,Wo] += conv(x, w) without bias.
template <class T>
void conv_forward(const T* x, const T* w, const ConvGeometry& g, T* y) {
  std::vector<T> col(g.col_rows() * g.col_cols());
  const std::size_t x_step = g.in_channels * g.in_h * g.in_w;
  const std::size_t y_step = g.out_channels * g.col_cols();
  for (std::size_t b = 0; b < g.batch; ++b) {
    im2col(x + b * x_step, g, col.data());
    gemm_nn(g.out_channels, g.col_cols(), g.col_rows(), w, col.data(), y + b * y_step);
  }
}

/// dx += conv^T(dy, w)
template <class T>
void conv_backward_input(const T* dy, const T* w, const ConvGeometry& g, T* dx) {
  std::vector<T> col(g.col_rows() * g.col_cols());
  const std::size_t x_step = g.in_channels * g.in_h * g.in_w;
  const std::size_t y_step = g.out_channels * g.col_cols();
  for (std::size_t b = 0; b < g.batch; ++b) {
    std::fill(col.begin(), col.end(), T(0));
    gemm_tn(g.out_channels, g.col_cols(), g.col_rows(), w, dy + b * y_step, col.data());
    col2im(col.data(), g, dx + b * x_step);
  }
}

/// dw += sum_b dy_b * im2col(x_b)^T
template <class T>
void conv_backward_weight(const T* x, const T* dy, const ConvGeometry& g, T* dw) {
  std::vector<T> col(g.col_rows() * g.col_cols());
  std::vector<T> col_t(col.size());
  const std::size_t x_step = g.in_channels * g.in_h * g.in_w;
  const std::size_t y_step = g.out_channels * g.col_cols();
  for (std::size_t b = 0; b < g.batch; ++b) {
    im2col(x + b * x_step, g, col.data());
    transpose(col.data(), g.col_rows(), g.col_cols(), col_t.data());
    gemm_nt(g.out_channels, g.col_cols(), g.col_rows(), dy + b * y_step, col_t.data(), dw);
  }
}

template <class T>
void add_channel_bias(const T* bias, std::size_t batch, std::size_t channels, std::size_t plane, T* y) {
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t c = 0; c < channels; ++c) {
      T* p = y + (b * channels + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) p[i] += bias[c];
    }
}

template <class T>
void channel_bias_grad(const T* dy, std::size_t batch, std::size_t channels, std::size_t plane, T* db) {
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t c = 0; c < channels; ++c) {
      const T* p = dy + (b * channels + c) * plane;
      T s = 0;
      for (std::size_t i = 0; i < plane; ++i) s += p[i];
      db[c] += s;
    }
}

}  // namespace kernels

namespace detail {

inline void check_conv_args(const char* op, const Shape& x, const Shape& w, const Shape& bias, std::size_t stride,
                            std::size_t w_in_axis, std::size_t w_out_axis) {
  if (stride == 0) throw InvalidArgument(std::string(op) + ": stride must be positive");
  if (x.size() != 4) throw InvalidShape(std::string(op) + ": input must be rank 4 [B,C,H,W], got " + shape_str(x));
  if (w.size() != 4 || w[2] != w[3]) {
    throw InvalidShape(std::string(op) + ": weight must be rank 4 with square kernel, got " + shape_str(w));
  }
  if (w[w_in_axis] != x[1]) {
    throw InvalidShape(std::string(op) + ": weight " + shape_str(w) + " expects " + std::to_string(w[w_in_axis]) +
                       " input channels, input " + shape_str(x) + " has " + std::to_string(x[1]));
  }
  if (bias.size() != 1 || bias[0] != w[w_out_axis]) {
    throw InvalidShape(std::string(op) + ": bias " + shape_str(bias) + " must have one value per output channel (" +
                       std::to_string(w[w_out_axis]) + ")");
  }
}

}  // namespace detail

/// Cross-correlation of input[B,Cin,H,W] with weight[Cout,Cin,k,k] plus per-channel bias.
template <class T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias, std::size_t stride,
                 std::size_t padding) {
  detail::check_conv_args("conv2d", input.shape(), weight.shape(), bias.shape(), stride, 1, 0);
  const std::size_t k = weight.dim(2);
  const std::size_t h = input.dim(2), w = input.dim(3);
  if (k > h + 2 * padding || k > w + 2 * padding) {
    throw InvalidShape("conv2d: kernel " + std::to_string(k) + " larger than padded input " + shape_str(input.shape()));
  }
  ConvGeometry g{input.dim(0), input.dim(1), h, w, weight.dim(0), k, stride, padding,
                 (h + 2 * padding - k) / stride + 1, (w + 2 * padding - k) / stride + 1};
  Tensor<T> out({g.batch, g.out_channels, g.out_h, g.out_w}, T(0));
  kernels::conv_forward(input.values().data(), weight.values().data(), g, out.data().data());
  kernels::add_channel_bias(bias.values().data(), g.batch, g.out_channels, g.col_cols(), out.data().data());

  auto xi = input.impl(), wi = weight.impl(), bi = bias.impl();
  detail::attach<T>(out, "conv2d", {xi, wi, bi}, [xi, wi, bi, g](const TensorImpl<T>& o) {
    if (xi->requires_grad) {
      xi->ensure_grad();
      kernels::conv_backward_input(o.grad.data(), wi->data.data(), g, xi->grad.data());
    }
    if (wi->requires_grad) {
      wi->ensure_grad();
      kernels::conv_backward_weight(xi->data.data(), o.grad.data(), g, wi->grad.data());
    }
    if (bi->requires_grad) {
      bi->ensure_grad();
      kernels::channel_bias_grad(o.grad.data(), g.batch, g.out_channels, g.col_cols(), bi->grad.data());
    }
  });
  return out;
}

/// Transposed convolution: input[B,Cin,H,W], weight[Cin,Cout,k,k] -> [B,Cout,(H-1)s-2p+k, ...].
/// It is the adjoint of conv2d with the same weight buffer read as [Cin,Cout,k,k].
template <class T>
Tensor<T> conv_transpose2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                           std::size_t stride, std::size_t padding) {
  detail::check_conv_args("conv_transpose2d", input.shape(), weight.shape(), bias.shape(), stride, 0, 1);
  const std::size_t k = weight.dim(2);
  const std::size_t h = input.dim(2), w = input.dim(3);
  const long oh = static_cast<long>((h - 1) * stride + k) - 2 * static_cast<long>(padding);
  const long ow = static_cast<long>((w - 1) * stride + k) - 2 * static_cast<long>(padding);
  if (oh <= 0 || ow <= 0) throw InvalidShape("conv_transpose2d: padding leaves an empty output");
  // Geometry of the forward conv2d whose adjoint this is: its input is our output.
  ConvGeometry g{input.dim(0), weight.dim(1), static_cast<std::size_t>(oh), static_cast<std::size_t>(ow),
                 weight.dim(0), k, stride, padding, h, w};
  Tensor<T> out({g.batch, g.in_channels, g.in_h, g.in_w}, T(0));
  kernels::conv_backward_input(input.values().data(), weight.values().data(), g, out.data().data());
  kernels::add_channel_bias(bias.values().data(), g.batch, g.in_channels, g.in_h * g.in_w, out.data().data());

  auto xi = input.impl(), wi = weight.impl(), bi = bias.impl();
  detail::attach<T>(out, "conv_transpose2d", {xi, wi, bi}, [xi, wi, bi, g](const TensorImpl<T>& o) {
    if (xi->requires_grad) {
      xi->ensure_grad();
      kernels::conv_forward(o.grad.data(), wi->data.data(), g, xi->grad.data());
    }
    if (wi->requires_grad) {
      wi->ensure_grad();
      kernels::conv_backward_weight(o.grad.data(), xi->data.data(), g, wi->grad.data());
    }
    if (bi->requires_grad) {
      bi->ensure_grad();
      kernels::channel_bias_grad(o.grad.data(), g.batch, g.in_channels, g.in_h * g.in_w, bi->grad.data());
    }
  });
  return out;
}

}  // namespace tscnn
