#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cstring>
#include <optional>
#include <vector>

#include "irnet/errors.hpp"
#include "irnet/rng.hpp"
#include "irnet/tensor.hpp"

// Layer primitives. Every op is a pure function over immutable inputs and is
// instantiated for float (production path) and double (gradient verification
// path). Activations are (B,H,W,C); kernels are (kh,kw,Cin,Cout).
namespace irnet::ops {

enum class Padding { Same, Valid };

inline const char* padding_name(Padding p) { return p == Padding::Same ? "same" : "valid"; }

namespace detail {

template <typename T>
using MatrixRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapRM = Eigen::Map<MatrixRM<T>>;
template <typename T>
using ConstMapRM = Eigen::Map<const MatrixRM<T>>;

}  // namespace detail

// Output extent for one spatial axis. Same-padding keeps ceil(in/stride);
// valid requires the kernel to fit at least once.
inline int64_t conv_out_extent(int64_t in, int64_t k, int64_t stride, Padding padding) {
  if (stride < 1) throw invalid_error("stride must be >= 1, got " + std::to_string(stride));
  if (k < 1) throw invalid_error("kernel extent must be >= 1, got " + std::to_string(k));
  if (padding == Padding::Same) return (in + stride - 1) / stride;
  if (in < k) {
    throw shape_error("zero-sized output: kernel extent " + std::to_string(k) +
                      " exceeds input extent " + std::to_string(in) + " with valid padding");
  }
  return (in - k) / stride + 1;
}

// Leading padding for one axis; the trailing side absorbs the odd element.
inline int64_t pad_before(int64_t in, int64_t out, int64_t k, int64_t stride, Padding padding) {
  if (padding == Padding::Valid) return 0;
  int64_t total = std::max<int64_t>((out - 1) * stride + k - in, 0);
  return total / 2;
}

namespace detail {

template <typename T>
void check_rank4(const TensorT<T>& t, const char* what) {
  if (t.ndim() != 4) {
    throw shape_error(std::string(what) + " must be rank 4, got shape " + shape_str(t.shape()));
  }
}

// Lowers conv input to a [B*OH*OW, kh*kw*Cin] matrix; out-of-range taps are zero.
template <typename T>
void im2col(const TensorT<T>& input, int64_t kh, int64_t kw, int64_t stride, int64_t pad_h,
            int64_t pad_w, int64_t oh, int64_t ow, std::vector<T>& col) {
  const int64_t b_n = input.dim(0), in_h = input.dim(1), in_w = input.dim(2), cin = input.dim(3);
  const int64_t row_len = kh * kw * cin;
  col.assign(static_cast<size_t>(b_n * oh * ow * row_len), T(0));
  const T* src = input.data();
  T* dst = col.data();
  for (int64_t b = 0; b < b_n; ++b) {
    for (int64_t y = 0; y < oh; ++y) {
      for (int64_t x = 0; x < ow; ++x) {
        T* row = dst + ((b * oh + y) * ow + x) * row_len;
        const int64_t h0 = y * stride - pad_h;
        const int64_t w0 = x * stride - pad_w;
        for (int64_t ki = 0; ki < kh; ++ki) {
          const int64_t h = h0 + ki;
          if (h < 0 || h >= in_h) continue;
          for (int64_t kj = 0; kj < kw; ++kj) {
            const int64_t w = w0 + kj;
            if (w < 0 || w >= in_w) continue;
            std::memcpy(row + (ki * kw + kj) * cin, src + ((b * in_h + h) * in_w + w) * cin,
                        sizeof(T) * static_cast<size_t>(cin));
          }
        }
      }
    }
  }
}

// Scatter-adds a [B*OH*OW, kh*kw*Cin] matrix back onto the input layout.
template <typename T>
void col2im_add(const std::vector<T>& col, int64_t kh, int64_t kw, int64_t stride, int64_t pad_h,
                int64_t pad_w, int64_t oh, int64_t ow, TensorT<T>& grad_input) {
  const int64_t b_n = grad_input.dim(0), in_h = grad_input.dim(1), in_w = grad_input.dim(2),
                cin = grad_input.dim(3);
  const int64_t row_len = kh * kw * cin;
  const T* src = col.data();
  T* dst = grad_input.data();
  for (int64_t b = 0; b < b_n; ++b) {
    for (int64_t y = 0; y < oh; ++y) {
      for (int64_t x = 0; x < ow; ++x) {
        const T* row = src + ((b * oh + y) * ow + x) * row_len;
        const int64_t h0 = y * stride - pad_h;
        const int64_t w0 = x * stride - pad_w;
        for (int64_t ki = 0; ki < kh; ++ki) {
          const int64_t h = h0 + ki;
          if (h < 0 || h >= in_h) continue;
          for (int64_t kj = 0; kj < kw; ++kj) {
            const int64_t w = w0 + kj;
            if (w < 0 || w >= in_w) continue;
            T* cell = dst + ((b * in_h + h) * in_w + w) * cin;
            const T* tap = row + (ki * kw + kj) * cin;
            for (int64_t c = 0; c < cin; ++c) cell[c] += tap[c];
          }
        }
      }
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Convolution

template <typename T>
TensorT<T> conv2d(const TensorT<T>& input, const TensorT<T>& kernel, const TensorT<T>* bias,
                  int64_t stride, Padding padding) {
  detail::check_rank4(input, "conv2d input");
  detail::check_rank4(kernel, "conv2d kernel");
  const int64_t cin = input.dim(3), kh = kernel.dim(0), kw = kernel.dim(1);
  const int64_t cout = kernel.dim(3);
  if (kernel.dim(2) != cin) {
    throw shape_error("conv2d channel mismatch: input has Cin=" + std::to_string(cin) +
                      ", kernel expects Cin=" + std::to_string(kernel.dim(2)));
  }
  if (bias && !(bias->ndim() == 1 && bias->dim(0) == cout)) {
    throw shape_error("conv2d bias must have shape (" + std::to_string(cout) + "), got " +
                      shape_str(bias->shape()));
  }
  const int64_t oh = conv_out_extent(input.dim(1), kh, stride, padding);
  const int64_t ow = conv_out_extent(input.dim(2), kw, stride, padding);
  const int64_t pad_h = pad_before(input.dim(1), oh, kh, stride, padding);
  const int64_t pad_w = pad_before(input.dim(2), ow, kw, stride, padding);

  std::vector<T> col;
  detail::im2col(input, kh, kw, stride, pad_h, pad_w, oh, ow, col);

  const int64_t m = input.dim(0) * oh * ow;
  const int64_t k = kh * kw * cin;
  TensorT<T> out({input.dim(0), oh, ow, cout});
  detail::ConstMapRM<T> a(col.data(), m, k);
  detail::ConstMapRM<T> w(kernel.data(), k, cout);
  detail::MapRM<T> c(out.data(), m, cout);
  c.noalias() = a * w;
  if (bias) {
    detail::ConstMapRM<T> b(bias->data(), 1, cout);
    c.rowwise() += b.row(0);
  }
  return out;
}

template <typename T>
TensorT<T> conv2d(const TensorT<T>& input, const TensorT<T>& kernel, const TensorT<T>& bias,
                  int64_t stride, Padding padding) {
  return conv2d(input, kernel, &bias, stride, padding);
}

template <typename T>
struct Conv2dGrads {
  TensorT<T> input;
  TensorT<T> kernel;
  std::optional<TensorT<T>> bias;
};

template <typename T>
Conv2dGrads<T> conv2d_backward(const TensorT<T>& input, const TensorT<T>& kernel,
                               const TensorT<T>& grad_out, bool has_bias, int64_t stride,
                               Padding padding) {
  const int64_t cin = input.dim(3), kh = kernel.dim(0), kw = kernel.dim(1);
  const int64_t cout = kernel.dim(3);
  const int64_t oh = grad_out.dim(1), ow = grad_out.dim(2);
  const int64_t pad_h = pad_before(input.dim(1), oh, kh, stride, padding);
  const int64_t pad_w = pad_before(input.dim(2), ow, kw, stride, padding);
  const int64_t m = input.dim(0) * oh * ow;
  const int64_t k = kh * kw * cin;

  std::vector<T> col;
  detail::im2col(input, kh, kw, stride, pad_h, pad_w, oh, ow, col);

  Conv2dGrads<T> g;
  g.kernel = TensorT<T>(kernel.shape());
  {
    detail::ConstMapRM<T> a(col.data(), m, k);
    detail::ConstMapRM<T> dy(grad_out.data(), m, cout);
    detail::MapRM<T> dw(g.kernel.data(), k, cout);
    dw.noalias() = a.transpose() * dy;
  }
  if (has_bias) {
    g.bias = TensorT<T>({cout});
    detail::ConstMapRM<T> dy(grad_out.data(), m, cout);
    detail::MapRM<T> db(g.bias->data(), 1, cout);
    db.row(0) = dy.colwise().sum();
  }
  {
    std::vector<T> dcol(static_cast<size_t>(m * k));
    detail::ConstMapRM<T> dy(grad_out.data(), m, cout);
    detail::ConstMapRM<T> w(kernel.data(), k, cout);
    detail::MapRM<T> dc(dcol.data(), m, k);
    dc.noalias() = dy * w.transpose();
    g.input = TensorT<T>(input.shape());
    detail::col2im_add(dcol, kh, kw, stride, pad_h, pad_w, oh, ow, g.input);
  }
  return g;
}

// ---------------------------------------------------------------------------
// Pooling

enum class PoolKind { Max, Avg };

template <typename T>
TensorT<T> pool2d(const TensorT<T>& input, PoolKind kind, int64_t window, int64_t stride,
                  Padding padding) {
  detail::check_rank4(input, "pool2d input");
  if (window < 1) throw invalid_error("pool window must be >= 1, got " + std::to_string(window));
  const int64_t b_n = input.dim(0), in_h = input.dim(1), in_w = input.dim(2), c_n = input.dim(3);
  const int64_t oh = conv_out_extent(in_h, window, stride, padding);
  const int64_t ow = conv_out_extent(in_w, window, stride, padding);
  const int64_t pad_h = pad_before(in_h, oh, window, stride, padding);
  const int64_t pad_w = pad_before(in_w, ow, window, stride, padding);

  TensorT<T> out({b_n, oh, ow, c_n});
  for (int64_t b = 0; b < b_n; ++b) {
    for (int64_t y = 0; y < oh; ++y) {
      for (int64_t x = 0; x < ow; ++x) {
        const int64_t h0 = y * stride - pad_h;
        const int64_t w0 = x * stride - pad_w;
        for (int64_t c = 0; c < c_n; ++c) {
          if (kind == PoolKind::Max) {
            T best = std::numeric_limits<T>::lowest();
            for (int64_t i = 0; i < window; ++i) {
              const int64_t h = h0 + i;
              if (h < 0 || h >= in_h) continue;
              for (int64_t j = 0; j < window; ++j) {
                const int64_t w = w0 + j;
                if (w < 0 || w >= in_w) continue;
                best = std::max(best, input.at4(b, h, w, c));
              }
            }
            out.at4(b, y, x, c) = best;
          } else {
            // Mean over in-bounds taps only; padded cells do not dilute it.
            double sum = 0.0;
            int64_t count = 0;
            for (int64_t i = 0; i < window; ++i) {
              const int64_t h = h0 + i;
              if (h < 0 || h >= in_h) continue;
              for (int64_t j = 0; j < window; ++j) {
                const int64_t w = w0 + j;
                if (w < 0 || w >= in_w) continue;
                sum += static_cast<double>(input.at4(b, h, w, c));
                ++count;
              }
            }
            out.at4(b, y, x, c) = static_cast<T>(sum / static_cast<double>(count));
          }
        }
      }
    }
  }
  return out;
}

template <typename T>
TensorT<T> maxpool2d(const TensorT<T>& input, int64_t window, int64_t stride, Padding padding) {
  return pool2d(input, PoolKind::Max, window, stride, padding);
}

template <typename T>
TensorT<T> avgpool2d(const TensorT<T>& input, int64_t window, int64_t stride, Padding padding) {
  return pool2d(input, PoolKind::Avg, window, stride, padding);
}

// Max routes the gradient to the first (lowest flat index) maximal tap.
template <typename T>
TensorT<T> pool2d_backward(const TensorT<T>& input, const TensorT<T>& grad_out, PoolKind kind,
                           int64_t window, int64_t stride, Padding padding) {
  const int64_t b_n = input.dim(0), in_h = input.dim(1), in_w = input.dim(2), c_n = input.dim(3);
  const int64_t oh = grad_out.dim(1), ow = grad_out.dim(2);
  const int64_t pad_h = pad_before(in_h, oh, window, stride, padding);
  const int64_t pad_w = pad_before(in_w, ow, window, stride, padding);

  TensorT<T> grad_in(input.shape());
  for (int64_t b = 0; b < b_n; ++b) {
    for (int64_t y = 0; y < oh; ++y) {
      for (int64_t x = 0; x < ow; ++x) {
        const int64_t h0 = y * stride - pad_h;
        const int64_t w0 = x * stride - pad_w;
        for (int64_t c = 0; c < c_n; ++c) {
          if (kind == PoolKind::Max) {
            T best = std::numeric_limits<T>::lowest();
            int64_t best_h = -1, best_w = -1;
            for (int64_t i = 0; i < window; ++i) {
              const int64_t h = h0 + i;
              if (h < 0 || h >= in_h) continue;
              for (int64_t j = 0; j < window; ++j) {
                const int64_t w = w0 + j;
                if (w < 0 || w >= in_w) continue;
                if (input.at4(b, h, w, c) > best) {
                  best = input.at4(b, h, w, c);
                  best_h = h;
                  best_w = w;
                }
              }
            }
            if (best_h >= 0) grad_in.at4(b, best_h, best_w, c) += grad_out.at4(b, y, x, c);
          } else {
            int64_t count = 0;
            for (int64_t i = 0; i < window; ++i) {
              const int64_t h = h0 + i;
              if (h < 0 || h >= in_h) continue;
              for (int64_t j = 0; j < window; ++j) {
                const int64_t w = w0 + j;
                if (w < 0 || w >= in_w) continue;
                ++count;
              }
            }
            const T share = grad_out.at4(b, y, x, c) / static_cast<T>(count);
            for (int64_t i = 0; i < window; ++i) {
              const int64_t h = h0 + i;
              if (h < 0 || h >= in_h) continue;
              for (int64_t j = 0; j < window; ++j) {
                const int64_t w = w0 + j;
                if (w < 0 || w >= in_w) continue;
                grad_in.at4(b, h, w, c) += share;
              }
            }
          }
        }
      }
    }
  }
  return grad_in;
}

// ---------------------------------------------------------------------------
// Batch normalization

template <typename T>
struct BatchNormState {
  TensorT<T> moving_mean;
  TensorT<T> moving_var;

  static BatchNormState initial(int64_t channels) {
    BatchNormState s;
    s.moving_mean = TensorT<T>({channels});
    s.moving_var = TensorT<T>::full({channels}, T(1));
    return s;
  }
};

template <typename T>
struct BatchNormCache {
  TensorT<T> x_hat;            // normalized input, same shape as input
  std::vector<double> inv_std; // per channel
};

// Train mode: normalize by batch statistics (biased variance) and update the
// running state in place: running = momentum * running + (1-momentum) * batch.
template <typename T>
TensorT<T> batchnorm_train(const TensorT<T>& input, const TensorT<T>& gamma, const TensorT<T>& beta,
                           BatchNormState<T>& state, double momentum, double eps,
                           BatchNormCache<T>* cache) {
  detail::check_rank4(input, "batchnorm input");
  const int64_t b_n = input.dim(0), h_n = input.dim(1), w_n = input.dim(2), c_n = input.dim(3);
  const int64_t n = b_n * h_n * w_n;
  if (n < 2) {
    throw invalid_error("batchnorm train mode needs B*H*W >= 2, got " + std::to_string(n) +
                        " (variance undefined)");
  }
  if (gamma.dim(0) != c_n || beta.dim(0) != c_n) {
    throw shape_error("batchnorm gamma/beta must have " + std::to_string(c_n) + " channels");
  }
  std::vector<double> mean(static_cast<size_t>(c_n), 0.0), var(static_cast<size_t>(c_n), 0.0);
  const T* src = input.data();
  for (int64_t i = 0; i < n; ++i) {
    for (int64_t c = 0; c < c_n; ++c) mean[static_cast<size_t>(c)] += static_cast<double>(src[i * c_n + c]);
  }
  for (int64_t c = 0; c < c_n; ++c) mean[static_cast<size_t>(c)] /= static_cast<double>(n);
  for (int64_t i = 0; i < n; ++i) {
    for (int64_t c = 0; c < c_n; ++c) {
      const double d = static_cast<double>(src[i * c_n + c]) - mean[static_cast<size_t>(c)];
      var[static_cast<size_t>(c)] += d * d;
    }
  }
  for (int64_t c = 0; c < c_n; ++c) var[static_cast<size_t>(c)] /= static_cast<double>(n);

  TensorT<T> out(input.shape());
  std::vector<double> inv_std(static_cast<size_t>(c_n));
  for (int64_t c = 0; c < c_n; ++c) {
    inv_std[static_cast<size_t>(c)] = 1.0 / std::sqrt(var[static_cast<size_t>(c)] + eps);
  }
  TensorT<T> x_hat(input.shape());
  T* xh = x_hat.data();
  T* dst = out.data();
  for (int64_t i = 0; i < n; ++i) {
    for (int64_t c = 0; c < c_n; ++c) {
      const size_t cc = static_cast<size_t>(c);
      const double norm = (static_cast<double>(src[i * c_n + c]) - mean[cc]) * inv_std[cc];
      xh[i * c_n + c] = static_cast<T>(norm);
      dst[i * c_n + c] =
          static_cast<T>(static_cast<double>(gamma[c]) * norm + static_cast<double>(beta[c]));
    }
  }
  for (int64_t c = 0; c < c_n; ++c) {
    const size_t cc = static_cast<size_t>(c);
    state.moving_mean[c] =
        static_cast<T>(momentum * static_cast<double>(state.moving_mean[c]) + (1.0 - momentum) * mean[cc]);
    state.moving_var[c] =
        static_cast<T>(momentum * static_cast<double>(state.moving_var[c]) + (1.0 - momentum) * var[cc]);
  }
  if (cache) {
    cache->x_hat = std::move(x_hat);
    cache->inv_std = std::move(inv_std);
  }
  return out;
}

template <typename T>
TensorT<T> batchnorm_eval(const TensorT<T>& input, const TensorT<T>& gamma, const TensorT<T>& beta,
                          const BatchNormState<T>& state, double eps) {
  detail::check_rank4(input, "batchnorm input");
  const int64_t c_n = input.dim(3);
  if (gamma.dim(0) != c_n || beta.dim(0) != c_n) {
    throw shape_error("batchnorm gamma/beta must have " + std::to_string(c_n) + " channels");
  }
  TensorT<T> out(input.shape());
  const int64_t n = input.size() / c_n;
  const T* src = input.data();
  T* dst = out.data();
  for (int64_t c = 0; c < c_n; ++c) {
    const double inv_std = 1.0 / std::sqrt(static_cast<double>(state.moving_var[c]) + eps);
    const double scale = static_cast<double>(gamma[c]) * inv_std;
    const double shift =
        static_cast<double>(beta[c]) - scale * static_cast<double>(state.moving_mean[c]);
    for (int64_t i = 0; i < n; ++i) {
      dst[i * c_n + c] = static_cast<T>(scale * static_cast<double>(src[i * c_n + c]) + shift);
    }
  }
  return out;
}

template <typename T>
struct BatchNormGrads {
  TensorT<T> input;
  TensorT<T> gamma;
  TensorT<T> beta;
};

template <typename T>
BatchNormGrads<T> batchnorm_backward(const TensorT<T>& grad_out, const TensorT<T>& gamma,
                                     const BatchNormCache<T>& cache) {
  const int64_t c_n = grad_out.dim(3);
  const int64_t n = grad_out.size() / c_n;
  BatchNormGrads<T> g;
  g.input = TensorT<T>(grad_out.shape());
  g.gamma = TensorT<T>({c_n});
  g.beta = TensorT<T>({c_n});

  std::vector<double> sum_dy(static_cast<size_t>(c_n), 0.0);
  std::vector<double> sum_dy_xhat(static_cast<size_t>(c_n), 0.0);
  const T* dy = grad_out.data();
  const T* xh = cache.x_hat.data();
  for (int64_t i = 0; i < n; ++i) {
    for (int64_t c = 0; c < c_n; ++c) {
      const size_t cc = static_cast<size_t>(c);
      sum_dy[cc] += static_cast<double>(dy[i * c_n + c]);
      sum_dy_xhat[cc] += static_cast<double>(dy[i * c_n + c]) * static_cast<double>(xh[i * c_n + c]);
    }
  }
  for (int64_t c = 0; c < c_n; ++c) {
    g.beta[c] = static_cast<T>(sum_dy[static_cast<size_t>(c)]);
    g.gamma[c] = static_cast<T>(sum_dy_xhat[static_cast<size_t>(c)]);
  }
  T* dx = g.input.data();
  for (int64_t c = 0; c < c_n; ++c) {
    const size_t cc = static_cast<size_t>(c);
    const double k = static_cast<double>(gamma[c]) * cache.inv_std[cc] / static_cast<double>(n);
    for (int64_t i = 0; i < n; ++i) {
      const double t = static_cast<double>(n) * static_cast<double>(dy[i * c_n + c]) - sum_dy[cc] -
                       static_cast<double>(xh[i * c_n + c]) * sum_dy_xhat[cc];
      dx[i * c_n + c] = static_cast<T>(k * t);
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// Dense

template <typename T>
TensorT<T> dense(const TensorT<T>& input, const TensorT<T>& weight, const TensorT<T>& bias) {
  if (input.ndim() != 2 || weight.ndim() != 2) {
    throw shape_error("dense expects rank-2 input and weight, got " + shape_str(input.shape()) +
                      " and " + shape_str(weight.shape()));
  }
  if (input.dim(1) != weight.dim(0)) {
    throw shape_error("dense dimension mismatch: input D=" + std::to_string(input.dim(1)) +
                      " vs weight D=" + std::to_string(weight.dim(0)));
  }
  if (bias.ndim() != 1 || bias.dim(0) != weight.dim(1)) {
    throw shape_error("dense bias must have shape (" + std::to_string(weight.dim(1)) + ")");
  }
  const int64_t b_n = input.dim(0), d = input.dim(1), k = weight.dim(1);
  TensorT<T> out({b_n, k});
  detail::ConstMapRM<T> x(input.data(), b_n, d);
  detail::ConstMapRM<T> w(weight.data(), d, k);
  detail::MapRM<T> y(out.data(), b_n, k);
  y.noalias() = x * w;
  detail::ConstMapRM<T> b(bias.data(), 1, k);
  y.rowwise() += b.row(0);
  return out;
}

template <typename T>
struct DenseGrads {
  TensorT<T> input;
  TensorT<T> weight;
  TensorT<T> bias;
};

template <typename T>
DenseGrads<T> dense_backward(const TensorT<T>& input, const TensorT<T>& weight,
                             const TensorT<T>& grad_out) {
  const int64_t b_n = input.dim(0), d = input.dim(1), k = weight.dim(1);
  DenseGrads<T> g{TensorT<T>(input.shape()), TensorT<T>(weight.shape()), TensorT<T>({k})};
  detail::ConstMapRM<T> x(input.data(), b_n, d);
  detail::ConstMapRM<T> w(weight.data(), d, k);
  detail::ConstMapRM<T> dy(grad_out.data(), b_n, k);
  detail::MapRM<T>(g.weight.data(), d, k).noalias() = x.transpose() * dy;
  detail::MapRM<T>(g.input.data(), b_n, d).noalias() = dy * w.transpose();
  detail::MapRM<T>(g.bias.data(), 1, k).row(0) = dy.colwise().sum();
  return g;
}

// ---------------------------------------------------------------------------
// Concatenation along channels

template <typename T>
TensorT<T> concat_channels(const std::vector<const TensorT<T>*>& inputs) {
  if (inputs.empty()) throw invalid_error("concat_channels needs at least one input");
  const TensorT<T>& first = *inputs[0];
  detail::check_rank4(first, "concat input");
  int64_t total_c = 0;
  for (const TensorT<T>* t : inputs) {
    detail::check_rank4(*t, "concat input");
    if (t->dim(0) != first.dim(0) || t->dim(1) != first.dim(1) || t->dim(2) != first.dim(2)) {
      throw shape_error("concat spatial mismatch: " + shape_str(first.shape()) + " vs " +
                        shape_str(t->shape()));
    }
    total_c += t->dim(3);
  }
  TensorT<T> out({first.dim(0), first.dim(1), first.dim(2), total_c});
  const int64_t cells = first.dim(0) * first.dim(1) * first.dim(2);
  int64_t offset = 0;
  for (const TensorT<T>* t : inputs) {
    const int64_t c = t->dim(3);
    for (int64_t i = 0; i < cells; ++i) {
      std::memcpy(out.data() + i * total_c + offset, t->data() + i * c,
                  sizeof(T) * static_cast<size_t>(c));
    }
    offset += c;
  }
  return out;
}

// Splits the upstream gradient back into per-input gradients by channel offset.
template <typename T>
std::vector<TensorT<T>> concat_channels_backward(const TensorT<T>& grad_out,
                                                 const std::vector<Shape>& input_shapes) {
  std::vector<TensorT<T>> grads;
  grads.reserve(input_shapes.size());
  const int64_t total_c = grad_out.dim(3);
  const int64_t cells = grad_out.dim(0) * grad_out.dim(1) * grad_out.dim(2);
  int64_t offset = 0;
  for (const Shape& s : input_shapes) {
    TensorT<T> g(s);
    const int64_t c = s[3];
    for (int64_t i = 0; i < cells; ++i) {
      std::memcpy(g.data() + i * c, grad_out.data() + i * total_c + offset,
                  sizeof(T) * static_cast<size_t>(c));
    }
    offset += c;
    grads.push_back(std::move(g));
  }
  return grads;
}

// ---------------------------------------------------------------------------
// Residual addition, activations, losses

template <typename T>
TensorT<T> residual_add_scaled(const TensorT<T>& shortcut, const TensorT<T>& branch, double scale) {
  if (!shortcut.same_shape(branch)) {
    throw shape_error("residual add shape mismatch: " + shape_str(shortcut.shape()) + " vs " +
                      shape_str(branch.shape()));
  }
  TensorT<T> out(shortcut.shape());
  for (int64_t i = 0; i < out.size(); ++i) {
    out[i] = shortcut[i] + static_cast<T>(scale) * branch[i];
  }
  return out;
}

template <typename T>
TensorT<T> relu(const TensorT<T>& input) {
  TensorT<T> out(input.shape());
  for (int64_t i = 0; i < input.size(); ++i) out[i] = input[i] > T(0) ? input[i] : T(0);
  return out;
}

// Subgradient at exactly 0 is 0.
template <typename T>
TensorT<T> relu_backward(const TensorT<T>& input, const TensorT<T>& grad_out) {
  TensorT<T> g(input.shape());
  for (int64_t i = 0; i < input.size(); ++i) g[i] = input[i] > T(0) ? grad_out[i] : T(0);
  return g;
}

// Elementwise a*x + b. The stem uses it to shift [0,1] pixels to [-1,1].
template <typename T>
TensorT<T> affine_rescale(const TensorT<T>& input, double a, double b) {
  TensorT<T> out(input.shape());
  for (int64_t i = 0; i < input.size(); ++i) {
    out[i] = static_cast<T>(a * static_cast<double>(input[i]) + b);
  }
  return out;
}

// Row-wise softmax with max subtraction.
template <typename T>
TensorT<T> softmax(const TensorT<T>& logits) {
  if (logits.ndim() != 2) throw shape_error("softmax expects rank-2 logits");
  const int64_t b_n = logits.dim(0), k_n = logits.dim(1);
  TensorT<T> out(logits.shape());
  for (int64_t b = 0; b < b_n; ++b) {
    double mx = static_cast<double>(logits.at2(b, 0));
    for (int64_t k = 1; k < k_n; ++k) mx = std::max(mx, static_cast<double>(logits.at2(b, k)));
    double sum = 0.0;
    for (int64_t k = 0; k < k_n; ++k) sum += std::exp(static_cast<double>(logits.at2(b, k)) - mx);
    for (int64_t k = 0; k < k_n; ++k) {
      out.at2(b, k) = static_cast<T>(std::exp(static_cast<double>(logits.at2(b, k)) - mx) / sum);
    }
  }
  return out;
}

template <typename T>
struct SoftmaxXentResult {
  double loss = 0.0;       // mean over the batch
  TensorT<T> grad_logits;  // (softmax - onehot) / B
  TensorT<T> probs;
};

template <typename T>
SoftmaxXentResult<T> softmax_cross_entropy(const TensorT<T>& logits,
                                           const std::vector<int>& labels) {
  if (logits.ndim() != 2) throw shape_error("softmax_cross_entropy expects rank-2 logits");
  const int64_t b_n = logits.dim(0), k_n = logits.dim(1);
  if (static_cast<int64_t>(labels.size()) != b_n) {
    throw shape_error("labels length " + std::to_string(labels.size()) + " != batch " +
                      std::to_string(b_n));
  }
  for (size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= k_n) {
      throw invalid_error("label " + std::to_string(labels[i]) + " at index " + std::to_string(i) +
                          " out of range [0," + std::to_string(k_n) + ")");
    }
  }
  SoftmaxXentResult<T> r;
  r.probs = softmax(logits);
  r.grad_logits = TensorT<T>(logits.shape());
  double total = 0.0;
  for (int64_t b = 0; b < b_n; ++b) {
    const double mx = [&] {
      double m = static_cast<double>(logits.at2(b, 0));
      for (int64_t k = 1; k < k_n; ++k) m = std::max(m, static_cast<double>(logits.at2(b, k)));
      return m;
    }();
    double sum = 0.0;
    for (int64_t k = 0; k < k_n; ++k) sum += std::exp(static_cast<double>(logits.at2(b, k)) - mx);
    const double log_z = mx + std::log(sum);
    total += log_z - static_cast<double>(logits.at2(b, labels[static_cast<size_t>(b)]));
    for (int64_t k = 0; k < k_n; ++k) {
      double g = static_cast<double>(r.probs.at2(b, k));
      if (k == labels[static_cast<size_t>(b)]) g -= 1.0;
      r.grad_logits.at2(b, k) = static_cast<T>(g / static_cast<double>(b_n));
    }
  }
  r.loss = total / static_cast<double>(b_n);
  return r;
}

// ---------------------------------------------------------------------------
// Dropout and global pooling

template <typename T>
struct DropoutResult {
  TensorT<T> output;
  TensorT<T> scaled_mask;  // 0 or 1/(1-rate); backward is an elementwise product
};

template <typename T>
DropoutResult<T> dropout_train(const TensorT<T>& input, double rate, uint64_t seed) {
  if (rate < 0.0 || rate >= 1.0) {
    throw invalid_error("dropout rate must be in [0,1), got " + std::to_string(rate));
  }
  DropoutResult<T> r{TensorT<T>(input.shape()), TensorT<T>(input.shape())};
  if (rate == 0.0) {
    r.output = input;
    r.scaled_mask = TensorT<T>::full(input.shape(), T(1));
    return r;
  }
  Rng rng(seed);
  const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
  for (int64_t i = 0; i < input.size(); ++i) {
    const bool keep = rng.next_double() >= rate;
    r.scaled_mask[i] = keep ? keep_scale : T(0);
    r.output[i] = input[i] * r.scaled_mask[i];
  }
  return r;
}

template <typename T>
TensorT<T> global_avg_pool(const TensorT<T>& input) {
  detail::check_rank4(input, "global_avg_pool input");
  const int64_t b_n = input.dim(0), cells = input.dim(1) * input.dim(2), c_n = input.dim(3);
  TensorT<T> out({b_n, c_n});
  for (int64_t b = 0; b < b_n; ++b) {
    for (int64_t c = 0; c < c_n; ++c) {
      double sum = 0.0;
      for (int64_t i = 0; i < cells; ++i) {
        sum += static_cast<double>(input[(b * cells + i) * c_n + c]);
      }
      out.at2(b, c) = static_cast<T>(sum / static_cast<double>(cells));
    }
  }
  return out;
}

template <typename T>
TensorT<T> global_avg_pool_backward(const Shape& input_shape, const TensorT<T>& grad_out) {
  TensorT<T> g(input_shape);
  const int64_t b_n = input_shape[0], cells = input_shape[1] * input_shape[2], c_n = input_shape[3];
  for (int64_t b = 0; b < b_n; ++b) {
    for (int64_t c = 0; c < c_n; ++c) {
      const T share = grad_out.at2(b, c) / static_cast<T>(cells);
      for (int64_t i = 0; i < cells; ++i) g[(b * cells + i) * c_n + c] = share;
    }
  }
  return g;
}

}  // namespace irnet::ops
