#pragma once

// Independent reference implementations used as test oracles. These must stay
// decoupled from the production code paths they check: conv here is direct
// summation (no im2col), AUC is trapezoidal ROC integration (no rank trick),
// metrics are per-sample counting.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "irnet/tensor.hpp"

namespace oracle {

// Output extent from the closed-form shape rules.
inline int64_t out_extent(int64_t in, int64_t k, int64_t stride, bool same) {
  if (same) return (in + stride - 1) / stride;  // ceil(in/stride)
  return (in - k) / stride + 1;                 // floor((in-k)/stride)+1
}

// Direct-summation convolution, channels-last, extra pad at bottom/right.
template <typename T>
irnet::TensorT<T> conv2d_direct(const irnet::TensorT<T>& input, const irnet::TensorT<T>& kernel,
                                const irnet::TensorT<T>& bias, int64_t stride, bool same) {
  const int64_t b_n = input.dim(0), in_h = input.dim(1), in_w = input.dim(2), cin = input.dim(3);
  const int64_t kh = kernel.dim(0), kw = kernel.dim(1), cout = kernel.dim(3);
  const int64_t oh = out_extent(in_h, kh, stride, same);
  const int64_t ow = out_extent(in_w, kw, stride, same);
  const int64_t pad_h = same ? std::max<int64_t>((oh - 1) * stride + kh - in_h, 0) / 2 : 0;
  const int64_t pad_w = same ? std::max<int64_t>((ow - 1) * stride + kw - in_w, 0) / 2 : 0;
  irnet::TensorT<T> out({b_n, oh, ow, cout});
  for (int64_t b = 0; b < b_n; ++b)
    for (int64_t y = 0; y < oh; ++y)
      for (int64_t x = 0; x < ow; ++x)
        for (int64_t co = 0; co < cout; ++co) {
          double acc = static_cast<double>(bias[co]);
          for (int64_t i = 0; i < kh; ++i)
            for (int64_t j = 0; j < kw; ++j) {
              const int64_t h = y * stride - pad_h + i;
              const int64_t w = x * stride - pad_w + j;
              if (h < 0 || h >= in_h || w < 0 || w >= in_w) continue;
              for (int64_t ci = 0; ci < cin; ++ci) {
                acc += static_cast<double>(input.at4(b, h, w, ci)) *
                       static_cast<double>(kernel.at4(i, j, ci, co));
              }
            }
          out.at4(b, y, x, co) = static_cast<T>(acc);
        }
  return out;
}

// Trapezoidal integration of the empirical ROC curve over all thresholds.
inline double trapezoid_auc(const std::vector<int>& labels, const std::vector<double>& scores) {
  std::vector<size_t> order(scores.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(),
            [&](size_t a, size_t b) { return scores[a] > scores[b]; });
  double pos = 0, neg = 0;
  for (int y : labels) (y == 1 ? pos : neg) += 1;
  double auc = 0.0;
  double tp = 0, fp = 0, prev_tp = 0, prev_fp = 0;
  size_t i = 0;
  while (i < order.size()) {
    // Advance over a tie group so tied scores form one ROC segment.
    const double s = scores[order[i]];
    while (i < order.size() && scores[order[i]] == s) {
      if (labels[order[i]] == 1) tp += 1;
      else fp += 1;
      ++i;
    }
    auc += (fp - prev_fp) / neg * (tp + prev_tp) / (2.0 * pos);
    prev_tp = tp;
    prev_fp = fp;
  }
  return auc;
}

struct Counts {
  int64_t tp = 0, tn = 0, fp = 0, fn = 0;
};

// Per-sample counting with positive class 1.
inline Counts count_confusion(const std::vector<int>& labels, const std::vector<int>& preds) {
  Counts c;
  for (size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] == 1 && preds[i] == 1) ++c.tp;
    if (labels[i] == 0 && preds[i] == 0) ++c.tn;
    if (labels[i] == 0 && preds[i] == 1) ++c.fp;
    if (labels[i] == 1 && preds[i] == 0) ++c.fn;
  }
  return c;
}

// Scalar bilinear interpolation with half-pixel-centered sampling.
inline double bilinear_sample(const irnet::Tensor& img, double y, double x, int64_t c) {
  const int64_t h = img.dim(0), w = img.dim(1);
  const auto clamp = [](double v, double lo, double hi) { return std::min(std::max(v, lo), hi); };
  y = clamp(y, 0.0, static_cast<double>(h - 1));
  x = clamp(x, 0.0, static_cast<double>(w - 1));
  const int64_t y0 = static_cast<int64_t>(std::floor(y));
  const int64_t x0 = static_cast<int64_t>(std::floor(x));
  const int64_t y1 = std::min(y0 + 1, h - 1);
  const int64_t x1 = std::min(x0 + 1, w - 1);
  const double fy = y - static_cast<double>(y0);
  const double fx = x - static_cast<double>(x0);
  const auto px = [&](int64_t yy, int64_t xx) {
    return static_cast<double>(img[(yy * w + xx) * img.dim(2) + c]);
  };
  return px(y0, x0) * (1 - fy) * (1 - fx) + px(y0, x1) * (1 - fy) * fx +
         px(y1, x0) * fy * (1 - fx) + px(y1, x1) * fy * fx;
}

// Best achievable accuracy thresholding a single feature (either polarity).
inline double best_threshold_accuracy(const std::vector<double>& feature,
                                      const std::vector<int>& labels) {
  std::vector<size_t> order(feature.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(),
            [&](size_t a, size_t b) { return feature[a] < feature[b]; });
  const double n = static_cast<double>(labels.size());
  double pos_total = 0;
  for (int y : labels) pos_total += (y == 1);
  // Sweep cut points; below the cut predict one class, above the other.
  double best = 0.0;
  double pos_below = 0, count_below = 0;
  for (size_t cut = 0; cut <= order.size(); ++cut) {
    const double neg_below = count_below - pos_below;
    const double pos_above = pos_total - pos_below;
    const double neg_above = (n - pos_total) - neg_below;
    const double acc_a = (neg_below + pos_above) / n;  // predict 1 above cut
    const double acc_b = (pos_below + neg_above) / n;  // predict 1 below cut
    best = std::max({best, acc_a, acc_b});
    if (cut < order.size()) {
      pos_below += (labels[order[cut]] == 1);
      count_below += 1;
    }
  }
  return best;
}

}  // namespace oracle
