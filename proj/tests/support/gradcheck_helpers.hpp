#pragma once

// Builders that wrap each differentiable primitive as a scalar function for
// finite-difference checking. The scalar is a fixed random weighted sum of the
// op's output, so its gradient exercises the general backward path. The
// function itself always evaluates in 64-bit; the analytic gradients come from
// the path under test (float production path or double verification path).

#include <functional>
#include <string>
#include <vector>

#include "irnet/gradcheck.hpp"
#include "irnet/ops.hpp"
#include "irnet/rng.hpp"
#include "irnet/tensor.hpp"

namespace gradcase {

struct GradCase {
  std::string op;
  std::vector<irnet::TensorT<double>> point;
  std::vector<irnet::TensorT<double>> analytic;
  std::vector<std::string> names;
  irnet::ScalarFn fn;
};

template <typename T>
irnet::TensorT<T> rand_t(irnet::Shape shape, irnet::Rng& rng, double lo = -1.0, double hi = 1.0) {
  irnet::TensorT<T> t(std::move(shape));
  for (int64_t i = 0; i < t.size(); ++i) t[i] = static_cast<T>(rng.uniform(lo, hi));
  return t;
}

// Values bounded away from zero so relu/maxpool kinks sit far from the
// finite-difference step.
template <typename T>
irnet::TensorT<T> rand_away_from_zero(irnet::Shape shape, irnet::Rng& rng, double margin = 0.05) {
  irnet::TensorT<T> t(std::move(shape));
  for (int64_t i = 0; i < t.size(); ++i) {
    const double mag = rng.uniform(margin, 1.0);
    t[i] = static_cast<T>(rng.next_double() < 0.5 ? -mag : mag);
  }
  return t;
}

// Distinct well-separated values for maxpool argmax stability.
template <typename T>
irnet::TensorT<T> rand_distinct(irnet::Shape shape, irnet::Rng& rng) {
  irnet::TensorT<T> t(std::move(shape));
  std::vector<int64_t> ranks(static_cast<size_t>(t.size()));
  for (int64_t i = 0; i < t.size(); ++i) ranks[static_cast<size_t>(i)] = i;
  rng.shuffle(ranks);
  for (int64_t i = 0; i < t.size(); ++i) {
    t[i] = static_cast<T>(0.01 * static_cast<double>(ranks[static_cast<size_t>(i)]) - 0.005 * static_cast<double>(t.size()));
  }
  return t;
}

inline double weighted_sum(const irnet::TensorT<double>& u, const irnet::TensorT<double>& y) {
  double s = 0;
  for (int64_t i = 0; i < y.size(); ++i) s += u[i] * y[i];
  return s;
}

// T selects the path producing the analytic gradients.
template <typename T>
GradCase conv_case(irnet::Rng& rng) {
  using irnet::ops::Padding;
  const int64_t h = rng.uniform_int(4, 7), w = rng.uniform_int(4, 7);
  const int64_t kh = rng.uniform_int(1, 3), kw = rng.uniform_int(1, 3);
  const int64_t cin = rng.uniform_int(1, 3), cout = rng.uniform_int(1, 3);
  const int64_t stride = rng.uniform_int(1, 2);
  const Padding pad = rng.next_double() < 0.5 ? Padding::Same : Padding::Valid;

  auto x = rand_t<T>({2, h, w, cin}, rng);
  auto k = rand_t<T>({kh, kw, cin, cout}, rng);
  auto b = rand_t<T>({cout}, rng);
  auto y = irnet::ops::conv2d(x, k, b, stride, pad);
  auto u = rand_t<T>(y.shape(), rng);

  auto g = irnet::ops::conv2d_backward(x, k, u, true, stride, pad);
  GradCase c;
  c.op = "conv2d";
  c.point = {x.template cast<double>(), k.template cast<double>(), b.template cast<double>()};
  c.analytic = {g.input.template cast<double>(), g.kernel.template cast<double>(),
                g.bias->template cast<double>()};
  c.names = {"input", "kernel", "bias"};
  auto u64 = u.template cast<double>();
  c.fn = [u64, stride, pad](const std::vector<irnet::Tensor64>& p) {
    return weighted_sum(u64, irnet::ops::conv2d(p[0], p[1], p[2], stride, pad));
  };
  return c;
}

template <typename T>
GradCase dense_case(irnet::Rng& rng) {
  const int64_t b_n = rng.uniform_int(1, 4), d = rng.uniform_int(2, 6), k = rng.uniform_int(2, 5);
  auto x = rand_t<T>({b_n, d}, rng);
  auto w = rand_t<T>({d, k}, rng);
  auto bias = rand_t<T>({k}, rng);
  auto y = irnet::ops::dense(x, w, bias);
  auto u = rand_t<T>(y.shape(), rng);
  auto g = irnet::ops::dense_backward(x, w, u);
  GradCase c;
  c.op = "dense";
  c.point = {x.template cast<double>(), w.template cast<double>(), bias.template cast<double>()};
  c.analytic = {g.input.template cast<double>(), g.weight.template cast<double>(),
                g.bias.template cast<double>()};
  c.names = {"input", "weight", "bias"};
  auto u64 = u.template cast<double>();
  c.fn = [u64](const std::vector<irnet::Tensor64>& p) {
    return weighted_sum(u64, irnet::ops::dense(p[0], p[1], p[2]));
  };
  return c;
}

template <typename T>
GradCase relu_case(irnet::Rng& rng) {
  auto x = rand_away_from_zero<T>({2, rng.uniform_int(3, 8)}, rng);
  auto u = rand_t<T>(x.shape(), rng);
  auto g = irnet::ops::relu_backward(x, u);
  GradCase c;
  c.op = "relu";
  c.point = {x.template cast<double>()};
  c.analytic = {g.template cast<double>()};
  c.names = {"input"};
  auto u64 = u.template cast<double>();
  c.fn = [u64](const std::vector<irnet::Tensor64>& p) {
    return weighted_sum(u64, irnet::ops::relu(p[0]));
  };
  return c;
}

template <typename T>
GradCase maxpool_case(irnet::Rng& rng) {
  using irnet::ops::Padding;
  const int64_t h = rng.uniform_int(4, 7);
  const int64_t window = rng.uniform_int(2, 3), stride = rng.uniform_int(1, 2);
  const Padding pad = rng.next_double() < 0.5 ? Padding::Same : Padding::Valid;
  auto x = rand_distinct<T>({1, h, h, rng.uniform_int(1, 3)}, rng);
  auto y = irnet::ops::maxpool2d(x, window, stride, pad);
  auto u = rand_t<T>(y.shape(), rng);
  auto g = irnet::ops::pool2d_backward(x, u, irnet::ops::PoolKind::Max, window, stride, pad);
  GradCase c;
  c.op = "maxpool2d";
  c.point = {x.template cast<double>()};
  c.analytic = {g.template cast<double>()};
  c.names = {"input"};
  auto u64 = u.template cast<double>();
  c.fn = [u64, window, stride, pad](const std::vector<irnet::Tensor64>& p) {
    return weighted_sum(u64, irnet::ops::maxpool2d(p[0], window, stride, pad));
  };
  return c;
}

template <typename T>
GradCase avgpool_case(irnet::Rng& rng) {
  using irnet::ops::Padding;
  const int64_t h = rng.uniform_int(4, 7);
  const int64_t window = rng.uniform_int(2, 3), stride = rng.uniform_int(1, 2);
  const Padding pad = rng.next_double() < 0.5 ? Padding::Same : Padding::Valid;
  auto x = rand_t<T>({2, h, h, rng.uniform_int(1, 3)}, rng);
  auto y = irnet::ops::avgpool2d(x, window, stride, pad);
  auto u = rand_t<T>(y.shape(), rng);
  auto g = irnet::ops::pool2d_backward(x, u, irnet::ops::PoolKind::Avg, window, stride, pad);
  GradCase c;
  c.op = "avgpool2d";
  c.point = {x.template cast<double>()};
  c.analytic = {g.template cast<double>()};
  c.names = {"input"};
  auto u64 = u.template cast<double>();
  c.fn = [u64, window, stride, pad](const std::vector<irnet::Tensor64>& p) {
    return weighted_sum(u64, irnet::ops::avgpool2d(p[0], window, stride, pad));
  };
  return c;
}

template <typename T>
GradCase batchnorm_case(irnet::Rng& rng) {
  const int64_t c_n = rng.uniform_int(1, 3);
  auto x = rand_t<T>({2, rng.uniform_int(2, 4), rng.uniform_int(2, 4), c_n}, rng);
  auto gamma = rand_t<T>({c_n}, rng, 0.5, 1.5);
  auto beta = rand_t<T>({c_n}, rng);
  auto state = irnet::ops::BatchNormState<T>::initial(c_n);
  irnet::ops::BatchNormCache<T> cache;
  auto y = irnet::ops::batchnorm_train(x, gamma, beta, state, 0.99, 1e-3, &cache);
  auto u = rand_t<T>(y.shape(), rng);
  auto g = irnet::ops::batchnorm_backward(u, gamma, cache);
  GradCase c;
  c.op = "batchnorm";
  c.point = {x.template cast<double>(), gamma.template cast<double>(), beta.template cast<double>()};
  c.analytic = {g.input.template cast<double>(), g.gamma.template cast<double>(),
                g.beta.template cast<double>()};
  c.names = {"input", "gamma", "beta"};
  auto u64 = u.template cast<double>();
  c.fn = [u64](const std::vector<irnet::Tensor64>& p) {
    auto state64 = irnet::ops::BatchNormState<double>::initial(p[1].dim(0));
    return weighted_sum(u64, irnet::ops::batchnorm_train(p[0], p[1], p[2], state64, 0.99, 1e-3,
                                                         nullptr));
  };
  return c;
}

template <typename T>
GradCase concat_case(irnet::Rng& rng) {
  const int64_t h = rng.uniform_int(2, 4);
  auto a = rand_t<T>({2, h, h, rng.uniform_int(1, 3)}, rng);
  auto b = rand_t<T>({2, h, h, rng.uniform_int(1, 3)}, rng);
  auto y = irnet::ops::concat_channels<T>({&a, &b});
  auto u = rand_t<T>(y.shape(), rng);
  auto parts = irnet::ops::concat_channels_backward(u, {a.shape(), b.shape()});
  GradCase c;
  c.op = "concat_channels";
  c.point = {a.template cast<double>(), b.template cast<double>()};
  c.analytic = {parts[0].template cast<double>(), parts[1].template cast<double>()};
  c.names = {"a", "b"};
  auto u64 = u.template cast<double>();
  c.fn = [u64](const std::vector<irnet::Tensor64>& p) {
    return weighted_sum(u64, irnet::ops::concat_channels<double>({&p[0], &p[1]}));
  };
  return c;
}

template <typename T>
GradCase residual_case(irnet::Rng& rng) {
  const double scale = rng.uniform(0.1, 1.0);
  auto s = rand_t<T>({2, 3, 3, 2}, rng);
  auto br = rand_t<T>(s.shape(), rng);
  auto u = rand_t<T>(s.shape(), rng);
  GradCase c;
  c.op = "residual_add_scaled";
  c.point = {s.template cast<double>(), br.template cast<double>()};
  irnet::TensorT<T> ds = u;
  irnet::TensorT<T> db(u.shape());
  for (int64_t i = 0; i < u.size(); ++i) db[i] = static_cast<T>(scale) * u[i];
  c.analytic = {ds.template cast<double>(), db.template cast<double>()};
  c.names = {"shortcut", "branch"};
  auto u64 = u.template cast<double>();
  c.fn = [u64, scale](const std::vector<irnet::Tensor64>& p) {
    return weighted_sum(u64, irnet::ops::residual_add_scaled(p[0], p[1], scale));
  };
  return c;
}

template <typename T>
GradCase softmax_xent_case(irnet::Rng& rng) {
  const int64_t b_n = rng.uniform_int(1, 4), k = rng.uniform_int(2, 5);
  auto logits = rand_t<T>({b_n, k}, rng, -2.0, 2.0);
  std::vector<int> labels;
  for (int64_t i = 0; i < b_n; ++i) labels.push_back(static_cast<int>(rng.next_below(static_cast<uint64_t>(k))));
  auto r = irnet::ops::softmax_cross_entropy(logits, labels);
  GradCase c;
  c.op = "softmax_cross_entropy";
  c.point = {logits.template cast<double>()};
  c.analytic = {r.grad_logits.template cast<double>()};
  c.names = {"logits"};
  c.fn = [labels](const std::vector<irnet::Tensor64>& p) {
    return irnet::ops::softmax_cross_entropy(p[0], labels).loss;
  };
  return c;
}

template <typename T>
GradCase global_avg_pool_case(irnet::Rng& rng) {
  auto x = rand_t<T>({2, rng.uniform_int(2, 4), rng.uniform_int(2, 4), rng.uniform_int(1, 3)}, rng);
  auto y = irnet::ops::global_avg_pool(x);
  auto u = rand_t<T>(y.shape(), rng);
  auto g = irnet::ops::global_avg_pool_backward(x.shape(), u);
  GradCase c;
  c.op = "global_avg_pool";
  c.point = {x.template cast<double>()};
  c.analytic = {g.template cast<double>()};
  c.names = {"input"};
  auto u64 = u.template cast<double>();
  c.fn = [u64](const std::vector<irnet::Tensor64>& p) {
    return weighted_sum(u64, irnet::ops::global_avg_pool(p[0]));
  };
  return c;
}

// All primitive case builders for the path selected by T.
template <typename T>
std::vector<std::function<GradCase(irnet::Rng&)>> all_cases() {
  return {
      conv_case<T>,     dense_case<T>,    relu_case<T>,        maxpool_case<T>,
      avgpool_case<T>,  batchnorm_case<T>, concat_case<T>,     residual_case<T>,
      softmax_xent_case<T>, global_avg_pool_case<T>,
  };
}

}  // namespace gradcase
