#pragma once

#include "irnet/rng.hpp"
#include "irnet/tensor.hpp"

namespace testutil {

template <typename T>
irnet::TensorT<T> random_tensor(irnet::Shape shape, irnet::Rng& rng, double lo = -1.0,
                                double hi = 1.0) {
  irnet::TensorT<T> t(std::move(shape));
  for (int64_t i = 0; i < t.size(); ++i) t[i] = static_cast<T>(rng.uniform(lo, hi));
  return t;
}

template <typename T>
double max_abs_diff(const irnet::TensorT<T>& a, const irnet::TensorT<T>& b) {
  double m = 0.0;
  for (int64_t i = 0; i < a.size(); ++i) {
    m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  }
  return m;
}

}  // namespace testutil
