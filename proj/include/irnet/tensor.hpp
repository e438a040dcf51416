#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "irnet/errors.hpp"

namespace irnet {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& shape) {
  int64_t n = 1;
  for (int64_t d : shape) n *= d;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "(";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ",";
    os << shape[i];
  }
  os << ")";
  return os.str();
}

// Dense n-dimensional array, row-major. Activations are (B,H,W,C),
// convolution kernels are (kh,kw,Cin,Cout).
template <typename T>
class TensorT {
public:
  TensorT() = default;

  explicit TensorT(Shape shape) : shape_(std::move(shape)) {
    validate_shape();
    data_.assign(static_cast<size_t>(shape_numel(shape_)), T(0));
  }

  TensorT(Shape shape, std::vector<T> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    validate_shape();
    if (static_cast<int64_t>(data_.size()) != shape_numel(shape_)) {
      throw shape_error("tensor data length " + std::to_string(data_.size()) +
                        " does not match shape " + shape_str(shape_));
    }
  }

  static TensorT zeros(Shape shape) { return TensorT(std::move(shape)); }

  static TensorT full(Shape shape, T value) {
    TensorT t(std::move(shape));
    for (T& x : t.data_) x = value;
    return t;
  }

  const Shape& shape() const { return shape_; }
  int64_t ndim() const { return static_cast<int64_t>(shape_.size()); }
  int64_t dim(int i) const { return shape_[static_cast<size_t>(i)]; }
  int64_t size() const { return static_cast<int64_t>(data_.size()); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::vector<T>& vec() { return data_; }
  const std::vector<T>& vec() const { return data_; }

  T& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
  const T& operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

  // Flat offset of (b,h,w,c) in a rank-4 tensor.
  int64_t offset4(int64_t b, int64_t h, int64_t w, int64_t c) const {
    return ((b * shape_[1] + h) * shape_[2] + w) * shape_[3] + c;
  }

  T& at4(int64_t b, int64_t h, int64_t w, int64_t c) { return data_[static_cast<size_t>(offset4(b, h, w, c))]; }
  const T& at4(int64_t b, int64_t h, int64_t w, int64_t c) const {
    return data_[static_cast<size_t>(offset4(b, h, w, c))];
  }

  T& at2(int64_t r, int64_t c) { return data_[static_cast<size_t>(r * shape_[1] + c)]; }
  const T& at2(int64_t r, int64_t c) const { return data_[static_cast<size_t>(r * shape_[1] + c)]; }

  bool same_shape(const TensorT& other) const { return shape_ == other.shape_; }

  bool all_finite() const {
    for (const T& x : data_) {
      if (!std::isfinite(static_cast<double>(x))) return false;
    }
    return true;
  }

  template <typename U>
  TensorT<U> cast() const {
    std::vector<U> out(data_.size());
    for (size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
    return TensorT<U>(shape_, std::move(out));
  }

private:
  void validate_shape() const {
    if (shape_.empty()) throw shape_error("tensor shape must have at least one extent");
    for (int64_t d : shape_) {
      if (d < 1) throw shape_error("tensor extent must be >= 1, got shape " + shape_str(shape_));
    }
  }

  Shape shape_;
  std::vector<T> data_;
};

using Tensor = TensorT<float>;
using Tensor64 = TensorT<double>;

}  // namespace irnet
