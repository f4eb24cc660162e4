#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "sdc/common.hpp"

namespace sdc {

// Dense row-major float tensor, width fastest. Shapes are small integer
// vectors; the usual layouts are [C,H,W] for maps and [O,C,k,k] for kernels.
template <typename S>
class TensorT {
 public:
  TensorT() = default;

  explicit TensorT(std::vector<int> shape, S fill = S(0)) : shape_(std::move(shape)) {
    std::size_t n = 1;
    for (int e : shape_) {
      require(e >= 1, ErrorKind::argument, "tensor extents must be >= 1");
      n *= std::size_t(e);
    }
    data_.assign(n, fill);
  }

  TensorT(std::vector<int> shape, std::vector<S> data) : shape_(std::move(shape)), data_(std::move(data)) {
    std::size_t n = 1;
    for (int e : shape_) {
      require(e >= 1, ErrorKind::argument, "tensor extents must be >= 1");
      n *= std::size_t(e);
    }
    require(n == data_.size(), ErrorKind::argument, "tensor shape does not match data length");
  }

  int rank() const { return int(shape_.size()); }
  int dim(int i) const { return shape_[std::size_t(i)]; }
  const std::vector<int>& shape() const { return shape_; }
  std::size_t numel() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  S* data() { return data_.data(); }
  const S* data() const { return data_.data(); }
  std::vector<S>& vec() { return data_; }
  const std::vector<S>& vec() const { return data_; }

  S& operator[](std::size_t i) { return data_[i]; }
  S operator[](std::size_t i) const { return data_[i]; }

  // [C,H,W] accessors
  S& at(int c, int y, int x) { return data_[(std::size_t(c) * std::size_t(shape_[1]) + std::size_t(y)) * std::size_t(shape_[2]) + std::size_t(x)]; }
  S at(int c, int y, int x) const { return data_[(std::size_t(c) * std::size_t(shape_[1]) + std::size_t(y)) * std::size_t(shape_[2]) + std::size_t(x)]; }

  // [O,C,k,k] accessor
  S& at4(int o, int c, int i, int j) {
    return data_[((std::size_t(o) * std::size_t(shape_[1]) + std::size_t(c)) * std::size_t(shape_[2]) + std::size_t(i)) * std::size_t(shape_[3]) + std::size_t(j)];
  }
  S at4(int o, int c, int i, int j) const {
    return data_[((std::size_t(o) * std::size_t(shape_[1]) + std::size_t(c)) * std::size_t(shape_[2]) + std::size_t(i)) * std::size_t(shape_[3]) + std::size_t(j)];
  }

  bool same_shape(const TensorT& o) const { return shape_ == o.shape_; }

  bool all_finite() const {
    for (S v : data_)
      if (!std::isfinite(double(v))) return false;
    return true;
  }

  void check_finite(const std::string& what) const {
    if (!all_finite()) fail_compute(what + ": tensor contains non-finite values");
  }

  std::string shape_str() const {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape_.size(); ++i) os << (i ? "x" : "") << shape_[i];
    os << "]";
    return os.str();
  }

  template <typename T>
  TensorT<T> cast() const {
    std::vector<T> d(data_.size());
    for (std::size_t i = 0; i < data_.size(); ++i) d[i] = T(data_[i]);
    return TensorT<T>(shape_, std::move(d));
  }

 private:
  std::vector<int> shape_;
  std::vector<S> data_;
};

using Tensor = TensorT<float>;

template <typename S>
S max_abs_diff(const TensorT<S>& a, const TensorT<S>& b) {
  require(a.same_shape(b), ErrorKind::argument, "max_abs_diff: shape mismatch");
  S m = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, S(std::abs(double(a[i]) - double(b[i]))));
  return m;
}

template <typename S>
double dot(const TensorT<S>& a, const TensorT<S>& b) {
  require(a.numel() == b.numel(), ErrorKind::argument, "dot: size mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) s += double(a[i]) * double(b[i]);
  return s;
}

}  // namespace sdc
