#pragma once

#include <cassert>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "qm/check.hpp"

namespace qm {

inline std::string shape_to_string(const std::vector<int>& shape) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ",";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

// Dense row-major N-d array over float (training) or double (gradient-check
// mode). No views or strides; every tensor owns contiguous storage.
template <typename T>
class TensorT {
 public:
  using value_type = T;

  TensorT() = default;

  explicit TensorT(std::vector<int> shape) : shape_(std::move(shape)) {
    data_.assign(static_cast<size_t>(check_shape(shape_)), T(0));
  }

  TensorT(std::vector<int> shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    int64_t n = check_shape(shape_);
    QM_CHECK_SHAPE(n == static_cast<int64_t>(data_.size()),
                   "tensor: shape " + shape_to_string(shape_) + " wants " + std::to_string(n) +
                       " values, got " + std::to_string(data_.size()));
  }

  static TensorT full(std::vector<int> shape, T v) {
    TensorT t(std::move(shape));
    t.fill(v);
    return t;
  }

  static TensorT scalar(T v) { return TensorT({1}, {v}); }

  const std::vector<int>& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_[static_cast<size_t>(i)]; }
  int64_t size() const { return static_cast<int64_t>(data_.size()); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::vector<T>& values() { return data_; }
  const std::vector<T>& values() const { return data_; }

  T& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
  T operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

  T& operator()(int i, int j) {
    assert(rank() == 2);
    return data_[static_cast<size_t>(i) * shape_[1] + j];
  }
  T operator()(int i, int j) const {
    assert(rank() == 2);
    return data_[static_cast<size_t>(i) * shape_[1] + j];
  }
  T& operator()(int n, int c, int h, int w) {
    assert(rank() == 4);
    return data_[((static_cast<size_t>(n) * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }
  T operator()(int n, int c, int h, int w) const {
    assert(rank() == 4);
    return data_[((static_cast<size_t>(n) * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }
  void zero() { fill(T(0)); }

  bool same_shape(const TensorT& o) const { return shape_ == o.shape_; }

  bool all_finite() const {
    for (T v : data_) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  T item() const {
    QM_CHECK_SHAPE(size() == 1, "item: tensor " + shape_to_string(shape_) + " is not a scalar");
    return data_[0];
  }

  template <typename U>
  TensorT<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return TensorT<U>(shape_, std::move(out));
  }

 private:
  static int64_t check_shape(const std::vector<int>& shape) {
    int64_t n = 1;
    for (int d : shape) {
      // Zero extents are legal at the container level (an op may degenerate
      // to zero RoIs); forward ops enforce positive dims themselves.
      QM_CHECK_SHAPE(d >= 0, "tensor: negative extent " + std::to_string(d) + " in shape " +
                                 shape_to_string(shape));
      n *= d;
    }
    return n;
  }

  std::vector<int> shape_;
  std::vector<T> data_;
};

using Tensor = TensorT<float>;
using TensorD = TensorT<double>;

}  // namespace qm
