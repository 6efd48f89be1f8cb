#pragma once

#include <string>
#include <vector>

#include "qm/autograd.hpp"
#include "qm/tensor.hpp"

namespace qm {

// A code dictionary: the finite sorted set of values a quantized activation
// may take. The interval rule maps f to entry b whenever
// (a+b)/2 < f <= (b+c)/2 for neighboring entries a < b < c; values at or
// below the first midpoint take the first entry, values above the last
// midpoint take the last. Exact midpoints resolve to the lower entry
// (right-inclusive intervals).
class QuantizationScheme {
 public:
  enum class Kind { Uniform, PowerOfTwo, Explicit };

  QuantizationScheme() = default;

  static QuantizationScheme uniform(double stride, double max_value);
  static QuantizationScheme pow2(int k_min, int k_max);
  static QuantizationScheme explicit_entries(std::vector<double> entries);
  // Reassembles a scheme from serialized parts; entries are authoritative.
  static QuantizationScheme from_parts(Kind kind, double stride, double max_value, int k_min,
                                       int k_max, std::vector<double> entries);
  static Kind kind_from_name(const std::string& name);

  Kind kind() const { return kind_; }
  const std::vector<double>& entries() const { return entries_; }
  double stride() const { return stride_; }
  double max_value() const { return max_value_; }
  int k_min() const { return k_min_; }
  int k_max() const { return k_max_; }
  std::string kind_name() const;

  // Interval assignment for a single value. Applies the rule over all reals;
  // everything at or below the first midpoint collapses to the first entry.
  double quantize_value(double f) const {
    size_t lo = 0, hi = midpoints_.size();
    while (lo < hi) {
      size_t mid = (lo + hi) / 2;
      if (midpoints_[mid] < f)
        lo = mid + 1;
      else
        hi = mid;
    }
    return entries_[lo];
  }

  bool operator==(const QuantizationScheme& o) const {
    return kind_ == o.kind_ && entries_ == o.entries_;
  }

 private:
  void finish();

  Kind kind_ = Kind::Explicit;
  std::vector<double> entries_;
  std::vector<double> midpoints_;
  double stride_ = 0.0;
  double max_value_ = 0.0;
  int k_min_ = 0;
  int k_max_ = 0;
};

QuantizationScheme make_uniform(double stride, double max_value);
QuantizationScheme make_pow2(int k_min, int k_max);

// Elementwise quantization of a non-negative tensor. Negative elements are a
// contract violation (inputs come from ReLU) and raise an error.
template <typename T>
TensorT<T> quantize(const TensorT<T>& f, const QuantizationScheme& scheme) {
  QM_CHECK(!scheme.entries().empty(), "quantize: empty dictionary");
  TensorT<T> out(f.shape());
  for (int64_t i = 0; i < f.size(); ++i) {
    QM_CHECK(f[i] >= T(0), "quantize: negative input " + std::to_string(f[i]) + " at index " +
                               std::to_string(i));
    out[i] = static_cast<T>(scheme.quantize_value(static_cast<double>(f[i])));
  }
  return out;
}

// Quantized ReLU: forward quantize(relu(x)); backward is the straight-through
// rule, i.e. the gradient of plain ReLU (full-precision gradient, zero where
// x <= 0).
template <typename T>
NodePtrT<T> quantized_relu(const NodePtrT<T>& x, const QuantizationScheme& scheme) {
  QM_CHECK(!scheme.entries().empty(), "quantized_relu: empty dictionary");
  TensorT<T> out(x->value.shape());
  for (int64_t i = 0; i < out.size(); ++i) {
    const T v = x->value[i] > T(0) ? x->value[i] : T(0);
    out[i] = static_cast<T>(scheme.quantize_value(static_cast<double>(v)));
  }
  return make_op_node<T>(std::move(out), {x}, [](NodeT<T>& self) {
    NodeT<T>& p = *self.parents[0];
    const T* xv = p.value.data();
    const T* g = self.grad.data();
    T* pg = p.grad.data();
    for (int64_t i = 0; i < self.grad.size(); ++i)
      if (xv[i] > T(0)) pg[i] += g[i];
  });
}

// Straight-through quantizer without the ReLU mask: forward applies the
// interval rule over all reals (values below the first midpoint clamp to the
// first entry), backward passes the gradient unchanged. Used on the adapted
// student features inside the mimic loss, which are affine images of
// activations and may dip below zero.
template <typename T>
NodePtrT<T> quantize_ste(const NodePtrT<T>& x, const QuantizationScheme& scheme) {
  QM_CHECK(!scheme.entries().empty(), "quantize_ste: empty dictionary");
  TensorT<T> out(x->value.shape());
  for (int64_t i = 0; i < out.size(); ++i)
    out[i] = static_cast<T>(scheme.quantize_value(static_cast<double>(x->value[i])));
  return make_op_node<T>(std::move(out), {x}, [](NodeT<T>& self) {
    T* pg = self.parents[0]->grad.data();
    const T* g = self.grad.data();
    for (int64_t i = 0; i < self.grad.size(); ++i) pg[i] += g[i];
  });
}

}  // namespace qm
