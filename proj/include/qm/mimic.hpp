#pragma once

#include <string>
#include <vector>

#include "qm/autograd.hpp"
#include "qm/quantize.hpp"
#include "qm/tensor.hpp"

namespace qm {

// Mimic supervision settings. The two quantize flags select the four
// ablation cells; lambda weighs the mimic term in the joint loss.
struct MimicConfig {
  double lambda = 1.0;
  bool quantize_teacher = false;
  bool quantize_student = false;
  QuantizationScheme scheme;
  double match_threshold = 0.3;
};

// L_m = 1/(2N) * sum_i || T(f_t^i) - S(r(f_s^i)) ||^2 over N RoIs, where T
// quantizes the teacher features and S quantizes the student features with a
// straight-through backward (identity gradient). The teacher side is
// detached: no parent edge, so no gradient ever reaches teacher parameters.
//
// With R == 0 the loss is zero and *empty_warning (when given) is set.
template <typename T>
NodePtrT<T> mimic_loss(const NodePtrT<T>& teacher_rois, const NodePtrT<T>& student_rois_adapted,
                       const MimicConfig& cfg, bool* empty_warning = nullptr) {
  if (empty_warning) *empty_warning = false;
  const TensorT<T>& tv = teacher_rois->value;
  const TensorT<T>& sv = student_rois_adapted->value;
  if (tv.empty() && sv.empty()) {
    if (empty_warning) *empty_warning = true;
    // Zero with a live edge into the student so backward stays well-formed.
    return scale<T>(sum<T>(student_rois_adapted), T(0));
  }
  QM_CHECK_SHAPE(tv.same_shape(sv), "mimic_loss: teacher " + shape_to_string(tv.shape()) +
                                        " vs student " + shape_to_string(sv.shape()));
  QM_CHECK_SHAPE(tv.rank() >= 1, "mimic_loss: scalar inputs");
  const int n_rois = tv.dim(0);
  QM_CHECK(n_rois >= 1, "mimic_loss: zero RoIs with nonempty tensor");

  // Residual after the configured transforms; kept for the backward pass.
  TensorT<T> residual(tv.shape());  // S(s) - T(t)
  T loss = 0;
  for (int64_t i = 0; i < tv.size(); ++i) {
    const double t = static_cast<double>(tv[i]);
    const double s = static_cast<double>(sv[i]);
    const double tq = cfg.quantize_teacher ? cfg.scheme.quantize_value(t) : t;
    const double sq = cfg.quantize_student ? cfg.scheme.quantize_value(s) : s;
    const T d = static_cast<T>(sq - tq);
    residual[i] = d;
    loss += T(0.5) * d * d;
  }
  loss /= static_cast<T>(n_rois);

  auto fn = [residual = std::move(residual), n_rois](NodeT<T>& self) {
    NodeT<T>& st = *self.parents[0];
    const T g = self.grad[0] / static_cast<T>(n_rois);
    T* pg = st.grad.data();
    for (int64_t i = 0; i < residual.size(); ++i) pg[i] += g * residual[i];
  };
  return make_op_node<T>(TensorT<T>::scalar(loss), {student_rois_adapted}, std::move(fn));
}

// cls + reg + lambda * mimic; all scalars.
template <typename T>
NodePtrT<T> joint_loss(const NodePtrT<T>& cls, const NodePtrT<T>& reg, const NodePtrT<T>& mimic,
                       double lambda) {
  QM_CHECK_SHAPE(cls->value.size() == 1 && reg->value.size() == 1 && mimic->value.size() == 1,
                 "joint_loss: all terms must be scalar");
  return add<T>(add<T>(cls, reg), scale<T>(mimic, static_cast<T>(lambda)));
}

// Fraction of elements whose teacher-student distance is strictly below the
// threshold. Symmetric in its arguments.
double matching_ratio(const Tensor& teacher_roi, const Tensor& student_roi, double threshold);

struct Histogram {
  std::vector<double> bin_lo;
  std::vector<double> bin_hi;
  std::vector<int64_t> counts;
  std::vector<double> frequencies;  // counts normalized to sum 1; empty input -> empty

  size_t size() const { return counts.size(); }
  std::string to_csv() const;  // bin_lo,bin_hi,count,frequency
};

// Per-RoI matching ratios binned uniformly over [0,1]; the last bin is
// right-inclusive so ratio 1.0 lands in it.
Histogram matching_histogram(const std::vector<std::pair<Tensor, Tensor>>& pairs, double threshold,
                             int bins);

Histogram histogram_from_ratios(const std::vector<double>& ratios, int bins);

}  // namespace qm
