#include "qm/mimic.hpp"

#include <cmath>
#include <cstdio>

namespace qm {

double matching_ratio(const Tensor& teacher_roi, const Tensor& student_roi, double threshold) {
  QM_CHECK_SHAPE(teacher_roi.same_shape(student_roi),
                 "matching_ratio: teacher " + shape_to_string(teacher_roi.shape()) + " vs student " +
                     shape_to_string(student_roi.shape()));
  QM_CHECK(!teacher_roi.empty(), "matching_ratio: empty RoI");
  QM_CHECK(threshold > 0.0, "matching_ratio: nonpositive threshold " + std::to_string(threshold));
  int64_t matched = 0;
  for (int64_t i = 0; i < teacher_roi.size(); ++i) {
    const double d = std::abs(static_cast<double>(teacher_roi[i]) - static_cast<double>(student_roi[i]));
    if (d < threshold) ++matched;
  }
  return static_cast<double>(matched) / static_cast<double>(teacher_roi.size());
}

Histogram histogram_from_ratios(const std::vector<double>& ratios, int bins) {
  QM_CHECK(bins >= 1, "histogram: bins " + std::to_string(bins) + " < 1");
  Histogram h;
  if (ratios.empty()) return h;
  h.bin_lo.resize(static_cast<size_t>(bins));
  h.bin_hi.resize(static_cast<size_t>(bins));
  h.counts.assign(static_cast<size_t>(bins), 0);
  for (int b = 0; b < bins; ++b) {
    h.bin_lo[static_cast<size_t>(b)] = static_cast<double>(b) / bins;
    h.bin_hi[static_cast<size_t>(b)] = static_cast<double>(b + 1) / bins;
  }
  for (double r : ratios) {
    QM_CHECK(r >= 0.0 && r <= 1.0, "histogram: ratio " + std::to_string(r) + " outside [0,1]");
    int b = static_cast<int>(r * bins);
    if (b >= bins) b = bins - 1;  // right-inclusive last bin
    ++h.counts[static_cast<size_t>(b)];
  }
  h.frequencies.resize(static_cast<size_t>(bins));
  for (int b = 0; b < bins; ++b)
    h.frequencies[static_cast<size_t>(b)] =
        static_cast<double>(h.counts[static_cast<size_t>(b)]) / static_cast<double>(ratios.size());
  return h;
}

Histogram matching_histogram(const std::vector<std::pair<Tensor, Tensor>>& pairs, double threshold,
                             int bins) {
  std::vector<double> ratios;
  ratios.reserve(pairs.size());
  for (const auto& [t, s] : pairs) ratios.push_back(matching_ratio(t, s, threshold));
  return histogram_from_ratios(ratios, bins);
}

std::string Histogram::to_csv() const {
  std::string out = "bin_lo,bin_hi,count,frequency\n";
  char line[128];
  for (size_t b = 0; b < counts.size(); ++b) {
    std::snprintf(line, sizeof(line), "%.6f,%.6f,%lld,%.9f\n", bin_lo[b], bin_hi[b],
                  static_cast<long long>(counts[b]), frequencies[b]);
    out += line;
  }
  return out;
}

}  // namespace qm
