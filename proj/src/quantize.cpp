#include "qm/quantize.hpp"

#include <cmath>

namespace qm {

void QuantizationScheme::finish() {
  QM_CHECK(!entries_.empty(), "quantization scheme: empty dictionary");
  for (size_t i = 0; i < entries_.size(); ++i) {
    QM_CHECK(entries_[i] >= 0.0, "quantization scheme: negative entry " + std::to_string(entries_[i]));
    if (i > 0)
      QM_CHECK(entries_[i] > entries_[i - 1],
               "quantization scheme: entries not strictly ascending at index " + std::to_string(i));
  }
  midpoints_.clear();
  midpoints_.reserve(entries_.size() - 1);
  for (size_t i = 0; i + 1 < entries_.size(); ++i)
    midpoints_.push_back(0.5 * (entries_[i] + entries_[i + 1]));
}

QuantizationScheme QuantizationScheme::uniform(double stride, double max_value) {
  QM_CHECK(stride > 0.0, "uniform scheme: nonpositive stride " + std::to_string(stride));
  QM_CHECK(max_value >= 0.0, "uniform scheme: negative max " + std::to_string(max_value));
  QuantizationScheme s;
  s.kind_ = Kind::Uniform;
  s.stride_ = stride;
  s.max_value_ = max_value;
  const int64_t steps = static_cast<int64_t>(std::floor(max_value / stride));
  for (int64_t k = 0; k <= steps; ++k) s.entries_.push_back(stride * static_cast<double>(k));
  s.finish();
  return s;
}

QuantizationScheme QuantizationScheme::pow2(int k_min, int k_max) {
  QM_CHECK(k_min <= k_max, "pow2 scheme: inverted range [" + std::to_string(k_min) + "," +
                               std::to_string(k_max) + "]");
  QuantizationScheme s;
  s.kind_ = Kind::PowerOfTwo;
  s.k_min_ = k_min;
  s.k_max_ = k_max;
  s.entries_.push_back(0.0);
  for (int k = k_min; k <= k_max; ++k) s.entries_.push_back(std::ldexp(1.0, k));
  s.finish();
  return s;
}

QuantizationScheme QuantizationScheme::explicit_entries(std::vector<double> entries) {
  QuantizationScheme s;
  s.kind_ = Kind::Explicit;
  s.entries_ = std::move(entries);
  s.finish();
  return s;
}

QuantizationScheme QuantizationScheme::from_parts(Kind kind, double stride, double max_value,
                                                  int k_min, int k_max,
                                                  std::vector<double> entries) {
  QuantizationScheme s;
  s.kind_ = kind;
  s.stride_ = stride;
  s.max_value_ = max_value;
  s.k_min_ = k_min;
  s.k_max_ = k_max;
  s.entries_ = std::move(entries);
  s.finish();
  return s;
}

QuantizationScheme::Kind QuantizationScheme::kind_from_name(const std::string& name) {
  if (name == "uniform") return Kind::Uniform;
  if (name == "pow2") return Kind::PowerOfTwo;
  if (name == "explicit") return Kind::Explicit;
  throw ConfigError("unknown quantization scheme kind '" + name + "'");
}

std::string QuantizationScheme::kind_name() const {
  switch (kind_) {
    case Kind::Uniform:
      return "uniform";
    case Kind::PowerOfTwo:
      return "pow2";
    default:
      return "explicit";
  }
}

QuantizationScheme make_uniform(double stride, double max_value) {
  return QuantizationScheme::uniform(stride, max_value);
}

QuantizationScheme make_pow2(int k_min, int k_max) { return QuantizationScheme::pow2(k_min, k_max); }

}  // namespace qm
