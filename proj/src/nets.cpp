#include "qm/nets.hpp"

namespace qm {

std::vector<int> derived_channels(const BackboneConfig& cfg) {
  QM_CHECK_CONFIG(cfg.width_divisor >= 1,
                  "backbone: width divisor " + std::to_string(cfg.width_divisor) + " < 1");
  QM_CHECK_CONFIG(!cfg.base_channels.empty(), "backbone: no stages configured");
  std::vector<int> out;
  out.reserve(cfg.base_channels.size());
  for (int c : cfg.base_channels) {
    QM_CHECK_CONFIG(c >= 1, "backbone: zero-channel stage");
    const int derived = (c + cfg.width_divisor - 1) / cfg.width_divisor;  // ceil(c/n)
    out.push_back(std::max(1, derived));
  }
  return out;
}

namespace {

Tensor he_init(const std::vector<int>& shape, int fan_in, Rng& rng) {
  Tensor t(shape);
  const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (int64_t i = 0; i < t.size(); ++i) t[i] = static_cast<float>(rng.normal() * stddev);
  return t;
}

}  // namespace

Backbone::Backbone(const BackboneConfig& cfg, uint64_t seed) : cfg_(cfg) {
  channels_ = derived_channels(cfg);
  Rng root(seed);
  int in_c = cfg.input_channels;
  QM_CHECK_CONFIG(in_c >= 1, "backbone: input channels " + std::to_string(in_c) + " < 1");
  for (size_t s = 0; s < channels_.size(); ++s) {
    // Per-layer streams keep initialization independent of sibling layers.
    Rng lr = root.split(s);
    const int out_c = channels_[s];
    ConvLayer layer;
    layer.weight = make_leaf(he_init({out_c, in_c, 3, 3}, in_c * 9, lr),
                             "backbone.conv" + std::to_string(s) + ".weight");
    // Positive bias keeps narrow layers' ReLUs alive at the start; a unit
    // that opens at zero never recovers once the mimic residual slams it shut.
    layer.bias = make_leaf(Tensor::full({out_c}, 0.25f),
                           "backbone.conv" + std::to_string(s) + ".bias");
    layer.stride = 2;
    layer.pad = 1;
    layers_.push_back(std::move(layer));
    in_c = out_c;
  }
}

NodePtr Backbone::forward(const NodePtr& images, const QuantizationScheme* scheme) const {
  NodePtr x = images;
  for (size_t s = 0; s < layers_.size(); ++s) {
    const ConvLayer& l = layers_[s];
    x = conv2d<float>(x, l.weight, l.bias, l.stride, l.pad);
    const bool last = s + 1 == layers_.size();
    if (last && scheme != nullptr)
      x = quantized_relu<float>(x, *scheme);
    else
      x = relu<float>(x);
  }
  return x;
}

std::vector<NodePtr> Backbone::params() const {
  std::vector<NodePtr> out;
  for (const auto& l : layers_) {
    out.push_back(l.weight);
    out.push_back(l.bias);
  }
  return out;
}

Backbone build_backbone(const BackboneConfig& cfg, uint64_t seed) { return Backbone(cfg, seed); }

Adapter::Adapter(int in_channels, int out_channels, uint64_t seed, bool identity)
    : in_channels_(in_channels), out_channels_(out_channels), identity_(identity) {
  if (identity_) {
    QM_CHECK_CONFIG(in_channels == out_channels,
                    "adapter: identity pass-through needs matching widths, got " +
                        std::to_string(in_channels) + " vs " + std::to_string(out_channels));
    return;
  }
  Rng rng(seed);
  weight = make_leaf(he_init({out_channels, in_channels, 1, 1}, in_channels, rng), "adapter.weight");
  bias = make_leaf(Tensor({out_channels}), "adapter.bias");
}

NodePtr Adapter::forward(const NodePtr& student_fm) const {
  if (identity_) return student_fm;
  return adapter_apply<float>(student_fm, weight, bias);
}

std::vector<NodePtr> Adapter::params() const {
  if (identity_) return {};
  return {weight, bias};
}

DetectionHead::DetectionHead(int in_channels, int roi_out, int hidden, int num_classes, uint64_t seed)
    : in_channels_(in_channels), roi_out_(roi_out), hidden_(hidden), num_classes_(num_classes) {
  QM_CHECK_CONFIG(in_channels >= 1 && roi_out >= 1 && hidden >= 1 && num_classes >= 1,
                  "detection head: nonpositive dimension");
  Rng root(seed);
  Rng r0 = root.split(0), r1 = root.split(1), r2 = root.split(2);
  const int in_dim = in_channels * roi_out * roi_out;
  fc_weight = make_leaf(he_init({hidden, in_dim}, in_dim, r0), "head.fc.weight");
  fc_bias = make_leaf(Tensor({hidden}), "head.fc.bias");
  cls_weight = make_leaf(he_init({num_classes + 1, hidden}, hidden, r1), "head.cls.weight");
  cls_bias = make_leaf(Tensor({num_classes + 1}), "head.cls.bias");
  box_weight = make_leaf(he_init({4, hidden}, hidden, r2), "head.box.weight");
  box_bias = make_leaf(Tensor({4}), "head.box.bias");
}

HeadOutput DetectionHead::forward(const NodePtr& pooled) const {
  QM_CHECK_SHAPE(pooled->value.rank() == 4,
                 "detection head: pooled rank " + std::to_string(pooled->value.rank()) + " != 4");
  const int R = pooled->value.dim(0);
  NodePtr flat = flatten2<float>(pooled, R);
  NodePtr hidden = relu<float>(linear<float>(flat, fc_weight, fc_bias));
  HeadOutput out;
  out.class_logits = linear<float>(hidden, cls_weight, cls_bias);
  out.box_deltas = linear<float>(hidden, box_weight, box_bias);
  return out;
}

std::vector<NodePtr> DetectionHead::params() const {
  return {fc_weight, fc_bias, cls_weight, cls_bias, box_weight, box_bias};
}

}  // namespace qm
