#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "qm/autograd.hpp"
#include "qm/quantize.hpp"
#include "qm/rng.hpp"
#include "qm/tensor.hpp"

namespace qm {

// Axis-aligned box on a feature map (or image, before scaling). Coordinates
// are floats at the owning resolution; batch_index selects the sample within
// a batch tensor.
struct RoI {
  float x0 = 0.f, y0 = 0.f, x1 = 0.f, y1 = 0.f;
  int batch_index = 0;

  RoI() = default;
  RoI(float x0_, float y0_, float x1_, float y1_, int batch = 0)
      : x0(x0_), y0(y0_), x1(x1_), y1(y1_), batch_index(batch) {}

  float width() const { return x1 - x0; }
  float height() const { return y1 - y0; }
  float area() const { return width() * height(); }

  RoI scaled(float factor) const { return RoI(x0 * factor, y0 * factor, x1 * factor, y1 * factor, batch_index); }
};

struct GroundTruthObject {
  int class_id = 0;
  float box[4] = {0.f, 0.f, 0.f, 0.f};  // x0,y0,x1,y1 in image coordinates
};

// One synthetic detection sample: grayscale image, exact annotations, and
// (optionally) the jittered proposals standing in for RPN output.
struct DetectionSample {
  Tensor image;  // [1,H,W]
  std::vector<GroundTruthObject> objects;
  std::vector<RoI> proposals;  // image coordinates
};

// Channels per conv stage before width division. A "-1-n" variant divides
// every stage by n (rounding up, never below one channel).
struct BackboneConfig {
  std::vector<int> base_channels;
  int width_divisor = 1;
  int input_channels = 1;
};

std::vector<int> derived_channels(const BackboneConfig& cfg);

// ---------------------------------------------------------------------------
// RoI max pooling with argmax backward
// ---------------------------------------------------------------------------

// Splits each RoI into out_size x out_size bins (bin edges rounded to integer
// cell boundaries, every bin at least one cell) and takes the max per bin.
// Gradient routes to the argmax cell; ties resolve to the first cell in
// row-major scan order. RoIs are given in feature-map coordinates.
template <typename T>
NodePtrT<T> roi_max_pool(const NodePtrT<T>& fm, const std::vector<RoI>& rois, int out_size) {
  const TensorT<T>& x = fm->value;
  QM_CHECK_SHAPE(x.rank() == 4, "roi_max_pool: feature map rank " + std::to_string(x.rank()) + " != 4");
  QM_CHECK(out_size >= 1, "roi_max_pool: out_size " + std::to_string(out_size) + " < 1");
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int R = static_cast<int>(rois.size());
  QM_CHECK(R > 0, "roi_max_pool: empty RoI list");

  TensorT<T> out({R, C, out_size, out_size});
  std::vector<int64_t> argmax(static_cast<size_t>(out.size()));

  for (int r = 0; r < R; ++r) {
    const RoI& roi = rois[static_cast<size_t>(r)];
    QM_CHECK(roi.batch_index >= 0 && roi.batch_index < N,
             "roi_max_pool: batch index " + std::to_string(roi.batch_index) + " outside [0," +
                 std::to_string(N) + ")");
    // Integerize; degenerate boxes clamp to a single cell.
    int cx0 = std::min(std::max(static_cast<int>(std::floor(roi.x0)), 0), W - 1);
    int cy0 = std::min(std::max(static_cast<int>(std::floor(roi.y0)), 0), H - 1);
    int cx1 = std::min(std::max(static_cast<int>(std::ceil(roi.x1)), cx0 + 1), W);
    int cy1 = std::min(std::max(static_cast<int>(std::ceil(roi.y1)), cy0 + 1), H);
    const int rw = cx1 - cx0, rh = cy1 - cy0;

    for (int c = 0; c < C; ++c) {
      const int64_t plane = ((static_cast<int64_t>(roi.batch_index) * C + c) * H) * W;
      for (int by = 0; by < out_size; ++by) {
        int ys = cy0 + static_cast<int>(std::floor(static_cast<double>(by) * rh / out_size));
        int ye = cy0 + static_cast<int>(std::ceil(static_cast<double>(by + 1) * rh / out_size));
        if (ye <= ys) ye = ys + 1;
        for (int bx = 0; bx < out_size; ++bx) {
          int xs = cx0 + static_cast<int>(std::floor(static_cast<double>(bx) * rw / out_size));
          int xe = cx0 + static_cast<int>(std::ceil(static_cast<double>(bx + 1) * rw / out_size));
          if (xe <= xs) xe = xs + 1;
          T best = x.data()[plane + static_cast<int64_t>(ys) * W + xs];
          int64_t best_idx = plane + static_cast<int64_t>(ys) * W + xs;
          for (int yy = ys; yy < ye; ++yy)
            for (int xx = xs; xx < xe; ++xx) {
              const int64_t idx = plane + static_cast<int64_t>(yy) * W + xx;
              if (x.data()[idx] > best) {
                best = x.data()[idx];
                best_idx = idx;
              }
            }
          const int64_t o = ((static_cast<int64_t>(r) * C + c) * out_size + by) * out_size + bx;
          out[o] = best;
          argmax[static_cast<size_t>(o)] = best_idx;
        }
      }
    }
  }

  auto fn = [argmax = std::move(argmax)](NodeT<T>& self) {
    T* pg = self.parents[0]->grad.data();
    const T* g = self.grad.data();
    for (int64_t i = 0; i < self.grad.size(); ++i) pg[argmax[static_cast<size_t>(i)]] += g[i];
  };
  return make_op_node<T>(std::move(out), {fm}, std::move(fn));
}

// 1x1 convolution mapping student channels onto teacher channels; the
// size-matching function applied to the whole feature map before pooling.
template <typename T>
NodePtrT<T> adapter_apply(const NodePtrT<T>& student_fm, const NodePtrT<T>& weight,
                          const NodePtrT<T>& bias) {
  return conv2d<T>(student_fm, weight, bias, 1, 0);
}

// ---------------------------------------------------------------------------
// Float model components used by the training pipeline
// ---------------------------------------------------------------------------

struct ConvLayer {
  NodePtr weight;  // [K,C,3,3]
  NodePtr bias;    // [K]
  int stride = 2;
  int pad = 1;
};

// Tiny conv backbone: one 3x3 stride-2 stage per configured channel count.
// The final stage's activation is the mimic target; it runs quantized when a
// scheme is supplied to forward().
class Backbone {
 public:
  Backbone() = default;
  Backbone(const BackboneConfig& cfg, uint64_t seed);

  // scheme == nullptr: plain ReLU on the last stage.
  NodePtr forward(const NodePtr& images, const QuantizationScheme* scheme) const;

  std::vector<NodePtr> params() const;
  int out_channels() const { return channels_.empty() ? 0 : channels_.back(); }
  int downsample() const { return 1 << static_cast<int>(layers_.size()); }
  const BackboneConfig& config() const { return cfg_; }
  const std::vector<int>& channels() const { return channels_; }

  std::vector<ConvLayer>& layers() { return layers_; }
  const std::vector<ConvLayer>& layers() const { return layers_; }

 private:
  BackboneConfig cfg_;
  std::vector<int> channels_;
  std::vector<ConvLayer> layers_;
};

Backbone build_backbone(const BackboneConfig& cfg, uint64_t seed);

// Learned channel adapter r. Identity pass-through is only legal when input
// and output widths already agree.
class Adapter {
 public:
  Adapter() = default;
  Adapter(int in_channels, int out_channels, uint64_t seed, bool identity = false);

  NodePtr forward(const NodePtr& student_fm) const;
  std::vector<NodePtr> params() const;
  bool is_identity() const { return identity_; }
  int in_channels() const { return in_channels_; }
  int out_channels() const { return out_channels_; }

  NodePtr weight;  // [Ct,Cs,1,1]
  NodePtr bias;    // [Ct]

 private:
  int in_channels_ = 0;
  int out_channels_ = 0;
  bool identity_ = false;
};

struct HeadOutput {
  NodePtr class_logits;  // [R, K+1]
  NodePtr box_deltas;    // [R, 4]
};

// Flatten -> hidden linear + ReLU -> parallel class and box heads. K
// foreground classes plus background as class K.
class DetectionHead {
 public:
  DetectionHead() = default;
  DetectionHead(int in_channels, int roi_out, int hidden, int num_classes, uint64_t seed);

  HeadOutput forward(const NodePtr& pooled) const;
  std::vector<NodePtr> params() const;

  int num_classes() const { return num_classes_; }
  int hidden() const { return hidden_; }
  int roi_out() const { return roi_out_; }
  int in_channels() const { return in_channels_; }

  NodePtr fc_weight, fc_bias;
  NodePtr cls_weight, cls_bias;
  NodePtr box_weight, box_bias;

 private:
  int in_channels_ = 0;
  int roi_out_ = 0;
  int hidden_ = 0;
  int num_classes_ = 0;
};

}  // namespace qm
