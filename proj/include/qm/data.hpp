#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "qm/nets.hpp"

namespace qm {

// Three shape classes drawn as filled intensity patches on a Gaussian-noise
// background: 0 = square, 1 = disk, 2 = triangle.
inline constexpr int kNumShapeClasses = 3;

struct DatasetSpec {
  int image_size = 64;
  int num_images = 0;
  int objects_min = 1;
  int objects_max = 3;
  double size_min = 0.2;   // object side as fraction of image
  double size_max = 0.4;
  double noise_level = 0.1;
  // Pixel intensities are drawn in [0,1] and multiplied by this factor.
  // Raw-gray-pixel scale (tens to hundreds) puts the backbone's feature
  // range well above the unit quantization stride.
  double intensity_scale = 1.0;
  uint64_t seed = 0;
};

using Dataset = std::vector<DetectionSample>;

// Deterministic under spec.seed; per-image streams are split by image index
// so parallel generation would not change outputs. Every annotation box has
// positive area and lies within the image; failed placements (overlap after
// bounded retries) are skipped, but each image keeps at least one object.
Dataset generate(const DatasetSpec& spec);

// Per ground-truth box, `per_object` copies with center and size jittered by
// up to `jitter` of the box size (clipped to the image), plus an equal number
// of random background boxes. jitter == 0 reproduces the ground truth boxes
// exactly. Labels are not assigned here; see assign_proposal_labels.
std::vector<RoI> make_proposals(const DetectionSample& sample, int per_object, double jitter,
                                uint64_t seed);

// Axis-aligned intersection-over-union of two [x0,y0,x1,y1] boxes.
double box_iou(const float a[4], const float b[4]);
double roi_iou(const RoI& a, const RoI& b);

// Dataset persistence. Format: magic "QMDS", u32 version=1, u32 count, then
// per sample u16 H, u16 W, H*W f32 pixels, u16 object count, per object
// (u8 class, 4x f32 box). All integers little-endian.
void save_dataset(const Dataset& ds, const std::string& path);
Dataset load_dataset(const std::string& path);

}  // namespace qm
