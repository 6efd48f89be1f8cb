#include "qm/data.hpp"

#include <algorithm>
#include <cmath>

#include "qm/rng.hpp"
#include "qm/serialize.hpp"

namespace qm {

double box_iou(const float a[4], const float b[4]) {
  const double ix0 = std::max(a[0], b[0]);
  const double iy0 = std::max(a[1], b[1]);
  const double ix1 = std::min(a[2], b[2]);
  const double iy1 = std::min(a[3], b[3]);
  const double iw = std::max(0.0, ix1 - ix0);
  const double ih = std::max(0.0, iy1 - iy0);
  const double inter = iw * ih;
  const double area_a = (a[2] - a[0]) * static_cast<double>(a[3] - a[1]);
  const double area_b = (b[2] - b[0]) * static_cast<double>(b[3] - b[1]);
  const double uni = area_a + area_b - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

double roi_iou(const RoI& a, const RoI& b) {
  const float ba[4] = {a.x0, a.y0, a.x1, a.y1};
  const float bb[4] = {b.x0, b.y0, b.x1, b.y1};
  return box_iou(ba, bb);
}

namespace {

constexpr double kMaxPlacementIoU = 0.2;
constexpr int kPlacementRetries = 50;

void draw_object(Tensor& img, int cls, double x0, double y0, double w, double h, float intensity) {
  const int H = img.dim(1), W = img.dim(2);
  const double cx = x0 + w / 2.0, cy = y0 + h / 2.0;
  const int px0 = std::max(0, static_cast<int>(std::floor(x0)));
  const int py0 = std::max(0, static_cast<int>(std::floor(y0)));
  const int px1 = std::min(W, static_cast<int>(std::ceil(x0 + w)));
  const int py1 = std::min(H, static_cast<int>(std::ceil(y0 + h)));
  for (int py = py0; py < py1; ++py) {
    for (int px = px0; px < px1; ++px) {
      const double fx = px + 0.5, fy = py + 0.5;
      bool inside = false;
      switch (cls) {
        case 0:  // square
          inside = fx >= x0 && fx < x0 + w && fy >= y0 && fy < y0 + h;
          break;
        case 1: {  // disk
          const double rx = (fx - cx) / (w / 2.0), ry = (fy - cy) / (h / 2.0);
          inside = rx * rx + ry * ry <= 1.0;
          break;
        }
        default: {  // triangle, apex up
          const double t = (fy - y0) / h;
          if (t >= 0.0 && t <= 1.0) {
            const double half = t * w / 2.0;
            inside = std::abs(fx - cx) <= half;
          }
          break;
        }
      }
      if (inside) img[static_cast<int64_t>(py) * W + px] = intensity;
    }
  }
}

}  // namespace

Dataset generate(const DatasetSpec& spec) {
  QM_CHECK_CONFIG(spec.image_size >= 16, "dataset: image size " + std::to_string(spec.image_size) + " < 16");
  QM_CHECK_CONFIG(spec.num_images >= 0, "dataset: negative image count");
  QM_CHECK_CONFIG(spec.objects_min >= 1 && spec.objects_max >= spec.objects_min,
                  "dataset: invalid objects-per-image range");
  QM_CHECK_CONFIG(spec.size_min > 0.0 && spec.size_max >= spec.size_min && spec.size_max <= 1.0,
                  "dataset: invalid object size range");
  QM_CHECK_CONFIG(spec.noise_level >= 0.0, "dataset: negative noise level");
  QM_CHECK_CONFIG(spec.intensity_scale > 0.0, "dataset: nonpositive intensity scale");

  Dataset ds;
  ds.reserve(static_cast<size_t>(spec.num_images));
  Rng root(spec.seed);
  const int S = spec.image_size;

  for (int img_idx = 0; img_idx < spec.num_images; ++img_idx) {
    Rng rng = root.split(static_cast<uint64_t>(img_idx));
    DetectionSample sample;
    sample.image = Tensor({1, S, S});
    for (int64_t p = 0; p < sample.image.size(); ++p) {
      const double v = spec.noise_level * std::abs(rng.normal());
      sample.image[p] = static_cast<float>(std::min(v, 1.0) * spec.intensity_scale);
    }

    const int want = rng.randint(spec.objects_min, spec.objects_max + 1);
    for (int obj = 0; obj < want; ++obj) {
      const int cls = rng.randint(0, kNumShapeClasses);
      const float intensity = static_cast<float>(rng.uniform(0.55, 0.95) * spec.intensity_scale);
      bool placed = false;
      for (int attempt = 0; attempt < kPlacementRetries && !placed; ++attempt) {
        double w = rng.uniform(spec.size_min, spec.size_max) * S;
        double h = (cls == 2) ? rng.uniform(spec.size_min, spec.size_max) * S : w;
        const double x0 = rng.uniform(0.0, S - w);
        const double y0 = rng.uniform(0.0, S - h);
        const float box[4] = {static_cast<float>(x0), static_cast<float>(y0),
                              static_cast<float>(x0 + w), static_cast<float>(y0 + h)};
        bool clash = false;
        for (const auto& prev : sample.objects)
          if (box_iou(box, prev.box) > kMaxPlacementIoU) {
            clash = true;
            break;
          }
        if (clash) continue;
        draw_object(sample.image, cls, x0, y0, w, h, intensity);
        GroundTruthObject gt;
        gt.class_id = cls;
        for (int k = 0; k < 4; ++k) gt.box[k] = box[k];
        sample.objects.push_back(gt);
        placed = true;
      }
      // Impossible placement after bounded retries: skip this object. The
      // first object always places (no neighbors), so >= 1 per image holds.
    }
    ds.push_back(std::move(sample));
  }
  return ds;
}

std::vector<RoI> make_proposals(const DetectionSample& sample, int per_object, double jitter,
                                uint64_t seed) {
  QM_CHECK_CONFIG(per_object >= 1, "make_proposals: per_object " + std::to_string(per_object) + " < 1");
  QM_CHECK_CONFIG(jitter >= 0.0, "make_proposals: negative jitter");
  const int S = sample.image.dim(1);
  Rng rng(seed);
  std::vector<RoI> out;
  out.reserve(sample.objects.size() * static_cast<size_t>(per_object) * 2);

  for (const auto& gt : sample.objects) {
    const double w = gt.box[2] - gt.box[0];
    const double h = gt.box[3] - gt.box[1];
    for (int j = 0; j < per_object; ++j) {
      // Written so jitter == 0 adds exact zeros and reproduces the box.
      const double dx = rng.uniform(-jitter, jitter) * w;
      const double dy = rng.uniform(-jitter, jitter) * h;
      const double dw = rng.uniform(-jitter, jitter) * w;
      const double dh = rng.uniform(-jitter, jitter) * h;
      double x0 = gt.box[0] + (dx - dw / 2.0);
      double x1 = gt.box[2] + (dx + dw / 2.0);
      double y0 = gt.box[1] + (dy - dh / 2.0);
      double y1 = gt.box[3] + (dy + dh / 2.0);
      x0 = std::max(0.0, x0);
      y0 = std::max(0.0, y0);
      x1 = std::min(static_cast<double>(S), x1);
      y1 = std::min(static_cast<double>(S), y1);
      if (x1 < x0 + 1.0) x1 = std::min(static_cast<double>(S), x0 + 1.0);
      if (y1 < y0 + 1.0) y1 = std::min(static_cast<double>(S), y0 + 1.0);
      out.emplace_back(static_cast<float>(x0), static_cast<float>(y0), static_cast<float>(x1),
                       static_cast<float>(y1), 0);
    }
  }

  // Equal number of random background boxes; labeling happens later by IoU,
  // so boxes that happen to land on an object are fine.
  const size_t background = sample.objects.size() * static_cast<size_t>(per_object);
  for (size_t b = 0; b < background; ++b) {
    const double w = rng.uniform(0.15, 0.5) * S;
    const double h = rng.uniform(0.15, 0.5) * S;
    const double x0 = rng.uniform(0.0, S - w);
    const double y0 = rng.uniform(0.0, S - h);
    out.emplace_back(static_cast<float>(x0), static_cast<float>(y0), static_cast<float>(x0 + w),
                     static_cast<float>(y0 + h), 0);
  }
  return out;
}

void save_dataset(const Dataset& ds, const std::string& path) {
  ByteWriter w(path);
  w.bytes("QMDS", 4);
  w.u32(1);
  w.u32(static_cast<uint32_t>(ds.size()));
  for (const auto& s : ds) {
    QM_CHECK_IO(s.image.rank() == 3 && s.image.dim(0) == 1, "save_dataset: image must be [1,H,W]");
    const int H = s.image.dim(1), W = s.image.dim(2);
    QM_CHECK_IO(H <= 0xffff && W <= 0xffff, "save_dataset: image too large for u16 extents");
    QM_CHECK_IO(s.objects.size() <= 0xffff, "save_dataset: too many objects");
    w.u16(static_cast<uint16_t>(H));
    w.u16(static_cast<uint16_t>(W));
    w.f32_array(s.image.data(), static_cast<size_t>(s.image.size()));
    w.u16(static_cast<uint16_t>(s.objects.size()));
    for (const auto& o : s.objects) {
      QM_CHECK_IO(o.class_id >= 0 && o.class_id <= 0xff, "save_dataset: class id out of u8 range");
      w.u8(static_cast<uint8_t>(o.class_id));
      for (int k = 0; k < 4; ++k) w.f32(o.box[k]);
    }
  }
  w.close();
}

Dataset load_dataset(const std::string& path) {
  ByteReader r(path);
  r.expect_magic("QMDS");
  const uint32_t version = r.u32();
  QM_CHECK_IO(version == 1, "'" + path + "': unsupported dataset version " + std::to_string(version) +
                                " at offset 4");
  const uint32_t count = r.u32();
  Dataset ds;
  ds.reserve(count);
  for (uint32_t i = 0; i < count; ++i) {
    const uint64_t header_off = r.offset();
    const int H = r.u16();
    const int W = r.u16();
    QM_CHECK_IO(H > 0 && W > 0, "'" + path + "': zero image extent at offset " +
                                    std::to_string(header_off));
    DetectionSample s;
    s.image = Tensor({1, H, W});
    r.f32_array(s.image.data(), static_cast<size_t>(s.image.size()));
    const int n_obj = r.u16();
    s.objects.resize(static_cast<size_t>(n_obj));
    for (auto& o : s.objects) {
      const uint64_t obj_off = r.offset();
      o.class_id = r.u8();
      QM_CHECK_IO(o.class_id < kNumShapeClasses, "'" + path + "': class id " +
                                                     std::to_string(o.class_id) + " at offset " +
                                                     std::to_string(obj_off) + " out of range");
      for (int k = 0; k < 4; ++k) o.box[k] = r.f32();
    }
    ds.push_back(std::move(s));
  }
  return ds;
}

}  // namespace qm
