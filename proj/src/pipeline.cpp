#include "qm/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>

#include <json.hpp>

#include "qm/rng.hpp"
#include "qm/serialize.hpp"

namespace qm {

using nlohmann::json;

std::string stage_name(Stage s) {
  switch (s) {
    case Stage::Teacher:
      return "teacher";
    case Stage::QuantizeFinetune:
      return "quantize-finetune";
    case Stage::StudentScratch:
      return "student-scratch";
    case Stage::StudentMimicOnly:
      return "student-mimic-only";
    default:
      return "student-qmimic";
  }
}

Stage stage_from_name(const std::string& name) {
  if (name == "teacher") return Stage::Teacher;
  if (name == "quantize-finetune") return Stage::QuantizeFinetune;
  if (name == "student-scratch") return Stage::StudentScratch;
  if (name == "student-mimic-only") return Stage::StudentMimicOnly;
  if (name == "student-qmimic") return Stage::StudentQMimic;
  throw ConfigError("unknown stage '" + name + "'");
}

// ---------------------------------------------------------------------------
// Model plumbing
// ---------------------------------------------------------------------------

namespace {

uint64_t sub_seed(uint64_t seed, uint64_t stream) { return Rng(seed).split(stream).next_u64(); }

constexpr uint64_t kStreamBackbone = 0xB0;
constexpr uint64_t kStreamHead = 0xB1;
constexpr uint64_t kStreamAdapter = 0xB2;
constexpr uint64_t kStreamBatch = 0xB3;
constexpr uint64_t kStreamProposals = 0xB4;

}  // namespace

std::vector<NodePtr> Model::params() const {
  std::vector<NodePtr> out = backbone.params();
  for (auto& p : head.params()) out.push_back(p);
  if (adapter)
    for (auto& p : adapter->params()) out.push_back(p);
  return out;
}

const QuantizationScheme* Model::training_scheme() const {
  if (!meta.scheme) return nullptr;
  if (meta.stage == "quantize-finetune" || meta.quantize_student) return &*meta.scheme;
  return nullptr;
}

Model build_model(const Checkpoint& ckpt) {
  Model m;
  m.meta = ckpt.meta;
  m.backbone = Backbone(ckpt.meta.backbone, sub_seed(ckpt.meta.seed, kStreamBackbone));
  m.head = DetectionHead(m.backbone.out_channels(), ckpt.meta.roi_out, ckpt.meta.head_hidden,
                         ckpt.meta.num_classes, sub_seed(ckpt.meta.seed, kStreamHead));
  if (ckpt.meta.adapter_dims)
    m.adapter = Adapter(ckpt.meta.adapter_dims->first, ckpt.meta.adapter_dims->second,
                        sub_seed(ckpt.meta.seed, kStreamAdapter));
  load_params_into(m, ckpt);
  return m;
}

void load_params_into(Model& model, const Checkpoint& ckpt) {
  std::vector<NodePtr> params = model.params();
  size_t used = 0;
  for (const auto& [name, tensor] : ckpt.tensors) {
    NodePtr target;
    for (const auto& p : params)
      if (p->name == name) {
        target = p;
        break;
      }
    QM_CHECK_SHAPE(target != nullptr, "checkpoint tensor '" + name + "' has no matching parameter");
    QM_CHECK_SHAPE(target->value.shape() == tensor.shape(),
                   "checkpoint tensor '" + name + "' shape " + shape_to_string(tensor.shape()) +
                       " != expected " + shape_to_string(target->value.shape()));
    target->value = tensor;
    ++used;
  }
  QM_CHECK_SHAPE(used == params.size(), "checkpoint covers " + std::to_string(used) + " of " +
                                            std::to_string(params.size()) + " parameters");
}

Checkpoint snapshot(const Model& model) {
  Checkpoint ckpt;
  ckpt.meta = model.meta;
  for (const auto& p : model.params()) ckpt.tensors.emplace_back(p->name, p->value);
  return ckpt;
}

// ---------------------------------------------------------------------------
// Checkpoint persistence
// ---------------------------------------------------------------------------

namespace {

json scheme_to_json(const QuantizationScheme& s) {
  return json{{"kind", s.kind_name()},
              {"stride", s.stride()},
              {"max_value", s.max_value()},
              {"k_min", s.k_min()},
              {"k_max", s.k_max()},
              {"entries", s.entries()}};
}

QuantizationScheme scheme_from_json(const json& j) {
  return QuantizationScheme::from_parts(
      QuantizationScheme::kind_from_name(j.at("kind").get<std::string>()),
      j.at("stride").get<double>(), j.at("max_value").get<double>(), j.at("k_min").get<int>(),
      j.at("k_max").get<int>(), j.at("entries").get<std::vector<double>>());
}

json meta_to_json(const CheckpointMeta& m) {
  json j{{"stage", m.stage},
         {"seed", m.seed},
         {"iterations", m.iterations},
         {"lambda", m.lambda},
         {"quantize_teacher", m.quantize_teacher},
         {"quantize_student", m.quantize_student},
         {"backbone",
          {{"base_channels", m.backbone.base_channels},
           {"width_divisor", m.backbone.width_divisor},
           {"input_channels", m.backbone.input_channels}}},
         {"head", {{"hidden", m.head_hidden}, {"roi_out", m.roi_out}, {"num_classes", m.num_classes}}}};
  j["adapter"] = m.adapter_dims ? json{{"in", m.adapter_dims->first}, {"out", m.adapter_dims->second}}
                                : json(nullptr);
  j["scheme"] = m.scheme ? scheme_to_json(*m.scheme) : json(nullptr);
  return j;
}

CheckpointMeta meta_from_json(const json& j) {
  CheckpointMeta m;
  m.stage = j.at("stage").get<std::string>();
  m.seed = j.at("seed").get<uint64_t>();
  m.iterations = j.at("iterations").get<int>();
  m.lambda = j.at("lambda").get<double>();
  m.quantize_teacher = j.at("quantize_teacher").get<bool>();
  m.quantize_student = j.at("quantize_student").get<bool>();
  const json& b = j.at("backbone");
  m.backbone.base_channels = b.at("base_channels").get<std::vector<int>>();
  m.backbone.width_divisor = b.at("width_divisor").get<int>();
  m.backbone.input_channels = b.at("input_channels").get<int>();
  const json& h = j.at("head");
  m.head_hidden = h.at("hidden").get<int>();
  m.roi_out = h.at("roi_out").get<int>();
  m.num_classes = h.at("num_classes").get<int>();
  if (!j.at("adapter").is_null())
    m.adapter_dims = {j.at("adapter").at("in").get<int>(), j.at("adapter").at("out").get<int>()};
  if (!j.at("scheme").is_null()) m.scheme = scheme_from_json(j.at("scheme"));
  return m;
}

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  ByteWriter w(path);
  w.bytes("QMIM", 4);
  w.u32(1);
  w.str(meta_to_json(ckpt.meta).dump());
  w.u32(static_cast<uint32_t>(ckpt.tensors.size()));
  for (const auto& [name, tensor] : ckpt.tensors) {
    w.str(name);
    QM_CHECK_IO(tensor.rank() <= 0xff, "save_checkpoint: tensor rank too large");
    w.u8(static_cast<uint8_t>(tensor.rank()));
    for (int d = 0; d < tensor.rank(); ++d) w.u32(static_cast<uint32_t>(tensor.dim(d)));
    w.f32_array(tensor.data(), static_cast<size_t>(tensor.size()));
  }
  w.close();
}

Checkpoint load_checkpoint(const std::string& path) {
  ByteReader r(path);
  r.expect_magic("QMIM");
  const uint32_t version = r.u32();
  QM_CHECK_IO(version == 1, "'" + path + "': unsupported checkpoint version " +
                                std::to_string(version) + " at offset 4");
  Checkpoint ckpt;
  const std::string meta_text = r.str(1u << 24);
  json j = json::parse(meta_text, nullptr, false);
  QM_CHECK_IO(!j.is_discarded(), "'" + path + "': corrupt metadata JSON");
  try {
    ckpt.meta = meta_from_json(j);
  } catch (const json::exception& e) {
    throw IoError("'" + path + "': metadata missing field: " + e.what());
  }
  const uint32_t count = r.u32();
  for (uint32_t i = 0; i < count; ++i) {
    const std::string name = r.str(1u << 16);
    const int rank = r.u8();
    QM_CHECK_IO(rank >= 1 && rank <= 8, "'" + path + "': tensor '" + name + "' has bad rank " +
                                            std::to_string(rank));
    std::vector<int> dims(static_cast<size_t>(rank));
    int64_t numel = 1;
    for (auto& d : dims) {
      d = static_cast<int>(r.u32());
      QM_CHECK_IO(d > 0 && numel * d < (int64_t(1) << 32),
                  "'" + path + "': tensor '" + name + "' has bad extent " + std::to_string(d));
      numel *= d;
    }
    Tensor t(dims);
    r.f32_array(t.data(), static_cast<size_t>(t.size()));
    ckpt.tensors.emplace_back(name, std::move(t));
  }
  return ckpt;
}

// ---------------------------------------------------------------------------
// Proposal annotation
// ---------------------------------------------------------------------------

namespace {

constexpr double kAssignIoU = 0.5;

struct Annotated {
  std::vector<RoI> proposals;              // image coordinates
  std::vector<int> labels;                 // class id, or num_classes for background
  std::vector<std::array<float, 4>> deltas;  // regression targets; only fg rows meaningful
};

std::array<float, 4> encode_box(const RoI& p, const float gt[4]) {
  const float pw = p.width(), ph = p.height();
  const float pcx = p.x0 + pw / 2.f, pcy = p.y0 + ph / 2.f;
  const float gw = gt[2] - gt[0], gh = gt[3] - gt[1];
  const float gcx = gt[0] + gw / 2.f, gcy = gt[1] + gh / 2.f;
  return {(gcx - pcx) / pw, (gcy - pcy) / ph, std::log(gw / pw), std::log(gh / ph)};
}

Annotated annotate(const DetectionSample& s, const ProposalConfig& pc, uint64_t seed, int num_classes) {
  Annotated a;
  a.proposals = make_proposals(s, pc.per_object, pc.jitter, seed);
  a.labels.reserve(a.proposals.size());
  a.deltas.reserve(a.proposals.size());
  for (const RoI& p : a.proposals) {
    const float pb[4] = {p.x0, p.y0, p.x1, p.y1};
    double best = 0.0;
    const GroundTruthObject* match = nullptr;
    for (const auto& gt : s.objects) {
      const double iou = box_iou(pb, gt.box);
      if (iou > best) {
        best = iou;
        match = &gt;
      }
    }
    if (match != nullptr && best >= kAssignIoU) {
      a.labels.push_back(match->class_id);
      a.deltas.push_back(encode_box(p, match->box));
    } else {
      a.labels.push_back(num_classes);  // background
      a.deltas.push_back({0.f, 0.f, 0.f, 0.f});
    }
  }
  return a;
}

// ---------------------------------------------------------------------------
// Shared training loop
// ---------------------------------------------------------------------------

Tensor batch_images(const Dataset& data, const std::vector<int>& indices) {
  const int S = data[static_cast<size_t>(indices[0])].image.dim(1);
  Tensor out({static_cast<int>(indices.size()), 1, S, S});
  for (size_t b = 0; b < indices.size(); ++b) {
    const Tensor& img = data[static_cast<size_t>(indices[b])].image;
    QM_CHECK_SHAPE(img.dim(1) == S && img.dim(2) == S, "training: inconsistent image sizes");
    std::copy(img.data(), img.data() + img.size(), out.data() + static_cast<int64_t>(b) * S * S);
  }
  return out;
}

struct TrainSetup {
  Model* model = nullptr;
  const Model* teacher = nullptr;  // frozen
  const QuantizationScheme* train_scheme = nullptr;
  const QuantizationScheme* teacher_scheme = nullptr;
  MimicConfig mimic;  // scheme resolved
  bool use_mimic = false;
};

std::vector<std::array<float, 4>> run_training(const TrainRun& run, const Dataset& data,
                                               const TrainSetup& setup) {
  QM_CHECK_CONFIG(!data.empty(), "training: empty dataset");
  QM_CHECK_CONFIG(run.iterations >= 1 && run.batch_size >= 1, "training: bad iteration/batch config");
  Model& model = *setup.model;
  std::vector<NodePtr> params = model.params();
  zero_grad(params);

  // Proposals and labels are a fixed, seed-derived function of each sample.
  Rng prop_root = Rng(run.seed).split(kStreamProposals);
  std::vector<Annotated> ann(data.size());
  for (size_t i = 0; i < data.size(); ++i)
    ann[i] = annotate(data[i], run.proposals, prop_root.split(i).next_u64(), run.num_classes);

  const int ds_factor = model.backbone.downsample();
  const float feat_scale = 1.f / static_cast<float>(ds_factor);
  Rng batch_rng = Rng(run.seed).split(kStreamBatch);
  const int lr_drop_at = (3 * run.iterations) / 4;
  const int warmup = std::max(1, static_cast<int>(run.opt.warmup_fraction * run.iterations));

  std::vector<std::array<float, 4>> log;
  log.reserve(static_cast<size_t>(run.iterations));

  for (int it = 0; it < run.iterations; ++it) {
    double lr = run.opt.lr * (it >= lr_drop_at ? 0.1 : 1.0);
    if (it < warmup) lr = run.opt.lr * (it + 1) / warmup;

    std::vector<int> indices(static_cast<size_t>(run.batch_size));
    for (auto& ix : indices) ix = batch_rng.randint(0, static_cast<int>(data.size()));

    std::vector<RoI> rois;
    std::vector<int> labels;
    std::vector<int> fg_rows;
    std::vector<float> fg_deltas;
    for (size_t b = 0; b < indices.size(); ++b) {
      const Annotated& a = ann[static_cast<size_t>(indices[b])];
      for (size_t p = 0; p < a.proposals.size(); ++p) {
        RoI r = a.proposals[p].scaled(feat_scale);
        r.batch_index = static_cast<int>(b);
        if (a.labels[p] != run.num_classes) {
          fg_rows.push_back(static_cast<int>(rois.size()));
          for (float d : a.deltas[p]) fg_deltas.push_back(d);
        }
        rois.push_back(r);
        labels.push_back(a.labels[p]);
      }
    }

    NodePtr images = make_leaf(batch_images(data, indices), "images");
    NodePtr fm = model.backbone.forward(images, setup.train_scheme);
    NodePtr pooled = roi_max_pool<float>(fm, rois, run.roi_out);
    HeadOutput head = model.head.forward(pooled);

    NodePtr cls_loss = softmax_cross_entropy<float>(head.class_logits, labels);
    NodePtr reg_loss;
    if (!fg_rows.empty()) {
      NodePtr fg_pred = gather_rows<float>(head.box_deltas, fg_rows);
      Tensor targets({static_cast<int>(fg_rows.size()), 4}, std::move(fg_deltas));
      reg_loss = smooth_l1<float>(fg_pred, targets);
    } else {
      reg_loss = scale<float>(sum<float>(head.box_deltas), 0.f);
    }

    NodePtr total;
    float mimic_value = 0.f;
    if (setup.use_mimic) {
      NodePtr teacher_fm = setup.teacher->backbone.forward(images, setup.teacher_scheme);
      QM_CHECK_SHAPE(teacher_fm->value.dim(2) == fm->value.dim(2) &&
                         teacher_fm->value.dim(3) == fm->value.dim(3),
                     "mimic: teacher feature map " + shape_to_string(teacher_fm->value.shape()) +
                         " does not spatially match student " + shape_to_string(fm->value.shape()));
      NodePtr teacher_pooled = roi_max_pool<float>(teacher_fm, rois, run.roi_out);
      NodePtr adapted = model.adapter->forward(fm);
      NodePtr student_pooled = roi_max_pool<float>(adapted, rois, run.roi_out);
      NodePtr m_loss = mimic_loss<float>(teacher_pooled, student_pooled, setup.mimic);
      mimic_value = m_loss->value[0];
      total = joint_loss<float>(cls_loss, reg_loss, m_loss, setup.mimic.lambda);
    } else {
      total = add<float>(cls_loss, reg_loss);
    }

    const float total_value = total->value[0];
    if (!std::isfinite(total_value))
      throw NumericError("training aborted: non-finite loss at iteration " + std::to_string(it));

    backward<float>(total);
    if (run.opt.clip_norm > 0.0) {
      double sq = 0.0;
      for (const auto& p : params)
        for (int64_t i = 0; i < p->grad.size(); ++i)
          sq += static_cast<double>(p->grad[i]) * p->grad[i];
      const double norm = std::sqrt(sq);
      if (norm > run.opt.clip_norm) {
        const float scale_by = static_cast<float>(run.opt.clip_norm / norm);
        for (const auto& p : params)
          for (int64_t i = 0; i < p->grad.size(); ++i) p->grad[i] *= scale_by;
      }
    }
    sgd_step<float>(params, static_cast<float>(lr), static_cast<float>(run.opt.momentum),
                    static_cast<float>(run.opt.weight_decay));

    log.push_back({cls_loss->value[0], reg_loss->value[0], mimic_value, total_value});
    if (run.log_progress && (it % 50 == 0 || it + 1 == run.iterations))
      std::fprintf(stderr, "[%s] iter %d/%d loss %.4f (cls %.4f reg %.4f mimic %.4f) lr %.4g\n",
                   stage_name(run.stage).c_str(), it + 1, run.iterations, total_value,
                   log.back()[0], log.back()[1], log.back()[2], lr);
  }
  return log;
}

}  // namespace

// ---------------------------------------------------------------------------
// Calibration
// ---------------------------------------------------------------------------

QuantizationScheme calibrate_uniform_scheme(const Model& model, const Dataset& data, double stride,
                                            double percentile, double cap_min, int images) {
  QM_CHECK_CONFIG(stride > 0.0, "calibration: nonpositive stride");
  QM_CHECK_CONFIG(percentile > 0.0 && percentile <= 1.0, "calibration: percentile outside (0,1]");
  QM_CHECK_CONFIG(!data.empty(), "calibration: empty dataset");
  const size_t n_images = std::min(data.size(), static_cast<size_t>(std::max(1, images)));
  std::vector<float> activations;
  for (size_t i = 0; i < n_images; ++i) {
    NodePtr img = make_leaf(Tensor({1, 1, data[i].image.dim(1), data[i].image.dim(2)},
                                   data[i].image.values()));
    NodePtr fm = model.backbone.forward(img, nullptr);
    activations.insert(activations.end(), fm->value.values().begin(), fm->value.values().end());
  }
  const size_t k = static_cast<size_t>(percentile * static_cast<double>(activations.size() - 1));
  std::nth_element(activations.begin(), activations.begin() + static_cast<ptrdiff_t>(k),
                   activations.end());
  const double p = static_cast<double>(activations[k]);
  double cap = std::ceil(std::max(p, 0.0) / stride) * stride;
  cap = std::max(cap, stride);
  if (cap_min > 0.0) cap = std::max(cap, std::ceil(cap_min / stride) * stride);
  return QuantizationScheme::uniform(stride, cap);
}

// ---------------------------------------------------------------------------
// Stages
// ---------------------------------------------------------------------------

TrainResult train_teacher(const TrainRun& run, const Dataset& train) {
  QM_CHECK_CONFIG(run.stage == Stage::Teacher, "train_teacher: wrong stage");
  Model model;
  model.meta.stage = stage_name(run.stage);
  model.meta.seed = run.seed;
  model.meta.iterations = run.iterations;
  model.meta.backbone = run.backbone;
  model.meta.head_hidden = run.head_hidden;
  model.meta.roi_out = run.roi_out;
  model.meta.num_classes = run.num_classes;
  model.backbone = Backbone(run.backbone, sub_seed(run.seed, kStreamBackbone));
  model.head = DetectionHead(model.backbone.out_channels(), run.roi_out, run.head_hidden,
                             run.num_classes, sub_seed(run.seed, kStreamHead));

  TrainSetup setup;
  setup.model = &model;
  TrainResult result;
  result.loss_log = run_training(run, train, setup);
  result.checkpoint = snapshot(model);
  return result;
}

TrainResult quantize_finetune(const Checkpoint& teacher, const TrainRun& run, const Dataset& train) {
  QM_CHECK_CONFIG(run.stage == Stage::QuantizeFinetune, "quantize_finetune: wrong stage");
  Model model = build_model(teacher);
  const QuantizationScheme scheme = calibrate_uniform_scheme(
      model, train, run.quant_stride, run.quant_cap_percentile, run.quant_cap_min,
      run.calibration_images);
  model.meta.stage = stage_name(run.stage);
  model.meta.seed = run.seed;
  model.meta.iterations = run.iterations;
  model.meta.scheme = scheme;

  TrainSetup setup;
  setup.model = &model;
  setup.train_scheme = &scheme;
  TrainResult result;
  result.loss_log = run_training(run, train, setup);
  result.checkpoint = snapshot(model);
  return result;
}

TrainResult train_student(const Checkpoint* teacher, const TrainRun& run, const Dataset& train) {
  const bool is_student = run.stage == Stage::StudentScratch ||
                          run.stage == Stage::StudentMimicOnly || run.stage == Stage::StudentQMimic;
  QM_CHECK_CONFIG(is_student, "train_student: wrong stage " + stage_name(run.stage));
  if (run.stage == Stage::StudentScratch) {
    QM_CHECK_CONFIG(teacher == nullptr, "student-scratch: no teacher expected");
    QM_CHECK_CONFIG(!run.mimic.quantize_teacher, "student-scratch: teacher quantization flag set");
  } else {
    QM_CHECK_CONFIG(teacher != nullptr, stage_name(run.stage) + ": teacher checkpoint required");
  }
  if (run.stage == Stage::StudentMimicOnly)
    QM_CHECK_CONFIG(!run.mimic.quantize_teacher && !run.mimic.quantize_student,
                    "student-mimic-only: quantize flags must be off");

  Model model;
  model.meta.stage = stage_name(run.stage);
  model.meta.seed = run.seed;
  model.meta.iterations = run.iterations;
  model.meta.lambda = teacher ? run.mimic.lambda : 0.0;
  model.meta.quantize_teacher = run.mimic.quantize_teacher;
  model.meta.quantize_student = run.mimic.quantize_student;
  model.meta.backbone = run.backbone;
  model.meta.head_hidden = run.head_hidden;
  model.meta.roi_out = run.roi_out;
  model.meta.num_classes = run.num_classes;
  model.backbone = Backbone(run.backbone, sub_seed(run.seed, kStreamBackbone));
  model.head = DetectionHead(model.backbone.out_channels(), run.roi_out, run.head_hidden,
                             run.num_classes, sub_seed(run.seed, kStreamHead));

  TrainSetup setup;
  setup.model = &model;
  setup.mimic = run.mimic;

  std::optional<Model> teacher_model;
  QuantizationScheme scheme;  // storage for a resolved/calibrated scheme
  if (teacher != nullptr) {
    teacher_model = build_model(*teacher);
    QM_CHECK_SHAPE(teacher_model->backbone.downsample() == model.backbone.downsample(),
                   "teacher downsample " + std::to_string(teacher_model->backbone.downsample()) +
                       " != student downsample " + std::to_string(model.backbone.downsample()));
    model.meta.adapter_dims = {model.backbone.out_channels(), teacher_model->backbone.out_channels()};
    model.adapter = Adapter(model.meta.adapter_dims->first, model.meta.adapter_dims->second,
                            sub_seed(run.seed, kStreamAdapter), run.adapter_identity);
    setup.teacher = &*teacher_model;
    if (teacher_model->meta.scheme) setup.teacher_scheme = &*teacher_model->meta.scheme;
    setup.use_mimic = true;

    if (run.mimic.quantize_teacher || run.mimic.quantize_student) {
      if (teacher_model->meta.scheme)
        scheme = *teacher_model->meta.scheme;
      else
        scheme = calibrate_uniform_scheme(*teacher_model, train, run.quant_stride,
                                          run.quant_cap_percentile, run.quant_cap_min,
                                          run.calibration_images);
      setup.mimic.scheme = scheme;
      model.meta.scheme = scheme;
      if (run.mimic.quantize_student) setup.train_scheme = &scheme;
    }
  } else if (run.mimic.quantize_student) {
    // Quantized training without a teacher (regularization-only ablation):
    // calibrate on the student's own initial feature map with cap headroom.
    scheme = calibrate_uniform_scheme(model, train, run.quant_stride, run.quant_cap_percentile,
                                      std::max(run.quant_cap_min, 8.0), run.calibration_images);
    setup.mimic.scheme = scheme;
    model.meta.scheme = scheme;
    setup.train_scheme = &scheme;
  }

  TrainResult result;
  result.loss_log = run_training(run, train, setup);
  result.checkpoint = snapshot(model);
  return result;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

EvalResult::EvalResult() : mean_matching_ratio(std::numeric_limits<double>::quiet_NaN()) {}

std::array<float, 4> decode_box_deltas(const RoI& p, const float d[4], float img_size) {
  const float pw = p.width(), ph = p.height();
  const float pcx = p.x0 + pw / 2.f, pcy = p.y0 + ph / 2.f;
  auto clamp4 = [](float v) { return std::min(4.f, std::max(-4.f, v)); };
  const float cx = pcx + d[0] * pw;
  const float cy = pcy + d[1] * ph;
  const float w = pw * std::exp(clamp4(d[2]));
  const float h = ph * std::exp(clamp4(d[3]));
  auto clip = [img_size](float v) { return std::min(img_size, std::max(0.f, v)); };
  return {clip(cx - w / 2.f), clip(cy - h / 2.f), clip(cx + w / 2.f), clip(cy + h / 2.f)};
}

int64_t match_predictions(std::vector<EvalCandidate> cands, const std::vector<GroundTruthObject>& gts,
                          double iou_thr, double nms_iou) {
  std::sort(cands.begin(), cands.end(), [](const EvalCandidate& a, const EvalCandidate& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.index < b.index;
  });
  std::vector<EvalCandidate> kept;
  for (const auto& c : cands) {
    bool suppressed = false;
    for (const auto& k : kept)
      if (k.class_id == c.class_id && box_iou(k.box, c.box) > nms_iou) {
        suppressed = true;
        break;
      }
    if (!suppressed) kept.push_back(c);
  }
  std::vector<bool> taken(gts.size(), false);
  int64_t matched = 0;
  for (const auto& c : kept) {
    int best_gt = -1;
    double best_iou = iou_thr;
    for (size_t g = 0; g < gts.size(); ++g) {
      if (taken[g] || gts[g].class_id != c.class_id) continue;
      const double iou = box_iou(c.box, gts[g].box);
      if (iou >= best_iou) {
        best_iou = iou;
        best_gt = static_cast<int>(g);
      }
    }
    if (best_gt >= 0) {
      taken[static_cast<size_t>(best_gt)] = true;
      ++matched;
    }
  }
  return matched;
}

namespace {

Tensor slice_roi(const Tensor& pooled, int r) {
  const int C = pooled.dim(1), o = pooled.dim(2);
  Tensor out({C, o, o});
  const int64_t n = out.size();
  std::copy(pooled.data() + static_cast<int64_t>(r) * n, pooled.data() + (static_cast<int64_t>(r) + 1) * n,
            out.data());
  return out;
}

// Evaluation proposals are seeded from the sample's content, not its position,
// so reordering a dataset cannot change any per-sample result.
uint64_t sample_content_hash(const DetectionSample& s) {
  uint64_t h = 1469598103934665603ull;
  auto mix = [&h](const void* p, size_t n) {
    const unsigned char* b = static_cast<const unsigned char*>(p);
    for (size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 1099511628211ull;
    }
  };
  mix(s.image.data(), static_cast<size_t>(s.image.size()) * sizeof(float));
  for (const auto& o : s.objects) {
    mix(&o.class_id, sizeof(o.class_id));
    mix(o.box, sizeof(o.box));
  }
  return h;
}

}  // namespace

EvalResult evaluate(const Checkpoint& ckpt, const Dataset& test, const EvalOptions& opts,
                    const Checkpoint* reference_teacher) {
  QM_CHECK_CONFIG(!test.empty(), "evaluate: empty dataset");
  Model model = build_model(ckpt);
  const QuantizationScheme* infer_scheme = nullptr;
  if (model.meta.scheme && (model.meta.stage == "quantize-finetune" || opts.quantized_inference))
    infer_scheme = &*model.meta.scheme;

  std::optional<Model> teacher;
  const QuantizationScheme* teacher_scheme = nullptr;
  const QuantizationScheme* student_match_scheme = nullptr;
  if (reference_teacher != nullptr && model.adapter) {
    teacher = build_model(*reference_teacher);
    QM_CHECK_SHAPE(teacher->backbone.downsample() == model.backbone.downsample(),
                   "evaluate: teacher/student downsample mismatch");
    teacher_scheme = teacher->meta.scheme ? &*teacher->meta.scheme : nullptr;
    student_match_scheme = model.training_scheme();
  }

  const int K = model.meta.num_classes;
  const float feat_scale = 1.f / static_cast<float>(model.backbone.downsample());
  Rng prop_root = Rng(opts.seed);

  EvalResult res;
  int64_t correct = 0, total_rois = 0;
  std::vector<double> ratios;

  for (size_t i = 0; i < test.size(); ++i) {
    const DetectionSample& s = test[i];
    Annotated ann = annotate(s, opts.proposals, prop_root.split(sample_content_hash(s)).next_u64(), K);
    std::vector<RoI> rois;
    rois.reserve(ann.proposals.size());
    for (const RoI& p : ann.proposals) {
      RoI r = p.scaled(feat_scale);
      r.batch_index = 0;
      rois.push_back(r);
    }
    const float img_size = static_cast<float>(s.image.dim(1));
    NodePtr images = make_leaf(Tensor({1, 1, s.image.dim(1), s.image.dim(2)}, s.image.values()));
    NodePtr fm = model.backbone.forward(images, infer_scheme);
    NodePtr pooled = roi_max_pool<float>(fm, rois, model.meta.roi_out);
    HeadOutput head = model.head.forward(pooled);

    const int R = static_cast<int>(rois.size());
    std::vector<EvalCandidate> cands;
    for (int r = 0; r < R; ++r) {
      const float* row = head.class_logits->value.data() + static_cast<int64_t>(r) * (K + 1);
      int arg = 0;
      float m = row[0];
      for (int k = 1; k <= K; ++k)
        if (row[k] > m) {
          m = row[k];
          arg = k;
        }
      double z = 0.0;
      for (int k = 0; k <= K; ++k) z += std::exp(static_cast<double>(row[k] - m));
      const double score = 1.0 / z;  // softmax probability of the argmax class
      if (arg == ann.labels[static_cast<size_t>(r)]) ++correct;
      ++total_rois;
      if (arg == K) continue;  // background
      EvalCandidate c;
      c.class_id = arg;
      c.score = score;
      c.index = r;
      const auto box = decode_box_deltas(ann.proposals[static_cast<size_t>(r)],
                                         head.box_deltas->value.data() + static_cast<int64_t>(r) * 4,
                                         img_size);
      for (int k = 0; k < 4; ++k) c.box[k] = box[static_cast<size_t>(k)];
      cands.push_back(c);
    }
    res.gt_total += static_cast<int64_t>(s.objects.size());
    res.gt_matched += match_predictions(std::move(cands), s.objects, opts.iou_threshold, 0.5);

    if (teacher) {
      NodePtr fm_t = teacher->backbone.forward(images, teacher_scheme);
      NodePtr fm_s = model.backbone.forward(images, student_match_scheme);
      NodePtr adapted = model.adapter->forward(fm_s);
      NodePtr pooled_t = roi_max_pool<float>(fm_t, rois, model.meta.roi_out);
      NodePtr pooled_s = roi_max_pool<float>(adapted, rois, model.meta.roi_out);
      for (int r = 0; r < R; ++r)
        ratios.push_back(matching_ratio(slice_roi(pooled_t->value, r), slice_roi(pooled_s->value, r),
                                        opts.match_threshold));
    }
  }

  res.toy_ap = res.gt_total > 0 ? static_cast<double>(res.gt_matched) / static_cast<double>(res.gt_total)
                                : 0.0;
  res.roi_accuracy = total_rois > 0 ? static_cast<double>(correct) / static_cast<double>(total_rois) : 0.0;
  if (!ratios.empty()) {
    res.matching_hist = histogram_from_ratios(ratios, opts.histogram_bins);
    // sort before summing so the mean is independent of sample order
    std::sort(ratios.begin(), ratios.end());
    double ratio_sum = 0.0;
    for (double r : ratios) ratio_sum += r;
    res.mean_matching_ratio = ratio_sum / static_cast<double>(ratios.size());
  }
  return res;
}

// ---------------------------------------------------------------------------
// Metrics CSV
// ---------------------------------------------------------------------------

std::string metrics_csv_header() {
  return "run_id,stage,seed,lambda,tq,sq,toy_ap,mean_matching_ratio,wall_time_s\n";
}

std::string metrics_csv_row(const MetricsRow& row) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%s,%s,%llu,%.17g,%d,%d,%.6f,%.6f,%.3f\n", row.run_id.c_str(),
                row.stage.c_str(), static_cast<unsigned long long>(row.seed), row.lambda,
                row.tq ? 1 : 0, row.sq ? 1 : 0, row.toy_ap, row.mean_matching_ratio, row.wall_time_s);
  return buf;
}

std::string make_run_id(const std::string& stage, uint64_t seed, double lambda, bool tq, bool sq) {
  char buf[128];
  std::snprintf(buf, sizeof(buf), "%s-s%llu-l%g-tq%d-sq%d", stage.c_str(),
                static_cast<unsigned long long>(seed), lambda, tq ? 1 : 0, sq ? 1 : 0);
  return buf;
}

}  // namespace qm
