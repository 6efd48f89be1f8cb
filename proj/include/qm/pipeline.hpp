#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "qm/data.hpp"
#include "qm/mimic.hpp"
#include "qm/nets.hpp"
#include "qm/quantize.hpp"

namespace qm {

enum class Stage {
  Teacher,
  QuantizeFinetune,
  StudentScratch,
  StudentMimicOnly,
  StudentQMimic,
};

std::string stage_name(Stage s);
Stage stage_from_name(const std::string& name);

struct OptimizerConfig {
  double lr = 0.02;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  // Linear ramp from 0 over the first fraction of iterations. Keeps the
  // first mimic steps small enough that the adapter can absorb the teacher's
  // scale before the backbone moves; without it the large initial residual
  // can knock every ReLU dead in a handful of updates.
  double warmup_fraction = 0.05;
  // Global gradient-norm cap applied before the momentum update (0 disables).
  // The RoI mimic residual starts at teacher-feature magnitude and its raw
  // gradient can exceed the backbone weight norm; uncapped it kills the
  // student's ReLUs outright.
  double clip_norm = 2.0;
};

struct ProposalConfig {
  int per_object = 3;
  double jitter = 0.15;
};

// Configuration and state of one pipeline stage.
struct TrainRun {
  Stage stage = Stage::Teacher;
  OptimizerConfig opt;
  int iterations = 600;
  int batch_size = 8;
  MimicConfig mimic;
  uint64_t seed = 1;
  BackboneConfig backbone;  // of the network being trained
  int head_hidden = 64;
  int roi_out = 3;
  int num_classes = kNumShapeClasses;
  ProposalConfig proposals;
  double quant_stride = 1.0;
  double quant_cap_percentile = 0.99;
  double quant_cap_min = 0.0;  // floor on the calibrated dictionary max
  int calibration_images = 128;
  bool adapter_identity = false;
  bool log_progress = false;  // one stderr line every 50 iterations
};

struct CheckpointMeta {
  std::string stage = "teacher";
  uint64_t seed = 0;
  int iterations = 0;
  double lambda = 0.0;
  bool quantize_teacher = false;
  bool quantize_student = false;
  BackboneConfig backbone;
  int head_hidden = 64;
  int roi_out = 3;
  int num_classes = kNumShapeClasses;
  std::optional<std::pair<int, int>> adapter_dims;  // (student C, teacher C)
  std::optional<QuantizationScheme> scheme;
};

// Named parameter tensors plus everything needed to rebuild the model.
struct Checkpoint {
  CheckpointMeta meta;
  std::vector<std::pair<std::string, Tensor>> tensors;
};

// A live model rebuilt from (or about to become) a checkpoint.
struct Model {
  Backbone backbone;
  DetectionHead head;
  std::optional<Adapter> adapter;
  CheckpointMeta meta;

  std::vector<NodePtr> params() const;
  // Scheme the backbone uses while training (nullptr if full-precision).
  const QuantizationScheme* training_scheme() const;
};

Model build_model(const Checkpoint& ckpt);
// Strict by-name parameter load; shape mismatches name the offending tensor.
void load_params_into(Model& model, const Checkpoint& ckpt);
Checkpoint snapshot(const Model& model);

// Checkpoint file: magic "QMIM", u32 version=1, length-prefixed JSON metadata,
// then u32 tensor count and per tensor (length-prefixed name, u8 rank,
// u32 dims, little-endian f32 data).
void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

struct TrainResult {
  Checkpoint checkpoint;
  // Per iteration: cls, reg, mimic, total.
  std::vector<std::array<float, 4>> loss_log;
};

TrainResult train_teacher(const TrainRun& run, const Dataset& train);
TrainResult quantize_finetune(const Checkpoint& teacher, const TrainRun& run, const Dataset& train);
// teacher may be null only for Stage::StudentScratch.
TrainResult train_student(const Checkpoint* teacher, const TrainRun& run, const Dataset& train);

// Uniform-dictionary cap calibration: percentile of the model's final feature
// map over up to `images` samples, rounded up to a stride multiple and never
// below max(stride, cap_min).
QuantizationScheme calibrate_uniform_scheme(const Model& model, const Dataset& data, double stride,
                                            double percentile, double cap_min, int images);

struct EvalOptions {
  double iou_threshold = 0.5;
  uint64_t seed = 1234;
  bool quantized_inference = false;
  ProposalConfig proposals;
  double match_threshold = 0.3;
  int histogram_bins = 10;
};

struct EvalResult {
  double toy_ap = 0.0;          // matched ground truth / total ground truth
  double roi_accuracy = 0.0;    // per-proposal argmax class vs assigned label
  double mean_matching_ratio;   // NaN when no reference teacher given
  Histogram matching_hist;
  int64_t gt_total = 0;
  int64_t gt_matched = 0;

  EvalResult();
};

// Toy-AP evaluation: decode box deltas, greedy per-class NMS at IoU 0.5, then
// confidence-descending one-to-one matching against ground truth. When a
// reference teacher is given (and the model carries an adapter), also reports
// the RoI matching-ratio diagnostic with both networks in their training-time
// activation modes.
EvalResult evaluate(const Checkpoint& model, const Dataset& test, const EvalOptions& opts,
                    const Checkpoint* reference_teacher = nullptr);

// Matching machinery behind evaluate, exposed for direct testing.
struct EvalCandidate {
  int class_id = 0;
  double score = 0.0;
  float box[4] = {0, 0, 0, 0};
  int index = 0;  // proposal index, breaks score ties deterministically
};

std::array<float, 4> decode_box_deltas(const RoI& proposal, const float deltas[4], float img_size);

// Greedy per-class NMS then confidence-descending one-to-one matching;
// returns the number of ground-truth objects matched at IoU >= iou_thr with
// the correct class.
int64_t match_predictions(std::vector<EvalCandidate> candidates,
                          const std::vector<GroundTruthObject>& gts, double iou_thr,
                          double nms_iou = 0.5);

// Metrics CSV schema shared by the CLI commands.
struct MetricsRow {
  std::string run_id;
  std::string stage;
  uint64_t seed = 0;
  double lambda = 0.0;
  bool tq = false;
  bool sq = false;
  double toy_ap = 0.0;
  double mean_matching_ratio = 0.0;  // NaN when absent
  double wall_time_s = 0.0;
};

std::string metrics_csv_header();
std::string metrics_csv_row(const MetricsRow& row);
std::string make_run_id(const std::string& stage, uint64_t seed, double lambda, bool tq, bool sq);

}  // namespace qm
