#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "qm/data.hpp"
#include "qm/pipeline.hpp"

namespace qm {

// Flat key-value experiment configuration. Unknown keys are rejected; paths
// resolve relative to the config file's directory.
struct Config {
  // data.*
  int image_size = 64;
  int train_images = 3000;
  int test_images = 500;
  uint64_t data_seed = 7;
  uint64_t test_seed = 8;
  int objects_min = 1;
  int objects_max = 3;
  double size_min = 0.2;
  double size_max = 0.4;
  double noise = 0.1;
  double intensity_scale = 1.0;
  std::string train_file = "train.qmds";
  std::string test_file = "test.qmds";
  // model.*
  std::vector<int> channels = {16, 32, 32};
  int teacher_divisor = 1;
  int student_divisor = 8;
  int head_hidden = 64;
  int roi_out = 3;
  // prop.*
  int per_object = 3;
  double jitter = 0.15;
  // train.*
  int teacher_iterations = 600;
  int finetune_iterations = 300;
  int student_iterations = 600;
  int batch = 8;
  double lr = 0.02;
  double finetune_lr = 0.004;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  uint64_t train_seed = 1;
  double clip_norm = 2.0;
  double warmup_fraction = 0.05;
  bool scratch_quantize = false;  // Table-5-style quantization-only student
  // mimic.*
  double lambda = 1.0;
  bool quantize_teacher = true;
  bool quantize_student = true;
  double match_threshold = 0.3;
  // quant.*
  double quant_stride = 1.0;
  double cap_percentile = 0.99;
  double cap_min = 0.0;
  // eval.*
  double eval_iou = 0.5;
  uint64_t eval_seed = 1234;
  // out.*
  std::string out_dir = ".";
};

Config load_config(const std::string& path);
Config parse_config_text(const std::string& text, const std::string& base_dir);

DatasetSpec dataset_spec(const Config& cfg, bool test_split);

// TrainRun for a stage; seed 0 means "use the config's train.seed".
TrainRun run_from_config(const Config& cfg, Stage stage, uint64_t seed = 0);

EvalOptions eval_options(const Config& cfg);

}  // namespace qm
