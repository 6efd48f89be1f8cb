#include "qm/config.hpp"

#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

namespace qm {

namespace {

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

int parse_int(const std::string& key, const std::string& v) {
  try {
    size_t pos = 0;
    int x = std::stoi(v, &pos);
    QM_CHECK_CONFIG(pos == v.size(), "");
    return x;
  } catch (...) {
    throw ConfigError("config: key '" + key + "' wants an integer, got '" + v + "'");
  }
}

uint64_t parse_u64(const std::string& key, const std::string& v) {
  try {
    size_t pos = 0;
    unsigned long long x = std::stoull(v, &pos);
    QM_CHECK_CONFIG(pos == v.size(), "");
    return static_cast<uint64_t>(x);
  } catch (...) {
    throw ConfigError("config: key '" + key + "' wants an unsigned integer, got '" + v + "'");
  }
}

double parse_double(const std::string& key, const std::string& v) {
  try {
    size_t pos = 0;
    double x = std::stod(v, &pos);
    QM_CHECK_CONFIG(pos == v.size(), "");
    return x;
  } catch (...) {
    throw ConfigError("config: key '" + key + "' wants a number, got '" + v + "'");
  }
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError("config: key '" + key + "' wants a boolean, got '" + v + "'");
}

std::vector<int> parse_int_list(const std::string& key, const std::string& v) {
  std::vector<int> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(parse_int(key, item));
  }
  QM_CHECK_CONFIG(!out.empty(), "config: key '" + key + "' wants a comma-separated integer list");
  return out;
}

std::string resolve_path(const std::string& base_dir, const std::string& p) {
  std::filesystem::path fp(p);
  if (fp.is_absolute() || base_dir.empty()) return p;
  return (std::filesystem::path(base_dir) / fp).string();
}

}  // namespace

Config parse_config_text(const std::string& text, const std::string& base_dir) {
  Config cfg;
  using Setter = std::function<void(const std::string&, const std::string&)>;
  const std::map<std::string, Setter> setters = {
      {"data.image_size", [&](auto& k, auto& v) { cfg.image_size = parse_int(k, v); }},
      {"data.train_images", [&](auto& k, auto& v) { cfg.train_images = parse_int(k, v); }},
      {"data.test_images", [&](auto& k, auto& v) { cfg.test_images = parse_int(k, v); }},
      {"data.seed", [&](auto& k, auto& v) { cfg.data_seed = parse_u64(k, v); }},
      {"data.test_seed", [&](auto& k, auto& v) { cfg.test_seed = parse_u64(k, v); }},
      {"data.objects_min", [&](auto& k, auto& v) { cfg.objects_min = parse_int(k, v); }},
      {"data.objects_max", [&](auto& k, auto& v) { cfg.objects_max = parse_int(k, v); }},
      {"data.size_min", [&](auto& k, auto& v) { cfg.size_min = parse_double(k, v); }},
      {"data.size_max", [&](auto& k, auto& v) { cfg.size_max = parse_double(k, v); }},
      {"data.noise", [&](auto& k, auto& v) { cfg.noise = parse_double(k, v); }},
      {"data.intensity_scale", [&](auto& k, auto& v) { cfg.intensity_scale = parse_double(k, v); }},
      {"data.train_file", [&](auto&, auto& v) { cfg.train_file = resolve_path(base_dir, v); }},
      {"data.test_file", [&](auto&, auto& v) { cfg.test_file = resolve_path(base_dir, v); }},
      {"model.channels", [&](auto& k, auto& v) { cfg.channels = parse_int_list(k, v); }},
      {"model.teacher_divisor", [&](auto& k, auto& v) { cfg.teacher_divisor = parse_int(k, v); }},
      {"model.student_divisor", [&](auto& k, auto& v) { cfg.student_divisor = parse_int(k, v); }},
      {"model.head_hidden", [&](auto& k, auto& v) { cfg.head_hidden = parse_int(k, v); }},
      {"model.roi_out", [&](auto& k, auto& v) { cfg.roi_out = parse_int(k, v); }},
      {"prop.per_object", [&](auto& k, auto& v) { cfg.per_object = parse_int(k, v); }},
      {"prop.jitter", [&](auto& k, auto& v) { cfg.jitter = parse_double(k, v); }},
      {"train.teacher_iterations", [&](auto& k, auto& v) { cfg.teacher_iterations = parse_int(k, v); }},
      {"train.finetune_iterations", [&](auto& k, auto& v) { cfg.finetune_iterations = parse_int(k, v); }},
      {"train.student_iterations", [&](auto& k, auto& v) { cfg.student_iterations = parse_int(k, v); }},
      {"train.batch", [&](auto& k, auto& v) { cfg.batch = parse_int(k, v); }},
      {"train.lr", [&](auto& k, auto& v) { cfg.lr = parse_double(k, v); }},
      {"train.finetune_lr", [&](auto& k, auto& v) { cfg.finetune_lr = parse_double(k, v); }},
      {"train.momentum", [&](auto& k, auto& v) { cfg.momentum = parse_double(k, v); }},
      {"train.weight_decay", [&](auto& k, auto& v) { cfg.weight_decay = parse_double(k, v); }},
      {"train.seed", [&](auto& k, auto& v) { cfg.train_seed = parse_u64(k, v); }},
      {"train.clip_norm", [&](auto& k, auto& v) { cfg.clip_norm = parse_double(k, v); }},
      {"train.warmup_fraction", [&](auto& k, auto& v) { cfg.warmup_fraction = parse_double(k, v); }},
      {"train.scratch_quantize", [&](auto& k, auto& v) { cfg.scratch_quantize = parse_bool(k, v); }},
      {"mimic.lambda", [&](auto& k, auto& v) { cfg.lambda = parse_double(k, v); }},
      {"mimic.quantize_teacher", [&](auto& k, auto& v) { cfg.quantize_teacher = parse_bool(k, v); }},
      {"mimic.quantize_student", [&](auto& k, auto& v) { cfg.quantize_student = parse_bool(k, v); }},
      {"mimic.match_threshold", [&](auto& k, auto& v) { cfg.match_threshold = parse_double(k, v); }},
      {"quant.stride", [&](auto& k, auto& v) { cfg.quant_stride = parse_double(k, v); }},
      {"quant.cap_percentile", [&](auto& k, auto& v) { cfg.cap_percentile = parse_double(k, v); }},
      {"quant.cap_min", [&](auto& k, auto& v) { cfg.cap_min = parse_double(k, v); }},
      {"eval.iou", [&](auto& k, auto& v) { cfg.eval_iou = parse_double(k, v); }},
      {"eval.seed", [&](auto& k, auto& v) { cfg.eval_seed = parse_u64(k, v); }},
      {"out.dir", [&](auto&, auto& v) { cfg.out_dir = resolve_path(base_dir, v); }},
  };

  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const size_t eq = line.find('=');
    QM_CHECK_CONFIG(eq != std::string::npos,
                    "config line " + std::to_string(line_no) + ": expected 'key = value'");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    auto it = setters.find(key);
    QM_CHECK_CONFIG(it != setters.end(), "config line " + std::to_string(line_no) +
                                             ": unknown key '" + key + "'");
    it->second(key, value);
  }

  // Defaults for files/out_dir still need base_dir resolution.
  cfg.train_file = resolve_path(base_dir, cfg.train_file);
  cfg.test_file = resolve_path(base_dir, cfg.test_file);
  cfg.out_dir = resolve_path(base_dir, cfg.out_dir);
  return cfg;
}

Config load_config(const std::string& path) {
  std::ifstream in(path);
  QM_CHECK_IO(in.good(), "cannot open config '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  const std::string dir = std::filesystem::path(path).parent_path().string();
  return parse_config_text(ss.str(), dir);
}

DatasetSpec dataset_spec(const Config& cfg, bool test_split) {
  DatasetSpec spec;
  spec.image_size = cfg.image_size;
  spec.num_images = test_split ? cfg.test_images : cfg.train_images;
  spec.seed = test_split ? cfg.test_seed : cfg.data_seed;
  spec.objects_min = cfg.objects_min;
  spec.objects_max = cfg.objects_max;
  spec.size_min = cfg.size_min;
  spec.size_max = cfg.size_max;
  spec.noise_level = cfg.noise;
  spec.intensity_scale = cfg.intensity_scale;
  return spec;
}

TrainRun run_from_config(const Config& cfg, Stage stage, uint64_t seed) {
  TrainRun run;
  run.stage = stage;
  run.seed = seed != 0 ? seed : cfg.train_seed;
  run.batch_size = cfg.batch;
  run.opt.momentum = cfg.momentum;
  run.opt.weight_decay = cfg.weight_decay;
  run.opt.clip_norm = cfg.clip_norm;
  run.opt.warmup_fraction = cfg.warmup_fraction;
  run.head_hidden = cfg.head_hidden;
  run.roi_out = cfg.roi_out;
  run.num_classes = kNumShapeClasses;
  run.proposals.per_object = cfg.per_object;
  run.proposals.jitter = cfg.jitter;
  run.quant_stride = cfg.quant_stride;
  run.quant_cap_percentile = cfg.cap_percentile;
  run.quant_cap_min = cfg.cap_min;

  run.backbone.base_channels = cfg.channels;
  run.backbone.input_channels = 1;
  run.mimic.match_threshold = cfg.match_threshold;

  switch (stage) {
    case Stage::Teacher:
      run.iterations = cfg.teacher_iterations;
      run.opt.lr = cfg.lr;
      run.backbone.width_divisor = cfg.teacher_divisor;
      break;
    case Stage::QuantizeFinetune:
      run.iterations = cfg.finetune_iterations;
      run.opt.lr = cfg.finetune_lr;
      run.backbone.width_divisor = cfg.teacher_divisor;
      break;
    case Stage::StudentScratch:
      run.iterations = cfg.student_iterations;
      run.opt.lr = cfg.lr;
      run.backbone.width_divisor = cfg.student_divisor;
      run.mimic.lambda = 0.0;
      run.mimic.quantize_teacher = false;
      run.mimic.quantize_student = cfg.scratch_quantize;
      break;
    case Stage::StudentMimicOnly:
      run.iterations = cfg.student_iterations;
      run.opt.lr = cfg.lr;
      run.backbone.width_divisor = cfg.student_divisor;
      run.mimic.lambda = cfg.lambda;
      run.mimic.quantize_teacher = false;
      run.mimic.quantize_student = false;
      break;
    case Stage::StudentQMimic:
      run.iterations = cfg.student_iterations;
      run.opt.lr = cfg.lr;
      run.backbone.width_divisor = cfg.student_divisor;
      run.mimic.lambda = cfg.lambda;
      run.mimic.quantize_teacher = cfg.quantize_teacher;
      run.mimic.quantize_student = cfg.quantize_student;
      break;
  }
  return run;
}

EvalOptions eval_options(const Config& cfg) {
  EvalOptions opts;
  opts.iou_threshold = cfg.eval_iou;
  opts.seed = cfg.eval_seed;
  opts.proposals.per_object = cfg.per_object;
  opts.proposals.jitter = cfg.jitter;
  opts.match_threshold = cfg.match_threshold;
  return opts;
}

}  // namespace qm
