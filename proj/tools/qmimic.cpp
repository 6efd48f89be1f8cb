// qmimic: train and analyze quantized-feature-map mimic models on the
// synthetic shape-detection task. See README.md for the full recipe.

#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "qm/analysis.hpp"
#include "qm/config.hpp"
#include "qm/drivers.hpp"
#include "qm/pipeline.hpp"

namespace {

using namespace qm;

double now_seconds() {
  return std::chrono::duration<double>(std::chrono::steady_clock::now().time_since_epoch()).count();
}

void write_file(const std::string& path, const std::string& content) {
  std::ofstream out(path);
  QM_CHECK_IO(out.good(), "cannot open '" + path + "' for writing");
  out << content;
  out.close();
  QM_CHECK_IO(!out.fail(), "write to '" + path + "' failed");
}

std::vector<double> parse_double_list(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    try {
      out.push_back(std::stod(item));
    } catch (...) {
      throw ConfigError("cannot parse number '" + item + "' in list '" + text + "'");
    }
  }
  QM_CHECK_CONFIG(!out.empty(), "empty number list '" + text + "'");
  return out;
}

std::string default_metrics_path(const std::string& out_path) {
  const size_t dot = out_path.find_last_of('.');
  const size_t slash = out_path.find_last_of('/');
  const bool has_ext = dot != std::string::npos && (slash == std::string::npos || dot > slash);
  return (has_ext ? out_path.substr(0, dot) : out_path) + "_metrics.csv";
}

int cmd_gen_data(const std::string& spec_path, const std::string& out_path, const std::string& split) {
  Config cfg = load_config(spec_path);
  QM_CHECK_CONFIG(split == "train" || split == "test", "--split must be 'train' or 'test'");
  Dataset ds = generate(dataset_spec(cfg, split == "test"));
  save_dataset(ds, out_path);
  std::fprintf(stderr, "wrote %zu samples to %s\n", ds.size(), out_path.c_str());
  return 0;
}

int cmd_train(const std::string& stage_name_in, const std::string& config_path,
              const std::string& teacher_path, const std::string& out_path,
              std::string metrics_path, uint64_t seed) {
  const Stage stage = stage_from_name(stage_name_in);
  Config cfg = load_config(config_path);
  const bool needs_teacher = stage == Stage::QuantizeFinetune || stage == Stage::StudentMimicOnly ||
                             stage == Stage::StudentQMimic;
  QM_CHECK_CONFIG(!needs_teacher || !teacher_path.empty(),
                  "--stage " + stage_name_in + " requires --teacher");
  QM_CHECK_CONFIG(needs_teacher || teacher_path.empty(),
                  "--stage " + stage_name_in + " does not take --teacher");

  Dataset train = load_dataset(cfg.train_file);
  Dataset test = load_dataset(cfg.test_file);
  Checkpoint teacher;
  if (!teacher_path.empty()) teacher = load_checkpoint(teacher_path);

  TrainRun run = run_from_config(cfg, stage, seed);
  run.log_progress = true;

  const double t0 = now_seconds();
  TrainResult result;
  switch (stage) {
    case Stage::Teacher:
      result = train_teacher(run, train);
      break;
    case Stage::QuantizeFinetune:
      result = quantize_finetune(teacher, run, train);
      break;
    default:
      result = train_student(teacher_path.empty() ? nullptr : &teacher, run, train);
      break;
  }
  save_checkpoint(result.checkpoint, out_path);

  const bool with_reference = stage == Stage::StudentMimicOnly || stage == Stage::StudentQMimic;
  EvalResult ev = evaluate(result.checkpoint, test, eval_options(cfg),
                           with_reference ? &teacher : nullptr);
  MetricsRow row;
  row.stage = result.checkpoint.meta.stage;
  row.seed = result.checkpoint.meta.seed;
  row.lambda = result.checkpoint.meta.lambda;
  row.tq = result.checkpoint.meta.quantize_teacher;
  row.sq = result.checkpoint.meta.quantize_student;
  row.run_id = make_run_id(row.stage, row.seed, row.lambda, row.tq, row.sq);
  row.toy_ap = ev.toy_ap;
  row.mean_matching_ratio = ev.mean_matching_ratio;
  row.wall_time_s = now_seconds() - t0;
  if (metrics_path.empty()) metrics_path = default_metrics_path(out_path);
  write_file(metrics_path, metrics_csv_header() + metrics_csv_row(row));
  std::fprintf(stderr, "%s: toy_ap %.4f roi_acc %.4f -> %s\n", row.run_id.c_str(), ev.toy_ap,
               ev.roi_accuracy, out_path.c_str());
  return 0;
}

int cmd_eval(const std::string& model_path, const std::string& data_path,
             const std::string& teacher_path, const std::string& out_csv,
             const std::string& hist_csv, bool quantized_inference, double iou, uint64_t seed) {
  Checkpoint model = load_checkpoint(model_path);
  Dataset data = load_dataset(data_path);
  Checkpoint teacher;
  const bool with_teacher = !teacher_path.empty();
  if (with_teacher) teacher = load_checkpoint(teacher_path);

  EvalOptions opts;
  opts.iou_threshold = iou;
  opts.seed = seed;
  opts.quantized_inference = quantized_inference;
  EvalResult ev = evaluate(model, data, opts, with_teacher ? &teacher : nullptr);

  MetricsRow row;
  row.stage = model.meta.stage;
  row.seed = model.meta.seed;
  row.lambda = model.meta.lambda;
  row.tq = model.meta.quantize_teacher;
  row.sq = model.meta.quantize_student;
  row.run_id = "eval-" + make_run_id(row.stage, row.seed, row.lambda, row.tq, row.sq);
  row.toy_ap = ev.toy_ap;
  row.mean_matching_ratio = ev.mean_matching_ratio;
  row.wall_time_s = 0.0;
  write_file(out_csv, metrics_csv_header() + metrics_csv_row(row));
  if (!hist_csv.empty()) {
    QM_CHECK_CONFIG(with_teacher, "--hist-csv requires --teacher");
    write_file(hist_csv, ev.matching_hist.to_csv());
  }
  std::fprintf(stderr, "toy_ap %.4f roi_acc %.4f matching %.4f\n", ev.toy_ap, ev.roi_accuracy,
               ev.mean_matching_ratio);
  return 0;
}

int cmd_sweep_lambda(const std::string& config_path, const std::string& values, int seeds,
                     const std::string& out_csv, std::string runs_csv) {
  Config cfg = load_config(config_path);
  Dataset train = load_dataset(cfg.train_file);
  Dataset test = load_dataset(cfg.test_file);
  TeacherCache cache;
  SweepResult result = sweep_lambda(cfg, parse_double_list(values), seeds, train, test, cache, true);
  write_file(out_csv, result.aggregate_csv());
  if (runs_csv.empty()) runs_csv = default_metrics_path(out_csv);
  write_file(runs_csv, result.runs_csv());
  std::fprintf(stderr, "sweep aggregate -> %s, per-run rows -> %s\n", out_csv.c_str(),
               runs_csv.c_str());
  return 0;
}

int cmd_ablate_quant(const std::string& config_path, int seeds, const std::string& out_csv) {
  Config cfg = load_config(config_path);
  Dataset train = load_dataset(cfg.train_file);
  Dataset test = load_dataset(cfg.test_file);
  TeacherCache cache;
  AblateResult result = ablate_quant(cfg, seeds, train, test, cache, true);
  write_file(out_csv, result.rows_csv());
  std::fprintf(stderr, "ablation grid -> %s\n", out_csv.c_str());
  return 0;
}

int cmd_analyze_cubes(int d, int k, const std::string& dict, int trials, const std::string& out_csv,
                      int samples, uint64_t seed) {
  std::vector<double> dictionary;
  if (dict.rfind("uniform:", 0) == 0) {
    const auto parts = parse_double_list(dict.substr(8));
    QM_CHECK_CONFIG(parts.size() == 2, "--dict uniform wants 'uniform:stride,max'");
    dictionary = make_uniform(parts[0], parts[1]).entries();
  } else if (dict.rfind("pow2:", 0) == 0) {
    const auto parts = parse_double_list(dict.substr(5));
    QM_CHECK_CONFIG(parts.size() == 2, "--dict pow2 wants 'pow2:kmin,kmax'");
    dictionary = make_pow2(static_cast<int>(parts[0]), static_cast<int>(parts[1])).entries();
  } else {
    dictionary = parse_double_list(dict);
  }
  RelaxationReport report = matching_relaxation_report(trials, d, k, dictionary, seed, samples);
  write_file(out_csv, report.to_csv());
  std::fprintf(stderr,
               "cells_total %llu | mean strict %.4f | mean relaxed %.4f | full coverage %.4f\n",
               static_cast<unsigned long long>(cell_count(d, dictionary)),
               report.mean_strict_fraction, report.mean_relaxed_fraction,
               report.full_coverage_fraction);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"quantized-feature-map mimic training on synthetic shape detection"};
  app.require_subcommand(1);

  std::string spec_path, out_path, split = "train";
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset file");
  gen->add_option("--spec", spec_path, "config file with data.* keys")->required();
  gen->add_option("--out", out_path, "output dataset path")->required();
  gen->add_option("--split", split, "train or test split (default train)");

  std::string stage, config_path, teacher_path, metrics_path;
  uint64_t seed = 0;
  auto* train = app.add_subcommand("train", "run one training stage");
  train->add_option("--stage", stage, "teacher|quantize-finetune|student-scratch|student-mimic-only|student-qmimic")
      ->required();
  train->add_option("--config", config_path, "config file")->required();
  train->add_option("--teacher", teacher_path, "teacher checkpoint (finetune/mimic stages)");
  train->add_option("--out", out_path, "output checkpoint path")->required();
  train->add_option("--metrics", metrics_path, "metrics CSV path (default <out>_metrics.csv)");
  train->add_option("--seed", seed, "override train.seed");

  std::string model_path, data_path, out_csv, hist_csv;
  bool quantized_inference = false;
  double eval_iou = 0.5;
  uint64_t eval_seed = 1234;
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  eval->add_option("--model", model_path, "model checkpoint")->required();
  eval->add_option("--data", data_path, "dataset file")->required();
  eval->add_option("--teacher", teacher_path, "reference teacher for matching-ratio diagnostics");
  eval->add_option("--out-csv", out_csv, "metrics CSV path")->required();
  eval->add_option("--hist-csv", hist_csv, "matching-ratio histogram CSV (needs --teacher)");
  eval->add_flag("--quantized-inference", quantized_inference, "apply the checkpoint scheme at inference");
  eval->add_option("--iou", eval_iou, "matching IoU threshold (default 0.5)");
  eval->add_option("--seed", eval_seed, "proposal seed (default 1234)");

  std::string values = "0.1,1,10", runs_csv;
  int seeds = 3;
  auto* sweep = app.add_subcommand("sweep-lambda", "student-qmimic over mimic loss weights");
  sweep->add_option("--config", config_path, "config file")->required();
  sweep->add_option("--values", values, "comma-separated lambda values (default 0.1,1,10)");
  sweep->add_option("--seeds", seeds, "number of seeds (default 3)");
  sweep->add_option("--out-csv", out_csv, "aggregate CSV path")->required();
  sweep->add_option("--runs-csv", runs_csv, "per-run CSV path (default <out>_metrics.csv)");

  auto* ablate = app.add_subcommand("ablate-quant", "2x2 quantization grid plus scratch baseline");
  ablate->add_option("--config", config_path, "config file")->required();
  ablate->add_option("--seeds", seeds, "number of seeds (default 3)");
  ablate->add_option("--out-csv", out_csv, "comparison CSV path")->required();

  int dim = 3, rank = 2, trials = 1000, samples = 2048;
  std::string dict = "1,3";
  uint64_t cube_seed = 7;
  auto* cubes = app.add_subcommand("analyze-cubes", "cell partition vs low-rank manifold simulator");
  cubes->add_option("--d", dim, "feature space dimension (default 3)");
  cubes->add_option("--k", rank, "manifold rank, below d (default 2)");
  cubes->add_option("--dict", dict, "entries '1,3', or 'uniform:s,max', or 'pow2:kmin,kmax'");
  cubes->add_option("--trials", trials, "number of random manifolds (default 1000)");
  cubes->add_option("--out-csv", out_csv, "per-trial CSV path")->required();
  cubes->add_option("--samples", samples, "Monte-Carlo samples per trial (default 2048)");
  cubes->add_option("--seed", cube_seed, "random seed (default 7)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (gen->parsed()) return cmd_gen_data(spec_path, out_path, split);
    if (train->parsed()) return cmd_train(stage, config_path, teacher_path, out_path, metrics_path, seed);
    if (eval->parsed())
      return cmd_eval(model_path, data_path, teacher_path, out_csv, hist_csv, quantized_inference,
                      eval_iou, eval_seed);
    if (sweep->parsed()) return cmd_sweep_lambda(config_path, values, seeds, out_csv, runs_csv);
    if (ablate->parsed()) return cmd_ablate_quant(config_path, seeds, out_csv);
    if (cubes->parsed()) return cmd_analyze_cubes(dim, rank, dict, trials, out_csv, samples, cube_seed);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const IoError& e) {
    std::fprintf(stderr, "io error: %s\n", e.what());
    return 3;
  } catch (const NumericError& e) {
    std::fprintf(stderr, "numeric error: %s\n", e.what());
    return 4;
  } catch (const ShapeError& e) {
    std::fprintf(stderr, "shape error: %s\n", e.what());
    return 5;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
