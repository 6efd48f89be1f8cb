#include "qm/drivers.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>

namespace qm {

namespace {

double now_seconds() {
  return std::chrono::duration<double>(std::chrono::steady_clock::now().time_since_epoch()).count();
}

MetricsRow row_for(const Checkpoint& ckpt, const EvalResult& eval, double wall) {
  MetricsRow row;
  row.stage = ckpt.meta.stage;
  row.seed = ckpt.meta.seed;
  row.lambda = ckpt.meta.lambda;
  row.tq = ckpt.meta.quantize_teacher;
  row.sq = ckpt.meta.quantize_student;
  row.run_id = make_run_id(row.stage, row.seed, row.lambda, row.tq, row.sq);
  row.toy_ap = eval.toy_ap;
  row.mean_matching_ratio = eval.mean_matching_ratio;
  row.wall_time_s = wall;
  return row;
}

}  // namespace

TeacherChain train_teacher_chain(const Config& cfg, uint64_t seed, const Dataset& train) {
  TeacherChain chain;
  TrainRun teacher_run = run_from_config(cfg, Stage::Teacher, seed);
  chain.full_precision = train_teacher(teacher_run, train).checkpoint;
  TrainRun ft_run = run_from_config(cfg, Stage::QuantizeFinetune, seed);
  chain.quantized = quantize_finetune(chain.full_precision, ft_run, train).checkpoint;
  return chain;
}

const TeacherChain& chain_for_seed(const Config& cfg, uint64_t seed, const Dataset& train,
                                   TeacherCache& cache) {
  auto it = cache.find(seed);
  if (it == cache.end()) it = cache.emplace(seed, train_teacher_chain(cfg, seed, train)).first;
  return it->second;
}

// ---------------------------------------------------------------------------
// Lambda sweep
// ---------------------------------------------------------------------------

SweepResult sweep_lambda(const Config& cfg, const std::vector<double>& lambdas, int seeds,
                         const Dataset& train, const Dataset& test, TeacherCache& cache,
                         bool log_progress) {
  QM_CHECK_CONFIG(!lambdas.empty(), "sweep-lambda: empty value list");
  QM_CHECK_CONFIG(seeds >= 1, "sweep-lambda: seeds " + std::to_string(seeds) + " < 1");
  SweepResult result;
  const EvalOptions opts = eval_options(cfg);

  for (double lambda : lambdas) {
    for (int i = 0; i < seeds; ++i) {
      const uint64_t seed = cfg.train_seed + static_cast<uint64_t>(i);
      const TeacherChain& chain = chain_for_seed(cfg, seed, train, cache);
      TrainRun run = run_from_config(cfg, Stage::StudentQMimic, seed);
      run.mimic.lambda = lambda;
      run.log_progress = log_progress;
      const double t0 = now_seconds();
      TrainResult tr = train_student(&chain.quantized, run, train);
      EvalResult ev = evaluate(tr.checkpoint, test, opts, &chain.quantized);
      result.rows.push_back(row_for(tr.checkpoint, ev, now_seconds() - t0));
      if (log_progress)
        std::fprintf(stderr, "sweep lambda=%g seed=%llu toy_ap=%.4f matching=%.4f\n", lambda,
                     static_cast<unsigned long long>(seed), ev.toy_ap, ev.mean_matching_ratio);
    }
  }

  for (double lambda : lambdas) {
    SweepAggregate agg;
    agg.lambda = lambda;
    double sum = 0.0, match_sum = 0.0;
    std::vector<double> aps;
    for (const auto& row : result.rows)
      if (row.lambda == lambda) {
        aps.push_back(row.toy_ap);
        sum += row.toy_ap;
        match_sum += row.mean_matching_ratio;
      }
    agg.runs = static_cast<int>(aps.size());
    agg.toy_ap_mean = sum / agg.runs;
    agg.matching_mean = match_sum / agg.runs;
    if (agg.runs > 1) {
      double ss = 0.0;
      for (double ap : aps) ss += (ap - agg.toy_ap_mean) * (ap - agg.toy_ap_mean);
      agg.toy_ap_std = std::sqrt(ss / (agg.runs - 1));
    }
    result.aggregates.push_back(agg);
  }
  return result;
}

std::string SweepResult::runs_csv() const {
  std::string out = metrics_csv_header();
  for (const auto& row : rows) out += metrics_csv_row(row);
  return out;
}

std::string SweepResult::aggregate_csv() const {
  std::string out = "lambda,runs,toy_ap_mean,toy_ap_std,matching_mean\n";
  char line[160];
  for (const auto& a : aggregates) {
    std::snprintf(line, sizeof(line), "%.17g,%d,%.6f,%.6f,%.6f\n", a.lambda, a.runs, a.toy_ap_mean,
                  a.toy_ap_std, a.matching_mean);
    out += line;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Quantization ablation grid
// ---------------------------------------------------------------------------

AblateResult ablate_quant(const Config& cfg, int seeds, const Dataset& train, const Dataset& test,
                          TeacherCache& cache, bool log_progress) {
  QM_CHECK_CONFIG(seeds >= 1, "ablate-quant: seeds " + std::to_string(seeds) + " < 1");
  AblateResult result;
  const EvalOptions opts = eval_options(cfg);

  for (int i = 0; i < seeds; ++i) {
    const uint64_t seed = cfg.train_seed + static_cast<uint64_t>(i);
    const TeacherChain& chain = chain_for_seed(cfg, seed, train, cache);
    result.teacher_rows.push_back(row_for(chain.full_precision, evaluate(chain.full_precision, test, opts), 0.0));
    result.teacher_rows.push_back(row_for(chain.quantized, evaluate(chain.quantized, test, opts), 0.0));

    // The 2x2 {teacher-quant} x {student-quant} grid. The {off,off} cell is
    // the plain mimic baseline and runs against the full-precision teacher;
    // rows with a quantized teacher run against the finetuned one.
    for (int tq = 0; tq <= 1; ++tq) {
      for (int sq = 0; sq <= 1; ++sq) {
        const Stage stage = (tq == 0 && sq == 0) ? Stage::StudentMimicOnly : Stage::StudentQMimic;
        TrainRun run = run_from_config(cfg, stage, seed);
        run.mimic.lambda = cfg.lambda;
        run.mimic.quantize_teacher = tq == 1;
        run.mimic.quantize_student = sq == 1;
        run.log_progress = log_progress;
        const Checkpoint& teacher = tq == 1 ? chain.quantized : chain.full_precision;
        const double t0 = now_seconds();
        TrainResult tr = train_student(&teacher, run, train);
        EvalResult ev = evaluate(tr.checkpoint, test, opts, &teacher);
        result.rows.push_back(row_for(tr.checkpoint, ev, now_seconds() - t0));
        if (log_progress)
          std::fprintf(stderr, "ablate tq=%d sq=%d seed=%llu toy_ap=%.4f matching=%.4f\n", tq, sq,
                       static_cast<unsigned long long>(seed), ev.toy_ap, ev.mean_matching_ratio);
      }
    }

    TrainRun scratch = run_from_config(cfg, Stage::StudentScratch, seed);
    scratch.mimic.quantize_student = false;
    scratch.log_progress = log_progress;
    const double t0 = now_seconds();
    TrainResult tr = train_student(nullptr, scratch, train);
    EvalResult ev = evaluate(tr.checkpoint, test, opts);
    result.rows.push_back(row_for(tr.checkpoint, ev, now_seconds() - t0));
    if (log_progress)
      std::fprintf(stderr, "ablate scratch seed=%llu toy_ap=%.4f\n",
                   static_cast<unsigned long long>(seed), ev.toy_ap);
  }
  return result;
}

std::string AblateResult::rows_csv() const {
  std::string out = metrics_csv_header();
  for (const auto& row : rows) out += metrics_csv_row(row);
  return out;
}

}  // namespace qm
