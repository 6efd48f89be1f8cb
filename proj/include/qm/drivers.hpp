#pragma once

#include <map>
#include <string>
#include <vector>

#include "qm/config.hpp"
#include "qm/pipeline.hpp"

namespace qm {

// (full-precision teacher, quantize-finetuned teacher) for one seed.
struct TeacherChain {
  Checkpoint full_precision;
  Checkpoint quantized;
};

using TeacherCache = std::map<uint64_t, TeacherChain>;

TeacherChain train_teacher_chain(const Config& cfg, uint64_t seed, const Dataset& train);

// Returns the cached chain for `seed`, training (and caching) on miss.
const TeacherChain& chain_for_seed(const Config& cfg, uint64_t seed, const Dataset& train,
                                   TeacherCache& cache);

struct SweepAggregate {
  double lambda = 0.0;
  int runs = 0;
  double toy_ap_mean = 0.0;
  double toy_ap_std = 0.0;  // sample stddev, 0 for a single run
  double matching_mean = 0.0;
};

struct SweepResult {
  std::vector<MetricsRow> rows;             // one per (lambda, seed)
  std::vector<SweepAggregate> aggregates;   // one per lambda, input order
  std::string runs_csv() const;
  std::string aggregate_csv() const;        // lambda,runs,toy_ap_mean,toy_ap_std,matching_mean
};

// student-qmimic per (lambda, seed); seeds are train.seed, train.seed+1, ...
SweepResult sweep_lambda(const Config& cfg, const std::vector<double>& lambdas, int seeds,
                         const Dataset& train, const Dataset& test, TeacherCache& cache,
                         bool log_progress = false);

struct AblateResult {
  // Grid rows per seed: (tq,sq) in {00,01,10,11} plus scratch.
  std::vector<MetricsRow> rows;
  // Teacher rows (full-precision and quantized) per seed, for parity checks.
  std::vector<MetricsRow> teacher_rows;
  std::string rows_csv() const;
};

AblateResult ablate_quant(const Config& cfg, int seeds, const Dataset& train, const Dataset& test,
                          TeacherCache& cache, bool log_progress = false);

}  // namespace qm
