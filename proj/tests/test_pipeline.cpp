#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "qm/pipeline.hpp"
#include "qm/rng.hpp"

using namespace qm;

namespace {

DatasetSpec tiny_data_spec(int n, uint64_t seed) {
  DatasetSpec spec;
  spec.image_size = 32;
  spec.num_images = n;
  spec.size_min = 0.25;
  spec.size_max = 0.45;
  spec.noise_level = 0.08;
  spec.seed = seed;
  return spec;
}

TrainRun tiny_run(Stage stage, uint64_t seed = 1) {
  TrainRun run;
  run.stage = stage;
  run.iterations = 30;
  run.batch_size = 3;
  run.opt.lr = 0.02;
  run.seed = seed;
  run.backbone.base_channels = {6, 12};
  run.backbone.width_divisor =
      (stage == Stage::Teacher || stage == Stage::QuantizeFinetune) ? 1 : 4;
  run.head_hidden = 24;
  run.roi_out = 3;
  run.proposals.per_object = 2;
  run.proposals.jitter = 0.15;
  run.calibration_images = 16;
  return run;
}

bool checkpoints_equal(const Checkpoint& a, const Checkpoint& b) {
  if (a.tensors.size() != b.tensors.size()) return false;
  for (size_t i = 0; i < a.tensors.size(); ++i) {
    if (a.tensors[i].first != b.tensors[i].first) return false;
    if (a.tensors[i].second.shape() != b.tensors[i].second.shape()) return false;
    for (int64_t j = 0; j < a.tensors[i].second.size(); ++j)
      if (a.tensors[i].second[j] != b.tensors[i].second[j]) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("teacher training descends and is bit-deterministic") {
  Dataset train = generate(tiny_data_spec(24, 5));
  TrainRun run = tiny_run(Stage::Teacher);
  run.iterations = 60;
  TrainResult a = train_teacher(run, train);
  TrainResult b = train_teacher(run, train);
  CHECK(checkpoints_equal(a.checkpoint, b.checkpoint));
  REQUIRE(a.loss_log.size() == 60);
  double head = 0, tail = 0;
  for (int i = 0; i < 10; ++i) {
    head += a.loss_log[static_cast<size_t>(i)][3];
    tail += a.loss_log[a.loss_log.size() - 1 - static_cast<size_t>(i)][3];
  }
  CHECK(tail < head);
  for (const auto& row : a.loss_log) CHECK(std::isfinite(row[3]));

  TrainRun other = run;
  other.seed = 2;
  CHECK(!checkpoints_equal(train_teacher(other, train).checkpoint, a.checkpoint));
}

TEST_CASE("quantize finetune produces a scheme and a lattice-valued feature map") {
  Dataset train = generate(tiny_data_spec(24, 5));
  Checkpoint teacher = train_teacher(tiny_run(Stage::Teacher), train).checkpoint;
  CHECK(!teacher.meta.scheme.has_value());

  TrainRun ft = tiny_run(Stage::QuantizeFinetune);
  Checkpoint quantized = quantize_finetune(teacher, ft, train).checkpoint;
  REQUIRE(quantized.meta.scheme.has_value());
  CHECK(quantized.meta.scheme->kind() == QuantizationScheme::Kind::Uniform);
  CHECK(quantized.meta.scheme->stride() == 1.0);
  CHECK(quantized.meta.scheme->entries().size() >= 2);

  // the quantized teacher's feature map takes only dictionary values
  Model model = build_model(quantized);
  const auto& entries = quantized.meta.scheme->entries();
  auto img = make_leaf<float>(Tensor({1, 1, 32, 32}, train[0].image.values()));
  auto fm = model.backbone.forward(img, &*quantized.meta.scheme);
  for (int64_t i = 0; i < fm->value.size(); ++i) {
    const double v = fm->value[i];
    CHECK(std::find(entries.begin(), entries.end(), v) != entries.end());
  }
}

TEST_CASE("student stage validation") {
  Dataset train = generate(tiny_data_spec(12, 6));
  Checkpoint teacher = train_teacher(tiny_run(Stage::Teacher), train).checkpoint;

  TrainRun qmimic = tiny_run(Stage::StudentQMimic);
  CHECK_THROWS_AS(train_student(nullptr, qmimic, train), ConfigError);

  TrainRun mimic_only = tiny_run(Stage::StudentMimicOnly);
  mimic_only.mimic.quantize_student = true;
  CHECK_THROWS_AS(train_student(&teacher, mimic_only, train), ConfigError);

  TrainRun scratch = tiny_run(Stage::StudentScratch);
  CHECK_THROWS_AS(train_student(&teacher, scratch, train), ConfigError);

  // spatially mismatched teacher (different stage count) fails at setup
  TrainRun deep = tiny_run(Stage::Teacher);
  deep.backbone.base_channels = {4, 8, 8};
  deep.iterations = 2;
  Checkpoint deep_teacher = train_teacher(deep, train).checkpoint;
  TrainRun st = tiny_run(Stage::StudentQMimic);
  st.iterations = 2;
  CHECK_THROWS_AS(train_student(&deep_teacher, st, train), ShapeError);
}

TEST_CASE("lambda-zero no-teacher run is trajectory-identical to scratch") {
  Dataset train = generate(tiny_data_spec(20, 7));
  TrainRun scratch = tiny_run(Stage::StudentScratch, 3);
  TrainResult a = train_student(nullptr, scratch, train);

  TrainRun generic = tiny_run(Stage::StudentScratch, 3);
  generic.mimic.lambda = 0.0;
  generic.mimic.quantize_teacher = false;
  generic.mimic.quantize_student = false;
  TrainResult b = train_student(nullptr, generic, train);

  REQUIRE(a.loss_log.size() == b.loss_log.size());
  for (size_t i = 0; i < a.loss_log.size(); ++i)
    for (int k = 0; k < 4; ++k) CHECK(a.loss_log[i][k] == b.loss_log[i][k]);
  CHECK(checkpoints_equal(a.checkpoint, b.checkpoint));
}

TEST_CASE("mimic training runs and freezes the teacher") {
  Dataset train = generate(tiny_data_spec(20, 8));
  Checkpoint teacher = train_teacher(tiny_run(Stage::Teacher), train).checkpoint;
  Checkpoint teacher_before = teacher;

  TrainRun run = tiny_run(Stage::StudentQMimic, 11);
  run.mimic.lambda = 1.0;
  run.mimic.quantize_teacher = true;
  run.mimic.quantize_student = true;
  TrainResult tr = train_student(&teacher, run, train);
  CHECK(checkpoints_equal(teacher, teacher_before));
  CHECK(tr.checkpoint.meta.adapter_dims.has_value());
  CHECK(tr.checkpoint.meta.scheme.has_value());
  CHECK(tr.checkpoint.meta.quantize_teacher);
  CHECK(tr.checkpoint.meta.quantize_student);
  for (const auto& row : tr.loss_log) {
    CHECK(std::isfinite(row[3]));
    CHECK(row[2] >= 0.f);  // mimic term
  }
  // adapter parameters persist in the checkpoint
  bool has_adapter = false;
  for (const auto& [name, t] : tr.checkpoint.tensors)
    if (name == "adapter.weight") has_adapter = true;
  CHECK(has_adapter);

  // determinism of the full mimic path
  TrainResult tr2 = train_student(&teacher, run, train);
  CHECK(checkpoints_equal(tr.checkpoint, tr2.checkpoint));
}

TEST_CASE("checkpoint round trip is bit-exact and reload evaluates identically") {
  Dataset train = generate(tiny_data_spec(20, 9));
  Dataset test = generate(tiny_data_spec(10, 10));
  Checkpoint teacher = train_teacher(tiny_run(Stage::Teacher), train).checkpoint;
  Checkpoint quantized = quantize_finetune(teacher, tiny_run(Stage::QuantizeFinetune), train).checkpoint;

  const std::string path = "test_ckpt.qmim";
  save_checkpoint(quantized, path);
  Checkpoint back = load_checkpoint(path);
  CHECK(checkpoints_equal(quantized, back));
  CHECK(back.meta.stage == "quantize-finetune");
  REQUIRE(back.meta.scheme.has_value());
  CHECK(back.meta.scheme->entries() == quantized.meta.scheme->entries());

  EvalOptions opts;
  EvalResult e1 = evaluate(quantized, test, opts);
  EvalResult e2 = evaluate(back, test, opts);
  CHECK(e1.toy_ap == e2.toy_ap);
  CHECK(e1.roi_accuracy == e2.roi_accuracy);
  std::remove(path.c_str());
}

TEST_CASE("loading a teacher checkpoint into a student model names the bad tensor") {
  Dataset train = generate(tiny_data_spec(12, 11));
  TrainRun teacher_run = tiny_run(Stage::Teacher);
  teacher_run.iterations = 2;
  Checkpoint teacher = train_teacher(teacher_run, train).checkpoint;
  TrainRun scratch = tiny_run(Stage::StudentScratch);
  scratch.iterations = 2;
  Checkpoint student = train_student(nullptr, scratch, train).checkpoint;

  Model student_model = build_model(student);
  CHECK_THROWS_WITH_AS(load_params_into(student_model, teacher),
                       doctest::Contains("backbone.conv0.weight"), ShapeError);
}

TEST_CASE("corrupt checkpoint files raise io errors") {
  const std::string path = "test_ckpt_bad.qmim";
  {
    std::ofstream out(path, std::ios::binary);
    out << "WRONGMAGIC";
  }
  CHECK_THROWS_WITH_AS(load_checkpoint(path), doctest::Contains("bad magic"), IoError);
  std::remove(path.c_str());
  CHECK_THROWS_AS(load_checkpoint("missing_ckpt.qmim"), IoError);
}

TEST_CASE("nan abort names the iteration") {
  Dataset train = generate(tiny_data_spec(12, 12));
  TrainRun run = tiny_run(Stage::Teacher);
  run.opt.lr = 1e25;
  CHECK_THROWS_WITH_AS(train_teacher(run, train), doctest::Contains("iteration"), NumericError);
}

TEST_CASE("match_predictions: perfect and background-only predictors") {
  std::vector<GroundTruthObject> gts(2);
  gts[0].class_id = 0;
  gts[0].box[0] = 2;
  gts[0].box[1] = 2;
  gts[0].box[2] = 10;
  gts[0].box[3] = 10;
  gts[1].class_id = 2;
  gts[1].box[0] = 16;
  gts[1].box[1] = 16;
  gts[1].box[2] = 28;
  gts[1].box[3] = 28;

  std::vector<EvalCandidate> perfect(2);
  for (int i = 0; i < 2; ++i) {
    perfect[static_cast<size_t>(i)].class_id = gts[static_cast<size_t>(i)].class_id;
    perfect[static_cast<size_t>(i)].score = 0.9;
    perfect[static_cast<size_t>(i)].index = i;
    for (int k = 0; k < 4; ++k)
      perfect[static_cast<size_t>(i)].box[k] = gts[static_cast<size_t>(i)].box[k];
  }
  CHECK(match_predictions(perfect, gts, 0.5) == 2);
  CHECK(match_predictions({}, gts, 0.5) == 0);

  // one-to-one: duplicates of the same object count once
  std::vector<EvalCandidate> dup = {perfect[0], perfect[0], perfect[0]};
  dup[1].index = 1;
  dup[2].index = 2;
  CHECK(match_predictions(dup, gts, 0.5) == 1);

  // wrong class never matches
  std::vector<EvalCandidate> wrong = {perfect[0]};
  wrong[0].class_id = 1;
  CHECK(match_predictions(wrong, gts, 0.5) == 0);

  // the worked IoU example: 25/175 ~ 0.1429 matches only below that threshold
  std::vector<GroundTruthObject> g1(1);
  g1[0].class_id = 0;
  g1[0].box[0] = 0;
  g1[0].box[1] = 0;
  g1[0].box[2] = 10;
  g1[0].box[3] = 10;
  std::vector<EvalCandidate> c1(1);
  c1[0].class_id = 0;
  c1[0].score = 1.0;
  c1[0].box[0] = 5;
  c1[0].box[1] = 5;
  c1[0].box[2] = 15;
  c1[0].box[3] = 15;
  CHECK(match_predictions(c1, g1, 0.5) == 0);
  CHECK(match_predictions(c1, g1, 25.0 / 175.0) == 1);
}

TEST_CASE("background-only model evaluates to zero toy-AP") {
  Dataset test = generate(tiny_data_spec(8, 13));
  TrainRun run = tiny_run(Stage::StudentScratch);
  run.iterations = 1;
  Dataset train = generate(tiny_data_spec(8, 14));
  Checkpoint ckpt = train_student(nullptr, run, train).checkpoint;
  for (auto& [name, tensor] : ckpt.tensors) {
    tensor.zero();
    if (name == "head.cls.bias") tensor[tensor.size() - 1] = 50.f;  // background logit
  }
  EvalResult ev = evaluate(ckpt, test, EvalOptions{});
  CHECK(ev.toy_ap == 0.0);
  CHECK(ev.gt_matched == 0);
}

TEST_CASE("evaluate is deterministic and independent of sample order") {
  Dataset train = generate(tiny_data_spec(16, 15));
  Dataset test = generate(tiny_data_spec(12, 16));
  TrainRun run = tiny_run(Stage::Teacher);
  run.iterations = 40;
  Checkpoint teacher = train_teacher(run, train).checkpoint;

  EvalOptions opts;
  EvalResult e1 = evaluate(teacher, test, opts);
  EvalResult e2 = evaluate(teacher, test, opts);
  CHECK(e1.toy_ap == e2.toy_ap);

  // evaluate derives proposals from the per-sample position, so reordering
  // the dataset must not change integer match counts
  Dataset reversed(test.rbegin(), test.rend());
  EvalResult e3 = evaluate(teacher, reversed, opts);
  CHECK(e3.gt_total == e1.gt_total);
  // counts may redistribute only if per-position seeds changed pairings;
  // with position-derived seeds the per-sample proposal sets travel with the
  // position, so totals must agree exactly when the multiset of samples does
  CHECK(e3.gt_matched == e1.gt_matched);
}

TEST_CASE("metrics csv format") {
  MetricsRow row;
  row.run_id = make_run_id("student-qmimic", 3, 1.0, true, true);
  row.stage = "student-qmimic";
  row.seed = 3;
  row.lambda = 1.0;
  row.tq = true;
  row.sq = true;
  row.toy_ap = 0.5;
  row.mean_matching_ratio = 0.25;
  row.wall_time_s = 1.5;
  CHECK(metrics_csv_header() == "run_id,stage,seed,lambda,tq,sq,toy_ap,mean_matching_ratio,wall_time_s\n");
  CHECK(metrics_csv_row(row) == "student-qmimic-s3-l1-tq1-sq1,student-qmimic,3,1,1,1,0.500000,0.250000,1.500\n");
}
