#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "gradcheck.hpp"
#include "qm/autograd.hpp"
#include "qm/rng.hpp"
#include "qm/tensor.hpp"

using namespace qm;
using qmtest::finite_diff_max_rel_err;
using qmtest::random_tensor;

namespace {

NodePtrT<double> leaf_d(TensorD t, const std::string& name = "") {
  return make_leaf<double>(std::move(t), name);
}

}  // namespace

TEST_CASE("tensor basics and shape errors") {
  Tensor t({2, 3});
  CHECK(t.size() == 6);
  CHECK(t.rank() == 2);
  t(1, 2) = 5.f;
  CHECK(t[5] == 5.f);
  CHECK_THROWS_AS(Tensor({2, -1}), ShapeError);
  CHECK_THROWS_AS(Tensor({2, 3}, {1.f, 2.f}), ShapeError);
  CHECK(Tensor::scalar(2.f).item() == 2.f);
  CHECK_THROWS_AS(Tensor({2, 2}).item(), ShapeError);
}

TEST_CASE("conv2d forward examples") {
  // all-ones 3x3 input and kernel: single output = 9
  auto x = leaf_d(TensorD::full({1, 1, 3, 3}, 1.0));
  auto w = leaf_d(TensorD::full({1, 1, 3, 3}, 1.0));
  auto b = leaf_d(TensorD({1}));
  auto y = conv2d<double>(x, w, b, 1, 0);
  CHECK(y->value.shape() == std::vector<int>{1, 1, 1, 1});
  CHECK(y->value[0] == doctest::Approx(9.0));

  // zero kernel: output equals bias everywhere
  Rng rng(3);
  auto xr = leaf_d(random_tensor({2, 3, 5, 5}, rng));
  auto wz = leaf_d(TensorD({4, 3, 3, 3}));
  auto bb = leaf_d(TensorD({4}, {0.5, -1.0, 2.0, 0.0}));
  auto yz = conv2d<double>(xr, wz, bb, 1, 1);
  for (int k = 0; k < 4; ++k)
    for (int h = 0; h < 5; ++h)
      for (int wdx = 0; wdx < 5; ++wdx) CHECK(yz->value(0, k, h, wdx) == bb->value[k]);
}

TEST_CASE("conv2d shape errors name the offending dimension") {
  auto x = leaf_d(TensorD({1, 3, 4, 4}));
  auto w = leaf_d(TensorD({2, 4, 3, 3}));
  auto b = leaf_d(TensorD({2}));
  CHECK_THROWS_WITH_AS(conv2d<double>(x, w, b, 1, 0),
                       doctest::Contains("input channels"), ShapeError);
  auto w2 = leaf_d(TensorD({2, 3, 7, 3}));
  CHECK_THROWS_WITH_AS(conv2d<double>(x, w2, b, 1, 0),
                       doctest::Contains("kernel height"), ShapeError);
}

TEST_CASE("conv2d gradient matches finite differences") {
  for (uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(seed);
    auto x = leaf_d(random_tensor({2, 3, 8, 8}, rng));
    auto w = leaf_d(random_tensor({4, 3, 3, 3}, rng));
    auto b = leaf_d(random_tensor({4}, rng));
    auto build = [&] { return sum<double>(conv2d<double>(x, w, b, 2, 1)); };
    CHECK(finite_diff_max_rel_err<double>({x, w, b}, build) <= 1e-4);
  }
}

TEST_CASE("relu forward and backward") {
  auto x = leaf_d(TensorD({3}, {-1.0, 0.0, 2.0}));
  auto y = relu<double>(x);
  CHECK(y->value[0] == 0.0);
  CHECK(y->value[1] == 0.0);
  CHECK(y->value[2] == 2.0);
  backward<double>(sum<double>(y));
  CHECK(x->grad[0] == 0.0);
  CHECK(x->grad[1] == 0.0);  // subgradient at 0 emits zero
  CHECK(x->grad[2] == 1.0);

  for (uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(100 + seed);
    // keep inputs away from the kink at zero
    TensorD t({4, 6});
    for (int64_t i = 0; i < t.size(); ++i) {
      const double mag = rng.uniform(0.1, 1.0);
      t[i] = rng.uniform() < 0.5 ? -mag : mag;
    }
    auto xr = leaf_d(std::move(t));
    auto build = [&] { return sum<double>(relu<double>(xr)); };
    CHECK(finite_diff_max_rel_err<double>({xr}, build) <= 1e-4);
  }
}

TEST_CASE("linear forward examples and gradients") {
  TensorD eye({3, 3});
  for (int i = 0; i < 3; ++i) eye(i, i) = 1.0;
  Rng rng(7);
  auto x = leaf_d(random_tensor({2, 3}, rng));
  auto w = leaf_d(std::move(eye));
  auto b = leaf_d(TensorD({3}));
  auto y = linear<double>(x, w, b);
  for (int64_t i = 0; i < y->value.size(); ++i) CHECK(y->value[i] == x->value[i]);

  auto wz = leaf_d(TensorD({3, 3}));
  auto bz = leaf_d(TensorD({3}, {1.0, 2.0, 3.0}));
  auto yz = linear<double>(x, wz, bz);
  for (int n = 0; n < 2; ++n)
    for (int m = 0; m < 3; ++m) CHECK(yz->value(n, m) == bz->value[m]);

  for (uint64_t seed = 0; seed < 5; ++seed) {
    Rng r2(40 + seed);
    auto xr = leaf_d(random_tensor({4, 6}, r2));
    auto wr = leaf_d(random_tensor({3, 6}, r2));
    auto br = leaf_d(random_tensor({3}, r2));
    auto build = [&] { return sum<double>(linear<double>(xr, wr, br)); };
    CHECK(finite_diff_max_rel_err<double>({xr, wr, br}, build) <= 1e-4);
  }
}

TEST_CASE("softmax cross entropy examples") {
  auto logits = leaf_d(TensorD::full({2, 4}, 0.7));
  auto loss = softmax_cross_entropy<double>(logits, {1, 3});
  CHECK(loss->value[0] == doctest::Approx(std::log(4.0)));

  TensorD dom({1, 3});
  dom(0, 1) = 1e6;
  auto loss2 = softmax_cross_entropy<double>(leaf_d(std::move(dom)), {1});
  CHECK(loss2->value[0] == doctest::Approx(0.0).epsilon(1e-9));

  CHECK_THROWS_WITH_AS(softmax_cross_entropy<double>(logits, {1, 4}), doctest::Contains("out of range"),
                       Error);
  CHECK_THROWS_AS(softmax_cross_entropy<double>(logits, {1}), ShapeError);

  for (uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(60 + seed);
    auto lr = leaf_d(random_tensor({5, 3}, rng, -2.0, 2.0));
    std::vector<int> labels(5);
    for (auto& l : labels) l = rng.randint(0, 3);
    auto build = [&] { return softmax_cross_entropy<double>(lr, labels); };
    CHECK(finite_diff_max_rel_err<double>({lr}, build) <= 1e-4);
  }
}

TEST_CASE("smooth l1 branches and gradients") {
  TensorD target({1, 4});
  auto pred_eq = leaf_d(TensorD({1, 4}));
  CHECK(smooth_l1<double>(pred_eq, target)->value[0] == 0.0);

  TensorD p1({1, 4});
  p1(0, 0) = 0.5;
  CHECK(smooth_l1<double>(leaf_d(std::move(p1)), target)->value[0] == doctest::Approx(0.125));

  TensorD p2({1, 4});
  p2(0, 0) = 2.0;
  CHECK(smooth_l1<double>(leaf_d(std::move(p2)), target)->value[0] == doctest::Approx(1.5));

  for (uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(80 + seed);
    // diffs stay away from the |d| == 1 kink
    TensorD pr({3, 4});
    TensorD tg({3, 4});
    for (int64_t i = 0; i < pr.size(); ++i) {
      tg[i] = rng.uniform(-1.0, 1.0);
      double d = rng.uniform(0.1, 0.8);
      if (rng.uniform() < 0.5) d = rng.uniform(1.2, 3.0);
      pr[i] = tg[i] + (rng.uniform() < 0.5 ? -d : d);
    }
    auto pn = leaf_d(std::move(pr));
    auto build = [&] { return smooth_l1<double>(pn, tg); };
    CHECK(finite_diff_max_rel_err<double>({pn}, build) <= 1e-4);
  }
}

TEST_CASE("sgd momentum recurrence and convergence") {
  auto p = make_leaf<float>(Tensor({1}), "p");
  p->grad[0] = 1.f;
  sgd_step<float>({p}, 1.f, 0.f, 0.f);
  CHECK(p->value[0] == -1.f);
  CHECK(p->grad[0] == 0.f);

  auto q = make_leaf<float>(Tensor({1}), "q");
  q->grad[0] = 1.f;
  sgd_step<float>({q}, 1.f, 0.9f, 0.f);
  q->grad[0] = 1.f;
  sgd_step<float>({q}, 1.f, 0.9f, 0.f);
  CHECK(q->value[0] == doctest::Approx(-2.9).epsilon(1e-6));

  // f(p) = p^2 from p=1, lr 0.1: p_k = (1 - 2*lr)^k
  auto r = make_leaf<float>(Tensor({1}, {1.f}), "r");
  for (int k = 0; k < 100; ++k) {
    auto loss = sum<float>(mul<float>(r, r));
    backward<float>(loss);
    sgd_step<float>({r}, 0.1f, 0.f, 0.f);
  }
  CHECK(std::abs(r->value[0]) < 1e-4);
  CHECK(r->value[0] == doctest::Approx(std::pow(0.8, 100)).epsilon(1e-3));

  auto bad = make_leaf<float>(Tensor({1}), "theta");
  bad->grad[0] = std::numeric_limits<float>::quiet_NaN();
  CHECK_THROWS_WITH_AS(sgd_step<float>({bad}, 0.1f, 0.f, 0.f), doctest::Contains("theta"),
                       NumericError);
}

TEST_CASE("backward basics") {
  auto x = leaf_d(TensorD({3}, {1.0, 2.0, 3.0}));
  backward<double>(sum<double>(x));
  CHECK(x->grad[0] == 1.0);
  CHECK(x->grad[1] == 1.0);
  CHECK(x->grad[2] == 1.0);

  auto y = leaf_d(TensorD({3}, {1.0, 2.0, 3.0}));
  backward<double>(scale<double>(sum<double>(y), 0.0));
  for (int i = 0; i < 3; ++i) CHECK(y->grad[i] == 0.0);

  CHECK_THROWS_WITH_AS(backward<double>(leaf_d(TensorD({3}))), doctest::Contains("scalar"),
                       ShapeError);
}

TEST_CASE("backward accumulates exactly 2x without zeroing") {
  Rng rng(5);
  auto x = leaf_d(random_tensor({2, 3, 6, 6}, rng));
  auto w = leaf_d(random_tensor({2, 3, 3, 3}, rng));
  auto b = leaf_d(random_tensor({2}, rng));
  auto loss = sum<double>(conv2d<double>(x, w, b, 1, 0));
  backward<double>(loss);
  TensorD once = w->grad;
  backward<double>(loss);
  for (int64_t i = 0; i < once.size(); ++i) CHECK(w->grad[i] == 2.0 * once[i]);
}

TEST_CASE("composite graph conv->relu->linear->CE matches finite differences") {
  // 64-bit: rel err <= 1e-4. Data is regenerated until every ReLU input is
  // clear of the kink so central differences stay valid.
  int done = 0;
  for (uint64_t seed = 0; done < 3 && seed < 60; ++seed) {
    Rng rng(200 + seed);
    auto x = leaf_d(random_tensor({2, 2, 6, 6}, rng));
    auto w = leaf_d(random_tensor({3, 2, 3, 3}, rng));
    auto b = leaf_d(random_tensor({3}, rng));
    auto lw = leaf_d(random_tensor({4, 3 * 3 * 3}, rng));
    auto lb = leaf_d(random_tensor({4}, rng));
    std::vector<int> labels = {rng.randint(0, 4), rng.randint(0, 4)};

    auto build = [&] {
      auto c = conv2d<double>(x, w, b, 2, 1);
      auto r = relu<double>(c);
      auto f = flatten2<double>(r, 2);
      auto l = linear<double>(f, lw, lb);
      return softmax_cross_entropy<double>(l, labels);
    };
    auto pre = conv2d<double>(x, w, b, 2, 1);
    double closest = 1e9;
    for (int64_t i = 0; i < pre->value.size(); ++i)
      closest = std::min(closest, std::abs(pre->value[i]));
    if (closest < 3e-2) continue;  // kink-unstable instance, try the next seed
    CHECK(finite_diff_max_rel_err<double>({x, w, b, lw, lb}, build) <= 1e-4);
    ++done;
  }
  CHECK(done == 3);
}

TEST_CASE("composite graph in 32-bit stays within 1e-3") {
  int done = 0;
  for (uint64_t seed = 0; done < 2 && seed < 60; ++seed) {
    Rng rng(300 + seed);
    auto x = make_leaf<float>(qmtest::random_tensor_f({1, 2, 6, 6}, rng));
    auto w = make_leaf<float>(qmtest::random_tensor_f({3, 2, 3, 3}, rng));
    auto b = make_leaf<float>(qmtest::random_tensor_f({3}, rng));
    auto lw = make_leaf<float>(qmtest::random_tensor_f({4, 3 * 3 * 3}, rng));
    auto lb = make_leaf<float>(qmtest::random_tensor_f({4}, rng));
    std::vector<int> labels = {rng.randint(0, 4)};
    auto build = [&] {
      auto c = conv2d<float>(x, w, b, 2, 1);
      auto r = relu<float>(c);
      auto f = flatten2<float>(r, 1);
      auto l = linear<float>(f, lw, lb);
      return softmax_cross_entropy<float>(l, labels);
    };
    auto pre = conv2d<float>(x, w, b, 2, 1);
    float closest = 1e9f;
    for (int64_t i = 0; i < pre->value.size(); ++i)
      closest = std::min(closest, std::abs(pre->value[i]));
    if (closest < 0.05f) continue;
    // Exclusion floor sits above the float central-difference noise,
    // ulp(loss)/(2*eps) ~ 5e-6, so surviving elements are measurable.
    CHECK(finite_diff_max_rel_err<float>({x, w, b, lw, lb}, build, 2e-2, 2e-2) <= 1e-3);
    ++done;
  }
  CHECK(done == 2);
}

TEST_CASE("gather_rows and flatten2") {
  auto x = leaf_d(TensorD({3, 2}, {1, 2, 3, 4, 5, 6}));
  auto g = gather_rows<double>(x, {2, 0});
  CHECK(g->value(0, 0) == 5.0);
  CHECK(g->value(1, 1) == 2.0);
  backward<double>(sum<double>(g));
  CHECK(x->grad[0] == 1.0);
  CHECK(x->grad[2] == 0.0);
  CHECK(x->grad[4] == 1.0);
  CHECK_THROWS_AS(gather_rows<double>(x, {3}), Error);

  Rng rng(11);
  auto y = leaf_d(random_tensor({2, 3, 2, 2}, rng));
  auto f = flatten2<double>(y, 2);
  CHECK(f->value.shape() == std::vector<int>{2, 12});
  for (int64_t i = 0; i < y->value.size(); ++i) CHECK(f->value[i] == y->value[i]);
}

TEST_CASE("ops are deterministic") {
  Rng rng(9);
  TensorD base = random_tensor({2, 3, 8, 8}, rng);
  TensorD wv = random_tensor({4, 3, 3, 3}, rng);
  TensorD bv = random_tensor({4}, rng);
  auto y1 = conv2d<double>(leaf_d(base), leaf_d(wv), leaf_d(bv), 1, 1);
  auto y2 = conv2d<double>(leaf_d(base), leaf_d(wv), leaf_d(bv), 1, 1);
  for (int64_t i = 0; i < y1->value.size(); ++i) CHECK(y1->value[i] == y2->value[i]);
}
