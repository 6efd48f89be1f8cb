#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "qm/quantize.hpp"
#include "qm/rng.hpp"

using namespace qm;

TEST_CASE("uniform dictionaries") {
  CHECK(make_uniform(1, 3).entries() == std::vector<double>{0, 1, 2, 3});
  CHECK(make_uniform(8, 40).entries() == std::vector<double>{0, 8, 16, 24, 32, 40});
  CHECK(make_uniform(0.5, 1).entries() == std::vector<double>{0, 0.5, 1});
  CHECK_THROWS_AS(make_uniform(0, 3), Error);
  CHECK_THROWS_AS(make_uniform(-1, 3), Error);
}

TEST_CASE("power-of-two dictionaries") {
  CHECK(make_pow2(-2, 2).entries() == std::vector<double>{0, 0.25, 0.5, 1, 2, 4});
  CHECK_THROWS_AS(make_pow2(2, -2), Error);
  const QuantizationScheme s = make_pow2(-2, 2);
  CHECK(s.quantize_value(0.6) == 0.5);  // midpoint of 0.5 and 1 is 0.75
  CHECK(s.quantize_value(3.1) == 4.0);
}

TEST_CASE("interval assignment rule") {
  const QuantizationScheme s8 = make_uniform(8, 40);
  CHECK(s8.quantize_value(20.1) == 24.0);
  CHECK(s8.quantize_value(20.0) == 16.0);  // exact midpoint resolves downward

  const QuantizationScheme s1 = make_uniform(1, 4);
  CHECK(s1.quantize_value(0.5) == 0.0);
  CHECK(s1.quantize_value(0.51) == 1.0);
  CHECK(s1.quantize_value(1.0) == 1.0);

  const QuantizationScheme d13 = QuantizationScheme::explicit_entries({1, 3});
  Tensor v({3}, {1.2f, 2.2f, 1.8f});
  Tensor q = quantize(v, d13);
  CHECK(q[0] == 1.f);
  CHECK(q[1] == 3.f);
  CHECK(q[2] == 1.f);
}

TEST_CASE("quantize rejects negative input and bad dictionaries") {
  const QuantizationScheme s = make_uniform(1, 4);
  Tensor v({2}, {0.5f, -0.1f});
  CHECK_THROWS_WITH_AS(quantize(v, s), doctest::Contains("negative input"), Error);
  CHECK_THROWS_AS(QuantizationScheme::explicit_entries({}), Error);
  CHECK_THROWS_AS(QuantizationScheme::explicit_entries({1.0, 1.0}), Error);
  CHECK_THROWS_AS(QuantizationScheme::explicit_entries({-1.0, 1.0}), Error);
}

TEST_CASE("quantizer properties over random inputs") {
  const std::vector<QuantizationScheme> schemes = {
      make_uniform(0.5, 8), make_uniform(1, 12), make_uniform(8, 40), make_pow2(-3, 3),
      QuantizationScheme::explicit_entries({1, 3})};
  Rng rng(2024);
  for (const auto& s : schemes) {
    std::vector<double> xs(20000);
    for (auto& x : xs) x = rng.uniform(0.0, s.entries().back() * 1.25);
    for (double x : xs) {
      const double q = s.quantize_value(x);
      // membership
      CHECK(std::find(s.entries().begin(), s.entries().end(), q) != s.entries().end());
      // idempotence, exact
      CHECK(s.quantize_value(q) == q);
      // nearest-entry bound: half the larger neighbor gap
      const auto it = std::lower_bound(s.entries().begin(), s.entries().end(), q);
      const size_t i = static_cast<size_t>(it - s.entries().begin());
      double gap = 0.0;
      if (i > 0) gap = std::max(gap, s.entries()[i] - s.entries()[i - 1]);
      if (i + 1 < s.entries().size()) gap = std::max(gap, s.entries()[i + 1] - s.entries()[i]);
      if (x >= s.entries().front() && x <= s.entries().back() && gap > 0)
        CHECK(std::abs(q - x) <= gap / 2 + 1e-12);
    }
    // monotonicity
    std::sort(xs.begin(), xs.end());
    double prev = s.quantize_value(xs[0]);
    for (double x : xs) {
      const double q = s.quantize_value(x);
      CHECK(q >= prev);
      prev = q;
    }
  }
  // interior uniform cells stay within s/2
  const QuantizationScheme u = make_uniform(1, 12);
  for (int i = 0; i < 20000; ++i) {
    const double x = rng.uniform(0.0, 12.0);
    CHECK(std::abs(u.quantize_value(x) - x) <= 0.5 + 1e-12);
  }
}

TEST_CASE("quantized relu forward and straight-through backward") {
  const QuantizationScheme s = make_uniform(1, 8);
  auto x = make_leaf<float>(Tensor({2}, {1.4f, -0.7f}));
  auto y = quantized_relu<float>(x, s);
  CHECK(y->value[0] == 1.f);
  CHECK(y->value[1] == 0.f);
  backward<float>(sum<float>(y));
  CHECK(x->grad[0] == 1.f);
  CHECK(x->grad[1] == 0.f);

  // forward lands in the dictionary, backward equals plain relu exactly
  Rng rng(7);
  Tensor noise({1000});
  for (int64_t i = 0; i < noise.size(); ++i)
    noise[i] = static_cast<float>(rng.uniform(-4.0, 12.0));
  auto xa = make_leaf<float>(noise);
  auto xb = make_leaf<float>(noise);
  auto qr = quantized_relu<float>(xa, s);
  auto rr = relu<float>(xb);
  for (int64_t i = 0; i < qr->value.size(); ++i) {
    const float v = qr->value[i];
    CHECK(std::find(s.entries().begin(), s.entries().end(), static_cast<double>(v)) !=
          s.entries().end());
  }
  backward<float>(sum<float>(qr));
  backward<float>(sum<float>(rr));
  for (int64_t i = 0; i < noise.size(); ++i) CHECK(xa->grad[i] == xb->grad[i]);
}

TEST_CASE("quantize_ste clamps below the first entry and passes gradient") {
  const QuantizationScheme d13 = QuantizationScheme::explicit_entries({1, 3});
  auto x = make_leaf<float>(Tensor({3}, {-5.f, 1.9f, 2.1f}));
  auto y = quantize_ste<float>(x, d13);
  CHECK(y->value[0] == 1.f);  // below the first midpoint -> first entry
  CHECK(y->value[1] == 1.f);
  CHECK(y->value[2] == 3.f);
  backward<float>(scale<float>(sum<float>(y), 2.f));
  for (int i = 0; i < 3; ++i) CHECK(x->grad[i] == 2.f);
}

TEST_CASE("scheme round trip through parts") {
  const QuantizationScheme s = make_uniform(0.5, 3);
  const QuantizationScheme r = QuantizationScheme::from_parts(
      s.kind(), s.stride(), s.max_value(), s.k_min(), s.k_max(), s.entries());
  CHECK(r == s);
  CHECK(r.kind_name() == "uniform");
}
