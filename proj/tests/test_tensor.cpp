// Copyright (c) 2026 todsel authors
// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "todsel/autodiff.hpp"
#include "todsel/gradcheck.hpp"
#include "todsel/rng.hpp"
#include "todsel/tensor_io.hpp"

using namespace todsel;
using namespace todsel::ts;

namespace {

Array<double> random_array(std::vector<size_t> shape, Rng& rng, double scale = 1.0) {
  Array<double> a(std::move(shape));
  for (auto& v : a.data) v = rng.normal() * scale;
  return a;
}

}  // namespace

TEST_CASE("rng: identical seeds give bit-identical streams") {
  Rng a(1234), b(1234);
  for (int i = 0; i < 1000; ++i) CHECK(a.next_u64() == b.next_u64());
  Rng c = Rng(7).stream(3), d = Rng(7).stream(3);
  for (int i = 0; i < 100; ++i) CHECK(c.uniform01() == d.uniform01());
  // distinct streams differ
  Rng e = Rng(7).stream(4);
  CHECK(Rng(7).stream(3).next_u64() != e.next_u64());
}

TEST_CASE("rng: uniform_int stays in range and hits all buckets") {
  Rng r(99);
  std::vector<int> counts(5, 0);
  for (int i = 0; i < 5000; ++i) {
    const uint64_t v = r.uniform_int(5);
    REQUIRE(v < 5);
    counts[v]++;
  }
  for (int c : counts) CHECK(c > 800);
}

TEST_CASE("matmul: identity and hand arithmetic") {
  auto I = constant(Array<double>::from_rows({{1, 0}, {0, 1}}));
  auto M = constant(Array<double>::from_rows({{3.5, -2}, {7, 0.25}}));
  auto P = matmul(I, M);
  for (size_t i = 0; i < 4; ++i) CHECK(P.val().data[i] == doctest::Approx(M.val().data[i]));

  auto A = constant(Array<double>::from_rows({{1, 2}, {3, 4}}));
  auto B = constant(Array<double>::from_rows({{1}, {1}}));
  auto C = matmul(A, B);
  CHECK(C.val().at(0, 0) == doctest::Approx(3));
  CHECK(C.val().at(1, 0) == doctest::Approx(7));
}

TEST_CASE("matmul: dimension mismatch names both shapes") {
  auto A = constant(Array<double>::zeros({2, 3}));
  auto B = constant(Array<double>::zeros({2, 3}));
  try {
    matmul(A, B);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("(2,3)") != std::string::npos);
  }
}

TEST_CASE("matmul: gradient of sum matches finite differences and column sums") {
  Rng rng(42);
  auto a = parameter(random_array({5, 7}, rng));
  auto b = parameter(random_array({7, 3}, rng));
  auto loss_fn = [&]() { return sum_all(matmul(a, b)); };

  a.zero_grad();
  b.zero_grad();
  auto loss = loss_fn();
  backward(loss);

  // d(sum)/da[i][k] = sum_j b[k][j]: each row of grad(a) is the column sums of b^T rows.
  for (size_t i = 0; i < 5; ++i)
    for (size_t k = 0; k < 7; ++k) {
      double colsum = 0;
      for (size_t j = 0; j < 3; ++j) colsum += b.val().at(k, j);
      CHECK(a.grad().at(i, k) == doctest::Approx(colsum).epsilon(1e-12));
    }

  auto report = grad_check(loss_fn, {{"a", a}, {"b", b}}, {.step = 1e-5, .tolerance = 1e-6});
  CHECK(report.passed);
  CHECK(report.max_rel_error < 1e-6);
}

TEST_CASE("softmax: uniform, overflow-safe, log-inversion") {
  auto z = constant(Array<double>::from_vector({4}, {0, 0, 0, 0}));
  auto s = softmax(z, 0);
  for (double v : s.val().data) CHECK(v == doctest::Approx(0.25).epsilon(1e-12));

  auto big = constant(Array<double>::from_vector({2}, {1000, 0}));
  auto sb = softmax(big, 0);
  CHECK(sb.val().data[0] == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(sb.val().data[1] == doctest::Approx(0.0).epsilon(1e-12));

  auto lg = constant(Array<double>::from_vector({2}, {std::log(0.75), std::log(0.25)}));
  auto sl = softmax(lg, 0);
  CHECK(sl.val().data[0] == doctest::Approx(0.75).epsilon(1e-12));
  CHECK(sl.val().data[1] == doctest::Approx(0.25).epsilon(1e-12));
}

TEST_CASE("softmax: slices sum to 1 for magnitudes up to 1e4, both axes") {
  Rng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    Array<double> a({4, 6});
    for (auto& v : a.data) v = (rng.uniform01() * 2 - 1) * 1e4;
    auto rows = softmax(constant(a), 1);
    for (size_t r = 0; r < 4; ++r) {
      double sum = 0;
      for (size_t c = 0; c < 6; ++c) sum += rows.val().at(r, c);
      CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
    }
    auto cols = softmax(constant(a), 0);
    for (size_t c = 0; c < 6; ++c) {
      double sum = 0;
      for (size_t r = 0; r < 4; ++r) sum += cols.val().at(r, c);
      CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
    }
  }
}

TEST_CASE("sigmoid: symmetry, saturation, gradient at zero") {
  auto x = parameter(Array<double>::from_vector({3}, {0, -50, 2}));
  auto s = sigmoid(x);
  CHECK(s.val().data[0] == doctest::Approx(0.5));
  CHECK(s.val().data[1] == doctest::Approx(0.0).epsilon(1e-20));
  CHECK(std::isfinite(s.val().data[1]));

  x.zero_grad();
  backward(sum_all(s));
  CHECK(x.grad().data[0] == doctest::Approx(0.25).epsilon(1e-12));
}

TEST_CASE("grad_check: quadratic at x=3") {
  auto x = parameter(Array<double>::scalar(3.0));
  auto loss_fn = [&]() { return mul(x, x); };
  auto report = grad_check(loss_fn, {{"x", x}}, {.step = 1e-5, .tolerance = 1e-8});
  REQUIRE(report.entries.size() == 1);
  CHECK(report.entries[0].analytic == doctest::Approx(6.0).epsilon(1e-12));
  CHECK(report.passed);
  CHECK(report.max_rel_error < 1e-8);
}

TEST_CASE("grad_check: |x| at 0 is reported non-checkable, not passed silently") {
  auto x = parameter(Array<double>::scalar(0.0));
  auto loss_fn = [&]() { return abs_op(x); };
  auto report = grad_check(loss_fn, {{"x", x}});
  REQUIRE(report.entries.size() == 1);
  CHECK(report.entries[0].non_checkable);
  CHECK(report.non_checkable == 1);
  CHECK(report.checked == 0);
  CHECK_FALSE(report.passed);
}

TEST_CASE("grad_check: non-finite loss names the perturbed parameter") {
  // log(1 - x) is finite at the base point but blows up when x is nudged past 1.
  auto x = parameter(Array<double>::scalar(1.0 - 1e-6));
  auto loss_fn = [&]() {
    auto one = constant(Array<double>::scalar(1.0));
    auto out = ew_unary(sub(one, x).val(), [](double v) { return std::log(v); });
    return constant(std::move(out), "logval");
  };
  auto report = grad_check(loss_fn, {{"x", x}});
  CHECK_FALSE(report.passed);
  CHECK(report.failure.find("'x'") != std::string::npos);
}

TEST_CASE("every differentiable op passes grad_check at 1e-4 on random inputs") {
  Rng rng(2024);

  SUBCASE("add/sub/mul/scale/neg/add_scalar") {
    auto a = parameter(random_array({3, 4}, rng));
    auto b = parameter(random_array({3, 4}, rng));
    auto fn = [&]() {
      auto x = add(a, b);
      x = sub(x, mul(a, b));
      x = scale(x, 1.7);
      x = add_scalar(neg(x), 0.3);
      return mean_all(x);
    };
    CHECK(grad_check(fn, {{"a", a}, {"b", b}}).passed);
  }

  SUBCASE("add_rowvec / matmul_nt / transpose / concat / slices") {
    auto a = parameter(random_array({4, 6}, rng));
    auto b = parameter(random_array({3, 6}, rng));
    auto v = parameter(random_array({1, 3}, rng));
    auto fn = [&]() {
      auto p = matmul_nt(a, b);                      // 4x3
      p = add_rowvec(p, v);
      auto t = transpose(p);                         // 3x4
      auto c = concat_cols<double>({slice_cols(t, 0, 2), slice_cols(t, 2, 2)});
      return mean_all(slice_rows(c, 1, 2));
    };
    CHECK(grad_check(fn, {{"a", a}, {"b", b}, {"v", v}}).passed);
  }

  SUBCASE("softmax / sigmoid / tanh / softplus / gelu") {
    auto a = parameter(random_array({3, 5}, rng, 2.0));
    auto fn = [&]() {
      auto s = softmax_rows(a);
      auto t = tanh_op(sigmoid(s));
      auto g = gelu(softplus(t));
      return mean_all(g);
    };
    CHECK(grad_check(fn, {{"a", a}}).passed);
  }

  SUBCASE("layer_norm") {
    auto x = parameter(random_array({4, 8}, rng));
    auto gain = parameter(random_array({8}, rng, 0.2));
    auto bias = parameter(random_array({8}, rng, 0.2));
    auto fn = [&]() {
      auto y = layer_norm_rows(x, gain, bias, 1e-5);
      return mean_all(mul(y, y));
    };
    CHECK(grad_check(fn, {{"x", x}, {"gain", gain}, {"bias", bias}}).passed);
  }

  SUBCASE("embedding / cross_entropy / masked_mean") {
    auto table = parameter(random_array({10, 6}, rng));
    std::vector<int> ids = {1, 4, 9, 4};
    std::vector<int> targets = {2, 0, 5, 1};
    std::vector<uint8_t> inc = {1, 1, 0, 1};
    auto w = parameter(random_array({6, 6}, rng));
    auto fn = [&]() {
      auto e = embedding_rows(table, ids);
      auto h = matmul(e, w);
      auto ce = cross_entropy_rows(h, targets, inc);
      auto pooled = masked_mean_rows(h, inc);
      return add(ce, mean_all(pooled));
    };
    CHECK(grad_check(fn, {{"table", table}, {"w", w}}).passed);
  }
}

TEST_CASE("cross_entropy_rows: rejects when nothing is included") {
  auto logits = constant(Array<double>::zeros({2, 4}));
  CHECK_THROWS_AS(cross_entropy_rows(logits, {0, 1}, {0, 0}), ValidationError);
}

TEST_CASE("straight-through hardening: forward one-hot, backward identity") {
  Rng rng(5);
  auto logits = parameter(random_array({4, 6}, rng));
  auto w = constant(random_array({6, 1}, rng));

  auto soft = softmax_rows(logits);
  auto hard = hard_onehot_straight_through(soft);
  for (size_t r = 0; r < 4; ++r) {
    double sum = 0;
    int ones = 0;
    for (size_t c = 0; c < 6; ++c) {
      sum += hard.val().at(r, c);
      if (hard.val().at(r, c) == 1.0) ones++;
    }
    CHECK(sum == 1.0);
    CHECK(ones == 1);
  }

  // gradient of sum(hard * w) equals gradient of sum(soft * w) elementwise
  logits.zero_grad();
  backward(sum_all(matmul(hard, w)));
  auto grad_hard = logits.grad().data;
  logits.zero_grad();
  auto soft2 = softmax_rows(logits);
  backward(sum_all(matmul(soft2, w)));
  for (size_t i = 0; i < grad_hard.size(); ++i)
    CHECK(grad_hard[i] == doctest::Approx(logits.grad().data[i]).epsilon(1e-14));
}

TEST_CASE("non-finite op output raises instead of propagating") {
  auto a = constant(Array<double>::scalar(1e308));
  CHECK_THROWS_AS(mul(a, a), NonFiniteError);
}

TEST_CASE("dropout: eval mode is identity; train mode rescales") {
  Rng rng(3);
  auto x = parameter(Array<double>::full({100, 1}, 1.0));
  auto eval = dropout(x, 0.5, rng, false);
  CHECK(eval.node() == x.node());
  auto train = dropout(x, 0.5, rng, true);
  size_t zeros = 0;
  for (double v : train.val().data) {
    CHECK((v == 0.0 || v == doctest::Approx(2.0)));
    if (v == 0.0) zeros++;
  }
  CHECK(zeros > 20);
  CHECK(zeros < 80);
}

TEST_CASE("tensor serialization round trip with manifest") {
  const std::string dir = "io_test_tmp";
  std::map<std::string, Array<float>> tensors;
  Rng rng(11);
  Array<float> a({3, 4});
  for (auto& v : a.data) v = static_cast<float>(rng.normal());
  tensors.emplace("enc.w", a);
  Array<float> b({5});
  for (auto& v : b.data) v = static_cast<float>(rng.uniform01());
  tensors.emplace("dec.b", b);
  save_tensor_set(dir, tensors, {{"note", "fixture"}});

  nlohmann::json manifest;
  auto loaded = load_tensor_set(dir, &manifest);
  CHECK(manifest.at("note") == "fixture");
  REQUIRE(loaded.size() == 2);
  CHECK(loaded.at("enc.w").shape == std::vector<size_t>{3, 4});
  for (size_t i = 0; i < a.data.size(); ++i) CHECK(loaded.at("enc.w").data[i] == a.data[i]);
  for (size_t i = 0; i < b.data.size(); ++i) CHECK(loaded.at("dec.b").data[i] == b.data[i]);
  std::filesystem::remove_all(dir);
}
