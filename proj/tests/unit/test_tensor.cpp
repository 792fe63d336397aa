#include <cmath>

#include "doctest.h"
#include "support.hpp"
#include "upcycle/tensor.hpp"

using namespace upcycle;

TEST_SUITE("tensor") {

TEST_CASE("construction checks numel against shape") {
  CHECK_THROWS_AS(TensorF({2, 3}, std::vector<float>(5)), ShapeError);
  TensorF t({2, 3});
  CHECK(t.size() == 6);
  CHECK(shape_numel(t.shape()) == t.size());
  CHECK(shape_str({2, 3}) == "[2x3]");
}

TEST_CASE("matmul identity and hand arithmetic") {
  auto i2 = TensorD::from_rows({{1, 0}, {0, 1}});
  auto b = TensorD::from_rows({{3, 4}, {5, 6}});
  CHECK(matmul(i2, b) == b);
  auto r = matmul(TensorD::from_rows({{1, 2}}), TensorD::from_rows({{3}, {4}}));
  CHECK(r.shape() == Shape{1, 1});
  CHECK(r(0, 0) == 11.0);
  CHECK_THROWS_AS(matmul(TensorD({2, 3}), TensorD({2, 3})), ShapeError);
}

TEST_CASE("matmul matches a triple loop") {
  Rng rng(3);
  auto a = rng.normal_tensor<double>({7, 5}, 1.0);
  auto b = rng.normal_tensor<double>({5, 3}, 1.0);
  auto c = matmul(a, b);
  for (std::size_t i = 0; i < 7; ++i) {
    for (std::size_t j = 0; j < 3; ++j) {
      double s = 0;
      for (std::size_t k = 0; k < 5; ++k) s += a(i, k) * b(k, j);
      CHECK(std::abs(c(i, j) - s) <= 1e-6 * std::max(1.0, std::abs(s)));
    }
  }
  CHECK(max_abs_diff(matmul_nt(a, transpose(b)), c) < 1e-12);
  CHECK(max_abs_diff(matmul_tn(transpose(a), b), c) < 1e-12);
}

TEST_CASE("softmax rows") {
  auto s = softmax_rows(TensorD::from_rows({{0, 0, 0, 0}}));
  for (double v : s.data()) CHECK(v == doctest::Approx(0.25));
  auto big = softmax_rows(TensorD::from_rows({{1000, 0}}));
  CHECK(all_finite(big));
  CHECK(big(0, 0) == doctest::Approx(1.0));
  CHECK(big(0, 1) == doctest::Approx(0.0));
  auto a = softmax_rows(TensorD::from_rows({{std::log(6.0), std::log(4.0)}}));
  CHECK(a(0, 0) == doctest::Approx(0.6).epsilon(1e-12));
  CHECK(a(0, 1) == doctest::Approx(0.4).epsilon(1e-12));
  auto f = softmax_rows(TensorF::from_rows({{1000.0f, 0.0f}}));
  CHECK(all_finite(f));
}

TEST_CASE("rms_norm") {
  auto ones = TensorD::full({1, 4}, 1.0);
  auto g1 = TensorD::full({4}, 1.0);
  CHECK_THROWS_AS(rms_norm(ones, g1, 0.0), std::invalid_argument);
  auto r = rms_norm(ones, g1, 1e-12);
  for (double v : r.data()) CHECK(v == doctest::Approx(1.0));
  auto z = rms_norm(ones, TensorD({4}), 1e-5);
  for (double v : z.data()) CHECK(v == 0.0);

  Rng rng(5);
  auto x = rng.normal_tensor<double>({1, 6}, 2.0);
  auto gamma = rng.normal_tensor<double>({6}, 1.0);
  auto y = rms_norm(x, gamma, 1e-5);
  double ms = 0;
  for (double v : x.data()) ms += v * v;
  ms /= 6;
  for (std::size_t j = 0; j < 6; ++j) CHECK(std::abs(y(0, j) - gamma[j] * x(0, j) / std::sqrt(ms + 1e-5)) < 1e-6);
}

TEST_CASE("silu and gathers") {
  CHECK(silu(0.0) == 0.0);
  CHECK(silu(1.0) == doctest::Approx(1.0 / (1.0 + std::exp(-1.0))));
  auto x = TensorD::from_rows({{1, 2, 3}, {4, 5, 6}});
  std::vector<std::size_t> cols{2, 0, 1};
  auto g = gather_cols(x, std::span<const std::size_t>(cols));
  CHECK(g == TensorD::from_rows({{3, 1, 2}, {6, 4, 5}}));
  std::vector<std::size_t> rows{1, 0};
  CHECK(gather_rows(x, std::span<const std::size_t>(rows)) == TensorD::from_rows({{4, 5, 6}, {1, 2, 3}}));
}

TEST_CASE("top_k_rows breaks ties by lower index") {
  auto p = TensorD::from_rows({{0.4, 0.4, 0.2}, {0.1, 0.5, 0.4}});
  auto idx = top_k_rows(p, 2);
  CHECK(idx[0] == std::vector<std::size_t>{0, 1});
  CHECK(idx[1] == std::vector<std::size_t>{1, 2});
}

TEST_CASE("column_center zeroes column means") {
  Rng rng(1);
  auto x = rng.normal_tensor<double>({9, 4}, 3.0);
  auto c = column_center(x);
  for (std::size_t j = 0; j < 4; ++j) {
    double s = 0;
    for (std::size_t i = 0; i < 9; ++i) s += c(i, j);
    CHECK(std::abs(s) < 1e-12);
  }
}

TEST_CASE("all_finite flags nan and inf") {
  TensorF t({3});
  CHECK(all_finite(t));
  t[1] = std::nanf("");
  CHECK_FALSE(all_finite(t));
  t[1] = INFINITY;
  CHECK_FALSE(all_finite(t));
}

}  // TEST_SUITE
