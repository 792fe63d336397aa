#include <cmath>

#include "doctest.h"
#include "support.hpp"
#include "upcycle/analysis.hpp"
#include "upcycle/training.hpp"

using namespace upcycle;
using namespace upcycle::testing;

namespace {

// Orthogonal matrix from Gram-Schmidt on a random square matrix.
TensorD random_orthogonal(Rng& rng, std::size_t n) {
  TensorD a = rng.normal_tensor<double>({n, n}, 1.0);
  TensorD q({n, n});
  for (std::size_t j = 0; j < n; ++j) {
    std::vector<double> v(n);
    for (std::size_t i = 0; i < n; ++i) v[i] = a(i, j);
    for (std::size_t p = 0; p < j; ++p) {
      double d = 0;
      for (std::size_t i = 0; i < n; ++i) d += q(i, p) * v[i];
      for (std::size_t i = 0; i < n; ++i) v[i] -= d * q(i, p);
    }
    double norm = 0;
    for (double x : v) norm += x * x;
    norm = std::sqrt(norm);
    for (std::size_t i = 0; i < n; ++i) q(i, j) = v[i] / norm;
  }
  return q;
}

}  // namespace

TEST_SUITE("analysis") {

TEST_CASE("linear CKA invariances") {
  Rng rng(1);
  for (int it = 0; it < 30; ++it) {
    auto x = rng.normal_tensor<double>({20, 6}, 1.0);
    CHECK(std::abs(linear_cka(x, x) - 1.0) <= 1e-6);
    CHECK(std::abs(linear_cka(x, scale(x, -3.7)) - 1.0) <= 1e-6);
    CHECK(std::abs(linear_cka(x, matmul(x, random_orthogonal(rng, 6))) - 1.0) <= 1e-5);
    auto y = rng.normal_tensor<double>({20, 4}, 1.0);
    const double xy = linear_cka(x, y);
    CHECK(std::abs(xy - linear_cka(y, x)) <= 1e-6);
    CHECK(xy >= 0.0);
    CHECK(xy <= 1.0 + 1e-6);
    auto perm = rng.permutation(6);
    CHECK(std::abs(linear_cka(x, gather_cols(x, std::span<const std::size_t>(perm))) - 1.0) <= 1e-6);
  }
  CHECK(linear_cka(TensorD({5, 3}), TensorD::full({5, 3}, 2.0)) == 0.0);
  CHECK_THROWS_AS(linear_cka(TensorD({5, 3}), TensorD({4, 3})), ShapeError);
}

TEST_CASE("CKA agrees with the kernel formulation") {
  Rng rng(2);
  auto x = rng.normal_tensor<double>({9, 3}, 1.0), y = rng.normal_tensor<double>({9, 5}, 1.0);
  // HSIC with centred Gram matrices: <HKH, HLH> / (|HKH| |HLH|).
  auto kx = column_center(x), ky = column_center(y);
  auto K = matmul_nt(kx, kx), L = matmul_nt(ky, ky);
  double kl = 0, kk = 0, ll = 0;
  for (std::size_t i = 0; i < K.size(); ++i) {
    kl += K[i] * L[i];
    kk += K[i] * K[i];
    ll += L[i] * L[i];
  }
  CHECK(linear_cka(x, y) == doctest::Approx(kl / std::sqrt(kk * ll)).epsilon(1e-10));
}

TEST_CASE("cka_report matrix invariants") {
  Rng rng(3);
  std::vector<TensorF> acts;
  for (int i = 0; i < 4; ++i) acts.push_back(rng.normal_tensor<float>({30, 8}, 1.0));
  auto r = cka_report<float>(CkaScenario::original, 1, acts);
  CHECK(r.matrix.shape() == Shape{4, 4});
  double off = 0;
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(std::abs(r.matrix(i, i) - 1.0) <= 1e-6);
    for (std::size_t j = 0; j < 4; ++j) {
      CHECK(std::abs(r.matrix(i, j) - r.matrix(j, i)) <= 1e-6);
      if (i != j) off += r.matrix(i, j);
    }
  }
  CHECK(r.mean_offdiagonal == doctest::Approx(off / 12));
  std::vector<TensorF> same(3, acts[0]);
  auto s = cka_report<float>(CkaScenario::aligned_merge, 0, same);
  CHECK(std::abs(s.mean_offdiagonal - 1.0) <= 1e-5);
  std::vector<TensorF> one{acts[0]};
  CHECK_THROWS_AS(cka_report<float>(CkaScenario::original, 0, one), std::invalid_argument);
}

TEST_CASE("expert CKA study on identical experts") {
  auto m = random_dense<float>(tiny_config(), 4, "m", 10.0);
  std::vector<DenseCheckpoint<float>> copies(3, m);
  for (int i = 0; i < 3; ++i) copies[i].model_id = "c" + std::to_string(i);
  std::vector<std::vector<FfnWeights<float>>> ffns(3);
  for (int i = 0; i < 3; ++i)
    for (const auto& L : m.layers) ffns[i].push_back(L.ffn);
  auto moe = assemble_moe(extract_backbone(m), ffns, {"c0", "c1", "c2"}, 1);
  auto calib = random_corpus(5, 3, 10, 32);
  auto reports = expert_cka_study<float>(copies, moe, moe, calib, {0, 1});
  CHECK(reports.size() == 6);
  for (const auto& r : reports) CHECK(std::abs(r.mean_offdiagonal - 1.0) <= 1e-5);
  CHECK(reports[0].scenario == CkaScenario::original);
  CHECK(reports[1].scenario == CkaScenario::naive_merge);
  CHECK(reports[2].scenario == CkaScenario::aligned_merge);
  CHECK(reports[3].layer == 1);
}

TEST_CASE("perplexity") {
  // Zero weights give uniform logits, so perplexity equals the vocabulary size.
  auto m = random_dense<double>(tiny_config(), 6);
  for_each_tensor(m, [](const std::string& name, TensorD& t) {
    const double v = name.find("gamma") != std::string::npos ? 1.0 : 0.0;
    for (auto& x : t.data()) x = v;
  });
  auto corpus = random_corpus(7, 3, 8, 32);
  CHECK(perplexity(m, corpus) == doctest::Approx(32.0).epsilon(1e-12));

  auto r = random_dense<double>(tiny_config(), 8, "r", 10.0);
  const double ppl = perplexity(r, corpus);
  CHECK(ppl >= 1.0);
  // One batch over the whole corpus: exp of the token-weighted mean loss.
  double total = 0;
  std::size_t n = 0;
  for (const auto& s : corpus) {
    const auto targets = std::vector<int>(s.begin() + 1, s.end());
    total += lm_loss(forward(r, s), targets) * static_cast<double>(targets.size());
    n += targets.size();
  }
  CHECK(std::abs(ppl - std::exp(total / static_cast<double>(n))) <= 1e-6 * ppl);
}

TEST_CASE("expert usage") {
  std::vector<RoutingRecord> trace;
  for (std::size_t t = 0; t < 6; ++t) trace.push_back({t, 0, {0, 1, 2}, {0.5, 0.3, 0.2}, {0.5, 0.3, 0.2}});
  auto u = expert_usage(trace, 3, 3);
  for (double f : u.fraction) CHECK(f == doctest::Approx(1.0 / 3));
  CHECK(u.gate_mass[0] == doctest::Approx(0.5));
  CHECK(u.n_records == 6);

  Rng rng(9);
  std::vector<RoutingRecord> rand;
  for (std::size_t t = 0; t < 4000; ++t) {
    std::vector<std::size_t> idx = rng.permutation(4);
    idx.resize(2);
    rand.push_back({t, 0, idx, {0.5, 0.5}, {0.25, 0.25, 0.25, 0.25}});
  }
  auto ur = expert_usage(rand, 4, 2);
  double s = 0;
  for (double f : ur.fraction) {
    CHECK(std::abs(f - 0.25) < 0.03);
    s += f;
  }
  CHECK(s == doctest::Approx(1.0));
}

TEST_CASE("reports serialise") {
  CkaReport r{CkaScenario::naive_merge, 1, TensorD::from_rows({{1, 0.5}, {0.5, 1}}), 0.5};
  auto j = to_json(r);
  CHECK(j.at("scenario") == "naive_merge");
  CHECK(j.at("mean_offdiagonal") == 0.5);
  std::vector<CkaReport> rs{r};
  CHECK(cka_csv(rs) ==
        "scenario,layer,row,col,cka\nnaive_merge,1,0,0,1\nnaive_merge,1,0,1,0.5\nnaive_merge,1,1,0,0.5\nnaive_merge,1,1,1,1\n");
}

}  // TEST_SUITE
