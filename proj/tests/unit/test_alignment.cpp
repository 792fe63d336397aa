#include <algorithm>
#include <cmath>
#include <sstream>

#include "doctest.h"
#include "support.hpp"
#include "upcycle/alignment.hpp"
#include "upcycle/log.hpp"

using namespace upcycle;
using namespace upcycle::testing;

namespace {

CostMatrix cost(std::initializer_list<std::initializer_list<double>> rows) { return {TensorD::from_rows(rows)}; }

CostMatrix random_cost(Rng& rng, std::size_t n, int max_int) {
  TensorD c({n, n});
  for (auto& v : c.data()) v = static_cast<double>(rng.below(static_cast<std::size_t>(max_int)));
  return {c};
}

// Target whose FFN neurons are the anchor's shuffled by q at every layer.
template <class T>
DenseCheckpoint<T> planted(const DenseCheckpoint<T>& anchor, std::vector<Permutation>& qs, Rng& rng) {
  DenseCheckpoint<T> target = anchor;
  target.model_id = "planted";
  qs.clear();
  for (std::size_t l = 0; l < anchor.layers.size(); ++l) {
    Permutation q(l, rng.permutation(anchor.config.d_ffn));
    target.layers[l].ffn = remap_ffn(anchor.layers[l].ffn, q);
    qs.push_back(q);
  }
  return target;
}

}  // namespace

TEST_SUITE("alignment") {

TEST_CASE("permutation construction and inverse") {
  CHECK_THROWS_AS(Permutation(0, {0, 0, 1}), std::invalid_argument);
  CHECK_THROWS_AS(Permutation(0, {0, 3, 1}), std::invalid_argument);
  Permutation p(1, {2, 0, 1});
  auto inv = p.inverse();
  for (std::size_t j = 0; j < 3; ++j) CHECK(inv[p[j]] == j);
  CHECK(Permutation::identity(0, 4).is_identity());
  CHECK_FALSE(p.is_identity());
}

TEST_CASE("collect_activations concatenates sequences") {
  auto m = random_dense<float>(tiny_config(8, 2, 2, 8), 1);
  TokenSequences calib{{1, 2, 3, 4, 5}, {6, 7, 8, 9, 10, 11, 12}};
  auto acts = collect_activations(m, calib);
  CHECK(acts.size() == 2);
  CHECK(acts.at(0).data.shape() == Shape{12, 8});
  auto again = collect_activations(m, calib);
  CHECK(again.at(1).data == acts.at(1).data);
  for (auto& v : m.layers[1].ffn.up.data()) v = 0;
  const auto zeroed = collect_activations(m, calib);
  for (float v : zeroed.at(1).data.data()) CHECK(v == 0.0f);
}

TEST_CASE("collect_activations warns when tokens are fewer than neurons") {
  std::vector<std::string> seen;
  auto prev = set_log_sink([&](LogLevel, const std::string& msg) { seen.push_back(msg); });
  auto m = random_dense<float>(tiny_config(), 2);
  collect_activations(m, TokenSequences{{1, 2, 3}});
  set_log_sink(prev);
  CHECK_FALSE(seen.empty());
}

TEST_CASE("cost matrix") {
  Rng rng(3);
  ActivationMatrix<double> a{"a", 0, rng.normal_tensor<double>({6, 4}, 1.0)};
  auto c = build_cost_matrix(a, a);
  for (std::size_t j = 0; j < 4; ++j) CHECK(c(j, j) == 0.0);
  for (double v : c.data.data()) CHECK(v >= 0.0);

  ActivationMatrix<double> x{"x", 0, TensorD::from_rows({{1, 0}})}, y{"y", 0, TensorD::from_rows({{0, 1}})};
  auto hand = build_cost_matrix(x, y);
  CHECK(hand.data == TensorD::from_rows({{1, 0}, {0, 1}}));
  CHECK(solve_lap(hand).perm.map() == std::vector<std::size_t>{1, 0});

  ActivationMatrix<double> b{"b", 0, rng.normal_tensor<double>({6, 4}, 1.0)};
  auto c1 = build_cost_matrix(a, b);
  ActivationMatrix<double> a2{"a", 0, scale(a.data, 2.0)}, b2{"b", 0, scale(b.data, 2.0)};
  auto c2 = build_cost_matrix(a2, b2);
  for (std::size_t i = 0; i < c1.data.size(); ++i) CHECK(c2.data[i] == doctest::Approx(4 * c1.data[i]));

  // Per-assignment decomposition of the Frobenius objective.
  Permutation p(0, rng.permutation(4));
  CHECK(assignment_cost(c1, p) == doctest::Approx(permuted_frobenius_objective(a.data, b.data, p)).epsilon(1e-12));

  ActivationMatrix<double> wrong{"w", 0, TensorD({5, 4})};
  CHECK_THROWS_AS(build_cost_matrix(a, wrong), ShapeError);
}

TEST_CASE("solve_lap hand cases") {
  auto d = solve_lap(cost({{0, 5}, {5, 0}}));
  CHECK(d.perm.map() == std::vector<std::size_t>{0, 1});
  CHECK(d.total_cost == 0.0);
  auto a = solve_lap(cost({{1, 0}, {0, 1}}));
  CHECK(a.perm.map() == std::vector<std::size_t>{1, 0});
  CHECK(a.total_cost == 0.0);
  auto one = brute_force_lap(cost({{7}}));
  CHECK(one.perm.is_identity());
  CHECK(one.total_cost == 7.0);
  CHECK(brute_force_lap(cost({{2, 2, 2}, {2, 2, 2}, {2, 2, 2}})).perm.is_identity());
  CHECK(solve_lap(cost({{2, 2, 2}, {2, 2, 2}, {2, 2, 2}})).perm.is_identity());
}

TEST_CASE("solve_lap agrees with brute force") {
  Rng rng(4);
  for (int it = 0; it < 200; ++it) {
    auto c = random_cost(rng, 6, 20);
    auto h = solve_lap(c), b = brute_force_lap(c);
    CHECK(h.total_cost == b.total_cost);
    CHECK(h.perm == b.perm);  // same lexicographic tie-break
  }
  for (int it = 0; it < 1000; ++it) {
    TensorD c({5, 5});
    for (auto& v : c.data()) v = rng.uniform();
    auto h = solve_lap({c}), b = brute_force_lap({c});
    CHECK(std::abs(h.total_cost - b.total_cost) <= 1e-12);
    CHECK(h.perm == b.perm);
  }
}

TEST_CASE("solve_lap on large matrices is a valid optimum against relabelling") {
  Rng rng(5);
  auto c = random_cost(rng, 40, 1000);
  auto h = solve_lap(c);
  // Any single swap cannot improve an optimal assignment.
  for (std::size_t i = 0; i < 40; ++i) {
    for (std::size_t j = i + 1; j < 40; ++j) {
      auto m = h.perm.map();
      std::swap(m[i], m[j]);
      CHECK(assignment_cost(c, Permutation(0, m)) >= h.total_cost);
    }
  }
}

TEST_CASE("remap_ffn") {
  Rng rng(6);
  FfnWeights<double> f{rng.normal_tensor<double>({4, 3}, 1.0), rng.normal_tensor<double>({3, 4}, 1.0)};
  CHECK(remap_ffn(f, Permutation::identity(0, 3)) == f);
  Permutation p(0, {2, 0, 1});
  auto r = remap_ffn(f, p);
  for (std::size_t j = 0; j < 3; ++j) {
    for (std::size_t i = 0; i < 4; ++i) {
      CHECK(r.up(i, j) == f.up(i, p[j]));
      CHECK(r.down(j, i) == f.down(p[j], i));
    }
  }
  auto x = rng.normal_tensor<double>({5, 4}, 1.0);
  auto y0 = matmul(silu(matmul(x, f.up)), f.down), y1 = matmul(silu(matmul(x, r.up)), r.down);
  CHECK(max_abs_diff(y0, y1) <= 1e-6);
  CHECK_THROWS(remap_ffn(f, Permutation::identity(0, 4)));
}

TEST_CASE("align_expert self-alignment is the identity") {
  auto m = random_dense<double>(tiny_config(), 7, "m", 10.0);
  auto calib = random_corpus(8, 4, 10, 32);
  auto res = align_expert(m, m, calib);
  for (const auto& p : res.perms) CHECK(p.is_identity());
  for (const auto& c : res.costs) CHECK(c.assigned_cost == 0.0);
}

TEST_CASE("align_expert inverts a planted permutation") {
  Rng rng(9);
  auto anchor = random_dense<float>(tiny_config(), 10, "a", 10.0);
  std::vector<Permutation> qs;
  auto target = planted(anchor, qs, rng);
  auto res = align_expert(anchor, target, random_corpus(11, 4, 12, 32));
  for (std::size_t l = 0; l < qs.size(); ++l) {
    CHECK(res.perms[l] == qs[l].inverse());
    CHECK(res.ffns[l] == anchor.layers[l].ffn);
  }
}

TEST_CASE("align_expert never does worse than the identity") {
  auto a = random_dense<float>(tiny_config(), 12, "a", 10.0), b = random_dense<float>(tiny_config(), 13, "b", 10.0);
  for (bool normalize : {false, true}) {
    auto res = align_expert(a, b, random_corpus(14, 4, 12, 32), AlignOptions{normalize});
    for (const auto& c : res.costs) CHECK(c.assigned_cost <= c.identity_cost);
  }
}

TEST_CASE("permutation files round trip") {
  PermutationFile f{"m2", "m1", {Permutation(0, {1, 0, 2}), Permutation(1, {2, 1, 0})}, {{0, 3.5, 1.25}, {1, 2.0, 2.0}}};
  auto g = permutation_file_from_json(to_json(f));
  CHECK(g.model_id == "m2");
  CHECK(g.anchor_id == "m1");
  CHECK(g.layers == f.layers);
  CHECK(g.costs.size() == 2);
  CHECK(g.costs[0].assigned_cost == 1.25);
  auto j = to_json(f);
  j["layers"][0]["perm"] = {0, 0, 2};
  CHECK_THROWS(permutation_file_from_json(j));
  TempDir dir("perm");
  save_permutation_file(f, dir.str("p.json"));
  CHECK(load_permutation_file(dir.str("p.json")).layers == f.layers);
}

}  // TEST_SUITE
