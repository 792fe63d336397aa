#include <cmath>
#include <sstream>

#include "doctest.h"
#include "gradcheck.hpp"
#include "support.hpp"
#include "upcycle/training.hpp"

using namespace upcycle;
using namespace upcycle::testing;

namespace {

RoutingRecord record(std::size_t pos, std::vector<double> probs, std::size_t k) {
  TensorD p({1, probs.size()}, probs);
  RoutingRecord r;
  r.token_pos = pos;
  r.indices = top_k_rows(p, k)[0];
  for (std::size_t e : r.indices) r.gates.push_back(probs[e]);
  r.probs = std::move(probs);
  return r;
}

template <class T>
MoECheckpoint<T> tiny_moe(std::uint64_t seed, double gain = 10.0) {
  auto cfg = tiny_config();
  std::vector<DenseCheckpoint<T>> models;
  std::vector<std::vector<FfnWeights<T>>> ffns;
  std::vector<std::string> ids;
  for (int i = 0; i < 4; ++i) {
    models.push_back(random_dense<T>(cfg, seed + i, "m" + std::to_string(i), gain));
    ids.push_back(models.back().model_id);
    ffns.emplace_back();
    for (const auto& L : models.back().layers) ffns.back().push_back(L.ffn);
  }
  auto moe = assemble_moe(build_backbone<T>(models, MergeRecipe::uniform(4)), ffns, ids, seed + 100);
  for (auto& L : moe.layers)
    for (auto& v : L.router.data()) v = static_cast<T>(v * 50);
  return moe;
}

template <class T>
std::map<std::string, Tensor<T>> tensor_map(const MoECheckpoint<T>& moe) {
  std::map<std::string, Tensor<T>> out;
  for_each_tensor(moe, [&](const std::string& name, const Tensor<T>& t) { out.emplace(name, t); });
  return out;
}

}  // namespace

TEST_SUITE("training") {

TEST_CASE("lm_loss analytic values") {
  const std::size_t v = 16;
  CHECK(lm_loss(TensorD({3, v}), std::vector<int>{1, 2, 3}) == doctest::Approx(std::log(16.0)).epsilon(1e-12));
  double prev = 1e9;
  for (double margin : {1.0, 5.0, 20.0, 50.0}) {
    TensorD l({2, 4});
    l(0, 1) = margin;
    l(1, 3) = margin;
    const double loss = lm_loss(l, std::vector<int>{1, 3});
    CHECK(loss < prev);
    prev = loss;
  }
  CHECK(prev < 1e-20);

  Rng rng(1);
  auto logits = rng.normal_tensor<double>({4, 6}, 2.0);
  std::vector<int> targets{5, 0, 2};  // T-1 targets: the last position is unused
  double want = 0;
  for (std::size_t t = 0; t < 3; ++t) {
    double z = 0;
    for (std::size_t j = 0; j < 6; ++j) z += std::exp(logits(t, j));
    want += std::log(z) - logits(t, targets[t]);
  }
  CHECK(std::abs(lm_loss(logits, targets) - want / 3) <= 1e-6);
  CHECK_THROWS_AS(lm_loss(logits, std::vector<int>{1}), ShapeError);
}

TEST_CASE("load balance: uniform router is exactly one") {
  for (std::size_t n : {2u, 3u, 4u, 8u}) {
    for (std::size_t k = 1; k <= n; ++k) {
      std::vector<RoutingRecord> trace;
      for (std::size_t t = 0; t < 10; ++t) trace.push_back(record(t, std::vector<double>(n, 1.0 / n), k));
      CHECK(std::abs(load_balance_loss(trace, n, k) - 1.0) <= 1e-12);
    }
  }
}

TEST_CASE("load balance: saturated two-of-four approaches two") {
  const double eps = 1e-4;
  std::vector<RoutingRecord> trace;
  for (std::size_t t = 0; t < 32; ++t) trace.push_back(record(t, {0.5 - eps, 0.5 - eps, eps, eps}, 2));
  CHECK(std::abs(load_balance_loss(trace, 4, 2) - 2.0) <= 0.01);
  CHECK(usage_fractions(trace, 4, 2) == std::vector<double>{0.5, 0.5, 0.0, 0.0});
}

TEST_CASE("load balance: a consistent top-k trace can fall below one") {
  // Each token routes to its own argmax, yet f and P are anti-aligned on
  // expert 1, so N * sum f_i P_i = 3 * (0.5 * 0.325 + 0.5 * 0.325) = 0.975.
  std::vector<RoutingRecord> trace{record(0, {0.4, 0.35, 0.25}, 1), record(1, {0.25, 0.35, 0.4}, 1)};
  CHECK(trace[0].indices[0] == 0);
  CHECK(trace[1].indices[0] == 2);
  CHECK(load_balance_loss(trace, 3, 1) == doctest::Approx(0.975).epsilon(1e-12));
}

TEST_CASE("load balance: a single token never falls below one") {
  Rng rng(2);
  for (int it = 0; it < 2000; ++it) {
    const std::size_t n = 2 + rng.below(7), k = 1 + rng.below(n);
    auto p = softmax_rows(rng.normal_tensor<double>({1, n}, 3.0));
    std::vector<RoutingRecord> trace{record(0, {p.data().begin(), p.data().end()}, k)};
    CHECK(load_balance_loss(trace, n, k) >= 1.0 - 1e-12);
  }
}

TEST_CASE("load balance input checks") {
  std::vector<RoutingRecord> none;
  CHECK_THROWS_AS(load_balance_loss(none, 4, 2), std::invalid_argument);
  std::vector<RoutingRecord> t{record(0, {0.5, 0.5}, 1)};
  CHECK_THROWS_AS(load_balance_loss(t, 2, 2), std::invalid_argument);
  t[0].probs.clear();
  CHECK_THROWS_AS(load_balance_loss(t, 2, 1), std::invalid_argument);
}

TEST_CASE("clip_global_norm") {
  GradientStore<double> g{{"a", TensorD::vector({0.3, 0.4})}};
  auto same = clip_global_norm(g, 1.0);
  CHECK(same.at("a") == g.at("a"));
  GradientStore<double> h{{"a", TensorD::vector({3, 4})}};
  double before = 0;
  auto c = clip_global_norm(h, 1.0, &before);
  CHECK(before == 5.0);
  CHECK(c.at("a")[0] == doctest::Approx(0.6).epsilon(1e-15));
  CHECK(c.at("a")[1] == doctest::Approx(0.8).epsilon(1e-15));
  Rng rng(3);
  for (int it = 0; it < 100; ++it) {
    GradientStore<double> r{{"x", rng.normal_tensor<double>({5}, 10.0)}, {"y", rng.normal_tensor<double>({2, 3}, 1.0)}};
    const double max = 0.1 + rng.uniform();
    CHECK(global_norm(clip_global_norm(r, max)) <= max + 1e-6);
  }
  CHECK_THROWS_AS(clip_global_norm(g, 0.0), std::invalid_argument);
}

TEST_CASE("router gradient matches finite differences") {
  auto moe = tiny_moe<double>(10);
  TokenSequences batch = random_corpus(11, 2, 6, 32);
  for (TrainableSet set : {TrainableSet::router_only, TrainableSet::all}) {
    auto probe = probe_moe_gradients(moe, batch, 0.01, set, 40, 12);
    INFO(to_string(set) << " worst " << probe.worst_name << " rel " << probe.worst_rel);
    CHECK(probe.checked == 40);
    CHECK(probe.failed == 0);
  }
}

TEST_CASE("gradient store holds only trainable parameters") {
  auto moe = tiny_moe<double>(20);
  TokenSequences batch = random_corpus(21, 2, 5, 32);
  auto g = moe_gradients(moe, batch, 0.01, TrainableSet::router_only);
  CHECK(g.size() == 2);
  for (const auto& [name, t] : g) CHECK(name.ends_with(".router"));
  auto all = moe_gradients(moe, batch, 0.01, TrainableSet::all);
  CHECK(all.count("embedding") == 1);
  CHECK(all.count(expert_name(1, 3, "down")) == 1);
}

TEST_CASE("perfect predictions give vanishing gradients") {
  TensorD logits({3, 5});
  std::vector<int> targets{1, 4, 0};
  for (std::size_t t = 0; t < 3; ++t) logits(t, targets[t]) = 60;
  Graph<double> g(Graph<double>::Mode::training);
  Var l = g.parameter(logits, "logits", true);
  auto grads = backward(g, g.cross_entropy(l, targets));
  CHECK(global_norm(grads) < 1e-20);
}

TEST_CASE("train_router with no steps leaves the model untouched") {
  auto moe = tiny_moe<float>(30);
  TrainConfig cfg;
  cfg.epochs = 0;
  cfg.lambda_bal = 0.0;
  auto r = train_router(moe, random_corpus(31, 4, 8, 32), cfg);
  for (std::size_t l = 0; l < 2; ++l) CHECK(r.moe.layers[l].router == moe.layers[l].router);
  CHECK(r.log.steps.empty());
}

TEST_CASE("train_router freezes everything but the router and is deterministic") {
  auto moe = tiny_moe<float>(40);
  auto calib = random_corpus(41, 6, 10, 32);
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.learning_rate = 1e-2;
  cfg.seed = 5;
  auto a = train_router(moe, calib, cfg), b = train_router(moe, calib, cfg);
  const auto before = tensor_map(moe), after = tensor_map(a.moe), twin = tensor_map(b.moe);
  bool router_moved = false;
  for (const auto& [name, t] : after) {
    CHECK(t == twin.at(name));
    if (name.ends_with(".router")) {
      router_moved = router_moved || !(t == before.at(name));
    } else {
      CHECK(t == before.at(name));
    }
  }
  CHECK(router_moved);
  CHECK(a.log.steps.size() == 6);
  CHECK(a.log.epochs.size() == 2);
  CHECK(a.log.steps.back().usage.size() == 4);

  TrainConfig all = cfg;
  all.trainable = TrainableSet::all;
  CHECK_THROWS_AS(train_router(moe, calib, all), std::invalid_argument);
}

TEST_CASE("pretraining lowers the loss, is seeded and deterministic") {
  auto cfg = tiny_config(16, 1, 2, 32, 32);
  // Highly regular corpus: counting modulo 8.
  TokenSequences corpus;
  for (int s = 0; s < 16; ++s) {
    std::vector<int> seq;
    for (int t = 0; t < 12; ++t) seq.push_back((s + t) % 8);
    corpus.push_back(seq);
  }
  TrainConfig tc;
  tc.learning_rate = 1e-2;
  tc.epochs = 3;
  tc.batch_size = 4;
  tc.trainable = TrainableSet::all;
  auto a = pretrain_dense<float>(cfg, corpus, tc, 1, "a", tiny_vocab(32));
  CHECK(a.log.epochs.back().lm_loss < a.log.epochs.front().lm_loss);
  auto again = pretrain_dense<float>(cfg, corpus, tc, 1, "a", tiny_vocab(32));
  CHECK(again.model.embedding == a.model.embedding);
  CHECK(again.model.layers[0].ffn.down == a.model.layers[0].ffn.down);
  auto b = pretrain_dense<float>(cfg, corpus, tc, 2, "b", tiny_vocab(32));
  std::size_t diff = 0, total = 0;
  for_each_tensor(a.model, [&](const std::string& name, const TensorF& t) {
    if (name.find("gamma") != std::string::npos) return;
    for_each_tensor(b.model, [&](const std::string& n, const TensorF& u) {
      if (n != name) return;
      for (std::size_t i = 0; i < t.size(); ++i) diff += t[i] != u[i];
      total += t.size();
    });
  });
  CHECK(static_cast<double>(diff) >= 0.99 * static_cast<double>(total));
}

TEST_CASE("AdamW updates known parameters only") {
  TrainConfig cfg;
  cfg.learning_rate = 0.1;
  cfg.weight_decay = 0.0;
  AdamW<double> opt(cfg);
  TensorD w = TensorD::vector({1.0, -1.0});
  std::map<std::string, TensorD*> params{{"w", &w}};
  opt.step(params, {{"w", TensorD::vector({2.0, -3.0})}});
  // First Adam step moves each coordinate by lr * sign(g).
  CHECK(w[0] == doctest::Approx(0.9).epsilon(1e-6));
  CHECK(w[1] == doctest::Approx(-0.9).epsilon(1e-6));
  CHECK_THROWS_AS(opt.step(params, {{"nope", TensorD::vector({1.0})}}), std::invalid_argument);
}

TEST_CASE("metrics csv layout") {
  TrainLog log;
  log.steps.push_back({1, 1, 2.5, 1.0, 2.51, {0.25, 0.75}, 0.5});
  std::ostringstream out;
  write_metrics_csv(log, 2, out);
  CHECK(out.str() == "epoch,step,lm_loss,bal_loss,total_loss,f_0,f_1,grad_norm_preclip\n1,1,2.5,1,2.51,0.25,0.75,0.5\n");
}

TEST_CASE("train config validation") {
  TrainConfig c;
  CHECK_NOTHROW(c.validate());
  c.learning_rate = 0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = TrainConfig{};
  c.lambda_bal = -1;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = TrainConfig{};
  c.max_grad_norm = 0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  CHECK(parse_trainable("all") == TrainableSet::all);
  CHECK_THROWS_AS(parse_trainable("some"), std::invalid_argument);
}

}  // TEST_SUITE
