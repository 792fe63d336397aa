#include "doctest.h"
#include "support.hpp"
#include "upcycle/transformer.hpp"

using namespace upcycle;
using namespace upcycle::testing;

TEST_SUITE("transformer") {

TEST_CASE("config validation") {
  TransformerConfig c = tiny_config();
  CHECK_NOTHROW(c.validate());
  c.n_heads = 3;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = tiny_config();
  c.d_ffn = 0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = tiny_config(6, 2, 2);  // head_dim 3 cannot carry rotary pairs
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
}

TEST_CASE("zero weights give zero logits") {
  auto m = random_dense<double>(tiny_config(), 1);
  for_each_tensor(m, [](const std::string& name, TensorD& t) {
    const double v = name.find("gamma") != std::string::npos ? 1.0 : 0.0;
    for (auto& x : t.data()) x = v;
  });
  auto logits = forward(m, std::vector<int>{1, 2, 3});
  for (double v : logits.data()) CHECK(v == 0.0);
}

TEST_CASE("hand-computed single token forward") {
  TransformerConfig c;
  c.d_model = 2;
  c.n_layers = 1;
  c.n_heads = 1;
  c.d_ffn = 3;
  c.vocab_size = 2;
  c.max_seq_len = 4;
  auto m = init_dense<double>(c, {"a", "b"}, "hand", 0);
  m.embedding = TensorD::from_rows({{1, 2}, {0.5, -1}});
  auto& L = m.layers[0];
  L.attn.wv = TensorD::from_rows({{1, 0}, {0, 1}});
  L.attn.wo = TensorD::from_rows({{0.5, 0}, {0, 0.5}});
  L.ffn.up = TensorD::from_rows({{1, 0, -1}, {0, 1, 1}});
  L.ffn.down = TensorD::from_rows({{1, 0}, {0, 1}, {1, 1}});
  auto logits = forward(m, std::vector<int>{0});
  CHECK(logits(0, 0) == doctest::Approx(3.16130805362593).epsilon(1e-12));
  CHECK(logits(0, 1) == doctest::Approx(-0.917095653658583).epsilon(1e-12));
}

TEST_CASE("causality: a later token never changes earlier logits") {
  auto m = random_dense<float>(tiny_config(), 2, "m", 20.0);
  std::vector<int> a{3, 7, 1, 9, 4, 2}, b = a;
  b[4] = 11;
  auto la = forward(m, a), lb = forward(m, b);
  for (std::size_t t = 0; t < 4; ++t)
    for (std::size_t j = 0; j < la.cols(); ++j) CHECK(la(t, j) == lb(t, j));
  bool changed = false;
  for (std::size_t j = 0; j < la.cols(); ++j) changed = changed || la(4, j) != lb(4, j);
  CHECK(changed);
}

TEST_CASE("tracing is non-intrusive") {
  auto m = random_dense<float>(tiny_config(), 3, "m", 10.0);
  std::vector<int> toks{1, 2, 3, 4, 5};
  auto traced = forward_with_trace(m, toks, {0, 1});
  CHECK(traced.logits == forward(m, toks));
  CHECK(traced.ffn_hidden.at(1).shape() == Shape{5, 16});
  CHECK(traced.ffn_hidden.count(0) == 1);

  for (auto& v : m.layers[1].ffn.up.data()) v = 0;
  auto zero = forward_with_trace(m, toks, {1});
  for (float v : zero.ffn_hidden.at(1).data()) CHECK(v == 0.0f);
}

TEST_CASE("token and length checks") {
  auto m = random_dense<float>(tiny_config(), 4);
  CHECK_THROWS_AS(forward(m, std::vector<int>{1, 32}), std::out_of_range);
  CHECK_THROWS_AS(forward(m, std::vector<int>(33, 1)), std::invalid_argument);
  CHECK_THROWS(forward(m, std::vector<int>{}));
}

TEST_CASE("init is seeded and validated") {
  auto c = tiny_config();
  auto a = random_dense<float>(c, 5), b = random_dense<float>(c, 5), d = random_dense<float>(c, 6);
  CHECK(a.embedding == b.embedding);
  CHECK_FALSE(a.embedding == d.embedding);
  CHECK_NOTHROW(a.validate());
  a.layers[0].ffn.up = TensorF({8, 15});
  CHECK_THROWS(a.validate());
  b.vocab[1] = b.vocab[0];
  CHECK_THROWS(b.validate());
}

TEST_CASE("float and double forwards agree") {
  auto m = random_dense<double>(tiny_config(), 7, "m", 10.0);
  std::vector<int> toks{1, 5, 9, 2};
  auto ld = forward(m, toks);
  auto lf = forward(m.cast<float>(), toks);
  CHECK(max_abs_diff(lf.cast<double>(), ld) < 1e-4);
}

}  // TEST_SUITE
