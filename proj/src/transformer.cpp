#include "upcycle/transformer.hpp"

#include <cmath>
#include <stdexcept>
#include <unordered_set>

#include "upcycle/random.hpp"

namespace upcycle {

void TransformerConfig::validate() const {
  if (d_model == 0 || n_layers == 0 || n_heads == 0 || d_ffn == 0 || vocab_size == 0 ||
      max_seq_len == 0) {
    throw std::invalid_argument("transformer config: all dimensions must be >= 1");
  }
  if (d_model % n_heads != 0) {
    throw std::invalid_argument("transformer config: d_model " + std::to_string(d_model) +
                                " not divisible by n_heads " + std::to_string(n_heads));
  }
  if (head_dim() % 2 != 0) {
    throw std::invalid_argument("transformer config: rotary encoding needs an even head size");
  }
  if (!(rope_theta > 0) || !(norm_eps > 0)) {
    throw std::invalid_argument("transformer config: rope_theta and norm_eps must be positive");
  }
}

std::string layer_name(std::size_t layer, const std::string& leaf) {
  return "layers." + std::to_string(layer) + "." + leaf;
}

namespace {

void expect_shape(const std::string& name, const Shape& got, const Shape& want) {
  if (got != want) {
    throw ShapeError(name + ": expected " + shape_str(want) + ", got " + shape_str(got));
  }
}

}  // namespace

template <class T>
void DenseCheckpoint<T>::validate() const {
  config.validate();
  if (vocab.size() != config.vocab_size) {
    throw std::invalid_argument("checkpoint '" + model_id + "': vocab has " +
                                std::to_string(vocab.size()) + " tokens, config says " +
                                std::to_string(config.vocab_size));
  }
  std::unordered_set<std::string> seen(vocab.begin(), vocab.end());
  if (seen.size() != vocab.size()) {
    throw std::invalid_argument("checkpoint '" + model_id + "': duplicate vocabulary tokens");
  }
  if (layers.size() != config.n_layers) {
    throw ShapeError("checkpoint '" + model_id + "': layer count mismatch");
  }
  const std::size_t d = config.d_model, f = config.d_ffn;
  expect_shape("embedding", embedding.shape(), {config.vocab_size, d});
  expect_shape("final_gamma", final_gamma.shape(), {d});
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& L = layers[l];
    expect_shape(layer_name(l, "attn.wq"), L.attn.wq.shape(), {d, d});
    expect_shape(layer_name(l, "attn.wk"), L.attn.wk.shape(), {d, d});
    expect_shape(layer_name(l, "attn.wv"), L.attn.wv.shape(), {d, d});
    expect_shape(layer_name(l, "attn.wo"), L.attn.wo.shape(), {d, d});
    expect_shape(layer_name(l, "attn_gamma"), L.attn_gamma.shape(), {d});
    expect_shape(layer_name(l, "ffn_gamma"), L.ffn_gamma.shape(), {d});
    expect_shape(layer_name(l, "ffn.up"), L.ffn.up.shape(), {d, f});
    expect_shape(layer_name(l, "ffn.down"), L.ffn.down.shape(), {f, d});
  }
}

template <class T>
DenseCheckpoint<T> init_dense(const TransformerConfig& config, std::vector<std::string> vocab,
                              std::string model_id, std::uint64_t seed) {
  config.validate();
  Rng rng(seed);
  const std::size_t d = config.d_model, f = config.d_ffn;
  const double std_in = 0.02;
  const double std_out = 0.02 / std::sqrt(2.0 * static_cast<double>(config.n_layers));
  DenseCheckpoint<T> c;
  c.config = config;
  c.model_id = std::move(model_id);
  c.vocab = std::move(vocab);
  c.embedding = rng.normal_tensor<T>({config.vocab_size, d}, std_in);
  c.layers.resize(config.n_layers);
  for (auto& L : c.layers) {
    L.attn.wq = rng.normal_tensor<T>({d, d}, std_in);
    L.attn.wk = rng.normal_tensor<T>({d, d}, std_in);
    L.attn.wv = rng.normal_tensor<T>({d, d}, std_in);
    L.attn.wo = rng.normal_tensor<T>({d, d}, std_out);
    L.ffn.up = rng.normal_tensor<T>({d, f}, std_in);
    L.ffn.down = rng.normal_tensor<T>({f, d}, std_out);
    L.attn_gamma = Tensor<T>::full({d}, T{1});
    L.ffn_gamma = Tensor<T>::full({d}, T{1});
  }
  c.final_gamma = Tensor<T>::full({d}, T{1});
  c.validate();
  return c;
}

void check_tokens(const TransformerConfig& config, std::span<const int> tokens) {
  if (tokens.empty()) throw std::invalid_argument("forward: empty token sequence");
  if (tokens.size() > config.max_seq_len) {
    throw std::invalid_argument("forward: sequence of " + std::to_string(tokens.size()) +
                                " tokens exceeds max_seq_len " +
                                std::to_string(config.max_seq_len));
  }
  for (int t : tokens) {
    if (t < 0 || static_cast<std::size_t>(t) >= config.vocab_size) {
      throw std::out_of_range("forward: token id " + std::to_string(t) + " outside vocabulary of " +
                              std::to_string(config.vocab_size));
    }
  }
}

template <class T>
Var attention_residual(Graph<T>& g, Var x, Var gamma, const AttentionVars& attn,
                       const TransformerConfig& config) {
  Var h = g.rms_norm(x, gamma, config.norm_eps);
  Var q = g.matmul(h, attn.wq);
  Var k = g.matmul(h, attn.wk);
  Var v = g.matmul(h, attn.wv);
  Var o = g.causal_attention(q, k, v, config.n_heads, config.rope_theta);
  return g.add(x, g.matmul(o, attn.wo));
}

template <class T>
Var ffn_hidden(Graph<T>& g, Var h, Var up) {
  return g.silu(g.matmul(h, up));
}

template <class T>
DenseVars<T> register_dense(Graph<T>& g, const DenseCheckpoint<T>& ckpt,
                            const TrainableFilter& trainable) {
  auto reg = [&](const std::string& name, const Tensor<T>& t) {
    return g.parameter(t, name, trainable && trainable(name));
  };
  DenseVars<T> v;
  v.embedding = reg("embedding", ckpt.embedding);
  v.layers.resize(ckpt.layers.size());
  for (std::size_t l = 0; l < ckpt.layers.size(); ++l) {
    const auto& L = ckpt.layers[l];
    auto& V = v.layers[l];
    V.attn.wq = reg(layer_name(l, "attn.wq"), L.attn.wq);
    V.attn.wk = reg(layer_name(l, "attn.wk"), L.attn.wk);
    V.attn.wv = reg(layer_name(l, "attn.wv"), L.attn.wv);
    V.attn.wo = reg(layer_name(l, "attn.wo"), L.attn.wo);
    V.attn_gamma = reg(layer_name(l, "attn_gamma"), L.attn_gamma);
    V.ffn_gamma = reg(layer_name(l, "ffn_gamma"), L.ffn_gamma);
    V.up = reg(layer_name(l, "ffn.up"), L.ffn.up);
    V.down = reg(layer_name(l, "ffn.down"), L.ffn.down);
  }
  v.final_gamma = reg("final_gamma", ckpt.final_gamma);
  return v;
}

template <class T>
Var dense_logits(Graph<T>& g, const DenseVars<T>& vars, const TransformerConfig& config,
                 std::span<const int> tokens, const std::set<std::size_t>* trace_layers,
                 std::map<std::size_t, Var>* trace) {
  check_tokens(config, tokens);
  Var x = g.embedding(vars.embedding, tokens);
  for (std::size_t l = 0; l < vars.layers.size(); ++l) {
    const auto& V = vars.layers[l];
    x = attention_residual(g, x, V.attn_gamma, V.attn, config);
    Var h = g.rms_norm(x, V.ffn_gamma, config.norm_eps);
    Var a = ffn_hidden(g, h, V.up);
    if (trace && trace_layers && trace_layers->count(l)) (*trace)[l] = a;
    x = g.add(x, g.matmul(a, V.down));
  }
  Var xn = g.rms_norm(x, vars.final_gamma, config.norm_eps);
  return g.matmul_nt(xn, vars.embedding);
}

template <class T>
Tensor<T> forward(const DenseCheckpoint<T>& ckpt, std::span<const int> tokens) {
  Graph<T> g;
  auto vars = register_dense(g, ckpt, nullptr);
  return g.value(dense_logits(g, vars, ckpt.config, tokens));
}

template <class T>
TracedForward<T> forward_with_trace(const DenseCheckpoint<T>& ckpt, std::span<const int> tokens,
                                    const std::set<std::size_t>& layers) {
  for (std::size_t l : layers) {
    if (l >= ckpt.config.n_layers) {
      throw std::out_of_range("forward_with_trace: layer " + std::to_string(l) +
                              " outside model with " + std::to_string(ckpt.config.n_layers) +
                              " layers");
    }
  }
  Graph<T> g;
  auto vars = register_dense(g, ckpt, nullptr);
  std::map<std::size_t, Var> trace;
  Var logits = dense_logits(g, vars, ckpt.config, tokens, &layers, &trace);
  TracedForward<T> out;
  out.logits = g.value(logits);
  for (const auto& [l, v] : trace) out.ffn_hidden.emplace(l, g.value(v));
  return out;
}

#define UPCYCLE_INSTANTIATE(T)                                                                   \
  template struct DenseCheckpoint<T>;                                                            \
  template DenseCheckpoint<T> init_dense(const TransformerConfig&, std::vector<std::string>,     \
                                         std::string, std::uint64_t);                            \
  template Var attention_residual(Graph<T>&, Var, Var, const AttentionVars&,                     \
                                  const TransformerConfig&);                                     \
  template Var ffn_hidden(Graph<T>&, Var, Var);                                                  \
  template DenseVars<T> register_dense(Graph<T>&, const DenseCheckpoint<T>&,                     \
                                       const TrainableFilter&);                                  \
  template Var dense_logits(Graph<T>&, const DenseVars<T>&, const TransformerConfig&,            \
                            std::span<const int>, const std::set<std::size_t>*,                  \
                            std::map<std::size_t, Var>*);                                        \
  template Tensor<T> forward(const DenseCheckpoint<T>&, std::span<const int>);                   \
  template TracedForward<T> forward_with_trace(const DenseCheckpoint<T>&, std::span<const int>, \
                                               const std::set<std::size_t>&);

UPCYCLE_INSTANTIATE(float)
UPCYCLE_INSTANTIATE(double)

#undef UPCYCLE_INSTANTIATE

}  // namespace upcycle
