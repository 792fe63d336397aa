#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "upcycle/autodiff.hpp"
#include "upcycle/tensor.hpp"

namespace upcycle {

struct TransformerConfig {
  std::size_t d_model = 64;
  std::size_t n_layers = 2;
  std::size_t n_heads = 4;
  std::size_t d_ffn = 128;
  std::size_t vocab_size = 256;
  std::size_t max_seq_len = 128;
  double rope_theta = 10000.0;
  double norm_eps = 1e-5;

  // Throws std::invalid_argument on a malformed config.
  void validate() const;
  std::size_t head_dim() const { return d_model / n_heads; }

  friend bool operator==(const TransformerConfig&, const TransformerConfig&) = default;
};

template <class T>
struct FfnWeights {
  Tensor<T> up;    // [d_model x d_ffn]
  Tensor<T> down;  // [d_ffn x d_model]

  friend bool operator==(const FfnWeights&, const FfnWeights&) = default;
};

template <class T>
struct AttentionWeights {
  Tensor<T> wq, wk, wv, wo;  // [d_model x d_model]

  friend bool operator==(const AttentionWeights&, const AttentionWeights&) = default;
};

template <class T>
struct DenseLayer {
  AttentionWeights<T> attn;
  FfnWeights<T> ffn;
  Tensor<T> attn_gamma;
  Tensor<T> ffn_gamma;
};

// One source model: a pre-norm decoder with a tied output head.
template <class T>
struct DenseCheckpoint {
  TransformerConfig config;
  std::string model_id;
  std::vector<std::string> vocab;
  Tensor<T> embedding;  // [vocab x d_model]
  std::vector<DenseLayer<T>> layers;
  Tensor<T> final_gamma;

  void validate() const;

  template <class U>
  DenseCheckpoint<U> cast() const;
};

// Calls f(name, tensor) for every parameter in a fixed canonical order.
template <class T, class F>
void for_each_tensor(DenseCheckpoint<T>& ckpt, F&& f);
template <class T, class F>
void for_each_tensor(const DenseCheckpoint<T>& ckpt, F&& f);

// Seeded initialisation: N(0, 0.02) projections and embeddings, unit gammas,
// output projections scaled by 1/sqrt(2 n_layers).
template <class T>
DenseCheckpoint<T> init_dense(const TransformerConfig& config, std::vector<std::string> vocab,
                              std::string model_id, std::uint64_t seed);

template <class T>
Tensor<T> forward(const DenseCheckpoint<T>& ckpt, std::span<const int> tokens);

template <class T>
struct TracedForward {
  Tensor<T> logits;
  std::map<std::size_t, Tensor<T>> ffn_hidden;  // layer -> [T x d_ffn], post-SiLU
};

template <class T>
TracedForward<T> forward_with_trace(const DenseCheckpoint<T>& ckpt, std::span<const int> tokens,
                                    const std::set<std::size_t>& layers);

// ---- graph wiring shared with the MoE stack and the trainer --------------

using TrainableFilter = std::function<bool(const std::string&)>;

struct AttentionVars {
  Var wq, wk, wv, wo;
};

void check_tokens(const TransformerConfig& config, std::span<const int> tokens);

// x += Attn(rms_norm(x, gamma))
template <class T>
Var attention_residual(Graph<T>& g, Var x, Var gamma, const AttentionVars& attn,
                       const TransformerConfig& config);

// Post-activation hidden state SiLU(h * up).
template <class T>
Var ffn_hidden(Graph<T>& g, Var h, Var up);

template <class T>
struct DenseVars {
  Var embedding, final_gamma;
  struct Layer {
    AttentionVars attn;
    Var up, down, attn_gamma, ffn_gamma;
  };
  std::vector<Layer> layers;
};

template <class T>
DenseVars<T> register_dense(Graph<T>& g, const DenseCheckpoint<T>& ckpt, const TrainableFilter& trainable);

// Builds the forward pass on `g`; fills `trace` for requested layers when given.
template <class T>
Var dense_logits(Graph<T>& g, const DenseVars<T>& vars, const TransformerConfig& config,
                 std::span<const int> tokens, const std::set<std::size_t>* trace_layers = nullptr,
                 std::map<std::size_t, Var>* trace = nullptr);

std::string layer_name(std::size_t layer, const std::string& leaf);

// ------------------------------------------------------------------------

template <class T>
template <class U>
DenseCheckpoint<U> DenseCheckpoint<T>::cast() const {
  DenseCheckpoint<U> out;
  out.config = config;
  out.model_id = model_id;
  out.vocab = vocab;
  out.embedding = embedding.template cast<U>();
  out.final_gamma = final_gamma.template cast<U>();
  out.layers.resize(layers.size());
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& s = layers[l];
    auto& d = out.layers[l];
    d.attn = {s.attn.wq.template cast<U>(), s.attn.wk.template cast<U>(),
              s.attn.wv.template cast<U>(), s.attn.wo.template cast<U>()};
    d.ffn = {s.ffn.up.template cast<U>(), s.ffn.down.template cast<U>()};
    d.attn_gamma = s.attn_gamma.template cast<U>();
    d.ffn_gamma = s.ffn_gamma.template cast<U>();
  }
  return out;
}

namespace detail {
template <class C, class F>
void visit_dense(C& ckpt, F& f) {
  f(std::string("embedding"), ckpt.embedding);
  for (std::size_t l = 0; l < ckpt.layers.size(); ++l) {
    auto& L = ckpt.layers[l];
    f(layer_name(l, "attn.wq"), L.attn.wq);
    f(layer_name(l, "attn.wk"), L.attn.wk);
    f(layer_name(l, "attn.wv"), L.attn.wv);
    f(layer_name(l, "attn.wo"), L.attn.wo);
    f(layer_name(l, "attn_gamma"), L.attn_gamma);
    f(layer_name(l, "ffn_gamma"), L.ffn_gamma);
    f(layer_name(l, "ffn.up"), L.ffn.up);
    f(layer_name(l, "ffn.down"), L.ffn.down);
  }
  f(std::string("final_gamma"), ckpt.final_gamma);
}
}  // namespace detail

template <class T, class F>
void for_each_tensor(DenseCheckpoint<T>& ckpt, F&& f) {
  detail::visit_dense(ckpt, f);
}

template <class T, class F>
void for_each_tensor(const DenseCheckpoint<T>& ckpt, F&& f) {
  detail::visit_dense(ckpt, f);
}

}  // namespace upcycle
