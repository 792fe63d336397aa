#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "upcycle/autodiff.hpp"
#include "upcycle/fusion.hpp"
#include "upcycle/tensor.hpp"
#include "upcycle/transformer.hpp"

namespace upcycle {

struct RoutingConfig {
  std::size_t k = 2;
  bool renormalize = true;

  // Throws std::invalid_argument unless 1 <= k <= n_experts.
  void validate(std::size_t n_experts) const;

  friend bool operator==(const RoutingConfig&, const RoutingConfig&) = default;
};

template <class T>
struct MoELayer {
  std::vector<FfnWeights<T>> experts;
  Tensor<T> router;  // W_g, [d_model x N]
};

template <class T>
struct MoECheckpoint {
  BackboneCheckpoint<T> backbone;
  std::vector<MoELayer<T>> layers;
  RoutingConfig routing;
  std::vector<std::string> expert_ids;       // source model per expert slot
  std::vector<std::string> permutation_ids;  // per expert; empty when unaligned
  std::uint64_t router_seed = 0;

  const TransformerConfig& config() const { return backbone.config; }
  std::size_t n_experts() const { return expert_ids.size(); }
  void validate() const;

  template <class U>
  MoECheckpoint<U> cast() const;
};

template <class T, class F>
void for_each_tensor(MoECheckpoint<T>& moe, F&& f);
template <class T, class F>
void for_each_tensor(const MoECheckpoint<T>& moe, F&& f);

template <class T>
Tensor<T> router_probs(const Tensor<T>& x, const Tensor<T>& w_g);

template <class T>
struct TokenRoute {
  std::vector<std::size_t> indices;  // highest probability first
  std::vector<T> gates;
};

// Ties go to the lower expert index.
template <class T>
std::vector<TokenRoute<T>> top_k_dispatch(const Tensor<T>& probs, const RoutingConfig& cfg);

// Sparse gated combination of SiLU expert FFNs for a block of tokens.
template <class T>
Tensor<T> moe_ffn_forward(const Tensor<T>& x, std::span<const FfnWeights<T>> experts, const Tensor<T>& w_g,
                          const RoutingConfig& cfg);

// `experts[i][l]` is model i's FFN at layer l, already in anchor coordinates.
template <class T>
MoECheckpoint<T> assemble_moe(const BackboneCheckpoint<T>& backbone,
                              const std::vector<std::vector<FfnWeights<T>>>& experts,
                              std::vector<std::string> expert_ids, std::uint64_t seed,
                              const RoutingConfig& routing = {},
                              std::vector<std::string> permutation_ids = {});

struct RoutingRecord {
  std::size_t token_pos = 0;
  std::size_t layer = 0;
  std::vector<std::size_t> indices;
  std::vector<double> gates;
  std::vector<double> probs;  // full router distribution, pre-top-k
};

template <class T>
Tensor<T> moe_forward(const MoECheckpoint<T>& moe, std::span<const int> tokens,
                      std::vector<RoutingRecord>* trace = nullptr);

// Expert hidden activations SiLU(h * up_e) for every expert on every token at
// `layer`, where h is the normalised FFN input of the merged model.
template <class T>
std::vector<Tensor<T>> moe_expert_activations(const MoECheckpoint<T>& moe, std::span<const int> tokens,
                                              std::size_t layer);

// Dense model with the given expert's FFNs in place of the expert bank.
template <class T>
DenseCheckpoint<T> expert_as_dense(const MoECheckpoint<T>& moe, std::size_t expert, std::string model_id);

// Newline-delimited JSON, one record per line with
// {token_pos, layer, indices, gates}.
std::string routing_trace_ndjson(std::span<const RoutingRecord> trace);
void save_routing_trace(std::span<const RoutingRecord> trace, const std::string& path);
std::vector<RoutingRecord> parse_routing_trace(const std::string& ndjson);

// ---- graph wiring ---------------------------------------------------------

template <class T>
struct MoEVars {
  Var embedding, final_gamma;
  struct Layer {
    AttentionVars attn;
    Var attn_gamma, ffn_gamma, router;
    std::vector<Var> up, down;
  };
  std::vector<Layer> layers;
};

template <class T>
MoEVars<T> register_moe(Graph<T>& g, const MoECheckpoint<T>& moe, const TrainableFilter& trainable);

struct LayerRouting {
  std::size_t layer = 0;
  Var probs;  // [T x N] router softmax
  Dispatch dispatch;
};

// Gated expert block on normalised input h; `routing` receives the router
// output and dispatch when given.
template <class T>
Var moe_ffn(Graph<T>& g, Var h, const typename MoEVars<T>::Layer& layer, const RoutingConfig& cfg,
            LayerRouting* routing = nullptr);

template <class T>
Var moe_logits(Graph<T>& g, const MoEVars<T>& vars, const TransformerConfig& config, const RoutingConfig& cfg,
               std::span<const int> tokens, std::vector<LayerRouting>* routing = nullptr,
               std::map<std::size_t, Var>* ffn_inputs = nullptr);

std::string expert_name(std::size_t layer, std::size_t expert, const std::string& leaf);

// ------------------------------------------------------------------------

template <class T>
template <class U>
MoECheckpoint<U> MoECheckpoint<T>::cast() const {
  MoECheckpoint<U> out;
  out.backbone = backbone.template cast<U>();
  out.routing = routing;
  out.expert_ids = expert_ids;
  out.permutation_ids = permutation_ids;
  out.router_seed = router_seed;
  out.layers.resize(layers.size());
  for (std::size_t l = 0; l < layers.size(); ++l) {
    out.layers[l].router = layers[l].router.template cast<U>();
    for (const auto& e : layers[l].experts)
      out.layers[l].experts.push_back({e.up.template cast<U>(), e.down.template cast<U>()});
  }
  return out;
}

namespace detail {
template <class C, class F>
void visit_moe(C& moe, F& f) {
  f(std::string("embedding"), moe.backbone.embedding);
  for (std::size_t l = 0; l < moe.backbone.layers.size(); ++l) {
    auto& B = moe.backbone.layers[l];
    f(layer_name(l, "attn.wq"), B.attn.wq);
    f(layer_name(l, "attn.wk"), B.attn.wk);
    f(layer_name(l, "attn.wv"), B.attn.wv);
    f(layer_name(l, "attn.wo"), B.attn.wo);
    f(layer_name(l, "attn_gamma"), B.attn_gamma);
    f(layer_name(l, "ffn_gamma"), B.ffn_gamma);
    if (l < moe.layers.size()) {
      auto& M = moe.layers[l];
      for (std::size_t e = 0; e < M.experts.size(); ++e) {
        f(expert_name(l, e, "up"), M.experts[e].up);
        f(expert_name(l, e, "down"), M.experts[e].down);
      }
      f(layer_name(l, "router"), M.router);
    }
  }
  f(std::string("final_gamma"), moe.backbone.final_gamma);
}
}  // namespace detail

template <class T, class F>
void for_each_tensor(MoECheckpoint<T>& moe, F&& f) {
  detail::visit_moe(moe, f);
}

template <class T, class F>
void for_each_tensor(const MoECheckpoint<T>& moe, F&& f) {
  detail::visit_moe(moe, f);
}

}  // namespace upcycle
