#pragma once

#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "upcycle/tensor.hpp"
#include "upcycle/transformer.hpp"

namespace upcycle {

class DegenerateInputError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class AttentionStrategy { slerp, linear };
enum class EmbeddingStrategy { selective, linear };

std::string to_string(AttentionStrategy s);
std::string to_string(EmbeddingStrategy s);

// Binary reduction order over model indices, e.g. ((0,1),(2,3)).
struct MergeTree {
  std::optional<std::size_t> leaf;
  std::vector<MergeTree> children;  // empty for leaves, exactly two otherwise

  static MergeTree make_leaf(std::size_t index);
  static MergeTree make_node(MergeTree left, MergeTree right);
  // Halving split of [0, n): ((0,1),(2,3)) for n = 4, (0,(1,2)) for n = 3.
  static MergeTree balanced(std::size_t n);
  static MergeTree parse(const std::string& text);

  std::string to_string() const;
  std::vector<std::size_t> leaves() const;

  friend bool operator==(const MergeTree&, const MergeTree&) = default;
};

struct MergeRecipe {
  std::vector<double> weights;
  std::size_t anchor_index = 0;
  double slerp_dot_threshold = 0.9995;
  AttentionStrategy attention_strategy = AttentionStrategy::slerp;
  EmbeddingStrategy embedding_strategy = EmbeddingStrategy::selective;
  MergeTree tree;

  // Equal weights, balanced tree, anchor 0.
  static MergeRecipe uniform(std::size_t n_models);

  // Checks the recipe against a model count; throws std::invalid_argument.
  void validate(std::size_t n_models) const;

  friend bool operator==(const MergeRecipe&, const MergeRecipe&) = default;
};

// `key = value` lines; '#' starts a comment. Keys: weights, anchor_index,
// slerp_dot_threshold, attention_strategy, embedding_strategy, tree.
MergeRecipe parse_recipe(const std::string& text);
MergeRecipe load_recipe(const std::string& path);
std::string format_recipe(const MergeRecipe& recipe);

template <class T>
Tensor<T> slerp(const Tensor<T>& w1, const Tensor<T>& w2, double t, double dot_threshold = 0.9995);

template <class T>
Tensor<T> nary_slerp(std::span<const Tensor<T>> tensors, std::span<const double> weights,
                     const MergeTree& tree, double dot_threshold = 0.9995);

template <class T>
Tensor<T> linear_merge(std::span<const Tensor<T>> tensors, std::span<const double> weights);

template <class T>
struct EmbeddingMerge {
  Tensor<T> embedding;
  std::vector<std::string> vocab;
};

// Merged vocabulary: the anchor's tokens in order, then each other model's
// unseen tokens (model order, lexical within a model). Shared rows are the
// weight-renormalised average over the models holding the token; rows of a
// token held by one model are copied unchanged.
template <class T>
EmbeddingMerge<T> selective_embedding_merge(std::span<const Tensor<T>> embeddings,
                                            std::span<const std::vector<std::string>> vocabs,
                                            std::span<const double> weights,
                                            std::size_t anchor_index = 0);

// Naive variant over the same union vocabulary: row = sum_i w_i e_i[token],
// models lacking the token contribute zero.
template <class T>
EmbeddingMerge<T> linear_embedding_merge(std::span<const Tensor<T>> embeddings,
                                         std::span<const std::vector<std::string>> vocabs,
                                         std::span<const double> weights,
                                         std::size_t anchor_index = 0);

template <class T>
struct BackboneLayer {
  AttentionWeights<T> attn;
  Tensor<T> attn_gamma;
  Tensor<T> ffn_gamma;
};

// Shared non-expert parameters. FFN slots are deliberately absent.
template <class T>
struct BackboneCheckpoint {
  TransformerConfig config;
  std::vector<std::string> vocab;
  Tensor<T> embedding;
  std::vector<BackboneLayer<T>> layers;
  Tensor<T> final_gamma;
  MergeRecipe recipe;
  std::vector<std::string> source_ids;

  void validate() const;

  template <class U>
  BackboneCheckpoint<U> cast() const;
};

template <class T, class F>
void for_each_tensor(BackboneCheckpoint<T>& b, F&& f);
template <class T, class F>
void for_each_tensor(const BackboneCheckpoint<T>& b, F&& f);

// Configs must match on everything but vocab_size.
bool architecture_compatible(const TransformerConfig& a, const TransformerConfig& b);

template <class T>
BackboneCheckpoint<T> build_backbone(std::span<const DenseCheckpoint<T>> models,
                                     const MergeRecipe& recipe);

// Non-FFN part of a dense model, as a backbone of one source.
template <class T>
BackboneCheckpoint<T> extract_backbone(const DenseCheckpoint<T>& model);

// ------------------------------------------------------------------------

template <class T>
template <class U>
BackboneCheckpoint<U> BackboneCheckpoint<T>::cast() const {
  BackboneCheckpoint<U> out;
  out.config = config;
  out.vocab = vocab;
  out.embedding = embedding.template cast<U>();
  out.final_gamma = final_gamma.template cast<U>();
  out.recipe = recipe;
  out.source_ids = source_ids;
  out.layers.resize(layers.size());
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& s = layers[l];
    auto& d = out.layers[l];
    d.attn = {s.attn.wq.template cast<U>(), s.attn.wk.template cast<U>(),
              s.attn.wv.template cast<U>(), s.attn.wo.template cast<U>()};
    d.attn_gamma = s.attn_gamma.template cast<U>();
    d.ffn_gamma = s.ffn_gamma.template cast<U>();
  }
  return out;
}

namespace detail {
template <class C, class F>
void visit_backbone(C& b, F& f) {
  f(std::string("embedding"), b.embedding);
  for (std::size_t l = 0; l < b.layers.size(); ++l) {
    auto& L = b.layers[l];
    f(layer_name(l, "attn.wq"), L.attn.wq);
    f(layer_name(l, "attn.wk"), L.attn.wk);
    f(layer_name(l, "attn.wv"), L.attn.wv);
    f(layer_name(l, "attn.wo"), L.attn.wo);
    f(layer_name(l, "attn_gamma"), L.attn_gamma);
    f(layer_name(l, "ffn_gamma"), L.ffn_gamma);
  }
  f(std::string("final_gamma"), b.final_gamma);
}
}  // namespace detail

template <class T, class F>
void for_each_tensor(BackboneCheckpoint<T>& b, F&& f) {
  detail::visit_backbone(b, f);
}

template <class T, class F>
void for_each_tensor(const BackboneCheckpoint<T>& b, F&& f) {
  detail::visit_backbone(b, f);
}

}  // namespace upcycle
