#pragma once

#include <map>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "upcycle/tensor.hpp"
#include "upcycle/transformer.hpp"

namespace upcycle {

using TokenSequences = std::vector<std::vector<int>>;

template <class T>
struct ActivationMatrix {
  std::string model_id;
  std::size_t layer = 0;
  Tensor<T> data;  // [tokens x d_ffn]
};

// p[j] is the target neuron placed in anchor slot j.
class Permutation {
 public:
  Permutation() = default;
  // Throws std::invalid_argument unless `map` is a bijection on [0, n).
  Permutation(std::size_t layer, std::vector<std::size_t> map);

  static Permutation identity(std::size_t layer, std::size_t n);

  std::size_t layer() const noexcept { return layer_; }
  void set_layer(std::size_t layer) noexcept { layer_ = layer; }
  std::size_t size() const noexcept { return map_.size(); }
  std::size_t operator[](std::size_t j) const { return map_[j]; }
  const std::vector<std::size_t>& map() const noexcept { return map_; }
  bool is_identity() const;
  Permutation inverse() const;

  friend bool operator==(const Permutation&, const Permutation&) = default;

 private:
  std::size_t layer_ = 0;
  std::vector<std::size_t> map_;
};

// C[j,k] = sum_s (A_anchor[s,j] - A_target[s,k])^2, always held in double.
struct CostMatrix {
  TensorD data;

  std::size_t size() const { return data.rows(); }
  double operator()(std::size_t j, std::size_t k) const { return data(j, k); }
};

struct Assignment {
  Permutation perm;
  double total_cost = 0.0;
};

// Per-layer FFN hidden activations over all calibration tokens, sequences
// concatenated in order.
template <class T>
std::map<std::size_t, ActivationMatrix<T>> collect_activations(const DenseCheckpoint<T>& model,
                                                               const TokenSequences& calib);

// With `normalize`, columns are z-scored before the distance is taken.
template <class T>
CostMatrix build_cost_matrix(const ActivationMatrix<T>& anchor, const ActivationMatrix<T>& target,
                             bool normalize = false);

double assignment_cost(const CostMatrix& c, const Permutation& p);

// ||A_anchor - A_target P||_F^2 evaluated directly, for cross-checking the
// per-assignment decomposition of the cost matrix.
template <class T>
double permuted_frobenius_objective(const Tensor<T>& anchor, const Tensor<T>& target, const Permutation& p);

// Hungarian solve, O(n^3); among optimal assignments returns the
// lexicographically smallest permutation.
Assignment solve_lap(const CostMatrix& c);

// Exhaustive search for n <= 8 with the same tie-break.
Assignment brute_force_lap(const CostMatrix& c);

template <class T>
FfnWeights<T> remap_ffn(const FfnWeights<T>& ffn, const Permutation& p);

struct LayerAlignmentCost {
  std::size_t layer = 0;
  double identity_cost = 0.0;
  double assigned_cost = 0.0;
};

template <class T>
struct AlignmentResult {
  std::vector<FfnWeights<T>> ffns;  // per layer, in anchor coordinates
  std::vector<Permutation> perms;
  std::vector<LayerAlignmentCost> costs;
};

struct AlignOptions {
  bool normalize_activations = false;
};

template <class T>
AlignmentResult<T> align_expert(const DenseCheckpoint<T>& anchor, const DenseCheckpoint<T>& target,
                                const TokenSequences& calib, const AlignOptions& options = {});

// Variant reusing anchor activations collected once for several targets.
template <class T>
AlignmentResult<T> align_expert(const std::map<std::size_t, ActivationMatrix<T>>& anchor_acts,
                                const DenseCheckpoint<T>& target, const TokenSequences& calib,
                                const AlignOptions& options = {});

// ---- permutation files -----------------------------------------------------

struct PermutationFile {
  std::string model_id;
  std::string anchor_id;
  std::vector<Permutation> layers;
  std::vector<LayerAlignmentCost> costs;
};

nlohmann::json to_json(const PermutationFile& f);
PermutationFile permutation_file_from_json(const nlohmann::json& j);
void save_permutation_file(const PermutationFile& f, const std::string& path);
PermutationFile load_permutation_file(const std::string& path);

}  // namespace upcycle
