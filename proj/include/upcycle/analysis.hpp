#pragma once

#include <set>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "upcycle/alignment.hpp"
#include "upcycle/moe.hpp"
#include "upcycle/tensor.hpp"
#include "upcycle/transformer.hpp"

namespace upcycle {

// Linear CKA on column-centred activations, computed in double. Returns 0
// when either centred matrix is all zero.
template <class T>
double linear_cka(const Tensor<T>& x, const Tensor<T>& y);

enum class CkaScenario { original, naive_merge, aligned_merge };
std::string to_string(CkaScenario s);

struct CkaReport {
  CkaScenario scenario = CkaScenario::original;
  std::size_t layer = 0;
  TensorD matrix;  // [N x N]
  double mean_offdiagonal = 0.0;
};

// Pairwise CKA over a set of activation matrices sharing a token axis.
template <class T>
CkaReport cka_report(CkaScenario scenario, std::size_t layer, std::span<const Tensor<T>> activations);

// FFN hidden activations of each source model over the calibration tokens.
template <class T>
CkaReport original_cka(std::span<const DenseCheckpoint<T>> sources, const TokenSequences& calib, std::size_t layer);

// Every expert of `moe` applied to the merged model's FFN input at `layer`.
template <class T>
CkaReport moe_cka(const MoECheckpoint<T>& moe, CkaScenario scenario, const TokenSequences& calib, std::size_t layer);

// The three scenarios per requested layer, in the order original, naive,
// aligned for each layer.
template <class T>
std::vector<CkaReport> expert_cka_study(std::span<const DenseCheckpoint<T>> sources,
                                        const MoECheckpoint<T>& naive_merge, const MoECheckpoint<T>& aligned_merge,
                                        const TokenSequences& calib, const std::set<std::size_t>& layers);

// exp(total next-token NLL / number of predicted positions).
template <class T>
double perplexity(const DenseCheckpoint<T>& model, const TokenSequences& corpus);
template <class T>
double perplexity(const MoECheckpoint<T>& moe, const TokenSequences& corpus);
// Same over precomputed logits, one [T x V] tensor per sequence.
template <class T>
double perplexity_from_logits(std::span<const Tensor<T>> logits, const TokenSequences& corpus);

struct UsageSummary {
  std::vector<double> fraction;   // f_i, averaged over layers
  std::vector<double> gate_mass;  // mean gate weight per expert per token
  std::size_t n_records = 0;
};

UsageSummary expert_usage(std::span<const RoutingRecord> trace, std::size_t n_experts, std::size_t k);

nlohmann::json to_json(const CkaReport& r);
nlohmann::json to_json(const UsageSummary& u);
// scenario,layer,row,col,cka
std::string cka_csv(std::span<const CkaReport> reports);

}  // namespace upcycle
