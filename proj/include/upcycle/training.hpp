#pragma once

#include <cstdint>
#include <map>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "upcycle/alignment.hpp"
#include "upcycle/moe.hpp"
#include "upcycle/transformer.hpp"

namespace upcycle {

enum class TrainableSet { router_only, all };

std::string to_string(TrainableSet s);
TrainableSet parse_trainable(const std::string& s);

struct TrainConfig {
  double learning_rate = 5e-5;
  std::size_t epochs = 6;
  std::size_t batch_size = 2;
  std::size_t max_seq_len = 128;  // sequences are cut to this length
  double lambda_bal = 0.01;
  double max_grad_norm = 1.0;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 0.01;
  std::uint64_t seed = 0;
  TrainableSet trainable = TrainableSet::router_only;

  void validate() const;
};

template <class T>
using GradientStore = std::map<std::string, Tensor<T>>;

TrainableFilter trainable_filter(TrainableSet set);

// Next-token targets: tokens[1..T).
std::vector<int> shift_targets(std::span<const int> tokens);

// Mean of -log softmax(logits[t])[targets[t]] over the targets.size() positions.
template <class T>
double lm_loss(const Tensor<T>& logits, std::span<const int> targets);

// N * sum_i f_i P_i per layer, averaged over layers. f_i counts top-k
// membership over k*T; P_i is the mean router probability. Records must carry
// the router distribution.
double load_balance_loss(std::span<const RoutingRecord> trace, std::size_t n_experts, std::size_t k);

// Per-expert top-k membership fraction, averaged over layers.
std::vector<double> usage_fractions(std::span<const RoutingRecord> trace, std::size_t n_experts, std::size_t k);

// Reverse pass over a taped graph; entries only for trainable parameters.
template <class T>
GradientStore<T> backward(Graph<T>& g, Var loss);

template <class T>
double global_norm(const GradientStore<T>& grads);

template <class T>
GradientStore<T> clip_global_norm(GradientStore<T> grads, double max_norm, double* norm_before = nullptr);

// Decoupled weight decay Adam; moments are kept in double.
template <class T>
class AdamW {
 public:
  explicit AdamW(const TrainConfig& cfg) : cfg_(cfg) {}

  // `params` maps every name in `grads` to the tensor it updates.
  void step(const std::map<std::string, Tensor<T>*>& params, const GradientStore<T>& grads);
  std::size_t steps() const noexcept { return t_; }

 private:
  TrainConfig cfg_;
  std::size_t t_ = 0;
  std::map<std::string, std::vector<double>> m_, v_;
};

struct BatchStats {
  double lm_loss = 0.0;
  double bal_loss = 0.0;
  double total_loss = 0.0;
  std::vector<double> usage;  // f_i, averaged over layers
};

// Builds L_lm + lambda * L_bal for a batch on `g`.
template <class T>
Var moe_batch_loss(Graph<T>& g, const MoEVars<T>& vars, const MoECheckpoint<T>& moe, const TokenSequences& batch,
                   double lambda_bal, BatchStats* stats = nullptr);

template <class T>
Var dense_batch_loss(Graph<T>& g, const DenseVars<T>& vars, const TransformerConfig& config,
                     const TokenSequences& batch);

// One forward/backward on a fresh graph.
template <class T>
GradientStore<T> moe_gradients(const MoECheckpoint<T>& moe, const TokenSequences& batch, double lambda_bal,
                               TrainableSet trainable, BatchStats* stats = nullptr);
template <class T>
double moe_loss_value(const MoECheckpoint<T>& moe, const TokenSequences& batch, double lambda_bal);

template <class T>
GradientStore<T> dense_gradients(const DenseCheckpoint<T>& model, const TokenSequences& batch,
                                 double* loss = nullptr);
template <class T>
double dense_loss_value(const DenseCheckpoint<T>& model, const TokenSequences& batch);

struct MetricsRow {
  std::size_t epoch = 0;
  std::size_t step = 0;
  double lm_loss = 0.0;
  double bal_loss = 0.0;
  double total_loss = 0.0;
  std::vector<double> usage;
  double grad_norm_preclip = 0.0;
};

struct EpochSummary {
  std::size_t epoch = 0;
  double lm_loss = 0.0;
  double bal_loss = 0.0;
  double total_loss = 0.0;
  std::vector<double> usage;
};

struct TrainLog {
  std::vector<MetricsRow> steps;
  std::vector<EpochSummary> epochs;
};

template <class T>
struct RouterTrainResult {
  MoECheckpoint<T> moe;
  TrainLog log;
};

template <class T>
RouterTrainResult<T> train_router(const MoECheckpoint<T>& moe, const TokenSequences& calib, const TrainConfig& cfg);

template <class T>
struct PretrainResult {
  DenseCheckpoint<T> model;
  TrainLog log;
};

template <class T>
PretrainResult<T> pretrain_dense(const TransformerConfig& config, const TokenSequences& corpus, const TrainConfig& cfg,
                                 std::uint64_t seed, std::string model_id, std::vector<std::string> vocab);

// epoch, step, lm_loss, bal_loss, total_loss, f_0..f_{N-1}, grad_norm_preclip
void write_metrics_csv(const TrainLog& log, std::size_t n_experts, std::ostream& out);
void save_metrics_csv(const TrainLog& log, std::size_t n_experts, const std::string& path);

}  // namespace upcycle
