#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "upcycle/alignment.hpp"
#include "upcycle/analysis.hpp"
#include "upcycle/corpus.hpp"
#include "upcycle/fusion.hpp"
#include "upcycle/moe.hpp"
#include "upcycle/training.hpp"

namespace upcycle {

struct AblationFlags {
  bool no_alignment = false;
  bool naive_attention = false;
  bool naive_embedding = false;
  bool biased_calibration = false;
};

struct PipelineRunConfig {
  std::string out_dir;
  std::uint64_t seed = 0;
  std::size_t n_experts = 4;  // first n domains in the fixed order general, math, code, science
  std::size_t anchor_index = 0;
  std::size_t n_sequences = 400;
  std::size_t heldout_sequences = 50;
  std::size_t seq_len = 64;
  double calib_fraction = 0.05;
  bool normalize_activations = false;
  bool write_csv = false;
  bool quiet = false;
  AblationFlags ablation;
  TransformerConfig model;
  TrainConfig pretrain;
  TrainConfig router;
  RoutingConfig routing;
  std::vector<std::size_t> cka_layers;  // empty: last layer

  static PipelineRunConfig defaults();
  void validate() const;
};

nlohmann::json to_json(const TrainConfig& c);
nlohmann::json to_json(const PipelineRunConfig& c);

// Stage 0: corpora and the dense specialists.
struct Stage0Result {
  std::vector<Corpus> train;
  std::vector<Corpus> heldout;
  std::vector<DenseCheckpoint<float>> models;
  std::vector<TrainLog> logs;
};

Stage0Result run_stage0(const PipelineRunConfig& cfg);

// Stage 1 and 2 for one variant, plus evaluation.
struct VariantResult {
  CalibrationSet calib;
  BackboneCheckpoint<float> backbone;
  std::vector<PermutationFile> perms;
  MoECheckpoint<float> initial;  // before router training
  MoECheckpoint<float> trained;
  TrainLog router_log;
  std::vector<CkaReport> cka;
  std::vector<RoutingRecord> heldout_trace;
  UsageSummary usage;
  double mixed_perplexity = 0.0;
  nlohmann::json report;
};

VariantResult run_variant(const PipelineRunConfig& cfg, const Stage0Result& stage0);

// Everything under cfg.out_dir; see the README for the layout.
void write_pipeline_outputs(const PipelineRunConfig& cfg, const Stage0Result& stage0, const VariantResult& variant);

// Mixed held-out set: every domain's held-out corpus concatenated in domain order.
TokenSequences mixed_heldout(const Stage0Result& stage0);

namespace cli {

// Exit codes: 0 success, 1 validation error, 2 runtime error.
int run(int argc, const char* const* argv);
int run(const std::vector<std::string>& args);

}  // namespace cli

}  // namespace upcycle
