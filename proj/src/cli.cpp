#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <stdexcept>

#include "CLI11.hpp"
#include "upcycle/checkpoint_io.hpp"
#include "upcycle/cli.hpp"
#include "upcycle/log.hpp"

namespace upcycle::cli {

namespace fs = std::filesystem;

namespace {

void write_json(const nlohmann::json& j, const std::string& path) {
  if (auto parent = fs::path(path).parent_path(); !parent.empty()) fs::create_directories(parent);
  std::ofstream f(path, std::ios::binary);
  f << j.dump(2) << '\n';
  if (!f) throw CheckpointError(CheckpointErrorCode::io, "cannot write " + path);
}

void write_text(const std::string& text, const std::string& path) {
  if (auto parent = fs::path(path).parent_path(); !parent.empty()) fs::create_directories(parent);
  std::ofstream f(path, std::ios::binary);
  f << text;
  if (!f) throw CheckpointError(CheckpointErrorCode::io, "cannot write " + path);
}

std::vector<DenseCheckpoint<float>> load_models(const std::vector<std::string>& dirs) {
  std::vector<DenseCheckpoint<float>> out;
  for (const auto& d : dirs) out.push_back(load_dense<float>(d));
  return out;
}

void add_train_options(CLI::App* sub, TrainConfig& tc) {
  sub->add_option("--epochs", tc.epochs)->capture_default_str();
  sub->add_option("--lr", tc.learning_rate)->capture_default_str();
  sub->add_option("--batch-size", tc.batch_size)->capture_default_str();
  sub->add_option("--max-seq-len", tc.max_seq_len)->capture_default_str();
  sub->add_option("--max-grad-norm", tc.max_grad_norm)->capture_default_str();
  sub->add_option("--weight-decay", tc.weight_decay)->capture_default_str();
}

// ---- subcommand bodies ------------------------------------------------------

struct GenCorpusArgs {
  std::string domain, out;
  std::uint64_t seed = 0;
  std::size_t n_sequences = 400, seq_len = 64;
};

void gen_corpus_cmd(const GenCorpusArgs& a) {
  const Corpus c = gen_corpus(parse_domain(a.domain), a.seed, a.n_sequences, a.seq_len);
  save_corpus(c.sequences, a.out);
}

struct SampleCalibArgs {
  std::vector<std::string> corpora, domains;
  std::string out;
  double fraction = 0.05;
  std::uint64_t seed = 0;
  bool biased = false;
};

void sample_calib_cmd(const SampleCalibArgs& a) {
  const auto defaults = all_domains();
  if (!a.domains.empty() && a.domains.size() != a.corpora.size()) {
    throw std::invalid_argument("--domains must name one domain per corpus");
  }
  if (a.domains.empty() && a.corpora.size() > defaults.size()) {
    throw std::invalid_argument("more than four corpora need explicit --domains");
  }
  std::vector<Corpus> corpora;
  for (std::size_t i = 0; i < a.corpora.size(); ++i) {
    Domain d = a.domains.empty() ? defaults[i] : parse_domain(a.domains[i]);
    corpora.push_back({d, load_corpus(a.corpora[i])});
  }
  save_calibration(sample_calibration(corpora, a.fraction, a.seed, a.biased), a.out);
}

struct PretrainArgs {
  std::string corpus, model_id, out, metrics;
  std::uint64_t seed = 0;
  TransformerConfig model;
  TrainConfig train;
};

void pretrain_cmd(PretrainArgs a) {
  std::size_t vocab_size = 0;
  const TokenSequences seqs = load_corpus(a.corpus, &vocab_size);
  if (vocab_size != kSharedVocabSize) throw std::invalid_argument("corpus vocabulary is not the shared 256 tokens");
  a.model.vocab_size = vocab_size;
  a.train.seed = a.seed;
  auto r = pretrain_dense<float>(a.model, seqs, a.train, a.seed, a.model_id, shared_vocab());
  save_checkpoint(r.model, a.out);
  save_metrics_csv(r.log, 0, a.metrics.empty() ? a.out + ".metrics.csv" : a.metrics);
}

struct MergeArgs {
  std::vector<std::string> models;
  std::vector<double> weights;
  std::string out, recipe;
  std::size_t anchor_index = 0;
  bool anchor_set = false;
  bool naive_attention = false, naive_embedding = false;
};

void merge_cmd(const MergeArgs& a) {
  const auto models = load_models(a.models);
  MergeRecipe recipe = a.recipe.empty() ? MergeRecipe::uniform(models.size()) : load_recipe(a.recipe);
  if (a.anchor_set) recipe.anchor_index = a.anchor_index;
  if (!a.weights.empty()) recipe.weights = a.weights;
  if (a.naive_attention) recipe.attention_strategy = AttentionStrategy::linear;
  if (a.naive_embedding) recipe.embedding_strategy = EmbeddingStrategy::linear;
  save_checkpoint(build_backbone<float>(models, recipe), a.out);
}

struct AlignArgs {
  std::string anchor, target, calib, out;
  bool normalize = false;
};

void align_cmd(const AlignArgs& a) {
  const auto anchor = load_dense<float>(a.anchor);
  const auto target = load_dense<float>(a.target);
  const TokenSequences calib = load_corpus(a.calib);
  auto res = align_expert(anchor, target, calib, AlignOptions{a.normalize});
  PermutationFile f{target.model_id, anchor.model_id, std::move(res.perms), std::move(res.costs)};
  std::string out = a.out;
  if (out.empty()) out = fs::path(a.target).lexically_normal().string() + ".perm.json";
  save_permutation_file(f, out);
}

struct AssembleArgs {
  std::string backbone, out;
  std::vector<std::string> models, perms;
  std::uint64_t seed = 0;
  std::size_t k = 2;
  bool no_renormalize = false;
};

void assemble_cmd(const AssembleArgs& a) {
  const auto backbone = load_backbone<float>(a.backbone);
  const auto models = load_models(a.models);
  if (!a.perms.empty() && a.perms.size() != models.size()) {
    throw std::invalid_argument("--perms needs one file per model (" + std::to_string(models.size()) + "), got " +
                                std::to_string(a.perms.size()));
  }
  std::vector<std::vector<FfnWeights<float>>> experts(models.size());
  std::vector<std::string> ids, perm_ids;
  for (std::size_t i = 0; i < models.size(); ++i) {
    const auto& m = models[i];
    if (!architecture_compatible(m.config, backbone.config)) {
      throw std::invalid_argument("model " + m.model_id + " does not match the backbone architecture");
    }
    ids.push_back(m.model_id);
    if (a.perms.empty()) {
      for (const auto& L : m.layers) experts[i].push_back(L.ffn);
      continue;
    }
    const PermutationFile pf = load_permutation_file(a.perms[i]);
    if (pf.model_id != m.model_id) {
      throw std::invalid_argument("permutation file " + a.perms[i] + " is for " + pf.model_id + ", not " + m.model_id);
    }
    if (pf.layers.size() != m.layers.size()) {
      throw std::invalid_argument("permutation file " + a.perms[i] + " has the wrong layer count");
    }
    for (std::size_t l = 0; l < m.layers.size(); ++l) experts[i].push_back(remap_ffn(m.layers[l].ffn, pf.layers[l]));
    perm_ids.push_back(a.perms[i]);
  }
  RoutingConfig routing;
  routing.k = a.k;
  routing.renormalize = !a.no_renormalize;
  save_checkpoint(assemble_moe(backbone, experts, ids, a.seed, routing, perm_ids), a.out);
}

struct TrainRouterArgs {
  std::string moe, calib, out, metrics;
  std::uint64_t seed = 0;
  TrainConfig train;
};

void train_router_cmd(TrainRouterArgs a) {
  const auto moe = load_moe<float>(a.moe);
  const TokenSequences calib = load_corpus(a.calib);
  a.train.seed = a.seed;
  a.train.trainable = TrainableSet::router_only;
  auto r = train_router(moe, calib, a.train);
  save_checkpoint(r.moe, a.out);
  save_metrics_csv(r.log, moe.n_experts(), a.metrics.empty() ? a.out + ".metrics.csv" : a.metrics);
}

struct EvalArgs {
  std::string model, out, trace;
  std::vector<std::string> corpora;
};

void eval_cmd(const EvalArgs& a) {
  const CheckpointManifest manifest = read_manifest(a.model);
  if (manifest.kind == CheckpointKind::backbone) throw std::invalid_argument("a backbone has no FFN and cannot be evaluated");
  if (!a.trace.empty() && manifest.kind != CheckpointKind::moe) {
    throw std::invalid_argument("--trace needs an MoE checkpoint");
  }
  std::optional<DenseCheckpoint<float>> dense;
  std::optional<MoECheckpoint<float>> moe;
  if (manifest.kind == CheckpointKind::dense) {
    dense = load_dense<float>(a.model);
  } else {
    moe = load_moe<float>(a.model);
  }

  nlohmann::json report;
  report["model"] = a.model;
  report["kind"] = to_string(manifest.kind);
  TokenSequences all;
  std::vector<TensorF> all_logits;
  std::vector<RoutingRecord> trace;
  for (const auto& path : a.corpora) {
    const TokenSequences seqs = load_corpus(path);
    std::vector<TensorF> logits;
    for (const auto& s : seqs) logits.push_back(dense ? forward(*dense, s) : moe_forward(*moe, s, &trace));
    report["perplexity"][fs::path(path).filename().string()] = perplexity_from_logits<float>(logits, seqs);
    all.insert(all.end(), seqs.begin(), seqs.end());
    all_logits.insert(all_logits.end(), logits.begin(), logits.end());
  }
  report["perplexity"]["mixed"] = perplexity_from_logits<float>(all_logits, all);
  if (moe) report["usage"] = to_json(expert_usage(trace, moe->n_experts(), moe->routing.k));
  write_json(report, a.out);
  if (!a.trace.empty()) save_routing_trace(trace, a.trace);
}

struct CkaArgs {
  std::vector<std::string> models;
  std::string naive, aligned, calib, out, csv;
  std::vector<std::size_t> layers;
};

void cka_cmd(const CkaArgs& a) {
  const auto sources = load_models(a.models);
  const auto naive = load_moe<float>(a.naive);
  const auto aligned = load_moe<float>(a.aligned);
  const TokenSequences calib = load_corpus(a.calib);
  std::set<std::size_t> layers(a.layers.begin(), a.layers.end());
  if (layers.empty()) layers.insert(aligned.config().n_layers - 1);
  const auto reports = expert_cka_study<float>(sources, naive, aligned, calib, layers);
  nlohmann::json j = nlohmann::json::array();
  for (const auto& r : reports) j.push_back(to_json(r));
  write_json(j, a.out);
  if (!a.csv.empty()) write_text(cka_csv(reports), a.csv);
}

void pipeline_cmd(const PipelineRunConfig& cfg) {
  cfg.validate();
  if (!cfg.quiet) std::cerr << "[pipeline] stage 0: corpora and " << cfg.n_experts << " dense models\n";
  const Stage0Result s0 = run_stage0(cfg);
  if (!cfg.quiet) std::cerr << "[pipeline] stage 1-2: backbone, alignment, router\n";
  const VariantResult v = run_variant(cfg, s0);
  write_pipeline_outputs(cfg, s0, v);
  if (!cfg.quiet) std::cerr << "[pipeline] wrote " << cfg.out_dir << '\n';
}

}  // namespace

int run(int argc, const char* const* argv) {
  CLI::App app{"Training-free upcycling of dense specialists into a mixture of experts"};
  app.require_subcommand(1);

  GenCorpusArgs gc;
  auto* gen = app.add_subcommand("gen-corpus", "Generate a synthetic domain corpus");
  gen->add_option("--domain", gc.domain, "general, math, code or science")->required();
  gen->add_option("--seed", gc.seed)->capture_default_str();
  gen->add_option("--n-sequences", gc.n_sequences)->capture_default_str();
  gen->add_option("--seq-len", gc.seq_len)->capture_default_str();
  gen->add_option("--out", gc.out)->required();

  SampleCalibArgs sc;
  auto* samp = app.add_subcommand("sample-calib", "Draw a calibration set from domain corpora");
  samp->add_option("--corpora", sc.corpora)->required()->check(CLI::ExistingFile);
  samp->add_option("--domains", sc.domains, "domain of each corpus; default general, math, code, science");
  samp->add_option("--fraction", sc.fraction)->capture_default_str();
  samp->add_option("--seed", sc.seed)->capture_default_str();
  samp->add_flag("--biased", sc.biased, "sample from the first corpus only");
  samp->add_option("--out", sc.out)->required();

  PretrainArgs pa;
  pa.model.vocab_size = kSharedVocabSize;
  pa.train = PipelineRunConfig::defaults().pretrain;
  auto* pre = app.add_subcommand("pretrain", "Train a dense specialist on one corpus");
  pre->add_option("--corpus", pa.corpus)->required()->check(CLI::ExistingFile);
  pre->add_option("--model-id", pa.model_id)->required();
  pre->add_option("--seed", pa.seed)->capture_default_str();
  pre->add_option("--out", pa.out)->required();
  pre->add_option("--metrics", pa.metrics, "default: <out>.metrics.csv");
  pre->add_option("--d-model", pa.model.d_model)->capture_default_str();
  pre->add_option("--n-layers", pa.model.n_layers)->capture_default_str();
  pre->add_option("--n-heads", pa.model.n_heads)->capture_default_str();
  pre->add_option("--d-ffn", pa.model.d_ffn)->capture_default_str();
  pre->add_option("--context", pa.model.max_seq_len, "maximum sequence length of the model")->capture_default_str();
  add_train_options(pre, pa.train);

  MergeArgs ma;
  auto* merge = app.add_subcommand("merge-backbone", "Fuse the non-FFN weights of dense models");
  merge->add_option("--models", ma.models)->required()->check(CLI::ExistingDirectory);
  merge->add_option("--out", ma.out)->required();
  merge->add_option("--recipe", ma.recipe)->check(CLI::ExistingFile);
  auto* anchor_opt = merge->add_option("--anchor-index", ma.anchor_index);
  merge->add_option("--weights", ma.weights);
  merge->add_flag("--naive-attention", ma.naive_attention, "linear attention merge instead of SLERP");
  merge->add_flag("--naive-embedding", ma.naive_embedding, "linear embedding merge instead of selective");

  AlignArgs aa;
  auto* align = app.add_subcommand("align-experts", "Permute a target's FFN neurons onto the anchor");
  align->add_option("--anchor", aa.anchor)->required()->check(CLI::ExistingDirectory);
  align->add_option("--target", aa.target)->required()->check(CLI::ExistingDirectory);
  align->add_option("--calib", aa.calib)->required()->check(CLI::ExistingFile);
  align->add_option("--out", aa.out, "default: <target>.perm.json");
  align->add_flag("--normalize-activations", aa.normalize);

  AssembleArgs asm_args;
  auto* assemble = app.add_subcommand("assemble-moe", "Install expert FFNs and a fresh router on a backbone");
  assemble->add_option("--backbone", asm_args.backbone)->required()->check(CLI::ExistingDirectory);
  assemble->add_option("--models", asm_args.models)->required()->check(CLI::ExistingDirectory);
  assemble->add_option("--perms", asm_args.perms, "one permutation file per model")->check(CLI::ExistingFile);
  assemble->add_option("--seed", asm_args.seed)->capture_default_str();
  assemble->add_option("--k", asm_args.k)->capture_default_str();
  assemble->add_flag("--no-renormalize", asm_args.no_renormalize);
  assemble->add_option("--out", asm_args.out)->required();

  TrainRouterArgs ta;
  auto* tr = app.add_subcommand("train-router", "Train only the router on a calibration set");
  tr->add_option("--moe", ta.moe)->required()->check(CLI::ExistingDirectory);
  tr->add_option("--calib", ta.calib)->required()->check(CLI::ExistingFile);
  tr->add_option("--out", ta.out)->required();
  tr->add_option("--metrics", ta.metrics, "default: <out>.metrics.csv");
  tr->add_option("--seed", ta.seed)->capture_default_str();
  tr->add_option("--lambda-bal", ta.train.lambda_bal)->capture_default_str();
  add_train_options(tr, ta.train);

  EvalArgs ea;
  auto* ev = app.add_subcommand("eval", "Perplexity and expert usage on held-out corpora");
  ev->add_option("--model", ea.model)->required()->check(CLI::ExistingDirectory);
  ev->add_option("--corpus", ea.corpora)->required()->check(CLI::ExistingFile);
  ev->add_option("--out", ea.out)->required();
  ev->add_option("--trace", ea.trace, "write the routing trace as NDJSON");

  CkaArgs ca;
  auto* cka = app.add_subcommand("cka", "Pairwise expert CKA for source, naive and aligned models");
  cka->add_option("--models", ca.models)->required()->check(CLI::ExistingDirectory);
  cka->add_option("--naive", ca.naive)->required()->check(CLI::ExistingDirectory);
  cka->add_option("--aligned", ca.aligned)->required()->check(CLI::ExistingDirectory);
  cka->add_option("--calib", ca.calib)->required()->check(CLI::ExistingFile);
  cka->add_option("--layer", ca.layers, "default: last layer");
  cka->add_option("--out", ca.out)->required();
  cka->add_option("--csv", ca.csv);

  PipelineRunConfig pc = PipelineRunConfig::defaults();
  auto* pipe = app.add_subcommand("pipeline", "Run every stage end to end");
  pipe->add_option("--out", pc.out_dir)->required();
  pipe->add_option("--seed", pc.seed)->capture_default_str();
  pipe->add_option("--experts", pc.n_experts, "1-4, added in the order general, math, code, science")
      ->capture_default_str();
  pipe->add_option("--anchor-index", pc.anchor_index)->capture_default_str();
  pipe->add_option("--n-sequences", pc.n_sequences)->capture_default_str();
  pipe->add_option("--heldout-sequences", pc.heldout_sequences)->capture_default_str();
  pipe->add_option("--seq-len", pc.seq_len)->capture_default_str();
  pipe->add_option("--calib-fraction", pc.calib_fraction)->capture_default_str();
  pipe->add_option("--pretrain-epochs", pc.pretrain.epochs)->capture_default_str();
  pipe->add_option("--pretrain-lr", pc.pretrain.learning_rate)->capture_default_str();
  pipe->add_option("--router-epochs", pc.router.epochs)->capture_default_str();
  pipe->add_option("--router-lr", pc.router.learning_rate)->capture_default_str();
  pipe->add_option("--lambda-bal", pc.router.lambda_bal)->capture_default_str();
  pipe->add_option("--k", pc.routing.k)->capture_default_str();
  pipe->add_option("--cka-layer", pc.cka_layers);
  pipe->add_flag("--no-alignment", pc.ablation.no_alignment);
  pipe->add_flag("--naive-attention", pc.ablation.naive_attention);
  pipe->add_flag("--naive-embedding", pc.ablation.naive_embedding);
  pipe->add_flag("--biased", pc.ablation.biased_calibration);
  pipe->add_flag("--normalize-activations", pc.normalize_activations);
  pipe->add_flag("--csv", pc.write_csv, "also write cka.csv and usage.csv");
  pipe->add_flag("--quiet", pc.quiet);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  try {
    if (*gen) gen_corpus_cmd(gc);
    else if (*samp) sample_calib_cmd(sc);
    else if (*pre) pretrain_cmd(pa);
    else if (*merge) {
      ma.anchor_set = anchor_opt->count() > 0;
      merge_cmd(ma);
    } else if (*align) align_cmd(aa);
    else if (*assemble) assemble_cmd(asm_args);
    else if (*tr) train_router_cmd(ta);
    else if (*ev) eval_cmd(ea);
    else if (*cka) cka_cmd(ca);
    else if (*pipe) pipeline_cmd(pc);
    return 0;
  } catch (const CheckpointError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return e.code() == CheckpointErrorCode::io ? 2 : 1;
  } catch (const std::invalid_argument& e) {  // includes ShapeError
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::out_of_range& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
}

int run(const std::vector<std::string>& args) {
  std::vector<const char*> argv;
  argv.push_back("upcycle");
  for (const auto& a : args) argv.push_back(a.c_str());
  return run(static_cast<int>(argv.size()), argv.data());
}

}  // namespace upcycle::cli
