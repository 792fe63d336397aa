#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <stdexcept>

#include "upcycle/checkpoint_io.hpp"
#include "upcycle/cli.hpp"
#include "upcycle/random.hpp"

namespace upcycle {

namespace fs = std::filesystem;

PipelineRunConfig PipelineRunConfig::defaults() {
  PipelineRunConfig c;
  c.model.vocab_size = kSharedVocabSize;
  c.pretrain.learning_rate = 3e-3;
  c.pretrain.epochs = 4;
  c.pretrain.batch_size = 8;
  c.pretrain.lambda_bal = 0.0;
  c.pretrain.trainable = TrainableSet::all;
  c.router.trainable = TrainableSet::router_only;
  return c;
}

void PipelineRunConfig::validate() const {
  if (n_experts < 1 || n_experts > 4) {
    throw std::invalid_argument("--experts must be between 1 and 4, got " + std::to_string(n_experts));
  }
  if (anchor_index >= n_experts) {
    throw std::invalid_argument("--anchor-index " + std::to_string(anchor_index) + " must be below --experts " +
                                std::to_string(n_experts));
  }
  if (n_sequences < 1 || heldout_sequences < 1) throw std::invalid_argument("corpus sizes must be >= 1");
  if (seq_len < 2 || seq_len > model.max_seq_len) {
    throw std::invalid_argument("--seq-len must be in [2, " + std::to_string(model.max_seq_len) + "]");
  }
  if (model.vocab_size != kSharedVocabSize) throw std::invalid_argument("model vocab must be the shared 256 tokens");
  model.validate();
  pretrain.validate();
  router.validate();
  if (pretrain.trainable != TrainableSet::all) throw std::invalid_argument("pretraining must train all parameters");
  if (router.trainable != TrainableSet::router_only) throw std::invalid_argument("router stage must be router_only");
  if (routing.k < 1) throw std::invalid_argument("--k must be >= 1");
  for (std::size_t l : cka_layers) {
    if (l >= model.n_layers) throw std::invalid_argument("--cka-layer " + std::to_string(l) + " outside the model");
  }
}

nlohmann::json to_json(const TrainConfig& c) {
  return {{"learning_rate", c.learning_rate}, {"epochs", c.epochs},
          {"batch_size", c.batch_size},       {"max_seq_len", c.max_seq_len},
          {"lambda_bal", c.lambda_bal},       {"max_grad_norm", c.max_grad_norm},
          {"adam_beta1", c.adam_beta1},       {"adam_beta2", c.adam_beta2},
          {"adam_eps", c.adam_eps},           {"weight_decay", c.weight_decay},
          {"seed", c.seed},                   {"trainable", to_string(c.trainable)}};
}

nlohmann::json to_json(const PipelineRunConfig& c) {
  nlohmann::json j;
  j["seed"] = c.seed;
  j["n_experts"] = c.n_experts;
  j["anchor_index"] = c.anchor_index;
  j["n_sequences"] = c.n_sequences;
  j["heldout_sequences"] = c.heldout_sequences;
  j["seq_len"] = c.seq_len;
  j["calib_fraction"] = c.calib_fraction;
  j["normalize_activations"] = c.normalize_activations;
  j["variant"] = {{"no_alignment", c.ablation.no_alignment},
                  {"naive_attention", c.ablation.naive_attention},
                  {"naive_embedding", c.ablation.naive_embedding},
                  {"biased_calibration", c.ablation.biased_calibration}};
  j["model"] = to_json(c.model);
  j["pretrain"] = to_json(c.pretrain);
  j["router"] = to_json(c.router);
  j["routing"] = {{"k", c.routing.k}, {"renormalize", c.routing.renormalize}};
  j["cka_layers"] = c.cka_layers;
  j["threads"] = 1;
  return j;
}

namespace {

std::uint64_t derive(std::uint64_t seed, std::uint64_t stream) { return Rng::mix(seed ^ Rng::mix(stream)); }

void say(const PipelineRunConfig& cfg, const std::string& msg) {
  if (!cfg.quiet) std::cerr << "[pipeline] " << msg << '\n';
}

std::string model_id(std::size_t i, Domain d) { return "m" + std::to_string(i + 1) + "_" + to_string(d); }

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

// Perplexity per held-out domain slice, plus the whole mixed set.
nlohmann::json perplexity_table(const std::vector<TensorF>& logits, const TokenSequences& seqs,
                                const std::vector<Corpus>& heldout) {
  nlohmann::json j;
  std::size_t begin = 0;
  for (const auto& c : heldout) {
    const std::size_t n = c.sequences.size();
    TokenSequences part(seqs.begin() + static_cast<std::ptrdiff_t>(begin),
                        seqs.begin() + static_cast<std::ptrdiff_t>(begin + n));
    j[to_string(c.domain)] =
        perplexity_from_logits<float>(std::span(logits).subspan(begin, n), part);
    begin += n;
  }
  j["mixed"] = perplexity_from_logits<float>(logits, seqs);
  return j;
}

}  // namespace

TokenSequences mixed_heldout(const Stage0Result& stage0) {
  TokenSequences out;
  for (const auto& c : stage0.heldout) out.insert(out.end(), c.sequences.begin(), c.sequences.end());
  return out;
}

Stage0Result run_stage0(const PipelineRunConfig& cfg) {
  cfg.validate();
  Stage0Result s;
  const auto domains = all_domains();
  for (std::size_t i = 0; i < cfg.n_experts; ++i) {
    s.train.push_back(gen_corpus(domains[i], derive(cfg.seed, 0x100 + i), cfg.n_sequences, cfg.seq_len));
    s.heldout.push_back(gen_corpus(domains[i], derive(cfg.seed, 0x200 + i), cfg.heldout_sequences, cfg.seq_len));
  }
  for (std::size_t i = 0; i < cfg.n_experts; ++i) {
    TrainConfig tc = cfg.pretrain;
    const std::uint64_t seed = derive(cfg.seed, 0x300 + i);
    tc.seed = seed;
    auto r = pretrain_dense<float>(cfg.model, s.train[i].sequences, tc, seed, model_id(i, domains[i]), shared_vocab());
    say(cfg, "pretrained " + r.model.model_id + ": epoch loss " + fmt(r.log.epochs.front().lm_loss) + " -> " +
                 fmt(r.log.epochs.back().lm_loss));
    s.models.push_back(std::move(r.model));
    s.logs.push_back(std::move(r.log));
  }
  return s;
}

VariantResult run_variant(const PipelineRunConfig& cfg, const Stage0Result& stage0) {
  cfg.validate();
  const std::size_t n = cfg.n_experts;
  if (stage0.models.size() != n) throw std::invalid_argument("run_variant: stage 0 has a different expert count");
  const auto& models = stage0.models;
  VariantResult v;

  v.calib = sample_calibration(stage0.train, cfg.calib_fraction, derive(cfg.seed, 0x400),
                               cfg.ablation.biased_calibration);
  say(cfg, "calibration set: " + std::to_string(v.calib.sequences.size()) + " sequences");

  MergeRecipe recipe = MergeRecipe::uniform(n);
  recipe.anchor_index = cfg.anchor_index;
  recipe.attention_strategy = cfg.ablation.naive_attention ? AttentionStrategy::linear : AttentionStrategy::slerp;
  recipe.embedding_strategy = cfg.ablation.naive_embedding ? EmbeddingStrategy::linear : EmbeddingStrategy::selective;
  v.backbone = build_backbone<float>(models, recipe);

  // Alignment is always computed: the CKA study needs the aligned experts even
  // when the variant under test installs the raw ones.
  const auto anchor_acts = collect_activations(models[cfg.anchor_index], v.calib.sequences);
  std::vector<std::vector<FfnWeights<float>>> raw(n), aligned(n);
  std::vector<std::string> ids, perm_ids;
  for (std::size_t i = 0; i < n; ++i) {
    ids.push_back(models[i].model_id);
    for (const auto& L : models[i].layers) raw[i].push_back(L.ffn);
    AlignOptions opts{cfg.normalize_activations};
    auto res = align_expert(anchor_acts, models[i], v.calib.sequences, opts);
    aligned[i] = std::move(res.ffns);
    v.perms.push_back({models[i].model_id, models[cfg.anchor_index].model_id, std::move(res.perms),
                       std::move(res.costs)});
    perm_ids.push_back("perms/" + models[i].model_id + ".perm.json");
  }

  RoutingConfig routing = cfg.routing;
  routing.k = std::min(routing.k, n);
  const std::uint64_t router_seed = derive(cfg.seed, 0x500);
  v.initial = assemble_moe(v.backbone, cfg.ablation.no_alignment ? raw : aligned, ids, router_seed, routing,
                           cfg.ablation.no_alignment ? std::vector<std::string>{} : perm_ids);

  TrainConfig rc = cfg.router;
  rc.seed = derive(cfg.seed, 0x600);
  auto trained = train_router(v.initial, v.calib.sequences, rc);
  v.trained = std::move(trained.moe);
  v.router_log = std::move(trained.log);
  say(cfg, "router trained: total loss " + fmt(v.router_log.epochs.front().total_loss) + " -> " +
               fmt(v.router_log.epochs.back().total_loss));

  // Held-out evaluation.
  const TokenSequences mixed = mixed_heldout(stage0);
  std::vector<TensorF> moe_logits;
  for (const auto& seq : mixed) moe_logits.push_back(moe_forward(v.trained, seq, &v.heldout_trace));
  nlohmann::json ppl;
  ppl["moe"] = perplexity_table(moe_logits, mixed, stage0.heldout);
  v.mixed_perplexity = ppl["moe"]["mixed"].get<double>();
  for (const auto& m : models) {
    std::vector<TensorF> logits;
    for (const auto& seq : mixed) logits.push_back(forward(m, seq));
    ppl["sources"][m.model_id] = perplexity_table(logits, mixed, stage0.heldout);
  }
  v.usage = expert_usage(v.heldout_trace, n, routing.k);
  say(cfg, "mixed held-out perplexity " + fmt(v.mixed_perplexity));

  if (n >= 2) {
    MergeRecipe naive = recipe;
    naive.attention_strategy = AttentionStrategy::linear;
    naive.embedding_strategy = EmbeddingStrategy::linear;
    const auto naive_backbone = build_backbone<float>(models, naive);
    const auto naive_moe = assemble_moe(naive_backbone, raw, ids, router_seed, routing);
    const auto aligned_moe = assemble_moe(v.backbone, aligned, ids, router_seed, routing, perm_ids);
    std::set<std::size_t> layers(cfg.cka_layers.begin(), cfg.cka_layers.end());
    if (layers.empty()) layers.insert(cfg.model.n_layers - 1);
    v.cka = expert_cka_study<float>(models, naive_moe, aligned_moe, v.calib.sequences, layers);
  }

  nlohmann::json& r = v.report;
  r["config"] = to_json(cfg);
  r["perplexity"] = ppl;
  r["usage"] = to_json(v.usage);
  r["calibration"] = {{"n_sequences", v.calib.sequences.size()},
                      {"fraction", v.calib.sampling_fraction},
                      {"biased", v.calib.biased},
                      {"seed", v.calib.seed}};
  for (std::size_t i = 0; i < n; ++i) {
    nlohmann::json p;
    p["model_id"] = models[i].model_id;
    p["domain"] = to_string(stage0.train[i].domain);
    p["first_epoch_loss"] = stage0.logs[i].epochs.front().lm_loss;
    p["final_epoch_loss"] = stage0.logs[i].epochs.back().lm_loss;
    r["pretrain"].push_back(p);
  }
  for (const auto& pf : v.perms) {
    nlohmann::json a;
    a["model_id"] = pf.model_id;
    for (const auto& c : pf.costs) {
      a["layers"].push_back({{"layer", c.layer}, {"identity_cost", c.identity_cost}, {"assigned_cost", c.assigned_cost}});
    }
    r["alignment"].push_back(a);
  }
  r["experts_installed"] = cfg.ablation.no_alignment ? "unaligned" : "aligned";
  for (const auto& e : v.router_log.epochs) {
    r["router_training"].push_back(
        {{"epoch", e.epoch}, {"lm_loss", e.lm_loss}, {"bal_loss", e.bal_loss}, {"total_loss", e.total_loss}, {"usage", e.usage}});
  }
  r["cka"] = nlohmann::json::array();
  for (const auto& c : v.cka) r["cka"].push_back(to_json(c));
  return v;
}

void write_pipeline_outputs(const PipelineRunConfig& cfg, const Stage0Result& stage0, const VariantResult& v) {
  const fs::path out(cfg.out_dir);
  for (const char* sub : {"corpora", "models", "perms"}) fs::create_directories(out / sub);
  for (std::size_t i = 0; i < stage0.train.size(); ++i) {
    const std::string d = to_string(stage0.train[i].domain);
    save_corpus(stage0.train[i].sequences, (out / "corpora" / (d + ".train.bin")).string());
    save_corpus(stage0.heldout[i].sequences, (out / "corpora" / (d + ".heldout.bin")).string());
  }
  for (std::size_t i = 0; i < stage0.models.size(); ++i) {
    const auto& m = stage0.models[i];
    save_checkpoint(m, (out / "models" / m.model_id).string());
    save_metrics_csv(stage0.logs[i], 0, (out / "models" / (m.model_id + ".metrics.csv")).string());
  }
  save_calibration(v.calib, (out / "calib.bin").string());
  save_checkpoint(v.backbone, (out / "backbone").string());
  for (const auto& p : v.perms) save_permutation_file(p, (out / "perms" / (p.model_id + ".perm.json")).string());
  save_checkpoint(v.initial, (out / "moe_init").string());
  save_checkpoint(v.trained, (out / "moe").string());
  save_metrics_csv(v.router_log, v.trained.n_experts(), (out / "router_metrics.csv").string());
  save_routing_trace(v.heldout_trace, (out / "routing_trace.ndjson").string());
  {
    std::ofstream f(out / "report.json", std::ios::binary);
    f << v.report.dump(2) << '\n';
    if (!f) throw std::runtime_error("cannot write " + (out / "report.json").string());
  }
  if (cfg.write_csv) {
    std::ofstream f(out / "cka.csv", std::ios::binary);
    f << cka_csv(v.cka);
    std::ofstream u(out / "usage.csv", std::ios::binary);
    u << "expert,fraction,gate_mass\n";
    char buf[80];
    for (std::size_t i = 0; i < v.usage.fraction.size(); ++i) {
      std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g\n", i, v.usage.fraction[i], v.usage.gate_mass[i]);
      u << buf;
    }
  }
}

}  // namespace upcycle
