#include "upcycle/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

#include "upcycle/random.hpp"

namespace upcycle {

std::string to_string(TrainableSet s) { return s == TrainableSet::all ? "all" : "router_only"; }

TrainableSet parse_trainable(const std::string& s) {
  if (s == "all") return TrainableSet::all;
  if (s == "router_only") return TrainableSet::router_only;
  throw std::invalid_argument("unknown trainable set '" + s + "' (expected router_only or all)");
}

void TrainConfig::validate() const {
  if (!(learning_rate > 0)) throw std::invalid_argument("train config: learning_rate must be > 0");
  if (!(lambda_bal >= 0)) throw std::invalid_argument("train config: lambda_bal must be >= 0");
  if (!(max_grad_norm > 0)) throw std::invalid_argument("train config: max_grad_norm must be > 0");
  if (batch_size == 0) throw std::invalid_argument("train config: batch_size must be >= 1");
  if (max_seq_len < 2) throw std::invalid_argument("train config: max_seq_len must be >= 2");
  if (!(adam_beta1 >= 0 && adam_beta1 < 1 && adam_beta2 >= 0 && adam_beta2 < 1 && adam_eps > 0)) {
    throw std::invalid_argument("train config: adam parameters out of range");
  }
  if (!(weight_decay >= 0)) throw std::invalid_argument("train config: weight_decay must be >= 0");
}

TrainableFilter trainable_filter(TrainableSet set) {
  if (set == TrainableSet::all) return [](const std::string&) { return true; };
  return [](const std::string& name) {
    const std::string suffix = ".router";
    return name.size() >= suffix.size() && name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0;
  };
}

std::vector<int> shift_targets(std::span<const int> tokens) {
  if (tokens.size() < 2) throw std::invalid_argument("need at least two tokens for next-token targets");
  return std::vector<int>(tokens.begin() + 1, tokens.end());
}

template <class T>
double lm_loss(const Tensor<T>& logits, std::span<const int> targets) {
  require_rank(logits.shape(), 2, "lm_loss");
  if (targets.empty() || (targets.size() != logits.rows() && targets.size() + 1 != logits.rows())) {
    throw ShapeError("lm_loss: " + std::to_string(targets.size()) + " targets for " + std::to_string(logits.rows()) +
                     " positions");
  }
  Graph<T> g;
  return static_cast<double>(g.value(g.cross_entropy(g.constant(logits), targets))[0]);
}

namespace {

struct LayerTally {
  std::vector<double> counts, prob_sums;
  std::size_t tokens = 0;
};

std::map<std::size_t, LayerTally> tally(std::span<const RoutingRecord> trace, std::size_t n, std::size_t k,
                                        bool need_probs) {
  if (trace.empty()) throw std::invalid_argument("routing trace is empty");
  if (k < 1 || k > n) throw std::invalid_argument("routing trace: k out of range");
  std::map<std::size_t, LayerTally> layers;
  for (const auto& r : trace) {
    auto& L = layers[r.layer];
    if (L.counts.empty()) {
      L.counts.assign(n, 0.0);
      L.prob_sums.assign(n, 0.0);
    }
    if (r.indices.size() != k) throw std::invalid_argument("routing trace: record with wrong number of experts");
    for (std::size_t e : r.indices) {
      if (e >= n) throw std::out_of_range("routing trace: expert index out of range");
      L.counts[e] += 1.0;
    }
    if (need_probs) {
      if (r.probs.size() != n) throw std::invalid_argument("routing trace: record lacks the router distribution");
      for (std::size_t i = 0; i < n; ++i) L.prob_sums[i] += r.probs[i];
    }
    ++L.tokens;
  }
  return layers;
}

}  // namespace

double load_balance_loss(std::span<const RoutingRecord> trace, std::size_t n_experts, std::size_t k) {
  const auto layers = tally(trace, n_experts, k, true);
  double total = 0.0;
  for (const auto& [l, L] : layers) {
    const double tokens = static_cast<double>(L.tokens);
    double s = 0.0;
    for (std::size_t i = 0; i < n_experts; ++i) {
      s += (L.counts[i] / (static_cast<double>(k) * tokens)) * (L.prob_sums[i] / tokens);
    }
    total += static_cast<double>(n_experts) * s;
  }
  return total / static_cast<double>(layers.size());
}

std::vector<double> usage_fractions(std::span<const RoutingRecord> trace, std::size_t n_experts, std::size_t k) {
  const auto layers = tally(trace, n_experts, k, false);
  std::vector<double> f(n_experts, 0.0);
  for (const auto& [l, L] : layers) {
    for (std::size_t i = 0; i < n_experts; ++i) {
      f[i] += L.counts[i] / (static_cast<double>(k) * static_cast<double>(L.tokens));
    }
  }
  for (auto& v : f) v /= static_cast<double>(layers.size());
  return f;
}

template <class T>
GradientStore<T> backward(Graph<T>& g, Var loss) {
  g.backward(loss);
  return g.parameter_gradients();
}

template <class T>
double global_norm(const GradientStore<T>& grads) {
  double s = 0.0;
  for (const auto& [name, g] : grads)
    for (T x : g.data()) s += static_cast<double>(x) * static_cast<double>(x);
  return std::sqrt(s);
}

template <class T>
GradientStore<T> clip_global_norm(GradientStore<T> grads, double max_norm, double* norm_before) {
  if (!(max_norm > 0)) throw std::invalid_argument("clip_global_norm: max_norm must be > 0");
  const double norm = global_norm(grads);
  if (norm_before) *norm_before = norm;
  if (norm > max_norm) {
    const double c = max_norm / norm;
    for (auto& [name, g] : grads)
      for (T& x : g.data()) x = static_cast<T>(static_cast<double>(x) * c);
  }
  return grads;
}

template <class T>
void AdamW<T>::step(const std::map<std::string, Tensor<T>*>& params, const GradientStore<T>& grads) {
  ++t_;
  const double b1 = cfg_.adam_beta1, b2 = cfg_.adam_beta2;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  for (const auto& [name, g] : grads) {
    auto it = params.find(name);
    if (it == params.end()) throw std::invalid_argument("AdamW: gradient for unknown parameter '" + name + "'");
    Tensor<T>& p = *it->second;
    require_same_shape(p.shape(), g.shape(), "AdamW");
    auto& m = m_[name];
    auto& v = v_[name];
    if (m.empty()) {
      m.assign(p.size(), 0.0);
      v.assign(p.size(), 0.0);
    }
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double gi = static_cast<double>(g[i]);
      m[i] = b1 * m[i] + (1.0 - b1) * gi;
      v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
      const double update = (m[i] / bc1) / (std::sqrt(v[i] / bc2) + cfg_.adam_eps);
      const double pi = static_cast<double>(p[i]);
      p[i] = static_cast<T>(pi - cfg_.learning_rate * (update + cfg_.weight_decay * pi));
    }
  }
}

template <class T>
Var moe_batch_loss(Graph<T>& g, const MoEVars<T>& vars, const MoECheckpoint<T>& moe, const TokenSequences& batch,
                   double lambda_bal, BatchStats* stats) {
  if (batch.empty()) throw std::invalid_argument("moe_batch_loss: empty batch");
  const std::size_t n = moe.n_experts(), k = moe.routing.k, n_layers = moe.layers.size();
  std::vector<Var> ce;
  std::vector<T> ce_w;
  std::vector<std::vector<LayerRouting>> routes(batch.size());
  std::size_t n_targets = 0, n_tokens = 0;
  for (const auto& seq : batch) n_targets += seq.size() - (seq.empty() ? 0 : 1);
  for (std::size_t s = 0; s < batch.size(); ++s) {
    const auto targets = shift_targets(batch[s]);
    Var logits = moe_logits(g, vars, moe.config(), moe.routing, batch[s], &routes[s]);
    ce.push_back(g.cross_entropy(logits, targets));
    ce_w.push_back(static_cast<T>(static_cast<double>(targets.size()) / static_cast<double>(n_targets)));
    n_tokens += batch[s].size();
  }
  Var lm = g.linear_combination(ce, ce_w);

  std::vector<Var> bal_terms;
  std::vector<T> bal_w;
  std::vector<double> usage(n, 0.0);
  for (std::size_t l = 0; l < n_layers; ++l) {
    std::vector<double> counts(n, 0.0);
    for (const auto& r : routes)
      for (const auto& sel : r[l].dispatch.selected)
        for (std::size_t e : sel) counts[e] += 1.0;
    std::vector<T> w(n);
    for (std::size_t i = 0; i < n; ++i) {
      const double f = counts[i] / (static_cast<double>(k) * static_cast<double>(n_tokens));
      usage[i] += f / static_cast<double>(n_layers);
      w[i] = static_cast<T>(static_cast<double>(n) * f / static_cast<double>(n_tokens));
    }
    for (const auto& r : routes) {
      bal_terms.push_back(g.column_weighted_sum(r[l].probs, w));
      bal_w.push_back(static_cast<T>(1.0 / static_cast<double>(n_layers)));
    }
  }
  Var bal = g.linear_combination(bal_terms, bal_w);
  const Var parts[2] = {lm, bal};
  const T coeffs[2] = {T{1}, static_cast<T>(lambda_bal)};
  Var total = g.linear_combination(parts, coeffs);
  if (stats) {
    stats->lm_loss = static_cast<double>(g.value(lm)[0]);
    stats->bal_loss = static_cast<double>(g.value(bal)[0]);
    stats->total_loss = static_cast<double>(g.value(total)[0]);
    stats->usage = std::move(usage);
  }
  return total;
}

template <class T>
Var dense_batch_loss(Graph<T>& g, const DenseVars<T>& vars, const TransformerConfig& config,
                     const TokenSequences& batch) {
  if (batch.empty()) throw std::invalid_argument("dense_batch_loss: empty batch");
  std::size_t n_targets = 0;
  for (const auto& seq : batch) n_targets += seq.size() - (seq.empty() ? 0 : 1);
  std::vector<Var> ce;
  std::vector<T> w;
  for (const auto& seq : batch) {
    const auto targets = shift_targets(seq);
    ce.push_back(g.cross_entropy(dense_logits(g, vars, config, seq), targets));
    w.push_back(static_cast<T>(static_cast<double>(targets.size()) / static_cast<double>(n_targets)));
  }
  return g.linear_combination(ce, w);
}

template <class T>
GradientStore<T> moe_gradients(const MoECheckpoint<T>& moe, const TokenSequences& batch, double lambda_bal,
                               TrainableSet trainable, BatchStats* stats) {
  Graph<T> g(Graph<T>::Mode::training);
  auto vars = register_moe(g, moe, trainable_filter(trainable));
  Var loss = moe_batch_loss(g, vars, moe, batch, lambda_bal, stats);
  return backward(g, loss);
}

template <class T>
double moe_loss_value(const MoECheckpoint<T>& moe, const TokenSequences& batch, double lambda_bal) {
  Graph<T> g;
  auto vars = register_moe(g, moe, nullptr);
  return static_cast<double>(g.value(moe_batch_loss(g, vars, moe, batch, lambda_bal))[0]);
}

template <class T>
GradientStore<T> dense_gradients(const DenseCheckpoint<T>& model, const TokenSequences& batch, double* loss) {
  Graph<T> g(Graph<T>::Mode::training);
  auto vars = register_dense(g, model, trainable_filter(TrainableSet::all));
  Var l = dense_batch_loss(g, vars, model.config, batch);
  if (loss) *loss = static_cast<double>(g.value(l)[0]);
  return backward(g, l);
}

template <class T>
double dense_loss_value(const DenseCheckpoint<T>& model, const TokenSequences& batch) {
  Graph<T> g;
  auto vars = register_dense(g, model, nullptr);
  return static_cast<double>(g.value(dense_batch_loss(g, vars, model.config, batch))[0]);
}

namespace {

TokenSequences truncate_all(const TokenSequences& seqs, std::size_t max_len) {
  TokenSequences out;
  out.reserve(seqs.size());
  for (const auto& s : seqs) {
    if (s.size() < 2) throw std::invalid_argument("training sequence shorter than two tokens");
    out.emplace_back(s.begin(), s.begin() + static_cast<std::ptrdiff_t>(std::min(s.size(), max_len)));
  }
  return out;
}

std::vector<TokenSequences> make_batches(const TokenSequences& data, std::size_t batch_size, Rng& rng) {
  const auto order = rng.permutation(data.size());
  std::vector<TokenSequences> out;
  for (std::size_t i = 0; i < order.size(); i += batch_size) {
    TokenSequences b;
    for (std::size_t j = i; j < std::min(order.size(), i + batch_size); ++j) b.push_back(data[order[j]]);
    out.push_back(std::move(b));
  }
  return out;
}

EpochSummary summarise(std::size_t epoch, std::span<const MetricsRow> rows) {
  EpochSummary s;
  s.epoch = epoch;
  if (rows.empty()) return s;
  s.usage.assign(rows.front().usage.size(), 0.0);
  for (const auto& r : rows) {
    s.lm_loss += r.lm_loss;
    s.bal_loss += r.bal_loss;
    s.total_loss += r.total_loss;
    for (std::size_t i = 0; i < r.usage.size(); ++i) s.usage[i] += r.usage[i];
  }
  const double n = static_cast<double>(rows.size());
  s.lm_loss /= n;
  s.bal_loss /= n;
  s.total_loss /= n;
  for (auto& u : s.usage) u /= n;
  return s;
}

}  // namespace

template <class T>
RouterTrainResult<T> train_router(const MoECheckpoint<T>& moe, const TokenSequences& calib, const TrainConfig& cfg) {
  cfg.validate();
  if (cfg.trainable != TrainableSet::router_only) {
    throw std::invalid_argument("train_router: trainable set must be router_only, got " + to_string(cfg.trainable));
  }
  if (calib.empty()) throw std::invalid_argument("train_router: empty calibration set");
  moe.validate();
  RouterTrainResult<T> out{moe, {}};
  const TokenSequences data = truncate_all(calib, std::min(cfg.max_seq_len, moe.config().max_seq_len));
  std::map<std::string, Tensor<T>*> params;
  for (std::size_t l = 0; l < out.moe.layers.size(); ++l) params[layer_name(l, "router")] = &out.moe.layers[l].router;
  AdamW<T> opt(cfg);
  Rng rng(Rng::mix(cfg.seed) ^ 0x726f75746572ULL);
  std::size_t step = 0;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const std::size_t first = out.log.steps.size();
    for (const auto& batch : make_batches(data, cfg.batch_size, rng)) {
      BatchStats st;
      auto grads = moe_gradients(out.moe, batch, cfg.lambda_bal, TrainableSet::router_only, &st);
      double pre = 0.0;
      grads = clip_global_norm(std::move(grads), cfg.max_grad_norm, &pre);
      opt.step(params, grads);
      out.log.steps.push_back({epoch, ++step, st.lm_loss, st.bal_loss, st.total_loss, st.usage, pre});
    }
    out.log.epochs.push_back(summarise(epoch, std::span(out.log.steps).subspan(first)));
  }
  return out;
}

template <class T>
PretrainResult<T> pretrain_dense(const TransformerConfig& config, const TokenSequences& corpus, const TrainConfig& cfg,
                                 std::uint64_t seed, std::string model_id, std::vector<std::string> vocab) {
  cfg.validate();
  if (corpus.empty()) throw std::invalid_argument("pretrain_dense: empty corpus");
  PretrainResult<T> out{init_dense<T>(config, std::move(vocab), std::move(model_id), seed), {}};
  const TokenSequences data = truncate_all(corpus, std::min(cfg.max_seq_len, config.max_seq_len));
  std::map<std::string, Tensor<T>*> params;
  for_each_tensor(out.model, [&](const std::string& name, Tensor<T>& t) { params[name] = &t; });
  AdamW<T> opt(cfg);
  Rng rng(Rng::mix(seed) ^ Rng::mix(cfg.seed) ^ 0x70726574ULL);
  std::size_t step = 0;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const std::size_t first = out.log.steps.size();
    for (const auto& batch : make_batches(data, cfg.batch_size, rng)) {
      double loss = 0.0;
      auto grads = dense_gradients(out.model, batch, &loss);
      double pre = 0.0;
      grads = clip_global_norm(std::move(grads), cfg.max_grad_norm, &pre);
      opt.step(params, grads);
      out.log.steps.push_back({epoch, ++step, loss, 0.0, loss, {}, pre});
    }
    out.log.epochs.push_back(summarise(epoch, std::span(out.log.steps).subspan(first)));
  }
  return out;
}

void write_metrics_csv(const TrainLog& log, std::size_t n_experts, std::ostream& out) {
  out << "epoch,step,lm_loss,bal_loss,total_loss";
  for (std::size_t i = 0; i < n_experts; ++i) out << ",f_" << i;
  out << ",grad_norm_preclip\n";
  char buf[64];
  auto num = [&](double v) {
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return std::string(buf);
  };
  for (const auto& r : log.steps) {
    out << r.epoch << ',' << r.step << ',' << num(r.lm_loss) << ',' << num(r.bal_loss) << ',' << num(r.total_loss);
    for (std::size_t i = 0; i < n_experts; ++i) out << ',' << num(i < r.usage.size() ? r.usage[i] : 0.0);
    out << ',' << num(r.grad_norm_preclip) << '\n';
  }
}

void save_metrics_csv(const TrainLog& log, std::size_t n_experts, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write metrics file " + path);
  write_metrics_csv(log, n_experts, out);
}

#define UPCYCLE_INSTANTIATE(T)                                                                                   \
  template double lm_loss(const Tensor<T>&, std::span<const int>);                                               \
  template GradientStore<T> backward(Graph<T>&, Var);                                                            \
  template double global_norm(const GradientStore<T>&);                                                          \
  template GradientStore<T> clip_global_norm(GradientStore<T>, double, double*);                                 \
  template class AdamW<T>;                                                                                       \
  template Var moe_batch_loss(Graph<T>&, const MoEVars<T>&, const MoECheckpoint<T>&, const TokenSequences&,      \
                              double, BatchStats*);                                                              \
  template Var dense_batch_loss(Graph<T>&, const DenseVars<T>&, const TransformerConfig&, const TokenSequences&); \
  template GradientStore<T> moe_gradients(const MoECheckpoint<T>&, const TokenSequences&, double, TrainableSet,   \
                                          BatchStats*);                                                          \
  template double moe_loss_value(const MoECheckpoint<T>&, const TokenSequences&, double);                        \
  template GradientStore<T> dense_gradients(const DenseCheckpoint<T>&, const TokenSequences&, double*);          \
  template double dense_loss_value(const DenseCheckpoint<T>&, const TokenSequences&);                            \
  template RouterTrainResult<T> train_router(const MoECheckpoint<T>&, const TokenSequences&, const TrainConfig&); \
  template PretrainResult<T> pretrain_dense(const TransformerConfig&, const TokenSequences&, const TrainConfig&,  \
                                            std::uint64_t, std::string, std::vector<std::string>);

UPCYCLE_INSTANTIATE(float)
UPCYCLE_INSTANTIATE(double)

#undef UPCYCLE_INSTANTIATE

}  // namespace upcycle
