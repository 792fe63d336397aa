#include "upcycle/analysis.hpp"

#include <cmath>
#include <cstdio>
#include <stdexcept>

#include "upcycle/training.hpp"

namespace upcycle {

namespace {

// ||B^T A||_F^2 for centred inputs.
double cross_frob2(const TensorD& a, const TensorD& b) {
  const TensorD m = matmul_tn(b, a);
  double s = 0.0;
  for (double v : m.data()) s += v * v;
  return s;
}

template <class T>
TensorD concat_rows(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw std::invalid_argument("no activation blocks");
  std::size_t rows = 0;
  const std::size_t cols = parts.front().cols();
  for (const auto& p : parts) rows += p.rows();
  TensorD out({rows, cols});
  std::size_t r = 0;
  for (const auto& p : parts) {
    for (std::size_t i = 0; i < p.rows(); ++i, ++r)
      for (std::size_t j = 0; j < cols; ++j) out(r, j) = static_cast<double>(p(i, j));
  }
  return out;
}

}  // namespace

template <class T>
double linear_cka(const Tensor<T>& x, const Tensor<T>& y) {
  require_rank(x.shape(), 2, "linear_cka x");
  require_rank(y.shape(), 2, "linear_cka y");
  if (x.rows() != y.rows()) {
    throw ShapeError("linear_cka: token counts differ (" + std::to_string(x.rows()) + " vs " +
                     std::to_string(y.rows()) + ")");
  }
  if (x.rows() < 2) throw std::invalid_argument("linear_cka: need at least two tokens");
  const TensorD xc = column_center(x.template cast<double>());
  const TensorD yc = column_center(y.template cast<double>());
  const double xx = std::sqrt(cross_frob2(xc, xc));
  const double yy = std::sqrt(cross_frob2(yc, yc));
  if (xx == 0.0 || yy == 0.0) return 0.0;
  return cross_frob2(xc, yc) / (xx * yy);
}

std::string to_string(CkaScenario s) {
  switch (s) {
    case CkaScenario::original: return "original";
    case CkaScenario::naive_merge: return "naive_merge";
    case CkaScenario::aligned_merge: return "aligned_merge";
  }
  return "?";
}

template <class T>
CkaReport cka_report(CkaScenario scenario, std::size_t layer, std::span<const Tensor<T>> activations) {
  const std::size_t n = activations.size();
  if (n < 2) throw std::invalid_argument("CKA study needs at least two experts, got " + std::to_string(n));
  CkaReport r;
  r.scenario = scenario;
  r.layer = layer;
  r.matrix = TensorD({n, n});
  double off = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    r.matrix(i, i) = linear_cka(activations[i], activations[i]);
    for (std::size_t j = i + 1; j < n; ++j) {
      const double c = linear_cka(activations[i], activations[j]);
      r.matrix(i, j) = r.matrix(j, i) = c;
      off += 2.0 * c;
    }
  }
  r.mean_offdiagonal = off / static_cast<double>(n * (n - 1));
  return r;
}

template <class T>
CkaReport original_cka(std::span<const DenseCheckpoint<T>> sources, const TokenSequences& calib, std::size_t layer) {
  std::vector<TensorD> acts;
  for (const auto& m : sources) {
    std::vector<Tensor<T>> blocks;
    for (const auto& seq : calib) blocks.push_back(forward_with_trace(m, seq, {layer}).ffn_hidden.at(layer));
    acts.push_back(concat_rows(blocks));
  }
  return cka_report<double>(CkaScenario::original, layer, acts);
}

template <class T>
CkaReport moe_cka(const MoECheckpoint<T>& moe, CkaScenario scenario, const TokenSequences& calib, std::size_t layer) {
  const std::size_t n = moe.n_experts();
  std::vector<std::vector<Tensor<T>>> blocks(n);
  for (const auto& seq : calib) {
    auto acts = moe_expert_activations(moe, seq, layer);
    for (std::size_t e = 0; e < n; ++e) blocks[e].push_back(std::move(acts[e]));
  }
  std::vector<TensorD> acts;
  for (auto& b : blocks) acts.push_back(concat_rows(b));
  return cka_report<double>(scenario, layer, acts);
}

template <class T>
std::vector<CkaReport> expert_cka_study(std::span<const DenseCheckpoint<T>> sources,
                                        const MoECheckpoint<T>& naive_merge, const MoECheckpoint<T>& aligned_merge,
                                        const TokenSequences& calib, const std::set<std::size_t>& layers) {
  if (sources.size() != naive_merge.n_experts() || sources.size() != aligned_merge.n_experts()) {
    throw std::invalid_argument("expert_cka_study: scenarios disagree on the expert count (" +
                                std::to_string(sources.size()) + ", " + std::to_string(naive_merge.n_experts()) +
                                ", " + std::to_string(aligned_merge.n_experts()) + ")");
  }
  if (calib.empty()) throw std::invalid_argument("expert_cka_study: empty calibration set");
  std::vector<CkaReport> out;
  for (std::size_t l : layers) {
    out.push_back(original_cka(sources, calib, l));
    out.push_back(moe_cka(naive_merge, CkaScenario::naive_merge, calib, l));
    out.push_back(moe_cka(aligned_merge, CkaScenario::aligned_merge, calib, l));
  }
  return out;
}

template <class T>
double perplexity_from_logits(std::span<const Tensor<T>> logits, const TokenSequences& corpus) {
  if (corpus.empty()) throw std::invalid_argument("perplexity: empty corpus");
  if (logits.size() != corpus.size()) throw std::invalid_argument("perplexity: logits do not match corpus");
  double nll = 0.0;
  std::size_t count = 0;
  for (std::size_t s = 0; s < corpus.size(); ++s) {
    const auto targets = shift_targets(corpus[s]);
    nll += lm_loss(logits[s], targets) * static_cast<double>(targets.size());
    count += targets.size();
  }
  return std::exp(nll / static_cast<double>(count));
}

template <class T>
double perplexity(const DenseCheckpoint<T>& model, const TokenSequences& corpus) {
  std::vector<Tensor<T>> logits;
  for (const auto& seq : corpus) logits.push_back(forward(model, seq));
  return perplexity_from_logits<T>(logits, corpus);
}

template <class T>
double perplexity(const MoECheckpoint<T>& moe, const TokenSequences& corpus) {
  std::vector<Tensor<T>> logits;
  for (const auto& seq : corpus) logits.push_back(moe_forward(moe, seq));
  return perplexity_from_logits<T>(logits, corpus);
}

UsageSummary expert_usage(std::span<const RoutingRecord> trace, std::size_t n_experts, std::size_t k) {
  UsageSummary u;
  u.fraction = usage_fractions(trace, n_experts, k);
  u.gate_mass.assign(n_experts, 0.0);
  for (const auto& r : trace) {
    if (r.gates.size() != r.indices.size()) throw std::invalid_argument("expert_usage: gates and indices differ");
    for (std::size_t s = 0; s < r.indices.size(); ++s) u.gate_mass[r.indices[s]] += r.gates[s];
  }
  for (auto& g : u.gate_mass) g /= static_cast<double>(trace.size());
  u.n_records = trace.size();
  return u;
}

nlohmann::json to_json(const CkaReport& r) {
  nlohmann::json j;
  j["scenario"] = to_string(r.scenario);
  j["layer"] = r.layer;
  j["mean_offdiagonal"] = r.mean_offdiagonal;
  auto rows = nlohmann::json::array();
  for (std::size_t i = 0; i < r.matrix.rows(); ++i) {
    auto row = r.matrix.row(i);
    rows.push_back(std::vector<double>(row.begin(), row.end()));
  }
  j["matrix"] = rows;
  return j;
}

nlohmann::json to_json(const UsageSummary& u) {
  return {{"fraction", u.fraction}, {"gate_mass", u.gate_mass}, {"n_records", u.n_records}};
}

std::string cka_csv(std::span<const CkaReport> reports) {
  std::string out = "scenario,layer,row,col,cka\n";
  char buf[64];
  for (const auto& r : reports) {
    for (std::size_t i = 0; i < r.matrix.rows(); ++i) {
      for (std::size_t j = 0; j < r.matrix.cols(); ++j) {
        std::snprintf(buf, sizeof buf, "%.9g", r.matrix(i, j));
        out += to_string(r.scenario) + "," + std::to_string(r.layer) + "," + std::to_string(i) + "," +
               std::to_string(j) + "," + buf + "\n";
      }
    }
  }
  return out;
}

#define UPCYCLE_INSTANTIATE(T)                                                                                  \
  template double linear_cka(const Tensor<T>&, const Tensor<T>&);                                              \
  template CkaReport cka_report(CkaScenario, std::size_t, std::span<const Tensor<T>>);                          \
  template CkaReport original_cka(std::span<const DenseCheckpoint<T>>, const TokenSequences&, std::size_t);     \
  template CkaReport moe_cka(const MoECheckpoint<T>&, CkaScenario, const TokenSequences&, std::size_t);         \
  template std::vector<CkaReport> expert_cka_study(std::span<const DenseCheckpoint<T>>, const MoECheckpoint<T>&, \
                                                   const MoECheckpoint<T>&, const TokenSequences&,              \
                                                   const std::set<std::size_t>&);                               \
  template double perplexity_from_logits(std::span<const Tensor<T>>, const TokenSequences&);                    \
  template double perplexity(const DenseCheckpoint<T>&, const TokenSequences&);                                 \
  template double perplexity(const MoECheckpoint<T>&, const TokenSequences&);

UPCYCLE_INSTANTIATE(float)
UPCYCLE_INSTANTIATE(double)

#undef UPCYCLE_INSTANTIATE

}  // namespace upcycle
