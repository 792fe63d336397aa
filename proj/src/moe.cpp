#include "upcycle/moe.hpp"

#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include "json.hpp"
#include "upcycle/random.hpp"

namespace upcycle {

void RoutingConfig::validate(std::size_t n_experts) const {
  if (k < 1 || k > n_experts) {
    throw std::invalid_argument("routing: k=" + std::to_string(k) + " must be in [1, " +
                                std::to_string(n_experts) + "]");
  }
}

std::string expert_name(std::size_t layer, std::size_t expert, const std::string& leaf) {
  return layer_name(layer, "experts." + std::to_string(expert) + "." + leaf);
}

template <class T>
void MoECheckpoint<T>::validate() const {
  backbone.validate();
  const auto& cfg = backbone.config;
  const std::size_t n = n_experts();
  if (n < 1) throw std::invalid_argument("moe: no experts");
  routing.validate(n);
  if (layers.size() != cfg.n_layers) {
    throw ShapeError("moe: " + std::to_string(layers.size()) + " expert layers for " + std::to_string(cfg.n_layers) +
                     " backbone layers");
  }
  if (!permutation_ids.empty() && permutation_ids.size() != n) {
    throw std::invalid_argument("moe: permutation ids do not cover every expert");
  }
  std::set<std::string> ids(expert_ids.begin(), expert_ids.end());
  if (ids.size() != n) throw std::invalid_argument("moe: duplicate expert model ids");
  const std::size_t d = cfg.d_model, f = cfg.d_ffn;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& L = layers[l];
    if (L.experts.size() != n) {
      throw ShapeError("moe layer " + std::to_string(l) + ": " + std::to_string(L.experts.size()) + " experts, expected " +
                       std::to_string(n));
    }
    if (L.router.shape() != Shape{d, n}) {
      throw ShapeError(layer_name(l, "router") + ": expected " + shape_str({d, n}) + ", got " +
                       shape_str(L.router.shape()));
    }
    for (std::size_t e = 0; e < n; ++e) {
      if (L.experts[e].up.shape() != Shape{d, f} || L.experts[e].down.shape() != Shape{f, d}) {
        throw ShapeError(expert_name(l, e, "up/down") + ": shapes " + shape_str(L.experts[e].up.shape()) + ", " +
                         shape_str(L.experts[e].down.shape()) + " do not match d_model " + std::to_string(d) +
                         ", d_ffn " + std::to_string(f));
      }
    }
  }
}

template <class T>
Tensor<T> router_probs(const Tensor<T>& x, const Tensor<T>& w_g) {
  return softmax_rows(matmul(x, w_g));
}

template <class T>
std::vector<TokenRoute<T>> top_k_dispatch(const Tensor<T>& probs, const RoutingConfig& cfg) {
  require_rank(probs.shape(), 2, "top_k_dispatch");
  cfg.validate(probs.cols());
  std::vector<TokenRoute<T>> out;
  out.reserve(probs.rows());
  const auto picks = top_k_rows(probs, cfg.k);
  for (std::size_t t = 0; t < probs.rows(); ++t) {
    TokenRoute<T> r;
    r.indices = picks[t];
    T z{0};
    for (std::size_t e : r.indices) z += probs(t, e);
    for (std::size_t e : r.indices) r.gates.push_back(cfg.renormalize ? probs(t, e) / z : probs(t, e));
    out.push_back(std::move(r));
  }
  return out;
}

template <class T>
MoEVars<T> register_moe(Graph<T>& g, const MoECheckpoint<T>& moe, const TrainableFilter& trainable) {
  auto reg = [&](const std::string& name, const Tensor<T>& t) {
    return g.parameter(t, name, trainable && trainable(name));
  };
  MoEVars<T> v;
  v.embedding = reg("embedding", moe.backbone.embedding);
  v.layers.resize(moe.layers.size());
  for (std::size_t l = 0; l < moe.layers.size(); ++l) {
    const auto& B = moe.backbone.layers[l];
    const auto& M = moe.layers[l];
    auto& V = v.layers[l];
    V.attn.wq = reg(layer_name(l, "attn.wq"), B.attn.wq);
    V.attn.wk = reg(layer_name(l, "attn.wk"), B.attn.wk);
    V.attn.wv = reg(layer_name(l, "attn.wv"), B.attn.wv);
    V.attn.wo = reg(layer_name(l, "attn.wo"), B.attn.wo);
    V.attn_gamma = reg(layer_name(l, "attn_gamma"), B.attn_gamma);
    V.ffn_gamma = reg(layer_name(l, "ffn_gamma"), B.ffn_gamma);
    for (std::size_t e = 0; e < M.experts.size(); ++e) {
      V.up.push_back(reg(expert_name(l, e, "up"), M.experts[e].up));
      V.down.push_back(reg(expert_name(l, e, "down"), M.experts[e].down));
    }
    V.router = reg(layer_name(l, "router"), M.router);
  }
  v.final_gamma = reg("final_gamma", moe.backbone.final_gamma);
  return v;
}

template <class T>
Var moe_ffn(Graph<T>& g, Var h, const typename MoEVars<T>::Layer& layer, const RoutingConfig& cfg,
            LayerRouting* routing) {
  const std::size_t n = layer.up.size();
  if (layer.down.size() != n) throw ShapeError("moe_ffn: up/down expert count mismatch");
  cfg.validate(n);
  Var probs = g.softmax_rows(g.matmul(h, layer.router));
  Dispatch dispatch = Dispatch::from_selection(top_k_rows(g.value(probs), cfg.k), n);
  Var gates = g.top_k_gates(probs, dispatch, cfg.renormalize);
  std::vector<Var> outputs(n);
  for (std::size_t e = 0; e < n; ++e) {
    if (dispatch.rows[e].empty()) continue;
    Var xe = g.gather_rows(h, dispatch.rows[e]);
    outputs[e] = g.matmul(ffn_hidden(g, xe, layer.up[e]), layer.down[e]);
  }
  Var out = g.combine_experts(outputs, gates, dispatch);
  if (routing) {
    routing->probs = probs;
    routing->dispatch = std::move(dispatch);
  }
  return out;
}

template <class T>
Var moe_logits(Graph<T>& g, const MoEVars<T>& vars, const TransformerConfig& config, const RoutingConfig& cfg,
               std::span<const int> tokens, std::vector<LayerRouting>* routing, std::map<std::size_t, Var>* ffn_inputs) {
  check_tokens(config, tokens);
  Var x = g.embedding(vars.embedding, tokens);
  for (std::size_t l = 0; l < vars.layers.size(); ++l) {
    const auto& V = vars.layers[l];
    x = attention_residual(g, x, V.attn_gamma, V.attn, config);
    Var h = g.rms_norm(x, V.ffn_gamma, config.norm_eps);
    if (ffn_inputs) (*ffn_inputs)[l] = h;
    LayerRouting lr;
    lr.layer = l;
    x = g.add(x, moe_ffn<T>(g, h, V, cfg, routing ? &lr : nullptr));
    if (routing) routing->push_back(std::move(lr));
  }
  Var xn = g.rms_norm(x, vars.final_gamma, config.norm_eps);
  return g.matmul_nt(xn, vars.embedding);
}

template <class T>
Tensor<T> moe_ffn_forward(const Tensor<T>& x, std::span<const FfnWeights<T>> experts, const Tensor<T>& w_g,
                          const RoutingConfig& cfg) {
  require_rank(x.shape(), 2, "moe_ffn_forward");
  if (w_g.rank() != 2 || w_g.rows() != x.cols() || w_g.cols() != experts.size()) {
    throw ShapeError("moe_ffn_forward: router " + shape_str(w_g.shape()) + " does not fit input " +
                     shape_str(x.shape()) + " and " + std::to_string(experts.size()) + " experts");
  }
  for (const auto& e : experts) {
    if (e.up.rank() != 2 || e.up.rows() != x.cols() || e.down.rank() != 2 || e.down.cols() != x.cols() ||
        e.down.rows() != e.up.cols()) {
      throw ShapeError("moe_ffn_forward: expert shapes " + shape_str(e.up.shape()) + ", " +
                       shape_str(e.down.shape()) + " do not fit d_model " + std::to_string(x.cols()));
    }
  }
  Graph<T> g;
  typename MoEVars<T>::Layer layer;
  for (std::size_t e = 0; e < experts.size(); ++e) {
    layer.up.push_back(g.parameter(experts[e].up, "up", false));
    layer.down.push_back(g.parameter(experts[e].down, "down", false));
  }
  layer.router = g.parameter(w_g, "router", false);
  Var h = g.parameter(x, "x", false);
  return g.value(moe_ffn<T>(g, h, layer, cfg));
}

template <class T>
MoECheckpoint<T> assemble_moe(const BackboneCheckpoint<T>& backbone,
                              const std::vector<std::vector<FfnWeights<T>>>& experts,
                              std::vector<std::string> expert_ids, std::uint64_t seed, const RoutingConfig& routing,
                              std::vector<std::string> permutation_ids) {
  backbone.validate();
  if (experts.empty()) throw std::invalid_argument("assemble_moe: no experts");
  if (expert_ids.size() != experts.size()) {
    throw std::invalid_argument("assemble_moe: " + std::to_string(expert_ids.size()) + " ids for " +
                                std::to_string(experts.size()) + " experts");
  }
  const auto& cfg = backbone.config;
  const std::size_t n = experts.size();
  MoECheckpoint<T> moe;
  moe.backbone = backbone;
  moe.routing = routing;
  moe.expert_ids = std::move(expert_ids);
  moe.permutation_ids = std::move(permutation_ids);
  moe.router_seed = seed;
  moe.layers.resize(cfg.n_layers);
  Rng rng(seed);
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    for (std::size_t i = 0; i < n; ++i) {
      if (experts[i].size() != cfg.n_layers) {
        throw ShapeError("assemble_moe: expert '" + moe.expert_ids[i] + "' has " + std::to_string(experts[i].size()) +
                         " layers, backbone has " + std::to_string(cfg.n_layers));
      }
      moe.layers[l].experts.push_back(experts[i][l]);
    }
    moe.layers[l].router = rng.normal_tensor<T>({cfg.d_model, n}, 0.02);
  }
  moe.validate();
  return moe;
}

template <class T>
Tensor<T> moe_forward(const MoECheckpoint<T>& moe, std::span<const int> tokens, std::vector<RoutingRecord>* trace) {
  Graph<T> g;
  auto vars = register_moe(g, moe, nullptr);
  std::vector<LayerRouting> routing;
  Var logits = moe_logits(g, vars, moe.config(), moe.routing, tokens, trace ? &routing : nullptr);
  if (trace) {
    // Layer-major within a sequence so callers can slice per layer.
    for (const auto& lr : routing) {
      const Tensor<T>& p = g.value(lr.probs);
      for (std::size_t t = 0; t < lr.dispatch.selected.size(); ++t) {
        RoutingRecord rec;
        rec.token_pos = t;
        rec.layer = lr.layer;
        rec.indices = lr.dispatch.selected[t];
        double z = 0.0;
        for (std::size_t e : rec.indices) z += static_cast<double>(p(t, e));
        for (std::size_t e : rec.indices) {
          const double pe = static_cast<double>(p(t, e));
          rec.gates.push_back(moe.routing.renormalize ? pe / z : pe);
        }
        rec.probs.assign(p.row(t).begin(), p.row(t).end());
        trace->push_back(std::move(rec));
      }
    }
  }
  return g.value(logits);
}

template <class T>
std::vector<Tensor<T>> moe_expert_activations(const MoECheckpoint<T>& moe, std::span<const int> tokens,
                                              std::size_t layer) {
  if (layer >= moe.layers.size()) {
    throw std::out_of_range("moe_expert_activations: layer " + std::to_string(layer) + " outside model");
  }
  Graph<T> g;
  auto vars = register_moe(g, moe, nullptr);
  std::map<std::size_t, Var> inputs;
  moe_logits(g, vars, moe.config(), moe.routing, tokens, nullptr, &inputs);
  const Tensor<T>& h = g.value(inputs.at(layer));
  std::vector<Tensor<T>> out;
  for (const auto& e : moe.layers[layer].experts) out.push_back(silu(matmul(h, e.up)));
  return out;
}

template <class T>
DenseCheckpoint<T> expert_as_dense(const MoECheckpoint<T>& moe, std::size_t expert, std::string model_id) {
  if (expert >= moe.n_experts()) throw std::out_of_range("expert_as_dense: no expert " + std::to_string(expert));
  DenseCheckpoint<T> d;
  d.config = moe.config();
  d.model_id = std::move(model_id);
  d.vocab = moe.backbone.vocab;
  d.embedding = moe.backbone.embedding;
  d.final_gamma = moe.backbone.final_gamma;
  for (std::size_t l = 0; l < moe.layers.size(); ++l) {
    const auto& B = moe.backbone.layers[l];
    d.layers.push_back({B.attn, moe.layers[l].experts[expert], B.attn_gamma, B.ffn_gamma});
  }
  d.validate();
  return d;
}

std::string routing_trace_ndjson(std::span<const RoutingRecord> trace) {
  std::string out;
  for (const auto& r : trace) {
    nlohmann::json j;
    j["token_pos"] = r.token_pos;
    j["layer"] = r.layer;
    j["indices"] = r.indices;
    j["gates"] = r.gates;
    out += j.dump();
    out += '\n';
  }
  return out;
}

void save_routing_trace(std::span<const RoutingRecord> trace, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write routing trace " + path);
  out << routing_trace_ndjson(trace);
}

std::vector<RoutingRecord> parse_routing_trace(const std::string& ndjson) {
  std::vector<RoutingRecord> out;
  std::istringstream in(ndjson);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    RoutingRecord r;
    r.token_pos = j.at("token_pos").get<std::size_t>();
    r.layer = j.at("layer").get<std::size_t>();
    r.indices = j.at("indices").get<std::vector<std::size_t>>();
    r.gates = j.at("gates").get<std::vector<double>>();
    out.push_back(std::move(r));
  }
  return out;
}

#define UPCYCLE_INSTANTIATE(T)                                                                                     \
  template struct MoECheckpoint<T>;                                                                                \
  template Tensor<T> router_probs(const Tensor<T>&, const Tensor<T>&);                                             \
  template std::vector<TokenRoute<T>> top_k_dispatch(const Tensor<T>&, const RoutingConfig&);                      \
  template Tensor<T> moe_ffn_forward(const Tensor<T>&, std::span<const FfnWeights<T>>, const Tensor<T>&,           \
                                     const RoutingConfig&);                                                        \
  template MoECheckpoint<T> assemble_moe(const BackboneCheckpoint<T>&, const std::vector<std::vector<FfnWeights<T>>>&, \
                                         std::vector<std::string>, std::uint64_t, const RoutingConfig&,            \
                                         std::vector<std::string>);                                                \
  template Tensor<T> moe_forward(const MoECheckpoint<T>&, std::span<const int>, std::vector<RoutingRecord>*);      \
  template std::vector<Tensor<T>> moe_expert_activations(const MoECheckpoint<T>&, std::span<const int>,            \
                                                         std::size_t);                                             \
  template DenseCheckpoint<T> expert_as_dense(const MoECheckpoint<T>&, std::size_t, std::string);                  \
  template MoEVars<T> register_moe(Graph<T>&, const MoECheckpoint<T>&, const TrainableFilter&);                    \
  template Var moe_ffn<T>(Graph<T>&, Var, const typename MoEVars<T>::Layer&, const RoutingConfig&, LayerRouting*); \
  template Var moe_logits(Graph<T>&, const MoEVars<T>&, const TransformerConfig&, const RoutingConfig&,            \
                          std::span<const int>, std::vector<LayerRouting>*, std::map<std::size_t, Var>*);

UPCYCLE_INSTANTIATE(float)
UPCYCLE_INSTANTIATE(double)

#undef UPCYCLE_INSTANTIATE

}  // namespace upcycle
