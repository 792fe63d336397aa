#include "upcycle/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace upcycle {

Dispatch Dispatch::from_selection(std::vector<std::vector<std::size_t>> selected,
                                  std::size_t n_experts) {
  Dispatch d;
  d.n_experts = n_experts;
  d.rows.assign(n_experts, {});
  d.slot_pos.resize(selected.size());
  for (std::size_t t = 0; t < selected.size(); ++t) {
    d.slot_pos[t].resize(selected[t].size());
    for (std::size_t s = 0; s < selected[t].size(); ++s) {
      const std::size_t e = selected[t][s];
      if (e >= n_experts) throw std::out_of_range("dispatch: expert index out of range");
      d.slot_pos[t][s] = d.rows[e].size();
      d.rows[e].push_back(t);
    }
  }
  d.selected = std::move(selected);
  return d;
}

namespace {

struct RopeTable {
  std::size_t half = 0;
  std::vector<double> cos, sin;  // [T x half]
};

RopeTable rope_table(std::size_t n_tokens, std::size_t head_dim, double theta) {
  RopeTable tab;
  tab.half = head_dim / 2;
  tab.cos.resize(n_tokens * tab.half);
  tab.sin.resize(n_tokens * tab.half);
  for (std::size_t p = 0; p < n_tokens; ++p) {
    for (std::size_t i = 0; i < tab.half; ++i) {
      const double freq = std::pow(theta, -2.0 * static_cast<double>(i) / static_cast<double>(head_dim));
      const double angle = static_cast<double>(p) * freq;
      tab.cos[p * tab.half + i] = std::cos(angle);
      tab.sin[p * tab.half + i] = std::sin(angle);
    }
  }
  return tab;
}

// Rotates each (2i, 2i+1) pair of every head; `inverse` applies the transpose.
template <class T>
Tensor<T> apply_rope(const Tensor<T>& x, std::size_t n_heads, const RopeTable& tab, bool inverse) {
  Tensor<T> out = x;
  const std::size_t d = x.cols();
  const std::size_t hd = d / n_heads;
  for (std::size_t p = 0; p < x.rows(); ++p) {
    for (std::size_t h = 0; h < n_heads; ++h) {
      for (std::size_t i = 0; i < tab.half; ++i) {
        const T c = static_cast<T>(tab.cos[p * tab.half + i]);
        const T s = inverse ? static_cast<T>(-tab.sin[p * tab.half + i])
                            : static_cast<T>(tab.sin[p * tab.half + i]);
        const std::size_t j = h * hd + 2 * i;
        const T a = x(p, j), b = x(p, j + 1);
        out(p, j) = a * c - b * s;
        out(p, j + 1) = a * s + b * c;
      }
    }
  }
  return out;
}

}  // namespace

template <class T>
Var Graph<T>::push(Tensor<T> value, bool requires_grad) {
  Node n;
  n.owned = std::move(value);
  n.requires_grad = taped() && requires_grad;
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

template <class T>
bool Graph<T>::any_requires(std::initializer_list<Var> vs) const {
  if (!taped()) return false;
  for (Var v : vs)
    if (nodes_.at(v.id).requires_grad) return true;
  return false;
}

template <class T>
Var Graph<T>::constant(Tensor<T> value) {
  return push(std::move(value), false);
}

template <class T>
Var Graph<T>::parameter(const Tensor<T>& value, std::string name, bool trainable) {
  Node n;
  n.external = &value;
  n.name = std::move(name);
  n.trainable = taped() && trainable;
  n.requires_grad = n.trainable;
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

template <class T>
const Tensor<T>& Graph<T>::value(Var v) const {
  const Node& n = nodes_.at(v.id);
  return n.external ? *n.external : n.owned;
}

template <class T>
Tensor<T>& Graph<T>::grad_ref(std::size_t id) {
  Node& n = nodes_[id];
  if (n.grad.empty()) n.grad = Tensor<T>(value(Var{id}).shape());
  return n.grad;
}

template <class T>
void Graph<T>::accumulate(std::size_t id, const Tensor<T>& g) {
  Node& n = nodes_[id];
  if (!n.requires_grad) return;
  if (n.grad.empty()) {
    n.grad = g;
    return;
  }
  require_same_shape(n.grad.shape(), g.shape(), "gradient accumulate");
  for (std::size_t i = 0; i < g.size(); ++i) n.grad[i] += g[i];
}

template <class T>
Var Graph<T>::embedding(Var table, std::span<const int> tokens) {
  const Tensor<T>& tab = value(table);
  require_rank(tab.shape(), 2, "embedding");
  const std::size_t d = tab.cols();
  Tensor<T> out({tokens.size(), d});
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    if (tokens[t] < 0 || static_cast<std::size_t>(tokens[t]) >= tab.rows()) {
      throw std::out_of_range("embedding: token id " + std::to_string(tokens[t]) +
                              " outside vocabulary of " + std::to_string(tab.rows()));
    }
    auto src = tab.row(static_cast<std::size_t>(tokens[t]));
    std::copy(src.begin(), src.end(), out.row(t).begin());
  }
  Var r = push(std::move(out), any_requires({table}));
  if (nodes_[r.id].requires_grad) {
    std::vector<int> ids(tokens.begin(), tokens.end());
    nodes_[r.id].backward = [this, table, ids = std::move(ids), d](const Tensor<T>& g) {
      Tensor<T>& gt = grad_ref(table.id);
      for (std::size_t t = 0; t < ids.size(); ++t) {
        auto dst = gt.row(static_cast<std::size_t>(ids[t]));
        auto src = g.row(t);
        for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
      }
    };
  }
  return r;
}

template <class T>
Var Graph<T>::matmul(Var a, Var b) {
  Var r = push(upcycle::matmul(value(a), value(b)), any_requires({a, b}));
  if (nodes_[r.id].requires_grad) {
    nodes_[r.id].backward = [this, a, b](const Tensor<T>& g) {
      if (nodes_[a.id].requires_grad) accumulate(a.id, upcycle::matmul_nt(g, value(b)));
      if (nodes_[b.id].requires_grad) accumulate(b.id, upcycle::matmul_tn(value(a), g));
    };
  }
  return r;
}

template <class T>
Var Graph<T>::matmul_nt(Var a, Var b) {
  Var r = push(upcycle::matmul_nt(value(a), value(b)), any_requires({a, b}));
  if (nodes_[r.id].requires_grad) {
    nodes_[r.id].backward = [this, a, b](const Tensor<T>& g) {
      if (nodes_[a.id].requires_grad) accumulate(a.id, upcycle::matmul(g, value(b)));
      if (nodes_[b.id].requires_grad) accumulate(b.id, upcycle::matmul_tn(g, value(a)));
    };
  }
  return r;
}

template <class T>
Var Graph<T>::add(Var a, Var b) {
  Var r = push(upcycle::add(value(a), value(b)), any_requires({a, b}));
  if (nodes_[r.id].requires_grad) {
    nodes_[r.id].backward = [this, a, b](const Tensor<T>& g) {
      accumulate(a.id, g);
      accumulate(b.id, g);
    };
  }
  return r;
}

template <class T>
Var Graph<T>::silu(Var x) {
  Var r = push(upcycle::silu(value(x)), any_requires({x}));
  if (nodes_[r.id].requires_grad) {
    nodes_[r.id].backward = [this, x](const Tensor<T>& g) {
      const Tensor<T>& xv = value(x);
      Tensor<T> dx(xv.shape());
      for (std::size_t i = 0; i < xv.size(); ++i) dx[i] = g[i] * upcycle::silu_grad(xv[i]);
      accumulate(x.id, dx);
    };
  }
  return r;
}

template <class T>
Var Graph<T>::rms_norm(Var x, Var gamma, double eps) {
  Var r = push(upcycle::rms_norm(value(x), value(gamma), eps), any_requires({x, gamma}));
  if (nodes_[r.id].requires_grad) {
    nodes_[r.id].backward = [this, x, gamma, eps](const Tensor<T>& g) {
      const Tensor<T>& xv = value(x);
      const Tensor<T>& gv = value(gamma);
      const std::size_t m = xv.rows(), d = xv.cols();
      Tensor<T> dx(xv.shape());
      Tensor<T> dg(gv.shape());
      for (std::size_t i = 0; i < m; ++i) {
        auto xr = xv.row(i);
        auto gr = g.row(i);
        T ss{0};
        for (std::size_t j = 0; j < d; ++j) ss += xr[j] * xr[j];
        const T inv = T{1} / std::sqrt(ss / static_cast<T>(d) + static_cast<T>(eps));
        T proj{0};
        for (std::size_t j = 0; j < d; ++j) {
          dg[j] += gr[j] * xr[j] * inv;
          proj += gv[j] * gr[j] * xr[j];
        }
        const T coef = inv * inv * inv * proj / static_cast<T>(d);
        auto dxr = dx.row(i);
        for (std::size_t j = 0; j < d; ++j) dxr[j] = inv * gv[j] * gr[j] - coef * xr[j];
      }
      accumulate(x.id, dx);
      accumulate(gamma.id, dg);
    };
  }
  return r;
}

template <class T>
Var Graph<T>::causal_attention(Var q, Var k, Var v, std::size_t n_heads, double rope_theta) {
  const Tensor<T>& qv = value(q);
  const Tensor<T>& kv = value(k);
  const Tensor<T>& vv = value(v);
  require_rank(qv.shape(), 2, "attention q");
  require_same_shape(qv.shape(), kv.shape(), "attention q/k");
  require_same_shape(qv.shape(), vv.shape(), "attention q/v");
  const std::size_t n = qv.rows(), d = qv.cols();
  if (n_heads == 0 || d % n_heads != 0 || (d / n_heads) % 2 != 0) {
    throw ShapeError("attention: head split of d_model=" + std::to_string(d) + " into " +
                     std::to_string(n_heads) + " heads needs an even head size");
  }
  const std::size_t hd = d / n_heads;
  const RopeTable tab = rope_table(n, hd, rope_theta);
  Tensor<T> qr = apply_rope(qv, n_heads, tab, false);
  Tensor<T> kr = apply_rope(kv, n_heads, tab, false);
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(hd)));

  std::vector<Tensor<T>> probs(n_heads, Tensor<T>({n, n}));
  Tensor<T> out({n, d});
  std::vector<T> row(n);
  for (std::size_t h = 0; h < n_heads; ++h) {
    const std::size_t off = h * hd;
    Tensor<T>& P = probs[h];
    for (std::size_t i = 0; i < n; ++i) {
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j <= i; ++j) {
        T s{0};
        for (std::size_t c = 0; c < hd; ++c) s += qr(i, off + c) * kr(j, off + c);
        row[j] = s * scale;
        mx = std::max(mx, row[j]);
      }
      T sum{0};
      for (std::size_t j = 0; j <= i; ++j) {
        row[j] = std::exp(row[j] - mx);
        sum += row[j];
      }
      const T inv = T{1} / sum;
      for (std::size_t j = 0; j <= i; ++j) {
        const T p = row[j] * inv;
        P(i, j) = p;
        for (std::size_t c = 0; c < hd; ++c) out(i, off + c) += p * vv(j, off + c);
      }
    }
  }

  Var r = push(std::move(out), any_requires({q, k, v}));
  if (nodes_[r.id].requires_grad) {
    nodes_[r.id].backward = [this, q, k, v, n_heads, hd, n, scale, tab, qr = std::move(qr),
                             kr = std::move(kr), probs = std::move(probs)](const Tensor<T>& g) {
      const Tensor<T>& vv = value(v);
      const std::size_t d = n_heads * hd;
      Tensor<T> dqr({n, d}), dkr({n, d}), dv({n, d});
      std::vector<T> dp(n);
      for (std::size_t h = 0; h < n_heads; ++h) {
        const std::size_t off = h * hd;
        const Tensor<T>& P = probs[h];
        for (std::size_t i = 0; i < n; ++i) {
          T rsum{0};
          for (std::size_t j = 0; j <= i; ++j) {
            T acc{0};
            for (std::size_t c = 0; c < hd; ++c) acc += g(i, off + c) * vv(j, off + c);
            dp[j] = acc;
            rsum += acc * P(i, j);
            for (std::size_t c = 0; c < hd; ++c) dv(j, off + c) += P(i, j) * g(i, off + c);
          }
          for (std::size_t j = 0; j <= i; ++j) {
            const T ds = P(i, j) * (dp[j] - rsum) * scale;
            for (std::size_t c = 0; c < hd; ++c) {
              dqr(i, off + c) += ds * kr(j, off + c);
              dkr(j, off + c) += ds * qr(i, off + c);
            }
          }
        }
      }
      if (nodes_[q.id].requires_grad) accumulate(q.id, apply_rope(dqr, n_heads, tab, true));
      if (nodes_[k.id].requires_grad) accumulate(k.id, apply_rope(dkr, n_heads, tab, true));
      accumulate(v.id, dv);
    };
  }
  return r;
}

template <class T>
Var Graph<T>::softmax_rows(Var x) {
  Var r = push(upcycle::softmax_rows(value(x)), any_requires({x}));
  if (nodes_[r.id].requires_grad) {
    nodes_[r.id].backward = [this, x, r](const Tensor<T>& g) {
      const Tensor<T>& y = value(r);
      Tensor<T> dx(y.shape());
      for (std::size_t i = 0; i < y.rows(); ++i) {
        auto yr = y.row(i);
        auto gr = g.row(i);
        T s{0};
        for (std::size_t j = 0; j < yr.size(); ++j) s += gr[j] * yr[j];
        auto dr = dx.row(i);
        for (std::size_t j = 0; j < yr.size(); ++j) dr[j] = yr[j] * (gr[j] - s);
      }
      accumulate(x.id, dx);
    };
  }
  return r;
}

template <class T>
Var Graph<T>::gather_rows(Var x, std::span<const std::size_t> rows) {
  Var r = push(upcycle::gather_rows(value(x), rows), any_requires({x}));
  if (nodes_[r.id].requires_grad) {
    std::vector<std::size_t> idx(rows.begin(), rows.end());
    nodes_[r.id].backward = [this, x, idx = std::move(idx)](const Tensor<T>& g) {
      Tensor<T>& gx = grad_ref(x.id);
      for (std::size_t i = 0; i < idx.size(); ++i) {
        auto dst = gx.row(idx[i]);
        auto src = g.row(i);
        for (std::size_t j = 0; j < src.size(); ++j) dst[j] += src[j];
      }
    };
  }
  return r;
}

template <class T>
Var Graph<T>::top_k_gates(Var probs, const Dispatch& dispatch, bool renormalize) {
  const Tensor<T>& p = value(probs);
  require_rank(p.shape(), 2, "top_k_gates");
  if (dispatch.selected.size() != p.rows()) throw ShapeError("top_k_gates: token count mismatch");
  const std::size_t k = dispatch.selected.empty() ? 0 : dispatch.selected.front().size();
  Tensor<T> out({p.rows(), k});
  std::vector<T> norm(p.rows(), T{1});
  for (std::size_t t = 0; t < p.rows(); ++t) {
    const auto& sel = dispatch.selected[t];
    if (renormalize) {
      T z{0};
      for (std::size_t e : sel) z += p(t, e);
      norm[t] = z;
    }
    for (std::size_t s = 0; s < k; ++s) out(t, s) = p(t, sel[s]) / norm[t];
  }
  Var r = push(std::move(out), any_requires({probs}));
  if (nodes_[r.id].requires_grad) {
    nodes_[r.id].backward = [this, probs, r, renormalize, norm = std::move(norm),
                             selected = dispatch.selected](const Tensor<T>& g) {
      const Tensor<T>& gates = value(r);
      Tensor<T> dp(value(probs).shape());
      for (std::size_t t = 0; t < selected.size(); ++t) {
        const auto& sel = selected[t];
        T proj{0};
        if (renormalize)
          for (std::size_t s = 0; s < sel.size(); ++s) proj += g(t, s) * gates(t, s);
        for (std::size_t s = 0; s < sel.size(); ++s) dp(t, sel[s]) += (g(t, s) - proj) / norm[t];
      }
      accumulate(probs.id, dp);
    };
  }
  return r;
}

template <class T>
Var Graph<T>::combine_experts(std::span<const Var> outputs, Var gates, const Dispatch& dispatch) {
  if (outputs.size() != dispatch.n_experts) throw ShapeError("combine_experts: expert count mismatch");
  const Tensor<T>& gv = value(gates);
  std::size_t width = 0;
  for (std::size_t e = 0; e < outputs.size(); ++e) {
    if (!dispatch.rows[e].empty()) {
      if (!outputs[e].valid()) throw GraphError("combine_experts: routed expert has no output");
      width = value(outputs[e]).cols();
    }
  }
  const std::size_t n = dispatch.selected.size();
  Tensor<T> out({n, width});
  for (std::size_t t = 0; t < n; ++t) {
    auto o = out.row(t);
    for (std::size_t s = 0; s < dispatch.selected[t].size(); ++s) {
      const std::size_t e = dispatch.selected[t][s];
      auto y = value(outputs[e]).row(dispatch.slot_pos[t][s]);
      const T gate = gv(t, s);
      for (std::size_t j = 0; j < width; ++j) o[j] += gate * y[j];
    }
  }
  bool req = any_requires({gates});
  for (Var v : outputs)
    if (v.valid()) req = req || any_requires({v});
  Var r = push(std::move(out), req);
  if (nodes_[r.id].requires_grad) {
    std::vector<Var> outs(outputs.begin(), outputs.end());
    nodes_[r.id].backward = [this, outs = std::move(outs), gates, dispatch, width](const Tensor<T>& g) {
      const Tensor<T>& gv = value(gates);
      Tensor<T> dgates(gv.shape());
      std::vector<Tensor<T>> dy(outs.size());
      for (std::size_t e = 0; e < outs.size(); ++e)
        if (outs[e].valid()) dy[e] = Tensor<T>(value(outs[e]).shape());
      for (std::size_t t = 0; t < dispatch.selected.size(); ++t) {
        auto gr = g.row(t);
        for (std::size_t s = 0; s < dispatch.selected[t].size(); ++s) {
          const std::size_t e = dispatch.selected[t][s];
          const std::size_t pos = dispatch.slot_pos[t][s];
          auto y = value(outs[e]).row(pos);
          auto dyr = dy[e].row(pos);
          const T gate = gv(t, s);
          T acc{0};
          for (std::size_t j = 0; j < width; ++j) {
            acc += gr[j] * y[j];
            dyr[j] += gate * gr[j];
          }
          dgates(t, s) = acc;
        }
      }
      accumulate(gates.id, dgates);
      for (std::size_t e = 0; e < outs.size(); ++e)
        if (outs[e].valid()) accumulate(outs[e].id, dy[e]);
    };
  }
  return r;
}

template <class T>
Var Graph<T>::cross_entropy(Var logits, std::span<const int> targets) {
  const Tensor<T>& lv = value(logits);
  require_rank(lv.shape(), 2, "cross_entropy");
  if (targets.empty() || targets.size() > lv.rows()) {
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                     std::to_string(lv.rows()) + " logit rows");
  }
  const std::size_t n = targets.size(), v = lv.cols();
  double total = 0.0;
  for (std::size_t t = 0; t < n; ++t) {
    if (targets[t] < 0 || static_cast<std::size_t>(targets[t]) >= v)
      throw std::out_of_range("cross_entropy: target id out of range");
    auto row = lv.row(t);
    const T mx = *std::max_element(row.begin(), row.end());
    T sum{0};
    for (T x : row) sum += std::exp(x - mx);
    const T lse = mx + std::log(sum);
    total += static_cast<double>(lse - row[static_cast<std::size_t>(targets[t])]);
  }
  Tensor<T> out({1});
  out[0] = static_cast<T>(total / static_cast<double>(n));
  Var r = push(std::move(out), any_requires({logits}));
  if (nodes_[r.id].requires_grad) {
    std::vector<int> tg(targets.begin(), targets.end());
    nodes_[r.id].backward = [this, logits, tg = std::move(tg)](const Tensor<T>& g) {
      const Tensor<T>& lv = value(logits);
      Tensor<T> dl(lv.shape());
      const T coef = g[0] / static_cast<T>(tg.size());
      for (std::size_t t = 0; t < tg.size(); ++t) {
        auto row = lv.row(t);
        const T mx = *std::max_element(row.begin(), row.end());
        T sum{0};
        for (T x : row) sum += std::exp(x - mx);
        auto dr = dl.row(t);
        for (std::size_t j = 0; j < row.size(); ++j) dr[j] = coef * std::exp(row[j] - mx) / sum;
        dr[static_cast<std::size_t>(tg[t])] -= coef;
      }
      accumulate(logits.id, dl);
    };
  }
  return r;
}

template <class T>
Var Graph<T>::column_weighted_sum(Var x, std::vector<T> weights) {
  const Tensor<T>& xv = value(x);
  require_rank(xv.shape(), 2, "column_weighted_sum");
  if (weights.size() != xv.cols()) throw ShapeError("column_weighted_sum: weight count mismatch");
  T acc{0};
  for (std::size_t t = 0; t < xv.rows(); ++t)
    for (std::size_t i = 0; i < xv.cols(); ++i) acc += weights[i] * xv(t, i);
  Tensor<T> out({1});
  out[0] = acc;
  Var r = push(std::move(out), any_requires({x}));
  if (nodes_[r.id].requires_grad) {
    nodes_[r.id].backward = [this, x, weights = std::move(weights)](const Tensor<T>& g) {
      Tensor<T> dx(value(x).shape());
      for (std::size_t t = 0; t < dx.rows(); ++t)
        for (std::size_t i = 0; i < dx.cols(); ++i) dx(t, i) = g[0] * weights[i];
      accumulate(x.id, dx);
    };
  }
  return r;
}

template <class T>
Var Graph<T>::linear_combination(std::span<const Var> xs, std::span<const T> coeffs) {
  if (xs.empty() || xs.size() != coeffs.size()) throw ShapeError("linear_combination: arity mismatch");
  Tensor<T> out(value(xs[0]).shape());
  bool req = false;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const Tensor<T>& xv = value(xs[i]);
    require_same_shape(out.shape(), xv.shape(), "linear_combination");
    for (std::size_t j = 0; j < xv.size(); ++j) out[j] += coeffs[i] * xv[j];
    req = req || any_requires({xs[i]});
  }
  Var r = push(std::move(out), req);
  if (nodes_[r.id].requires_grad) {
    std::vector<Var> in(xs.begin(), xs.end());
    std::vector<T> c(coeffs.begin(), coeffs.end());
    nodes_[r.id].backward = [this, in = std::move(in), c = std::move(c)](const Tensor<T>& g) {
      for (std::size_t i = 0; i < in.size(); ++i) accumulate(in[i].id, upcycle::scale(g, c[i]));
    };
  }
  return r;
}

template <class T>
void Graph<T>::backward(Var loss) {
  if (!taped()) throw GraphError("backward: graph was built without gradient taping");
  if (value(loss).size() != 1) throw GraphError("backward: loss must be a scalar");
  for (auto& n : nodes_) n.grad = Tensor<T>();
  if (!nodes_[loss.id].requires_grad) return;
  nodes_[loss.id].grad = Tensor<T>::full(value(loss).shape(), T{1});
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (n.backward && !n.grad.empty()) n.backward(n.grad);
  }
}

template <class T>
Tensor<T> Graph<T>::grad(Var v) const {
  const Node& n = nodes_.at(v.id);
  if (n.grad.empty()) return Tensor<T>(value(v).shape());
  return n.grad;
}

template <class T>
std::map<std::string, Tensor<T>> Graph<T>::parameter_gradients() const {
  std::map<std::string, Tensor<T>> out;
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    const Node& n = nodes_[i];
    if (!n.trainable) continue;
    Tensor<T> g = grad(Var{i});
    auto it = out.find(n.name);
    if (it == out.end()) {
      out.emplace(n.name, std::move(g));
    } else {
      for (std::size_t j = 0; j < g.size(); ++j) it->second[j] += g[j];
    }
  }
  return out;
}

template class Graph<float>;
template class Graph<double>;

}  // namespace upcycle
