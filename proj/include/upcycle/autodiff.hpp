#pragma once

#include <cstddef>
#include <functional>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "upcycle/tensor.hpp"

namespace upcycle {

class GraphError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

struct Var {
  std::size_t id = static_cast<std::size_t>(-1);
  bool valid() const noexcept { return id != static_cast<std::size_t>(-1); }
};

// Token-to-expert assignment for one MoE layer. `selected[t]` lists the
// experts chosen for token t (highest probability first); `rows[e]` lists the
// tokens routed to expert e in ascending order and `slot_pos[t][s]` is the
// position of token t inside rows[selected[t][s]].
struct Dispatch {
  std::size_t n_experts = 0;
  std::vector<std::vector<std::size_t>> selected;
  std::vector<std::vector<std::size_t>> rows;
  std::vector<std::vector<std::size_t>> slot_pos;

  static Dispatch from_selection(std::vector<std::vector<std::size_t>> selected,
                                 std::size_t n_experts);
};

// Tensor-level reverse-mode tape. Every op evaluates eagerly; in training mode
// it also records a closure that propagates the output gradient to whichever
// inputs require one. In inference mode nothing is recorded and `backward`
// refuses to run.
template <class T>
class Graph {
 public:
  enum class Mode { inference, training };

  explicit Graph(Mode mode = Mode::inference) : mode_(mode) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Mode mode() const noexcept { return mode_; }
  bool taped() const noexcept { return mode_ == Mode::training; }

  Var constant(Tensor<T> value);
  // Non-owning: `value` must outlive the graph.
  Var parameter(const Tensor<T>& value, std::string name, bool trainable);

  const Tensor<T>& value(Var v) const;
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }

  Var embedding(Var table, std::span<const int> tokens);
  Var matmul(Var a, Var b);
  Var matmul_nt(Var a, Var b);
  Var add(Var a, Var b);
  Var silu(Var x);
  Var rms_norm(Var x, Var gamma, double eps);
  // Multi-head causal self-attention with rotary position encoding applied to
  // q and k. Inputs are [T x d_model] projections.
  Var causal_attention(Var q, Var k, Var v, std::size_t n_heads, double rope_theta);
  Var softmax_rows(Var x);
  Var gather_rows(Var x, std::span<const std::size_t> rows);
  // [T x k] gate values picked from `probs` by the dispatch.
  Var top_k_gates(Var probs, const Dispatch& dispatch, bool renormalize);
  // out[t] = sum_s gates[t,s] * outputs[e][slot_pos[t][s]] with e = selected[t][s].
  // `outputs[e]` may be invalid for experts that received no tokens.
  Var combine_experts(std::span<const Var> outputs, Var gates, const Dispatch& dispatch);
  // Mean over the first targets.size() rows of -log softmax(logits)[target].
  Var cross_entropy(Var logits, std::span<const int> targets);
  // Scalar sum_{t,i} weights[i] * x[t,i].
  Var column_weighted_sum(Var x, std::vector<T> weights);
  // sum_i coeffs[i] * xs[i]; all xs share one shape.
  Var linear_combination(std::span<const Var> xs, std::span<const T> coeffs);

  // Seeds d(loss)/d(loss) = 1 and propagates; loss must hold one element.
  void backward(Var loss);

  // Gradient w.r.t. a node; zeros of the node's shape if nothing reached it.
  Tensor<T> grad(Var v) const;
  // Gradients of every trainable parameter keyed by parameter name.
  std::map<std::string, Tensor<T>> parameter_gradients() const;

 private:
  struct Node {
    Tensor<T> owned;
    const Tensor<T>* external = nullptr;
    Tensor<T> grad;
    bool requires_grad = false;
    bool trainable = false;
    std::string name;
    std::function<void(const Tensor<T>&)> backward;
  };

  Var push(Tensor<T> value, bool requires_grad);
  bool any_requires(std::initializer_list<Var> vs) const;
  Tensor<T>& grad_ref(std::size_t id);
  void accumulate(std::size_t id, const Tensor<T>& g);

  Mode mode_;
  std::vector<Node> nodes_;
};

}  // namespace upcycle
