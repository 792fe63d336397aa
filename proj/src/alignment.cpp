#include "upcycle/alignment.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "upcycle/log.hpp"

namespace upcycle {

Permutation::Permutation(std::size_t layer, std::vector<std::size_t> map)
    : layer_(layer), map_(std::move(map)) {
  std::vector<char> seen(map_.size(), 0);
  for (std::size_t v : map_) {
    if (v >= map_.size() || seen[v]) {
      throw std::invalid_argument("permutation for layer " + std::to_string(layer_) +
                                  " is not a bijection on [0, " + std::to_string(map_.size()) + ")");
    }
    seen[v] = 1;
  }
}

Permutation Permutation::identity(std::size_t layer, std::size_t n) {
  std::vector<std::size_t> m(n);
  std::iota(m.begin(), m.end(), std::size_t{0});
  return Permutation(layer, std::move(m));
}

bool Permutation::is_identity() const {
  for (std::size_t j = 0; j < map_.size(); ++j)
    if (map_[j] != j) return false;
  return true;
}

Permutation Permutation::inverse() const {
  std::vector<std::size_t> inv(map_.size());
  for (std::size_t j = 0; j < map_.size(); ++j) inv[map_[j]] = j;
  return Permutation(layer_, std::move(inv));
}

// ---- activations -----------------------------------------------------------

template <class T>
std::map<std::size_t, ActivationMatrix<T>> collect_activations(const DenseCheckpoint<T>& model,
                                                               const TokenSequences& calib) {
  if (calib.empty()) throw std::invalid_argument("collect_activations: empty calibration set");
  std::set<std::size_t> layers;
  for (std::size_t l = 0; l < model.config.n_layers; ++l) layers.insert(l);
  std::size_t total = 0;
  for (const auto& s : calib) total += s.size();

  std::map<std::size_t, ActivationMatrix<T>> out;
  for (std::size_t l : layers) out[l] = {model.model_id, l, Tensor<T>({total, model.config.d_ffn})};
  std::size_t row = 0;
  for (const auto& seq : calib) {
    auto traced = forward_with_trace(model, seq, layers);
    for (auto& [l, h] : traced.ffn_hidden) {
      auto dst = out[l].data.data().subspan(row * h.cols(), h.size());
      std::copy(h.data().begin(), h.data().end(), dst.begin());
    }
    row += seq.size();
  }
  if (total < model.config.d_ffn) {
    log_warning("collect_activations: " + std::to_string(total) + " calibration tokens for " +
                std::to_string(model.config.d_ffn) + " neurons; matching may be degenerate");
  }
  return out;
}

namespace {

// Column-major copy in double, optionally z-scored per column.
template <class T>
std::vector<double> columns(const Tensor<T>& a, bool normalize) {
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<double> out(m * n);
  for (std::size_t s = 0; s < m; ++s)
    for (std::size_t j = 0; j < n; ++j) out[j * m + s] = static_cast<double>(a(s, j));
  if (normalize) {
    for (std::size_t j = 0; j < n; ++j) {
      double* col = out.data() + j * m;
      double mean = 0.0;
      for (std::size_t s = 0; s < m; ++s) mean += col[s];
      mean /= static_cast<double>(m);
      double var = 0.0;
      for (std::size_t s = 0; s < m; ++s) var += (col[s] - mean) * (col[s] - mean);
      const double sd = std::sqrt(var / static_cast<double>(m));
      for (std::size_t s = 0; s < m; ++s) col[s] = sd > 0.0 ? (col[s] - mean) / sd : 0.0;
    }
  }
  return out;
}

}  // namespace

template <class T>
CostMatrix build_cost_matrix(const ActivationMatrix<T>& anchor, const ActivationMatrix<T>& target,
                             bool normalize) {
  if (anchor.layer != target.layer) {
    throw std::invalid_argument("build_cost_matrix: layers differ (" + std::to_string(anchor.layer) + " vs " +
                                std::to_string(target.layer) + ")");
  }
  require_same_shape(anchor.data.shape(), target.data.shape(), "build_cost_matrix");
  const std::size_t m = anchor.data.rows(), n = anchor.data.cols();
  const auto a = columns(anchor.data, normalize);
  const auto b = columns(target.data, normalize);
  CostMatrix c{TensorD({n, n})};
  for (std::size_t j = 0; j < n; ++j) {
    const double* aj = a.data() + j * m;
    for (std::size_t k = 0; k < n; ++k) {
      const double* bk = b.data() + k * m;
      double acc = 0.0;
      for (std::size_t s = 0; s < m; ++s) {
        const double d = aj[s] - bk[s];
        acc += d * d;
      }
      c.data(j, k) = acc;
    }
  }
  return c;
}

double assignment_cost(const CostMatrix& c, const Permutation& p) {
  if (p.size() != c.size()) throw std::invalid_argument("assignment_cost: size mismatch");
  double total = 0.0;
  for (std::size_t j = 0; j < p.size(); ++j) total += c(j, p[j]);
  return total;
}

template <class T>
double permuted_frobenius_objective(const Tensor<T>& anchor, const Tensor<T>& target, const Permutation& p) {
  require_same_shape(anchor.shape(), target.shape(), "permuted_frobenius_objective");
  if (p.size() != anchor.cols()) throw std::invalid_argument("permuted_frobenius_objective: size mismatch");
  double total = 0.0;
  for (std::size_t s = 0; s < anchor.rows(); ++s) {
    for (std::size_t j = 0; j < anchor.cols(); ++j) {
      const double d = static_cast<double>(anchor(s, j)) - static_cast<double>(target(s, p[j]));
      total += d * d;
    }
  }
  return total;
}

// ---- LAP -------------------------------------------------------------------

namespace {

void check_cost(const CostMatrix& c) {
  if (c.data.rank() != 2 || c.data.rows() != c.data.cols()) {
    throw std::invalid_argument("LAP: cost matrix must be square, got " + shape_str(c.data.shape()));
  }
  if (c.size() == 0) throw std::invalid_argument("LAP: empty cost matrix");
  if (!all_finite(c.data)) throw std::invalid_argument("LAP: cost matrix has non-finite entries");
}

// Moves the matching to the lexicographically smallest optimum. Optimal
// assignments are exactly the perfect matchings on tight edges of an optimal
// dual, so rows are fixed greedily, each taking the smallest tight column that
// still admits a perfect matching of the remaining rows.
void lexicographic_refine(const CostMatrix& c, const std::vector<double>& u, const std::vector<double>& v,
                          std::vector<std::size_t>& row_to_col) {
  const std::size_t n = c.size();
  double scale = 1.0;
  for (double x : c.data.data()) scale = std::max(scale, std::abs(x));
  const double tol = 1e-12 * scale * static_cast<double>(n);
  auto tight = [&](std::size_t i, std::size_t j) { return c(i, j) - u[i] - v[j] <= tol; };

  std::vector<std::size_t> col_to_row(n);
  for (std::size_t i = 0; i < n; ++i) col_to_row[row_to_col[i]] = i;

  std::vector<std::size_t> queue;
  std::vector<char> visited(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t current = row_to_col[i];
    for (std::size_t k = 0; k < current; ++k) {
      if (!tight(i, k) || col_to_row[k] < i) continue;
      // Row r loses column k; look for an alternating path from r to the
      // column row i gives up, over unfixed rows and tight edges.
      const std::size_t r = col_to_row[k];
      std::fill(visited.begin(), visited.end(), 0);
      visited[k] = 1;
      queue.assign(1, r);
      std::vector<std::size_t> parent_row(n, n);  // column -> row that reached it
      bool found = false;
      for (std::size_t qi = 0; qi < queue.size() && !found; ++qi) {
        const std::size_t row = queue[qi];
        for (std::size_t col = 0; col < n; ++col) {
          if (visited[col] || !tight(row, col)) continue;
          if (col != current && col_to_row[col] <= i) continue;
          visited[col] = 1;
          parent_row[col] = row;
          if (col == current) {
            found = true;
            break;
          }
          queue.push_back(col_to_row[col]);
        }
      }
      if (!found) continue;
      // Augment back along the path.
      std::size_t col = current;
      while (true) {
        const std::size_t row = parent_row[col];
        const std::size_t prev = row_to_col[row];
        row_to_col[row] = col;
        col_to_row[col] = row;
        if (row == r) break;
        col = prev;
      }
      row_to_col[i] = k;
      col_to_row[k] = i;
      break;
    }
  }
}

}  // namespace

Assignment solve_lap(const CostMatrix& c) {
  check_cost(c);
  const std::size_t n = c.size();
  const double inf = std::numeric_limits<double>::infinity();
  // Shortest augmenting path Hungarian, 1-indexed with a virtual column 0.
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0), minv(n + 1);
  std::vector<std::size_t> p(n + 1, 0), way(n + 1, 0);
  std::vector<char> used(n + 1);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::fill(minv.begin(), minv.end(), inf);
    std::fill(used.begin(), used.end(), 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = p[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = c(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<std::size_t> row_to_col(n);
  for (std::size_t j = 1; j <= n; ++j) row_to_col[p[j] - 1] = j - 1;
  std::vector<double> ur(u.begin() + 1, u.end()), vc(v.begin() + 1, v.end());
  lexicographic_refine(c, ur, vc, row_to_col);

  Assignment a{Permutation(0, std::move(row_to_col)), 0.0};
  a.total_cost = assignment_cost(c, a.perm);
  return a;
}

Assignment brute_force_lap(const CostMatrix& c) {
  check_cost(c);
  const std::size_t n = c.size();
  if (n > 8) throw std::invalid_argument("brute_force_lap: n=" + std::to_string(n) + " exceeds 8");
  std::vector<std::size_t> p(n), best;
  std::iota(p.begin(), p.end(), std::size_t{0});
  double best_cost = std::numeric_limits<double>::infinity();
  do {
    double cost = 0.0;
    for (std::size_t j = 0; j < n; ++j) cost += c(j, p[j]);
    if (cost < best_cost) {
      best_cost = cost;
      best = p;
    }
  } while (std::next_permutation(p.begin(), p.end()));
  return {Permutation(0, std::move(best)), best_cost};
}

template <class T>
FfnWeights<T> remap_ffn(const FfnWeights<T>& ffn, const Permutation& p) {
  require_rank(ffn.up.shape(), 2, "remap_ffn up");
  require_rank(ffn.down.shape(), 2, "remap_ffn down");
  if (p.size() != ffn.up.cols() || p.size() != ffn.down.rows()) {
    throw std::invalid_argument("remap_ffn: permutation of length " + std::to_string(p.size()) +
                                " for d_ffn " + std::to_string(ffn.up.cols()));
  }
  return {gather_cols(ffn.up, std::span<const std::size_t>(p.map())),
          gather_rows(ffn.down, std::span<const std::size_t>(p.map()))};
}

template <class T>
AlignmentResult<T> align_expert(const std::map<std::size_t, ActivationMatrix<T>>& anchor_acts,
                                const DenseCheckpoint<T>& target, const TokenSequences& calib,
                                const AlignOptions& options) {
  const auto target_acts = collect_activations(target, calib);
  AlignmentResult<T> out;
  for (std::size_t l = 0; l < target.config.n_layers; ++l) {
    auto it = anchor_acts.find(l);
    if (it == anchor_acts.end()) throw std::invalid_argument("align_expert: anchor activations missing layer");
    const CostMatrix c = build_cost_matrix(it->second, target_acts.at(l), options.normalize_activations);
    Assignment a = solve_lap(c);
    a.perm.set_layer(l);
    const double identity = assignment_cost(c, Permutation::identity(l, c.size()));
    out.ffns.push_back(remap_ffn(target.layers[l].ffn, a.perm));
    out.costs.push_back({l, identity, a.total_cost});
    out.perms.push_back(std::move(a.perm));
  }
  return out;
}

template <class T>
AlignmentResult<T> align_expert(const DenseCheckpoint<T>& anchor, const DenseCheckpoint<T>& target,
                                const TokenSequences& calib, const AlignOptions& options) {
  if (!(anchor.config == target.config)) {
    throw std::invalid_argument("align_expert: '" + target.model_id + "' is not architecture-compatible with anchor '" +
                                anchor.model_id + "'");
  }
  return align_expert(collect_activations(anchor, calib), target, calib, options);
}

// ---- files -----------------------------------------------------------------

nlohmann::json to_json(const PermutationFile& f) {
  nlohmann::json j;
  j["model_id"] = f.model_id;
  j["anchor_id"] = f.anchor_id;
  j["layers"] = nlohmann::json::array();
  for (const auto& p : f.layers) j["layers"].push_back({{"layer", p.layer()}, {"perm", p.map()}});
  j["costs"] = nlohmann::json::array();
  for (const auto& c : f.costs) {
    j["costs"].push_back(
        {{"layer", c.layer}, {"identity_cost", c.identity_cost}, {"assigned_cost", c.assigned_cost}});
  }
  return j;
}

PermutationFile permutation_file_from_json(const nlohmann::json& j) {
  PermutationFile f;
  f.model_id = j.at("model_id").get<std::string>();
  f.anchor_id = j.at("anchor_id").get<std::string>();
  for (const auto& l : j.at("layers")) {
    f.layers.emplace_back(l.at("layer").get<std::size_t>(), l.at("perm").get<std::vector<std::size_t>>());
  }
  for (const auto& c : j.at("costs")) {
    f.costs.push_back({c.at("layer").get<std::size_t>(), c.at("identity_cost").get<double>(),
                       c.at("assigned_cost").get<double>()});
  }
  return f;
}

void save_permutation_file(const PermutationFile& f, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write permutation file " + path);
  out << to_json(f).dump(2) << '\n';
  if (!out) throw std::runtime_error("write failed for " + path);
}

PermutationFile load_permutation_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open permutation file " + path);
  return permutation_file_from_json(nlohmann::json::parse(in));
}

#define UPCYCLE_INSTANTIATE(T)                                                                             \
  template std::map<std::size_t, ActivationMatrix<T>> collect_activations(const DenseCheckpoint<T>&,       \
                                                                          const TokenSequences&);          \
  template CostMatrix build_cost_matrix(const ActivationMatrix<T>&, const ActivationMatrix<T>&, bool);     \
  template double permuted_frobenius_objective(const Tensor<T>&, const Tensor<T>&, const Permutation&);    \
  template FfnWeights<T> remap_ffn(const FfnWeights<T>&, const Permutation&);                              \
  template AlignmentResult<T> align_expert(const std::map<std::size_t, ActivationMatrix<T>>&,              \
                                           const DenseCheckpoint<T>&, const TokenSequences&,               \
                                           const AlignOptions&);                                           \
  template AlignmentResult<T> align_expert(const DenseCheckpoint<T>&, const DenseCheckpoint<T>&,           \
                                           const TokenSequences&, const AlignOptions&);

UPCYCLE_INSTANTIATE(float)
UPCYCLE_INSTANTIATE(double)

#undef UPCYCLE_INSTANTIATE

}  // namespace upcycle
