#include "upcycle/fusion.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>
#include <unordered_map>

#include "upcycle/log.hpp"

namespace upcycle {

std::string to_string(AttentionStrategy s) { return s == AttentionStrategy::slerp ? "slerp" : "linear"; }
std::string to_string(EmbeddingStrategy s) {
  return s == EmbeddingStrategy::selective ? "selective" : "linear";
}

// ---- merge tree ------------------------------------------------------------

MergeTree MergeTree::make_leaf(std::size_t index) {
  MergeTree t;
  t.leaf = index;
  return t;
}

MergeTree MergeTree::make_node(MergeTree left, MergeTree right) {
  MergeTree t;
  t.children.push_back(std::move(left));
  t.children.push_back(std::move(right));
  return t;
}

namespace {

MergeTree balanced_range(std::size_t begin, std::size_t end) {
  if (end - begin == 1) return MergeTree::make_leaf(begin);
  const std::size_t mid = begin + (end - begin) / 2;
  return MergeTree::make_node(balanced_range(begin, mid), balanced_range(mid, end));
}

class TreeParser {
 public:
  explicit TreeParser(const std::string& s) : s_(s) {}

  MergeTree parse() {
    MergeTree t = node();
    skip_ws();
    if (pos_ != s_.size()) fail("trailing characters");
    return t;
  }

 private:
  MergeTree node() {
    skip_ws();
    if (pos_ >= s_.size()) fail("unexpected end");
    if (s_[pos_] == '(') {
      ++pos_;
      MergeTree left = node();
      expect(',');
      MergeTree right = node();
      expect(')');
      return MergeTree::make_node(std::move(left), std::move(right));
    }
    if (!std::isdigit(static_cast<unsigned char>(s_[pos_]))) fail("expected index or '('");
    std::size_t v = 0;
    while (pos_ < s_.size() && std::isdigit(static_cast<unsigned char>(s_[pos_]))) {
      v = v * 10 + static_cast<std::size_t>(s_[pos_] - '0');
      ++pos_;
    }
    return MergeTree::make_leaf(v);
  }

  void expect(char c) {
    skip_ws();
    if (pos_ >= s_.size() || s_[pos_] != c) fail(std::string("expected '") + c + "'");
    ++pos_;
  }

  void skip_ws() {
    while (pos_ < s_.size() && std::isspace(static_cast<unsigned char>(s_[pos_]))) ++pos_;
  }

  [[noreturn]] void fail(const std::string& what) {
    throw std::invalid_argument("merge tree '" + s_ + "': " + what + " at offset " +
                                std::to_string(pos_));
  }

  const std::string& s_;
  std::size_t pos_ = 0;
};

}  // namespace

MergeTree MergeTree::balanced(std::size_t n) {
  if (n == 0) throw std::invalid_argument("merge tree: need at least one model");
  return balanced_range(0, n);
}

MergeTree MergeTree::parse(const std::string& text) { return TreeParser(text).parse(); }

std::string MergeTree::to_string() const {
  if (leaf) return std::to_string(*leaf);
  return "(" + children[0].to_string() + "," + children[1].to_string() + ")";
}

std::vector<std::size_t> MergeTree::leaves() const {
  if (leaf) return {*leaf};
  auto l = children[0].leaves();
  auto r = children[1].leaves();
  l.insert(l.end(), r.begin(), r.end());
  return l;
}

// ---- recipe ----------------------------------------------------------------

MergeRecipe MergeRecipe::uniform(std::size_t n_models) {
  MergeRecipe r;
  r.weights.assign(n_models, 1.0 / static_cast<double>(n_models));
  r.tree = MergeTree::balanced(n_models);
  return r;
}

void MergeRecipe::validate(std::size_t n_models) const {
  if (weights.size() != n_models) {
    throw std::invalid_argument("merge recipe: " + std::to_string(weights.size()) +
                                " weights for " + std::to_string(n_models) + " models");
  }
  double sum = 0.0;
  for (double w : weights) {
    if (!(w >= 0.0) || !std::isfinite(w)) throw std::invalid_argument("merge recipe: negative weight");
    sum += w;
  }
  if (std::abs(sum - 1.0) > 1e-9) {
    throw std::invalid_argument("merge recipe: weights sum to " + std::to_string(sum) + ", not 1");
  }
  if (anchor_index >= n_models) throw std::invalid_argument("merge recipe: anchor_index out of range");
  if (!(slerp_dot_threshold > 0.0 && slerp_dot_threshold < 1.0)) {
    throw std::invalid_argument("merge recipe: slerp_dot_threshold must lie in (0, 1)");
  }
  auto leaves = tree.leaves();
  std::sort(leaves.begin(), leaves.end());
  bool ok = leaves.size() == n_models;
  for (std::size_t i = 0; ok && i < leaves.size(); ++i) ok = leaves[i] == i;
  if (!ok) {
    throw std::invalid_argument("merge recipe: tree " + tree.to_string() +
                                " must use each model index exactly once");
  }
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

double parse_double(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  double d = 0;
  try {
    d = std::stod(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != v.size()) throw std::invalid_argument("merge recipe: bad number for " + key + ": " + v);
  return d;
}

}  // namespace

MergeRecipe parse_recipe(const std::string& text) {
  MergeRecipe r;
  bool have_tree = false;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument("merge recipe line " + std::to_string(lineno) + ": missing '='");
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string val = trim(line.substr(eq + 1));
    if (key == "weights") {
      r.weights.clear();
      std::istringstream vs(val);
      std::string item;
      while (std::getline(vs, item, ',')) r.weights.push_back(parse_double(key, trim(item)));
    } else if (key == "anchor_index") {
      r.anchor_index = static_cast<std::size_t>(parse_double(key, val));
    } else if (key == "slerp_dot_threshold") {
      r.slerp_dot_threshold = parse_double(key, val);
    } else if (key == "attention_strategy") {
      if (val == "slerp") r.attention_strategy = AttentionStrategy::slerp;
      else if (val == "linear") r.attention_strategy = AttentionStrategy::linear;
      else throw std::invalid_argument("merge recipe: unknown attention_strategy " + val);
    } else if (key == "embedding_strategy") {
      if (val == "selective") r.embedding_strategy = EmbeddingStrategy::selective;
      else if (val == "linear") r.embedding_strategy = EmbeddingStrategy::linear;
      else throw std::invalid_argument("merge recipe: unknown embedding_strategy " + val);
    } else if (key == "tree") {
      r.tree = MergeTree::parse(val);
      have_tree = true;
    } else {
      throw std::invalid_argument("merge recipe line " + std::to_string(lineno) + ": unknown key " + key);
    }
  }
  if (!have_tree && !r.weights.empty()) r.tree = MergeTree::balanced(r.weights.size());
  r.validate(r.weights.size());
  return r;
}

MergeRecipe load_recipe(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open merge recipe " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_recipe(ss.str());
}

std::string format_recipe(const MergeRecipe& r) {
  std::ostringstream os;
  os << std::setprecision(17);
  os << "weights = ";
  for (std::size_t i = 0; i < r.weights.size(); ++i) os << (i ? ", " : "") << r.weights[i];
  os << "\nanchor_index = " << r.anchor_index << "\nslerp_dot_threshold = " << r.slerp_dot_threshold
     << "\nattention_strategy = " << to_string(r.attention_strategy)
     << "\nembedding_strategy = " << to_string(r.embedding_strategy) << "\ntree = " << r.tree.to_string()
     << "\n";
  return os.str();
}

// ---- tensor merges ---------------------------------------------------------

template <class T>
Tensor<T> slerp(const Tensor<T>& w1, const Tensor<T>& w2, double t, double dot_threshold) {
  require_same_shape(w1.shape(), w2.shape(), "slerp");
  if (!(t >= 0.0 && t <= 1.0)) throw std::invalid_argument("slerp: t outside [0, 1]");
  const double n1 = frobenius_norm(w1), n2 = frobenius_norm(w2);
  if (n1 == 0.0 || n2 == 0.0) throw DegenerateInputError("slerp: zero-norm input");
  const double c = std::clamp(dot(w1, w2) / (n1 * n2), -1.0, 1.0);
  double a = 1.0 - t, b = t;
  if (std::abs(c) <= dot_threshold) {
    const double omega = std::acos(c);
    const double s = std::sin(omega);
    a = std::sin((1.0 - t) * omega) / s;
    b = std::sin(t * omega) / s;
  }
  Tensor<T> out(w1.shape());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = static_cast<T>(a * static_cast<double>(w1[i]) + b * static_cast<double>(w2[i]));
  return out;
}

namespace {

template <class T>
std::pair<Tensor<T>, double> reduce_tree(std::span<const Tensor<T>> tensors,
                                         std::span<const double> weights, const MergeTree& node,
                                         double threshold) {
  if (node.leaf) {
    const std::size_t i = *node.leaf;
    if (i >= tensors.size()) throw std::invalid_argument("nary_slerp: tree index out of range");
    return {tensors[i], weights[i]};
  }
  auto [left, a] = reduce_tree(tensors, weights, node.children[0], threshold);
  auto [right, b] = reduce_tree(tensors, weights, node.children[1], threshold);
  if (b == 0.0) return {std::move(left), a};
  if (a == 0.0) return {std::move(right), b};
  return {slerp(left, right, b / (a + b), threshold), a + b};
}

}  // namespace

template <class T>
Tensor<T> nary_slerp(std::span<const Tensor<T>> tensors, std::span<const double> weights,
                     const MergeTree& tree, double dot_threshold) {
  if (tensors.size() < 2) throw std::invalid_argument("nary_slerp: need at least two tensors");
  if (weights.size() != tensors.size()) throw std::invalid_argument("nary_slerp: weight count mismatch");
  for (const auto& t : tensors) require_same_shape(tensors[0].shape(), t.shape(), "nary_slerp");
  return reduce_tree(tensors, weights, tree, dot_threshold).first;
}

template <class T>
Tensor<T> linear_merge(std::span<const Tensor<T>> tensors, std::span<const double> weights) {
  if (tensors.empty()) throw std::invalid_argument("linear_merge: no tensors");
  if (weights.size() != tensors.size()) throw std::invalid_argument("linear_merge: weight count mismatch");
  for (const auto& t : tensors) require_same_shape(tensors[0].shape(), t.shape(), "linear_merge");
  std::vector<double> acc(tensors[0].size(), 0.0);
  for (std::size_t m = 0; m < tensors.size(); ++m)
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += weights[m] * static_cast<double>(tensors[m][i]);
  Tensor<T> out(tensors[0].shape());
  for (std::size_t i = 0; i < acc.size(); ++i) out[i] = static_cast<T>(acc[i]);
  return out;
}

namespace {

struct UnionVocab {
  std::vector<std::string> tokens;
  // holders[v] = list of (model, row) holding merged token v, in model order
  std::vector<std::vector<std::pair<std::size_t, std::size_t>>> holders;
};

template <class T>
UnionVocab union_vocab(std::span<const Tensor<T>> embeddings,
                       std::span<const std::vector<std::string>> vocabs, std::size_t anchor) {
  if (embeddings.empty() || embeddings.size() != vocabs.size()) {
    throw std::invalid_argument("embedding merge: need one vocabulary per embedding");
  }
  if (anchor >= embeddings.size()) throw std::invalid_argument("embedding merge: anchor out of range");
  const std::size_t d = embeddings[0].cols();
  std::vector<std::unordered_map<std::string, std::size_t>> lookup(vocabs.size());
  for (std::size_t m = 0; m < vocabs.size(); ++m) {
    if (embeddings[m].cols() != d) {
      throw ShapeError("embedding merge: model " + std::to_string(m) + " has width " +
                       std::to_string(embeddings[m].cols()) + ", expected " + std::to_string(d));
    }
    if (embeddings[m].rows() != vocabs[m].size()) {
      throw ShapeError("embedding merge: model " + std::to_string(m) + " rows != vocabulary size");
    }
    for (std::size_t r = 0; r < vocabs[m].size(); ++r) {
      if (!lookup[m].emplace(vocabs[m][r], r).second) {
        throw std::invalid_argument("embedding merge: duplicate token '" + vocabs[m][r] + "' in model " +
                                    std::to_string(m));
      }
    }
  }
  UnionVocab u;
  std::set<std::string> seen;
  u.tokens = vocabs[anchor];
  seen.insert(u.tokens.begin(), u.tokens.end());
  for (std::size_t m = 0; m < vocabs.size(); ++m) {
    if (m == anchor) continue;
    std::vector<std::string> extra;
    for (const auto& tok : vocabs[m])
      if (!seen.count(tok)) extra.push_back(tok);
    std::sort(extra.begin(), extra.end());
    seen.insert(extra.begin(), extra.end());
    u.tokens.insert(u.tokens.end(), extra.begin(), extra.end());
  }
  u.holders.resize(u.tokens.size());
  for (std::size_t v = 0; v < u.tokens.size(); ++v)
    for (std::size_t m = 0; m < vocabs.size(); ++m)
      if (auto it = lookup[m].find(u.tokens[v]); it != lookup[m].end()) u.holders[v].emplace_back(m, it->second);
  return u;
}

}  // namespace

template <class T>
EmbeddingMerge<T> selective_embedding_merge(std::span<const Tensor<T>> embeddings,
                                            std::span<const std::vector<std::string>> vocabs,
                                            std::span<const double> weights, std::size_t anchor_index) {
  if (weights.size() != embeddings.size()) throw std::invalid_argument("embedding merge: weight count mismatch");
  const UnionVocab u = union_vocab(embeddings, vocabs, anchor_index);
  const std::size_t d = embeddings[0].cols();
  EmbeddingMerge<T> out{Tensor<T>({u.tokens.size(), d}), u.tokens};
  std::vector<double> acc(d);
  for (std::size_t v = 0; v < u.tokens.size(); ++v) {
    const auto& hold = u.holders[v];
    auto dst = out.embedding.row(v);
    if (hold.size() == 1) {
      auto src = embeddings[hold[0].first].row(hold[0].second);
      std::copy(src.begin(), src.end(), dst.begin());
      continue;
    }
    double mass = 0.0;
    for (const auto& [m, r] : hold) mass += weights[m];
    std::fill(acc.begin(), acc.end(), 0.0);
    for (const auto& [m, r] : hold) {
      const double w = mass > 0.0 ? weights[m] / mass : 1.0 / static_cast<double>(hold.size());
      auto src = embeddings[m].row(r);
      for (std::size_t j = 0; j < d; ++j) acc[j] += w * static_cast<double>(src[j]);
    }
    for (std::size_t j = 0; j < d; ++j) dst[j] = static_cast<T>(acc[j]);
  }
  return out;
}

template <class T>
EmbeddingMerge<T> linear_embedding_merge(std::span<const Tensor<T>> embeddings,
                                         std::span<const std::vector<std::string>> vocabs,
                                         std::span<const double> weights, std::size_t anchor_index) {
  if (weights.size() != embeddings.size()) throw std::invalid_argument("embedding merge: weight count mismatch");
  const UnionVocab u = union_vocab(embeddings, vocabs, anchor_index);
  const std::size_t d = embeddings[0].cols();
  EmbeddingMerge<T> out{Tensor<T>({u.tokens.size(), d}), u.tokens};
  std::vector<double> acc(d);
  for (std::size_t v = 0; v < u.tokens.size(); ++v) {
    std::fill(acc.begin(), acc.end(), 0.0);
    for (const auto& [m, r] : u.holders[v]) {
      auto src = embeddings[m].row(r);
      for (std::size_t j = 0; j < d; ++j) acc[j] += weights[m] * static_cast<double>(src[j]);
    }
    auto dst = out.embedding.row(v);
    for (std::size_t j = 0; j < d; ++j) dst[j] = static_cast<T>(acc[j]);
  }
  return out;
}

// ---- backbone --------------------------------------------------------------

bool architecture_compatible(const TransformerConfig& a, const TransformerConfig& b) {
  TransformerConfig x = a, y = b;
  x.vocab_size = y.vocab_size = 0;
  return x == y;
}

template <class T>
void BackboneCheckpoint<T>::validate() const {
  TransformerConfig probe = config;
  probe.validate();
  if (vocab.size() != config.vocab_size) throw ShapeError("backbone: vocabulary size mismatch");
  if (layers.size() != config.n_layers) throw ShapeError("backbone: layer count mismatch");
  const std::size_t d = config.d_model;
  const Shape sq{d, d}, vec{d};
  require_same_shape(embedding.shape(), Shape{config.vocab_size, d}, "backbone embedding");
  require_same_shape(final_gamma.shape(), vec, "backbone final_gamma");
  for (const auto& L : layers) {
    require_same_shape(L.attn.wq.shape(), sq, "backbone attn.wq");
    require_same_shape(L.attn.wk.shape(), sq, "backbone attn.wk");
    require_same_shape(L.attn.wv.shape(), sq, "backbone attn.wv");
    require_same_shape(L.attn.wo.shape(), sq, "backbone attn.wo");
    require_same_shape(L.attn_gamma.shape(), vec, "backbone attn_gamma");
    require_same_shape(L.ffn_gamma.shape(), vec, "backbone ffn_gamma");
  }
}

namespace {

template <class T>
Tensor<T> merge_attention(std::span<const Tensor<T>> parts, const MergeRecipe& recipe, const std::string& name) {
  if (recipe.attention_strategy == AttentionStrategy::linear || parts.size() == 1) {
    return linear_merge(parts, std::span<const double>(recipe.weights));
  }
  try {
    return nary_slerp(parts, std::span<const double>(recipe.weights), recipe.tree, recipe.slerp_dot_threshold);
  } catch (const DegenerateInputError&) {
    log_warning("build_backbone: zero-norm tensor in " + name + ", falling back to linear merge");
    return linear_merge(parts, std::span<const double>(recipe.weights));
  }
}

}  // namespace

template <class T>
BackboneCheckpoint<T> build_backbone(std::span<const DenseCheckpoint<T>> models, const MergeRecipe& recipe) {
  if (models.empty()) throw std::invalid_argument("build_backbone: no models");
  recipe.validate(models.size());
  for (const auto& m : models) {
    m.validate();
    if (!architecture_compatible(m.config, models[0].config)) {
      throw std::invalid_argument("build_backbone: model '" + m.model_id + "' is not architecture-compatible with '" +
                                  models[0].model_id + "'");
    }
  }
  const std::size_t n = models.size();
  const std::span<const double> w(recipe.weights);

  BackboneCheckpoint<T> out;
  out.recipe = recipe;
  for (const auto& m : models) out.source_ids.push_back(m.model_id);

  std::vector<Tensor<T>> emb;
  std::vector<std::vector<std::string>> vocabs;
  for (const auto& m : models) {
    emb.push_back(m.embedding);
    vocabs.push_back(m.vocab);
  }
  EmbeddingMerge<T> em =
      recipe.embedding_strategy == EmbeddingStrategy::selective
          ? selective_embedding_merge<T>(emb, vocabs, w, recipe.anchor_index)
          : linear_embedding_merge<T>(emb, vocabs, w, recipe.anchor_index);
  out.embedding = std::move(em.embedding);
  out.vocab = std::move(em.vocab);
  out.config = models[0].config;
  out.config.vocab_size = out.vocab.size();

  auto gather = [&](auto pick) {
    std::vector<Tensor<T>> parts;
    parts.reserve(n);
    for (const auto& m : models) parts.push_back(pick(m));
    return parts;
  };

  out.layers.resize(out.config.n_layers);
  for (std::size_t l = 0; l < out.config.n_layers; ++l) {
    auto& L = out.layers[l];
    L.attn.wq = merge_attention<T>(gather([&](const auto& m) { return m.layers[l].attn.wq; }), recipe,
                                   layer_name(l, "attn.wq"));
    L.attn.wk = merge_attention<T>(gather([&](const auto& m) { return m.layers[l].attn.wk; }), recipe,
                                   layer_name(l, "attn.wk"));
    L.attn.wv = merge_attention<T>(gather([&](const auto& m) { return m.layers[l].attn.wv; }), recipe,
                                   layer_name(l, "attn.wv"));
    L.attn.wo = merge_attention<T>(gather([&](const auto& m) { return m.layers[l].attn.wo; }), recipe,
                                   layer_name(l, "attn.wo"));
    L.attn_gamma = linear_merge<T>(gather([&](const auto& m) { return m.layers[l].attn_gamma; }), w);
    L.ffn_gamma = linear_merge<T>(gather([&](const auto& m) { return m.layers[l].ffn_gamma; }), w);
  }
  out.final_gamma = linear_merge<T>(gather([&](const auto& m) { return m.final_gamma; }), w);
  out.validate();
  return out;
}

template <class T>
BackboneCheckpoint<T> extract_backbone(const DenseCheckpoint<T>& model) {
  BackboneCheckpoint<T> out;
  out.config = model.config;
  out.vocab = model.vocab;
  out.embedding = model.embedding;
  out.final_gamma = model.final_gamma;
  out.recipe = MergeRecipe::uniform(1);
  out.source_ids = {model.model_id};
  for (const auto& L : model.layers) out.layers.push_back({L.attn, L.attn_gamma, L.ffn_gamma});
  return out;
}

#define UPCYCLE_INSTANTIATE(T)                                                                         \
  template Tensor<T> slerp(const Tensor<T>&, const Tensor<T>&, double, double);                        \
  template Tensor<T> nary_slerp(std::span<const Tensor<T>>, std::span<const double>, const MergeTree&, \
                                double);                                                               \
  template Tensor<T> linear_merge(std::span<const Tensor<T>>, std::span<const double>);                \
  template EmbeddingMerge<T> selective_embedding_merge(std::span<const Tensor<T>>,                     \
                                                       std::span<const std::vector<std::string>>,      \
                                                       std::span<const double>, std::size_t);          \
  template EmbeddingMerge<T> linear_embedding_merge(std::span<const Tensor<T>>,                        \
                                                    std::span<const std::vector<std::string>>,         \
                                                    std::span<const double>, std::size_t);             \
  template struct BackboneCheckpoint<T>;                                                               \
  template BackboneCheckpoint<T> build_backbone(std::span<const DenseCheckpoint<T>>, const MergeRecipe&); \
  template BackboneCheckpoint<T> extract_backbone(const DenseCheckpoint<T>&);

UPCYCLE_INSTANTIATE(float)
UPCYCLE_INSTANTIATE(double)

#undef UPCYCLE_INSTANTIATE

}  // namespace upcycle
