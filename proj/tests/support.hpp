#pragma once

#include <unistd.h>

#include <filesystem>
#include <string>
#include <vector>

#include "upcycle/random.hpp"
#include "upcycle/transformer.hpp"

namespace upcycle::testing {

inline TransformerConfig tiny_config(std::size_t d = 8, std::size_t layers = 2, std::size_t heads = 2,
                                     std::size_t ffn = 16, std::size_t vocab = 32) {
  TransformerConfig c;
  c.d_model = d;
  c.n_layers = layers;
  c.n_heads = heads;
  c.d_ffn = ffn;
  c.vocab_size = vocab;
  c.max_seq_len = 32;
  return c;
}

inline std::vector<std::string> tiny_vocab(std::size_t n) {
  std::vector<std::string> v;
  for (std::size_t i = 0; i < n; ++i) v.push_back("t" + std::to_string(i));
  return v;
}

// init_dense scales weights to 0.02, which keeps tiny models nearly linear;
// fixtures that need visible nonlinearity rescale everything.
template <class T>
DenseCheckpoint<T> random_dense(const TransformerConfig& c, std::uint64_t seed, std::string id = "m",
                                double gain = 1.0) {
  auto m = init_dense<T>(c, tiny_vocab(c.vocab_size), std::move(id), seed);
  if (gain != 1.0) {
    for_each_tensor(m, [&](const std::string& name, Tensor<T>& t) {
      if (name.find("gamma") != std::string::npos) return;
      for (auto& v : t.data()) v = static_cast<T>(v * gain);
    });
  }
  return m;
}

inline std::vector<int> random_tokens(Rng& rng, std::size_t n, std::size_t vocab) {
  std::vector<int> t(n);
  for (auto& x : t) x = static_cast<int>(rng.below(vocab));
  return t;
}

inline std::vector<std::vector<int>> random_corpus(std::uint64_t seed, std::size_t n_seq, std::size_t len,
                                                   std::size_t vocab) {
  Rng rng(seed);
  std::vector<std::vector<int>> out;
  for (std::size_t i = 0; i < n_seq; ++i) out.push_back(random_tokens(rng, len, vocab));
  return out;
}

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    path_ = std::filesystem::temp_directory_path() / ("upcycle_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter()++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  std::string str(const std::string& leaf = {}) const { return leaf.empty() ? path_.string() : (path_ / leaf).string(); }

 private:
  static int& counter() {
    static int c = 0;
    return c;
  }
  std::filesystem::path path_;
};

}  // namespace upcycle::testing
