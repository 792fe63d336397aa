#include "upcycle/corpus.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <unordered_map>

#include "json.hpp"
#include "upcycle/random.hpp"

namespace upcycle {

namespace {

constexpr int kDigit0 = 4;
constexpr int kCodeBase = 32;
constexpr int kSciBase = 64;
constexpr int kWordBase = 96;
constexpr int kWordCount = 160;

const std::array<const char*, 18> kPunct = {"+", "-", "*", "=", ";", "(", ")", "{", "}",
                                            "[", "]", ",", ".", ":", "?", "!", "\"", "/"};
const std::array<const char*, 32> kCodeWords = {
    "if", "else", "for", "while", "return", "def", "let", "var", "int", "fn",  "in",
    "and", "or", "not", "true", "false", "x", "y", "z", "i", "j", "k",
    "n", "m", "a", "b", "c", "foo", "bar", "buf", "len", "idx"};
const std::array<const char*, 32> kSciWords = {
    "water", "iron", "carbon", "oxygen", "helium", "sodium", "copper", "gold",
    "silver", "neon", "argon", "zinc", "lead", "tin", "nickel", "sulfur",
    "melts_at", "boils_at", "density", "mass", "charge", "period", "group", "radius",
    "kelvin", "grams", "units", "is", "has", "of", "fact", "approx"};

std::vector<std::string> make_vocab() {
  std::vector<std::string> v = {"<pad>", "<bos>", "<eos>", "<sep>"};
  for (int d = 0; d < 10; ++d) v.push_back(std::to_string(d));
  for (auto* p : kPunct) v.emplace_back(p);
  for (auto* w : kCodeWords) v.emplace_back(w);
  for (auto* w : kSciWords) v.emplace_back(w);
  for (int w = 0; w < kWordCount; ++w) {
    char buf[8];
    std::snprintf(buf, sizeof buf, "w%03d", w);
    v.emplace_back(buf);
  }
  return v;
}

int punct(const char* p) { return token_id(p); }

void push_number(std::vector<int>& out, unsigned value) {
  const std::string s = std::to_string(value);
  for (char c : s) out.push_back(kDigit0 + (c - '0'));
}

// ---- domain grammars; each appends one statement -------------------------

// Order-2 Markov chain over the general words. The transition structure is a
// fixed function of the context so every seed samples the same process.
struct GeneralState {
  int prev2 = 0, prev1 = 0;
};

void emit_general(Rng& rng, GeneralState& st, std::vector<int>& out) {
  static const std::array<double, 4> cdf = {0.45, 0.7, 0.88, 1.0};
  const std::size_t words = 4 + rng.below(8);
  for (std::size_t w = 0; w < words; ++w) {
    const double u = rng.uniform();
    std::uint64_t j = 0;
    while (j < 3 && u > cdf[j]) ++j;
    const std::uint64_t h =
        Rng::mix(0x6e65726c ^ (static_cast<std::uint64_t>(st.prev2) * 1009 + st.prev1 * 31 + j));
    const int word = kWordBase + static_cast<int>(h % kWordCount);
    out.push_back(word);
    st.prev2 = st.prev1;
    st.prev1 = word - kWordBase;
  }
  out.push_back(rng.uniform() < 0.7 ? punct(".") : punct(","));
}

void emit_math(Rng& rng, std::vector<int>& out) {
  const std::size_t op = rng.below(3);
  unsigned a, b, c;
  if (op == 2) {
    a = static_cast<unsigned>(rng.below(13));
    b = static_cast<unsigned>(rng.below(13));
    c = a * b;
  } else {
    a = static_cast<unsigned>(rng.below(100));
    b = static_cast<unsigned>(rng.below(100));
    if (op == 1 && a < b) std::swap(a, b);
    c = op == 0 ? a + b : a - b;
  }
  push_number(out, a);
  out.push_back(punct(op == 0 ? "+" : op == 1 ? "-" : "*"));
  push_number(out, b);
  out.push_back(punct("="));
  push_number(out, c);
  out.push_back(punct(";"));
}

int code_ident(Rng& rng) { return kCodeBase + 16 + static_cast<int>(rng.below(16)); }

void emit_code(Rng& rng, std::vector<int>& out, int depth) {
  const std::size_t kind = depth >= 2 ? 0 : rng.below(5);
  switch (kind) {
    case 0: {  // x = y op n ;
      out.push_back(code_ident(rng));
      out.push_back(punct("="));
      out.push_back(code_ident(rng));
      out.push_back(punct(rng.uniform() < 0.5 ? "+" : "*"));
      out.push_back(kDigit0 + static_cast<int>(rng.below(10)));
      out.push_back(punct(";"));
      break;
    }
    case 1: {  // if ( x ) { ... } else { ... }
      out.push_back(token_id("if"));
      out.push_back(punct("("));
      out.push_back(code_ident(rng));
      out.push_back(punct(")"));
      out.push_back(punct("{"));
      emit_code(rng, out, depth + 1);
      out.push_back(punct("}"));
      if (rng.uniform() < 0.4) {
        out.push_back(token_id("else"));
        out.push_back(punct("{"));
        emit_code(rng, out, depth + 1);
        out.push_back(punct("}"));
      }
      break;
    }
    case 2: {  // for ( i in n ) { ... }
      out.push_back(token_id("for"));
      out.push_back(punct("("));
      out.push_back(code_ident(rng));
      out.push_back(token_id("in"));
      out.push_back(code_ident(rng));
      out.push_back(punct(")"));
      out.push_back(punct("{"));
      emit_code(rng, out, depth + 1);
      out.push_back(punct("}"));
      break;
    }
    case 3: {  // fn f ( a , b ) { return a + b ; }
      out.push_back(token_id("fn"));
      out.push_back(code_ident(rng));
      out.push_back(punct("("));
      const int a = code_ident(rng), b = code_ident(rng);
      out.push_back(a);
      out.push_back(punct(","));
      out.push_back(b);
      out.push_back(punct(")"));
      out.push_back(punct("{"));
      out.push_back(token_id("return"));
      out.push_back(a);
      out.push_back(punct("+"));
      out.push_back(b);
      out.push_back(punct(";"));
      out.push_back(punct("}"));
      break;
    }
    default: {  // buf [ i ] = f ( x ) ;
      out.push_back(token_id("buf"));
      out.push_back(punct("["));
      out.push_back(code_ident(rng));
      out.push_back(punct("]"));
      out.push_back(punct("="));
      out.push_back(code_ident(rng));
      out.push_back(punct("("));
      out.push_back(code_ident(rng));
      out.push_back(punct(")"));
      out.push_back(punct(";"));
      break;
    }
  }
}

// Facts are a fixed function of (entity, relation) so models can memorise them.
void emit_science(Rng& rng, std::vector<int>& out) {
  const int entity = static_cast<int>(rng.below(16));
  const int relation = static_cast<int>(rng.below(8));
  const unsigned value = static_cast<unsigned>((entity * 37 + relation * 11 + 5) % 100);
  const int unit = kSciBase + 24 + relation % 3;
  if (rng.uniform() < 0.5) {
    out.push_back(kSciBase + entity);
    out.push_back(kSciBase + 16 + relation);
    out.push_back(token_id("is"));
  } else {
    out.push_back(kSciBase + 16 + relation);
    out.push_back(token_id("of"));
    out.push_back(kSciBase + entity);
    out.push_back(token_id("is"));
  }
  push_number(out, value);
  out.push_back(unit);
  out.push_back(punct("."));
}

}  // namespace

std::string to_string(Domain d) {
  switch (d) {
    case Domain::general: return "general";
    case Domain::math: return "math";
    case Domain::code: return "code";
    case Domain::science: return "science";
  }
  return "?";
}

Domain parse_domain(const std::string& name) {
  for (Domain d : all_domains())
    if (to_string(d) == name) return d;
  throw std::invalid_argument("unknown domain '" + name + "' (expected general, math, code or science)");
}

std::vector<Domain> all_domains() { return {Domain::general, Domain::math, Domain::code, Domain::science}; }

const std::vector<std::string>& shared_vocab() {
  static const std::vector<std::string> vocab = make_vocab();
  return vocab;
}

int token_id(const std::string& token) {
  static const auto index = [] {
    std::unordered_map<std::string, int> m;
    const auto& v = shared_vocab();
    for (std::size_t i = 0; i < v.size(); ++i) m.emplace(v[i], static_cast<int>(i));
    return m;
  }();
  auto it = index.find(token);
  if (it == index.end()) throw std::invalid_argument("token '" + token + "' is not in the shared vocabulary");
  return it->second;
}

std::string decode(std::span<const int> tokens) {
  const auto& v = shared_vocab();
  std::string out;
  for (int t : tokens) {
    if (!out.empty()) out += ' ';
    out += t >= 0 && static_cast<std::size_t>(t) < v.size() ? v[t] : "<?>";
  }
  return out;
}

Corpus gen_corpus(Domain domain, std::uint64_t seed, std::size_t n_sequences, std::size_t seq_len) {
  if (n_sequences < 1) throw std::invalid_argument("gen_corpus: n_sequences must be >= 1");
  if (seq_len < 2) throw std::invalid_argument("gen_corpus: seq_len must be >= 2");
  Rng rng(Rng::mix(seed) ^ (0x636f7270ULL + static_cast<std::uint64_t>(domain)));
  Corpus c{domain, {}};
  c.sequences.reserve(n_sequences);
  for (std::size_t s = 0; s < n_sequences; ++s) {
    std::vector<int> seq{kBos};
    GeneralState gs{static_cast<int>(rng.below(kWordCount)), static_cast<int>(rng.below(kWordCount))};
    while (seq.size() < seq_len) {
      switch (domain) {
        case Domain::general: emit_general(rng, gs, seq); break;
        case Domain::math: emit_math(rng, seq); break;
        case Domain::code: emit_code(rng, seq, 0); break;
        case Domain::science: emit_science(rng, seq); break;
      }
    }
    seq.resize(seq_len);
    c.sequences.push_back(std::move(seq));
  }
  return c;
}

MathCheck evaluate_math(std::span<const int> tokens) {
  MathCheck r;
  const int semi = token_id(";");
  const int plus = token_id("+"), minus = token_id("-"), times = token_id("*"), eq = token_id("=");
  std::vector<int> stmt;
  auto flush = [&] {
    // number op number = number
    std::size_t i = 0;
    auto number = [&](long& out) {
      if (i >= stmt.size() || stmt[i] < kDigit0 || stmt[i] >= kDigit0 + 10) return false;
      out = 0;
      while (i < stmt.size() && stmt[i] >= kDigit0 && stmt[i] < kDigit0 + 10) out = out * 10 + (stmt[i++] - kDigit0);
      return true;
    };
    long a, b, c;
    ++r.equations;
    if (!number(a) || i >= stmt.size()) return void(++r.malformed);
    const int op = stmt[i++];
    if ((op != plus && op != minus && op != times) || !number(b)) return void(++r.malformed);
    if (i >= stmt.size() || stmt[i++] != eq || !number(c) || i != stmt.size()) return void(++r.malformed);
    const long expect = op == plus ? a + b : op == minus ? a - b : a * b;
    if (expect == c) ++r.correct;
  };
  bool started = false;  // the first statement may have been preceded by <bos> only
  for (int t : tokens) {
    if (t == kBos) {
      stmt.clear();
      started = true;
      continue;
    }
    if (t == semi) {
      if (started) flush();
      stmt.clear();
      continue;
    }
    stmt.push_back(t);
  }
  return r;
}

void CalibrationSet::validate(std::size_t vocab_size) const {
  if (sequences.empty()) throw std::invalid_argument("calibration set is empty");
  if (provenance.size() != sequences.size()) {
    throw std::invalid_argument("calibration provenance covers " + std::to_string(provenance.size()) + " of " +
                                std::to_string(sequences.size()) + " sequences");
  }
  for (const auto& s : sequences) {
    for (int t : s) {
      if (t < 0 || static_cast<std::size_t>(t) >= vocab_size) {
        throw std::invalid_argument("calibration token " + std::to_string(t) + " outside vocab of " +
                                    std::to_string(vocab_size));
      }
    }
  }
}

CalibrationSet sample_calibration(std::span<const Corpus> corpora, double fraction, std::uint64_t seed,
                                  bool biased) {
  if (!(fraction > 0.0 && fraction <= 1.0)) {
    throw std::invalid_argument("sample_calibration: fraction must be in (0, 1], got " + std::to_string(fraction));
  }
  if (corpora.empty()) throw std::invalid_argument("sample_calibration: no corpora");
  for (const auto& c : corpora) {
    if (c.sequences.empty()) throw std::invalid_argument("sample_calibration: empty " + to_string(c.domain) + " corpus");
  }
  CalibrationSet out;
  out.sampling_fraction = fraction;
  out.seed = seed;
  out.biased = biased;
  auto draw = [&](const Corpus& c, std::size_t count, std::uint64_t stream) {
    Rng rng(Rng::mix(seed ^ (stream * 0x9e3779b97f4a7c15ULL)));
    auto perm = rng.permutation(c.sequences.size());
    perm.resize(count);
    std::sort(perm.begin(), perm.end());
    for (std::size_t idx : perm) {
      out.sequences.push_back(c.sequences[idx]);
      out.provenance.push_back({c.domain, idx});
    }
  };
  auto ceil_count = [&](std::size_t n) {
    return static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(n) - 1e-9));
  };
  if (biased) {
    std::size_t total = 0;
    for (const auto& c : corpora) total += c.sequences.size();
    draw(corpora[0], std::min(ceil_count(total), corpora[0].sequences.size()), 0);
  } else {
    for (std::size_t i = 0; i < corpora.size(); ++i) draw(corpora[i], ceil_count(corpora[i].sequences.size()), i);
  }
  return out;
}

std::vector<double> unigram(const TokenSequences& seqs) {
  std::vector<double> p(kSharedVocabSize, 0.0);
  double n = 0.0;
  for (const auto& s : seqs) {
    for (int t : s) {
      if (t == kBos) continue;
      p.at(static_cast<std::size_t>(t)) += 1.0;
      n += 1.0;
    }
  }
  if (n > 0.0)
    for (auto& v : p) v /= n;
  return p;
}

double total_variation(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw std::invalid_argument("total_variation: size mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) s += std::abs(p[i] - q[i]);
  return 0.5 * s;
}

// ---- files -----------------------------------------------------------------

namespace {

void put_u32(std::ostream& o, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  o.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::istream& in, const std::string& path) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4)) throw std::runtime_error("corpus file " + path + " is truncated");
  return b[0] | (b[1] << 8) | (b[2] << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace

void save_corpus(const TokenSequences& seqs, const std::string& path, std::size_t vocab_size) {
  if (vocab_size > 65536) throw std::invalid_argument("save_corpus: vocab does not fit u16 tokens");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write corpus file " + path);
  out.write("SMQC", 4);
  put_u32(out, kCorpusVersion);
  put_u32(out, static_cast<std::uint32_t>(vocab_size));
  put_u32(out, static_cast<std::uint32_t>(seqs.size()));
  for (const auto& s : seqs) {
    put_u32(out, static_cast<std::uint32_t>(s.size()));
    for (int t : s) {
      if (t < 0 || static_cast<std::size_t>(t) >= vocab_size) {
        throw std::invalid_argument("save_corpus: token " + std::to_string(t) + " outside vocab");
      }
      const unsigned char b[2] = {static_cast<unsigned char>(t), static_cast<unsigned char>(t >> 8)};
      out.write(reinterpret_cast<const char*>(b), 2);
    }
  }
  if (!out) throw std::runtime_error("write failed for " + path);
}

TokenSequences load_corpus(const std::string& path, std::size_t* vocab_size) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open corpus file " + path);
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, "SMQC", 4) != 0) {
    throw std::runtime_error(path + " is not a corpus file (bad magic)");
  }
  const std::uint32_t version = get_u32(in, path);
  if (version != kCorpusVersion) {
    throw std::runtime_error(path + ": unsupported corpus version " + std::to_string(version));
  }
  const std::uint32_t vocab = get_u32(in, path);
  const std::uint32_t n = get_u32(in, path);
  TokenSequences seqs;
  seqs.reserve(n);
  for (std::uint32_t s = 0; s < n; ++s) {
    const std::uint32_t len = get_u32(in, path);
    std::vector<unsigned char> raw(static_cast<std::size_t>(len) * 2);
    if (!in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()))) {
      throw std::runtime_error("corpus file " + path + " is truncated in sequence " + std::to_string(s));
    }
    std::vector<int> seq(len);
    for (std::uint32_t i = 0; i < len; ++i) {
      seq[i] = raw[2 * i] | (raw[2 * i + 1] << 8);
      if (static_cast<std::uint32_t>(seq[i]) >= vocab) {
        throw std::runtime_error(path + ": token " + std::to_string(seq[i]) + " outside vocab of " +
                                 std::to_string(vocab));
      }
    }
    seqs.push_back(std::move(seq));
  }
  if (vocab_size) *vocab_size = vocab;
  return seqs;
}

void save_calibration(const CalibrationSet& calib, const std::string& path) {
  save_corpus(calib.sequences, path);
  nlohmann::json j;
  j["sampling_fraction"] = calib.sampling_fraction;
  j["seed"] = calib.seed;
  j["biased"] = calib.biased;
  j["n_sequences"] = calib.sequences.size();
  std::size_t tokens = 0;
  for (const auto& s : calib.sequences) tokens += s.size();
  j["n_tokens"] = tokens;
  j["provenance"] = nlohmann::json::array();
  for (const auto& p : calib.provenance) j["provenance"].push_back({{"domain", to_string(p.domain)}, {"index", p.index}});
  std::ofstream out(path + ".json");
  if (!out) throw std::runtime_error("cannot write calibration sidecar " + path + ".json");
  out << j.dump(2) << '\n';
}

CalibrationSet load_calibration(const std::string& path) {
  CalibrationSet c;
  c.sequences = load_corpus(path);
  std::ifstream in(path + ".json");
  if (!in) throw std::runtime_error("calibration sidecar " + path + ".json is missing");
  const auto j = nlohmann::json::parse(in);
  c.sampling_fraction = j.at("sampling_fraction").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.biased = j.at("biased").get<bool>();
  for (const auto& p : j.at("provenance")) {
    c.provenance.push_back({parse_domain(p.at("domain").get<std::string>()), p.at("index").get<std::size_t>()});
  }
  c.validate();
  return c;
}

}  // namespace upcycle
