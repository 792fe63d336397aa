#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "upcycle/alignment.hpp"

namespace upcycle {

enum class Domain { general, math, code, science };

inline constexpr std::size_t kSharedVocabSize = 256;
inline constexpr int kPad = 0, kBos = 1, kEos = 2, kSep = 3;

std::string to_string(Domain d);
// Throws std::invalid_argument for anything but the four domain names.
Domain parse_domain(const std::string& name);
std::vector<Domain> all_domains();

// 256 tokens: specials, digits, punctuation, code words, science words,
// general words. Every model and corpus uses this vocabulary.
const std::vector<std::string>& shared_vocab();
int token_id(const std::string& token);
std::string decode(std::span<const int> tokens);

struct Corpus {
  Domain domain = Domain::general;
  TokenSequences sequences;
};

// Fixed-length sequences beginning with <bos>; deterministic in (domain, seed).
Corpus gen_corpus(Domain domain, std::uint64_t seed, std::size_t n_sequences, std::size_t seq_len);

struct MathCheck {
  std::size_t equations = 0;  // complete `a op b = c ;` statements
  std::size_t correct = 0;
  std::size_t malformed = 0;
};
MathCheck evaluate_math(std::span<const int> tokens);

struct SequenceSource {
  Domain domain = Domain::general;
  std::size_t index = 0;  // position in the source corpus

  friend bool operator==(const SequenceSource&, const SequenceSource&) = default;
};

struct CalibrationSet {
  TokenSequences sequences;
  std::vector<SequenceSource> provenance;
  double sampling_fraction = 0.05;
  std::uint64_t seed = 0;
  bool biased = false;

  void validate(std::size_t vocab_size = kSharedVocabSize) const;
};

// ceil(fraction * |corpus|) sequences without replacement from each corpus,
// kept in source order. With `biased`, everything comes from corpora[0]; the
// draw size is ceil(fraction * total) capped at |corpora[0]|.
CalibrationSet sample_calibration(std::span<const Corpus> corpora, double fraction, std::uint64_t seed,
                                  bool biased = false);

// Unigram distribution over the shared vocabulary.
std::vector<double> unigram(const TokenSequences& seqs);
double total_variation(std::span<const double> p, std::span<const double> q);

// ---- files -----------------------------------------------------------------
// "SMQC" | u32 version | u32 vocab_size | u32 n_sequences | per sequence:
// u32 length, then u16 tokens. Little-endian.

inline constexpr std::uint32_t kCorpusVersion = 1;

void save_corpus(const TokenSequences& seqs, const std::string& path, std::size_t vocab_size = kSharedVocabSize);
TokenSequences load_corpus(const std::string& path, std::size_t* vocab_size = nullptr);

// Corpus file plus `<path>.json` holding provenance and sampling parameters.
void save_calibration(const CalibrationSet& calib, const std::string& path);
CalibrationSet load_calibration(const std::string& path);

}  // namespace upcycle
