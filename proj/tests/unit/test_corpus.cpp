#include <filesystem>
#include <fstream>
#include <set>

#include "doctest.h"
#include "support.hpp"
#include "upcycle/corpus.hpp"

using namespace upcycle;
using namespace upcycle::testing;

TEST_SUITE("corpus") {

TEST_CASE("shared vocabulary") {
  const auto& v = shared_vocab();
  CHECK(v.size() == kSharedVocabSize);
  CHECK(token_id("<bos>") == kBos);
  CHECK(token_id(";") > kSep);
  CHECK_THROWS_AS(token_id("no-such-token"), std::invalid_argument);
  std::set<std::string> uniq(v.begin(), v.end());
  CHECK(uniq.size() == v.size());
  for (Domain d : all_domains()) CHECK(parse_domain(to_string(d)) == d);
  CHECK_THROWS_AS(parse_domain("poetry"), std::invalid_argument);
}

TEST_CASE("generation is deterministic and well formed") {
  for (Domain d : all_domains()) {
    auto a = gen_corpus(d, 42, 20, 48), b = gen_corpus(d, 42, 20, 48), c = gen_corpus(d, 43, 20, 48);
    CHECK(a.sequences == b.sequences);
    CHECK_FALSE(a.sequences == c.sequences);
    REQUIRE(a.sequences.size() == 20);
    for (const auto& s : a.sequences) {
      CHECK(s.size() == 48);
      CHECK(s[0] == kBos);
      for (int t : s) CHECK((t >= 0 && t < static_cast<int>(kSharedVocabSize)));
    }
  }
}

TEST_CASE("math corpus equations are all correct") {
  auto c = gen_corpus(Domain::math, 7, 200, 64);
  std::size_t eqs = 0;
  for (const auto& s : c.sequences) {
    auto r = evaluate_math(s);
    eqs += r.equations;
    CHECK(r.malformed == 0);
    CHECK(r.correct == r.equations);
  }
  CHECK(eqs > 400);
}

TEST_CASE("math evaluator on hand sequences") {
  auto tok = [](std::initializer_list<const char*> words) {
    std::vector<int> out{kBos};
    for (const char* w : words) out.push_back(token_id(w));
    return out;
  };
  auto good = evaluate_math(tok({"1", "2", "+", "3", "=", "1", "5", ";", "4", "*", "5", "=", "2", "0", ";"}));
  CHECK(good.equations == 2);
  CHECK(good.correct == 2);
  auto wrong = evaluate_math(tok({"2", "-", "3", "=", "1", ";"}));
  CHECK(wrong.equations == 1);
  CHECK(wrong.correct == 0);
  CHECK(wrong.malformed == 0);
  auto bad = evaluate_math(tok({"2", "=", "=", ";"}));
  CHECK(bad.malformed == 1);
  // A trailing statement without a terminator is not counted.
  CHECK(evaluate_math(tok({"1", "+", "1", "="})).equations == 0);
}

TEST_CASE("domains are distinguishable by unigram statistics") {
  std::vector<std::vector<double>> dists;
  for (Domain d : all_domains()) dists.push_back(unigram(gen_corpus(d, 5, 10000, 32).sequences));
  for (std::size_t i = 0; i < dists.size(); ++i) {
    double s = 0;
    for (double p : dists[i]) s += p;
    CHECK(s == doctest::Approx(1.0));
    for (std::size_t j = i + 1; j < dists.size(); ++j) CHECK(total_variation(dists[i], dists[j]) >= 0.2);
  }
  CHECK(total_variation(dists[0], dists[0]) == 0.0);
}

TEST_CASE("calibration sampling") {
  std::vector<Corpus> corpora;
  for (Domain d : all_domains()) corpora.push_back(gen_corpus(d, 3, 200, 16));

  auto c = sample_calibration(corpora, 0.05, 9);
  CHECK(c.sequences.size() == 40);
  CHECK_NOTHROW(c.validate());
  for (std::size_t i = 0; i < c.sequences.size(); ++i) {
    const auto& p = c.provenance[i];
    CHECK(p.domain == all_domains()[i / 10]);
    CHECK(c.sequences[i] == corpora[i / 10].sequences[p.index]);
    if (i % 10 != 0) CHECK(c.provenance[i - 1].index < p.index);
  }
  auto again = sample_calibration(corpora, 0.05, 9);
  CHECK(again.sequences == c.sequences);
  CHECK_FALSE(sample_calibration(corpora, 0.05, 10).provenance == c.provenance);

  auto full = sample_calibration(corpora, 1.0, 9);
  REQUIRE(full.sequences.size() == 800);
  for (std::size_t i = 0; i < 800; ++i) CHECK(full.sequences[i] == corpora[i / 200].sequences[i % 200]);

  auto biased = sample_calibration(corpora, 0.05, 9, true);
  CHECK(biased.biased);
  CHECK(biased.sequences.size() == 40);
  for (const auto& p : biased.provenance) CHECK(p.domain == Domain::general);

  CHECK_THROWS_AS(sample_calibration(corpora, 0.0, 1), std::invalid_argument);
  CHECK_THROWS_AS(sample_calibration(corpora, 1.5, 1), std::invalid_argument);
  CHECK_THROWS_AS(sample_calibration(std::span<const Corpus>{}, 0.5, 1), std::invalid_argument);
}

TEST_CASE("corpus and calibration files round trip") {
  TempDir dir("corpus");
  auto c = gen_corpus(Domain::code, 1, 12, 20);
  save_corpus(c.sequences, dir.str("c.bin"));
  std::size_t vocab = 0;
  CHECK(load_corpus(dir.str("c.bin"), &vocab) == c.sequences);
  CHECK(vocab == kSharedVocabSize);

  std::vector<Corpus> corpora{c, gen_corpus(Domain::science, 2, 12, 20)};
  auto calib = sample_calibration(corpora, 0.25, 4);
  save_calibration(calib, dir.str("calib.bin"));
  CHECK(std::filesystem::exists(dir.str("calib.bin.json")));
  auto back = load_calibration(dir.str("calib.bin"));
  CHECK(back.sequences == calib.sequences);
  CHECK(back.provenance == calib.provenance);
  CHECK(back.sampling_fraction == calib.sampling_fraction);
  CHECK(back.seed == 4);

  {
    std::ofstream out(dir.str("junk.bin"), std::ios::binary);
    out << "not a corpus";
  }
  CHECK_THROWS(load_corpus(dir.str("junk.bin")));
  CHECK_THROWS(load_corpus(dir.str("missing.bin")));
}

}  // TEST_SUITE
