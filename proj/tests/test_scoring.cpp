#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "helpers.hpp"
#include "surpfit/oracles.hpp"
#include "surpfit/scoring.hpp"

using namespace surpfit;
using testing_util::TempDir;

namespace {

TokenScore tok(const std::string& doc, long idx, std::size_t cs, std::size_t ce, std::optional<double> lp,
               const std::string& text = "") {
  TokenScore t;
  t.doc_id = doc;
  t.token_index = idx;
  t.char_start = cs;
  t.char_end = ce;
  t.log2prob = lp;
  t.token_text = text;
  return t;
}

/// Splits [0, len) into random pieces of 1..5 code points.
std::vector<TokenScore> random_tiling(const Document& d, std::mt19937_64& rng, bool with_scores = true) {
  std::vector<TokenScore> out;
  std::uniform_int_distribution<int> piece(1, 5);
  std::uniform_real_distribution<double> lp(-12, -0.01);
  std::size_t at = 0;
  long idx = 1;
  while (at < d.length()) {
    const std::size_t end = std::min(d.length(), at + static_cast<std::size_t>(piece(rng)));
    std::optional<double> p;
    if (with_scores && idx > 1) p = lp(rng);
    out.push_back(tok(d.doc_id, idx++, at, end, p, std::string(d.slice(at, end))));
    at = end;
  }
  return out;
}

}  // namespace

TEST(PlanWindows, SpecExamples) {
  const auto a = plan_windows(12, 8);
  ASSERT_EQ(a.size(), 2u);
  EXPECT_EQ(a[0].context_start, 1);
  EXPECT_EQ(a[0].target_start, 2);
  EXPECT_EQ(a[0].target_end, 8);
  EXPECT_EQ(a[1].context_start, 5);
  EXPECT_EQ(a[1].target_start, 9);
  EXPECT_EQ(a[1].target_end, 12);

  const auto b = plan_windows(5, 8);
  ASSERT_EQ(b.size(), 1u);
  EXPECT_EQ(b[0].context_start, 1);
  EXPECT_EQ(b[0].target_start, 2);
  EXPECT_EQ(b[0].target_end, 5);

  EXPECT_TRUE(plan_windows(1, 8).empty());
  EXPECT_THROW(plan_windows(10, 7), DomainError);
  EXPECT_THROW(plan_windows(10, 0), DomainError);
}

TEST(PlanWindows, BruteForceCoverageAndWindowBound) {
  for (long count : {2L, 3L, 8L, 9L, 20L, 97L, 1000L}) {
    for (int W : {2, 4, 8, 16, 64}) {
      const auto reqs = plan_windows(count, W);
      const auto hits = oracle::target_counts(reqs, count);
      EXPECT_EQ(hits[1], 0);
      for (long t = 2; t <= count; ++t) ASSERT_EQ(hits[static_cast<std::size_t>(t)], 1) << count << " " << W;
      for (std::size_t i = 0; i < reqs.size(); ++i) {
        const auto& r = reqs[i];
        EXPECT_LE(r.context_start, r.target_start);
        EXPECT_LE(r.target_start, r.target_end);
        EXPECT_LE(r.target_end - r.context_start + 1, W);
        if (i > 0) {
          EXPECT_EQ(r.context_start, reqs[i - 1].context_start + W / 2);
        }
      }
    }
  }
}

TEST(PlanOcclusion, SpecExamples) {
  const auto r = plan_occlusion(100, 9);
  EXPECT_EQ(r.context_start, 91);
  EXPECT_EQ(r.target_start, 100);
  EXPECT_EQ(r.target_end, 100);
  EXPECT_EQ(r.condition, Condition::recent_n(9));
  EXPECT_EQ(r.condition.name(), "recent_9");
  EXPECT_EQ(plan_occlusion(100, 49).context_start, 51);
  EXPECT_THROW(plan_occlusion(9, 9), InsufficientContext);
  EXPECT_NO_THROW(plan_occlusion(10, 9));
}

TEST(Condition, ParseAndName) {
  EXPECT_EQ(Condition::parse("full"), Condition::full());
  EXPECT_EQ(Condition::parse("recent_24").recent, 24);
  EXPECT_THROW(Condition::parse("recent_0"), std::exception);
  EXPECT_THROW(Condition::parse("partial"), std::exception);
}

TEST(Align, LeadingSpaceRuleAndInitialToken) {
  const Document d = testing_util::make_document("d", "The cat", {1, 1});
  const auto al = align_tokens_to_words(d, {tok("d", 1, 0, 3, std::nullopt, "The"), tok("d", 2, 3, 7, -3.5, " cat")});
  ASSERT_EQ(al.words.size(), 2u);
  EXPECT_FALSE(al.words[0].complete);
  EXPECT_TRUE(al.words[1].complete);
  EXPECT_DOUBLE_EQ(al.words[1].surprisal, 3.5);
  EXPECT_EQ(al.words[1].n_subword_tokens, 1);
}

TEST(Align, SubwordSummation) {
  const Document d = testing_util::make_document("d", "A unbelievable", {1, 1});
  const auto al = align_tokens_to_words(
      d, {tok("d", 1, 0, 1, std::nullopt), tok("d", 2, 1, 5, -3), tok("d", 3, 5, 10, -4), tok("d", 4, 10, 14, -1)});
  EXPECT_DOUBLE_EQ(al.words[1].surprisal, 8.0);
  EXPECT_EQ(al.words[1].n_subword_tokens, 3);
  EXPECT_TRUE(al.words[1].complete);
}

TEST(Align, Errors) {
  const Document d = testing_util::make_document("d", "ab, cd", {1, 1});
  // "ab," is one word (whitespace-delimited); overlapping spans
  EXPECT_THROW(align_tokens_to_words(d, {tok("d", 1, 0, 3, std::nullopt), tok("d", 2, 2, 6, -1)}), InputError);
  // out of bounds
  EXPECT_THROW(align_tokens_to_words(d, {tok("d", 1, 0, 3, std::nullopt), tok("d", 2, 3, 9, -1)}), InputError);
  // token starting in a gap between words
  Document g = d;
  g.words[0].char_end = 2;  // "ab" only; ',' is in no word
  EXPECT_THROW(align_tokens_to_words(g, {tok("d", 1, 0, 2, std::nullopt), tok("d", 2, 2, 3, -1)}), InputError);
}

TEST(Align, RandomTilingAssignsEveryTokenOnce) {
  std::mt19937_64 rng(5);
  std::string text;
  std::vector<long> sent;
  std::uniform_int_distribution<int> wl(1, 9);
  while (text.size() < 200) {
    if (!text.empty()) text += ' ';
    const int n = wl(rng);
    for (int i = 0; i < n; ++i) text += static_cast<char>('a' + (rng() % 26));
    sent.push_back(1 + static_cast<long>(sent.size() / 7));
  }
  const Document d = testing_util::make_document("d", text, sent);
  for (int rep = 0; rep < 50; ++rep) {
    const auto toks = random_tiling(d, rng);
    const auto al = align_tokens_to_words(d, toks);
    // brute-force: a token belongs to the word containing its first non-space
    // character, or to the next word if it is all spaces
    std::vector<double> expect(d.words.size(), 0.0);
    std::vector<int> count(d.words.size(), 0);
    double unattached = 0;
    int n_unattached = 0;
    for (const auto& t : toks) {
      if (!t.log2prob) continue;
      std::size_t c = t.char_start;
      while (c < t.char_end && text[c] == ' ') ++c;
      long owner = -1;
      for (std::size_t w = 0; w < d.words.size(); ++w) {
        if (c < t.char_end ? (d.words[w].char_start <= c && c < d.words[w].char_end) : d.words[w].char_start >= c) {
          owner = static_cast<long>(w);
          break;
        }
      }
      if (owner < 0) {
        unattached += -*t.log2prob;
        ++n_unattached;
        continue;
      }
      expect[static_cast<std::size_t>(owner)] += -*t.log2prob;
      ++count[static_cast<std::size_t>(owner)];
    }
    int total = 0;
    for (std::size_t w = 0; w < d.words.size(); ++w) {
      EXPECT_NEAR(al.words[w].surprisal, expect[w], 1e-12);
      EXPECT_EQ(al.words[w].n_subword_tokens, count[w]);
      total += al.words[w].n_subword_tokens;
    }
    EXPECT_EQ(total + n_unattached, static_cast<int>(toks.size()) - 1);
    EXPECT_NEAR(al.unattached_surprisal, unattached, 1e-12);
    // only the word holding token 1 can be incomplete
    for (std::size_t w = 1; w < d.words.size(); ++w)
      if (d.words[w].char_start >= toks[0].char_end) {
        EXPECT_TRUE(al.words[w].complete);
      }
    EXPECT_FALSE(al.words[0].complete);
  }
}

TEST(Perplexity, SpecExamples) {
  std::vector<TokenScore> s;
  for (int i = 0; i < 10; ++i) s.push_back(tok("d", i + 2, 0, 0, -std::log2(50.0)));
  EXPECT_NEAR(corpus_perplexity(s), 50.0, 1e-9);
  EXPECT_DOUBLE_EQ(corpus_perplexity({tok("d", 2, 0, 0, -1.0), tok("d", 3, 0, 0, -3.0)}), 4.0);
  EXPECT_THROW(corpus_perplexity({}), DomainError);
  auto mixed = s;
  mixed[3].condition = Condition::recent_n(9);
  EXPECT_THROW(corpus_perplexity(mixed), DomainError);
}

TEST(Perplexity, MatchesRecomputationFromRawFile) {
  TempDir dir("ppl");
  std::mt19937_64 rng(17);
  std::uniform_real_distribution<double> lp(-15, -0.001);
  ScoreFile f;
  f.header = {"m", 0, "tok", 8, Condition::full(), {}};
  for (long i = 1; i <= 1000; ++i)
    f.scores.push_back(tok("d", i, static_cast<std::size_t>(i - 1), static_cast<std::size_t>(i),
                           i == 1 ? std::nullopt : std::optional<double>(lp(rng)), "x"));
  write_score_file(dir.file("s.jsonl"), f);
  // independent pass over the raw JSON text
  std::ifstream in(dir.file("s.jsonl"));
  std::string line;
  std::getline(in, line);
  double sum = 0;
  int n = 0;
  while (std::getline(in, line)) {
    const auto j = nlohmann::json::parse(line);
    if (j["log2prob"].is_null()) continue;
    sum += -j["log2prob"].get<double>();
    ++n;
  }
  const auto back = read_score_file(dir.file("s.jsonl"));
  EXPECT_NEAR(corpus_log2_perplexity(back.scores), sum / n, 1e-12);
}

TEST(ScoreFiles, ManifestRoundTripAndKeyOrder) {
  TempDir dir("manifest");
  ScoreManifest m;
  m.header = {"pythia-70m", 143000, "gpt-neox", 8, Condition::full(), nlohmann::ordered_json{{"layers", 6}}};
  m.requests = plan_windows(12, 8);
  for (auto& r : m.requests) r.doc_id = "d1";
  write_manifest(dir.file("m.jsonl"), m);
  const auto text = util::read_file(dir.file("m.jsonl"));
  EXPECT_EQ(text.substr(0, text.find('\n')),
            R"({"model_id":"pythia-70m","checkpoint_step":143000,"tokenizer_id":"gpt-neox","window_size":8,)"
            R"("condition":"full","metadata":{"layers":6}})");
  EXPECT_NE(text.find(R"({"doc_id":"d1","context_start":5,"target_start":9,"target_end":12,"condition":"full"})"),
            std::string::npos);
  const auto back = read_manifest(dir.file("m.jsonl"));
  EXPECT_EQ(manifest_to_string(back), text);
}

TEST(ScoreFiles, ScoreRowFormatAndValidation) {
  TempDir dir("scores");
  ScoreFile f;
  f.header = {"m", 1, "t", 8, Condition::full(), {}};
  f.scores = {tok("d", 1, 0, 3, std::nullopt, "The"), tok("d", 2, 3, 7, -3.5, " cat")};
  write_score_file(dir.file("s.jsonl"), f);
  const auto text = util::read_file(dir.file("s.jsonl"));
  EXPECT_NE(text.find(R"({"doc_id":"d","token_index":2,"char_start":3,"char_end":7,"token_text":" cat","log2prob":-3.5})"),
            std::string::npos);
  EXPECT_EQ(score_file_to_string(read_score_file(dir.file("s.jsonl"))), text);

  util::write_file(dir.file("bad.jsonl"), text + R"({"doc_id":"d","token_index":3,"char_start":7,"char_end":8,"token_text":"!","log2prob":0.5})" "\n");
  EXPECT_THROW(read_score_file(dir.file("bad.jsonl")), InputError);
  util::write_file(dir.file("bad2.jsonl"), text + "{not json\n");
  EXPECT_THROW(read_score_file(dir.file("bad2.jsonl")), InputError);
}

TEST(ScoreFiles, ScoresMustAnswerManifestExactly) {
  ScoreManifest m;
  m.header = {"m", 1, "t", 8, Condition::full(), {}};
  m.requests = plan_windows(4, 8);
  for (auto& r : m.requests) r.doc_id = "d";
  ScoreFile f;
  f.header = m.header;
  for (long i = 1; i <= 4; ++i) f.scores.push_back(tok("d", i, 0, 0, i == 1 ? std::nullopt : std::optional<double>(-1)));
  EXPECT_NO_THROW(check_scores_match_manifest(m, f, "x"));
  auto missing = f;
  missing.scores.pop_back();
  EXPECT_THROW(check_scores_match_manifest(m, missing, "x"), InputError);
  auto other = f;
  other.header.checkpoint_step = 2;
  EXPECT_THROW(check_scores_match_manifest(m, other, "x"), InputError);
}

TEST(ChainRule, WordSumEqualsSequenceTotal) {
  std::mt19937_64 rng(23);
  const Document d = testing_util::make_document("d", "the quick brown fox jumps over the lazy dog again", {1, 1, 1, 1, 1, 1, 1, 1, 1, 1});
  for (int rep = 0; rep < 20; ++rep) {
    const auto toks = random_tiling(d, rng);
    double total = 0;
    for (const auto& t : toks)
      if (t.log2prob) total += -*t.log2prob;
    const auto al = align_tokens_to_words(d, toks);
    double words = al.unattached_surprisal;
    for (const auto& w : al.words) words += w.surprisal;
    EXPECT_NEAR(words, total, 1e-9);
  }
}
