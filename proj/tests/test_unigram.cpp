#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <random>

#include "helpers.hpp"
#include "surpfit/unigram.hpp"

using namespace surpfit;
using testing_util::TempDir;

TEST(Unigram, LoadAndProbabilities) {
  TempDir dir("uni");
  util::write_file(dir.file("c.tsv"), "a\t3\nb\t1\n");
  const auto m = load_counts(dir.file("c.tsv"), "tok");
  EXPECT_EQ(m.total, 4);
  EXPECT_DOUBLE_EQ(m.probability("a"), 0.75);
  EXPECT_DOUBLE_EQ(m.probability("b"), 0.25);
  EXPECT_NEAR(word_unigram_surprisal(m, {"a"}), 0.415, 5e-4);
  EXPECT_NEAR(word_unigram_surprisal(m, {"a", "b"}), -std::log2(0.75) + 2.0, 1e-12);
  EXPECT_DOUBLE_EQ(m.probability("zzz"), 0.5 / 4);
}

TEST(Unigram, TokensMayContainSpacesAndTabs) {
  TempDir dir("uni");
  util::write_file(dir.file("c.tsv"), " the\t5\na\tb\t2\n");
  const auto m = load_counts(dir.file("c.tsv"));
  EXPECT_EQ(m.token_counts.at(" the"), 5);
  EXPECT_EQ(m.token_counts.at("a\tb"), 2);
}

TEST(Unigram, LoadErrors) {
  TempDir dir("uni");
  for (const std::string bad : {"", "a\t0\n", "a\t-2\n", "a\t1\na\t2\n", "a 3\n", "a\tx\n"}) {
    util::write_file(dir.file("c.tsv"), bad);
    EXPECT_THROW(load_counts(dir.file("c.tsv")), InputError) << bad;
  }
}

TEST(Unigram, LargeTableTotalAndRoundTrip) {
  TempDir dir("uni");
  std::mt19937_64 rng(9);
  std::map<std::string, long long> counts;
  long long oracle = 0;
  for (int i = 0; i < 10000; ++i) {
    const long long c = 1 + static_cast<long long>(rng() % 100000);
    counts["t" + std::to_string(i)] = c;
    oracle += c;
  }
  write_counts(dir.file("c.tsv"), counts);
  const auto m = load_counts(dir.file("c.tsv"));
  EXPECT_EQ(m.total, oracle);
  double psum = 0;
  for (const auto& [t, c] : counts) psum += m.probability(t);
  EXPECT_NEAR(psum, 1.0, 1e-12);
}

TEST(Unigram, AdditiveOverConcatenation) {
  TempDir dir("uni");
  util::write_file(dir.file("c.tsv"), "a\t3\nb\t1\nc\t12\n");
  const auto m = load_counts(dir.file("c.tsv"));
  std::mt19937_64 rng(4);
  const std::vector<std::string> vocab{"a", "b", "c", "unk"};
  for (int i = 0; i < 100; ++i) {
    std::vector<std::string> x, y;
    for (int k = 0; k < 1 + static_cast<int>(rng() % 4); ++k) x.push_back(vocab[rng() % 4]);
    for (int k = 0; k < 1 + static_cast<int>(rng() % 4); ++k) y.push_back(vocab[rng() % 4]);
    auto xy = x;
    xy.insert(xy.end(), y.begin(), y.end());
    double brute = 0;
    for (const auto& t : xy) brute -= std::log2((t == "a" ? 3 : t == "b" ? 1 : t == "c" ? 12 : 0.5) / 16.0);
    EXPECT_NEAR(word_unigram_surprisal(m, xy), word_unigram_surprisal(m, x) + word_unigram_surprisal(m, y), 1e-12);
    EXPECT_NEAR(word_unigram_surprisal(m, xy), brute, 1e-12);
  }
}

namespace {

std::vector<std::pair<WordKey, double>> items_with(const std::vector<double>& lps) {
  std::vector<std::pair<WordKey, double>> v;
  for (std::size_t i = 0; i < lps.size(); ++i) v.push_back({{"d", static_cast<int>(i + 1)}, lps[i]});
  return v;
}

}  // namespace

TEST(Quintiles, TenWords) {
  std::vector<double> lps;
  for (int i = 1; i <= 10; ++i) lps.push_back(-i);
  const auto q = assign_quintiles(items_with(lps));
  EXPECT_EQ(q.label({"d", 10}), 1);
  EXPECT_EQ(q.label({"d", 9}), 1);
  EXPECT_EQ(q.label({"d", 1}), 5);
  EXPECT_EQ(q.label({"d", 2}), 5);
  EXPECT_EQ(q.label({"d", 99}), 0);
  EXPECT_DOUBLE_EQ(q.boundaries[0], -9);
}

TEST(Quintiles, TiesUseStableKeyOrder) {
  const auto q = assign_quintiles(items_with(std::vector<double>(10, -3.0)));
  std::map<int, int> sizes;
  for (const auto& [k, l] : q.labels) ++sizes[l];
  for (int l = 1; l <= 5; ++l) EXPECT_EQ(sizes[l], 2);
  EXPECT_EQ(q.label({"d", 1}), 1);
  EXPECT_EQ(q.label({"d", 2}), 1);
  EXPECT_EQ(q.label({"d", 10}), 5);
}

TEST(Quintiles, SizesDifferByAtMostOne) {
  std::mt19937_64 rng(2);
  std::normal_distribution<double> nd(-10, 3);
  std::vector<double> lps;
  for (int i = 0; i < 10003; ++i) lps.push_back(nd(rng));
  const auto q = assign_quintiles(items_with(lps));
  std::map<int, std::size_t> sizes;
  for (const auto& [k, l] : q.labels) ++sizes[l];
  std::size_t lo = SIZE_MAX, hi = 0, total = 0;
  for (const auto& [l, s] : sizes) {
    lo = std::min(lo, s);
    hi = std::max(hi, s);
    total += s;
  }
  EXPECT_LE(hi - lo, 1u);
  EXPECT_EQ(total, 10003u);
  // label 1 holds the lowest log-probabilities
  for (const auto& [k, l] : q.labels) {
    const double v = lps[static_cast<std::size_t>(k.word_index - 1)];
    if (l == 1) {
      EXPECT_LE(v, q.boundaries[0]);
    } else if (l == 2) {
      EXPECT_GE(v, q.boundaries[0]);
    }
  }
}

TEST(Quintiles, InvariantUnderMonotoneTransform) {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u(-20, -0.1);
  std::vector<double> lps, other;
  for (int i = 0; i < 537; ++i) {
    lps.push_back(std::round(u(rng) * 4) / 4);  // with ties
    other.push_back(std::exp(lps.back()) * 7.0 + 1.0);
  }
  const auto a = assign_quintiles(items_with(lps));
  const auto b = assign_quintiles(items_with(other));
  EXPECT_EQ(a.labels, b.labels);
  std::vector<double> base2;
  for (double v : lps) base2.push_back(v / std::log(2.0));
  EXPECT_EQ(assign_quintiles(items_with(base2)).labels, a.labels);
}

TEST(Quintiles, Errors) {
  EXPECT_THROW(assign_quintiles(items_with({-1, -2, -3, -4})), DomainError);
  auto dup = items_with({-1, -2, -3, -4, -5});
  dup[4].first = dup[0].first;
  EXPECT_THROW(assign_quintiles(dup), DomainError);
}
