#pragma once

// Unigram surprisal from token count tables, and frequency quintiles.

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "surpfit/common.hpp"

namespace surpfit {

struct UnigramModel {
  std::unordered_map<std::string, long long> token_counts;
  long long total = 0;
  std::string tokenizer_id;

  // Additive pseudo-count for tokens absent from the table (lookup only).
  static constexpr double kUnseenCount = 0.5;

  double probability(const std::string& token) const {
    auto it = token_counts.find(token);
    const double c = it == token_counts.end() ? kUnseenCount : static_cast<double>(it->second);
    return c / static_cast<double>(total);
  }

  double log2prob(const std::string& token) const { return std::log2(probability(token)); }
};

/// Reads `token<TAB>count` lines. The token is everything before the last tab,
/// so tokens may contain spaces.
inline UnigramModel load_counts(const std::string& path, std::string tokenizer_id = {}) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open count table " + path);
  UnigramModel m;
  m.tokenizer_id = std::move(tokenizer_id);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto row = util::strip_cr(line);
    if (row.empty()) continue;
    const auto tab = row.rfind('\t');
    const std::string where = path + ":" + std::to_string(lineno);
    if (tab == std::string_view::npos) throw InputError(where + ": expected token<TAB>count");
    std::string token(row.substr(0, tab));
    auto count = util::parse_int<long long>(row.substr(tab + 1));
    if (!count) throw InputError(where + ": bad count '" + std::string(row.substr(tab + 1)) + "'");
    if (*count <= 0) throw InputError(where + ": count must be positive for token '" + token + "'");
    if (!m.token_counts.emplace(token, *count).second)
      throw InputError(where + ": duplicate token '" + token + "'");
    m.total += *count;
  }
  if (m.token_counts.empty()) throw InputError(path + ": empty count table");
  return m;
}

inline void write_counts(const std::string& path, const std::map<std::string, long long>& counts) {
  std::string out;
  for (const auto& [tok, c] : counts) out += tok + '\t' + std::to_string(c) + '\n';
  util::write_file(path, out);
}

/// Sum of token-level unigram surprisals, in bits.
inline double word_unigram_surprisal(const UnigramModel& model, const std::vector<std::string>& word_tokens) {
  if (word_tokens.empty()) throw DomainError("word has no tokens");
  double s = 0;
  for (const auto& t : word_tokens) s -= model.log2prob(t);
  return s;
}

struct WordKey {
  std::string doc_id;
  int word_index = 0;

  friend bool operator==(const WordKey&, const WordKey&) = default;
  friend auto operator<=>(const WordKey&, const WordKey&) = default;
};

struct QuintileAssignment {
  std::map<WordKey, int> labels;  // 1 = least frequent
  std::array<double, 4> boundaries{};  // highest log-probability in quintiles 1..4

  int label(const WordKey& k) const {
    auto it = labels.find(k);
    return it == labels.end() ? 0 : it->second;
  }
};

/// Equal-count partition by ascending unigram log-probability; ties are broken
/// by (doc_id, word_index). Sizes differ by at most one.
inline QuintileAssignment assign_quintiles(std::vector<std::pair<WordKey, double>> items) {
  const std::size_t n = items.size();
  if (n < 5) throw DomainError("quintiles need at least 5 observations, got " + std::to_string(n));
  std::sort(items.begin(), items.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second < b.second;
    return a.first < b.first;
  });
  std::set<WordKey> seen;
  for (const auto& it : items)
    if (!seen.insert(it.first).second)
      throw DomainError("duplicate word " + it.first.doc_id + "#" + std::to_string(it.first.word_index));
  QuintileAssignment qa;
  for (int q = 1; q <= 5; ++q) {
    const std::size_t lo = (q - 1) * n / 5;
    const std::size_t hi = q * n / 5;
    for (std::size_t i = lo; i < hi; ++i) qa.labels.emplace(items[i].first, q);
    if (q < 5) qa.boundaries[static_cast<std::size_t>(q - 1)] = items[hi - 1].second;
  }
  return qa;
}

}  // namespace surpfit
