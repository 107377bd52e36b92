#pragma once

// Frequency-stratified residual diagnostics: per-quintile error tables,
// perplexity/MSE slope tests, quintile-membership permutation tests,
// training-dynamics and occlusion tables.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <random>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include <boost/math/distributions/students_t.hpp>

#include "surpfit/common.hpp"
#include "surpfit/mixedlm/fit.hpp"
#include "surpfit/scoring.hpp"
#include "surpfit/unigram.hpp"

namespace surpfit {

using mixedlm::ResidualRecord;

inline constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

struct VariantResult {
  std::string model_id;
  long checkpoint_step = 0;
  std::string corpus_id;
  double log2_perplexity = 0;
  std::vector<ResidualRecord> records;
  std::map<WordKey, double> word_surprisal;  // complete words only
};

// ---------------------------------------------------------------------------
// Quintile report

struct QuintileStats {
  int quintile = 0;
  std::size_t n = 0, n_under = 0, n_over = 0;
  double mse = kNaN;
  double sse = 0, sse_under = 0, sse_over = 0;
  double mean_surprisal = kNaN, mean_surprisal_under = kNaN, mean_surprisal_over = kNaN;
  double surprisal_proportion = kNaN;
};

struct QuintileReport {
  std::array<QuintileStats, 5> quintiles;
  std::size_t n = 0;
  double mse = kNaN;
  double sse = 0;
};

/// Residual > 0 counts as underprediction, residual < 0 as overprediction.
inline QuintileReport quintile_report(const std::vector<ResidualRecord>& records) {
  QuintileReport rep;
  std::array<double, 5> surp{}, surp_under{}, surp_over{};
  double surp_total = 0;
  for (int q = 0; q < 5; ++q) rep.quintiles[static_cast<std::size_t>(q)].quintile = q + 1;
  for (const auto& r : records) {
    if (r.quintile < 1 || r.quintile > 5) throw DomainError("record without a quintile label 1..5");
    const auto q = static_cast<std::size_t>(r.quintile - 1);
    auto& s = rep.quintiles[q];
    ++s.n;
    surp[q] += r.surprisal;
    surp_total += r.surprisal;
    if (r.residual > 0) {
      ++s.n_under;
      s.sse_under += r.squared_error;
      surp_under[q] += r.surprisal;
    } else if (r.residual < 0) {
      ++s.n_over;
      s.sse_over += r.squared_error;
      surp_over[q] += r.surprisal;
    }
  }
  for (std::size_t q = 0; q < 5; ++q) {
    auto& s = rep.quintiles[q];
    if (s.n == 0) throw DomainError("quintile " + std::to_string(q + 1) + " is empty");
    s.sse = s.sse_under + s.sse_over;  // zero residuals add nothing; keeps the split exact
    const double n = static_cast<double>(s.n);
    s.mse = s.sse / n;
    s.mean_surprisal = surp[q] / n;
    if (s.n_under) s.mean_surprisal_under = surp_under[q] / static_cast<double>(s.n_under);
    if (s.n_over) s.mean_surprisal_over = surp_over[q] / static_cast<double>(s.n_over);
    s.surprisal_proportion = surp_total != 0 ? surp[q] / surp_total : kNaN;
    rep.n += s.n;
    rep.sse += s.sse;
  }
  rep.mse = rep.sse / static_cast<double>(rep.n);
  return rep;
}

// ---------------------------------------------------------------------------
// Slope test

struct SlopeTest {
  double slope = 0;
  double intercept = 0;
  double t_statistic = 0;
  int degrees_freedom = 0;
  double p_one_tailed = 0.5;  // H1: slope < 0
};

/// OLS of y on x with a one-tailed Student t test against slope < 0.
inline SlopeTest slope_test(const std::vector<std::pair<double, double>>& points) {
  const std::size_t n = points.size();
  if (n < 3) throw DomainError("slope test needs at least 3 points");
  double mx = 0, my = 0;
  for (const auto& [x, y] : points) {
    mx += x;
    my += y;
  }
  mx /= static_cast<double>(n);
  my /= static_cast<double>(n);
  double sxx = 0, sxy = 0, syy = 0;
  for (const auto& [x, y] : points) {
    sxx += (x - mx) * (x - mx);
    sxy += (x - mx) * (y - my);
    syy += (y - my) * (y - my);
  }
  if (sxx == 0) throw DomainError("slope test: all x values are equal");
  SlopeTest t;
  t.degrees_freedom = static_cast<int>(n) - 2;
  t.slope = sxy / sxx;
  t.intercept = my - t.slope * mx;
  double sse = 0;
  for (const auto& [x, y] : points) {
    const double e = y - t.intercept - t.slope * x;
    sse += e * e;
  }
  // flat or exactly collinear data
  const double scale = std::max(syy, my * my * static_cast<double>(n));
  if (syy <= 1e-28 * std::max(scale, 1e-300)) {
    t.slope = 0;
    t.t_statistic = 0;
    t.p_one_tailed = 0.5;
    return t;
  }
  if (sse <= 1e-26 * syy) {
    t.t_statistic = t.slope < 0 ? -std::numeric_limits<double>::infinity() : std::numeric_limits<double>::infinity();
    t.p_one_tailed = t.slope < 0 ? 0.0 : 1.0;
    return t;
  }
  const double se = std::sqrt(sse / t.degrees_freedom / sxx);
  t.t_statistic = t.slope / se;
  boost::math::students_t dist(t.degrees_freedom);
  t.p_one_tailed = boost::math::cdf(dist, t.t_statistic);
  return t;
}

// ---------------------------------------------------------------------------
// Permutation test

struct PermutationResult {
  double observed_statistic = 0;
  int permutation_count = 0;
  double p_value = 1;
  std::uint64_t seed = 0;
  int target_quintile = 1;
  int other_quintile = 2;
  std::size_t count_le = 0;  // permuted statistics <= observed
  std::size_t target_words = 0, other_words = 0;
};

/// One-sided p = (1 + #{permuted <= observed}) / (R + 1).
inline double permutation_p_value(double observed, const std::vector<double>& permuted) {
  if (permuted.empty()) throw DomainError("permutation test needs R >= 1");
  std::size_t le = 0;
  const double tol = 1e-10 * std::abs(observed);
  for (double v : permuted)
    if (v <= observed + tol) ++le;
  return (1.0 + static_cast<double>(le)) / (static_cast<double>(permuted.size()) + 1.0);
}

/// Word-level squared errors of the two compared quintiles under each variant.
struct PermutationData {
  std::vector<double> x;                 // log2 perplexity per variant
  std::vector<std::vector<double>> sse;  // [variant][word]
  std::vector<double> count;             // observations per word
  std::vector<char> in_target;           // initial membership per word
};

/// Statistic for a membership vector: slope of target-group MSE on x minus
/// slope of other-group MSE on x.
inline double slope_difference(const PermutationData& d, const std::vector<char>& in_target) {
  const std::size_t V = d.x.size();
  double mx = 0;
  for (double v : d.x) mx += v;
  mx /= static_cast<double>(V);
  double nt = 0, no = 0;
  for (std::size_t w = 0; w < in_target.size(); ++w) (in_target[w] ? nt : no) += d.count[w];
  double sxx = 0, st = 0, so = 0;
  for (std::size_t v = 0; v < V; ++v) {
    double et = 0, eo = 0;
    const auto& row = d.sse[v];
    for (std::size_t w = 0; w < in_target.size(); ++w) (in_target[w] ? et : eo) += row[w];
    const double dx = d.x[v] - mx;
    sxx += dx * dx;
    st += dx * (et / nt);
    so += dx * (eo / no);
  }
  return (st - so) / sxx;
}

inline PermutationData permutation_data(const std::vector<VariantResult>& variants, int target_q, int other_q) {
  if (variants.size() < 2) throw DomainError("permutation test needs at least 2 variants");
  if (target_q == other_q) throw DomainError("permutation test needs two distinct quintiles");
  PermutationData d;
  std::map<WordKey, std::size_t> word_index;
  std::vector<WordKey> words;
  for (const auto& r : variants.front().records) {
    if (r.quintile != target_q && r.quintile != other_q) continue;
    auto [it, fresh] = word_index.try_emplace({r.doc_id, r.word_index}, words.size());
    if (fresh) {
      words.push_back(it->first);
      d.in_target.push_back(r.quintile == target_q);
      d.count.push_back(0);
    } else if (static_cast<bool>(d.in_target[it->second]) != (r.quintile == target_q)) {
      throw DomainError("word " + r.doc_id + "#" + std::to_string(r.word_index) + " has inconsistent quintile labels");
    }
    d.count[it->second] += 1;
  }
  std::size_t nt = 0;
  for (char c : d.in_target) nt += c ? 1 : 0;
  if (nt < 2 || words.size() - nt < 2) throw DomainError("permutation groups need at least 2 words each");

  for (const auto& v : variants) {
    d.x.push_back(v.log2_perplexity);
    std::vector<double> row(words.size(), 0.0);
    std::vector<double> cnt(words.size(), 0.0);
    for (const auto& r : v.records) {
      if (r.quintile != target_q && r.quintile != other_q) continue;
      auto it = word_index.find({r.doc_id, r.word_index});
      if (it == word_index.end()) throw DomainError("variants were not scored on the same observations");
      row[it->second] += r.squared_error;
      cnt[it->second] += 1;
    }
    if (cnt != d.count) throw DomainError("variants were not scored on the same observations");
    d.sse.push_back(std::move(row));
  }
  const auto [lo, hi] = std::minmax_element(d.x.begin(), d.x.end());
  if (*lo == *hi) throw DomainError("all variants have the same perplexity");
  return d;
}

/// Permutation statistics, one per index r; index r always uses the
/// substream derive_seed(seed, r), so the result does not depend on `threads`.
inline std::vector<double> permuted_statistics(const PermutationData& d, int R, std::uint64_t seed, int threads = 1) {
  if (R < 1) throw DomainError("permutation test needs R >= 1");
  std::vector<double> out(static_cast<std::size_t>(R));
  auto work = [&](int begin, int end) {
    std::vector<char> labels;
    for (int r = begin; r < end; ++r) {
      labels = d.in_target;
      std::mt19937_64 rng(util::derive_seed(seed, static_cast<std::uint64_t>(r)));
      util::shuffle(labels, rng);
      out[static_cast<std::size_t>(r)] = slope_difference(d, labels);
    }
  };
  threads = std::max(1, std::min(threads, R));
  if (threads == 1) {
    work(0, R);
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < threads; ++t) pool.emplace_back(work, R * t / threads, R * (t + 1) / threads);
    for (auto& th : pool) th.join();
  }
  return out;
}

/// Tests whether the MSE-vs-log-perplexity slope of `target_q` is lower than
/// that of `other_q` by shuffling word membership between the two quintiles
/// (the same shuffle applies to every variant).
inline PermutationResult quintile_slope_permutation(const std::vector<VariantResult>& variants, int target_q, int other_q,
                                                    int R, std::uint64_t seed, int threads = 1) {
  if (R < 1) throw DomainError("permutation test needs R >= 1");
  const auto d = permutation_data(variants, target_q, other_q);
  PermutationResult res;
  res.observed_statistic = slope_difference(d, d.in_target);
  const auto perm = permuted_statistics(d, R, seed, threads);
  res.permutation_count = R;
  res.seed = seed;
  res.target_quintile = target_q;
  res.other_quintile = other_q;
  res.p_value = permutation_p_value(res.observed_statistic, perm);
  res.count_le = static_cast<std::size_t>(std::llround(res.p_value * (R + 1))) - 1;
  for (char c : d.in_target) (c ? res.target_words : res.other_words) += 1;
  return res;
}

// ---------------------------------------------------------------------------
// Training dynamics

struct DynamicsRow {
  std::string model_id;
  long checkpoint_step = 0;
  int quintile = 0;
  bool present = false;
  std::size_t n_words = 0;
  double mean_surprisal = kNaN;
  double surprisal_proportion = kNaN;  // sum in quintile / sum over quintiles
  std::size_t n_observations = 0;
  double sse = kNaN, sse_under = kNaN, sse_over = kNaN;
};

/// Long-format table over (variant, step, quintile). Surprisal statistics use
/// the word table of labeled words; SSEs come from the regression residuals.
/// Cells missing from `runs` are emitted with present = false.
inline std::vector<DynamicsRow> training_dynamics(const std::vector<VariantResult>& runs,
                                                  const QuintileAssignment& quintiles) {
  std::vector<std::string> models;
  std::set<long> steps;
  std::map<std::pair<std::string, long>, const VariantResult*> cell;
  for (const auto& r : runs) {
    if (std::find(models.begin(), models.end(), r.model_id) == models.end()) models.push_back(r.model_id);
    steps.insert(r.checkpoint_step);
    if (!cell.emplace(std::make_pair(r.model_id, r.checkpoint_step), &r).second)
      throw DomainError("duplicate run " + r.model_id + " step " + std::to_string(r.checkpoint_step));
  }
  if (!runs.empty())
    for (const auto& r : runs)
      if (r.corpus_id != runs.front().corpus_id) throw DomainError("training dynamics over mixed corpora");

  std::vector<DynamicsRow> rows;
  for (const auto& m : models) {
    for (long step : steps) {
      auto it = cell.find({m, step});
      std::array<DynamicsRow, 5> block;
      for (int q = 0; q < 5; ++q) {
        block[static_cast<std::size_t>(q)].model_id = m;
        block[static_cast<std::size_t>(q)].checkpoint_step = step;
        block[static_cast<std::size_t>(q)].quintile = q + 1;
      }
      if (it != cell.end()) {
        const VariantResult& v = *it->second;
        std::array<double, 5> sum{};
        double total = 0;
        for (const auto& [key, s] : v.word_surprisal) {
          const int q = quintiles.label(key);
          if (q == 0) continue;
          sum[static_cast<std::size_t>(q - 1)] += s;
          block[static_cast<std::size_t>(q - 1)].n_words += 1;
          total += s;
        }
        for (auto& b : block) {
          b.present = true;
          b.sse = b.sse_under = b.sse_over = 0;
        }
        for (const auto& r : v.records) {
          auto& b = block[static_cast<std::size_t>(r.quintile - 1)];
          b.n_observations += 1;
          if (r.residual > 0) b.sse_under += r.squared_error;
          if (r.residual < 0) b.sse_over += r.squared_error;
        }
        for (auto& b : block) b.sse = b.sse_under + b.sse_over;
        for (std::size_t q = 0; q < 5; ++q) {
          auto& b = block[q];
          if (b.n_words) b.mean_surprisal = sum[q] / static_cast<double>(b.n_words);
          if (total != 0) b.surprisal_proportion = sum[q] / total;
        }
      }
      rows.insert(rows.end(), block.begin(), block.end());
    }
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Occlusion

struct OcclusionInput {
  std::string model_id;
  Condition condition;
  std::map<WordKey, double> word_surprisal;  // target words only
};

struct OcclusionRow {
  std::string model_id;
  Condition condition;
  std::size_t n_words = 0;
  double mean_surprisal = kNaN;
  double proportion = kNaN;  // mean / sum of the variant's condition means
};

inline std::vector<OcclusionRow> occlusion_report(const std::vector<OcclusionInput>& runs) {
  std::vector<std::string> models;
  for (const auto& r : runs)
    if (std::find(models.begin(), models.end(), r.model_id) == models.end()) models.push_back(r.model_id);

  std::vector<OcclusionRow> rows;
  for (const auto& m : models) {
    std::vector<const OcclusionInput*> mine;
    for (const auto& r : runs)
      if (r.model_id == m) mine.push_back(&r);
    std::sort(mine.begin(), mine.end(), [](const OcclusionInput* a, const OcclusionInput* b) {
      // full first, then decreasing context length
      if (a->condition.is_full() != b->condition.is_full()) return a->condition.is_full();
      return a->condition.recent > b->condition.recent;
    });
    const auto& ref = mine.front()->word_surprisal;
    for (const auto* r : mine) {
      if (r->word_surprisal.size() == ref.size() &&
          std::equal(ref.begin(), ref.end(), r->word_surprisal.begin(),
                     [](const auto& a, const auto& b) { return a.first == b.first; }))
        continue;
      std::string diff;
      std::size_t shown = 0;
      auto note = [&](const WordKey& k) {
        if (shown++ < 10) diff += " " + k.doc_id + "#" + std::to_string(k.word_index);
      };
      for (const auto& [k, v] : ref)
        if (!r->word_surprisal.count(k)) note(k);
      for (const auto& [k, v] : r->word_surprisal)
        if (!ref.count(k)) note(k);
      throw DomainError("occlusion word sets differ for " + m + " between " + mine.front()->condition.name() +
                        " and " + r->condition.name() + ":" + diff + (shown > 10 ? " ..." : ""));
    }
    double total = 0;
    const std::size_t first = rows.size();
    for (const auto* r : mine) {
      OcclusionRow row;
      row.model_id = m;
      row.condition = r->condition;
      row.n_words = r->word_surprisal.size();
      if (row.n_words) {
        double s = 0;
        for (const auto& [k, v] : r->word_surprisal) s += v;
        row.mean_surprisal = s / static_cast<double>(row.n_words);
        total += row.mean_surprisal;
      }
      rows.push_back(row);
    }
    for (std::size_t i = first; i < rows.size(); ++i)
      if (total != 0 && !std::isnan(rows[i].mean_surprisal)) rows[i].proportion = rows[i].mean_surprisal / total;
  }
  return rows;
}

}  // namespace surpfit
