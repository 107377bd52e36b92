#pragma once

// Oracle-backed property checks shared by `surpfit selftest` and the
// acceptance suite. Each check compares production code against an
// independent computation from oracles.hpp and reports the worst deviation.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "surpfit/diagnostics.hpp"
#include "surpfit/mixedlm/fit.hpp"
#include "surpfit/oracles.hpp"
#include "surpfit/scoring.hpp"

namespace surpfit::checks {

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
  double seconds = 0;
};

namespace detail {

inline std::string sci(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

inline std::vector<std::vector<double>> one_way_data(int groups, int replicates, double sd_between, double sd_within,
                                                     std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0, 1);
  std::vector<std::vector<double>> g(static_cast<std::size_t>(groups));
  for (auto& grp : g) {
    const double b = sd_between * nd(rng);
    for (int r = 0; r < replicates; ++r) grp.push_back(6.0 + b + sd_within * nd(rng));
  }
  return g;
}

inline mixedlm::DesignMatrices one_way_design(const std::vector<std::vector<double>>& g) {
  std::vector<double> y;
  mixedlm::GroupingInput grp{"group", {}, {}, mixedlm::Covariance::full};
  for (std::size_t i = 0; i < g.size(); ++i)
    for (double v : g[i]) {
      y.push_back(v);
      grp.level_per_obs.push_back("g" + std::to_string(i));
    }
  return mixedlm::make_design(Eigen::Map<Eigen::VectorXd>(y.data(), static_cast<Eigen::Index>(y.size())),
                              Eigen::MatrixXd(y.size(), 0), {}, {grp});
}

/// Random document: words of letters (some non-ASCII) separated by runs of
/// spaces and newlines, optionally with leading and trailing whitespace.
inline Document random_document(const std::string& doc_id, std::mt19937_64& rng) {
  static const std::vector<std::string> letters{"a", "b", "c", "d", "e", "k", "s", "t", "\xC3\xA9", "\xE2\x80\x99", "."};
  static const std::vector<std::string> gaps{" ", " ", " ", "  ", "\n", " \n "};
  const int n_words = 1 + static_cast<int>(util::bounded(rng, 40));
  std::string text;
  if (util::bounded(rng, 4) == 0) text += gaps[util::bounded(rng, gaps.size())];
  for (int w = 0; w < n_words; ++w) {
    if (w) text += gaps[util::bounded(rng, gaps.size())];
    const int len = 1 + static_cast<int>(util::bounded(rng, 9));
    for (int i = 0; i < len; ++i) text += letters[util::bounded(rng, letters.size())];
  }
  if (util::bounded(rng, 3) == 0) text += gaps[util::bounded(rng, gaps.size())];
  Document d;
  d.doc_id = doc_id;
  d.set_text(text);
  std::size_t cp = 0;
  int idx = 0;
  while (cp < d.length()) {
    while (cp < d.length() && d.is_space_at(cp)) ++cp;
    if (cp >= d.length()) break;
    std::size_t end = cp;
    while (end < d.length() && !d.is_space_at(end)) ++end;
    WordToken t;
    t.word_index = ++idx;
    t.char_start = cp;
    t.char_end = end;
    t.sentence_id = 1;
    t.position_in_sentence = idx;
    d.words.push_back(t);
    cp = end;
  }
  return d;
}

}  // namespace detail

/// Sparse profiled REML deviance against the dense V = ZSZ' + I evaluation.
inline CheckResult reml_oracle(int instances, std::uint64_t seed = 1000) {
  detail::Stopwatch sw;
  double worst = 0;
  for (int i = 0; i < instances; ++i) {
    const auto inst = oracle::random_instance(seed + static_cast<std::uint64_t>(i));
    const double sparse = mixedlm::reml_deviance(inst.theta, inst.design);
    const double dense = oracle::dense_reml_deviance(inst.design, inst.theta);
    worst = std::max(worst, std::abs(sparse - dense) / std::max(1.0, std::abs(dense)));
  }
  CheckResult r{"REML sparse vs dense oracle", worst <= 1e-6, "", sw.seconds()};
  r.detail = std::to_string(instances) + " instances, max rel diff " + detail::sci(worst);
  return r;
}

/// Fitted variance components of a balanced one-way layout against the ANOVA
/// closed forms (MSB - MSW)/m and MSW.
inline CheckResult anova_benchmark(int groups = 20, int replicates = 10, std::uint64_t seed = 11) {
  detail::Stopwatch sw;
  const auto g = detail::one_way_data(groups, replicates, 0.8, 1.0, seed);
  const auto a = oracle::one_way_anova(g);
  const auto d = detail::one_way_design(g);
  const auto f = mixedlm::fit(d);
  const double rel_w = std::abs(f.sigma2 - a.sigma2_within()) / a.sigma2_within();
  const double rel_b = std::abs(f.term_covariance(d, 0)(0, 0) - a.sigma2_between()) / a.sigma2_between();
  const double worst = std::max(rel_w, rel_b);
  CheckResult r{"one-way variance components vs ANOVA", f.converged && worst <= 1e-6, "", sw.seconds()};
  r.detail = std::to_string(groups) + "x" + std::to_string(replicates) + ", rel err between " + detail::sci(rel_b) +
             ", within " + detail::sci(rel_w);
  return r;
}

/// theta = 0 fixed effects against QR least squares.
inline CheckResult ols_degeneracy(int fixtures, std::uint64_t seed = 2000) {
  detail::Stopwatch sw;
  double worst = 0;
  for (int i = 0; i < fixtures; ++i) {
    const auto inst = oracle::random_instance(seed + static_cast<std::uint64_t>(i));
    const auto f = mixedlm::fit_at(inst.design, std::vector<double>(inst.theta.size(), 0.0));
    const Eigen::VectorXd ols = oracle::ols_qr(inst.design.X, inst.design.y);
    worst = std::max(worst, (f.beta - ols).cwiseAbs().maxCoeff());
  }
  CheckResult r{"theta = 0 reproduces OLS", worst <= 1e-8, "", sw.seconds()};
  r.detail = std::to_string(fixtures) + " fixtures, max |beta diff| " + detail::sci(worst);
  return r;
}

/// Every token except the first is targeted exactly once; windows never exceed W.
inline CheckResult window_coverage(int pairs, std::uint64_t seed = 3000) {
  detail::Stopwatch sw;
  std::mt19937_64 rng(seed);
  int failures = 0;
  std::string first_failure;
  for (int i = 0; i < pairs; ++i) {
    const long count = 1 + static_cast<long>(util::bounded(rng, 10000));
    const int window = 2 * (1 + static_cast<int>(util::bounded(rng, 256)));
    const auto reqs = plan_windows(count, window);
    std::vector<int> hits(static_cast<std::size_t>(count + 1), 0);
    bool ok = true;
    for (const auto& q : reqs) {
      ok = ok && q.context_start >= 1 && q.context_start <= q.target_start && q.target_end <= count &&
           q.target_end - q.context_start + 1 <= window;
      for (long t = q.target_start; t <= q.target_end && ok; ++t) ++hits[static_cast<std::size_t>(t)];
    }
    ok = ok && hits[1] == 0;
    for (long t = 2; t <= count && ok; ++t) ok = hits[static_cast<std::size_t>(t)] == 1;
    if (!ok && failures++ == 0) first_failure = " (first: count " + std::to_string(count) + ", W " + std::to_string(window) + ")";
  }
  CheckResult r{"window coverage", failures == 0, "", sw.seconds()};
  r.detail = std::to_string(pairs) + " pairs, " + std::to_string(failures) + " failing" + first_failure;
  return r;
}

/// Word surprisals plus unattached trailing whitespace sum to the sequence
/// total, for random tilings written to and read back from score files.
inline CheckResult chain_rule(int files, const std::string& scratch_dir, std::uint64_t seed = 4000) {
  detail::Stopwatch sw;
  std::filesystem::create_directories(scratch_dir);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> lp(-15.0, -1e-3);
  double worst = 0;
  for (int f = 0; f < files; ++f) {
    ScoreFile sf;
    sf.header = {"m", 0, "tok", 8, Condition::full(), {}};
    std::vector<Document> docs;
    std::vector<double> totals;
    const int n_docs = 1 + static_cast<int>(util::bounded(rng, 3));
    for (int d = 0; d < n_docs; ++d) {
      docs.push_back(detail::random_document("doc" + std::to_string(d), rng));
      const auto& doc = docs.back();
      double total = 0;
      long idx = 1;
      for (std::size_t at = 0; at < doc.length();) {
        const std::size_t end = std::min(doc.length(), at + 1 + static_cast<std::size_t>(util::bounded(rng, 6)));
        TokenScore t;
        t.doc_id = doc.doc_id;
        t.token_index = idx;
        t.char_start = at;
        t.char_end = end;
        t.token_text = std::string(doc.slice(at, end));
        if (idx > 1) {
          t.log2prob = lp(rng);
          total -= *t.log2prob;
        }
        sf.scores.push_back(std::move(t));
        ++idx;
        at = end;
      }
      totals.push_back(total);
    }
    const std::string path = (std::filesystem::path(scratch_dir) / ("chain_" + std::to_string(f) + ".jsonl")).string();
    write_score_file(path, sf);
    const auto back = read_score_file(path);
    for (std::size_t d = 0; d < docs.size(); ++d) {
      std::vector<TokenScore> mine;
      for (const auto& t : back.scores)
        if (t.doc_id == docs[d].doc_id) mine.push_back(t);
      const auto al = align_tokens_to_words(docs[d], mine);
      double sum = al.unattached_surprisal;
      for (const auto& w : al.words) sum += w.surprisal;
      worst = std::max(worst, std::abs(sum - totals[d]));
    }
    std::filesystem::remove(path);
  }
  CheckResult r{"chain rule over tilings", worst <= 1e-6, "", sw.seconds()};
  r.detail = std::to_string(files) + " score files, max |diff| " + detail::sci(worst) + " bits";
  return r;
}

/// Fraction of exchangeable-null datasets with permutation p < 0.05.
inline CheckResult permutation_calibration(int nulls, int R, std::uint64_t seed = 5000) {
  detail::Stopwatch sw;
  int rejections = 0;
  for (int i = 0; i < nulls; ++i) {
    std::mt19937_64 rng(util::derive_seed(seed, static_cast<std::uint64_t>(i)));
    std::normal_distribution<double> nd(0, 1);
    PermutationData d;
    const int variants = 4, words = 60;
    for (int v = 0; v < variants; ++v) d.x.push_back(3.0 + v + 0.3 * nd(rng));
    d.sse.assign(static_cast<std::size_t>(variants), {});
    for (int w = 0; w < words; ++w) {
      d.count.push_back(1.0 + static_cast<double>(util::bounded(rng, 8)));
      d.in_target.push_back(w < words / 2 ? 1 : 0);
      const double base = std::exp(0.5 * nd(rng));
      const double drift = 0.1 * nd(rng);
      for (int v = 0; v < variants; ++v) {
        const double e = base * (1.0 + drift * v) + 0.2 * std::abs(nd(rng));
        d.sse[static_cast<std::size_t>(v)].push_back(d.count.back() * e);
      }
    }
    const double observed = slope_difference(d, d.in_target);
    const auto perm = permuted_statistics(d, R, util::derive_seed(seed ^ 0x9e37ULL, static_cast<std::uint64_t>(i)));
    if (permutation_p_value(observed, perm) < 0.05) ++rejections;
  }
  const double frac = static_cast<double>(rejections) / nulls;
  CheckResult r{"permutation calibration", frac >= 0.03 && frac <= 0.07, "", sw.seconds()};
  r.detail = std::to_string(nulls) + " nulls at R=" + std::to_string(R) + ", fraction p<0.05 = " + detail::sci(frac);
  return r;
}

/// slope_test against the textbook simple-regression formulas.
inline CheckResult slope_closed_form(int fixtures, std::uint64_t seed = 6000) {
  detail::Stopwatch sw;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0, 1);
  double worst = 0;
  for (int i = 0; i < fixtures; ++i) {
    const int n = 3 + static_cast<int>(util::bounded(rng, 10));
    std::vector<double> x, y;
    std::vector<std::pair<double, double>> pts;
    for (int k = 0; k < n; ++k) {
      x.push_back(2.0 + 3.0 * nd(rng));
      y.push_back(0.5 - 0.2 * x.back() + nd(rng));
      pts.emplace_back(x.back(), y.back());
    }
    const auto t = slope_test(pts);
    const auto o = oracle::simple_regression(x, y);
    worst = std::max({worst, std::abs(t.slope - o.slope) / std::max(1.0, std::abs(o.slope)),
                      std::abs(t.t_statistic - o.t) / std::max(1.0, std::abs(o.t)),
                      std::abs(t.intercept - o.intercept) / std::max(1.0, std::abs(o.intercept)),
                      t.degrees_freedom == o.df ? 0.0 : 1.0});
  }
  CheckResult r{"slope_test vs closed form", worst <= 1e-10, "", sw.seconds()};
  r.detail = std::to_string(fixtures) + " fixtures, max rel diff " + detail::sci(worst);
  return r;
}

/// Corpus MSE as the count-weighted mean of quintile MSEs, and the exact
/// under/over SSE split, on random residual tables.
inline CheckResult diagnostics_identities(int tables, std::uint64_t seed = 7000) {
  detail::Stopwatch sw;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0, 1);
  double worst = 0;
  bool exact = true;
  for (int i = 0; i < tables; ++i) {
    std::vector<ResidualRecord> recs;
    const int n = 50 + static_cast<int>(util::bounded(rng, 500));
    for (int k = 0; k < n; ++k) {
      ResidualRecord r;
      r.doc_id = "d";
      r.word_index = k + 1;
      r.quintile = 1 + k % 5;
      r.residual = util::bounded(rng, 20) == 0 ? 0.0 : 0.3 * nd(rng);
      r.squared_error = r.residual * r.residual;
      r.surprisal = std::abs(5 + 2 * nd(rng));
      recs.push_back(r);
    }
    const auto rep = quintile_report(recs);
    double weighted = 0, direct = 0;
    for (const auto& q : rep.quintiles) {
      weighted += static_cast<double>(q.n) * q.mse;
      exact = exact && q.sse_under + q.sse_over == q.sse;
      double s = 0;
      for (const auto& r : recs)
        if (r.quintile == q.quintile) s += r.squared_error;
      worst = std::max(worst, std::abs(s - q.sse) / std::max(1.0, s));
    }
    for (const auto& r : recs) direct += r.squared_error;
    direct /= static_cast<double>(recs.size());
    weighted /= static_cast<double>(rep.n);
    worst = std::max({worst, std::abs(weighted - direct), std::abs(rep.mse - direct)});
  }
  CheckResult r{"quintile MSE identity and SSE split", exact && worst <= 1e-10, "", sw.seconds()};
  r.detail = std::to_string(tables) + " tables, max diff " + detail::sci(worst) + (exact ? ", split exact" : ", split NOT exact");
  return r;
}

inline std::string format(const CheckResult& r) {
  char secs[32];
  std::snprintf(secs, sizeof secs, "%.2f", r.seconds);
  return std::string(r.passed ? "PASS" : "FAIL") + "  " + r.name + ": " + r.detail + " [" + secs + " s]";
}

}  // namespace surpfit::checks
