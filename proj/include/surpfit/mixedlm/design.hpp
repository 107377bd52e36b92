#pragma once

// Design matrices for linear mixed-effects regressions of log reading time.

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/SparseCore>

#include "surpfit/common.hpp"
#include "surpfit/corpus.hpp"
#include "surpfit/scoring.hpp"
#include "surpfit/unigram.hpp"

namespace surpfit::mixedlm {

struct ColumnScaling {
  std::string name;
  double mean = 0;
  double sd = 1;
};

/// Centers each column and scales it to unit sample standard deviation.
inline std::pair<Eigen::MatrixXd, std::vector<ColumnScaling>> standardize(const Eigen::MatrixXd& columns,
                                                                           const std::vector<std::string>& names) {
  if (static_cast<std::size_t>(columns.cols()) != names.size())
    throw DomainError("standardize: one name per column required");
  if (columns.rows() < 2) throw DomainError("standardize: need at least 2 rows");
  Eigen::MatrixXd out(columns.rows(), columns.cols());
  std::vector<ColumnScaling> record;
  for (Eigen::Index j = 0; j < columns.cols(); ++j) {
    const auto col = columns.col(j);
    if (col.maxCoeff() == col.minCoeff())
      throw DomainError("predictor '" + names[static_cast<std::size_t>(j)] + "' is constant");
    const double mean = col.mean();
    const double sd = std::sqrt((col.array() - mean).square().sum() / static_cast<double>(col.size() - 1));
    out.col(j) = (col.array() - mean) / sd;
    record.push_back({names[static_cast<std::size_t>(j)], mean, sd});
  }
  return {std::move(out), std::move(record)};
}

enum class Covariance { full, diagonal };

inline std::string_view to_string(Covariance c) { return c == Covariance::full ? "full" : "diagonal"; }

inline Covariance parse_covariance(std::string_view s) {
  if (s == "full") return Covariance::full;
  if (s == "diagonal") return Covariance::diagonal;
  throw InputError("covariance must be 'full' or 'diagonal', got '" + std::string(s) + "'");
}

/// One random-effects term: an intercept plus optional slopes per level of a
/// grouping factor, with a k x k lower-triangular relative covariance factor
/// shared by all levels.
struct RandomTerm {
  std::string grouping;
  std::vector<std::string> coef_names;  // "(Intercept)" first
  Covariance covariance = Covariance::full;
  std::vector<std::string> level_names;
  std::vector<int> level_of;  // per observation
  Eigen::MatrixXd covariates;  // n x k, column 0 all ones
  Eigen::Index z_offset = 0;

  int k() const { return static_cast<int>(coef_names.size()); }
  int levels() const { return static_cast<int>(level_names.size()); }
  int n_theta() const { return covariance == Covariance::full ? k() * (k() + 1) / 2 : k(); }

  /// (row, col) of each theta entry in the factor, column-major lower triangle.
  std::vector<std::pair<int, int>> theta_layout() const {
    std::vector<std::pair<int, int>> out;
    for (int c = 0; c < k(); ++c)
      for (int r = c; r < k(); ++r)
        if (covariance == Covariance::full || r == c) out.emplace_back(r, c);
    return out;
  }
};

struct ObservationKey {
  std::string subject_id;
  std::string doc_id;
  int word_index = 0;
};

struct DesignMatrices {
  Eigen::VectorXd y;
  Eigen::MatrixXd X;  // n x p, intercept in column 0
  std::vector<std::string> fixed_names;
  Eigen::SparseMatrix<double> Z;  // n x q
  std::vector<RandomTerm> terms;
  std::vector<ColumnScaling> scaling;
  std::vector<ObservationKey> keys;
  std::vector<double> surprisal;  // raw word surprisal per observation

  Eigen::Index n() const { return y.size(); }
  Eigen::Index p() const { return X.cols(); }
  Eigen::Index q() const { return Z.cols(); }
  int n_theta() const {
    int t = 0;
    for (const auto& term : terms) t += term.n_theta();
    return t;
  }
};

struct GroupingInput {
  std::string name;
  std::vector<std::string> level_per_obs;
  std::vector<std::string> slopes;  // names of predictor columns
  Covariance covariance = Covariance::full;
};

/// Assembles y, X (with intercept) and Z. When `standardize_predictors` is set
/// the predictor columns are standardized first; random slopes always use the
/// columns as they appear in X.
inline DesignMatrices make_design(Eigen::VectorXd y, const Eigen::MatrixXd& predictors, const std::vector<std::string>& names,
                                  const std::vector<GroupingInput>& groups, bool standardize_predictors = true) {
  const Eigen::Index n = y.size();
  if (predictors.rows() != n && predictors.cols() > 0) throw DomainError("predictor rows differ from response length");
  if (static_cast<std::size_t>(predictors.cols()) != names.size()) throw DomainError("one name per predictor required");

  DesignMatrices d;
  d.y = std::move(y);
  d.X.resize(n, predictors.cols() + 1);
  d.X.col(0).setOnes();
  d.fixed_names.push_back("(Intercept)");
  if (predictors.cols() > 0) {
    if (standardize_predictors) {
      auto [cols, rec] = standardize(predictors, names);
      d.X.rightCols(predictors.cols()) = cols;
      d.scaling = std::move(rec);
    } else {
      d.X.rightCols(predictors.cols()) = predictors;
    }
  }
  d.fixed_names.insert(d.fixed_names.end(), names.begin(), names.end());

  Eigen::Index q = 0;
  std::vector<Eigen::Triplet<double>> trips;
  for (const auto& g : groups) {
    if (g.level_per_obs.size() != static_cast<std::size_t>(n))
      throw DomainError("grouping '" + g.name + "' has wrong length");
    RandomTerm t;
    t.grouping = g.name;
    t.covariance = g.covariance;
    t.coef_names.push_back("(Intercept)");
    std::vector<Eigen::Index> cols{0};
    for (const auto& s : g.slopes) {
      auto it = std::find(d.fixed_names.begin() + 1, d.fixed_names.end(), s);
      if (it == d.fixed_names.end()) throw DomainError("random slope '" + s + "' is not a fixed effect");
      t.coef_names.push_back(s);
      cols.push_back(it - d.fixed_names.begin());
    }
    std::map<std::string, int> index;
    for (const auto& l : g.level_per_obs) index.emplace(l, 0);
    for (auto& [name, idx] : index) {
      idx = static_cast<int>(t.level_names.size());
      t.level_names.push_back(name);
    }
    t.level_of.resize(static_cast<std::size_t>(n));
    t.covariates.resize(n, static_cast<Eigen::Index>(cols.size()));
    for (Eigen::Index i = 0; i < n; ++i) {
      t.level_of[static_cast<std::size_t>(i)] = index.at(g.level_per_obs[static_cast<std::size_t>(i)]);
      for (std::size_t j = 0; j < cols.size(); ++j) t.covariates(i, static_cast<Eigen::Index>(j)) = d.X(i, cols[j]);
    }
    t.z_offset = q;
    const int k = t.k();
    for (Eigen::Index i = 0; i < n; ++i)
      for (int j = 0; j < k; ++j)
        trips.emplace_back(i, q + static_cast<Eigen::Index>(t.level_of[static_cast<std::size_t>(i)]) * k + j,
                           t.covariates(i, j));
    q += static_cast<Eigen::Index>(t.levels()) * k;
    d.terms.push_back(std::move(t));
  }
  d.Z.resize(n, q);
  d.Z.setFromTriplets(trips.begin(), trips.end());
  d.Z.makeCompressed();
  return d;
}

// ---------------------------------------------------------------------------
// Reading-time regressions

inline const std::vector<std::string>& known_predictors() {
  static const std::vector<std::string> names{"surprisal",        "word_length",    "word_position",
                                              "unigram_surprisal", "saccade_length", "prev_fixated"};
  return names;
}

struct RandomTermSpec {
  std::string grouping;  // subject | sentence | subject_sentence
  std::vector<std::string> slopes;
  Covariance covariance = Covariance::full;
};

struct RegressionSpec {
  std::vector<std::string> fixed_effects;
  std::vector<RandomTermSpec> random_terms;
  Paradigm paradigm = Paradigm::self_paced;

  /// By-subject intercepts and slopes for every fixed effect, plus
  /// subject-by-sentence intercepts (self-paced) or sentence intercepts
  /// (eye-tracking).
  static RegressionSpec standard(Paradigm paradigm, Covariance cov = Covariance::full) {
    RegressionSpec s;
    s.paradigm = paradigm;
    s.fixed_effects = {"surprisal", "word_length", "word_position", "unigram_surprisal"};
    if (paradigm == Paradigm::eye_tracking) {
      s.fixed_effects.push_back("saccade_length");
      s.fixed_effects.push_back("prev_fixated");
    }
    s.random_terms.push_back({"subject", s.fixed_effects, cov});
    s.random_terms.push_back(
        {paradigm == Paradigm::self_paced ? "subject_sentence" : "sentence", {}, Covariance::full});
    return s;
  }

  void validate() const {
    if (std::count(fixed_effects.begin(), fixed_effects.end(), "surprisal") != 1)
      throw InputError("regression must contain 'surprisal' exactly once");
    for (const auto& f : fixed_effects) {
      const auto& known = known_predictors();
      if (std::find(known.begin(), known.end(), f) == known.end())
        throw InputError("unknown predictor '" + f + "'");
      if (paradigm == Paradigm::self_paced && (f == "saccade_length" || f == "prev_fixated"))
        throw InputError("predictor '" + f + "' needs an eye-tracking corpus");
    }
    for (const auto& t : random_terms) {
      if (t.grouping != "subject" && t.grouping != "sentence" && t.grouping != "subject_sentence")
        throw InputError("unknown grouping factor '" + t.grouping + "'");
      for (const auto& s : t.slopes)
        if (std::find(fixed_effects.begin(), fixed_effects.end(), s) == fixed_effects.end())
          throw InputError("random slope '" + s + "' is not a fixed effect");
    }
  }
};

struct DesignBuild {
  DesignMatrices design;
  std::vector<WordObservation> dropped_incomplete;  // word surprisal incomplete
};

/// Builds the regression design from filtered observations. Observations whose
/// word surprisal is incomplete (document-initial token) are dropped and logged.
inline DesignBuild build_design(const Corpus& corpus, const FilteredSet& fs,
                                const std::map<WordKey, WordSurprisal>& surprisals,
                                const std::map<WordKey, double>& unigram_surprisal, const RegressionSpec& spec) {
  spec.validate();
  if (fs.paradigm != spec.paradigm) throw DomainError("regression spec paradigm differs from the data");
  const auto p = static_cast<Eigen::Index>(spec.fixed_effects.size());

  DesignBuild out;
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < fs.observations.size(); ++i) {
    const auto& o = fs.observations[i];
    auto it = surprisals.find({o.doc_id, o.word_index});
    if (it == surprisals.end())
      throw InputError("no surprisal for " + o.doc_id + "#" + std::to_string(o.word_index));
    if (!it->second.complete) {
      out.dropped_incomplete.push_back(o);
      continue;
    }
    keep.push_back(i);
  }
  const auto n = static_cast<Eigen::Index>(keep.size());
  Eigen::VectorXd y(n);
  Eigen::MatrixXd raw(n, p);
  std::vector<ObservationKey> keys;
  std::vector<double> surp;
  std::vector<std::string> subj, sent, subj_sent;
  for (Eigen::Index r = 0; r < n; ++r) {
    const auto& o = fs.observations[keep[static_cast<std::size_t>(r)]];
    const WordKey key{o.doc_id, o.word_index};
    const WordToken* w = corpus.find_word(o.doc_id, o.word_index);
    const Document* doc = corpus.find_document(o.doc_id);
    if (!w) throw InputError("unknown word " + o.doc_id + "#" + std::to_string(o.word_index));
    y(r) = fs.log_rt[keep[static_cast<std::size_t>(r)]];
    const double s = surprisals.at(key).surprisal;
    for (Eigen::Index j = 0; j < p; ++j) {
      const auto& name = spec.fixed_effects[static_cast<std::size_t>(j)];
      double v;
      if (name == "surprisal") {
        v = s;
      } else if (name == "word_length") {
        v = static_cast<double>(util::utf8_length(doc->word_text(*w)));
      } else if (name == "word_position") {
        v = w->position_in_sentence;
      } else if (name == "unigram_surprisal") {
        auto u = unigram_surprisal.find(key);
        if (u == unigram_surprisal.end())
          throw InputError("no unigram surprisal for " + o.doc_id + "#" + std::to_string(o.word_index));
        v = u->second;
      } else if (name == "saccade_length") {
        v = o.saccade_length.value_or(0);
      } else {
        v = o.prev_fixated.value_or(false) ? 1.0 : 0.0;
      }
      raw(r, j) = v;
    }
    keys.push_back({o.subject_id, o.doc_id, o.word_index});
    surp.push_back(s);
    const std::string sentence = o.doc_id + ":" + std::to_string(o.sentence_id);
    subj.push_back(o.subject_id);
    sent.push_back(sentence);
    subj_sent.push_back(o.subject_id + "|" + sentence);
  }

  std::vector<GroupingInput> groups;
  for (const auto& t : spec.random_terms) {
    const auto& levels = t.grouping == "subject" ? subj : t.grouping == "sentence" ? sent : subj_sent;
    groups.push_back({t.grouping, levels, t.slopes, t.covariance});
  }
  out.design = make_design(std::move(y), raw, spec.fixed_effects, groups, true);
  out.design.keys = std::move(keys);
  out.design.surprisal = std::move(surp);
  return out;
}

}  // namespace surpfit::mixedlm
