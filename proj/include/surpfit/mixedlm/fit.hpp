#pragma once

#include <cmath>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "surpfit/mixedlm/design.hpp"
#include "surpfit/mixedlm/nelder_mead.hpp"
#include "surpfit/mixedlm/reml.hpp"
#include "surpfit/unigram.hpp"

namespace surpfit::mixedlm {

struct FitOptions {
  NelderMeadOptions optimizer;
  double boundary_tol = 1e-4;  // theta diagonal below this marks a singular fit
};

struct FitResult {
  std::vector<std::string> fixed_names;
  Eigen::VectorXd beta;
  Eigen::VectorXd beta_se;
  std::vector<double> theta;
  double sigma2 = 0;
  double reml_deviance = 0;
  double initial_deviance = 0;
  bool converged = false;
  bool boundary_fit = false;
  bool exact_fit = false;  // y reproduced by the fixed effects; theta is not identified
  int evaluations = 0;
  int optimizer_runs = 0;
  Eigen::VectorXd fitted;  // log-RT scale, includes conditional modes
  Eigen::VectorXd ranef;   // conditional modes b

  /// sigma2 * T T' for random term `t` of `design`.
  Eigen::MatrixXd term_covariance(const DesignMatrices& design, std::size_t t) const {
    std::size_t base = 0;
    for (std::size_t i = 0; i < t; ++i) base += static_cast<std::size_t>(design.terms[i].n_theta());
    const auto& term = design.terms[t];
    Eigen::MatrixXd T = Eigen::MatrixXd::Zero(term.k(), term.k());
    const auto layout = term.theta_layout();
    for (std::size_t e = 0; e < layout.size(); ++e) T(layout[e].first, layout[e].second) = theta[base + e];
    return sigma2 * T * T.transpose();
  }
};

class NonConvergence : public std::runtime_error {
 public:
  explicit NonConvergence(FitResult best)
      : std::runtime_error("optimizer exhausted its evaluation budget without converging"), best_(std::move(best)) {}
  const FitResult& best() const { return best_; }

 private:
  FitResult best_;
};

namespace detail {

inline FitResult assemble(const DesignMatrices& d, const std::vector<double>& theta, const ProfiledSolution& s,
                          double boundary_tol, const std::vector<double>& lower) {
  FitResult r;
  r.fixed_names = d.fixed_names;
  r.beta = s.beta;
  r.beta_se = s.beta_se;
  r.theta = theta;
  r.sigma2 = s.sigma2;
  r.reml_deviance = s.deviance;
  r.fitted = s.fitted;
  r.ranef = s.b;
  for (std::size_t i = 0; i < theta.size(); ++i)
    if (lower[i] == 0.0 && theta[i] < boundary_tol) r.boundary_fit = true;
  return r;
}

}  // namespace detail

/// Profiled estimates at a fixed theta (no optimization).
inline FitResult fit_at(const DesignMatrices& design, const std::vector<double>& theta) {
  RemlProblem prob(design);
  auto s = prob.solve(theta);
  FitResult r = detail::assemble(design, theta, s, FitOptions{}.boundary_tol, prob.lower_bounds());
  r.initial_deviance = r.reml_deviance;
  r.converged = true;
  return r;
}

/// Minimizes the profiled REML deviance over theta. Throws NonConvergence
/// (carrying the best state found) when the evaluation budget runs out.
inline FitResult fit(const DesignMatrices& design, const FitOptions& options = {}) {
  const Eigen::Index n = design.n();
  RemlProblem prob(design);
  if (n <= design.p() + prob.n_theta() + 1)
    throw DomainError("too few observations (" + std::to_string(n) + ") for " + std::to_string(design.p()) +
                      " fixed effects and " + std::to_string(prob.n_theta()) + " covariance parameters");
  // With y (numerically) in the column space of X the criterion is -inf for
  // every theta, so the search would only chase round-off.
  const auto start = prob.solve(prob.initial_theta(), false);
  if (start.pwrss <= 1e-20 * std::max(1.0, design.y.squaredNorm())) {
    const std::vector<double> zero(static_cast<std::size_t>(prob.n_theta()), 0.0);
    FitResult r = detail::assemble(design, zero, prob.solve(zero), options.boundary_tol, prob.lower_bounds());
    r.initial_deviance = start.deviance;
    r.converged = true;
    r.exact_fit = true;
    r.evaluations = 2;
    return r;
  }
  auto objective = [&](const std::vector<double>& th) { return prob.deviance(th); };
  const auto nm = nelder_mead(objective, prob.initial_theta(), prob.lower_bounds(), options.optimizer);
  const auto s = prob.solve(nm.x);
  FitResult r = detail::assemble(design, nm.x, s, options.boundary_tol, prob.lower_bounds());
  r.initial_deviance = nm.f_initial;
  r.evaluations = nm.evaluations;
  r.optimizer_runs = nm.runs;
  r.converged = nm.converged;
  if (!r.converged) throw NonConvergence(std::move(r));
  return r;
}

struct ResidualRecord {
  std::string subject_id;
  std::string doc_id;
  int word_index = 0;
  double observed = 0;
  double predicted = 0;
  double residual = 0;  // observed - predicted; positive = underprediction
  double squared_error = 0;
  double surprisal = 0;
  int quintile = 0;
};

inline std::vector<ResidualRecord> residuals(const FitResult& fit, const DesignMatrices& design,
                                             const QuintileAssignment& quintiles) {
  if (!fit.converged) throw DomainError("residuals of an unconverged fit");
  if (fit.fitted.size() != design.n()) throw DomainError("fit does not belong to this design");
  std::vector<ResidualRecord> out;
  out.reserve(static_cast<std::size_t>(design.n()));
  for (Eigen::Index i = 0; i < design.n(); ++i) {
    const auto& k = design.keys[static_cast<std::size_t>(i)];
    ResidualRecord r;
    r.subject_id = k.subject_id;
    r.doc_id = k.doc_id;
    r.word_index = k.word_index;
    r.observed = design.y(i);
    r.predicted = fit.fitted(i);
    r.residual = r.observed - r.predicted;
    r.squared_error = r.residual * r.residual;
    r.surprisal = design.surprisal[static_cast<std::size_t>(i)];
    r.quintile = quintiles.label({k.doc_id, k.word_index});
    if (r.quintile == 0) throw DomainError("no quintile for " + k.doc_id + "#" + std::to_string(k.word_index));
    out.push_back(std::move(r));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Serialization

inline nlohmann::ordered_json fit_to_json(const FitResult& f, const DesignMatrices& d) {
  nlohmann::ordered_json j;
  nlohmann::ordered_json beta = nlohmann::ordered_json::array();
  for (Eigen::Index i = 0; i < f.beta.size(); ++i) {
    nlohmann::ordered_json b;
    b["name"] = f.fixed_names[static_cast<std::size_t>(i)];
    b["estimate"] = f.beta(i);
    if (f.beta_se.size() == f.beta.size()) b["std_error"] = f.beta_se(i);
    beta.push_back(b);
  }
  j["beta"] = beta;
  j["theta"] = f.theta;
  j["sigma2"] = f.sigma2;
  j["reml_deviance"] = f.reml_deviance;
  nlohmann::ordered_json terms = nlohmann::ordered_json::array();
  for (std::size_t t = 0; t < d.terms.size(); ++t) {
    nlohmann::ordered_json tj;
    tj["grouping"] = d.terms[t].grouping;
    tj["levels"] = d.terms[t].levels();
    tj["coefficients"] = d.terms[t].coef_names;
    tj["covariance_structure"] = std::string(to_string(d.terms[t].covariance));
    const Eigen::MatrixXd cov = f.term_covariance(d, t);
    std::vector<std::vector<double>> rows;
    for (Eigen::Index r = 0; r < cov.rows(); ++r) {
      rows.emplace_back();
      for (Eigen::Index c = 0; c < cov.cols(); ++c) rows.back().push_back(cov(r, c));
    }
    tj["covariance"] = rows;
    terms.push_back(tj);
  }
  j["random_effects"] = terms;
  nlohmann::ordered_json conv;
  conv["converged"] = f.converged;
  conv["boundary_fit"] = f.boundary_fit;
  conv["exact_fit"] = f.exact_fit;
  conv["evaluations"] = f.evaluations;
  conv["optimizer_runs"] = f.optimizer_runs;
  conv["initial_deviance"] = f.initial_deviance;
  j["convergence"] = conv;
  nlohmann::ordered_json sc = nlohmann::ordered_json::array();
  for (const auto& s : d.scaling) sc.push_back({{"name", s.name}, {"mean", s.mean}, {"sd", s.sd}});
  j["standardization"] = sc;
  j["n"] = d.n();
  return j;
}

inline constexpr const char* kResidualHeader =
    "subject_id\tdoc_id\tword_index\tobserved\tpredicted\tresidual\tsquared_error\tsurprisal\tquintile";

inline void write_residuals(const std::string& path, const std::vector<ResidualRecord>& recs) {
  std::string out = std::string(kResidualHeader) + '\n';
  for (const auto& r : recs)
    out += r.subject_id + '\t' + r.doc_id + '\t' + std::to_string(r.word_index) + '\t' + util::fmt(r.observed) + '\t' +
           util::fmt(r.predicted) + '\t' + util::fmt(r.residual) + '\t' + util::fmt(r.squared_error) + '\t' +
           util::fmt(r.surprisal) + '\t' + std::to_string(r.quintile) + '\n';
  util::write_file(path, out);
}

inline std::vector<ResidualRecord> read_residuals(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open " + path);
  std::string line;
  if (!std::getline(in, line) || util::strip_cr(line) != kResidualHeader)
    throw InputError(path + ": not a residual table");
  std::vector<ResidualRecord> out;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto f = util::split(util::strip_cr(line), '\t');
    if (f.size() != 9) throw InputError(path + ":" + std::to_string(lineno) + ": expected 9 fields");
    ResidualRecord r;
    r.subject_id = std::string(f[0]);
    r.doc_id = std::string(f[1]);
    auto wi = util::parse_int<int>(f[2]);
    auto q = util::parse_int<int>(f[8]);
    if (!wi || !q) throw InputError(path + ":" + std::to_string(lineno) + ": bad integer field");
    r.word_index = *wi;
    r.observed = util::parse_report_double(f[3]);
    r.predicted = util::parse_report_double(f[4]);
    r.residual = util::parse_report_double(f[5]);
    r.squared_error = util::parse_report_double(f[6]);
    r.surprisal = util::parse_report_double(f[7]);
    r.quintile = *q;
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace surpfit::mixedlm
