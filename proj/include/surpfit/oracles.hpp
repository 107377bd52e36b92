#pragma once

// Reference computations used by the test suites and `surpfit selftest`.
// Each one follows a different route from the production code it checks:
// explicit marginal covariance instead of penalized least squares, classical
// ANOVA mean squares, QR least squares, brute-force enumeration.

#include <cmath>
#include <map>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "surpfit/mixedlm/design.hpp"

namespace surpfit::oracle {

/// Dense relative covariance of b: block diagonal of T_t T_t' per level,
/// built directly from the theta layout.
inline Eigen::MatrixXd relative_covariance(const mixedlm::DesignMatrices& d, const std::vector<double>& theta) {
  const Eigen::Index q = d.q();
  Eigen::MatrixXd S = Eigen::MatrixXd::Zero(q, q);
  std::size_t base = 0;
  for (const auto& t : d.terms) {
    const int k = t.k();
    Eigen::MatrixXd T = Eigen::MatrixXd::Zero(k, k);
    const auto layout = t.theta_layout();
    for (std::size_t e = 0; e < layout.size(); ++e) T(layout[e].first, layout[e].second) = theta[base + e];
    const Eigen::MatrixXd block = T * T.transpose();
    for (int l = 0; l < t.levels(); ++l) S.block(t.z_offset + l * k, t.z_offset + l * k, k, k) = block;
    base += layout.size();
  }
  return S;
}

/// REML deviance from V = Z S Z' + I with sigma^2 profiled out:
///   log|V| + log|X' V^-1 X| + (n-p)(1 + log(2 pi r' V^-1 r / (n-p))).
inline double dense_reml_deviance(const mixedlm::DesignMatrices& d, const std::vector<double>& theta) {
  const Eigen::Index n = d.n(), p = d.p();
  const Eigen::MatrixXd Z = Eigen::MatrixXd(d.Z);
  const Eigen::MatrixXd V = Z * relative_covariance(d, theta) * Z.transpose() + Eigen::MatrixXd::Identity(n, n);
  const Eigen::LDLT<Eigen::MatrixXd> Vf(V);
  const double logdetV = Vf.vectorD().array().log().sum();
  const Eigen::MatrixXd ViX = Vf.solve(d.X);
  const Eigen::MatrixXd XtViX = d.X.transpose() * ViX;
  const Eigen::LDLT<Eigen::MatrixXd> Xf(XtViX);
  const double logdetX = Xf.vectorD().array().log().sum();
  const Eigen::VectorXd beta = Xf.solve(ViX.transpose() * d.y);
  const Eigen::VectorXd r = d.y - d.X * beta;
  const double rVr = r.dot(Vf.solve(r));
  const double dof = static_cast<double>(n - p);
  return logdetV + logdetX + dof * (1.0 + std::log(2.0 * std::numbers::pi * rVr / dof));
}

struct OneWayAnova {
  int groups = 0;
  int replicates = 0;
  double grand_mean = 0;
  double ssb = 0, ssw = 0;
  double msb = 0, msw = 0;

  /// REML estimates of the between-group and residual variances.
  double sigma2_between() const { return (msb - msw) / replicates; }
  double sigma2_within() const { return msw; }

  /// Closed-form REML deviance at relative standard deviation `lambda`.
  double deviance(double lambda) const {
    const double a = groups, m = replicates, n = a * m;
    const double w = 1.0 + m * lambda * lambda;
    const double rVr = ssw + ssb / w;
    return a * std::log(w) + std::log(n / w) + (n - 1) * (1.0 + std::log(2.0 * std::numbers::pi * rVr / (n - 1)));
  }
};

/// Balanced one-way layout, y given group by group.
inline OneWayAnova one_way_anova(const std::vector<std::vector<double>>& groups) {
  OneWayAnova a;
  a.groups = static_cast<int>(groups.size());
  a.replicates = static_cast<int>(groups.front().size());
  double total = 0;
  for (const auto& g : groups) {
    if (static_cast<int>(g.size()) != a.replicates) throw DomainError("unbalanced layout");
    for (double v : g) total += v;
  }
  a.grand_mean = total / (a.groups * a.replicates);
  for (const auto& g : groups) {
    double gm = 0;
    for (double v : g) gm += v;
    gm /= a.replicates;
    a.ssb += a.replicates * (gm - a.grand_mean) * (gm - a.grand_mean);
    for (double v : g) a.ssw += (v - gm) * (v - gm);
  }
  a.msb = a.ssb / (a.groups - 1);
  a.msw = a.ssw / (a.groups * (a.replicates - 1));
  return a;
}

inline Eigen::VectorXd ols_qr(const Eigen::MatrixXd& X, const Eigen::VectorXd& y) {
  return X.colPivHouseholderQr().solve(y);
}

/// Random small mixed-model instance: n in [30, 200], up to 3 predictors and
/// up to 3 random terms (k <= 3, full or diagonal), plus a random feasible theta.
struct RandomInstance {
  mixedlm::DesignMatrices design;
  std::vector<double> theta;
};

inline RandomInstance random_instance(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto uniform_int = [&](int lo, int hi) { return lo + static_cast<int>(util::bounded(rng, static_cast<std::uint64_t>(hi - lo + 1))); };
  std::normal_distribution<double> nd(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);

  const int n = uniform_int(30, 200);
  const int npred = uniform_int(0, 3);
  Eigen::MatrixXd P(n, npred);
  std::vector<std::string> names;
  for (int j = 0; j < npred; ++j) {
    names.push_back("x" + std::to_string(j + 1));
    for (int i = 0; i < n; ++i) P(i, j) = nd(rng) * (1.0 + j);
  }
  std::vector<mixedlm::GroupingInput> groups;
  const int nterms = uniform_int(1, 3);
  for (int t = 0; t < nterms; ++t) {
    mixedlm::GroupingInput g;
    g.name = "g" + std::to_string(t + 1);
    const int levels = uniform_int(3, 12);
    for (int i = 0; i < n; ++i) g.level_per_obs.push_back("L" + std::to_string(uniform_int(0, levels - 1)));
    const int slopes = std::min(npred, uniform_int(0, 2));
    for (int s = 0; s < slopes; ++s) g.slopes.push_back(names[static_cast<std::size_t>(s)]);
    g.covariance = unif(rng) < 0.5 ? mixedlm::Covariance::full : mixedlm::Covariance::diagonal;
    groups.push_back(std::move(g));
  }
  Eigen::VectorXd y(n);
  for (int i = 0; i < n; ++i) y(i) = 5.0 + nd(rng) + (npred > 0 ? 0.3 * P(i, 0) : 0.0);
  RandomInstance inst;
  inst.design = mixedlm::make_design(y, P, names, groups, true);
  for (const auto& term : inst.design.terms)
    for (const auto& [r, c] : term.theta_layout())
      inst.theta.push_back(r == c ? (unif(rng) < 0.1 ? 0.0 : 2.0 * unif(rng)) : 0.5 * nd(rng));
  return inst;
}

/// REML criterion of ordinary least squares:
///   log|X'X| + (n-p)(1 + log(2 pi RSS / (n-p))).
inline double ols_reml_deviance(const Eigen::MatrixXd& X, const Eigen::VectorXd& y) {
  const double n = static_cast<double>(X.rows()), p = static_cast<double>(X.cols());
  const Eigen::VectorXd beta = ols_qr(X, y);
  const double rss = (y - X * beta).squaredNorm();
  const Eigen::LDLT<Eigen::MatrixXd> f(X.transpose() * X);
  return f.vectorD().array().log().sum() + (n - p) * (1.0 + std::log(2.0 * std::numbers::pi * rss / (n - p)));
}

struct SimpleRegression {
  double slope = 0, intercept = 0, t = 0;
  int df = 0;
};

/// Textbook simple regression: slope = Sxy / Sxx, t = slope / sqrt(s^2 / Sxx).
inline SimpleRegression simple_regression(const std::vector<double>& x, const std::vector<double>& y) {
  const double n = static_cast<double>(x.size());
  double sx = 0, sy = 0, sxx = 0, sxy = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sx += x[i];
    sy += y[i];
    sxx += x[i] * x[i];
    sxy += x[i] * y[i];
    syy += y[i] * y[i];
  }
  const double Sxx = sxx - sx * sx / n, Sxy = sxy - sx * sy / n, Syy = syy - sy * sy / n;
  SimpleRegression r;
  r.slope = Sxy / Sxx;
  r.intercept = (sy - r.slope * sx) / n;
  r.df = static_cast<int>(x.size()) - 2;
  const double s2 = (Syy - r.slope * Sxy) / r.df;
  r.t = r.slope / std::sqrt(s2 / Sxx);
  return r;
}

/// Brute-force target coverage of a set of requests over tokens 1..count.
template <typename Requests>
std::vector<int> target_counts(const Requests& reqs, long count) {
  std::vector<int> hits(static_cast<std::size_t>(count + 1), 0);
  for (const auto& r : reqs)
    for (long t = 1; t <= count; ++t)
      if (t >= r.target_start && t <= r.target_end) ++hits[static_cast<std::size_t>(t)];
  return hits;
}

}  // namespace surpfit::oracle
