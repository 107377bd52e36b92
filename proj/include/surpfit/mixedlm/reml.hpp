#pragma once

// Profiled REML criterion by penalized least squares.
//
// Model: y = X beta + Z b + e,  b = Lambda(theta) u,  u ~ N(0, s2 I),
// e ~ N(0, s2 I). For a given theta the sparse Cholesky factor
//   P (Lambda' Z' Z Lambda + I) P' = L L'
// yields the joint solution of the penalized least-squares problem
//   min_{beta,u} |y - X beta - Z Lambda u|^2 + |u|^2
// and the REML deviance
//   log|L|^2 + log|R_X|^2 + (n - p) (1 + log(2 pi pwrss / (n - p))),
// with beta and s2 = pwrss / (n - p) profiled out.

#include <cmath>
#include <limits>
#include <map>
#include <numbers>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/SparseCholesky>
#include <Eigen/SparseCore>

#include "surpfit/mixedlm/design.hpp"

namespace surpfit::mixedlm {

class RankDeficient : public DomainError {
 public:
  RankDeficient() : DomainError("fixed effects not estimable (rank-deficient X)") {}
};

struct ProfiledSolution {
  double deviance = 0;
  double ldL2 = 0;   // log|L|^2
  double ldRX2 = 0;  // log|R_X|^2
  double pwrss = 0;  // penalized weighted residual sum of squares
  double sigma2 = 0;
  Eigen::VectorXd beta;
  Eigen::VectorXd beta_se;
  Eigen::VectorXd u;
  Eigen::VectorXd b;  // Lambda u, conditional modes
  Eigen::VectorXd fitted;
};

class RemlProblem {
 public:
  using SpMat = Eigen::SparseMatrix<double>;

  explicit RemlProblem(const DesignMatrices& d) : d_(d) {
    const Eigen::Index n = d.n(), p = d.p();
    if (p == 0) throw DomainError("design has no fixed effects");
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(d.X);
    if (qr.rank() < p) throw RankDeficient();
    if (n <= p) throw DomainError("need more observations than fixed effects");

    Zt_ = d.Z.transpose();
    ZtZ_ = (Zt_ * d.Z).pruned();
    ZtX_ = Zt_ * d.X;
    Zty_ = Zt_ * d.y;
    XtX_ = d.X.transpose() * d.X;
    Xty_ = d.X.transpose() * d.y;

    // Lambda with its full structural pattern; values are refreshed per theta.
    std::vector<Eigen::Triplet<double>> trips;
    int theta_base = 0;
    for (const auto& t : d.terms) {
      const auto layout = t.theta_layout();
      for (int l = 0; l < t.levels(); ++l) {
        const Eigen::Index base = t.z_offset + static_cast<Eigen::Index>(l) * t.k();
        for (std::size_t e = 0; e < layout.size(); ++e) trips.emplace_back(base + layout[e].first, base + layout[e].second, 1.0);
      }
      for (const auto& rc : layout) lower_.push_back(rc.first == rc.second ? 0.0 : -std::numeric_limits<double>::infinity());
      theta_base += t.n_theta();
    }
    n_theta_ = theta_base;
    Lambda_.resize(d.q(), d.q());
    Lambda_.setFromTriplets(trips.begin(), trips.end());
    Lambda_.makeCompressed();

    // Map each stored entry of Lambda to its theta index.
    std::map<std::pair<Eigen::Index, Eigen::Index>, int> where;
    theta_base = 0;
    for (const auto& t : d.terms) {
      const auto layout = t.theta_layout();
      for (int l = 0; l < t.levels(); ++l) {
        const Eigen::Index base = t.z_offset + static_cast<Eigen::Index>(l) * t.k();
        for (std::size_t e = 0; e < layout.size(); ++e)
          where[{base + layout[e].first, base + layout[e].second}] = theta_base + static_cast<int>(e);
      }
      theta_base += t.n_theta();
    }
    lambda_map_.resize(static_cast<std::size_t>(Lambda_.nonZeros()));
    for (Eigen::Index c = 0; c < Lambda_.outerSize(); ++c)
      for (SpMat::InnerIterator it(Lambda_, c); it; ++it)
        lambda_map_[static_cast<std::size_t>(&it.valueRef() - Lambda_.valuePtr())] = where.at({it.row(), it.col()});
  }

  int n_theta() const { return n_theta_; }
  const std::vector<double>& lower_bounds() const { return lower_; }

  /// Identity relative covariance factor: diagonal 1, off-diagonal 0.
  std::vector<double> initial_theta() const {
    std::vector<double> th(lower_.size());
    for (std::size_t i = 0; i < th.size(); ++i) th[i] = lower_[i] == 0.0 ? 1.0 : 0.0;
    return th;
  }

  double deviance(const std::vector<double>& theta) { return solve(theta, false).deviance; }

  ProfiledSolution solve(const std::vector<double>& theta, bool full = true) {
    if (theta.size() != lower_.size()) throw DomainError("theta has wrong length");
    for (std::size_t i = 0; i < theta.size(); ++i)
      if (theta[i] < lower_[i] || !std::isfinite(theta[i])) throw DomainError("theta violates its bounds");
    const Eigen::Index n = d_.n(), p = d_.p(), q = d_.q();

    double* vals = Lambda_.valuePtr();
    for (std::size_t i = 0; i < lambda_map_.size(); ++i) vals[i] = theta[static_cast<std::size_t>(lambda_map_[i])];

    ProfiledSolution s;
    Eigen::MatrixXd RZX;
    Eigen::VectorXd cu;
    if (q > 0) {
      SpMat A = Lambda_.transpose() * ZtZ_ * Lambda_;
      SpMat I(q, q);
      I.setIdentity();
      A += I;
      if (!analyzed_ || A.nonZeros() != pattern_nnz_) {
        chol_.analyzePattern(A);
        analyzed_ = true;
        pattern_nnz_ = A.nonZeros();
      }
      chol_.factorize(A);
      if (chol_.info() != Eigen::Success) throw DomainError("sparse Cholesky factorization failed");
      const auto& L = chol_.matrixL();
      s.ldL2 = 2.0 * L.nestedExpression().diagonal().array().log().sum();
      RZX = chol_.permutationP() * (Lambda_.transpose() * ZtX_);
      L.solveInPlace(RZX);
      cu = chol_.permutationP() * (Lambda_.transpose() * Zty_);
      L.solveInPlace(cu);
    } else {
      RZX.resize(0, p);
      cu.resize(0);
    }

    const Eigen::MatrixXd RXtRX = XtX_ - RZX.transpose() * RZX;
    Eigen::LLT<Eigen::MatrixXd> llt(RXtRX);
    if (llt.info() != Eigen::Success) throw RankDeficient();
    s.ldRX2 = 2.0 * llt.matrixLLT().diagonal().array().log().sum();
    s.beta = llt.solve(Xty_ - RZX.transpose() * cu);

    if (q > 0) {
      Eigen::VectorXd v = cu - RZX * s.beta;
      chol_.matrixU().solveInPlace(v);
      s.u = chol_.permutationPinv() * v;
      s.b = Lambda_ * s.u;
    } else {
      s.u.resize(0);
      s.b.resize(0);
    }
    s.fitted = d_.X * s.beta;
    if (q > 0) s.fitted += d_.Z * s.b;
    s.pwrss = (d_.y - s.fitted).squaredNorm() + s.u.squaredNorm();
    const double dof = static_cast<double>(n - p);
    s.sigma2 = s.pwrss / dof;
    s.deviance = s.ldL2 + s.ldRX2 + dof * (1.0 + std::log(2.0 * std::numbers::pi * s.pwrss / dof));
    if (full) {
      const Eigen::MatrixXd inv = llt.solve(Eigen::MatrixXd::Identity(p, p));
      s.beta_se = (s.sigma2 * inv.diagonal().array()).sqrt();
    }
    return s;
  }

 private:
  const DesignMatrices& d_;
  SpMat Zt_, ZtZ_, Lambda_;
  Eigen::MatrixXd ZtX_, XtX_;
  Eigen::VectorXd Zty_, Xty_;
  std::vector<double> lower_;
  std::vector<int> lambda_map_;
  int n_theta_ = 0;
  Eigen::SimplicialLLT<SpMat, Eigen::Lower, Eigen::AMDOrdering<int>> chol_;
  bool analyzed_ = false;
  Eigen::Index pattern_nnz_ = 0;
};

/// Profiled REML deviance at theta.
inline double reml_deviance(const std::vector<double>& theta, const DesignMatrices& design) {
  RemlProblem prob(design);
  return prob.deviance(theta);
}

}  // namespace surpfit::mixedlm
