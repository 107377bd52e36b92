#pragma once

// Bound-constrained Nelder-Mead simplex search with restarts.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <random>
#include <vector>

#include "surpfit/common.hpp"

namespace surpfit::mixedlm {

struct NelderMeadOptions {
  double ftol_rel = 1e-8;  // relative spread of function values across the simplex
  double ftol_abs = 1e-14;  // floor for the spread test when the minimum is near 0
  double xtol_abs = 1e-8;  // simplex diameter (max-norm)
  int max_evaluations = 20000;
  int restarts = 3;
  double initial_step = 0.5;
  double restart_step = 0.1;
  std::uint64_t seed = 0;
};

struct NelderMeadResult {
  std::vector<double> x;
  double f = std::numeric_limits<double>::infinity();
  double f_initial = std::numeric_limits<double>::infinity();
  int evaluations = 0;
  int runs = 0;
  bool converged = false;
};

/// Minimizes f subject to x >= lower (use -inf for unbounded coordinates).
/// Trial points are projected onto the feasible box before evaluation.
/// After the first run converges, `restarts` further runs start from the
/// incumbent with randomly signed steps; the best point over all runs wins.
inline NelderMeadResult nelder_mead(const std::function<double(const std::vector<double>&)>& f,
                                    std::vector<double> x0, const std::vector<double>& lower,
                                    const NelderMeadOptions& opt) {
  const std::size_t n = x0.size();
  if (opt.max_evaluations < 1) throw DomainError("optimizer budget must allow at least one evaluation");
  NelderMeadResult res;
  auto project = [&](std::vector<double>& x) {
    for (std::size_t i = 0; i < n; ++i) x[i] = std::max(x[i], lower[i]);
  };
  struct BudgetExhausted {};
  auto eval = [&](const std::vector<double>& x) {
    if (res.evaluations >= opt.max_evaluations) throw BudgetExhausted{};
    ++res.evaluations;
    double v = f(x);
    if (!std::isfinite(v)) v = std::numeric_limits<double>::infinity();
    if (v < res.f) {
      res.f = v;
      res.x = x;
    }
    return v;
  };

  project(x0);
  res.x = x0;
  res.f = res.f_initial = eval(x0);
  if (n == 0) {
    res.converged = true;
    return res;
  }

  // Adaptive coefficients for higher dimensions; standard ones otherwise.
  const double dn = static_cast<double>(n);
  const double alpha = 1.0;
  const double gamma = n > 2 ? 1.0 + 2.0 / dn : 2.0;
  const double rho = n > 2 ? 0.75 - 1.0 / (2.0 * dn) : 0.5;
  const double sigma = n > 2 ? 1.0 - 1.0 / dn : 0.5;

  std::mt19937_64 rng(opt.seed);

  auto run = [&](const std::vector<double>& start, double fstart, double step, bool random_signs) -> bool {
    std::vector<std::vector<double>> pts(n + 1, start);
    std::vector<double> fv(n + 1, fstart);
    for (std::size_t i = 0; i < n; ++i) {
      double s = step * (std::abs(start[i]) > 1.0 ? std::abs(start[i]) : 1.0);
      if (random_signs && (rng() & 1u)) s = -s;
      if (start[i] + s < lower[i]) s = -s;
      pts[i + 1][i] += s;
      project(pts[i + 1]);
      fv[i + 1] = eval(pts[i + 1]);
    }
    std::vector<std::size_t> order(n + 1);
    std::vector<double> centroid(n), xr(n), xe(n), xc(n);
    while (true) {
      std::iota(order.begin(), order.end(), 0);
      std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return fv[a] < fv[b]; });
      const std::size_t best = order.front(), worst = order.back(), second = order[n - 1];
      double diam = 0;
      for (std::size_t v = 0; v <= n; ++v)
        for (std::size_t i = 0; i < n; ++i) diam = std::max(diam, std::abs(pts[v][i] - pts[best][i]));
      const double spread = fv[worst] - fv[best];
      if (spread <= std::max(opt.ftol_rel * std::abs(fv[best]), opt.ftol_abs) && diam <= opt.xtol_abs) return true;

      std::fill(centroid.begin(), centroid.end(), 0.0);
      for (std::size_t v = 0; v <= n; ++v)
        if (v != worst)
          for (std::size_t i = 0; i < n; ++i) centroid[i] += pts[v][i] / dn;

      for (std::size_t i = 0; i < n; ++i) xr[i] = centroid[i] + alpha * (centroid[i] - pts[worst][i]);
      project(xr);
      const double fr = eval(xr);
      if (fr < fv[best]) {
        for (std::size_t i = 0; i < n; ++i) xe[i] = centroid[i] + gamma * (xr[i] - centroid[i]);
        project(xe);
        const double fe = eval(xe);
        if (fe < fr) {
          pts[worst] = xe;
          fv[worst] = fe;
        } else {
          pts[worst] = xr;
          fv[worst] = fr;
        }
        continue;
      }
      if (fr < fv[second]) {
        pts[worst] = xr;
        fv[worst] = fr;
        continue;
      }
      const bool outside = fr < fv[worst];
      const auto& ref = outside ? xr : pts[worst];
      for (std::size_t i = 0; i < n; ++i) xc[i] = centroid[i] + rho * (ref[i] - centroid[i]);
      project(xc);
      const double fc = eval(xc);
      if (fc < (outside ? fr : fv[worst])) {
        pts[worst] = xc;
        fv[worst] = fc;
        continue;
      }
      for (std::size_t v = 0; v <= n; ++v) {
        if (v == best) continue;
        for (std::size_t i = 0; i < n; ++i) pts[v][i] = pts[best][i] + sigma * (pts[v][i] - pts[best][i]);
        project(pts[v]);
        fv[v] = eval(pts[v]);
      }
    }
  };

  auto guarded = [&](const std::vector<double>& start, double fstart, double step, bool random_signs) {
    try {
      return run(start, fstart, step, random_signs);
    } catch (const BudgetExhausted&) {
      return false;
    }
  };

  bool best_converged = guarded(res.x, res.f, opt.initial_step, false);
  res.runs = 1;
  for (int r = 0; r < opt.restarts && best_converged && res.evaluations < opt.max_evaluations; ++r) {
    const double before = res.f;
    const std::vector<double> start = res.x;
    const bool ok = guarded(start, before, opt.restart_step, true);
    ++res.runs;
    // an improving restart that ran out of budget leaves an unconverged incumbent
    if (res.f < before - opt.ftol_rel * std::abs(before)) best_converged = ok;
  }
  res.converged = best_converged;
  return res;
}

}  // namespace surpfit::mixedlm
