#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "helpers.hpp"
#include "surpfit/mixedlm/fit.hpp"
#include "surpfit/oracles.hpp"

using namespace surpfit;
using namespace surpfit::mixedlm;
using testing_util::TempDir;

namespace {

/// Balanced one-way layout with `a` groups of `m` replicates.
std::vector<std::vector<double>> one_way_data(int a, int m, double sd_b, double sd_e, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0, 1);
  std::vector<std::vector<double>> g(static_cast<std::size_t>(a));
  for (auto& grp : g) {
    const double b = sd_b * nd(rng);
    for (int r = 0; r < m; ++r) grp.push_back(6.0 + b + sd_e * nd(rng));
  }
  return g;
}

DesignMatrices one_way_design(const std::vector<std::vector<double>>& g) {
  std::vector<double> y;
  GroupingInput grp{"group", {}, {}, Covariance::full};
  for (std::size_t i = 0; i < g.size(); ++i)
    for (double v : g[i]) {
      y.push_back(v);
      grp.level_per_obs.push_back("g" + std::to_string(100 + i));
    }
  return make_design(Eigen::Map<Eigen::VectorXd>(y.data(), static_cast<Eigen::Index>(y.size())), Eigen::MatrixXd(y.size(), 0),
                     {}, {grp});
}

}  // namespace

TEST(Standardize, SpecExamples) {
  Eigen::MatrixXd c(3, 1);
  c << 1, 2, 3;
  const auto [s, rec] = standardize(c, {"x"});
  EXPECT_NEAR(s(0, 0), -1, 1e-15);
  EXPECT_NEAR(s(1, 0), 0, 1e-15);
  EXPECT_NEAR(s(2, 0), 1, 1e-15);
  EXPECT_DOUBLE_EQ(rec[0].mean, 2);
  EXPECT_DOUBLE_EQ(rec[0].sd, 1);
  const auto again = standardize(s, {"x"}).first;
  EXPECT_LE((again - s).cwiseAbs().maxCoeff(), 1e-12);
  Eigen::MatrixXd k = Eigen::MatrixXd::Constant(4, 2, 1.0);
  k.col(0) << 1, 2, 3, 4;
  try {
    standardize(k, {"a", "konst"});
    FAIL();
  } catch (const DomainError& e) {
    EXPECT_NE(std::string(e.what()).find("konst"), std::string::npos);
  }
}

TEST(Standardize, FiveColumnOracle) {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> nd(3, 7);
  Eigen::MatrixXd c(57, 5);
  for (Eigen::Index i = 0; i < c.size(); ++i) c.data()[i] = nd(rng);
  const auto s = standardize(c, {"a", "b", "c", "d", "e"}).first;
  for (int j = 0; j < 5; ++j) {
    double mean = 0, ss = 0;
    for (int i = 0; i < 57; ++i) mean += s(i, j);
    mean /= 57;
    for (int i = 0; i < 57; ++i) ss += (s(i, j) - mean) * (s(i, j) - mean);
    EXPECT_NEAR(mean, 0, 1e-10);
    EXPECT_NEAR(std::sqrt(ss / 56), 1, 1e-10);
  }
}

namespace {

struct ToyData {
  Corpus corpus;
  FilteredSet fs;
  std::map<WordKey, WordSurprisal> surp;
  std::map<WordKey, double> uni;
};

/// `subjects` x one document of `sentences` sentences with 4 words each.
ToyData toy(Paradigm paradigm, int subjects, int sentences) {
  ToyData t;
  t.corpus.paradigm = paradigm;
  std::string text;
  std::vector<long> sent;
  for (int s = 0; s < sentences; ++s)
    for (int w = 0; w < 4; ++w) {
      if (!text.empty()) text += ' ';
      text += std::string(static_cast<std::size_t>(1 + (s + w) % 5), static_cast<char>('a' + w));
      sent.push_back(s + 1);
    }
  t.corpus.documents.push_back(testing_util::make_document("d", text, sent));
  t.fs.paradigm = paradigm;
  std::mt19937_64 rng(3);
  std::normal_distribution<double> nd(0, 1);
  for (const auto& w : t.corpus.documents[0].words) {
    t.surp[{"d", w.word_index}] = {"d", w.word_index, 3 + nd(rng) * 2, 1, true};
    t.uni[{"d", w.word_index}] = 8 + nd(rng) * 3;
  }
  for (int s = 0; s < subjects; ++s)
    for (const auto& w : t.corpus.documents[0].words) {
      WordObservation o;
      o.subject_id = std::to_string(s + 1);
      o.doc_id = "d";
      o.word_index = w.word_index;
      o.sentence_id = w.sentence_id;
      o.rt = 300 + 40 * nd(rng);
      if (paradigm == Paradigm::eye_tracking) {
        o.fixated = true;
        o.saccade_length = 1 + static_cast<int>(rng() % 4);
        o.prev_fixated = (rng() & 1) != 0;
      }
      t.fs.observations.push_back(o);
      t.fs.log_rt.push_back(std::log(*o.rt));
    }
  return t;
}

}  // namespace

TEST(BuildDesign, SelfPacedDimensions) {
  auto t = toy(Paradigm::self_paced, 2, 2);
  const auto b = build_design(t.corpus, t.fs, t.surp, t.uni, RegressionSpec::standard(Paradigm::self_paced));
  EXPECT_EQ(b.design.q(), 2 * (4 + 1) + 4);
  EXPECT_EQ(b.design.p(), 5);
  EXPECT_EQ(b.design.n_theta(), 15 + 1);
}

TEST(BuildDesign, EyeTrackingDimensions) {
  auto t = toy(Paradigm::eye_tracking, 3, 10);
  const auto b = build_design(t.corpus, t.fs, t.surp, t.uni, RegressionSpec::standard(Paradigm::eye_tracking));
  EXPECT_EQ(b.design.q(), 3 * 7 + 10);
  EXPECT_EQ(b.design.fixed_names.back(), "prev_fixated");
}

TEST(BuildDesign, XtXMatchesOracleAndIncompleteWordsDropped) {
  auto t = toy(Paradigm::self_paced, 3, 3);
  t.surp[{"d", 1}].complete = false;
  const auto b = build_design(t.corpus, t.fs, t.surp, t.uni, RegressionSpec::standard(Paradigm::self_paced));
  EXPECT_EQ(b.dropped_incomplete.size(), 3u);
  const auto& d = b.design;
  ASSERT_EQ(d.n(), 33);
  // recompute raw predictors independently and standardize by hand
  Eigen::MatrixXd X(d.n(), 5);
  const auto& doc = t.corpus.documents[0];
  Eigen::Index r = 0;
  for (const auto& o : t.fs.observations) {
    if (o.word_index == 1) continue;
    const auto& w = doc.words[static_cast<std::size_t>(o.word_index - 1)];
    X(r, 0) = 1;
    X(r, 1) = t.surp.at({"d", o.word_index}).surprisal;
    X(r, 2) = static_cast<double>(w.char_end - w.char_start);
    X(r, 3) = w.position_in_sentence;
    X(r, 4) = t.uni.at({"d", o.word_index});
    ++r;
  }
  for (int j = 1; j < 5; ++j) {
    const double m = X.col(j).mean();
    const double sd = std::sqrt((X.col(j).array() - m).square().sum() / (d.n() - 1.0));
    X.col(j) = (X.col(j).array() - m) / sd;
  }
  const Eigen::MatrixXd diff = X.transpose() * X - d.X.transpose() * d.X;
  EXPECT_LE(diff.cwiseAbs().maxCoeff(), 1e-9);
  for (Eigen::Index i = 0; i < d.n(); ++i) EXPECT_DOUBLE_EQ(d.y(i), std::log(*t.fs.observations[static_cast<std::size_t>(i + i / 11 + 1)].rt));
}

TEST(BuildDesign, Errors) {
  auto t = toy(Paradigm::self_paced, 2, 2);
  auto spec = RegressionSpec::standard(Paradigm::self_paced);
  auto missing = t.surp;
  missing.erase({"d", 2});
  EXPECT_THROW(build_design(t.corpus, t.fs, missing, t.uni, spec), InputError);
  auto bad = spec;
  bad.random_terms.push_back({"item", {}, Covariance::full});
  EXPECT_THROW(build_design(t.corpus, t.fs, t.surp, t.uni, bad), InputError);
  bad = spec;
  bad.fixed_effects.push_back("surprisal");
  EXPECT_THROW(bad.validate(), InputError);
}

TEST(Reml, ThetaZeroEqualsOlsCriterion) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto inst = oracle::random_instance(seed);
    std::vector<double> zero(inst.theta.size(), 0.0);
    const double d = reml_deviance(zero, inst.design);
    EXPECT_NEAR(d, oracle::ols_reml_deviance(inst.design.X, inst.design.y), 1e-8 * std::abs(d));
  }
}

TEST(Reml, SparseMatchesDenseOracle) {
  for (std::uint64_t seed = 100; seed < 130; ++seed) {
    auto inst = oracle::random_instance(seed);
    const double sparse = reml_deviance(inst.theta, inst.design);
    const double dense = oracle::dense_reml_deviance(inst.design, inst.theta);
    EXPECT_NEAR(sparse, dense, 1e-6 * std::abs(dense)) << "seed " << seed;
  }
}

TEST(Reml, OneWayMatchesAnovaClosedForm) {
  const auto g = one_way_data(20, 10, 0.7, 1.0, 5);
  const auto a = oracle::one_way_anova(g);
  const auto d = one_way_design(g);
  for (double lambda : {0.0, 0.3, 1.0, 2.5}) {
    const double v = reml_deviance({lambda}, d);
    EXPECT_NEAR(v, a.deviance(lambda), 1e-8 * std::abs(v));
  }
}

TEST(Reml, RankDeficientX) {
  Eigen::MatrixXd P(10, 2);
  for (int i = 0; i < 10; ++i) {
    P(i, 0) = i;
    P(i, 1) = 2 * i;
  }
  Eigen::VectorXd y = Eigen::VectorXd::LinSpaced(10, 1, 3);
  const auto d = make_design(y, P, {"a", "b"}, {}, false);
  try {
    reml_deviance({}, d);
    FAIL();
  } catch (const RankDeficient& e) {
    EXPECT_NE(std::string(e.what()).find("fixed effects not estimable"), std::string::npos);
  }
}

TEST(Fit, OneWayVarianceComponentsMatchAnova) {
  const auto g = one_way_data(20, 10, 0.8, 1.0, 11);
  const auto a = oracle::one_way_anova(g);
  const auto d = one_way_design(g);
  const auto f = fit(d);
  EXPECT_TRUE(f.converged);
  EXPECT_NEAR(f.sigma2, a.sigma2_within(), 1e-6 * a.sigma2_within());
  const double sb = f.term_covariance(d, 0)(0, 0);
  EXPECT_NEAR(sb, a.sigma2_between(), 1e-6 * a.sigma2_between());
  EXPECT_LE(f.reml_deviance, f.initial_deviance);
  EXPECT_NEAR(f.beta(0), a.grand_mean, 1e-9);
}

TEST(Fit, NegativeAnovaEstimateGivesBoundaryFit) {
  // groups with identical means: MSB < MSW, REML optimum at theta = 0
  std::vector<std::vector<double>> g;
  for (int i = 0; i < 8; ++i) g.push_back({1.0, 2.0, 3.0, 4.0 + (i % 2) * 1e-3});
  const auto d = one_way_design(g);
  const auto f = fit(d);
  EXPECT_TRUE(f.boundary_fit);
  EXPECT_LT(f.theta[0], 1e-4);
}

TEST(Fit, NoiselessDataRecoversBeta) {
  std::mt19937_64 rng(2);
  std::normal_distribution<double> nd(0, 1);
  const int n = 60;
  Eigen::MatrixXd P(n, 2);
  Eigen::VectorXd y(n);
  GroupingInput grp{"g", {}, {}, Covariance::full};
  for (int i = 0; i < n; ++i) {
    P(i, 0) = nd(rng);
    P(i, 1) = nd(rng);
    y(i) = 1.5 - 2.0 * P(i, 0) + 0.25 * P(i, 1);
    grp.level_per_obs.push_back(std::to_string(i % 6));
  }
  const auto d = make_design(y, P, {"a", "b"}, {grp}, false);
  const auto f = fit(d);
  EXPECT_NEAR(f.beta(0), 1.5, 1e-8);
  EXPECT_NEAR(f.beta(1), -2.0, 1e-8);
  EXPECT_NEAR(f.beta(2), 0.25, 1e-8);
  EXPECT_LE(f.sigma2, 1e-12);
}

TEST(Fit, ThetaZeroReproducesOls) {
  for (std::uint64_t seed = 200; seed < 205; ++seed) {
    auto inst = oracle::random_instance(seed);
    const auto f = fit_at(inst.design, std::vector<double>(inst.theta.size(), 0.0));
    const Eigen::VectorXd ols = oracle::ols_qr(inst.design.X, inst.design.y);
    EXPECT_LE((f.beta - ols).cwiseAbs().maxCoeff(), 1e-8);
  }
}

TEST(Fit, RandomSlopeSimulationRecoversBeta) {
  // 50 subjects x 40 items, subject intercept + slope, item intercept
  std::mt19937_64 rng(77);
  std::normal_distribution<double> nd(0, 1);
  const Eigen::Vector3d truth(5.8, 0.12, -0.05);
  std::vector<double> a(50), s(50), it(40);
  for (int i = 0; i < 50; ++i) {
    a[static_cast<std::size_t>(i)] = 0.2 * nd(rng);
    s[static_cast<std::size_t>(i)] = 0.05 * nd(rng);
  }
  for (auto& v : it) v = 0.1 * nd(rng);
  const int n = 50 * 40;
  Eigen::MatrixXd P(n, 2);
  Eigen::VectorXd y(n);
  GroupingInput subj{"subject", {}, {"x1"}, Covariance::full}, item{"item", {}, {}, Covariance::full};
  for (int i = 0, r = 0; i < 50; ++i)
    for (int j = 0; j < 40; ++j, ++r) {
      P(r, 0) = nd(rng);
      P(r, 1) = nd(rng);
      y(r) = truth(0) + a[static_cast<std::size_t>(i)] + it[static_cast<std::size_t>(j)] +
             (truth(1) + s[static_cast<std::size_t>(i)]) * P(r, 0) + truth(2) * P(r, 1) + 0.3 * nd(rng);
      subj.level_per_obs.push_back("s" + std::to_string(i));
      item.level_per_obs.push_back("i" + std::to_string(j));
    }
  const auto d = make_design(y, P, {"x1", "x2"}, {subj, item}, false);
  const auto f = fit(d);
  ASSERT_TRUE(f.converged);
  for (int j = 0; j < 3; ++j) EXPECT_LE(std::abs(f.beta(j) - truth(j)), 3 * f.beta_se(j)) << j;
  // residuals sum to zero with an intercept
  EXPECT_LE(std::abs((d.y - f.fitted).sum()), 1e-6 * n);
}

TEST(Fit, PredictionsInvariantToPredictorRescaling) {
  auto t = toy(Paradigm::self_paced, 6, 5);
  const auto spec = RegressionSpec::standard(Paradigm::self_paced, Covariance::diagonal);
  const auto a = build_design(t.corpus, t.fs, t.surp, t.uni, spec).design;
  auto scaled = t.surp;
  for (auto& [k, v] : scaled) v.surprisal *= 7.5;
  const auto b = build_design(t.corpus, t.fs, scaled, t.uni, spec).design;
  const auto fa = fit(a), fb = fit(b);
  EXPECT_LE((fa.fitted - fb.fitted).cwiseAbs().maxCoeff(), 1e-8);
}

TEST(Fit, TooFewObservations) {
  auto t = toy(Paradigm::self_paced, 1, 2);
  const auto d = build_design(t.corpus, t.fs, t.surp, t.uni, RegressionSpec::standard(Paradigm::self_paced)).design;
  EXPECT_THROW(fit(d), DomainError);
}

TEST(Fit, BudgetExhaustionThrowsWithBestState) {
  const auto g = one_way_data(10, 5, 0.8, 1.0, 3);
  const auto d = one_way_design(g);
  FitOptions o;
  o.optimizer.max_evaluations = 5;
  try {
    fit(d, o);
    FAIL();
  } catch (const NonConvergence& e) {
    EXPECT_FALSE(e.best().converged);
    EXPECT_EQ(e.best().evaluations, 5);
    EXPECT_LE(e.best().reml_deviance, e.best().initial_deviance);
  }
}

TEST(NelderMead, BoundedQuadratic) {
  auto f = [](const std::vector<double>& x) { return (x[0] + 1) * (x[0] + 1) + (x[1] - 2) * (x[1] - 2) + 0.5 * x[0] * x[1]; };
  const auto r = nelder_mead(f, {1.0, 1.0}, {0.0, -std::numeric_limits<double>::infinity()}, {});
  EXPECT_TRUE(r.converged);
  EXPECT_NEAR(r.x[0], 0.0, 1e-7);
  EXPECT_NEAR(r.x[1], 2.0, 1e-7);
  const auto again = nelder_mead(f, {1.0, 1.0}, {0.0, -std::numeric_limits<double>::infinity()}, {});
  EXPECT_EQ(r.x, again.x);
  EXPECT_EQ(r.evaluations, again.evaluations);
}

TEST(NelderMead, Rosenbrock4d) {
  auto f = [](const std::vector<double>& x) {
    double s = 0;
    for (std::size_t i = 0; i + 1 < x.size(); ++i) s += 100 * std::pow(x[i + 1] - x[i] * x[i], 2) + std::pow(1 - x[i], 2);
    return s;
  };
  const double inf = std::numeric_limits<double>::infinity();
  const auto r = nelder_mead(f, {-1.2, 1.0, -0.5, 0.3}, {-inf, -inf, -inf, -inf}, {});
  EXPECT_TRUE(r.converged);
  for (double v : r.x) EXPECT_NEAR(v, 1.0, 1e-4);
}

TEST(Residuals, SignConventionAndSerialization) {
  TempDir dir("resid");
  const auto g = one_way_data(6, 5, 0.8, 1.0, 9);
  const auto d0 = one_way_design(g);
  auto d = d0;
  for (Eigen::Index i = 0; i < d.n(); ++i) {
    d.keys.push_back({"s" + std::to_string(i % 3), "doc", static_cast<int>(i + 1)});
    d.surprisal.push_back(0.1 * static_cast<double>(i));
  }
  std::vector<std::pair<WordKey, double>> items;
  for (Eigen::Index i = 0; i < d.n(); ++i) items.push_back({{"doc", static_cast<int>(i + 1)}, -static_cast<double>(i % 7)});
  const auto q = assign_quintiles(items);
  const auto f = fit(d);
  const auto recs = residuals(f, d, q);
  ASSERT_EQ(recs.size(), static_cast<std::size_t>(d.n()));
  double sum = 0;
  for (std::size_t i = 0; i < recs.size(); ++i) {
    EXPECT_DOUBLE_EQ(recs[i].residual, recs[i].observed - recs[i].predicted);
    EXPECT_DOUBLE_EQ(recs[i].squared_error, recs[i].residual * recs[i].residual);
    EXPECT_GE(recs[i].quintile, 1);
    sum += recs[i].residual;
  }
  EXPECT_LE(std::abs(sum), 1e-6 * static_cast<double>(recs.size()));
  write_residuals(dir.file("r.tsv"), recs);
  const auto back = read_residuals(dir.file("r.tsv"));
  ASSERT_EQ(back.size(), recs.size());
  for (std::size_t i = 0; i < recs.size(); ++i) {
    EXPECT_EQ(back[i].predicted, recs[i].predicted);
    EXPECT_EQ(back[i].subject_id, recs[i].subject_id);
  }
  const auto j = fit_to_json(f, d);
  EXPECT_EQ(j["beta"][0]["name"], "(Intercept)");
  EXPECT_TRUE(j["convergence"]["converged"].get<bool>());
  EXPECT_EQ(j["random_effects"][0]["grouping"], "group");
  EXPECT_EQ(j["theta"].size(), 1u);
}

TEST(Residuals, WorkedExample) {
  ResidualRecord r;
  r.observed = 5.0;
  r.predicted = 4.6;
  r.residual = r.observed - r.predicted;
  EXPECT_NEAR(r.residual, 0.4, 1e-12);
  EXPECT_NEAR(r.residual * r.residual, 0.16, 1e-12);
}
