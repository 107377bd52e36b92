// Acceptance gate: prints one PASS/FAIL line per primary criterion and exits
// nonzero if any fails.

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include <unistd.h>

#include <json.hpp>

#include "surpfit/checks.hpp"
#include "surpfit/config.hpp"
#include "surpfit/pipeline.hpp"
#include "surpfit/synthetic.hpp"

namespace fs = std::filesystem;
using namespace surpfit;
using checks::CheckResult;

namespace {

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

CheckResult with_limit(CheckResult r, double limit_s) {
  if (r.seconds >= limit_s) {
    r.passed = false;
    r.detail += "; exceeded " + util::fmt(limit_s) + " s";
  }
  return r;
}

std::map<std::string, std::string> snapshot(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) out[fs::relative(e.path(), root).string()] = util::read_file(e.path().string());
  return out;
}

struct PipelineRun {
  int code = -1;
  double seconds = 0;
  std::string log;
  fs::path output;
};

/// plan, stand-in scoring and analyze on the shipped fixture, writing under `output`.
PipelineRun run_fixture(const fs::path& fixture, const fs::path& output) {
  PipelineRun run;
  run.output = output;
  const auto t0 = std::chrono::steady_clock::now();
  setenv(kOutputDirEnv, output.c_str(), 1);
  const auto cfg = load_config((fixture / "surpfit.ini").string());
  unsetenv(kOutputDirEnv);
  std::ostringstream log;
  try {
    run.code = pipeline::cmd_plan(cfg, log);
    if (run.code == 0) {
      synthetic::score_directory(synthetic::load_truth(fixture.string()), cfg.manifest_dir, cfg.scores_dir);
      run.code = pipeline::cmd_analyze(cfg, log);
    }
  } catch (const std::exception& e) {
    log << "error: " << e.what() << "\n";
    run.code = pipeline::kInputError;
  }
  run.seconds = seconds_since(t0);
  run.log = log.str();
  return run;
}

CheckResult planted_effect(const PipelineRun& run) {
  CheckResult r{"planted_effect", false, "", run.seconds};
  if (run.code != 0) {
    r.detail = "pipeline exit " + std::to_string(run.code) + ": " + run.log;
    return r;
  }
  const auto summary = nlohmann::json::parse(util::read_file((run.output / "report/summary.json").string()));
  const auto& c = summary.at("corpora").at(0);
  const int steepest = c.at("steepest_negative_quintile").is_null() ? 0 : c.at("steepest_negative_quintile").get<int>();
  double max_p = 0;
  std::string ps;
  for (const auto& t : c.at("permutation_tests")) {
    const double p = t.at("p_value").get<double>();
    max_p = std::max(max_p, p);
    ps += (ps.empty() ? "" : ", ") + std::string("q1 vs q") + std::to_string(t.at("other_quintile").get<int>()) +
          " p=" + checks::detail::sci(p);
  }
  std::set<std::string> models;
  for (const auto& v : c.at("variants")) models.insert(v.at("model_id").get<std::string>());
  std::string slopes;
  for (const auto& t : c.at("slope_tests"))
    slopes += (slopes.empty() ? "" : ", ") + t.at("quintile").dump() + ":" + checks::detail::sci(t.at("slope").get<double>());
  r.passed = models.size() == 4 && steepest == 1 && c.at("permutation_tests").size() == 4 && max_p <= 0.05 &&
             run.seconds < 600;
  r.detail = "K=" + std::to_string(models.size()) + ", steepest negative quintile " +
             std::to_string(steepest) + " (slopes " + slopes + "); " + ps;
  return r;
}

CheckResult diagnostics_and_reruns(const fs::path& scratch, const fs::path& fixture, const PipelineRun& first) {
  auto r = checks::diagnostics_identities(1000);
  const auto second = run_fixture(fixture, scratch / "rerun");
  r.seconds += second.seconds;
  bool identical = first.code == 0 && second.code == 0;
  std::string differing;
  if (identical) {
    const auto a = snapshot(first.output / "report"), b = snapshot(second.output / "report");
    identical = a.size() == b.size() && a.size() == 7;
    for (const auto& [name, content] : a)
      if (!b.count(name) || b.at(name) != content) {
        identical = false;
        differing += " " + name;
      }
  }
  r.passed = r.passed && identical;
  r.detail += identical ? "; report files byte-identical across re-runs" : "; re-run reports differ:" + differing;
  return r;
}

}  // namespace

int main() {
  const fs::path fixture = fs::path(SURPFIT_FIXTURES) / "synthetic";
  const fs::path scratch = fs::temp_directory_path() / ("surpfit_acceptance_" + std::to_string(::getpid()));
  fs::remove_all(scratch);
  fs::create_directories(scratch);

  std::vector<CheckResult> results;
  auto report = [&](CheckResult r) {
    std::cout << checks::format(r) << std::endl;
    results.push_back(std::move(r));
  };

  report(with_limit(checks::reml_oracle(50), 60));
  report(checks::anova_benchmark(20, 10));
  report(checks::ols_degeneracy(20));
  report(with_limit(checks::window_coverage(1000), 5));
  report(checks::chain_rule(100, (scratch / "chain").string()));
  {
    auto cal = checks::permutation_calibration(1000, 200);
    const auto slope = checks::slope_closed_form(200);
    cal.passed = cal.passed && slope.passed;
    cal.detail += "; " + slope.detail;
    cal.seconds += slope.seconds;
    report(cal);
  }
  const auto run = run_fixture(fixture, scratch / "run");
  report(diagnostics_and_reruns(scratch, fixture, run));
  report(planted_effect(run));

  fs::remove_all(scratch);
  std::size_t failed = 0;
  for (const auto& r : results) failed += !r.passed;
  std::cout << (failed ? "FAIL" : "PASS") << "  acceptance: " << results.size() - failed << "/" << results.size()
            << " criteria passed" << std::endl;
  return failed ? 1 : 0;
}
