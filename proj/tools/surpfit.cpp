#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "surpfit/checks.hpp"
#include "surpfit/config.hpp"
#include "surpfit/pipeline.hpp"

namespace {

int selftest(std::ostream& out) {
  using namespace surpfit::checks;
  const auto scratch = std::filesystem::temp_directory_path() / "surpfit_selftest";
  const std::vector<CheckResult> results{
      reml_oracle(10),         anova_benchmark(),      ols_degeneracy(5),
      window_coverage(100),    chain_rule(10, scratch.string()), permutation_calibration(200, 100),
      slope_closed_form(20),   diagnostics_identities(20)};
  std::filesystem::remove_all(scratch);
  bool ok = true;
  for (const auto& r : results) {
    out << format(r) << "\n";
    ok = ok && r.passed;
  }
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"surpfit: surprisal and reading-time regression pipeline"};
  app.require_subcommand(1);
  std::string config_path;
  std::optional<int> jobs;
  std::optional<std::uint64_t> seed;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "pipeline config file")->required();
    sub->add_option("--jobs", jobs, "worker threads (overrides [run] jobs)")->check(CLI::PositiveNumber);
    sub->add_option("--seed", seed, "master seed (overrides [run] seed)");
  };
  auto* plan = app.add_subcommand("plan", "write scoring manifests");
  auto* analyze = app.add_subcommand("analyze", "align scores, fit regressions and write reports");
  auto* report = app.add_subcommand("report", "re-emit report tables from cached fits");
  app.add_subcommand("selftest", "run the oracle checks");
  for (auto* sub : {plan, analyze, report}) add_common(sub);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return surpfit::pipeline::kInputError;
  }

  try {
    if (app.got_subcommand("selftest")) return selftest(std::cout);
    auto cfg = surpfit::load_config(config_path, seed);
    if (jobs) cfg.jobs = *jobs;
    if (plan->parsed()) return surpfit::pipeline::cmd_plan(cfg, std::cerr);
    if (analyze->parsed()) return surpfit::pipeline::cmd_analyze(cfg, std::cerr);
    return surpfit::pipeline::cmd_report(cfg, std::cerr);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return surpfit::pipeline::kInputError;
  }
}
