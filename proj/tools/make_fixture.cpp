#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "surpfit/synthetic.hpp"

int main(int argc, char** argv) {
  CLI::App app{"make_fixture: synthetic planted-effect fixture and stand-in scorer"};
  app.require_subcommand(1);

  surpfit::synthetic::Options opt;
  std::string out_dir;
  auto* gen = app.add_subcommand("generate", "write a fixture directory");
  gen->add_option("--out", out_dir, "output directory")->required();
  gen->add_option("--seed", opt.seed, "generator seed");
  gen->add_option("--subjects", opt.subjects, "number of subjects");
  gen->add_option("--documents", opt.documents, "number of documents");
  gen->add_option("--sentences", opt.sentences_per_document, "sentences per document");
  gen->add_option("--covariance", opt.covariance, "by-subject covariance written to the config")
      ->check(CLI::IsMember({"full", "diagonal"}));

  std::string truth_dir, manifest, manifest_dir, out_path, scores_dir;
  auto* score = app.add_subcommand("score", "answer manifests from the fixture's hidden truth");
  score->add_option("--truth", truth_dir, "fixture directory")->required();
  auto* one = score->add_option("--manifest", manifest, "single manifest");
  score->add_option("--out", out_path, "score file for --manifest")->needs(one);
  auto* all = score->add_option("--manifests", manifest_dir, "score every manifest in a directory")->excludes(one);
  score->add_option("--scores", scores_dir, "output directory for --manifests")->needs(all);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    if (gen->parsed()) {
      surpfit::synthetic::generate_fixture(out_dir, opt);
      return 0;
    }
    const auto truth = surpfit::synthetic::load_truth(truth_dir);
    if (!manifest.empty()) {
      if (out_path.empty()) throw surpfit::InputError("--manifest needs --out");
      surpfit::write_score_file(out_path, surpfit::synthetic::score_manifest(truth, surpfit::read_manifest(manifest)));
      return 0;
    }
    if (manifest_dir.empty() || scores_dir.empty()) throw surpfit::InputError("give --manifest/--out or --manifests/--scores");
    surpfit::synthetic::score_directory(truth, manifest_dir, scores_dir);
    return 0;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
