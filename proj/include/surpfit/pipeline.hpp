#pragma once

// Batch pipeline behind the command-line tool.
//
//   plan     corpora + token files -> scoring manifests
//   analyze  score files -> word surprisal, fits, residuals (cached) -> report
//   report   cached fits -> TSV tables and summary.json
//
// Output layout under output_dir:
//   cache/<corpus>/quintiles.tsv, exclusions.tsv
//   cache/<corpus>/<model>__step<k>.{fit.json,residuals.tsv,words.tsv}
//   cache/<corpus>/<model>__occlusion.tsv
//   report/{fits,quintile_report,slope_tests,permutation_tests,
//           training_dynamics,occlusion}.tsv, report/summary.json

#include <algorithm>
#include <atomic>
#include <exception>
#include <filesystem>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "surpfit/config.hpp"
#include "surpfit/corpus.hpp"
#include "surpfit/diagnostics.hpp"
#include "surpfit/mixedlm/fit.hpp"
#include "surpfit/scoring.hpp"
#include "surpfit/unigram.hpp"

namespace surpfit::pipeline {

namespace fs = std::filesystem;

enum ExitCode : int { kOk = 0, kInputError = 1, kNonConvergence = 2 };

// ---------------------------------------------------------------------------
// Inputs shared by plan and analyze

struct CorpusData {
  CorpusConfig config;
  Corpus corpus;
  FilteredSet exploratory;
  std::vector<ExcludedObservation> exclusions;
  std::map<WordKey, double> unigram;  // every word of every document
  QuintileAssignment quintiles;       // distinct exploratory words
};

using DocTokens = std::map<std::string, std::vector<TokenScore>>;

/// Reads a token-offset file and checks it covers exactly the corpus documents
/// with contiguous token indices 1..N.
inline DocTokens load_doc_tokens(const std::string& path, const std::string& tokenizer, const Corpus& corpus) {
  auto tf = read_token_file(path);
  if (tf.tokenizer_id != tokenizer)
    throw InputError(path + ": tokenizer_id '" + tf.tokenizer_id + "' but config expects '" + tokenizer + "'");
  DocTokens out;
  for (auto& t : tf.tokens) {
    if (!corpus.find_document(t.doc_id))
      throw InputError(path + ": document " + t.doc_id + " is not in corpus " + corpus.corpus_id);
    out[t.doc_id].push_back(std::move(t));
  }
  for (const auto& d : corpus.documents) {
    auto it = out.find(d.doc_id);
    if (it == out.end()) throw InputError(path + ": no tokens for document " + d.doc_id);
    auto& v = it->second;
    std::sort(v.begin(), v.end(), [](const TokenScore& a, const TokenScore& b) { return a.token_index < b.token_index; });
    for (std::size_t i = 0; i < v.size(); ++i)
      if (v[i].token_index != static_cast<long>(i + 1))
        throw InputError(path + ": token indices of " + d.doc_id + " are not 1.." + std::to_string(v.size()));
  }
  return out;
}

/// Position in doc.words of the word owning each token (-1 for trailing whitespace).
inline std::vector<long> token_owners(const Document& doc, std::vector<TokenScore> tokens) {
  for (auto& t : tokens) t.log2prob = 0.0;
  const auto al = align_tokens_to_words(doc, tokens);
  std::vector<long> owner(tokens.size() + 1, -1);
  for (const auto& [tok, wi] : al.token_word) owner[static_cast<std::size_t>(tok)] = wi;
  return owner;
}

inline std::vector<CorpusData> load_corpora(const PipelineConfig& cfg, std::ostream& log) {
  const UnigramModel uni = load_counts(cfg.unigram_counts, cfg.unigram_tokenizer);
  std::vector<CorpusData> out;
  std::map<std::string, std::string> doc_owner;
  for (const auto& cc : cfg.corpora) {
    CorpusData cd;
    cd.config = cc;
    cd.corpus = parse_corpus(cc.events, cc.paradigm, cc.id);
    for (const auto& d : cd.corpus.documents)
      if (auto [it, fresh] = doc_owner.emplace(d.doc_id, cc.id); !fresh)
        throw InputError("document id " + d.doc_id + " appears in corpora " + it->second + " and " + cc.id +
                         "; document ids must be unique across corpora");
    const FilteredSet filtered = apply_filters(cd.corpus);
    cd.exclusions = filtered.exclusion_log;
    cd.exploratory = split_exploratory(filtered).first;

    const auto tokens = load_doc_tokens(cfg.token_file(cfg.unigram_tokenizer, cc.id), cfg.unigram_tokenizer, cd.corpus);
    for (const auto& doc : cd.corpus.documents) {
      auto toks = tokens.at(doc.doc_id);
      for (auto& t : toks) t.log2prob = uni.log2prob(t.token_text);
      const auto al = align_tokens_to_words(doc, toks);
      for (const auto& w : al.words) {
        if (w.n_subword_tokens == 0)
          throw InputError(cc.id + ": word " + doc.doc_id + "#" + std::to_string(w.word_index) +
                           " has no tokens under tokenizer " + cfg.unigram_tokenizer);
        cd.unigram[{doc.doc_id, w.word_index}] = w.surprisal;
      }
    }
    std::set<WordKey> words;
    for (const auto& o : cd.exploratory.observations) words.insert({o.doc_id, o.word_index});
    std::vector<std::pair<WordKey, double>> items;
    for (const auto& k : words) items.emplace_back(k, -cd.unigram.at(k));
    if (items.size() < 5)
      throw InputError(cc.id + ": only " + std::to_string(items.size()) + " distinct exploratory words after filtering");
    cd.quintiles = assign_quintiles(std::move(items));
    log << "corpus " << cc.id << ": " << cd.corpus.observations.size() << " observations, "
        << cd.exclusions.size() << " excluded, " << cd.exploratory.observations.size() << " exploratory over "
        << words.size() << " words\n";
    out.push_back(std::move(cd));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Planning

struct PlannedManifest {
  std::string name;  // file name shared by the manifest and its score file
  ScoreManifest manifest;
};

struct OcclusionTarget {
  std::string corpus_id;
  WordKey word;
  std::vector<long> tokens;
};

struct Plan {
  std::vector<CorpusData> corpora;
  std::vector<PlannedManifest> manifests;
  std::map<std::string, std::vector<OcclusionTarget>> occlusion_targets;  // by model
  std::map<std::string, std::size_t> occlusion_skipped;                   // by model
};

inline std::string variant_name(const std::string& model, long step) {
  return model + "__step" + std::to_string(step);
}

inline std::string manifest_name(const std::string& model, long step, const Condition& c) {
  return variant_name(model, step) + "__" + c.name() + ".jsonl";
}

inline Plan make_plan(const PipelineConfig& cfg, std::ostream& log) {
  Plan plan;
  plan.corpora = load_corpora(cfg, log);
  const int n_max = cfg.occlusion.empty() ? 0 : cfg.occlusion.front();
  for (const auto& m : cfg.models) {
    std::vector<ScoreRequest> full;
    auto& targets = plan.occlusion_targets[m.id];
    std::size_t skipped = 0;
    for (const auto& cd : plan.corpora) {
      const auto tokens = load_doc_tokens(cfg.token_file(m.tokenizer, cd.config.id), m.tokenizer, cd.corpus);
      for (const auto& doc : cd.corpus.documents) {
        const auto& toks = tokens.at(doc.doc_id);
        for (auto r : plan_windows(static_cast<long>(toks.size()), m.window)) {
          r.doc_id = doc.doc_id;
          full.push_back(std::move(r));
        }
        if (cfg.occlusion.empty()) continue;
        const auto owner = token_owners(doc, toks);
        std::map<int, std::vector<long>> word_tokens;
        for (long t = 1; t < static_cast<long>(owner.size()); ++t)
          if (owner[static_cast<std::size_t>(t)] >= 0)
            word_tokens[doc.words[static_cast<std::size_t>(owner[static_cast<std::size_t>(t)])].word_index].push_back(t);
        for (const auto& [key, q] : cd.quintiles.labels) {
          if (key.doc_id != doc.doc_id || (q != 1 && !cfg.occlusion_all_words)) continue;
          const auto& wt = word_tokens[key.word_index];
          if (wt.empty() || wt.front() <= n_max) {
            ++skipped;
            continue;
          }
          targets.push_back({cd.config.id, key, wt});
        }
      }
    }
    for (long step : m.checkpoints) {
      ScoreHeader h{m.id, step, m.tokenizer, m.window, Condition::full(), {}};
      plan.manifests.push_back({manifest_name(m.id, step, h.condition), {h, full}});
    }
    plan.occlusion_skipped[m.id] = skipped;
    for (int n : cfg.occlusion) {
      ScoreHeader h{m.id, m.final_step(), m.tokenizer, m.window, Condition::recent_n(n), {}};
      std::vector<ScoreRequest> reqs;
      for (const auto& t : targets)
        for (long tok : t.tokens) {
          auto r = plan_occlusion(tok, n);
          r.doc_id = t.word.doc_id;
          reqs.push_back(std::move(r));
        }
      plan.manifests.push_back({manifest_name(m.id, m.final_step(), h.condition), {h, std::move(reqs)}});
    }
  }
  return plan;
}

inline int cmd_plan(const PipelineConfig& cfg, std::ostream& log) {
  const Plan plan = make_plan(cfg, log);
  fs::create_directories(cfg.manifest_dir);
  for (const auto& pm : plan.manifests) {
    write_manifest((fs::path(cfg.manifest_dir) / pm.name).string(), pm.manifest);
    log << "manifest " << pm.name << ": " << pm.manifest.requests.size() << " requests\n";
  }
  for (const auto& [model, skipped] : plan.occlusion_skipped)
    if (skipped > 0)
      log << "warning: occlusion for " << model << " skips " << skipped << " target word(s) with fewer than "
          << cfg.occlusion.front() << " preceding tokens; they are dropped from every condition\n";
  return kOk;
}

// ---------------------------------------------------------------------------
// Cached per-variant results

struct CachedVariant {
  std::string corpus_id, model_id;
  long step = 0;
  double log2_perplexity = 0;
  nlohmann::ordered_json fit;  // fit_to_json plus bookkeeping
  std::vector<ResidualRecord> residuals;
  std::vector<WordSurprisal> words;
};

inline fs::path cache_dir(const PipelineConfig& cfg, const std::string& corpus) {
  return fs::path(cfg.output_dir) / "cache" / corpus;
}

inline std::string words_to_tsv(const std::vector<WordSurprisal>& words) {
  std::string out = "doc_id\tword_index\tsurprisal\tn_tokens\tcomplete\n";
  for (const auto& w : words)
    out += w.doc_id + '\t' + std::to_string(w.word_index) + '\t' + util::fmt(w.surprisal) + '\t' +
           std::to_string(w.n_subword_tokens) + '\t' + (w.complete ? "1" : "0") + '\n';
  return out;
}

inline std::vector<std::vector<std::string>> read_tsv(const std::string& path, const std::string& header) {
  if (!fs::exists(path)) throw InputError("missing cached file " + path + " (run analyze first)");
  std::vector<std::vector<std::string>> rows;
  std::size_t lineno = 0, width = util::split(header, '\t').size();
  const std::string text = util::read_file(path);
  for (auto line : util::split(text, '\n')) {
    ++lineno;
    line = util::strip_cr(line);
    if (lineno == 1) {
      if (line != header) throw InputError(path + ": unexpected header");
      continue;
    }
    if (line.empty()) continue;
    auto f = util::split(line, '\t');
    if (f.size() != width) throw InputError(path + ":" + std::to_string(lineno) + ": expected " + std::to_string(width) + " fields");
    rows.emplace_back(f.begin(), f.end());
  }
  return rows;
}

inline int to_int(const std::string& s, const std::string& where) {
  auto v = util::parse_int<int>(s);
  if (!v) throw InputError(where + ": bad integer '" + s + "'");
  return *v;
}

inline std::vector<WordSurprisal> read_words(const std::string& path) {
  std::vector<WordSurprisal> out;
  for (const auto& f : read_tsv(path, "doc_id\tword_index\tsurprisal\tn_tokens\tcomplete"))
    out.push_back({f[0], to_int(f[1], path), util::parse_report_double(f[2]), to_int(f[3], path), f[4] == "1"});
  return out;
}

// ---------------------------------------------------------------------------
// Report

inline std::string tsv_row(const std::vector<std::string>& cells) {
  std::string s;
  for (std::size_t i = 0; i < cells.size(); ++i) s += (i ? "\t" : "") + cells[i];
  return s + '\n';
}

inline int cmd_report(const PipelineConfig& cfg, std::ostream& log) {
  const fs::path report_dir = fs::path(cfg.output_dir) / "report";
  fs::create_directories(report_dir);
  std::string fits = tsv_row({"corpus_id", "model_id", "checkpoint_step", "log2_perplexity", "n_observations",
                              "surprisal_coefficient", "sigma2", "reml_deviance", "converged", "boundary_fit",
                              "evaluations"});
  std::string quint = tsv_row({"corpus_id", "model_id", "checkpoint_step", "log2_perplexity", "quintile", "n", "mse",
                               "sse", "sse_under", "sse_over", "n_under", "n_over", "mean_surprisal",
                               "mean_surprisal_under", "mean_surprisal_over", "surprisal_proportion"});
  std::string slopes = tsv_row({"corpus_id", "quintile", "n_variants", "slope", "intercept", "t_statistic",
                                "degrees_freedom", "p_one_tailed"});
  std::string perms = tsv_row({"corpus_id", "target_quintile", "other_quintile", "observed_statistic",
                               "permutation_count", "count_le", "p_value", "seed", "target_words", "other_words"});
  std::string dyn = tsv_row({"corpus_id", "model_id", "checkpoint_step", "quintile", "present", "n_words",
                             "mean_surprisal", "surprisal_proportion", "n_observations", "sse", "sse_under", "sse_over"});
  std::string occ = tsv_row({"corpus_id", "model_id", "condition", "context_tokens", "n_words", "mean_surprisal",
                             "proportion"});
  nlohmann::ordered_json summary;
  summary["seed"] = cfg.seed;
  summary["config_hash"] = cfg.config_hash();
  summary["permutations"] = cfg.permutations;
  summary["corpora"] = nlohmann::ordered_json::array();

  for (const auto& cc : cfg.corpora) {
    const fs::path dir = cache_dir(cfg, cc.id);
    QuintileAssignment qa;
    for (const auto& f : read_tsv((dir / "quintiles.tsv").string(), "doc_id\tword_index\tunigram_surprisal\tquintile"))
      qa.labels[{f[0], to_int(f[1], "quintiles.tsv")}] = to_int(f[3], "quintiles.tsv");

    std::vector<VariantResult> all, finals;
    nlohmann::ordered_json cj;
    cj["corpus_id"] = cc.id;
    cj["variants"] = nlohmann::ordered_json::array();
    for (const auto& m : cfg.models)
      for (long step : m.checkpoints) {
        const std::string base = (dir / variant_name(m.id, step)).string();
        if (!fs::exists(base + ".fit.json")) throw InputError("missing cached fit " + base + ".fit.json (run analyze first)");
        nlohmann::json fj;
        try {
          fj = nlohmann::json::parse(util::read_file(base + ".fit.json"));
        } catch (const nlohmann::json::exception& e) {
          throw InputError(base + ".fit.json: " + e.what());
        }
        VariantResult v;
        v.model_id = m.id;
        v.checkpoint_step = step;
        v.corpus_id = cc.id;
        v.log2_perplexity = fj.at("log2_perplexity").get<double>();
        v.records = mixedlm::read_residuals(base + ".residuals.tsv");
        for (const auto& w : read_words(base + ".words.tsv"))
          if (w.complete && qa.label({w.doc_id, w.word_index}) != 0) v.word_surprisal[{w.doc_id, w.word_index}] = w.surprisal;
        const auto& fit = fj.at("fit");
        double coef = kNaN;
        for (const auto& b : fit.at("beta"))
          if (b.at("name") == "surprisal") coef = b.at("estimate").get<double>();
        const auto& conv = fit.at("convergence");
        fits += tsv_row({cc.id, m.id, std::to_string(step), util::fmt(v.log2_perplexity), std::to_string(v.records.size()),
                         util::fmt(coef), util::fmt(fit.at("sigma2").get<double>()),
                         util::fmt(fit.at("reml_deviance").get<double>()), conv.at("converged").get<bool>() ? "1" : "0",
                         conv.at("boundary_fit").get<bool>() ? "1" : "0",
                         std::to_string(conv.at("evaluations").get<int>())});

        const auto rep = quintile_report(v.records);
        for (const auto& s : rep.quintiles)
          quint += tsv_row({cc.id, m.id, std::to_string(step), util::fmt(v.log2_perplexity), std::to_string(s.quintile),
                            std::to_string(s.n), util::fmt(s.mse), util::fmt(s.sse), util::fmt(s.sse_under),
                            util::fmt(s.sse_over), std::to_string(s.n_under), std::to_string(s.n_over),
                            util::fmt(s.mean_surprisal), util::fmt(s.mean_surprisal_under),
                            util::fmt(s.mean_surprisal_over), util::fmt(s.surprisal_proportion)});
        quint += tsv_row({cc.id, m.id, std::to_string(step), util::fmt(v.log2_perplexity), "all", std::to_string(rep.n),
                          util::fmt(rep.mse), util::fmt(rep.sse), "NA", "NA", "NA", "NA", "NA", "NA", "NA", "NA"});
        nlohmann::ordered_json vj;
        vj["model_id"] = m.id;
        vj["checkpoint_step"] = step;
        vj["log2_perplexity"] = v.log2_perplexity;
        vj["mse"] = rep.mse;
        std::vector<double> qm;
        for (const auto& s : rep.quintiles) qm.push_back(s.mse);
        vj["quintile_mse"] = qm;
        cj["variants"].push_back(vj);
        if (step == m.final_step()) finals.push_back(v);
        all.push_back(std::move(v));
      }

    // slope tests across the final checkpoint of each model
    nlohmann::ordered_json sj = nlohmann::ordered_json::array();
    std::optional<int> steepest;
    double steepest_slope = 0;
    if (finals.size() >= 3) {
      for (int q = 0; q <= 5; ++q) {
        std::vector<std::pair<double, double>> pts;
        for (const auto& v : finals) {
          const auto rep = quintile_report(v.records);
          pts.emplace_back(v.log2_perplexity, q == 0 ? rep.mse : rep.quintiles[static_cast<std::size_t>(q - 1)].mse);
        }
        const auto t = slope_test(pts);
        slopes += tsv_row({cc.id, q == 0 ? "all" : std::to_string(q), std::to_string(pts.size()), util::fmt(t.slope),
                           util::fmt(t.intercept), util::fmt(t.t_statistic), std::to_string(t.degrees_freedom),
                           util::fmt(t.p_one_tailed)});
        sj.push_back({{"quintile", q == 0 ? nlohmann::ordered_json("all") : nlohmann::ordered_json(q)},
                      {"slope", t.slope},
                      {"p_one_tailed", t.p_one_tailed}});
        if (q > 0 && (!steepest || t.slope < steepest_slope)) {
          steepest = q;
          steepest_slope = t.slope;
        }
      }
    } else {
      log << "warning: corpus " << cc.id << " has " << finals.size()
          << " final-checkpoint variant(s); slope tests need at least 3\n";
    }
    cj["slope_tests"] = sj;
    cj["steepest_negative_quintile"] =
        steepest && steepest_slope < 0 ? nlohmann::ordered_json(*steepest) : nlohmann::ordered_json(nullptr);

    // pairwise permutation tests of quintile 1 against each other quintile
    nlohmann::ordered_json pj = nlohmann::ordered_json::array();
    bool all_significant = finals.size() >= 2;
    if (finals.size() >= 2) {
      for (int q = 2; q <= 5; ++q) {
        const std::uint64_t seed = util::derive_seed(cfg.seed, util::fnv1a64(cc.id + ":1:" + std::to_string(q)));
        const auto r = quintile_slope_permutation(finals, 1, q, cfg.permutations, seed, cfg.jobs);
        perms += tsv_row({cc.id, "1", std::to_string(q), util::fmt(r.observed_statistic), std::to_string(r.permutation_count),
                          std::to_string(r.count_le), util::fmt(r.p_value), std::to_string(r.seed),
                          std::to_string(r.target_words), std::to_string(r.other_words)});
        pj.push_back({{"other_quintile", q}, {"observed_statistic", r.observed_statistic}, {"p_value", r.p_value}, {"seed", r.seed}});
        all_significant = all_significant && r.p_value <= 0.05;
      }
    }
    cj["permutation_tests"] = pj;
    cj["signature"] = steepest == 1 && steepest_slope < 0 && all_significant;

    for (const auto& r : training_dynamics(all, qa))
      dyn += tsv_row({cc.id, r.model_id, std::to_string(r.checkpoint_step), std::to_string(r.quintile),
                      r.present ? "1" : "0", std::to_string(r.n_words), util::fmt(r.mean_surprisal),
                      util::fmt(r.surprisal_proportion), std::to_string(r.n_observations), util::fmt(r.sse),
                      util::fmt(r.sse_under), util::fmt(r.sse_over)});

    if (!cfg.occlusion.empty()) {
      std::vector<OcclusionInput> runs;
      for (const auto& m : cfg.models) {
        const std::string path = (dir / (m.id + "__occlusion.tsv")).string();
        std::map<std::string, OcclusionInput> by_cond;
        for (const auto& f : read_tsv(path, "condition\tdoc_id\tword_index\tsurprisal")) {
          auto& in = by_cond[f[0]];
          in.model_id = m.id;
          in.condition = Condition::parse(f[0]);
          in.word_surprisal[{f[1], to_int(f[2], path)}] = util::parse_report_double(f[3]);
        }
        if (by_cond.empty()) {
          log << "warning: no occlusion targets for " << m.id << " on corpus " << cc.id << "\n";
          continue;
        }
        for (const Condition c : [&] {
               std::vector<Condition> cs{Condition::full()};
               for (int n : cfg.occlusion) cs.push_back(Condition::recent_n(n));
               return cs;
             }())
          if (by_cond.count(c.name())) runs.push_back(std::move(by_cond[c.name()]));
      }
      if (!runs.empty())
        for (const auto& r : occlusion_report(runs))
          occ += tsv_row({cc.id, r.model_id, r.condition.name(), r.condition.is_full() ? "full" : std::to_string(r.condition.recent),
                          std::to_string(r.n_words), util::fmt(r.mean_surprisal), util::fmt(r.proportion)});
    }
    summary["corpora"].push_back(cj);
  }

  util::write_file((report_dir / "fits.tsv").string(), fits);
  util::write_file((report_dir / "quintile_report.tsv").string(), quint);
  util::write_file((report_dir / "slope_tests.tsv").string(), slopes);
  util::write_file((report_dir / "permutation_tests.tsv").string(), perms);
  util::write_file((report_dir / "training_dynamics.tsv").string(), dyn);
  util::write_file((report_dir / "occlusion.tsv").string(), occ);
  util::write_file((report_dir / "summary.json").string(), summary.dump(2) + '\n');
  log << "report written to " << report_dir.string() << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------
// Analyze

namespace detail {

struct FitJob {
  const CorpusData* data = nullptr;
  const ModelConfig* model = nullptr;
  long step = 0;
  double log2_perplexity = 0;
  std::map<WordKey, WordSurprisal> surprisal;
  std::vector<WordSurprisal> words;
  // results
  std::optional<mixedlm::DesignBuild> build;
  std::optional<mixedlm::FitResult> fit;
  std::optional<mixedlm::FitResult> failed;  // best state of a non-converged fit
  std::vector<ResidualRecord> residuals;
  std::exception_ptr error;
};

inline void run_pool(std::vector<FitJob>& jobs, int threads, const PipelineConfig& cfg) {
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i; (i = next++) < jobs.size();) {
      auto& job = jobs[i];
      try {
        const auto spec = cfg.regression_spec(job.data->config.paradigm);
        job.build = mixedlm::build_design(job.data->corpus, job.data->exploratory, job.surprisal, job.data->unigram, spec);
        mixedlm::FitOptions opt;
        opt.optimizer.max_evaluations = cfg.max_evaluations;
        opt.optimizer.restarts = cfg.restarts;
        opt.optimizer.seed = util::derive_seed(
            cfg.seed, util::fnv1a64("fit:" + job.data->config.id + ":" + variant_name(job.model->id, job.step)));
        try {
          job.fit = mixedlm::fit(job.build->design, opt);
          job.residuals = mixedlm::residuals(*job.fit, job.build->design, job.data->quintiles);
        } catch (const mixedlm::NonConvergence& e) {
          job.failed = e.best();
        }
      } catch (...) {
        job.error = std::current_exception();
      }
    }
  };
  const int n = std::max(1, std::min<int>(threads, static_cast<int>(jobs.size())));
  std::vector<std::thread> pool;
  for (int t = 1; t < n; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
}

/// Reads a score file and checks it against its planned manifest and the
/// tokenizer's token offsets.
inline ScoreFile load_scores(const PipelineConfig& cfg, const PlannedManifest& pm,
                             const std::map<std::pair<std::string, long>, std::pair<std::size_t, std::size_t>>& offsets) {
  const std::string manifest_path = (fs::path(cfg.manifest_dir) / pm.name).string();
  const std::string score_path = (fs::path(cfg.scores_dir) / pm.name).string();
  if (!fs::exists(manifest_path)) throw InputError("missing manifest " + manifest_path + " (run plan first)");
  if (util::read_file(manifest_path) != manifest_to_string(pm.manifest))
    throw InputError("manifest " + manifest_path + " is out of date with the config (re-run plan)");
  if (!fs::exists(score_path))
    throw InputError("missing score file " + score_path + " for manifest " + manifest_path);
  auto f = read_score_file(score_path);
  check_scores_match_manifest(pm.manifest, f, score_path);
  for (const auto& t : f.scores) {
    auto it = offsets.find({t.doc_id, t.token_index});
    if (it == offsets.end() || it->second != std::make_pair(t.char_start, t.char_end))
      throw InputError(score_path + ": token " + t.doc_id + "#" + std::to_string(t.token_index) +
                       " does not match the tokenizer's offsets (tokenization mismatch)");
  }
  return f;
}

}  // namespace detail

inline int cmd_analyze(const PipelineConfig& cfg, std::ostream& log) {
  Plan plan = make_plan(cfg, log);
  std::map<std::string, const PlannedManifest*> by_name;
  for (const auto& pm : plan.manifests) by_name[pm.name] = &pm;

  std::vector<detail::FitJob> jobs;
  std::map<std::string, std::map<std::string, std::map<WordKey, double>>> occlusion;  // corpus -> condition rows per model
  std::map<std::string, std::string> occlusion_tsv;                                   // cache path -> contents
  for (const auto& m : cfg.models) {
    std::map<std::pair<std::string, long>, std::pair<std::size_t, std::size_t>> offsets;
    std::map<std::string, DocTokens> tokens;  // by corpus
    for (const auto& cd : plan.corpora) {
      tokens[cd.config.id] = load_doc_tokens(cfg.token_file(m.tokenizer, cd.config.id), m.tokenizer, cd.corpus);
      for (const auto& [doc, toks] : tokens[cd.config.id])
        for (const auto& t : toks) offsets[{doc, t.token_index}] = {t.char_start, t.char_end};
    }
    std::map<std::string, std::map<WordKey, double>> final_words;  // corpus -> full-condition word surprisal
    for (long step : m.checkpoints) {
      const auto& pm = *by_name.at(manifest_name(m.id, step, Condition::full()));
      const auto scores = detail::load_scores(cfg, pm, offsets);
      std::map<std::string, std::vector<TokenScore>> per_doc;
      for (const auto& t : scores.scores) per_doc[t.doc_id].push_back(t);
      for (const auto& cd : plan.corpora) {
        detail::FitJob job;
        job.data = &cd;
        job.model = &m;
        job.step = step;
        std::vector<TokenScore> corpus_scores;
        for (const auto& doc : cd.corpus.documents) {
          auto& ds = per_doc[doc.doc_id];
          corpus_scores.insert(corpus_scores.end(), ds.begin(), ds.end());
          const auto al = align_tokens_to_words(doc, ds);
          for (const auto& w : al.words) {
            job.surprisal[{w.doc_id, w.word_index}] = w;
            job.words.push_back(w);
          }
        }
        job.log2_perplexity = corpus_log2_perplexity(corpus_scores);
        if (step == m.final_step())
          for (const auto& w : job.words) final_words[cd.config.id][{w.doc_id, w.word_index}] = w.surprisal;
        jobs.push_back(std::move(job));
      }
    }
    // occlusion: per-word sums of the recent-n scores over the planned target tokens
    std::map<std::string, std::string> rows;  // corpus -> tsv body
    for (const auto& cd : plan.corpora) rows[cd.config.id];
    const auto& targets = plan.occlusion_targets[m.id];
    for (const auto& t : targets)
      rows[t.corpus_id] += "full\t" + t.word.doc_id + '\t' + std::to_string(t.word.word_index) + '\t' +
                           util::fmt(final_words[t.corpus_id].at(t.word)) + '\n';
    for (int n : cfg.occlusion) {
      const Condition c = Condition::recent_n(n);
      const auto& pm = *by_name.at(manifest_name(m.id, m.final_step(), c));
      const auto scores = detail::load_scores(cfg, pm, offsets);
      std::map<std::pair<std::string, long>, double> s;
      for (const auto& t : scores.scores) s[{t.doc_id, t.token_index}] = t.surprisal();
      for (const auto& t : targets) {
        double sum = 0;
        for (long tok : t.tokens) sum += s.at({t.word.doc_id, tok});
        rows[t.corpus_id] += c.name() + '\t' + t.word.doc_id + '\t' + std::to_string(t.word.word_index) + '\t' +
                             util::fmt(sum) + '\n';
      }
    }
    for (const auto& [corpus, body] : rows)
      occlusion_tsv[(cache_dir(cfg, corpus) / (m.id + "__occlusion.tsv")).string()] =
          "condition\tdoc_id\tword_index\tsurprisal\n" + body;
  }

  log << "fitting " << jobs.size() << " regression(s) with " << cfg.jobs << " worker(s)\n";
  detail::run_pool(jobs, cfg.jobs, cfg);
  for (const auto& job : jobs)
    if (job.error) std::rethrow_exception(job.error);

  for (const auto& cd : plan.corpora) {
    const fs::path dir = cache_dir(cfg, cd.config.id);
    fs::create_directories(dir);
    std::string q = "doc_id\tword_index\tunigram_surprisal\tquintile\n";
    for (const auto& [k, label] : cd.quintiles.labels)
      q += k.doc_id + '\t' + std::to_string(k.word_index) + '\t' + util::fmt(cd.unigram.at(k)) + '\t' +
           std::to_string(label) + '\n';
    util::write_file((dir / "quintiles.tsv").string(), q);
    std::string ex = "subject_id\tdoc_id\tword_index\treason\n";
    for (const auto& e : cd.exclusions)
      ex += e.observation.subject_id + '\t' + e.observation.doc_id + '\t' + std::to_string(e.observation.word_index) +
            '\t' + std::string(to_string(e.reason)) + '\n';
    util::write_file((dir / "exclusions.tsv").string(), ex);
  }
  for (const auto& [path, body] : occlusion_tsv) util::write_file(path, body);

  int status = kOk;
  for (const auto& job : jobs) {
    const std::string base = (cache_dir(cfg, job.data->config.id) / variant_name(job.model->id, job.step)).string();
    nlohmann::ordered_json j;
    j["corpus_id"] = job.data->config.id;
    j["model_id"] = job.model->id;
    j["checkpoint_step"] = job.step;
    j["log2_perplexity"] = job.log2_perplexity;
    j["dropped_incomplete"] = job.build->dropped_incomplete.size();
    if (job.failed) {
      j["fit"] = mixedlm::fit_to_json(*job.failed, job.build->design);
      const std::string path = base + ".nonconvergence.json";
      util::write_file(path, j.dump(2) + '\n');
      log << "error: fit for " << job.data->config.id << "/" << variant_name(job.model->id, job.step)
          << " did not converge within " << cfg.max_evaluations << " evaluations; diagnostics: " << path << "\n";
      status = kNonConvergence;
      continue;
    }
    fs::remove(base + ".nonconvergence.json");
    j["fit"] = mixedlm::fit_to_json(*job.fit, job.build->design);
    util::write_file(base + ".fit.json", j.dump(2) + '\n');
    mixedlm::write_residuals(base + ".residuals.tsv", job.residuals);
    util::write_file(base + ".words.tsv", words_to_tsv(job.words));
    if (!job.build->dropped_incomplete.empty())
      log << "note: " << variant_name(job.model->id, job.step) << " drops " << job.build->dropped_incomplete.size()
          << " observation(s) of words with incomplete surprisal\n";
  }
  if (status != kOk) return status;
  return cmd_report(cfg, log);
}

}  // namespace surpfit::pipeline
