#pragma once

// Pipeline configuration: a flat INI-style file.
//
//   # comment
//   [run]
//   output_dir = out            (env SURPFIT_OUTPUT_DIR overrides)
//   manifest_dir = ...          (default <output_dir>/manifests)
//   scores_dir = ...            (default <output_dir>/scores)
//   seed = 1
//   permutations = 1000
//   jobs = 1
//   occlusion = 49,24,9
//   occlusion_all_words = false
//
//   [corpus.<id>]        paradigm = self_paced|eye_tracking, events = path
//   [tokenizer.<id>]     tokens.<corpus id> = token-offset file
//   [unigram]            tokenizer = <id>, counts = path
//   [regression]         covariance = full|diagonal, max_evaluations, restarts,
//                        fixed_effects = comma list (default: paradigm standard)
//   [model.<id>]         tokenizer = <id>, window = W, checkpoints = comma list
//
// Relative paths are resolved against the config file's directory.

#include <algorithm>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "surpfit/common.hpp"
#include "surpfit/corpus.hpp"
#include "surpfit/mixedlm/design.hpp"

namespace surpfit {

inline constexpr const char* kOutputDirEnv = "SURPFIT_OUTPUT_DIR";

struct CorpusConfig {
  std::string id;
  Paradigm paradigm = Paradigm::self_paced;
  std::string events;
};

struct TokenizerConfig {
  std::string id;
  std::map<std::string, std::string> token_files;  // corpus id -> path
};

struct ModelConfig {
  std::string id;
  std::string tokenizer;
  int window = 0;
  std::vector<long> checkpoints;  // ascending

  long final_step() const { return checkpoints.back(); }
};

struct PipelineConfig {
  std::string path;
  std::string text;  // raw file contents, hashed into reports
  std::string output_dir;
  std::string manifest_dir;
  std::string scores_dir;
  std::uint64_t seed = 0;
  int permutations = 1000;
  int jobs = 1;
  std::vector<int> occlusion{49, 24, 9};
  bool occlusion_all_words = false;

  std::vector<CorpusConfig> corpora;
  std::map<std::string, TokenizerConfig> tokenizers;
  std::string unigram_tokenizer;
  std::string unigram_counts;
  mixedlm::Covariance covariance = mixedlm::Covariance::full;
  std::vector<std::string> fixed_effects;  // empty = paradigm standard
  int max_evaluations = 20000;
  int restarts = 3;
  std::vector<ModelConfig> models;

  std::string config_hash() const {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(util::fnv1a64(text)));
    return buf;
  }

  const std::string& token_file(const std::string& tokenizer, const std::string& corpus) const {
    auto t = tokenizers.find(tokenizer);
    if (t == tokenizers.end()) throw InputError("config: unknown tokenizer '" + tokenizer + "'");
    auto f = t->second.token_files.find(corpus);
    if (f == t->second.token_files.end())
      throw InputError("config: [tokenizer." + tokenizer + "] has no tokens." + corpus + " entry");
    return f->second;
  }

  mixedlm::RegressionSpec regression_spec(Paradigm p) const {
    auto spec = mixedlm::RegressionSpec::standard(p, covariance);
    if (!fixed_effects.empty()) {
      spec.fixed_effects = fixed_effects;
      spec.random_terms.front().slopes = fixed_effects;
    }
    spec.validate();
    return spec;
  }
};

namespace detail {

inline bool safe_id(std::string_view s) {
  return !s.empty() && std::all_of(s.begin(), s.end(), [](char c) {
    return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') || c == '-' || c == '_' ||
           c == '.';
  });
}

template <typename T>
std::vector<T> parse_list(std::string_view v, const std::string& where) {
  std::vector<T> out;
  for (auto piece : util::split(v, ',')) {
    piece = util::trim(piece);
    auto x = util::parse_int<T>(piece);
    if (!x) throw InputError(where + ": bad list element '" + std::string(piece) + "'");
    out.push_back(*x);
  }
  return out;
}

}  // namespace detail

/// Parses and validates a config file. `seed_override` replaces [run] seed.
inline PipelineConfig load_config(const std::string& path, std::optional<std::uint64_t> seed_override = {}) {
  namespace fs = std::filesystem;
  PipelineConfig cfg;
  cfg.path = path;
  cfg.text = util::read_file(path);
  const fs::path base = fs::path(path).parent_path();
  auto resolve = [&](std::string_view p) {
    const fs::path v(std::string{p});
    return (v.is_absolute() ? v : base / v).lexically_normal().string();
  };

  std::map<std::string, std::map<std::string, std::pair<std::string, std::size_t>>> sections;
  std::string current;
  std::size_t lineno = 0;
  for (auto line : util::split(cfg.text, '\n')) {
    ++lineno;
    const std::string where = path + ":" + std::to_string(lineno);
    line = util::trim(util::strip_cr(line));
    if (line.empty() || line.front() == '#' || line.front() == ';') continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw InputError(where + ": unterminated section header");
      current = std::string(util::trim(line.substr(1, line.size() - 2)));
      if (current.empty()) throw InputError(where + ": empty section name");
      if (sections.count(current)) throw InputError(where + ": duplicate section [" + current + "]");
      sections[current];
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) throw InputError(where + ": expected key = value");
    if (current.empty()) throw InputError(where + ": key outside any section");
    const std::string key(util::trim(line.substr(0, eq)));
    std::string_view value = util::trim(line.substr(eq + 1));
    if (const auto hash = value.find(" #"); hash != std::string_view::npos) value = util::trim(value.substr(0, hash));
    if (key.empty()) throw InputError(where + ": empty key");
    if (!sections[current].emplace(key, std::make_pair(std::string(value), lineno)).second)
      throw InputError(where + ": duplicate key '" + key + "'");
  }

  auto where_of = [&](const std::string& sec, const std::string& key) {
    return path + ":" + std::to_string(sections.at(sec).at(key).second);
  };
  auto take_int = [&](const std::string& sec, const std::string& key, auto& dst) {
    auto& kv = sections.at(sec);
    auto it = kv.find(key);
    if (it == kv.end()) return;
    auto v = util::parse_int<std::remove_reference_t<decltype(dst)>>(it->second.first);
    if (!v) throw InputError(where_of(sec, key) + ": '" + key + "' must be an integer");
    dst = *v;
  };
  auto require = [&](const std::string& sec, const std::string& key) -> const std::string& {
    auto& kv = sections.at(sec);
    auto it = kv.find(key);
    if (it == kv.end() || it->second.first.empty()) throw InputError(path + ": [" + sec + "] needs '" + key + "'");
    return it->second.first;
  };
  auto check_keys = [&](const std::string& sec, const std::set<std::string>& allowed, const std::string& prefix = {}) {
    for (const auto& [k, v] : sections.at(sec))
      if (!allowed.count(k) && (prefix.empty() || k.rfind(prefix, 0) != 0))
        throw InputError(path + ":" + std::to_string(v.second) + ": unknown key '" + k + "' in [" + sec + "]");
  };

  if (!sections.count("run")) throw InputError(path + ": missing [run] section");
  check_keys("run", {"output_dir", "manifest_dir", "scores_dir", "seed", "permutations", "jobs", "occlusion",
                     "occlusion_all_words"});
  cfg.output_dir = resolve(require("run", "output_dir"));
  if (const char* env = std::getenv(kOutputDirEnv); env && *env) cfg.output_dir = fs::path(env).lexically_normal().string();
  const auto& run = sections.at("run");
  cfg.manifest_dir = run.count("manifest_dir") ? resolve(run.at("manifest_dir").first)
                                               : (fs::path(cfg.output_dir) / "manifests").string();
  cfg.scores_dir = run.count("scores_dir") ? resolve(run.at("scores_dir").first)
                                           : (fs::path(cfg.output_dir) / "scores").string();
  take_int("run", "seed", cfg.seed);
  if (seed_override) cfg.seed = *seed_override;
  take_int("run", "permutations", cfg.permutations);
  take_int("run", "jobs", cfg.jobs);
  if (cfg.permutations < 1) throw InputError(path + ": permutations must be >= 1");
  if (cfg.jobs < 1) throw InputError(path + ": jobs must be >= 1");
  if (run.count("occlusion")) {
    cfg.occlusion = run.at("occlusion").first.empty() ? std::vector<int>{}
                                                      : detail::parse_list<int>(run.at("occlusion").first, where_of("run", "occlusion"));
    for (std::size_t i = 0; i < cfg.occlusion.size(); ++i)
      if (cfg.occlusion[i] <= 0 || (i > 0 && cfg.occlusion[i] >= cfg.occlusion[i - 1]))
        throw InputError(where_of("run", "occlusion") + ": occlusion sizes must be positive and descending");
  }
  if (run.count("occlusion_all_words")) {
    auto b = util::parse_bool(run.at("occlusion_all_words").first);
    if (!b) throw InputError(where_of("run", "occlusion_all_words") + ": expected true or false");
    cfg.occlusion_all_words = *b;
  }

  std::set<std::string> used;
  for (const auto& [name, kv] : sections) {
    const auto dot = name.find('.');
    const std::string kind = name.substr(0, dot);
    const std::string id = dot == std::string::npos ? std::string{} : name.substr(dot + 1);
    if (kind == "run" || kind == "unigram" || kind == "regression") {
      if (!id.empty()) throw InputError(path + ": unexpected section [" + name + "]");
      continue;
    }
    if (kind != "corpus" && kind != "tokenizer" && kind != "model") throw InputError(path + ": unknown section [" + name + "]");
    if (!detail::safe_id(id)) throw InputError(path + ": [" + name + "] needs an id of letters, digits, '-', '_' or '.'");
    if (kind == "corpus") {
      check_keys(name, {"paradigm", "events"});
      CorpusConfig c;
      c.id = id;
      try {
        c.paradigm = parse_paradigm(require(name, "paradigm"));
      } catch (const std::exception& e) {
        throw InputError(where_of(name, "paradigm") + ": " + e.what());
      }
      c.events = resolve(require(name, "events"));
      cfg.corpora.push_back(std::move(c));
    } else if (kind == "tokenizer") {
      check_keys(name, {}, "tokens.");
      TokenizerConfig t;
      t.id = id;
      for (const auto& [k, v] : kv) t.token_files[k.substr(7)] = resolve(v.first);
      cfg.tokenizers[id] = std::move(t);
    } else {
      check_keys(name, {"tokenizer", "window", "checkpoints"});
      ModelConfig m;
      m.id = id;
      m.tokenizer = require(name, "tokenizer");
      take_int(name, "window", m.window);
      if (m.window < 2 || m.window % 2 != 0) throw InputError(path + ": [" + name + "] window must be even and >= 2");
      m.checkpoints = detail::parse_list<long>(require(name, "checkpoints"), where_of(name, "checkpoints"));
      std::sort(m.checkpoints.begin(), m.checkpoints.end());
      if (std::adjacent_find(m.checkpoints.begin(), m.checkpoints.end()) != m.checkpoints.end())
        throw InputError(where_of(name, "checkpoints") + ": duplicate checkpoint");
      if (m.checkpoints.front() < 0) throw InputError(where_of(name, "checkpoints") + ": negative checkpoint");
      cfg.models.push_back(std::move(m));
    }
  }
  if (cfg.corpora.empty()) throw InputError(path + ": no [corpus.*] section");
  if (cfg.models.empty()) throw InputError(path + ": no [model.*] section");

  if (!sections.count("unigram")) throw InputError(path + ": missing [unigram] section");
  check_keys("unigram", {"tokenizer", "counts"});
  cfg.unigram_tokenizer = require("unigram", "tokenizer");
  cfg.unigram_counts = resolve(require("unigram", "counts"));

  if (sections.count("regression")) {
    check_keys("regression", {"covariance", "max_evaluations", "restarts", "fixed_effects"});
    const auto& reg = sections.at("regression");
    if (reg.count("covariance")) cfg.covariance = mixedlm::parse_covariance(reg.at("covariance").first);
    take_int("regression", "max_evaluations", cfg.max_evaluations);
    take_int("regression", "restarts", cfg.restarts);
    if (cfg.max_evaluations < 1 || cfg.restarts < 0) throw InputError(path + ": bad optimizer budget");
    if (reg.count("fixed_effects"))
      for (auto piece : util::split(reg.at("fixed_effects").first, ','))
        cfg.fixed_effects.emplace_back(util::trim(piece));
  }
  for (const auto& c : cfg.corpora) cfg.regression_spec(c.paradigm);

  // referenced files must exist at run start
  auto must_exist = [&](const std::string& p, const std::string& what) {
    if (!fs::exists(p)) throw InputError(path + ": " + what + " not found: " + p);
  };
  for (const auto& c : cfg.corpora) must_exist(c.events, "word-events file for corpus " + c.id);
  must_exist(cfg.unigram_counts, "unigram count table");
  std::set<std::string> need_tok{cfg.unigram_tokenizer};
  for (const auto& m : cfg.models) need_tok.insert(m.tokenizer);
  for (const auto& t : need_tok)
    for (const auto& c : cfg.corpora) must_exist(cfg.token_file(t, c.id), "token file");
  return cfg;
}

}  // namespace surpfit
