#pragma once

// Synthetic fixture generator and a stand-in scorer that answers manifests
// from the generator's hidden ground truth.
//
// Reading times follow a fixed mixed model driven by a "human" surprisal.
// Each pseudo-variant's surprisal is the human value plus noise, except that
// for words with high unigram surprisal it is shrunk toward zero by a factor
// that grows with variant size. Larger variants therefore reach lower
// perplexity while underpredicting reading times on rare words.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <numbers>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "surpfit/common.hpp"
#include "surpfit/corpus.hpp"
#include "surpfit/scoring.hpp"
#include "surpfit/unigram.hpp"

namespace surpfit::synthetic {

struct VariantTruth {
  std::string model_id;
  double shrink = 0;  // fraction of human surprisal removed on rare words
  double noise = 0;   // sd of per-token noise, bits
};

struct Options {
  std::uint64_t seed = 20240611;
  int vocabulary = 800;
  double zipf_exponent = 1.0;
  int documents = 4;
  int sentences_per_document = 10;
  int min_sentence_words = 6;
  int max_sentence_words = 12;
  int subjects = 36;
  int failing_subjects = 2;  // answer too few comprehension questions
  long background_tokens = 300000;
  std::vector<long> checkpoints{1000, 143000};
  int window = 128;
  std::vector<VariantTruth> variants{
      {"size1", 0.0, 0.80}, {"size2", 0.2, 0.75}, {"size3", 0.4, 0.70}, {"size4", 0.6, 0.65}};
  std::string tokenizer_id = "toy";
  std::string corpus_id = "synthetic";
  int permutations = 1000;
  std::string covariance = "diagonal";  // desk-scale default for the fixture; the pipeline default is full
};

/// Per-token ground truth used by the stand-in scorer.
struct TokenTruth {
  double human = 0;    // bits
  double unigram = 0;  // bits
  double rare = 0;     // 0..1
};

struct Truth {
  std::uint64_t seed = 0;
  long final_step = 0;
  std::string tokenizer_id;
  std::vector<VariantTruth> variants;
  std::map<std::pair<std::string, long>, TokenTruth> tokens;
  std::map<std::pair<std::string, long>, TokenScore> offsets;
};

inline constexpr double kContextSaturation = 32;  // tokens of context beyond which nothing is gained

/// Splits each word (with its leading space, if any) into pieces of at most
/// four code points; the pieces tile the document text.
inline std::vector<TokenScore> toy_tokenize(const Document& doc) {
  std::vector<TokenScore> out;
  long idx = 1;
  std::size_t at = 0;
  for (std::size_t w = 0; w < doc.words.size(); ++w) {
    const std::size_t end = w + 1 < doc.words.size() ? doc.words[w + 1].char_start : doc.length();
    const std::size_t word_end = doc.words[w].char_end;
    while (at < word_end) {
      const std::size_t e = std::min(word_end, at + 4);
      TokenScore t;
      t.doc_id = doc.doc_id;
      t.token_index = idx++;
      t.char_start = at;
      t.char_end = e;
      t.token_text = std::string(doc.slice(at, e));
      out.push_back(std::move(t));
      at = e;
    }
    if (end > word_end) {
      // trailing whitespace other than the single separator becomes its own token
      if (end - word_end > 1) {
        TokenScore t;
        t.doc_id = doc.doc_id;
        t.token_index = idx++;
        t.char_start = word_end;
        t.char_end = end - 1;
        t.token_text = std::string(doc.slice(word_end, end - 1));
        out.push_back(std::move(t));
      }
      at = end - 1;
    }
  }
  return out;
}

namespace detail {

inline double unit_normal(std::uint64_t key) {
  const std::uint64_t a = util::splitmix64(key), b = util::splitmix64(a ^ 0x5851f42d4c957f2dULL);
  const double u1 = (static_cast<double>(a >> 11) + 0.5) * 0x1.0p-53;
  const double u2 = static_cast<double>(b >> 11) * 0x1.0p-53;
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

inline std::string random_word(std::mt19937_64& rng, int length) {
  static constexpr const char* kConsonants = "bcdfghjklmnprstvwz";
  static constexpr const char* kVowels = "aeiou";
  std::string s;
  for (int i = 0; i < length; ++i)
    s += (i % 2 == 0) ? kConsonants[util::bounded(rng, 18)] : kVowels[util::bounded(rng, 5)];
  return s;
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

inline std::string fixture_config(const Options& o) {
  std::string s;
  s += "# Synthetic planted-effect fixture (regenerate with make_fixture generate)\n";
  s += "[run]\noutput_dir = out\nseed = " + std::to_string(o.seed) + "\npermutations = " +
       std::to_string(o.permutations) + "\njobs = 1\nocclusion = 49, 24, 9\n\n";
  s += "[corpus." + o.corpus_id + "]\nparadigm = self_paced\nevents = corpus/events.tsv\n\n";
  s += "[tokenizer." + o.tokenizer_id + "]\ntokens." + o.corpus_id + " = tokens_" + o.tokenizer_id + ".jsonl\n\n";
  s += "[unigram]\ntokenizer = " + o.tokenizer_id + "\ncounts = counts_" + o.tokenizer_id + ".tsv\n\n";
  s += "[regression]\ncovariance = " + o.covariance + "\nmax_evaluations = 20000\nrestarts = 3\n";
  std::string steps;
  for (long c : o.checkpoints) steps += (steps.empty() ? "" : ", ") + std::to_string(c);
  for (const auto& v : o.variants)
    s += "\n[model." + v.model_id + "]\ntokenizer = " + o.tokenizer_id + "\nwindow = " + std::to_string(o.window) +
         "\ncheckpoints = " + steps + "\n";
  return s;
}

}  // namespace detail

/// Writes a complete fixture into `dir`: corpus, token file, unigram counts,
/// pipeline config (surpfit.ini) and the hidden truth (truth.json, truth.tsv).
inline void generate_fixture(const std::string& dir, const Options& o) {
  namespace fs = std::filesystem;
  if (o.variants.empty() || o.checkpoints.empty()) throw DomainError("fixture needs variants and checkpoints");
  fs::create_directories(dir);
  // draws avoid std distributions so the fixture is identical across standard libraries
  std::mt19937_64 rng(o.seed);
  auto next_unif = [&] { return static_cast<double>(rng() >> 11) * 0x1.0p-53; };
  auto next_normal = [&] { return detail::unit_normal(rng()); };

  // vocabulary: rarer types are longer
  std::vector<std::string> vocab;
  std::set<std::string> used;
  while (static_cast<int>(vocab.size()) < o.vocabulary) {
    const double rank = static_cast<double>(vocab.size() + 1);
    const int len = 2 + static_cast<int>(std::log(rank) * 0.9) + static_cast<int>(util::bounded(rng, 3));
    auto w = detail::random_word(rng, len);
    if (used.insert(w).second) vocab.push_back(std::move(w));
  }
  std::vector<double> cdf;
  for (int r = 1; r <= o.vocabulary; ++r) cdf.push_back((cdf.empty() ? 0.0 : cdf.back()) + std::pow(r, -o.zipf_exponent));
  auto draw_zipf = [&] {
    const auto it = std::upper_bound(cdf.begin(), cdf.end(), next_unif() * cdf.back());
    return static_cast<int>(std::min<std::ptrdiff_t>(it - cdf.begin(), o.vocabulary - 1));
  };

  // documents
  Corpus corpus;
  corpus.corpus_id = o.corpus_id;
  corpus.paradigm = Paradigm::self_paced;
  std::vector<std::vector<int>> doc_types;
  long sentence_id = 0;
  for (int d = 0; d < o.documents; ++d) {
    Document doc;
    doc.doc_id = "d" + std::to_string(d + 1);
    std::string text;
    std::vector<int> types;
    std::vector<std::pair<long, int>> sent_pos;
    for (int s = 0; s < o.sentences_per_document; ++s) {
      ++sentence_id;
      const int n = o.min_sentence_words +
                    static_cast<int>(util::bounded(rng, static_cast<std::uint64_t>(o.max_sentence_words - o.min_sentence_words + 1)));
      for (int i = 0; i < n; ++i) {
        types.push_back(draw_zipf());
        sent_pos.emplace_back(sentence_id, i + 1);
      }
    }
    std::vector<std::pair<std::size_t, std::size_t>> spans;
    for (std::size_t i = 0; i < types.size(); ++i) {
      if (i) text += ' ';
      std::string w = vocab[static_cast<std::size_t>(types[i])];
      if (i + 1 == types.size() || sent_pos[i + 1].second == 1) w += '.';
      spans.emplace_back(text.size(), text.size() + w.size());
      text += w;
    }
    doc.set_text(text);
    for (std::size_t i = 0; i < types.size(); ++i) {
      WordToken t;
      t.word_index = static_cast<int>(i + 1);
      t.char_start = spans[i].first;
      t.char_end = spans[i].second;
      t.sentence_id = sent_pos[i].first;
      t.position_in_sentence = sent_pos[i].second;
      doc.words.push_back(t);
    }
    corpus.documents.push_back(std::move(doc));
    doc_types.push_back(std::move(types));
  }

  // tokenization and background unigram counts
  std::map<std::string, long long> counts;
  for (long i = 0; i < o.background_tokens;) {
    const auto& w = vocab[static_cast<std::size_t>(draw_zipf())];
    const std::string piece = " " + w;
    for (std::size_t at = 0; at < piece.size(); at += 4, ++i) ++counts[piece.substr(at, 4)];
  }
  write_counts((fs::path(dir) / ("counts_" + o.tokenizer_id + ".tsv")).string(), counts);
  const UnigramModel uni = load_counts((fs::path(dir) / ("counts_" + o.tokenizer_id + ".tsv")).string());

  TokenFile tf;
  tf.tokenizer_id = o.tokenizer_id;
  std::vector<std::vector<TokenScore>> doc_tokens;
  std::vector<std::vector<double>> word_unigram;
  std::vector<double> all_unigram;
  for (const auto& doc : corpus.documents) {
    auto toks = toy_tokenize(doc);
    auto scored = toks;
    for (auto& t : scored) t.log2prob = uni.log2prob(t.token_text);
    const auto al = align_tokens_to_words(doc, scored);
    std::vector<double> wu;
    for (std::size_t i = 0; i < al.words.size(); ++i) {
      wu.push_back(al.words[i].surprisal);
      // the rarity threshold is taken over words that survive the boundary filters
      const bool last = i + 1 == doc.words.size() || doc.words[i + 1].position_in_sentence == 1;
      if (doc.words[i].position_in_sentence > 1 && !last) all_unigram.push_back(al.words[i].surprisal);
    }
    word_unigram.push_back(std::move(wu));
    tf.tokens.insert(tf.tokens.end(), toks.begin(), toks.end());
    doc_tokens.push_back(std::move(toks));
  }
  write_token_file((fs::path(dir) / ("tokens_" + o.tokenizer_id + ".jsonl")).string(), tf);
  std::vector<double> sorted = all_unigram;
  std::sort(sorted.begin(), sorted.end());
  const double u80 = sorted[static_cast<std::size_t>(0.8 * static_cast<double>(sorted.size() - 1))];

  // human surprisal per word, spread evenly over its tokens
  std::string truth = "doc_id\ttoken_index\thuman\tunigram\trare\n";
  std::vector<std::vector<double>> human(corpus.documents.size());
  for (std::size_t d = 0; d < corpus.documents.size(); ++d) {
    const auto& doc = corpus.documents[d];
    for (std::size_t w = 0; w < doc.words.size(); ++w) {
      const double zipf_bits = o.zipf_exponent * std::log2(static_cast<double>(doc_types[d][w] + 1));
      human[d].push_back(std::max(0.5, 2.0 + 0.9 * zipf_bits + 1.5 * next_normal()));
    }
    auto with_owner = doc_tokens[d];
    for (auto& t : with_owner) t.log2prob = 0.0;
    const auto al = align_tokens_to_words(doc, with_owner);
    std::vector<int> per_word(doc.words.size(), 0);
    for (const auto& [tok, wi] : al.token_word)
      if (wi >= 0) ++per_word[static_cast<std::size_t>(wi)];
    for (const auto& [tok, wi] : al.token_word) {
      const auto& t = doc_tokens[d][static_cast<std::size_t>(tok - 1)];
      double h = 0, rare = 0;
      if (wi >= 0) {
        const auto w = static_cast<std::size_t>(wi);
        h = human[d][w] / per_word[w];
        rare = detail::sigmoid((word_unigram[d][w] - u80) / 0.5);
      }
      truth += doc.doc_id + '\t' + std::to_string(tok) + '\t' + util::fmt(h) + '\t' +
               util::fmt(-uni.log2prob(t.token_text)) + '\t' + util::fmt(rare) + '\n';
    }
  }
  util::write_file((fs::path(dir) / "truth.tsv").string(), truth);

  nlohmann::ordered_json tj;
  tj["seed"] = o.seed;
  tj["final_step"] = *std::max_element(o.checkpoints.begin(), o.checkpoints.end());
  tj["tokenizer_id"] = o.tokenizer_id;
  tj["token_file"] = "tokens_" + o.tokenizer_id + ".jsonl";
  for (const auto& v : o.variants) tj["variants"].push_back({{"model_id", v.model_id}, {"shrink", v.shrink}, {"noise", v.noise}});
  util::write_file((fs::path(dir) / "truth.json").string(), tj.dump(2) + '\n');

  // reading times from a fixed mixed model on human surprisal
  std::vector<double> subj_icpt, subj_slope;
  for (int s = 0; s < o.subjects; ++s) {
    subj_icpt.push_back(0.15 * next_normal());
    subj_slope.push_back(0.01 * next_normal());
  }
  for (int s = 0; s < o.subjects; ++s) {
    const std::string subject = std::to_string(s + 1);
    const double score = s < o.failing_subjects ? 2.0 : (next_unif() < 0.5 ? 5.0 : 6.0);
    for (std::size_t d = 0; d < corpus.documents.size(); ++d) {
      const auto& doc = corpus.documents[d];
      std::map<long, double> sent_effect;
      for (std::size_t w = 0; w < doc.words.size(); ++w) {
        const auto& word = doc.words[w];
        if (!sent_effect.count(word.sentence_id)) sent_effect[word.sentence_id] = 0.06 * next_normal();
        const double h = human[d][w];
        const double len = static_cast<double>(word.char_end - word.char_start);
        double log_rt = 5.6 + (0.045 + subj_slope[static_cast<std::size_t>(s)]) * h + 0.02 * (len - 5) +
                        0.004 * word.position_in_sentence + subj_icpt[static_cast<std::size_t>(s)] +
                        sent_effect[word.sentence_id] + 0.22 * next_normal();
        double rt = std::round(std::exp(log_rt));
        const double u = next_unif();
        if (u < 0.003) rt = 40 + std::round(40 * next_unif());
        else if (u < 0.006) rt = 3200 + std::round(2000 * next_unif());
        WordObservation obs;
        obs.subject_id = subject;
        obs.doc_id = doc.doc_id;
        obs.word_index = word.word_index;
        obs.sentence_id = word.sentence_id;
        obs.rt = rt;
        obs.subject_score = score;
        corpus.observations.push_back(std::move(obs));
      }
    }
  }
  write_corpus(corpus, (fs::path(dir) / "corpus" / "events.tsv").string());
  util::write_file((fs::path(dir) / "surpfit.ini").string(), detail::fixture_config(o));
}

inline Truth load_truth(const std::string& dir) {
  namespace fs = std::filesystem;
  Truth t;
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(util::read_file((fs::path(dir) / "truth.json").string()));
    t.seed = j.at("seed").get<std::uint64_t>();
    t.final_step = j.at("final_step").get<long>();
    t.tokenizer_id = j.at("tokenizer_id").get<std::string>();
    for (const auto& v : j.at("variants"))
      t.variants.push_back({v.at("model_id").get<std::string>(), v.at("shrink").get<double>(), v.at("noise").get<double>()});
  } catch (const nlohmann::json::exception& e) {
    throw InputError(dir + "/truth.json: " + e.what());
  }
  const std::string path = (fs::path(dir) / "truth.tsv").string();
  const std::string text = util::read_file(path);
  std::size_t lineno = 0;
  for (auto line : util::split(text, '\n')) {
    if (++lineno == 1 || line.empty()) continue;
    const auto f = util::split(line, '\t');
    auto idx = f.size() == 5 ? util::parse_int<long>(f[1]) : std::nullopt;
    if (!idx) throw InputError(path + ":" + std::to_string(lineno) + ": bad row");
    t.tokens[{std::string(f[0]), *idx}] = {util::parse_report_double(f[2]), util::parse_report_double(f[3]),
                                           util::parse_report_double(f[4])};
  }
  const auto tf = read_token_file((fs::path(dir) / j.at("token_file").get<std::string>()).string());
  for (const auto& tok : tf.tokens) t.offsets[{tok.doc_id, tok.token_index}] = tok;
  return t;
}

/// Surprisal in bits the stand-in scorer reports for one token given the
/// number of context tokens the model sees.
inline double synthetic_surprisal(const Truth& truth, std::size_t variant, long step, const std::string& doc_id,
                                  long token_index, long context_tokens) {
  const auto& v = truth.variants.at(variant);
  const auto& tt = truth.tokens.at({doc_id, token_index});
  const std::uint64_t key = util::derive_seed(
      util::derive_seed(truth.seed, util::fnv1a64(doc_id)),
      static_cast<std::uint64_t>(token_index) * 1000003ULL + variant);
  const double trained = tt.human * (1.0 - v.shrink * tt.rare) + v.noise * detail::unit_normal(key);
  double s = trained;
  if (step < truth.final_step) {
    const double a = std::log1p(static_cast<double>(step)) / std::log1p(static_cast<double>(truth.final_step));
    const double early = tt.unigram + 1.5 * detail::unit_normal(util::derive_seed(key, static_cast<std::uint64_t>(step)));
    s = a * trained + (1.0 - a) * early;
  }
  s += 2.0 * std::max(0.0, std::log2(kContextSaturation / static_cast<double>(std::max<long>(1, context_tokens))));
  return std::max(s, 0.05);
}

/// Answers every request of a manifest.
inline ScoreFile score_manifest(const Truth& truth, const ScoreManifest& m) {
  if (m.header.tokenizer_id != truth.tokenizer_id)
    throw InputError("manifest tokenizer " + m.header.tokenizer_id + " differs from fixture tokenizer " + truth.tokenizer_id);
  std::size_t variant = truth.variants.size();
  for (std::size_t i = 0; i < truth.variants.size(); ++i)
    if (truth.variants[i].model_id == m.header.model_id) variant = i;
  if (variant == truth.variants.size()) throw InputError("fixture has no variant " + m.header.model_id);
  ScoreFile f;
  f.header = m.header;
  for (const auto& r : m.requests)
    for (long t = r.target_start; t <= r.target_end; ++t) {
      auto it = truth.offsets.find({r.doc_id, t});
      if (it == truth.offsets.end())
        throw InputError("manifest requests unknown token " + r.doc_id + "#" + std::to_string(t));
      TokenScore s = it->second;
      s.condition = m.header.condition;
      s.log2prob = -synthetic_surprisal(truth, variant, m.header.checkpoint_step, r.doc_id, t, t - r.context_start);
      f.scores.push_back(std::move(s));
    }
  return f;
}

/// Answers every manifest (*.jsonl) in `manifest_dir`, writing score files of
/// the same name into `scores_dir`.
inline void score_directory(const Truth& truth, const std::string& manifest_dir, const std::string& scores_dir) {
  namespace fs = std::filesystem;
  fs::create_directories(scores_dir);
  for (const auto& e : fs::directory_iterator(manifest_dir)) {
    if (e.path().extension() != ".jsonl") continue;
    write_score_file((fs::path(scores_dir) / e.path().filename()).string(),
                     score_manifest(truth, read_manifest(e.path().string())));
  }
}

}  // namespace surpfit::synthetic
