#pragma once

// Reading-time corpora: the word-events ingestion format, exclusion filters,
// and the exploratory/held-out split.
//
// Character offsets everywhere in this library count Unicode code points of
// the UTF-8 document text, which is what tokenizer offset mappings report.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <tuple>
#include <unordered_map>
#include <utility>
#include <vector>

#include "surpfit/common.hpp"

namespace surpfit {

enum class Paradigm { self_paced, eye_tracking };

inline std::string_view to_string(Paradigm p) {
  return p == Paradigm::self_paced ? "self_paced" : "eye_tracking";
}

inline Paradigm parse_paradigm(std::string_view s) {
  if (s == "self_paced") return Paradigm::self_paced;
  if (s == "eye_tracking") return Paradigm::eye_tracking;
  throw InputError("unknown paradigm '" + std::string(s) + "' (expected self_paced or eye_tracking)");
}

struct WordToken {
  int word_index = 0;
  std::size_t char_start = 0;  // code points, inclusive
  std::size_t char_end = 0;    // code points, exclusive
  long sentence_id = 0;
  int position_in_sentence = 0;
  std::optional<std::string> screen_id;
  std::optional<std::string> line_id;
};

struct Document {
  std::string doc_id;
  std::string text;
  std::vector<WordToken> words;  // ascending word_index
  // byte offset of each code point, plus one past the end
  std::vector<std::size_t> cp_bytes;

  std::size_t length() const { return cp_bytes.empty() ? 0 : cp_bytes.size() - 1; }

  std::string_view slice(std::size_t cp_start, std::size_t cp_end) const {
    return std::string_view(text).substr(cp_bytes[cp_start], cp_bytes[cp_end] - cp_bytes[cp_start]);
  }

  std::string_view word_text(const WordToken& w) const { return slice(w.char_start, w.char_end); }

  /// Index into `words`, or -1.
  long find(int word_index) const {
    auto it = std::lower_bound(words.begin(), words.end(), word_index,
                               [](const WordToken& w, int idx) { return w.word_index < idx; });
    if (it == words.end() || it->word_index != word_index) return -1;
    return static_cast<long>(it - words.begin());
  }

  bool is_space_at(std::size_t cp) const { return util::is_space(text[cp_bytes[cp]]); }

  void set_text(std::string t) {
    text = std::move(t);
    cp_bytes.clear();
    for (std::size_t i = 0; i < text.size(); ++i)
      if ((static_cast<unsigned char>(text[i]) & 0xC0) != 0x80) cp_bytes.push_back(i);
    cp_bytes.push_back(text.size());
  }
};

struct WordObservation {
  std::string subject_id;
  std::string doc_id;
  int word_index = 0;
  long sentence_id = 0;
  std::optional<double> rt;  // ms; self-paced RT or go-past duration
  std::optional<bool> fixated;
  std::optional<int> saccade_length;  // words
  std::optional<bool> prev_fixated;
  std::optional<double> subject_score;  // comprehension questions answered correctly
};

struct Corpus {
  std::string corpus_id;
  Paradigm paradigm = Paradigm::self_paced;
  std::vector<Document> documents;
  std::vector<WordObservation> observations;

  const Document* find_document(std::string_view doc_id) const {
    for (const auto& d : documents)
      if (d.doc_id == doc_id) return &d;
    return nullptr;
  }

  const WordToken* find_word(std::string_view doc_id, int word_index) const {
    const Document* d = find_document(doc_id);
    if (!d) return nullptr;
    const long i = d->find(word_index);
    return i < 0 ? nullptr : &d->words[static_cast<std::size_t>(i)];
  }
};

enum class Exclusion {
  subject_comprehension,
  sentence_initial,
  sentence_final,
  rt_below_min,
  rt_above_max,
  unfixated,
  long_saccade,
  document_boundary,
  sentence_boundary,
  screen_boundary,
  line_boundary,
};

inline std::string_view to_string(Exclusion e) {
  switch (e) {
    case Exclusion::subject_comprehension: return "subject_below_questions";
    case Exclusion::sentence_initial: return "sentence_initial";
    case Exclusion::sentence_final: return "sentence_final";
    case Exclusion::rt_below_min: return "rt_below_min";
    case Exclusion::rt_above_max: return "rt_above_max";
    case Exclusion::unfixated: return "unfixated";
    case Exclusion::long_saccade: return "long_saccade";
    case Exclusion::document_boundary: return "document_boundary";
    case Exclusion::sentence_boundary: return "sentence_boundary";
    case Exclusion::screen_boundary: return "screen_boundary";
    case Exclusion::line_boundary: return "line_boundary";
  }
  return "unknown";
}

struct ExcludedObservation {
  WordObservation observation;
  Exclusion reason;
};

struct FilteredSet {
  std::string corpus_id;
  Paradigm paradigm = Paradigm::self_paced;
  std::vector<WordObservation> observations;
  std::vector<double> log_rt;  // natural log, parallel to observations
  std::vector<ExcludedObservation> exclusion_log;
};

// ---------------------------------------------------------------------------
// Word-events format

inline constexpr std::string_view kWordEventColumns[] = {
    "subject_id", "doc_id",  "word_index", "sentence_id", "position_in_sentence",
    "char_start", "char_end", "screen_id", "line_id",     "rt_ms",
    "fixated",    "saccade_len", "prev_fixated", "subject_score"};

namespace detail {

inline std::string row_error(const std::string& path, std::size_t line, const std::string& msg) {
  return path + ":" + std::to_string(line) + ": " + msg;
}

inline bool same_word(const WordToken& a, const WordToken& b) {
  return a.char_start == b.char_start && a.char_end == b.char_end && a.sentence_id == b.sentence_id &&
         a.position_in_sentence == b.position_in_sentence && a.screen_id == b.screen_id &&
         a.line_id == b.line_id;
}

}  // namespace detail

/// Parses a word-events TSV plus its `<doc_id>.txt` sidecars (same directory).
/// Throws InputError with the offending line number on any malformed row.
inline Corpus parse_corpus(const std::string& path, Paradigm paradigm, std::string corpus_id = {}) {
  namespace fs = std::filesystem;
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open word-events file " + path);
  const fs::path dir = fs::path(path).parent_path();

  Corpus corpus;
  corpus.corpus_id = corpus_id.empty() ? fs::path(path).stem().string() : std::move(corpus_id);
  corpus.paradigm = paradigm;

  std::string line;
  std::size_t lineno = 0;
  if (!std::getline(in, line)) throw InputError(path + ": empty file (missing header)");
  ++lineno;
  {
    const auto cols = util::split(util::strip_cr(line), '\t');
    bool ok = cols.size() == std::size(kWordEventColumns);
    for (std::size_t i = 0; ok && i < cols.size(); ++i) ok = cols[i] == kWordEventColumns[i];
    if (!ok) throw InputError(detail::row_error(path, 1, "header does not match the word-events column list"));
  }

  std::map<std::string, std::size_t> doc_slot;
  std::vector<std::map<int, std::pair<WordToken, std::size_t>>> doc_words;
  std::set<std::tuple<std::string, std::string, int>> seen;

  auto err = [&](const std::string& msg) { return InputError(detail::row_error(path, lineno, msg)); };

  while (std::getline(in, line)) {
    ++lineno;
    const auto row = util::strip_cr(line);
    if (util::trim(row).empty()) continue;
    const auto f = util::split(row, '\t');
    if (f.size() != std::size(kWordEventColumns))
      throw err("expected " + std::to_string(std::size(kWordEventColumns)) + " fields, got " +
                std::to_string(f.size()));

    WordObservation obs;
    obs.subject_id = std::string(f[0]);
    obs.doc_id = std::string(f[1]);
    if (obs.subject_id.empty()) throw err("empty subject_id");
    if (obs.doc_id.empty()) throw err("empty doc_id");
    auto wi = util::parse_int<int>(f[2]);
    auto sid = util::parse_int<long>(f[3]);
    auto pos = util::parse_int<int>(f[4]);
    auto cs = util::parse_int<long>(f[5]);
    auto ce = util::parse_int<long>(f[6]);
    if (!wi) throw err("bad word_index '" + std::string(f[2]) + "'");
    if (!sid) throw err("bad sentence_id '" + std::string(f[3]) + "'");
    if (!pos || *pos < 1) throw err("bad position_in_sentence '" + std::string(f[4]) + "'");
    if (!cs || !ce || *cs < 0 || *ce <= *cs) throw err("bad character span");
    obs.word_index = *wi;
    obs.sentence_id = *sid;

    WordToken word;
    word.word_index = *wi;
    word.sentence_id = *sid;
    word.position_in_sentence = *pos;
    word.char_start = static_cast<std::size_t>(*cs);
    word.char_end = static_cast<std::size_t>(*ce);
    if (!f[7].empty()) word.screen_id = std::string(f[7]);
    if (!f[8].empty()) word.line_id = std::string(f[8]);

    if (!f[9].empty()) {
      auto rt = util::parse_double(f[9]);
      if (!rt || !std::isfinite(*rt) || *rt <= 0) throw err("rt_ms must be a positive number");
      obs.rt = *rt;
    }
    const bool has_et = !f[10].empty() || !f[11].empty() || !f[12].empty();
    if (paradigm == Paradigm::self_paced) {
      if (has_et) throw err("eye-tracking fields present in a self-paced corpus");
      if (!obs.rt) throw err("missing rt_ms");
      auto sc = util::parse_double(f[13]);
      if (!sc) throw err("missing or bad subject_score");
      obs.subject_score = *sc;
    } else {
      if (!f[13].empty()) throw err("subject_score present in an eye-tracking corpus");
      auto fx = util::parse_bool(f[10]);
      if (!fx) throw err("missing or bad fixated flag");
      obs.fixated = *fx;
      if (!f[11].empty()) {
        auto sl = util::parse_int<int>(f[11]);
        if (!sl || *sl < 0) throw err("bad saccade_len");
        obs.saccade_length = *sl;
      }
      if (!f[12].empty()) {
        auto pf = util::parse_bool(f[12]);
        if (!pf) throw err("bad prev_fixated");
        obs.prev_fixated = *pf;
      }
      if (*obs.fixated && (!obs.rt || !obs.saccade_length || !obs.prev_fixated))
        throw err("fixated word needs rt_ms, saccade_len and prev_fixated");
    }

    if (!seen.emplace(obs.subject_id, obs.doc_id, obs.word_index).second)
      throw err("duplicate observation for subject " + obs.subject_id + ", doc " + obs.doc_id + ", word " +
                std::to_string(obs.word_index));

    auto [it, inserted] = doc_slot.try_emplace(obs.doc_id, corpus.documents.size());
    if (inserted) {
      Document doc;
      doc.doc_id = obs.doc_id;
      const fs::path text_path = dir / (obs.doc_id + ".txt");
      if (!fs::exists(text_path)) throw err("missing document text " + text_path.string());
      doc.set_text(util::read_file(text_path.string()));
      corpus.documents.push_back(std::move(doc));
      doc_words.emplace_back();
    }
    const Document& doc = corpus.documents[it->second];
    if (word.char_end > doc.length())
      throw err("span (" + std::to_string(word.char_start) + "," + std::to_string(word.char_end) +
                ") outside text of " + doc.doc_id + " (length " + std::to_string(doc.length()) + ")");
    auto& words = doc_words[it->second];
    auto [wit, fresh] = words.try_emplace(word.word_index, word, lineno);
    if (!fresh && !detail::same_word(wit->second.first, word))
      throw err("word " + std::to_string(word.word_index) + " metadata disagrees with line " +
                std::to_string(wit->second.second));

    corpus.observations.push_back(std::move(obs));
  }

  for (std::size_t d = 0; d < corpus.documents.size(); ++d) {
    Document& doc = corpus.documents[d];
    for (auto& [idx, entry] : doc_words[d]) doc.words.push_back(entry.first);
    for (std::size_t i = 0; i < doc.words.size(); ++i) {
      const WordToken& w = doc.words[i];
      const std::size_t at = doc_words[d].at(w.word_index).second;
      if (i > 0) {
        const WordToken& prev = doc.words[i - 1];
        if (w.char_start < prev.char_end)
          throw InputError(detail::row_error(path, at, "span overlaps or precedes word " +
                                                           std::to_string(prev.word_index) + " in " + doc.doc_id));
      }
      const bool new_sentence = i == 0 || doc.words[i - 1].sentence_id != w.sentence_id;
      const int expected = new_sentence ? 1 : doc.words[i - 1].position_in_sentence + 1;
      if (w.position_in_sentence != expected)
        throw InputError(detail::row_error(path, at, "position_in_sentence " + std::to_string(w.position_in_sentence) +
                                                         ", expected " + std::to_string(expected)));
    }
  }
  return corpus;
}

/// Writes a corpus back out in the word-events format (text sidecars included).
inline void write_corpus(const Corpus& corpus, const std::string& events_path) {
  namespace fs = std::filesystem;
  const fs::path dir = fs::path(events_path).parent_path();
  if (!dir.empty()) fs::create_directories(dir);
  std::string out;
  for (std::size_t i = 0; i < std::size(kWordEventColumns); ++i) {
    if (i) out += '\t';
    out += kWordEventColumns[i];
  }
  out += '\n';
  auto num = [](double v) {
    if (v == std::floor(v) && std::abs(v) < 1e15) return std::to_string(static_cast<long long>(v));
    return util::fmt(v);
  };
  for (const auto& o : corpus.observations) {
    const WordToken* w = corpus.find_word(o.doc_id, o.word_index);
    if (!w) throw DomainError("observation refers to unknown word");
    out += o.subject_id + '\t' + o.doc_id + '\t' + std::to_string(o.word_index) + '\t' +
           std::to_string(w->sentence_id) + '\t' + std::to_string(w->position_in_sentence) + '\t' +
           std::to_string(w->char_start) + '\t' + std::to_string(w->char_end) + '\t' +
           w->screen_id.value_or("") + '\t' + w->line_id.value_or("") + '\t' + (o.rt ? num(*o.rt) : "") + '\t' +
           (o.fixated ? (*o.fixated ? "1" : "0") : "") + '\t' +
           (o.saccade_length ? std::to_string(*o.saccade_length) : "") + '\t' +
           (o.prev_fixated ? (*o.prev_fixated ? "1" : "0") : "") + '\t' +
           (o.subject_score ? num(*o.subject_score) : "") + '\n';
  }
  util::write_file(events_path, out);
  for (const auto& d : corpus.documents) util::write_file((dir / (d.doc_id + ".txt")).string(), d.text);
}

// ---------------------------------------------------------------------------
// Filters

struct BoundaryFlags {
  bool doc_start = false, doc_end = false;
  bool sentence_start = false, sentence_end = false;
  bool screen_start = false, screen_end = false;
  bool line_start = false, line_end = false;
};

namespace detail {

inline bool changes(const std::optional<std::string>& a, const std::optional<std::string>& b) {
  return a && b && *a != *b;
}

}  // namespace detail

/// Boundary flags for every word of a document (parallel to doc.words).
/// Missing screen/line ids never create a boundary.
inline std::vector<BoundaryFlags> boundary_flags(const Document& doc) {
  const std::size_t n = doc.words.size();
  std::vector<BoundaryFlags> flags(n);
  for (std::size_t i = 0; i < n; ++i) {
    const WordToken& w = doc.words[i];
    const WordToken* prev = i > 0 ? &doc.words[i - 1] : nullptr;
    const WordToken* next = i + 1 < n ? &doc.words[i + 1] : nullptr;
    BoundaryFlags& b = flags[i];
    b.doc_start = prev == nullptr;
    b.doc_end = next == nullptr;
    b.sentence_start = !prev || prev->sentence_id != w.sentence_id;
    b.sentence_end = !next || next->sentence_id != w.sentence_id;
    b.screen_start = w.screen_id && (!prev || detail::changes(prev->screen_id, w.screen_id));
    b.screen_end = w.screen_id && (!next || detail::changes(w.screen_id, next->screen_id));
    b.line_start = w.line_id && (!prev || detail::changes(prev->line_id, w.line_id));
    b.line_end = w.line_id && (!next || detail::changes(w.line_id, next->line_id));
  }
  return flags;
}

namespace detail {

using FlagTable = std::unordered_map<std::string, std::pair<const Document*, std::vector<BoundaryFlags>>>;

inline FlagTable flag_table(const Corpus& corpus) {
  FlagTable t;
  for (const auto& d : corpus.documents) t.emplace(d.doc_id, std::make_pair(&d, boundary_flags(d)));
  return t;
}

inline const BoundaryFlags& flags_for(const FlagTable& t, const WordObservation& o) {
  auto it = t.find(o.doc_id);
  if (it == t.end()) throw DomainError("observation refers to unknown document " + o.doc_id);
  const long i = it->second.first->find(o.word_index);
  if (i < 0) throw DomainError("observation refers to unknown word " + std::to_string(o.word_index));
  return it->second.second[static_cast<std::size_t>(i)];
}

template <typename Reason>
FilteredSet run_filter(const Corpus& corpus, Reason&& reason_for) {
  FilteredSet fs;
  fs.corpus_id = corpus.corpus_id;
  fs.paradigm = corpus.paradigm;
  for (const auto& o : corpus.observations) {
    if (std::optional<Exclusion> r = reason_for(o)) {
      fs.exclusion_log.push_back({o, *r});
    } else {
      fs.observations.push_back(o);
      fs.log_rt.push_back(std::log(*o.rt));
    }
  }
  return fs;
}

}  // namespace detail

/// Self-paced reading exclusions. RT bounds are strict: rt == min_rt and
/// rt == max_rt are retained.
inline FilteredSet apply_spr_filters(const Corpus& corpus, double min_rt = 100, double max_rt = 3000,
                                     double min_questions_correct = 4) {
  if (corpus.paradigm != Paradigm::self_paced)
    throw DomainError("paradigm mismatch: self-paced filters applied to eye-tracking corpus " + corpus.corpus_id);
  const auto table = detail::flag_table(corpus);
  return detail::run_filter(corpus, [&](const WordObservation& o) -> std::optional<Exclusion> {
    const BoundaryFlags& b = detail::flags_for(table, o);
    if (o.subject_score.value_or(0) < min_questions_correct) return Exclusion::subject_comprehension;
    if (b.sentence_start) return Exclusion::sentence_initial;
    if (b.sentence_end) return Exclusion::sentence_final;
    if (*o.rt < min_rt) return Exclusion::rt_below_min;
    if (*o.rt > max_rt) return Exclusion::rt_above_max;
    return std::nullopt;
  });
}

/// Eye-tracking exclusions (go-past durations computed upstream).
inline FilteredSet apply_et_filters(const Corpus& corpus, int max_saccade = 4) {
  if (corpus.paradigm != Paradigm::eye_tracking)
    throw DomainError("paradigm mismatch: eye-tracking filters applied to self-paced corpus " + corpus.corpus_id);
  const auto table = detail::flag_table(corpus);
  return detail::run_filter(corpus, [&](const WordObservation& o) -> std::optional<Exclusion> {
    const BoundaryFlags& b = detail::flags_for(table, o);
    if (!o.fixated.value_or(false)) return Exclusion::unfixated;
    if (*o.saccade_length > max_saccade) return Exclusion::long_saccade;
    if (b.doc_start || b.doc_end) return Exclusion::document_boundary;
    if (b.sentence_start || b.sentence_end) return Exclusion::sentence_boundary;
    if (b.screen_start || b.screen_end) return Exclusion::screen_boundary;
    if (b.line_start || b.line_end) return Exclusion::line_boundary;
    return std::nullopt;
  });
}

inline FilteredSet apply_filters(const Corpus& corpus) {
  return corpus.paradigm == Paradigm::self_paced ? apply_spr_filters(corpus) : apply_et_filters(corpus);
}

// ---------------------------------------------------------------------------
// Exploratory split

/// Integer code of a subject id: its decimal value when the id is all digits,
/// else the 32-bit FNV-1a hash of its bytes. Only parity matters downstream, so
/// very long digit strings keep their last 18 digits.
inline long long subject_code(std::string_view subject_id) {
  if (subject_id.empty()) throw InputError("subject id '' cannot be mapped to an integer");
  const bool digits = std::all_of(subject_id.begin(), subject_id.end(), [](char c) { return c >= '0' && c <= '9'; });
  if (digits) {
    const auto tail = subject_id.size() > 18 ? subject_id.substr(subject_id.size() - 18) : subject_id;
    return *util::parse_int<long long>(tail);
  }
  return static_cast<long long>(util::fnv1a32(subject_id));
}

inline bool is_exploratory(std::string_view subject_id, long sentence_id) {
  const long long sum = subject_code(subject_id) + sentence_id;
  return sum % 2 == 0;
}

/// Splits into (exploratory, held-out) by parity of subject code + sentence id.
inline std::pair<FilteredSet, FilteredSet> split_exploratory(const FilteredSet& fs) {
  std::vector<std::string> bad;
  for (const auto& o : fs.observations)
    if (o.subject_id.empty()) bad.push_back(o.subject_id);
  if (!bad.empty()) throw InputError("unmappable subject id(s): '' x" + std::to_string(bad.size()));

  std::pair<FilteredSet, FilteredSet> out;
  for (auto* part : {&out.first, &out.second}) {
    part->corpus_id = fs.corpus_id;
    part->paradigm = fs.paradigm;
  }
  for (std::size_t i = 0; i < fs.observations.size(); ++i) {
    const auto& o = fs.observations[i];
    FilteredSet& dst = is_exploratory(o.subject_id, o.sentence_id) ? out.first : out.second;
    dst.observations.push_back(o);
    dst.log_rt.push_back(fs.log_rt[i]);
  }
  return out;
}

}  // namespace surpfit
