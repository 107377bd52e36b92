#pragma once

// Scoring protocol: which token windows the external LM scorer evaluates, the
// JSON-lines manifest/score-file contract, subword-to-word alignment, and
// corpus perplexity.
//
// Token indices are 1-based within a document. Token 1 is never scored.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "surpfit/common.hpp"
#include "surpfit/corpus.hpp"

namespace surpfit {

/// Context condition: full (sliding windows) or the most recent n tokens only.
struct Condition {
  int recent = 0;  // 0 means full context

  bool is_full() const { return recent == 0; }
  std::string name() const { return is_full() ? "full" : "recent_" + std::to_string(recent); }

  static Condition full() { return {}; }
  static Condition recent_n(int n) {
    if (n <= 0) throw DomainError("recent_n needs n > 0");
    return Condition{n};
  }
  static Condition parse(std::string_view s) {
    if (s == "full") return full();
    if (s.substr(0, 7) == "recent_") {
      if (auto n = util::parse_int<int>(s.substr(7)); n && *n > 0) return recent_n(*n);
    }
    throw InputError("bad condition '" + std::string(s) + "'");
  }
  friend bool operator==(const Condition&, const Condition&) = default;
  friend auto operator<=>(const Condition&, const Condition&) = default;
};

struct ScoreRequest {
  std::string doc_id;
  long context_start = 1;  // inclusive
  long target_start = 2;
  long target_end = 2;  // inclusive
  Condition condition;

  friend bool operator==(const ScoreRequest&, const ScoreRequest&) = default;
};

struct ScoreHeader {
  std::string model_id;
  long checkpoint_step = 0;
  std::string tokenizer_id;
  int window_size = 0;
  Condition condition;
  nlohmann::ordered_json metadata;  // opaque model hyperparameters, passed through
};

struct ScoreManifest {
  ScoreHeader header;
  std::vector<ScoreRequest> requests;
};

struct TokenScore {
  std::string doc_id;
  long token_index = 0;
  std::string token_text;
  std::size_t char_start = 0;
  std::size_t char_end = 0;
  std::optional<double> log2prob;  // absent for unscored tokens
  Condition condition;

  double surprisal() const { return -*log2prob; }
};

struct ScoreFile {
  ScoreHeader header;
  std::vector<TokenScore> scores;
};

struct WordSurprisal {
  std::string doc_id;
  int word_index = 0;
  double surprisal = 0;  // bits
  int n_subword_tokens = 0;
  bool complete = false;
};

// ---------------------------------------------------------------------------
// Planning

/// Sliding windows of W tokens; each window after the first starts at the
/// previous window's midpoint and targets only tokens not yet scored.
inline std::vector<ScoreRequest> plan_windows(long token_count, int window) {
  if (window < 2 || window % 2 != 0)
    throw DomainError("window size must be even and >= 2, got " + std::to_string(window));
  if (token_count < 1) throw DomainError("token_count must be >= 1");
  std::vector<ScoreRequest> out;
  const long half = window / 2;
  long ctx = 1;
  long scored_up_to = 1;  // token 1 is context only
  while (scored_up_to < token_count) {
    const long end = std::min<long>(ctx + window - 1, token_count);
    out.push_back({{}, ctx, scored_up_to + 1, end, Condition::full()});
    scored_up_to = end;
    ctx += half;
  }
  return out;
}

class InsufficientContext : public DomainError {
 public:
  using DomainError::DomainError;
};

/// Request scoring `target_index` from only its n preceding tokens.
inline ScoreRequest plan_occlusion(long target_index, int n) {
  if (n <= 0) throw DomainError("occlusion context must be positive");
  if (target_index <= n)
    throw InsufficientContext("insufficient context: token " + std::to_string(target_index) + " has fewer than " +
                              std::to_string(n) + " preceding tokens");
  return {{}, target_index - n, target_index, target_index, Condition::recent_n(n)};
}

/// Every token index that is a target of some request, with its multiplicity.
inline std::map<long, int> target_multiplicity(const std::vector<ScoreRequest>& reqs) {
  std::map<long, int> m;
  for (const auto& r : reqs)
    for (long t = r.target_start; t <= r.target_end; ++t) ++m[t];
  return m;
}

// ---------------------------------------------------------------------------
// JSON-lines contract

namespace detail {

inline nlohmann::ordered_json header_json(const ScoreHeader& h) {
  nlohmann::ordered_json j;
  j["model_id"] = h.model_id;
  j["checkpoint_step"] = h.checkpoint_step;
  j["tokenizer_id"] = h.tokenizer_id;
  j["window_size"] = h.window_size;
  j["condition"] = h.condition.name();
  if (!h.metadata.is_null() && !h.metadata.empty()) j["metadata"] = h.metadata;
  return j;
}

template <typename T>
T field(const nlohmann::json& j, const char* key, const std::string& where) {
  if (!j.contains(key)) throw InputError(where + ": missing field '" + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw InputError(where + ": field '" + key + "' has the wrong type");
  }
}

inline ScoreHeader parse_header(const nlohmann::json& j, const std::string& where) {
  if (!j.is_object()) throw InputError(where + ": header is not an object");
  ScoreHeader h;
  h.model_id = field<std::string>(j, "model_id", where);
  h.checkpoint_step = field<long>(j, "checkpoint_step", where);
  h.tokenizer_id = field<std::string>(j, "tokenizer_id", where);
  h.window_size = field<int>(j, "window_size", where);
  h.condition = Condition::parse(field<std::string>(j, "condition", where));
  if (j.contains("metadata")) h.metadata = j.at("metadata");
  return h;
}

inline nlohmann::json parse_line(const std::string& line, const std::string& where) {
  try {
    return nlohmann::json::parse(line);
  } catch (const nlohmann::json::parse_error& e) {
    throw InputError(where + ": invalid JSON (" + e.what() + ")");
  }
}

template <typename OnRow>
void read_jsonl(const std::string& path, nlohmann::json& header, OnRow&& on_row) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open " + path);
  std::string line;
  std::size_t lineno = 0;
  bool have_header = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (util::trim(line).empty()) continue;
    const std::string where = path + ":" + std::to_string(lineno);
    auto j = parse_line(line, where);
    if (!have_header) {
      header = std::move(j);
      have_header = true;
    } else {
      on_row(j, where);
    }
  }
  if (!have_header) throw InputError(path + ": empty file (missing header line)");
}

inline TokenScore parse_token_row(const nlohmann::json& j, const std::string& where, bool need_prob) {
  if (!j.is_object()) throw InputError(where + ": row is not an object");
  TokenScore t;
  t.doc_id = field<std::string>(j, "doc_id", where);
  t.token_index = field<long>(j, "token_index", where);
  const long cs = field<long>(j, "char_start", where);
  const long ce = field<long>(j, "char_end", where);
  if (cs < 0 || ce < cs) throw InputError(where + ": bad character offsets");
  t.char_start = static_cast<std::size_t>(cs);
  t.char_end = static_cast<std::size_t>(ce);
  t.token_text = field<std::string>(j, "token_text", where);
  if (t.token_index < 1) throw InputError(where + ": token_index must be >= 1");
  if (j.contains("log2prob") && !j.at("log2prob").is_null()) {
    const double lp = field<double>(j, "log2prob", where);
    if (!std::isfinite(lp) || lp > 0) throw InputError(where + ": log2prob must be finite and <= 0");
    t.log2prob = lp;
  } else if (need_prob && t.token_index != 1) {
    throw InputError(where + ": missing log2prob");
  }
  return t;
}

}  // namespace detail

inline std::string manifest_to_string(const ScoreManifest& m) {
  std::string out = detail::header_json(m.header).dump() + '\n';
  for (const auto& r : m.requests) {
    nlohmann::ordered_json j;
    j["doc_id"] = r.doc_id;
    j["context_start"] = r.context_start;
    j["target_start"] = r.target_start;
    j["target_end"] = r.target_end;
    j["condition"] = r.condition.name();
    out += j.dump() + '\n';
  }
  return out;
}

inline void write_manifest(const std::string& path, const ScoreManifest& m) {
  util::write_file(path, manifest_to_string(m));
}

inline ScoreManifest read_manifest(const std::string& path) {
  ScoreManifest m;
  nlohmann::json header;
  detail::read_jsonl(path, header, [&](const nlohmann::json& j, const std::string& where) {
    ScoreRequest r;
    r.doc_id = detail::field<std::string>(j, "doc_id", where);
    r.context_start = detail::field<long>(j, "context_start", where);
    r.target_start = detail::field<long>(j, "target_start", where);
    r.target_end = detail::field<long>(j, "target_end", where);
    r.condition = Condition::parse(detail::field<std::string>(j, "condition", where));
    if (!(1 <= r.context_start && r.context_start <= r.target_start && r.target_start <= r.target_end))
      throw InputError(where + ": request violates context_start <= target_start <= target_end");
    m.requests.push_back(std::move(r));
  });
  m.header = detail::parse_header(header, path + ":1");
  for (const auto& r : m.requests)
    if (r.condition != m.header.condition) throw InputError(path + ": request condition differs from header");
  return m;
}

inline std::string score_file_to_string(const ScoreFile& f) {
  std::string out = detail::header_json(f.header).dump() + '\n';
  for (const auto& t : f.scores) {
    nlohmann::ordered_json j;
    j["doc_id"] = t.doc_id;
    j["token_index"] = t.token_index;
    j["char_start"] = t.char_start;
    j["char_end"] = t.char_end;
    j["token_text"] = t.token_text;
    if (t.log2prob)
      j["log2prob"] = *t.log2prob;
    else
      j["log2prob"] = nullptr;
    out += j.dump() + '\n';
  }
  return out;
}

inline void write_score_file(const std::string& path, const ScoreFile& f) {
  util::write_file(path, score_file_to_string(f));
}

inline ScoreFile read_score_file(const std::string& path) {
  ScoreFile f;
  nlohmann::json header;
  detail::read_jsonl(path, header, [&](const nlohmann::json& j, const std::string& where) {
    f.scores.push_back(detail::parse_token_row(j, where, true));
  });
  f.header = detail::parse_header(header, path + ":1");
  for (auto& t : f.scores) t.condition = f.header.condition;
  return f;
}

/// Token-offset file: a score file whose rows may omit log2prob and whose
/// header only needs tokenizer_id. A full-condition score file is accepted as-is.
struct TokenFile {
  std::string tokenizer_id;
  std::vector<TokenScore> tokens;
};

inline TokenFile read_token_file(const std::string& path) {
  TokenFile f;
  nlohmann::json header;
  detail::read_jsonl(path, header, [&](const nlohmann::json& j, const std::string& where) {
    f.tokens.push_back(detail::parse_token_row(j, where, false));
  });
  f.tokenizer_id = detail::field<std::string>(header, "tokenizer_id", path + ":1");
  return f;
}

inline void write_token_file(const std::string& path, const TokenFile& f) {
  nlohmann::ordered_json h;
  h["tokenizer_id"] = f.tokenizer_id;
  std::string out = h.dump() + '\n';
  for (const auto& t : f.tokens) {
    nlohmann::ordered_json j;
    j["doc_id"] = t.doc_id;
    j["token_index"] = t.token_index;
    j["char_start"] = t.char_start;
    j["char_end"] = t.char_end;
    j["token_text"] = t.token_text;
    out += j.dump() + '\n';
  }
  util::write_file(path, out);
}

/// Checks that the score file answers exactly the manifest's targets.
inline void check_scores_match_manifest(const ScoreManifest& m, const ScoreFile& f, const std::string& label) {
  const auto& a = m.header;
  const auto& b = f.header;
  if (a.model_id != b.model_id || a.checkpoint_step != b.checkpoint_step || a.tokenizer_id != b.tokenizer_id ||
      a.window_size != b.window_size || a.condition != b.condition)
    throw InputError(label + ": score header does not match manifest header");
  std::set<std::pair<std::string, long>> want, got;
  for (const auto& r : m.requests)
    for (long t = r.target_start; t <= r.target_end; ++t) want.emplace(r.doc_id, t);
  for (const auto& t : f.scores)
    if (t.log2prob) {
      if (!got.emplace(t.doc_id, t.token_index).second)
        throw InputError(label + ": token " + t.doc_id + "#" + std::to_string(t.token_index) + " scored twice");
    }
  for (const auto& k : want)
    if (!got.count(k))
      throw InputError(label + ": missing score for " + k.first + "#" + std::to_string(k.second));
  for (const auto& k : got)
    if (!want.count(k))
      throw InputError(label + ": score for unplanned token " + k.first + "#" + std::to_string(k.second));
}

// ---------------------------------------------------------------------------
// Alignment

struct Alignment {
  std::vector<WordSurprisal> words;  // one per document word, in word order
  double unattached_surprisal = 0;   // whitespace-only tokens after the last word
  std::vector<long> spanning_tokens;  // tokens whose text reaches into a second word
  std::vector<std::pair<long, long>> token_word;  // (token index, position in doc.words or -1)
};

/// Assigns each scored token to the word containing its first non-whitespace
/// character; whitespace-only tokens go to the next word. A word is complete
/// when every non-whitespace character of it is covered by a scored token.
inline Alignment align_tokens_to_words(const Document& doc, std::vector<TokenScore> scores) {
  std::sort(scores.begin(), scores.end(),
            [](const TokenScore& a, const TokenScore& b) { return a.token_index < b.token_index; });
  const std::size_t len = doc.length();
  std::vector<char> covered(len, 0);

  Alignment out;
  out.words.reserve(doc.words.size());
  for (const auto& w : doc.words) out.words.push_back({doc.doc_id, w.word_index, 0.0, 0, false});

  auto word_at = [&](std::size_t cp) -> long {
    auto it = std::upper_bound(doc.words.begin(), doc.words.end(), cp,
                               [](std::size_t c, const WordToken& w) { return c < w.char_start; });
    if (it == doc.words.begin()) return -1;
    --it;
    return cp < it->char_end ? static_cast<long>(it - doc.words.begin()) : -1;
  };
  auto next_word_from = [&](std::size_t cp) -> long {
    auto it = std::lower_bound(doc.words.begin(), doc.words.end(), cp,
                               [](const WordToken& w, std::size_t c) { return w.char_start < c; });
    return it == doc.words.end() ? -1 : static_cast<long>(it - doc.words.begin());
  };

  const TokenScore* prev = nullptr;
  for (const auto& t : scores) {
    if (t.doc_id != doc.doc_id) throw DomainError("token from document " + t.doc_id + " aligned against " + doc.doc_id);
    if (t.char_end > len)
      throw InputError(doc.doc_id + ": token " + std::to_string(t.token_index) + " span (" +
                       std::to_string(t.char_start) + "," + std::to_string(t.char_end) + ") outside text");
    if (prev) {
      if (prev->token_index == t.token_index)
        throw InputError(doc.doc_id + ": duplicate token index " + std::to_string(t.token_index));
      if (t.char_start < prev->char_end)
        throw InputError(doc.doc_id + ": overlapping token spans (" + std::to_string(prev->char_start) + "," +
                         std::to_string(prev->char_end) + ") and (" + std::to_string(t.char_start) + "," +
                         std::to_string(t.char_end) + ")");
    }
    prev = &t;
    if (!t.log2prob) continue;

    std::size_t first = t.char_start;
    while (first < t.char_end && doc.is_space_at(first)) ++first;
    long wi;
    if (first == t.char_end) {
      wi = next_word_from(t.char_end);
      if (wi < 0) {
        out.unattached_surprisal += t.surprisal();
        out.token_word.emplace_back(t.token_index, -1);
        continue;
      }
    } else {
      wi = word_at(first);
      if (wi < 0)
        throw InputError(doc.doc_id + ": token " + std::to_string(t.token_index) + " at (" +
                         std::to_string(t.char_start) + "," + std::to_string(t.char_end) +
                         ") starts outside every word span");
      for (std::size_t c = doc.words[static_cast<std::size_t>(wi)].char_end; c < t.char_end; ++c) {
        if (!doc.is_space_at(c) && word_at(c) >= 0) {
          out.spanning_tokens.push_back(t.token_index);
          break;
        }
      }
    }
    for (std::size_t c = t.char_start; c < t.char_end; ++c) covered[c] = 1;
    out.token_word.emplace_back(t.token_index, wi);
    auto& ws = out.words[static_cast<std::size_t>(wi)];
    ws.surprisal += t.surprisal();
    ++ws.n_subword_tokens;
  }

  for (std::size_t i = 0; i < doc.words.size(); ++i) {
    const auto& w = doc.words[i];
    bool complete = true;
    for (std::size_t c = w.char_start; c < w.char_end && complete; ++c)
      complete = doc.is_space_at(c) || covered[c];
    out.words[i].complete = complete;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Perplexity

/// Mean token surprisal in bits over all scored tokens (full condition only).
inline double corpus_log2_perplexity(const std::vector<TokenScore>& scores) {
  double sum = 0;
  std::size_t n = 0;
  std::optional<Condition> cond;
  for (const auto& t : scores) {
    if (cond && *cond != t.condition) throw DomainError("perplexity over mixed conditions");
    cond = t.condition;
    if (!t.log2prob) continue;
    sum += t.surprisal();
    ++n;
  }
  if (n == 0) throw DomainError("perplexity of an empty score set");
  if (!cond->is_full()) throw DomainError("perplexity needs full-condition scores, got " + cond->name());
  return sum / static_cast<double>(n);
}

inline double corpus_perplexity(const std::vector<TokenScore>& scores) {
  return std::exp2(corpus_log2_perplexity(scores));
}

}  // namespace surpfit
