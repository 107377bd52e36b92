#pragma once

#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "surpfit/common.hpp"
#include "surpfit/corpus.hpp"

namespace testing_util {

namespace fs = std::filesystem;

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    std::random_device rd;
    path_ = fs::temp_directory_path() /
            ("surpfit_" + tag + "_" + std::to_string(rd()) + "_" + std::to_string(counter++));
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  std::string file(const std::string& name) const { return (path_ / name).string(); }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

/// Document whose words are the space-separated pieces of `text`; `sentence_of`
/// gives the sentence id per word.
inline surpfit::Document make_document(const std::string& doc_id, const std::string& text,
                                       const std::vector<long>& sentence_of) {
  surpfit::Document d;
  d.doc_id = doc_id;
  d.set_text(text);
  std::size_t cp = 0, w = 0;
  const std::size_t len = d.length();
  while (cp < len) {
    while (cp < len && d.is_space_at(cp)) ++cp;
    if (cp >= len) break;
    std::size_t end = cp;
    while (end < len && !d.is_space_at(end)) ++end;
    surpfit::WordToken t;
    t.word_index = static_cast<int>(w + 1);
    t.char_start = cp;
    t.char_end = end;
    t.sentence_id = sentence_of.at(w);
    t.position_in_sentence = (w > 0 && sentence_of[w - 1] == t.sentence_id) ? d.words.back().position_in_sentence + 1 : 1;
    d.words.push_back(t);
    ++w;
    cp = end;
  }
  return d;
}

}  // namespace testing_util
