#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace atelier {

// Word-level tokenizer. Text is split on single spaces; decode joins with
// single spaces, so every text produced by the corpus templates round-trips.
// Ids 0..5 are the special tokens from special_tokens.hpp.
class Tokenizer {
 public:
  // Vocabulary closed over the description, critique and rubric templates.
  static Tokenizer build_default();
  static Tokenizer from_words(std::vector<std::string> words);

  // One token per line, id = line number.
  static Tokenizer load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  // Unknown words map to [UNK].
  std::vector<int> encode(std::string_view text) const;
  // Special tokens come out in their bracketed form; callers strip EOS.
  std::string decode(std::span<const int> ids) const;

  int id_of(std::string_view word) const;  // [UNK] when absent
  const std::string& word(int id) const;
  std::size_t size() const { return words_.size(); }
  const std::vector<std::string>& words() const { return words_; }

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, int> index_;
};

}  // namespace atelier
