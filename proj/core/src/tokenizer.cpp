#include "atelier/tokenizer.hpp"

#include <algorithm>
#include <fstream>

#include "atelier/corpus.hpp"
#include "atelier/errors.hpp"
#include "atelier/special_tokens.hpp"

namespace atelier {

namespace {

const std::vector<std::string>& special_words() {
  static const std::vector<std::string> words = {"[PAD]", "[BOS]", "[EOS]", "[UNK]", "[SCORING]", "[CRITIQUE]"};
  return words;
}

void split_into(std::string_view text, std::vector<std::string>& out) {
  std::size_t pos = 0;
  while (pos < text.size()) {
    const std::size_t next = text.find(' ', pos);
    const std::size_t end = next == std::string_view::npos ? text.size() : next;
    if (end > pos) out.emplace_back(text.substr(pos, end - pos));
    pos = end + 1;
  }
}

}  // namespace

Tokenizer Tokenizer::from_words(std::vector<std::string> words) {
  Tokenizer tok;
  const auto& specials = special_words();
  if (words.size() < specials.size() || !std::equal(specials.begin(), specials.end(), words.begin())) {
    throw FormatError("vocabulary must start with the special tokens [PAD] [BOS] [EOS] [UNK] [SCORING] [CRITIQUE]");
  }
  for (std::size_t i = 0; i < words.size(); ++i) {
    if (words[i].empty() || words[i].find(' ') != std::string::npos) {
      throw FormatError("vocabulary entry " + std::to_string(i) + " is empty or contains a space");
    }
    if (!tok.index_.emplace(words[i], static_cast<int>(i)).second) {
      throw FormatError("duplicate vocabulary entry '" + words[i] + "'");
    }
  }
  tok.words_ = std::move(words);
  return tok;
}

Tokenizer Tokenizer::build_default() {
  std::vector<std::string> words = special_words();
  auto add = [&words](std::string_view text) {
    std::vector<std::string> parts;
    split_into(text, parts);
    for (auto& p : parts) {
      if (std::find(words.begin(), words.end(), p) == words.end()) words.push_back(std::move(p));
    }
  };
  // Description grammar.
  add("a an child 's drawing of painting empty scene at the and , top middle bottom left center right");
  add("on plain background over to gradient with brushwork . smooth textured rough");
  for (const auto& hue : palette()) add(hue.name);
  for (std::size_t i = 0; i < kMotifKinds; ++i) add(to_string(static_cast<MotifKind>(i)));
  // Rubric preamble and critique grammar.
  add(rubric_preamble());
  for (auto name : kDimensionNames) add(name);
  add("overall scoring");
  for (const auto& band : kCritiqueBands) {
    for (auto adj : band.adjectives) add(adj);
  }
  for (int n = 0; n <= 100; ++n) add(std::to_string(n));
  return from_words(std::move(words));
}

Tokenizer Tokenizer::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open vocabulary file " + path.string());
  std::vector<std::string> words;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    words.push_back(line);
  }
  return from_words(std::move(words));
}

void Tokenizer::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write vocabulary file " + path.string());
  for (const auto& w : words_) out << w << '\n';
}

std::vector<int> Tokenizer::encode(std::string_view text) const {
  std::vector<std::string> parts;
  split_into(text, parts);
  std::vector<int> ids;
  ids.reserve(parts.size());
  for (const auto& p : parts) ids.push_back(id_of(p));
  return ids;
}

std::string Tokenizer::decode(std::span<const int> ids) const {
  std::string out;
  for (int id : ids) {
    if (!out.empty()) out.push_back(' ');
    out += word(id);
  }
  return out;
}

int Tokenizer::id_of(std::string_view word) const {
  const auto it = index_.find(std::string(word));
  return it == index_.end() ? special::kUnk : it->second;
}

const std::string& Tokenizer::word(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= words_.size()) {
    throw ContractError("token id " + std::to_string(id) + " outside vocabulary of " + std::to_string(words_.size()));
  }
  return words_[static_cast<std::size_t>(id)];
}

}  // namespace atelier
