#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "atelier/corpus.hpp"
#include "atelier/tokenizer.hpp"

namespace atelier {

// Tokens reserved after the prompt for the critique and its EOS.
inline constexpr std::size_t kCritiqueBudget = 48;

// Everything one training step needs for one artwork.
struct TrainSample {
  std::string id;
  Image image;
  // prompt ++ reference critique. The sequence fed to the model; EOS is only
  // ever a target.
  std::vector<int> tokens;
  // Next-token target for every entry of `tokens`, special::kIgnore on the
  // prompt (including the [SCORING] position).
  std::vector<int> targets;
  std::size_t scoring_pos = 0;
  std::size_t prompt_length = 0;
  double target_score = 0.0;  // total / 100, in [0, 1]

  std::span<const int> prompt() const { return std::span(tokens).first(prompt_length); }
  // Reference critique tokens followed by EOS.
  std::vector<int> reference_critique() const;
  // targets prefixed with `visual` ignore entries, aligned to model logits.
  std::vector<int> aligned_targets(std::size_t visual) const;
};

struct DatasetRecord {
  Artwork artwork;
  RubricScores scores;
  std::string critique;
  TrainSample sample;
};

struct DatasetOptions {
  std::size_t image_size = 32;
  // Longest prompt accepted, in tokens. The default leaves room for 16
  // visual tokens and the critique budget in a 256-position model.
  std::size_t max_prompt_tokens = 256 - 16 - kCritiqueBudget;
};

struct Dataset {
  std::uint64_t seed = 0;
  DatasetOptions options;
  std::vector<DatasetRecord> records;  // ordered by id

  const DatasetRecord& find(std::string_view id) const;
  std::vector<const DatasetRecord*> select(const std::vector<std::string>& ids) const;
};

// BOS ++ rubric ++ description ++ [SCORING] ++ [CRITIQUE]. Throws
// LengthError when the result exceeds max_tokens.
std::vector<int> build_prompt(const Tokenizer& tokenizer, std::string_view rubric, std::string_view description,
                              std::size_t max_tokens);

TrainSample make_sample(std::string id, Image image, std::string_view description, std::string_view critique,
                        double total, const Tokenizer& tokenizer, const DatasetOptions& options);

struct CategoryCounts {
  std::size_t child = 0;
  std::size_t professional = 0;
  std::size_t masterpiece = 0;
};

// 75/20/5 percent: professional = floor(n/5), masterpiece = floor(n/20),
// child = the rest.
CategoryCounts category_counts(std::size_t n);

// Artwork i gets seed derive_seed(seed, i) and id "art-%04d". Children come
// first, then professional works, then masterpieces.
Dataset generate_dataset(std::size_t n, std::uint64_t seed, const Tokenizer& tokenizer,
                         const DatasetOptions& options = {});

struct DatasetSplit {
  std::uint64_t seed = 0;
  std::vector<std::string> train;
  std::vector<std::string> test;
};

// Per category: seeded shuffle, then every fifth item (shuffled index % 5 == 4)
// goes to test. Categories with fewer than five items contribute nothing to test.
DatasetSplit split_dataset(const Dataset& dataset, std::uint64_t seed);

// On-disk layout of a dataset directory:
//   manifest.jsonl   one JSON object per artwork: id, category, params,
//                    scores, description, critique, image
//   dataset.bin      "ATLRDATA", u32 version, u64 count, u64 image_size, then
//                    per artwork: u32-prefixed id and size*size*3 float64 pixels
//   images/<id>.ppm  binary PPM for inspection
//   vocab.txt        one token per line
void save_dataset(const Dataset& dataset, const Tokenizer& tokenizer, const std::filesystem::path& dir);
// Returns the dataset and the tokenizer stored next to it.
std::pair<Dataset, Tokenizer> load_dataset(const std::filesystem::path& dir);

void save_split(const DatasetSplit& split, const std::filesystem::path& path);
DatasetSplit load_split(const std::filesystem::path& path);

}  // namespace atelier
