#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "atelier/dataset.hpp"
#include "atelier/model.hpp"

namespace atelier {

// Product-moment correlation, computed in two passes (means first).
// Throws ContractError on unequal lengths or fewer than two points and
// NumericalError when either list is constant.
double pearson(std::span<const double> x, std::span<const double> y);

// Mean absolute difference, in the units of the inputs (points here).
double mae(std::span<const double> pred, std::span<const double> target);

// ICC(A,1): two-way random effects, absolute agreement, single measure.
// With n subjects and k = 2 raters,
//   MSR = SSR / (n - 1)            between-subject mean square
//   MSC = SSC / (k - 1)            between-rater mean square
//   MSE = SSE / ((n - 1)(k - 1))   residual mean square
//   ICC = (MSR - MSE) / (MSR + (k - 1) MSE + k (MSC - MSE) / n)
// which estimates var(subject) / (var(subject) + var(rater) + var(error)).
// Needs at least three subjects.
double icc_two_raters(std::span<const double> rater1, std::span<const double> rater2);

class SentenceEmbedder {
 public:
  virtual ~SentenceEmbedder() = default;
  virtual std::size_t dimension() const = 0;
  // Unit-norm vector; empty text is a ContractError.
  virtual std::vector<double> embed(std::string_view text) const = 0;
};

// Signed feature hashing of whitespace tokens into `dimension` bins. Each
// token contributes tf * idf with idf = ln((1 + N) / (1 + df)) + 1 fitted on
// a reference corpus of N documents; unseen tokens get df = 0.
class HashedIdfEmbedder final : public SentenceEmbedder {
 public:
  static constexpr std::size_t kDefaultDimension = 384;
  static constexpr std::uint64_t kDefaultSeed = 0x9b5c3e1f27d4a86bULL;

  explicit HashedIdfEmbedder(std::span<const std::string> corpus, std::uint64_t seed = kDefaultSeed,
                             std::size_t dimension = kDefaultDimension);

  std::size_t dimension() const override { return dimension_; }
  std::vector<double> embed(std::string_view text) const override;
  double idf(std::string_view token) const;
  const std::map<std::string, double, std::less<>>& idf_table() const { return idf_; }

 private:
  std::uint64_t seed_;
  std::size_t dimension_;
  std::size_t documents_;
  std::map<std::string, double, std::less<>> idf_;
};

// Cosine of the two embeddings. Empty text is a ContractError.
double semantic_similarity(std::string_view generated, std::string_view reference, const SentenceEmbedder& embedder);

struct BandCheck {
  bool consistent = false;
  bool no_adjectives = false;  // nothing to check; counted inconsistent
};

// Splits the critique into sentences at "." tokens. A sentence
// "<dimension> N of 20 ..." is checked against band(5 N); every other
// sentence, the overall one included, against the predicted total.
BandCheck band_check(double predicted_score, std::string_view critique);
bool band_consistency(double predicted_score, std::string_view critique);

struct SampleRow {
  std::string id;
  double true_total = 0.0;
  double predicted_total = 0.0;
  double similarity = 0.0;
  bool band_consistent = false;
  bool no_adjectives = false;
  std::string generated_critique;

  bool operator==(const SampleRow&) const = default;
};

// Scores are on the 100-point scale. pearson_r and icc are absent when the
// predictions (or truths) are constant; mae_points and the rates are always
// set. icc compares model and truth as two raters.
struct EvaluationReport {
  std::size_t n_samples = 0;
  std::optional<double> pearson_r;
  double mae_points = 0.0;
  std::optional<double> icc;
  double mean_semantic_similarity = 0.0;
  double band_consistency_rate = 0.0;
  std::size_t no_adjective_count = 0;
  std::vector<SampleRow> rows;
};

// Headline numbers as pure aggregates of the per-sample table.
EvaluationReport summarize(std::vector<SampleRow> rows);

struct EvalOptions {
  std::size_t max_critique_tokens = kCritiqueBudget;
};

// Score from the prompt, greedy critique, similarity to the reference and
// band check, for each record in the given order.
EvaluationReport evaluate(const VlmModel& model, const Tokenizer& tokenizer,
                          std::span<const DatasetRecord* const> records, const SentenceEmbedder& embedder,
                          const EvalOptions& options = {});

std::string report_to_json(const EvaluationReport& report);
EvaluationReport report_from_json(std::string_view text);
std::string report_rows_csv(const EvaluationReport& report);
// True vs predicted totals on 0-100 axes with the identity line.
std::string render_scatter_svg(const EvaluationReport& report);
std::string text_summary(const EvaluationReport& report);

// Writes `json_path` plus the .csv and .svg siblings sharing its stem.
void write_report(const EvaluationReport& report, const std::filesystem::path& json_path);
EvaluationReport read_report(const std::filesystem::path& json_path);

}  // namespace atelier
