#include "atelier/evaluator.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <set>
#include <sstream>

#include "atelier/binary_io.hpp"
#include "atelier/corpus.hpp"
#include "atelier/errors.hpp"
#include "atelier/rng.hpp"
#include "atelier/special_tokens.hpp"
#include "json.hpp"

namespace atelier {

using nlohmann::json;

namespace {

void require_pair(std::span<const double> x, std::span<const double> y, std::size_t min_len, const char* what) {
  if (x.size() != y.size()) {
    throw ContractError(std::string(what) + ": length mismatch (" + std::to_string(x.size()) + " vs " +
                        std::to_string(y.size()) + ")");
  }
  if (x.size() < min_len) {
    throw ContractError(std::string(what) + ": insufficient data, need at least " + std::to_string(min_len) +
                        " values, got " + std::to_string(x.size()));
  }
}

double mean_of(std::span<const double> x) {
  double s = 0.0;
  for (double v : x) s += v;
  return s / static_cast<double>(x.size());
}

std::vector<std::string_view> split_words(std::string_view text) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    const std::size_t start = i;
    while (i < text.size() && !std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    if (i > start) out.push_back(text.substr(start, i - start));
  }
  return out;
}

std::uint64_t hash_token(std::string_view token, std::uint64_t seed) {
  std::uint64_t h = 0xcbf29ce484222325ULL ^ seed;
  for (unsigned char c : token) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return splitmix64(h);
}

}  // namespace

double pearson(std::span<const double> x, std::span<const double> y) {
  require_pair(x, y, 2, "pearson");
  const double mx = mean_of(x), my = mean_of(y);
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = x[i] - mx, dy = y[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx == 0.0 || syy == 0.0) throw NumericalError("pearson: correlation is undefined for constant input");
  return std::clamp(sxy / (std::sqrt(sxx) * std::sqrt(syy)), -1.0, 1.0);
}

double mae(std::span<const double> pred, std::span<const double> target) {
  require_pair(pred, target, 1, "mae");
  double s = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) s += std::abs(pred[i] - target[i]);
  return s / static_cast<double>(pred.size());
}

double icc_two_raters(std::span<const double> r1, std::span<const double> r2) {
  require_pair(r1, r2, 3, "icc");
  const std::size_t n = r1.size();
  constexpr double k = 2.0;
  const double nd = static_cast<double>(n);
  const double m1 = mean_of(r1), m2 = mean_of(r2);
  const double grand = (m1 + m2) / 2.0;
  double ssr = 0.0, sse = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double row = (r1[i] + r2[i]) / 2.0;
    ssr += k * (row - grand) * (row - grand);
    const double e1 = r1[i] - row - m1 + grand;
    const double e2 = r2[i] - row - m2 + grand;
    sse += e1 * e1 + e2 * e2;
  }
  const double ssc = nd * ((m1 - grand) * (m1 - grand) + (m2 - grand) * (m2 - grand));
  const double msr = ssr / (nd - 1.0);
  const double msc = ssc / (k - 1.0);
  const double mse = sse / ((nd - 1.0) * (k - 1.0));
  const double denom = msr + (k - 1.0) * mse + k * (msc - mse) / nd;
  if (!(denom > 0.0)) throw NumericalError("icc: no variance between subjects or raters");
  return (msr - mse) / denom;
}

HashedIdfEmbedder::HashedIdfEmbedder(std::span<const std::string> corpus, std::uint64_t seed, std::size_t dimension)
    : seed_(seed), dimension_(dimension), documents_(corpus.size()) {
  if (dimension_ == 0) throw ContractError("embedder dimension must be positive");
  std::map<std::string, std::size_t, std::less<>> df;
  for (const auto& doc : corpus) {
    std::set<std::string_view> seen;
    for (auto w : split_words(doc)) seen.insert(w);
    for (auto w : seen) ++df[std::string(w)];
  }
  const double n = static_cast<double>(documents_);
  for (const auto& [word, count] : df) idf_[word] = std::log((1.0 + n) / (1.0 + static_cast<double>(count))) + 1.0;
}

double HashedIdfEmbedder::idf(std::string_view token) const {
  const auto it = idf_.find(token);
  if (it != idf_.end()) return it->second;
  return std::log(1.0 + static_cast<double>(documents_)) + 1.0;
}

std::vector<double> HashedIdfEmbedder::embed(std::string_view text) const {
  const auto words = split_words(text);
  if (words.empty()) throw ContractError("embed: empty text");
  std::map<std::string_view, std::size_t> tf;
  for (auto w : words) ++tf[w];
  std::vector<double> v(dimension_, 0.0);
  for (const auto& [word, count] : tf) {
    const std::uint64_t h = hash_token(word, seed_);
    const double sign = (h >> 63) ? -1.0 : 1.0;
    v[h % dimension_] += sign * static_cast<double>(count) * idf(word);
  }
  double norm = 0.0;
  for (double x : v) norm += x * x;
  norm = std::sqrt(norm);
  if (norm == 0.0) throw NumericalError("embed: hashed features cancelled to a zero vector");
  for (double& x : v) x /= norm;
  return v;
}

double semantic_similarity(std::string_view generated, std::string_view reference, const SentenceEmbedder& embedder) {
  const auto a = embedder.embed(generated);
  const auto b = embedder.embed(reference);
  if (a.size() != b.size()) throw DimensionError("semantic_similarity: embeddings differ in dimension");
  double dot = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) dot += a[i] * b[i];
  return std::clamp(dot, -1.0, 1.0);
}

namespace {

// Band score a sentence is judged against, or nullopt to fall back on the total.
std::optional<double> dimension_score(std::span<const std::string_view> sentence) {
  if (sentence.size() < 4) return std::nullopt;
  if (std::find(kDimensionNames.begin(), kDimensionNames.end(), sentence[0]) == kDimensionNames.end()) {
    return std::nullopt;
  }
  if (sentence[2] != "of" || sentence[3] != "20") return std::nullopt;
  const std::string_view num = sentence[1];
  if (num.empty() || num.size() > 2 || !std::all_of(num.begin(), num.end(), [](char c) { return c >= '0' && c <= '9'; })) {
    return std::nullopt;
  }
  const int points = std::stoi(std::string(num));
  if (points > 20) return std::nullopt;
  return 5.0 * points;
}

}  // namespace

BandCheck band_check(double predicted_score, std::string_view critique) {
  const auto words = split_words(critique);
  BandCheck result;
  result.consistent = true;
  std::size_t adjectives = 0;
  std::size_t begin = 0;
  for (std::size_t i = 0; i <= words.size(); ++i) {
    if (i < words.size() && words[i] != ".") continue;
    const auto sentence = std::span(words).subspan(begin, i - begin);
    const double score = dimension_score(sentence).value_or(predicted_score);
    const int band = static_cast<int>(band_index(score));
    for (auto w : sentence) {
      const int b = band_of_adjective(w);
      if (b < 0) continue;
      ++adjectives;
      if (b != band) result.consistent = false;
    }
    begin = i + 1;
  }
  if (adjectives == 0) {
    result.no_adjectives = true;
    result.consistent = false;
  }
  return result;
}

bool band_consistency(double predicted_score, std::string_view critique) {
  return band_check(predicted_score, critique).consistent;
}

EvaluationReport summarize(std::vector<SampleRow> rows) {
  EvaluationReport r;
  r.n_samples = rows.size();
  if (rows.empty()) throw ContractError("summarize: no samples");
  std::vector<double> truth, pred;
  double sim = 0.0;
  std::size_t consistent = 0;
  for (const auto& row : rows) {
    truth.push_back(row.true_total);
    pred.push_back(row.predicted_total);
    sim += row.similarity;
    if (row.band_consistent) ++consistent;
    if (row.no_adjectives) ++r.no_adjective_count;
  }
  const double n = static_cast<double>(rows.size());
  r.mae_points = mae(pred, truth);
  r.mean_semantic_similarity = sim / n;
  r.band_consistency_rate = static_cast<double>(consistent) / n;
  if (rows.size() >= 2) {
    try {
      r.pearson_r = pearson(pred, truth);
    } catch (const NumericalError&) {
    }
  }
  if (rows.size() >= 3) {
    try {
      r.icc = icc_two_raters(truth, pred);
    } catch (const NumericalError&) {
    }
  }
  r.rows = std::move(rows);
  return r;
}

EvaluationReport evaluate(const VlmModel& model, const Tokenizer& tokenizer,
                          std::span<const DatasetRecord* const> records, const SentenceEmbedder& embedder,
                          const EvalOptions& options) {
  if (records.empty()) throw ContractError("evaluate: the test split is empty");
  NoGradGuard no_grad;
  std::vector<SampleRow> rows;
  rows.reserve(records.size());
  for (const DatasetRecord* rec : records) {
    const TrainSample& s = rec->sample;
    const Tensor visual = model.encode_image(s.image);
    const auto prompt = s.prompt();
    const ModelOutput out = model.forward(visual, prompt, s.scoring_pos);
    std::vector<int> generated = model.generate_critique(visual, prompt, options.max_critique_tokens);
    if (!generated.empty() && generated.back() == special::kEos) generated.pop_back();

    SampleRow row;
    row.id = s.id;
    row.true_total = rec->scores.total;
    row.predicted_total = out.score;
    row.generated_critique = tokenizer.decode(generated);
    row.similarity = row.generated_critique.empty() ? 0.0
                                                    : semantic_similarity(row.generated_critique, rec->critique, embedder);
    const BandCheck check = band_check(row.predicted_total, row.generated_critique);
    row.band_consistent = check.consistent;
    row.no_adjectives = check.no_adjectives;
    rows.push_back(std::move(row));
  }
  return summarize(std::move(rows));
}

namespace {

json optional_number(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

std::string fmt(double v, const char* spec = "%.17g") {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

std::string csv_quote(const std::string& s) {
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

}  // namespace

std::string report_to_json(const EvaluationReport& r) {
  json j;
  j["n_samples"] = r.n_samples;
  j["pearson_r"] = optional_number(r.pearson_r);
  j["mae_points"] = r.mae_points;
  j["icc"] = optional_number(r.icc);
  j["mean_semantic_similarity"] = r.mean_semantic_similarity;
  j["band_consistency_rate"] = r.band_consistency_rate;
  j["no_adjective_count"] = r.no_adjective_count;
  json rows = json::array();
  for (const auto& row : r.rows) {
    rows.push_back({{"id", row.id},
                    {"true_total", row.true_total},
                    {"predicted_total", row.predicted_total},
                    {"similarity", row.similarity},
                    {"band_consistent", row.band_consistent},
                    {"no_adjectives", row.no_adjectives},
                    {"generated_critique", row.generated_critique}});
  }
  j["samples"] = std::move(rows);
  return j.dump(2) + "\n";
}

EvaluationReport report_from_json(std::string_view text) {
  try {
    const json j = json::parse(text);
    std::vector<SampleRow> rows;
    for (const auto& s : j.at("samples")) {
      SampleRow row;
      row.id = s.at("id").get<std::string>();
      row.true_total = s.at("true_total").get<double>();
      row.predicted_total = s.at("predicted_total").get<double>();
      row.similarity = s.at("similarity").get<double>();
      row.band_consistent = s.at("band_consistent").get<bool>();
      row.no_adjectives = s.at("no_adjectives").get<bool>();
      row.generated_critique = s.at("generated_critique").get<std::string>();
      rows.push_back(std::move(row));
    }
    EvaluationReport r = summarize(std::move(rows));
    if (j.at("n_samples").get<std::size_t>() != r.n_samples) {
      throw FormatError("report: n_samples disagrees with the sample table");
    }
    return r;
  } catch (const json::exception& e) {
    throw FormatError(std::string("report JSON is malformed: ") + e.what());
  }
}

std::string report_rows_csv(const EvaluationReport& r) {
  std::string out = "id,true_total,predicted_total,similarity,band_consistent,no_adjectives,generated_critique\n";
  for (const auto& row : r.rows) {
    out += row.id + "," + fmt(row.true_total) + "," + fmt(row.predicted_total) + "," + fmt(row.similarity) + "," +
           (row.band_consistent ? "1" : "0") + "," + (row.no_adjectives ? "1" : "0") + "," +
           csv_quote(row.generated_critique) + "\n";
  }
  return out;
}

std::string render_scatter_svg(const EvaluationReport& r) {
  constexpr double size = 480.0, margin = 56.0;
  const double span = size - 2.0 * margin;
  auto px = [&](double v) { return margin + std::clamp(v, 0.0, 100.0) / 100.0 * span; };
  auto py = [&](double v) { return size - margin - std::clamp(v, 0.0, 100.0) / 100.0 * span; };
  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"480\" height=\"480\" viewBox=\"0 0 480 480\">\n";
  svg << "<rect width=\"480\" height=\"480\" fill=\"white\"/>\n";
  svg << "<g stroke=\"#ddd\" stroke-width=\"1\">\n";
  for (int t = 0; t <= 100; t += 20) {
    svg << "<line x1=\"" << fmt(px(t), "%.2f") << "\" y1=\"" << fmt(py(0), "%.2f") << "\" x2=\"" << fmt(px(t), "%.2f")
        << "\" y2=\"" << fmt(py(100), "%.2f") << "\"/>\n";
    svg << "<line x1=\"" << fmt(px(0), "%.2f") << "\" y1=\"" << fmt(py(t), "%.2f") << "\" x2=\"" << fmt(px(100), "%.2f")
        << "\" y2=\"" << fmt(py(t), "%.2f") << "\"/>\n";
  }
  svg << "</g>\n";
  svg << "<g font-family=\"sans-serif\" font-size=\"11\" fill=\"#333\">\n";
  for (int t = 0; t <= 100; t += 20) {
    svg << "<text x=\"" << fmt(px(t), "%.2f") << "\" y=\"" << fmt(py(0) + 16, "%.2f") << "\" text-anchor=\"middle\">"
        << t << "</text>\n";
    svg << "<text x=\"" << fmt(px(0) - 8, "%.2f") << "\" y=\"" << fmt(py(t) + 4, "%.2f") << "\" text-anchor=\"end\">"
        << t << "</text>\n";
  }
  svg << "<text x=\"240\" y=\"470\" text-anchor=\"middle\">true total</text>\n";
  svg << "<text x=\"14\" y=\"240\" text-anchor=\"middle\" transform=\"rotate(-90 14 240)\">predicted total</text>\n";
  svg << "<text x=\"240\" y=\"30\" text-anchor=\"middle\" font-size=\"13\">n = " << r.n_samples
      << ", r = " << (r.pearson_r ? fmt(*r.pearson_r, "%.3f") : std::string("n/a"))
      << ", MAE = " << fmt(r.mae_points, "%.2f") << "</text>\n";
  svg << "</g>\n";
  svg << "<line x1=\"" << fmt(px(0), "%.2f") << "\" y1=\"" << fmt(py(0), "%.2f") << "\" x2=\"" << fmt(px(100), "%.2f")
      << "\" y2=\"" << fmt(py(100), "%.2f") << "\" stroke=\"#c33\" stroke-dasharray=\"6 4\" stroke-width=\"1.5\"/>\n";
  svg << "<g fill=\"#2a6fb0\" fill-opacity=\"0.7\">\n";
  for (const auto& row : r.rows) {
    svg << "<circle cx=\"" << fmt(px(row.true_total), "%.2f") << "\" cy=\"" << fmt(py(row.predicted_total), "%.2f")
        << "\" r=\"3\"/>\n";
  }
  svg << "</g>\n</svg>\n";
  return svg.str();
}

std::string text_summary(const EvaluationReport& r) {
  std::ostringstream out;
  auto opt = [](const std::optional<double>& v, const char* spec) { return v ? fmt(*v, spec) : std::string("undefined"); };
  out << "samples                    " << r.n_samples << "\n";
  out << "pearson r                  " << opt(r.pearson_r, "%.4f") << "\n";
  out << "mae (points)               " << fmt(r.mae_points, "%.3f") << "\n";
  out << "icc(A,1) model vs truth    " << opt(r.icc, "%.4f") << "\n";
  out << "mean semantic similarity   " << fmt(r.mean_semantic_similarity, "%.4f") << "\n";
  out << "band consistency rate      " << fmt(r.band_consistency_rate, "%.4f") << "\n";
  out << "critiques without adjectives " << r.no_adjective_count << "\n";
  return out.str();
}

void write_report(const EvaluationReport& report, const std::filesystem::path& json_path) {
  auto sibling = [&](const char* ext) {
    std::filesystem::path p = json_path;
    return p.replace_extension(ext);
  };
  write_file_atomic(json_path, report_to_json(report));
  write_file_atomic(sibling(".csv"), report_rows_csv(report));
  write_file_atomic(sibling(".svg"), render_scatter_svg(report));
}

EvaluationReport read_report(const std::filesystem::path& json_path) { return report_from_json(read_file(json_path)); }

}  // namespace atelier
