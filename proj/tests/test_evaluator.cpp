#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "atelier/corpus.hpp"
#include "atelier/dataset.hpp"
#include "atelier/errors.hpp"
#include "atelier/evaluator.hpp"
#include "atelier/lora.hpp"
#include "atelier/model.hpp"
#include "atelier/rng.hpp"
#include "doctest.h"
#include "json.hpp"
#include "oracles.hpp"

using namespace atelier;

namespace {

const Tokenizer& tokenizer() {
  static const Tokenizer tok = Tokenizer::build_default();
  return tok;
}

const Dataset& corpus() {
  static const Dataset ds = generate_dataset(200, 19, tokenizer());
  return ds;
}

const std::vector<std::string>& references() {
  static const std::vector<std::string> docs = [] {
    std::vector<std::string> out;
    for (const auto& r : corpus().records) out.push_back(r.critique);
    return out;
  }();
  return docs;
}

std::vector<double> random_vector(Rng& rng, std::size_t n) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.normal(0.0, rng.uniform(0.1, 20.0)) + rng.uniform(-50.0, 50.0);
  return v;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

}  // namespace

TEST_SUITE("evaluator") {

TEST_CASE("pearson examples and errors") {
  const std::vector<double> x{1, 2, 3, 4, 5};
  std::vector<double> y;
  for (double v : x) y.push_back(2.0 * v + 1.0);
  CHECK(pearson(x, y) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(pearson(std::vector<double>{1, 2, 3}, std::vector<double>{3, 2, 1}) == doctest::Approx(-1.0).epsilon(1e-15));
  const std::vector<double> a{1, 2, 3, 4}, b{1, 3, 2, 5};
  CHECK(std::fabs(pearson(a, b) - oracle::pearson(a, b)) <= 1e-12);
  CHECK_THROWS_AS(pearson(std::vector<double>{2, 2, 2}, std::vector<double>{1, 2, 3}), NumericalError);
  CHECK_THROWS_AS(pearson(std::vector<double>{1, 2, 3}, std::vector<double>{4, 4, 4}), NumericalError);
  CHECK_THROWS_AS(pearson(std::vector<double>{1, 2}, std::vector<double>{1, 2, 3}), ContractError);
  CHECK_THROWS_AS(pearson(std::vector<double>{1}, std::vector<double>{1}), ContractError);
}

TEST_CASE("pearson scale behavior") {
  Rng rng(8);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 2 + rng.below(40);
    const auto x = random_vector(rng, n), y = random_vector(rng, n);
    const double r = pearson(x, y);
    CHECK((r >= -1.0 && r <= 1.0));
    const double pow2 = std::ldexp(1.0, static_cast<int>(rng.below(16)) - 8);
    std::vector<double> scaled, negated, affine;
    const double a = rng.uniform(0.01, 100.0), c = rng.uniform(-100.0, 100.0);
    for (double v : x) {
      scaled.push_back(pow2 * v);
      negated.push_back(-pow2 * v);
      affine.push_back(a * v + c);
    }
    CHECK(pearson(scaled, y) == r);
    CHECK(pearson(negated, y) == -r);
    CHECK(std::fabs(pearson(affine, y) - r) <= 1e-12);
  }
}

TEST_CASE("mae examples") {
  const std::vector<double> t{10, 40, 70};
  CHECK(mae(t, t) == 0.0);
  CHECK(mae(std::vector<double>{10, 20}, std::vector<double>{12, 18}) == 2.0);
  std::vector<double> shifted;
  for (double v : t) shifted.push_back(v + 2.5);
  CHECK(mae(shifted, t) == 2.5);
  CHECK_THROWS_AS(mae(std::vector<double>{1, 2}, std::vector<double>{1}), ContractError);
  CHECK_THROWS_AS(mae(std::vector<double>{}, std::vector<double>{}), ContractError);
}

TEST_CASE("icc examples") {
  const std::vector<double> r1{55, 71, 32, 90, 64, 47};
  CHECK(icc_two_raters(r1, r1) == doctest::Approx(1.0).epsilon(1e-15));
  std::vector<double> offset;
  for (double v : r1) offset.push_back(v + 25.0);
  const double icc = icc_two_raters(r1, offset);
  CHECK(icc < pearson(r1, offset));
  CHECK(icc < 0.7);
  CHECK_THROWS_AS(icc_two_raters(std::vector<double>{1, 2}, std::vector<double>{1, 2}), ContractError);
  CHECK_THROWS_AS(icc_two_raters(std::vector<double>{1, 2, 3}, std::vector<double>{1, 2}), ContractError);
  CHECK_THROWS_AS(icc_two_raters(std::vector<double>{5, 5, 5}, std::vector<double>{5, 5, 5}), NumericalError);
}

TEST_CASE("metrics agree with the reference implementations") {
  Rng rng(1234);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 3 + rng.below(60);
    const auto x = random_vector(rng, n), y = random_vector(rng, n);
    CHECK(std::fabs(pearson(x, y) - oracle::pearson(x, y)) <= 1e-10);
    CHECK(std::fabs(mae(x, y) - oracle::mae(x, y)) <= 1e-10);
    CHECK(std::fabs(icc_two_raters(x, y) - oracle::icc_a1(x, y)) <= 1e-10);
  }
}

TEST_CASE("simulated raters agree as in the variance-components oracle") {
  std::vector<double> truth, other;
  for (std::size_t i = 0; i < corpus().records.size(); ++i) {
    truth.push_back(corpus().records[i].scores.total);
    other.push_back(simulate_rater(corpus().records[i].scores, derive_seed(99, i)).total);
  }
  const double icc = icc_two_raters(truth, other);
  CHECK(std::fabs(icc - oracle::icc_a1(truth, other)) <= 1e-10);
  CHECK(icc > 0.9);
}

TEST_CASE("embedder properties") {
  const HashedIdfEmbedder emb(references());
  CHECK(emb.dimension() == 384);
  for (std::size_t i = 0; i < 20; ++i) {
    const auto v = emb.embed(references()[i]);
    double norm = 0.0;
    for (double x : v) norm += x * x;
    CHECK(std::sqrt(norm) == doctest::Approx(1.0).epsilon(1e-14));
  }
  const HashedIdfEmbedder again(references());
  CHECK(again.idf_table() == emb.idf_table());
  CHECK(again.embed(references()[3]) == emb.embed(references()[3]));

  std::size_t df = 0;
  for (const auto& d : references()) df += (" " + d + " ").find(" exceptional ") != std::string::npos;
  const double n = static_cast<double>(references().size());
  CHECK(emb.idf("exceptional") == doctest::Approx(std::log((1.0 + n) / (1.0 + df)) + 1.0).epsilon(1e-15));
  CHECK(emb.idf("zebra") == doctest::Approx(std::log(1.0 + n) + 1.0).epsilon(1e-15));

  const std::string& a = references()[0];
  const std::string& b = references()[7];
  CHECK(semantic_similarity(a, a, emb) == doctest::Approx(1.0).epsilon(1e-14));
  CHECK(semantic_similarity(a, b, emb) == semantic_similarity(b, a, emb));
  CHECK_THROWS_AS(semantic_similarity("", a, emb), ContractError);
  CHECK_THROWS_AS(emb.embed(""), ContractError);
  CHECK(HashedIdfEmbedder(references(), 5).embed(a) != emb.embed(a));
}

TEST_CASE("embeddings are normalized idf-weighted sums of word embeddings") {
  const HashedIdfEmbedder emb(references());
  const auto& words = tokenizer().words();
  Rng rng(6);
  std::size_t orthogonal = 0, pairs = 0;
  double abs_sum = 0.0;
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<std::string> left, right;
    for (std::size_t i = 6; i < words.size(); ++i) {
      if (rng.below(8) != 0) continue;
      (rng.below(2) == 0 ? left : right).push_back(words[i]);
    }
    if (left.empty() || right.empty()) continue;
    auto join = [](const std::vector<std::string>& ws) {
      std::string out;
      for (const auto& w : ws) out += (out.empty() ? "" : " ") + w;
      return out;
    };
    auto expected = [&](const std::vector<std::string>& ws) {
      std::vector<double> v(emb.dimension(), 0.0);
      for (const auto& w : ws) {
        const auto one = emb.embed(w);
        for (std::size_t k = 0; k < v.size(); ++k) v[k] += one[k] * emb.idf(w);
      }
      double n = 0.0;
      for (double x : v) n += x * x;
      for (double& x : v) x /= std::sqrt(n);
      return v;
    };
    const auto a = expected(left), b = expected(right);
    double dot = 0.0;
    for (std::size_t k = 0; k < a.size(); ++k) dot += a[k] * b[k];
    const double got = semantic_similarity(join(left), join(right), emb);
    CHECK(got == doctest::Approx(dot).epsilon(1e-12).scale(1.0));
    abs_sum += std::fabs(got);
    ++pairs;

    bool collide = false;
    for (const auto& l : left)
      for (const auto& r : right) collide = collide || semantic_similarity(l, r, emb) != 0.0;
    if (!collide) {
      CHECK(got == 0.0);
      ++orthogonal;
    }
  }
  CHECK(orthogonal > 0);
  // Disjoint token sets: cosine comes only from hash collisions.
  CHECK(abs_sum / static_cast<double>(pairs) <= 0.05);
}

TEST_CASE("band checks") {
  CHECK(band_consistency(95.0, "overall a exceptional painting scoring 95 of 100 ."));
  CHECK_FALSE(band_consistency(45.0, "overall a exceptional painting scoring 45 of 100 ."));
  CHECK(band_consistency(45.0, "color 19 of 20 , outstanding . overall a fair painting scoring 45 of 100 ."));
  CHECK_FALSE(band_consistency(45.0, "color 5 of 20 , outstanding . overall a fair painting scoring 45 of 100 ."));
  CHECK(band_consistency(45.0, "the sun , modest ."));
  const BandCheck none = band_check(50.0, "a red circle at the center .");
  CHECK(none.no_adjectives);
  CHECK_FALSE(none.consistent);
  for (const auto& r : corpus().records) {
    const BandCheck c = band_check(r.scores.total, r.critique);
    CHECK(c.consistent);
    CHECK_FALSE(c.no_adjectives);
  }
}

TEST_CASE("self-evaluation and table-to-summary aggregation") {
  const HashedIdfEmbedder emb(references());
  std::vector<SampleRow> rows;
  for (const auto& r : corpus().records) {
    SampleRow row;
    row.id = r.artwork.id;
    row.true_total = r.scores.total;
    row.predicted_total = r.scores.total;
    row.generated_critique = r.critique;
    row.similarity = semantic_similarity(r.critique, r.critique, emb);
    const BandCheck c = band_check(row.predicted_total, r.critique);
    row.band_consistent = c.consistent;
    row.no_adjectives = c.no_adjectives;
    rows.push_back(row);
  }
  const EvaluationReport self = summarize(rows);
  CHECK(self.mae_points == 0.0);
  CHECK(*self.pearson_r == doctest::Approx(1.0).epsilon(1e-14));
  CHECK(*self.icc == doctest::Approx(1.0).epsilon(1e-14));
  CHECK(self.mean_semantic_similarity == doctest::Approx(1.0).epsilon(1e-14));
  CHECK(self.band_consistency_rate == 1.0);

  Rng rng(3);
  for (auto& row : rows) {
    row.predicted_total = std::clamp(row.true_total + rng.normal(0.0, 6.0), 0.0, 100.0);
    row.similarity = rng.uniform(-0.2, 1.0);
    row.band_consistent = rng.below(4) != 0;
  }
  const EvaluationReport rep = summarize(rows);
  std::vector<double> t, p;
  double sim = 0.0, consistent = 0.0;
  for (const auto& row : rep.rows) {
    t.push_back(row.true_total);
    p.push_back(row.predicted_total);
    sim += row.similarity;
    consistent += row.band_consistent ? 1.0 : 0.0;
  }
  const double n = static_cast<double>(rep.rows.size());
  CHECK(rep.n_samples == rows.size());
  CHECK(std::fabs(*rep.pearson_r - oracle::pearson(p, t)) <= 1e-9);
  CHECK(std::fabs(rep.mae_points - oracle::mae(p, t)) <= 1e-9);
  CHECK(std::fabs(*rep.icc - oracle::icc_a1(t, p)) <= 1e-9);
  CHECK(std::fabs(rep.mean_semantic_similarity - sim / n) <= 1e-9);
  CHECK(std::fabs(rep.band_consistency_rate - consistent / n) <= 1e-9);

  std::vector<SampleRow> constant = rows;
  for (auto& row : constant) row.predicted_total = 50.0;
  const EvaluationReport flat = summarize(constant);
  CHECK_FALSE(flat.pearson_r.has_value());
  CHECK(flat.mae_points > 0.0);
}

TEST_CASE("evaluate produces one row per record and reports that survive a roundtrip") {
  ModelConfig c;
  c.vocab_size = tokenizer().size();
  c.d_model = 16;
  c.n_heads = 2;
  c.n_layers = 1;
  VlmModel model(c);
  inject_lora(model, {}, 2, 4.0, 1);
  const HashedIdfEmbedder emb(references());
  std::vector<const DatasetRecord*> records;
  for (std::size_t i = 0; i < 6; ++i) records.push_back(&corpus().records[i * 30]);
  EvalOptions opts;
  opts.max_critique_tokens = 6;
  const EvaluationReport rep = evaluate(model, tokenizer(), records, emb, opts);
  REQUIRE(rep.rows.size() == records.size());
  for (std::size_t i = 0; i < records.size(); ++i) {
    CHECK(rep.rows[i].id == records[i]->artwork.id);
    CHECK(rep.rows[i].true_total == records[i]->scores.total);
    CHECK(rep.rows[i].predicted_total == 50.0);
    CHECK((rep.rows[i].similarity >= -1.0 && rep.rows[i].similarity <= 1.0));
  }
  CHECK_FALSE(rep.pearson_r.has_value());
  CHECK(rep.mae_points >= 0.0);
  CHECK((rep.band_consistency_rate >= 0.0 && rep.band_consistency_rate <= 1.0));
  CHECK_THROWS_AS(evaluate(model, tokenizer(), std::span<const DatasetRecord* const>{}, emb), ContractError);

  const auto dir = oracle::scratch_dir("evaluator_report");
  write_report(rep, dir / "report.json");
  const EvaluationReport back = read_report(dir / "report.json");
  CHECK(back.rows == rep.rows);
  CHECK(back.mae_points == rep.mae_points);
  CHECK(report_to_json(back) == report_to_json(rep));

  const auto j = nlohmann::json::parse(slurp(dir / "report.json"));
  for (auto key : {"n_samples", "pearson_r", "mae_points", "icc", "mean_semantic_similarity", "band_consistency_rate"})
    CHECK(j.contains(key));
  CHECK(j["pearson_r"].is_null());

  const std::string csv = slurp(dir / "report.csv");
  CHECK(csv.rfind("id,true_total,predicted_total,similarity", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == static_cast<long>(records.size() + 1));
  const std::string svg = slurp(dir / "report.svg");
  CHECK(svg.rfind("<svg", 0) == 0);
  CHECK(svg.find("</svg>") != std::string::npos);
  CHECK(std::count(svg.begin(), svg.end(), '\n') > 0);
  CHECK(text_summary(rep).find("mae") != std::string::npos);
}

}  // TEST_SUITE
