#include "atelier/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "atelier/binary_io.hpp"
#include "atelier/errors.hpp"
#include "atelier/rng.hpp"
#include "atelier/special_tokens.hpp"
#include "json.hpp"

namespace atelier {

using nlohmann::json;

namespace {

constexpr std::string_view kDataMagic = "ATLRDATA";
constexpr std::uint32_t kDataVersion = 1;

json params_to_json(const ArtworkParams& p) {
  json motifs = json::array();
  for (const auto& m : p.motifs) {
    motifs.push_back({{"kind", to_string(m.kind)},
                      {"hue", palette().at(m.hue).name},
                      {"x", m.x},
                      {"y", m.y},
                      {"size", m.size}});
  }
  return {{"seed", p.seed},
          {"category", to_string(p.category)},
          {"image_size", p.image_size},
          {"background", {{"top", palette().at(p.background_top).name}, {"bottom", palette().at(p.background_bottom).name}}},
          {"noise", p.noise},
          {"motifs", motifs}};
}

ArtworkParams params_from_json(const json& j) {
  ArtworkParams p;
  p.seed = j.at("seed").get<std::uint64_t>();
  p.category = category_from_string(j.at("category").get<std::string>());
  p.image_size = j.at("image_size").get<std::size_t>();
  p.background_top = hue_from_string(j.at("background").at("top").get<std::string>());
  p.background_bottom = hue_from_string(j.at("background").at("bottom").get<std::string>());
  p.noise = j.at("noise").get<double>();
  for (const auto& m : j.at("motifs")) {
    Motif motif;
    motif.kind = motif_from_string(m.at("kind").get<std::string>());
    motif.hue = hue_from_string(m.at("hue").get<std::string>());
    motif.x = m.at("x").get<double>();
    motif.y = m.at("y").get<double>();
    motif.size = m.at("size").get<double>();
    p.motifs.push_back(motif);
  }
  return p;
}

json scores_to_json(const RubricScores& s) {
  return {{"originality", s.originality}, {"color", s.color},     {"composition", s.composition},
          {"texture", s.texture},         {"content", s.content}, {"total", s.total}};
}

RubricScores scores_from_json(const json& j) {
  auto s = RubricScores::from_dimensions({j.at("originality").get<double>(), j.at("color").get<double>(),
                                          j.at("composition").get<double>(), j.at("texture").get<double>(),
                                          j.at("content").get<double>()});
  if (s.total != j.at("total").get<double>()) throw FormatError("manifest total is not the sum of its dimensions");
  return s;
}

std::string artwork_id(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "art-%04zu", index);
  return buf;
}

}  // namespace

std::vector<int> TrainSample::reference_critique() const {
  std::vector<int> out(tokens.begin() + static_cast<std::ptrdiff_t>(prompt_length), tokens.end());
  out.push_back(special::kEos);
  return out;
}

std::vector<int> TrainSample::aligned_targets(std::size_t visual) const {
  std::vector<int> out(visual, special::kIgnore);
  out.insert(out.end(), targets.begin(), targets.end());
  return out;
}

const DatasetRecord& Dataset::find(std::string_view id) const {
  const auto it = std::find_if(records.begin(), records.end(), [id](const DatasetRecord& r) { return r.sample.id == id; });
  if (it == records.end()) throw FormatError("artwork id '" + std::string(id) + "' not in dataset");
  return *it;
}

std::vector<const DatasetRecord*> Dataset::select(const std::vector<std::string>& ids) const {
  std::vector<const DatasetRecord*> out;
  out.reserve(ids.size());
  for (const auto& id : ids) out.push_back(&find(id));
  return out;
}

std::vector<int> build_prompt(const Tokenizer& tokenizer, std::string_view rubric, std::string_view description,
                              std::size_t max_tokens) {
  std::vector<int> prompt{special::kBos};
  const auto r = tokenizer.encode(rubric);
  const auto d = tokenizer.encode(description);
  prompt.insert(prompt.end(), r.begin(), r.end());
  prompt.insert(prompt.end(), d.begin(), d.end());
  prompt.push_back(special::kScoring);
  prompt.push_back(special::kCritique);
  if (prompt.size() > max_tokens) {
    throw LengthError("prompt of " + std::to_string(prompt.size()) + " tokens exceeds the budget of " +
                      std::to_string(max_tokens));
  }
  return prompt;
}

TrainSample make_sample(std::string id, Image image, std::string_view description, std::string_view critique,
                        double total, const Tokenizer& tokenizer, const DatasetOptions& options) {
  TrainSample s;
  s.id = std::move(id);
  s.image = std::move(image);
  s.tokens = build_prompt(tokenizer, rubric_preamble(), description, options.max_prompt_tokens);
  s.prompt_length = s.tokens.size();
  s.scoring_pos = s.prompt_length - 2;
  const auto critique_ids = tokenizer.encode(critique);
  if (critique_ids.size() + 1 > kCritiqueBudget) {
    throw LengthError("critique of " + std::to_string(critique_ids.size()) + " tokens exceeds the critique budget");
  }
  s.tokens.insert(s.tokens.end(), critique_ids.begin(), critique_ids.end());
  s.targets.assign(s.tokens.size(), special::kIgnore);
  // Position t predicts token t+1; the [CRITIQUE] position predicts the
  // first critique word and the last critique word predicts EOS.
  for (std::size_t t = s.prompt_length - 1; t < s.tokens.size(); ++t) {
    s.targets[t] = t + 1 < s.tokens.size() ? s.tokens[t + 1] : special::kEos;
  }
  s.target_score = std::clamp(total / 100.0, 0.0, 1.0);
  return s;
}

CategoryCounts category_counts(std::size_t n) {
  CategoryCounts c;
  c.professional = n / 5;
  c.masterpiece = n / 20;
  c.child = n - c.professional - c.masterpiece;
  return c;
}

Dataset generate_dataset(std::size_t n, std::uint64_t seed, const Tokenizer& tokenizer, const DatasetOptions& options) {
  if (n < 10) throw ContractError("generate_dataset: need at least 10 artworks, got " + std::to_string(n));
  const auto counts = category_counts(n);
  Dataset ds;
  ds.seed = seed;
  ds.options = options;
  ds.records.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const Category category = i < counts.child                          ? Category::child
                              : i < counts.child + counts.professional ? Category::professional
                                                                       : Category::masterpiece;
    DatasetRecord rec;
    rec.artwork = render_artwork(derive_seed(seed, i), category, options.image_size);
    rec.artwork.id = artwork_id(i);
    rec.scores = ground_truth_scores(rec.artwork.params);
    rec.critique = critique_for(rec.scores);
    rec.sample = make_sample(rec.artwork.id, rec.artwork.image, rec.artwork.description, rec.critique,
                             rec.scores.total, tokenizer, options);
    ds.records.push_back(std::move(rec));
  }
  return ds;
}

DatasetSplit split_dataset(const Dataset& dataset, std::uint64_t seed) {
  if (dataset.records.empty()) throw ContractError("split_dataset: empty dataset");
  DatasetSplit split;
  split.seed = seed;
  for (Category category : {Category::child, Category::professional, Category::masterpiece}) {
    std::vector<std::string> ids;
    for (const auto& r : dataset.records) {
      if (r.artwork.category == category) ids.push_back(r.sample.id);
    }
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(category)));
    for (std::size_t i = ids.size(); i > 1; --i) std::swap(ids[i - 1], ids[rng.below(i)]);
    for (std::size_t i = 0; i < ids.size(); ++i) (i % 5 == 4 ? split.test : split.train).push_back(ids[i]);
  }
  std::sort(split.train.begin(), split.train.end());
  std::sort(split.test.begin(), split.test.end());
  return split;
}

void save_dataset(const Dataset& dataset, const Tokenizer& tokenizer, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "images");
  std::string manifest;
  BinaryWriter bin;
  bin.bytes(kDataMagic);
  bin.u32(kDataVersion);
  bin.u64(dataset.records.size());
  bin.u64(dataset.options.image_size);
  bin.u64(dataset.seed);
  bin.u64(dataset.options.max_prompt_tokens);
  for (const auto& r : dataset.records) {
    const std::string image_ref = "images/" + r.sample.id + ".ppm";
    json line = {{"id", r.sample.id},
                 {"category", to_string(r.artwork.category)},
                 {"params", params_to_json(r.artwork.params)},
                 {"scores", scores_to_json(r.scores)},
                 {"description", r.artwork.description},
                 {"critique", r.critique},
                 {"image", image_ref}};
    manifest += line.dump();
    manifest += '\n';
    write_ppm(r.artwork.image, dir / image_ref);
    bin.str(r.sample.id);
    for (double v : r.artwork.image.pixels) bin.f64(v);
  }
  write_file_atomic(dir / "manifest.jsonl", manifest);
  write_file_atomic(dir / "dataset.bin", bin.buffer());
  tokenizer.save(dir / "vocab.txt");
}

std::pair<Dataset, Tokenizer> load_dataset(const std::filesystem::path& dir) {
  Tokenizer tokenizer = Tokenizer::load(dir / "vocab.txt");
  const std::string raw = read_file(dir / "dataset.bin");
  BinaryReader bin(raw);
  if (bin.bytes(kDataMagic.size()) != kDataMagic) throw FormatError("dataset.bin: bad magic");
  if (bin.u32() != kDataVersion) throw FormatError("dataset.bin: unsupported version");
  const std::uint64_t count = bin.u64();
  Dataset ds;
  ds.options.image_size = bin.u64();
  ds.seed = bin.u64();
  ds.options.max_prompt_tokens = bin.u64();

  std::ifstream manifest(dir / "manifest.jsonl");
  if (!manifest) throw FormatError("cannot open " + (dir / "manifest.jsonl").string());
  std::string line;
  const std::size_t pixels = ds.options.image_size * ds.options.image_size * 3;
  while (std::getline(manifest, line)) {
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw FormatError("manifest.jsonl: " + std::string(e.what()));
    }
    DatasetRecord rec;
    try {
      rec.artwork.id = j.at("id").get<std::string>();
      rec.artwork.category = category_from_string(j.at("category").get<std::string>());
      rec.artwork.params = params_from_json(j.at("params"));
      rec.artwork.description = j.at("description").get<std::string>();
      rec.scores = scores_from_json(j.at("scores"));
      rec.critique = j.at("critique").get<std::string>();
    } catch (const json::exception& e) {
      throw FormatError("manifest.jsonl: " + std::string(e.what()));
    }
    if (bin.str() != rec.artwork.id) throw FormatError("dataset.bin and manifest.jsonl disagree on artwork order");
    rec.artwork.image = Image(ds.options.image_size);
    for (std::size_t i = 0; i < pixels; ++i) rec.artwork.image.pixels[i] = bin.f64();
    rec.sample = make_sample(rec.artwork.id, rec.artwork.image, rec.artwork.description, rec.critique,
                             rec.scores.total, tokenizer, ds.options);
    ds.records.push_back(std::move(rec));
  }
  if (ds.records.size() != count || !bin.done()) throw FormatError("dataset.bin record count does not match manifest");
  return {std::move(ds), std::move(tokenizer)};
}

void save_split(const DatasetSplit& split, const std::filesystem::path& path) {
  const json j = {{"seed", split.seed}, {"train", split.train}, {"test", split.test}};
  write_file_atomic(path, j.dump(2) + "\n");
}

DatasetSplit load_split(const std::filesystem::path& path) {
  try {
    const json j = json::parse(read_file(path));
    DatasetSplit split;
    split.seed = j.at("seed").get<std::uint64_t>();
    split.train = j.at("train").get<std::vector<std::string>>();
    split.test = j.at("test").get<std::vector<std::string>>();
    return split;
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

}  // namespace atelier
