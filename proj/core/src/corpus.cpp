#include "atelier/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <set>
#include <span>
#include <sstream>

#include "atelier/errors.hpp"
#include "atelier/rng.hpp"

namespace atelier {

namespace {

constexpr std::array<const char*, kMotifKinds> kMotifNames = {"circle", "square", "triangle", "star",
                                                               "house",  "tree",   "sun",      "figure"};

constexpr std::array<double, kMotifKinds> kMotifPrior = {0.22, 0.18, 0.14, 0.07, 0.10, 0.12, 0.12, 0.05};

constexpr std::array<Hue, kPaletteSize> kPalette = {{
    {"red", 0.85, 0.15, 0.15},
    {"orange", 0.95, 0.55, 0.10},
    {"yellow", 0.95, 0.85, 0.20},
    {"green", 0.20, 0.65, 0.25},
    {"blue", 0.20, 0.35, 0.85},
    {"purple", 0.55, 0.25, 0.70},
    {"pink", 0.95, 0.55, 0.70},
    {"brown", 0.50, 0.30, 0.15},
    {"white", 0.97, 0.97, 0.97},
    {"black", 0.08, 0.08, 0.08},
}};

std::size_t draw_weighted(Rng& rng, std::span<const double> weights) {
  double total = 0.0;
  for (double w : weights) total += w;
  double u = rng.uniform() * total;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    u -= weights[i];
    if (u < 0.0) return i;
  }
  return weights.size() - 1;
}

// Distinct palette indices, drawn without replacement.
std::vector<std::size_t> draw_palette(Rng& rng, std::size_t count) {
  std::vector<std::size_t> all(kPaletteSize);
  for (std::size_t i = 0; i < kPaletteSize; ++i) all[i] = i;
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t j = i + rng.below(kPaletteSize - i);
    std::swap(all[i], all[j]);
  }
  all.resize(count);
  return all;
}

bool inside(const Motif& m, double px, double py) {
  const double dx = px - m.x, dy = py - m.y, r = m.size;
  switch (m.kind) {
    case MotifKind::circle:
      return dx * dx + dy * dy <= r * r;
    case MotifKind::square:
      return std::fabs(dx) <= 0.8 * r && std::fabs(dy) <= 0.8 * r;
    case MotifKind::triangle:
      return dy >= -r && dy <= r && std::fabs(dx) <= 0.5 * (dy + r);
    case MotifKind::star: {
      const double dist = std::sqrt(dx * dx + dy * dy);
      const double angle = std::atan2(dy, dx);
      return dist <= r * (0.55 + 0.45 * std::cos(5.0 * angle));
    }
    case MotifKind::house: {
      const bool body = std::fabs(dx) <= 0.7 * r && dy >= 0.0 && dy <= r;
      const bool roof = dy < 0.0 && dy >= -r && std::fabs(dx) <= 0.9 * (dy + r);
      return body || roof;
    }
    case MotifKind::tree: {
      const double cy = dy + 0.35 * r;
      const bool crown = dx * dx + cy * cy <= 0.45 * r * r;
      const bool trunk = std::fabs(dx) <= 0.18 * r && dy >= 0.0 && dy <= r;
      return crown || trunk;
    }
    case MotifKind::sun: {
      const double d2 = dx * dx + dy * dy;
      if (d2 <= 0.36 * r * r) return true;
      const double angle = std::atan2(dy, dx);
      return d2 <= r * r && std::cos(8.0 * angle) > 0.6;
    }
    case MotifKind::figure: {
      const double hy = dy + 0.6 * r;
      const bool head = dx * dx + hy * hy <= 0.09 * r * r;
      const bool body = std::fabs(dx) <= 0.12 * r && dy >= -0.3 * r && dy <= 0.4 * r;
      const bool arms = std::fabs(dy + 0.05 * r) <= 0.1 * r && std::fabs(dx) <= 0.6 * r;
      const bool legs = dy > 0.4 * r && dy <= r && std::fabs(std::fabs(dx) - 0.5 * (dy - 0.4 * r)) <= 0.15 * r;
      return head || body || arms || legs;
    }
  }
  return false;
}

std::string_view row_word(double y, double side) {
  if (y < side / 3.0) return "top";
  if (y < 2.0 * side / 3.0) return "middle";
  return "bottom";
}

std::string_view column_word(double x, double side) {
  if (x < side / 3.0) return "left";
  if (x < 2.0 * side / 3.0) return "center";
  return "right";
}

std::string_view article_for(std::string_view word) {
  return (!word.empty() && std::string_view("aeiou").find(word.front()) != std::string_view::npos) ? "an" : "a";
}

std::string_view texture_word(double noise) {
  const double t = noise / kNoiseMax;
  if (t < 1.0 / 3.0) return "smooth";
  if (t < 2.0 / 3.0) return "textured";
  return "rough";
}

}  // namespace

const char* to_string(Category category) {
  switch (category) {
    case Category::child:
      return "child";
    case Category::professional:
      return "professional";
    case Category::masterpiece:
      return "masterpiece";
  }
  return "child";
}

Category category_from_string(std::string_view text) {
  if (text == "child") return Category::child;
  if (text == "professional") return Category::professional;
  if (text == "masterpiece") return Category::masterpiece;
  throw FormatError("unknown category '" + std::string(text) + "'");
}

const char* to_string(MotifKind kind) { return kMotifNames[static_cast<std::size_t>(kind)]; }

MotifKind motif_from_string(std::string_view text) {
  for (std::size_t i = 0; i < kMotifKinds; ++i) {
    if (text == kMotifNames[i]) return static_cast<MotifKind>(i);
  }
  throw FormatError("unknown motif kind '" + std::string(text) + "'");
}

const std::array<double, kMotifKinds>& motif_prior() { return kMotifPrior; }
const std::array<Hue, kPaletteSize>& palette() { return kPalette; }

std::size_t hue_from_string(std::string_view name) {
  for (std::size_t i = 0; i < kPaletteSize; ++i) {
    if (name == kPalette[i].name) return i;
  }
  throw FormatError("unknown hue '" + std::string(name) + "'");
}

RubricScores RubricScores::from_dimensions(const std::array<double, 5>& dims) {
  RubricScores s;
  s.originality = dims[0];
  s.color = dims[1];
  s.composition = dims[2];
  s.texture = dims[3];
  s.content = dims[4];
  s.total = dims[0] + dims[1] + dims[2] + dims[3] + dims[4];
  return s;
}

std::size_t band_index(double score_100) {
  for (std::size_t i = 0; i + 1 < kCritiqueBands.size(); ++i) {
    if (score_100 < kCritiqueBands[i].upper) return i;
  }
  return kCritiqueBands.size() - 1;
}

int band_of_adjective(std::string_view word) {
  for (std::size_t i = 0; i < kCritiqueBands.size(); ++i) {
    for (auto adj : kCritiqueBands[i].adjectives) {
      if (adj == word) return static_cast<int>(i);
    }
  }
  return -1;
}

ArtworkParams sample_params(std::uint64_t seed, Category category, std::size_t image_size) {
  Rng rng(seed);
  ArtworkParams p;
  p.seed = seed;
  p.category = category;
  p.image_size = image_size;
  const double side = static_cast<double>(image_size);
  const double center = side / 2.0;

  std::size_t motif_count = 0;
  std::size_t palette_count = 0;
  switch (category) {
    case Category::child: {
      constexpr std::array<double, 5> counts = {0.06, 0.24, 0.28, 0.24, 0.18};
      motif_count = draw_weighted(rng, counts);
      palette_count = 2 + rng.below(2);
      p.noise = rng.uniform(0.0, 0.5) * kNoiseMax;
      break;
    }
    case Category::professional:
      motif_count = 2 + rng.below(5);
      palette_count = 3 + rng.below(4);
      p.noise = rng.uniform(0.2, 0.9) * kNoiseMax;
      break;
    case Category::masterpiece:
      motif_count = 4 + rng.below(4);
      palette_count = 5 + rng.below(4);
      p.noise = rng.uniform(0.5, 1.0) * kNoiseMax;
      break;
  }
  const auto colors = draw_palette(rng, palette_count);
  p.background_top = colors[rng.below(colors.size())];
  p.background_bottom = rng.uniform() < 0.35 ? p.background_top : colors[rng.below(colors.size())];

  const std::array<double, kMotifKinds> flat = {1, 1, 1, 1, 1, 1, 1, 1};
  for (std::size_t i = 0; i < motif_count; ++i) {
    Motif m;
    m.kind = static_cast<MotifKind>(draw_weighted(rng, category == Category::child ? kMotifPrior : flat));
    m.hue = colors[rng.below(colors.size())];
    m.size = rng.uniform(3.0, 6.5);
    const double lo = m.size, hi = side - m.size;
    switch (category) {
      case Category::child:
        m.x = rng.uniform(lo, hi);
        m.y = rng.uniform(lo, hi);
        break;
      case Category::professional:
        m.x = std::clamp(rng.normal(center, side / 5.0), lo, hi);
        m.y = std::clamp(rng.normal(center, side / 5.0), lo, hi);
        break;
      case Category::masterpiece:
        // Balanced layout: mirror every other motif through the center.
        if (i % 2 == 1) {
          const Motif& prev = p.motifs.back();
          m.x = std::clamp(2.0 * center - prev.x + rng.normal(0.0, 1.0), lo, hi);
          m.y = std::clamp(2.0 * center - prev.y + rng.normal(0.0, 1.0), lo, hi);
        } else {
          m.x = rng.uniform(lo, hi);
          m.y = rng.uniform(lo, hi);
        }
        break;
    }
    p.motifs.push_back(m);
  }
  return p;
}

Image render(const ArtworkParams& params) {
  const std::size_t side = params.image_size;
  if (side == 0) throw ContractError("render: image_size must be positive");
  Image image(side);
  const Hue& top = kPalette.at(params.background_top);
  const Hue& bottom = kPalette.at(params.background_bottom);
  for (std::size_t y = 0; y < side; ++y) {
    const double t = side > 1 ? static_cast<double>(y) / static_cast<double>(side - 1) : 0.0;
    const double rgb[3] = {top.r + (bottom.r - top.r) * t, top.g + (bottom.g - top.g) * t,
                           top.b + (bottom.b - top.b) * t};
    for (std::size_t x = 0; x < side; ++x) {
      for (std::size_t c = 0; c < 3; ++c) image.at(y, x, c) = rgb[c];
    }
  }
  for (const Motif& m : params.motifs) {
    const Hue& hue = kPalette.at(m.hue);
    const double rgb[3] = {hue.r, hue.g, hue.b};
    for (std::size_t y = 0; y < side; ++y) {
      for (std::size_t x = 0; x < side; ++x) {
        if (!inside(m, static_cast<double>(x) + 0.5, static_cast<double>(y) + 0.5)) continue;
        for (std::size_t c = 0; c < 3; ++c) image.at(y, x, c) = rgb[c];
      }
    }
  }
  if (params.noise > 0.0) {
    Rng rng(derive_seed(params.seed, 0x6e6f697365ULL));
    for (auto& v : image.pixels) v = std::clamp(v + params.noise * rng.uniform(-1.0, 1.0), 0.0, 1.0);
  }
  return image;
}

Artwork render_artwork(std::uint64_t seed, Category category, std::size_t image_size) {
  Artwork art;
  art.params = sample_params(seed, category, image_size);
  art.image = render(art.params);
  art.description = describe(art.params);
  art.category = category;
  return art;
}

double combo_frequency(const std::vector<Motif>& motifs) {
  if (motifs.empty()) return 1.0;
  std::array<int, kMotifKinds> counts{};
  for (const auto& m : motifs) ++counts[static_cast<std::size_t>(m.kind)];
  // log of k! / prod(c!) * prod(p^c)
  double log_p = std::lgamma(static_cast<double>(motifs.size()) + 1.0);
  for (std::size_t i = 0; i < kMotifKinds; ++i) {
    if (counts[i] == 0) continue;
    log_p += counts[i] * std::log(kMotifPrior[i]) - std::lgamma(counts[i] + 1.0);
  }
  return std::exp(log_p);
}

std::size_t distinct_hues(const ArtworkParams& params) {
  std::set<std::size_t> hues{params.background_top, params.background_bottom};
  for (const auto& m : params.motifs) hues.insert(m.hue);
  return hues.size();
}

double centroid_offset(const ArtworkParams& params) {
  if (params.motifs.empty()) return 0.0;
  double cx = 0.0, cy = 0.0;
  for (const auto& m : params.motifs) {
    cx += m.x;
    cy += m.y;
  }
  const double n = static_cast<double>(params.motifs.size());
  const double half = static_cast<double>(params.image_size) / 2.0;
  return std::hypot(cx / n - half, cy / n - half);
}

RubricScores ground_truth_scores(const ArtworkParams& params) {
  const double half = static_cast<double>(params.image_size) / 2.0;
  std::array<double, 5> dims{};
  dims[0] = 20.0 * (1.0 - combo_frequency(params.motifs));
  dims[1] = 20.0 * std::min(1.0, static_cast<double>(distinct_hues(params)) / 6.0);
  dims[2] = params.motifs.empty() ? 0.0 : 20.0 * (1.0 - std::clamp(centroid_offset(params) / half, 0.0, 1.0));
  dims[3] = 20.0 * std::min(1.0, params.noise / kNoiseMax);
  dims[4] = 20.0 * std::min(1.0, static_cast<double>(params.motifs.size()) / 5.0);
  return RubricScores::from_dimensions(dims);
}

RubricScores simulate_rater(const RubricScores& truth, std::uint64_t seed) {
  Rng rng(seed);
  auto dims = truth.dimensions();
  for (auto& d : dims) d = std::clamp(d + rng.normal(), 0.0, 20.0);
  return RubricScores::from_dimensions(dims);
}

std::string describe(const ArtworkParams& params) {
  const double side = static_cast<double>(params.image_size);
  std::ostringstream out;
  out << (params.category == Category::child ? "a child 's drawing of" : "a painting of");
  if (params.motifs.empty()) out << " an empty scene";
  for (std::size_t i = 0; i < params.motifs.size(); ++i) {
    const Motif& m = params.motifs[i];
    if (i > 0) out << (i + 1 == params.motifs.size() ? " and" : " ,");
    const std::string_view hue = kPalette.at(m.hue).name;
    out << ' ' << article_for(hue) << ' ' << hue << ' ' << to_string(m.kind) << " at the ";
    const auto row = row_word(m.y, side);
    const auto col = column_word(m.x, side);
    if (row == "middle" && col == "center") {
      out << "center";
    } else {
      out << row << ' ' << col;
    }
  }
  const std::string_view top = kPalette.at(params.background_top).name;
  const std::string_view bottom = kPalette.at(params.background_bottom).name;
  if (params.background_top == params.background_bottom) {
    out << " on a plain " << top << " background";
  } else {
    out << " over " << article_for(top) << ' ' << top << " to " << bottom << " gradient";
  }
  out << " with " << texture_word(params.noise) << " brushwork .";
  return out.str();
}

std::string critique_for(const RubricScores& scores) {
  std::ostringstream out;
  const auto dims = scores.dimensions();
  for (std::size_t i = 0; i < dims.size(); ++i) {
    const double points = std::clamp(dims[i], 0.0, 20.0);
    const auto& band = kCritiqueBands[band_index(points * 5.0)];
    out << kDimensionNames[i] << ' ' << static_cast<int>(std::floor(points)) << " of 20 , "
        << band.adjectives[i % band.adjectives.size()] << " . ";
  }
  const double total = std::clamp(scores.total, 0.0, 100.0);
  out << "overall a " << kCritiqueBands[band_index(total)].adjectives[0] << " painting scoring "
      << static_cast<int>(std::floor(total)) << " of 100 .";
  return out.str();
}

ArtworkTexts compose_texts(const ArtworkParams& params, const RubricScores& scores) {
  return {describe(params), critique_for(scores)};
}

std::string_view rubric_preamble() {
  return "rubric : originality , color , composition , texture and content , 20 points each , total 100 .";
}

}  // namespace atelier
