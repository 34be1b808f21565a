#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "atelier/image.hpp"

namespace atelier {

enum class Category { child, professional, masterpiece };

const char* to_string(Category category);
Category category_from_string(std::string_view text);

enum class MotifKind { circle, square, triangle, star, house, tree, sun, figure };
inline constexpr std::size_t kMotifKinds = 8;

const char* to_string(MotifKind kind);
MotifKind motif_from_string(std::string_view text);

// Reference prior over motif kinds used to score originality. Children's
// paintings draw kinds from this prior; the other categories draw uniformly.
const std::array<double, kMotifKinds>& motif_prior();

struct Hue {
  const char* name;
  double r, g, b;
};
inline constexpr std::size_t kPaletteSize = 10;
const std::array<Hue, kPaletteSize>& palette();
std::size_t hue_from_string(std::string_view name);

struct Motif {
  MotifKind kind = MotifKind::circle;
  std::size_t hue = 0;
  double x = 0.0;  // center, pixels from the left edge
  double y = 0.0;  // center, pixels from the top edge
  double size = 4.0;  // radius in pixels
  bool operator==(const Motif&) const = default;
};

// Everything the renderer and the scoring oracle consume.
struct ArtworkParams {
  std::uint64_t seed = 0;
  Category category = Category::child;
  std::size_t image_size = 32;
  std::size_t background_top = 0;     // palette index
  std::size_t background_bottom = 0;  // palette index
  double noise = 0.0;                 // amplitude in [0, kNoiseMax]
  std::vector<Motif> motifs;
  bool operator==(const ArtworkParams&) const = default;
};

inline constexpr double kNoiseMax = 0.3;
inline constexpr std::size_t kMaxMotifs = 7;

struct Artwork {
  std::string id;
  Image image;
  ArtworkParams params;
  std::string description;
  Category category = Category::child;
};

// Five rubric dimensions of 20 points each. total is always the exact sum.
struct RubricScores {
  double originality = 0.0;
  double color = 0.0;
  double composition = 0.0;
  double texture = 0.0;
  double content = 0.0;
  double total = 0.0;

  std::array<double, 5> dimensions() const { return {originality, color, composition, texture, content}; }
  static RubricScores from_dimensions(const std::array<double, 5>& dims);
};

inline constexpr std::array<std::string_view, 5> kDimensionNames = {"originality", "color", "composition", "texture",
                                                                    "content"};

// Score bands on the 100-point scale. Each band owns a small adjective set;
// no adjective belongs to two bands.
struct Band {
  double lower;  // inclusive
  double upper;  // exclusive, except the last band which includes 100
  std::string_view name;
  std::array<std::string_view, 2> adjectives;
};

inline constexpr std::array<Band, 5> kCritiqueBands = {{
    {0.0, 40.0, "poor", {"poor", "weak"}},
    {40.0, 60.0, "fair", {"fair", "modest"}},
    {60.0, 75.0, "good", {"good", "solid"}},
    {75.0, 90.0, "strong", {"strong", "impressive"}},
    {90.0, 100.0, "exceptional", {"exceptional", "outstanding"}},
}};

// Index into kCritiqueBands for a 0-100 score (clamped).
std::size_t band_index(double score_100);
// Band owning an adjective, or -1 when the word is not a band adjective.
int band_of_adjective(std::string_view word);

// Deterministic draw of generation parameters for one artwork.
ArtworkParams sample_params(std::uint64_t seed, Category category, std::size_t image_size = 32);
// Pure raster of the parameters, seeded pixel noise included.
Image render(const ArtworkParams& params);
// sample_params + render + description.
Artwork render_artwork(std::uint64_t seed, Category category, std::size_t image_size = 32);

// Prior probability of the motif-kind multiset given its size:
// k! / prod(c_i!) * prod(p_i^c_i). An empty painting has frequency 1.
double combo_frequency(const std::vector<Motif>& motifs);
std::size_t distinct_hues(const ArtworkParams& params);
// Distance of the motif centroid from the canvas center in pixels; 0 with no motifs.
double centroid_offset(const ArtworkParams& params);

// Scoring oracle:
//   color       = 20 min(1, distinct_hues / 6)
//   composition = 20 (1 - clamp(centroid_offset / half_canvas, 0, 1)), 0 with no motifs
//   texture     = 20 min(1, noise / kNoiseMax)
//   content     = 20 min(1, motif_count / 5)
//   originality = 20 (1 - combo_frequency)
RubricScores ground_truth_scores(const ArtworkParams& params);

// Second "expert": each dimension perturbed by N(0, 1) and clamped to [0, 20].
RubricScores simulate_rater(const RubricScores& truth, std::uint64_t seed);

struct ArtworkTexts {
  std::string description;
  std::string critique;
};

std::string describe(const ArtworkParams& params);
// One sentence per dimension, "<dimension> <floor(points)> of 20 , <adjective> .",
// then "overall a <adjective> painting scoring <floor(total)> of 100 ."
// Band boundaries fall on whole points of the 20-point scale, so the floored
// number always sits in the same band as the exact score.
std::string critique_for(const RubricScores& scores);
ArtworkTexts compose_texts(const ArtworkParams& params, const RubricScores& scores);

// Fixed system-prompt preamble naming the rubric.
std::string_view rubric_preamble();

}  // namespace atelier
