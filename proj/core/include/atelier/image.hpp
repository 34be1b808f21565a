#pragma once

#include <cstddef>
#include <filesystem>
#include <vector>

namespace atelier {

// Square RGB raster, row-major height x width x 3, channel values in [0, 1].
struct Image {
  std::size_t size = 0;
  std::vector<double> pixels;

  Image() = default;
  explicit Image(std::size_t side, double fill = 0.0) : size(side), pixels(side * side * 3, fill) {}

  double& at(std::size_t y, std::size_t x, std::size_t c) { return pixels[(y * size + x) * 3 + c]; }
  double at(std::size_t y, std::size_t x, std::size_t c) const { return pixels[(y * size + x) * 3 + c]; }
};

// Binary PPM (P6, maxval 255). Channels are rounded to the nearest of 256
// levels on write, so a PPM round trip is lossy; training reads the float64
// tensors from the dataset binary instead.
void write_ppm(const Image& image, const std::filesystem::path& path);
// Accepts P6 and P3 with any maxval; non-square images are rejected.
Image read_ppm(const std::filesystem::path& path);

}  // namespace atelier
