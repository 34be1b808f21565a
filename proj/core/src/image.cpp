#include "atelier/image.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <string>

#include "atelier/errors.hpp"

namespace atelier {

namespace {

// Next whitespace-separated header field, skipping '#' comments.
std::string next_field(std::istream& in) {
  std::string field;
  char ch = 0;
  while (in.get(ch)) {
    if (ch == '#') {
      std::string discard;
      std::getline(in, discard);
      continue;
    }
    if (std::isspace(static_cast<unsigned char>(ch))) {
      if (!field.empty()) break;
      continue;
    }
    field.push_back(ch);
  }
  return field;
}

std::size_t parse_size(const std::string& text, const std::filesystem::path& path) {
  try {
    std::size_t used = 0;
    const unsigned long long v = std::stoull(text, &used);
    if (used != text.size()) throw std::invalid_argument(text);
    return static_cast<std::size_t>(v);
  } catch (const std::exception&) {
    throw FormatError(path.string() + ": malformed PPM header field '" + text + "'");
  }
}

}  // namespace

void write_ppm(const Image& image, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  out << "P6\n" << image.size << ' ' << image.size << "\n255\n";
  std::string bytes(image.pixels.size(), '\0');
  for (std::size_t i = 0; i < image.pixels.size(); ++i) {
    const double v = std::clamp(image.pixels[i], 0.0, 1.0);
    bytes[i] = static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0)));
  }
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("failed writing " + path.string());
}

Image read_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open image " + path.string());
  const std::string magic = next_field(in);
  if (magic != "P6" && magic != "P3") throw FormatError(path.string() + ": not a P3/P6 PPM file");
  const std::size_t width = parse_size(next_field(in), path);
  const std::size_t height = parse_size(next_field(in), path);
  const std::size_t maxval = parse_size(next_field(in), path);
  if (width == 0 || width != height) throw FormatError(path.string() + ": image must be square and non-empty");
  if (maxval == 0 || maxval > 65535) throw FormatError(path.string() + ": unsupported maxval");
  Image image(width);
  const std::size_t n = image.pixels.size();
  if (magic == "P3") {
    for (std::size_t i = 0; i < n; ++i) {
      const std::string field = next_field(in);
      if (field.empty()) throw FormatError(path.string() + ": truncated pixel data");
      image.pixels[i] = static_cast<double>(parse_size(field, path)) / static_cast<double>(maxval);
    }
    return image;
  }
  const std::size_t width_bytes = maxval < 256 ? 1 : 2;
  std::string bytes(n * width_bytes, '\0');
  in.read(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (static_cast<std::size_t>(in.gcount()) != bytes.size()) throw FormatError(path.string() + ": truncated pixel data");
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t v = static_cast<unsigned char>(bytes[i * width_bytes]);
    if (width_bytes == 2) v = (v << 8) | static_cast<unsigned char>(bytes[i * 2 + 1]);
    image.pixels[i] = static_cast<double>(v) / static_cast<double>(maxval);
  }
  return image;
}

}  // namespace atelier
