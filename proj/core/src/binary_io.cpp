#include "atelier/binary_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "atelier/errors.hpp"

namespace atelier {

void BinaryWriter::u32(std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buffer_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void BinaryWriter::u64(std::uint64_t v) {
  for (int i = 0; i < 8; ++i) buffer_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void BinaryWriter::f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }

void BinaryWriter::str(std::string_view s) {
  u32(static_cast<std::uint32_t>(s.size()));
  bytes(s);
}

std::string_view BinaryReader::bytes(std::size_t n) {
  if (n > remaining()) throw FormatError("truncated file: needed " + std::to_string(n) + " more bytes");
  const auto out = data_.substr(pos_, n);
  pos_ += n;
  return out;
}

std::uint8_t BinaryReader::u8() { return static_cast<std::uint8_t>(bytes(1)[0]); }

std::uint32_t BinaryReader::u32() {
  const auto b = bytes(4);
  std::uint32_t v = 0;
  for (int i = 3; i >= 0; --i) v = (v << 8) | static_cast<unsigned char>(b[static_cast<std::size_t>(i)]);
  return v;
}

std::uint64_t BinaryReader::u64() {
  const auto b = bytes(8);
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | static_cast<unsigned char>(b[static_cast<std::size_t>(i)]);
  return v;
}

double BinaryReader::f64() { return std::bit_cast<double>(u64()); }

std::string BinaryReader::str() {
  const std::uint32_t n = u32();
  return std::string(bytes(n));
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file_atomic(const std::filesystem::path& path, std::string_view contents) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot open " + tmp.string() + " for writing");
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    out.flush();
    if (!out) throw FormatError("failed writing " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace atelier
