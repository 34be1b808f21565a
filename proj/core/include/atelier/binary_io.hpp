#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

namespace atelier {

// Little-endian encoder into an in-memory buffer.
class BinaryWriter {
 public:
  void bytes(std::string_view data) { buffer_.append(data); }
  void u8(std::uint8_t v) { buffer_.push_back(static_cast<char>(v)); }
  void u32(std::uint32_t v);
  void u64(std::uint64_t v);
  void f64(double v);
  // u32 length prefix, then the bytes.
  void str(std::string_view s);

  const std::string& buffer() const { return buffer_; }

 private:
  std::string buffer_;
};

// Bounds-checked decoder; every read past the end throws FormatError.
class BinaryReader {
 public:
  explicit BinaryReader(std::string_view data) : data_(data) {}

  std::string_view bytes(std::size_t n);
  std::uint8_t u8();
  std::uint32_t u32();
  std::uint64_t u64();
  double f64();
  std::string str();

  std::size_t remaining() const { return data_.size() - pos_; }
  bool done() const { return pos_ == data_.size(); }

 private:
  std::string_view data_;
  std::size_t pos_ = 0;
};

std::string read_file(const std::filesystem::path& path);
// Writes to "<path>.tmp" and renames over the target, so readers never see
// a half-written file.
void write_file_atomic(const std::filesystem::path& path, std::string_view contents);

}  // namespace atelier
