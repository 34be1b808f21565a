#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "atelier/tensor.hpp"

namespace atelier {

// Blockwise 4-bit absmax quantization with a symmetric uniform codebook.
//
// Weights are taken in row-major order and cut into blocks of `block`
// consecutive values (the last block may be short). Each block stores
// scale = max |w| and one signed level q in {-7, ..., +7} per weight, so
//   w_hat = (q / 7) * scale.
// Levels are stored as 4-bit two's complement nibbles, two per byte (low
// nibble first). Nibble 0 is level 0, which makes an all-zero code buffer a
// zero matrix; nibble 0b1000 (-8) is never produced and is rejected on
// decode.
struct QuantizedLinear {
  std::size_t out_features = 0;
  std::size_t in_features = 0;
  std::size_t block = 0;
  std::vector<std::uint8_t> codes;  // ceil(out*in / 2) bytes
  std::vector<double> scales;       // ceil(out*in / block) entries

  std::size_t size() const { return out_features * in_features; }
  std::uint8_t nibble(std::size_t index) const;
};

inline constexpr int kQuantLevels = 7;

// Maps w to the nearest level of its block, ties toward zero.
QuantizedLinear quantize(const Tensor& weights, std::size_t block);

// Inverse map. Throws FormatError on the reserved nibble or on buffers whose
// sizes disagree with the recorded shape.
Tensor dequantize(const QuantizedLinear& q);

// Decodes one nibble into its signed level.
int decode_level(std::uint8_t nibble);

}  // namespace atelier
