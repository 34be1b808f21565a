#include "atelier/quantization.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "atelier/errors.hpp"

namespace atelier {

namespace {

std::uint8_t encode_level(int level) { return static_cast<std::uint8_t>(level & 0x0F); }

// round-half-toward-zero of |t| <= 7
int nearest_level(double t) {
  const double mag = std::ceil(std::fabs(t) - 0.5);
  const int level = static_cast<int>(std::min(mag, static_cast<double>(kQuantLevels)));
  return t < 0.0 ? -level : level;
}

}  // namespace

std::uint8_t QuantizedLinear::nibble(std::size_t index) const {
  const std::uint8_t byte = codes[index / 2];
  return (index % 2 == 0) ? (byte & 0x0F) : (byte >> 4);
}

int decode_level(std::uint8_t nibble) {
  if (nibble > 0x0F || nibble == 0x08) {
    throw FormatError("quantized code " + std::to_string(nibble) + " is outside the 4-bit level range");
  }
  return nibble < 8 ? nibble : static_cast<int>(nibble) - 16;
}

QuantizedLinear quantize(const Tensor& weights, std::size_t block) {
  if (block == 0) throw ContractError("quantize: block length must be at least 1");
  if (weights.ndim() != 2) throw DimensionError("quantize: weights must be 2-D, got " + shape_string(weights.shape()));
  QuantizedLinear q;
  q.out_features = weights.rows();
  q.in_features = weights.cols();
  q.block = block;
  const auto w = weights.data();
  const std::size_t n = w.size();
  const std::size_t n_blocks = (n + block - 1) / block;
  q.scales.assign(n_blocks, 0.0);
  q.codes.assign((n + 1) / 2, 0);
  for (std::size_t b = 0; b < n_blocks; ++b) {
    const std::size_t lo = b * block, hi = std::min(n, lo + block);
    double scale = 0.0;
    for (std::size_t i = lo; i < hi; ++i) scale = std::max(scale, std::fabs(w[i]));
    q.scales[b] = scale;
    if (scale == 0.0) continue;
    for (std::size_t i = lo; i < hi; ++i) {
      const std::uint8_t code = encode_level(nearest_level(w[i] / scale * kQuantLevels));
      q.codes[i / 2] |= (i % 2 == 0) ? code : static_cast<std::uint8_t>(code << 4);
    }
  }
  return q;
}

Tensor dequantize(const QuantizedLinear& q) {
  const std::size_t n = q.size();
  if (n == 0 || q.block == 0) throw FormatError("quantized layer has an empty shape or zero block length");
  if (q.codes.size() != (n + 1) / 2 || q.scales.size() != (n + q.block - 1) / q.block) {
    throw FormatError("quantized layer buffers do not match its " + std::to_string(q.out_features) + "x" +
                      std::to_string(q.in_features) + " shape");
  }
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const int level = decode_level(q.nibble(i));
    out[i] = (static_cast<double>(level) / kQuantLevels) * q.scales[i / q.block];
  }
  return Tensor({q.out_features, q.in_features}, std::move(out));
}

}  // namespace atelier
