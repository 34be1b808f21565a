#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "atelier/quantization.hpp"
#include "atelier/tensor.hpp"

namespace atelier {

class VlmModel;

// Trainable low-rank update B * A added next to a frozen layer, scaled by
// alpha / rank. A is [rank x in], B is [out x rank].
struct LoraAdapter {
  Tensor a;
  Tensor b;
  std::size_t rank = 0;
  double alpha = 0.0;

  double scaling() const { return alpha / static_cast<double>(rank); }
};

enum class LayerRole { attention, mlp, other };

// A dense linear layer that can be frozen into 4-bit storage and given a
// LoRA adapter:
//   dense:     y = x W^T + b
//   quantized: y = x Dequant(W_q)^T + b
//   adapted:   y = x Dequant(W_q)^T + b + (alpha/r) * (x A^T) B^T
// The bias of a quantized layer is frozen along with its weight.
class AdaptableLinear {
 public:
  AdaptableLinear() = default;
  AdaptableLinear(std::string name, LayerRole role, Tensor weight, Tensor bias);

  Tensor forward(const Tensor& x) const;

  const std::string& name() const { return name_; }
  LayerRole role() const { return role_; }
  std::size_t in_features() const { return in_; }
  std::size_t out_features() const { return out_; }

  bool is_quantized() const { return quant_.has_value(); }
  bool has_adapter() const { return adapter_.has_value(); }

  // Dense storage; throws ContractError when the layer is quantized.
  const Tensor& weight() const;
  const Tensor& bias() const { return bias_; }
  const QuantizedLinear& quantized() const;
  const LoraAdapter& adapter() const;
  LoraAdapter& adapter();

  // Weight actually applied to inputs: dense, dequantized, or dequantized
  // plus the scaled adapter product.
  Tensor effective_weight() const;

  void quantize(std::size_t block);
  void load_quantized(QuantizedLinear q, Tensor bias);
  void attach(LoraAdapter adapter);
  // Folds the adapter into a dense weight and drops quantized storage.
  void merge();

  // Deep copy sharing no tensor storage with this layer.
  AdaptableLinear clone() const;

 private:
  std::string name_;
  LayerRole role_ = LayerRole::other;
  std::size_t in_ = 0;
  std::size_t out_ = 0;
  Tensor weight_;
  Tensor bias_;
  std::optional<QuantizedLinear> quant_;
  Tensor dequantized_;  // cache of Dequant(W_q), never trainable
  std::optional<LoraAdapter> adapter_;
};

struct LoraTargets {
  bool attention = true;
  bool mlp = true;

  bool matches(LayerRole role) const {
    return (role == LayerRole::attention && attention) || (role == LayerRole::mlp && mlp);
  }
  bool empty() const { return !attention && !mlp; }
};

// Quantizes every targeted layer of the model that is still dense, without
// adding adapters. The result is the frozen base that adapters sit on.
void quantize_base(VlmModel& model, LoraTargets targets);

// Quantizes targeted layers (if needed) and attaches fresh adapters:
// A ~ N(0, 1/sqrt(in)) from a seed derived from `seed` and the layer index,
// B = 0. Attaching twice to one layer is a ContractError.
void inject_lora(VlmModel& model, LoraTargets targets, std::size_t rank, double alpha, std::uint64_t seed);

// Replaces every adapted layer with the dense weight Dequant(W_q) + (alpha/r) B A.
// Throws ContractError when the model carries no adapters, so merging a
// merged model is reported rather than silently ignored.
void merge_lora(VlmModel& model);

}  // namespace atelier
