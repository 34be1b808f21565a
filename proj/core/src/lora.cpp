#include "atelier/lora.hpp"

#include <cmath>

#include "atelier/errors.hpp"
#include "atelier/model.hpp"
#include "atelier/ops.hpp"
#include "atelier/rng.hpp"

namespace atelier {

AdaptableLinear::AdaptableLinear(std::string name, LayerRole role, Tensor weight, Tensor bias)
    : name_(std::move(name)), role_(role), weight_(std::move(weight)), bias_(std::move(bias)) {
  if (weight_.ndim() != 2) throw DimensionError(name_ + ": weight must be 2-D");
  out_ = weight_.rows();
  in_ = weight_.cols();
  if (bias_.defined() && bias_.numel() != out_) throw DimensionError(name_ + ": bias length mismatch");
}

Tensor AdaptableLinear::forward(const Tensor& x) const {
  if (!quant_) return linear(x, weight_, bias_);
  Tensor y = linear(x, dequantized_, bias_);
  if (!adapter_) return y;
  const Tensor low = linear(x, adapter_->a);
  return add(y, scale(linear(low, adapter_->b), adapter_->scaling()));
}

const Tensor& AdaptableLinear::weight() const {
  if (quant_) throw ContractError(name_ + " is quantized; it has no dense weight");
  return weight_;
}

const QuantizedLinear& AdaptableLinear::quantized() const {
  if (!quant_) throw ContractError(name_ + " is not quantized");
  return *quant_;
}

const LoraAdapter& AdaptableLinear::adapter() const {
  if (!adapter_) throw ContractError(name_ + " has no adapter");
  return *adapter_;
}

LoraAdapter& AdaptableLinear::adapter() {
  if (!adapter_) throw ContractError(name_ + " has no adapter");
  return *adapter_;
}

Tensor AdaptableLinear::effective_weight() const {
  if (!quant_) return weight_.detach();
  if (!adapter_) return dequantized_.detach();
  NoGradGuard no_grad;
  const Tensor update = matmul(adapter_->b, adapter_->a);
  return add(dequantized_, scale(update, adapter_->scaling())).detach();
}

void AdaptableLinear::quantize(std::size_t block) {
  if (quant_) throw ContractError(name_ + " is already quantized");
  quant_ = atelier::quantize(weight_, block);
  dequantized_ = dequantize(*quant_);
  weight_ = Tensor();
  if (bias_.defined()) bias_ = bias_.detach();
}

void AdaptableLinear::load_quantized(QuantizedLinear q, Tensor bias) {
  if (q.out_features != out_ || q.in_features != in_) {
    throw FormatError(name_ + ": quantized block shape does not match the layer");
  }
  dequantized_ = dequantize(q);
  quant_ = std::move(q);
  weight_ = Tensor();
  bias_ = std::move(bias);
}

void AdaptableLinear::attach(LoraAdapter adapter) {
  if (adapter_) throw ContractError(name_ + " already carries a LoRA adapter");
  if (!quant_) throw ContractError(name_ + " must be quantized before an adapter is attached");
  if (adapter.rank == 0) throw ContractError("LoRA rank must be at least 1");
  if (adapter.a.shape() != Shape{adapter.rank, in_} || adapter.b.shape() != Shape{out_, adapter.rank}) {
    throw DimensionError(name_ + ": adapter factors " + shape_string(adapter.a.shape()) + " / " +
                         shape_string(adapter.b.shape()) + " do not fit a " + std::to_string(out_) + "x" +
                         std::to_string(in_) + " layer");
  }
  adapter_ = std::move(adapter);
}

void AdaptableLinear::merge() {
  if (!adapter_) throw ContractError(name_ + " has no adapter to merge");
  weight_ = effective_weight();
  if (bias_.defined()) bias_ = bias_.detach();
  quant_.reset();
  dequantized_ = Tensor();
  adapter_.reset();
}

AdaptableLinear AdaptableLinear::clone() const {
  AdaptableLinear copy;
  copy.name_ = name_;
  copy.role_ = role_;
  copy.in_ = in_;
  copy.out_ = out_;
  auto deep = [](const Tensor& t) {
    if (!t.defined()) return Tensor();
    Tensor c = t.detach();
    if (t.requires_grad()) c.set_requires_grad(true);
    return c;
  };
  copy.weight_ = deep(weight_);
  copy.bias_ = deep(bias_);
  copy.quant_ = quant_;
  copy.dequantized_ = deep(dequantized_);
  if (adapter_) {
    copy.adapter_ = LoraAdapter{deep(adapter_->a), deep(adapter_->b), adapter_->rank, adapter_->alpha};
  }
  return copy;
}

void quantize_base(VlmModel& model, LoraTargets targets) {
  if (targets.empty()) throw ContractError("quantize_base: no target layers selected");
  for (AdaptableLinear* layer : model.linear_layers()) {
    if (targets.matches(layer->role()) && !layer->is_quantized()) layer->quantize(model.config().quant_block);
  }
}

void inject_lora(VlmModel& model, LoraTargets targets, std::size_t rank, double alpha, std::uint64_t seed) {
  if (rank == 0) throw ContractError("inject_lora: rank must be at least 1");
  if (targets.empty()) throw ContractError("inject_lora: no target layers selected");
  auto layers = model.linear_layers();
  for (AdaptableLinear* layer : layers) {
    if (targets.matches(layer->role()) && layer->has_adapter()) {
      throw ContractError("inject_lora: " + layer->name() + " already carries a LoRA adapter");
    }
  }
  std::uint64_t index = 0;
  for (AdaptableLinear* layer : layers) {
    ++index;
    if (!targets.matches(layer->role())) continue;
    if (!layer->is_quantized()) layer->quantize(model.config().quant_block);
    Rng rng(derive_seed(seed, index));
    const double spread = 1.0 / std::sqrt(static_cast<double>(layer->in_features()));
    std::vector<double> a(rank * layer->in_features());
    for (auto& v : a) v = rng.normal(0.0, spread);
    LoraAdapter adapter;
    adapter.rank = rank;
    adapter.alpha = alpha;
    adapter.a = Tensor({rank, layer->in_features()}, std::move(a));
    adapter.b = Tensor::zeros({layer->out_features(), rank});
    layer->attach(std::move(adapter));
  }
}

void merge_lora(VlmModel& model) {
  bool any = false;
  for (AdaptableLinear* layer : model.linear_layers()) {
    if (!layer->has_adapter()) continue;
    layer->merge();
    any = true;
  }
  if (!any) throw ContractError("merge_lora: the model has no adapters to merge");
}

}  // namespace atelier
