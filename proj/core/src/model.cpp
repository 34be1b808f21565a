#include "atelier/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "atelier/errors.hpp"
#include "atelier/ops.hpp"
#include "atelier/rng.hpp"
#include "atelier/special_tokens.hpp"

namespace atelier {

void ModelConfig::validate() const {
  auto fail = [](const std::string& what) { throw ContractError("model config: " + what); };
  if (d_model == 0 || n_layers == 0 || n_heads == 0) fail("d_model, n_layers and n_heads must be positive");
  if (d_model % n_heads != 0) fail("d_model must be divisible by n_heads");
  if (patch_size == 0 || image_size == 0 || image_size % patch_size != 0) {
    fail("image_size must be a positive multiple of patch_size");
  }
  if (vocab_size <= static_cast<std::size_t>(special::kCount)) fail("vocab_size must exceed the special tokens");
  if (max_seq_len <= visual_tokens() + 2) fail("max_seq_len leaves no room for text after the visual prefix");
  if (lora_rank == 0) fail("lora_rank must be at least 1");
  if (quant_block == 0) fail("quant_block must be at least 1");
}

namespace {

Tensor random_matrix(Rng& rng, std::size_t rows, std::size_t cols, double sd) {
  std::vector<double> v(rows * cols);
  for (auto& x : v) x = rng.normal(0.0, sd);
  return Tensor({rows, cols}, std::move(v));
}

AdaptableLinear random_linear(Rng& rng, std::string name, LayerRole role, std::size_t in, std::size_t out,
                              double sd) {
  return AdaptableLinear(std::move(name), role, random_matrix(rng, out, in, sd), Tensor::zeros({out}));
}

Tensor deep_copy(const Tensor& t) {
  Tensor c = t.detach();
  if (t.requires_grad()) c.set_requires_grad(true);
  return c;
}

}  // namespace

VlmModel::VlmModel(ModelConfig config) : config_(config) {
  config_.validate();
  Rng rng(config_.seed);
  const std::size_t d = config_.d_model;
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
  const double resid = 1.0 / std::sqrt(2.0 * static_cast<double>(config_.n_layers));

  patch_proj_ = random_linear(rng, "patch_proj", LayerRole::other, config_.patch_dim(), d,
                              1.0 / std::sqrt(static_cast<double>(config_.patch_dim())));
  tok_emb_ = random_matrix(rng, config_.vocab_size, d, 1.0);
  pos_emb_ = random_matrix(rng, config_.max_seq_len, d, 0.5);
  for (std::size_t l = 0; l < config_.n_layers; ++l) {
    const std::string p = "blocks." + std::to_string(l) + ".";
    TransformerBlock b;
    b.ln1_gamma = Tensor::full({d}, 1.0);
    b.ln1_beta = Tensor::zeros({d});
    b.qkv = random_linear(rng, p + "attn.qkv", LayerRole::attention, d, 3 * d, inv_sqrt_d);
    b.attn_out = random_linear(rng, p + "attn.out", LayerRole::attention, d, d, inv_sqrt_d * resid);
    b.ln2_gamma = Tensor::full({d}, 1.0);
    b.ln2_beta = Tensor::zeros({d});
    b.fc1 = random_linear(rng, p + "mlp.fc1", LayerRole::mlp, d, config_.mlp_hidden(), inv_sqrt_d);
    b.fc2 = random_linear(rng, p + "mlp.fc2", LayerRole::mlp, config_.mlp_hidden(), d,
                          resid / std::sqrt(static_cast<double>(config_.mlp_hidden())));
    blocks_.push_back(std::move(b));
  }
  final_gamma_ = Tensor::full({d}, 1.0);
  final_beta_ = Tensor::zeros({d});
  lm_head_ = random_linear(rng, "lm_head", LayerRole::other, d, config_.vocab_size, inv_sqrt_d);
  head_w_ = Tensor::zeros({1, d});
  head_b_ = Tensor::zeros({1});
}

Tensor VlmModel::patchify(const Image& image) const {
  const std::size_t side = config_.image_size, p = config_.patch_size;
  if (image.size != side || image.pixels.size() != side * side * 3) {
    throw DimensionError("image is " + std::to_string(image.size) + "x" + std::to_string(image.size) +
                         ", model expects " + std::to_string(side) + "x" + std::to_string(side));
  }
  const std::size_t per_side = side / p;
  std::vector<double> out;
  out.reserve(side * side * 3);
  for (std::size_t py = 0; py < per_side; ++py) {
    for (std::size_t px = 0; px < per_side; ++px) {
      for (std::size_t y = 0; y < p; ++y) {
        for (std::size_t x = 0; x < p; ++x) {
          for (std::size_t c = 0; c < 3; ++c) out.push_back(image.at(py * p + y, px * p + x, c));
        }
      }
    }
  }
  return Tensor({per_side * per_side, config_.patch_dim()}, std::move(out));
}

Tensor VlmModel::encode_patches(const Tensor& patches) const { return patch_proj_.forward(patches); }

Tensor VlmModel::encode_image(const Image& image) const { return encode_patches(patchify(image)); }

ModelOutput VlmModel::forward(const Tensor& visual, std::span<const int> tokens, std::size_t scoring_pos) const {
  const std::size_t d = config_.d_model;
  if (visual.ndim() != 2 || visual.cols() != d) {
    throw DimensionError("visual embeddings must be [n x " + std::to_string(d) + "], got " +
                         shape_string(visual.shape()));
  }
  if (tokens.empty()) throw ContractError("forward: empty token sequence");
  const std::size_t nv = visual.rows();
  const std::size_t n = nv + tokens.size();
  if (n > config_.max_seq_len) {
    throw LengthError("sequence of " + std::to_string(n) + " positions exceeds max_seq_len " +
                      std::to_string(config_.max_seq_len));
  }
  if (scoring_pos >= tokens.size() || tokens[scoring_pos] != special::kScoring) {
    throw ContractError("forward: token at scoring position " + std::to_string(scoring_pos) +
                        " is not [SCORING]");
  }

  std::vector<int> positions(n);
  std::iota(positions.begin(), positions.end(), 0);
  Tensor x = add(concat_rows(visual, embedding(tok_emb_, tokens)), embedding(pos_emb_, positions));
  for (const auto& b : blocks_) {
    const Tensor attn = causal_self_attention(b.qkv.forward(layer_norm(x, b.ln1_gamma, b.ln1_beta)), config_.n_heads);
    x = add(x, b.attn_out.forward(attn));
    const Tensor hidden = gelu(b.fc1.forward(layer_norm(x, b.ln2_gamma, b.ln2_beta)));
    x = add(x, b.fc2.forward(hidden));
  }
  const Tensor h = layer_norm(x, final_gamma_, final_beta_);

  ModelOutput out;
  out.logits = lm_head_.forward(h);
  out.score_raw = linear(select_row(h, nv + scoring_pos), head_w_, head_b_);
  out.score = 100.0 * sigmoid(out.score_raw.detach()).item();
  return out;
}

std::vector<int> VlmModel::generate_critique(const Tensor& visual, std::span<const int> prompt, std::size_t max_new,
                                             const DecodeMode& mode) const {
  if (max_new == 0) throw ContractError("generate_critique: max_new must be at least 1");
  if (prompt.size() < 2 || prompt[prompt.size() - 2] != special::kScoring ||
      prompt.back() != special::kCritique) {
    throw ContractError("generate_critique: prompt must end with [SCORING] [CRITIQUE]");
  }
  if (!mode.greedy && !(mode.temperature > 0.0)) throw ContractError("sampling temperature must be positive");
  NoGradGuard no_grad;
  const std::size_t scoring_pos = prompt.size() - 2;
  std::vector<int> seq(prompt.begin(), prompt.end());
  std::vector<int> generated;
  Rng rng(mode.seed);
  const std::size_t v = config_.vocab_size;
  while (generated.size() < max_new && visual.rows() + seq.size() < config_.max_seq_len + 1) {
    const ModelOutput out = forward(visual, seq, scoring_pos);
    const auto logits = out.logits.data().subspan((out.logits.rows() - 1) * v, v);
    int next = 0;
    if (mode.greedy) {
      next = static_cast<int>(std::max_element(logits.begin(), logits.end()) - logits.begin());
    } else {
      const double mx = *std::max_element(logits.begin(), logits.end());
      std::vector<double> w(v);
      double z = 0.0;
      for (std::size_t j = 0; j < v; ++j) {
        w[j] = std::exp((logits[j] - mx) / mode.temperature);
        z += w[j];
      }
      double u = rng.uniform() * z;
      next = static_cast<int>(v - 1);
      for (std::size_t j = 0; j < v; ++j) {
        u -= w[j];
        if (u < 0.0) {
          next = static_cast<int>(j);
          break;
        }
      }
    }
    generated.push_back(next);
    if (next == special::kEos) break;
    seq.push_back(next);
    if (visual.rows() + seq.size() > config_.max_seq_len) break;
  }
  return generated;
}

std::vector<AdaptableLinear*> VlmModel::linear_layers() {
  std::vector<AdaptableLinear*> out{&patch_proj_};
  for (auto& b : blocks_) {
    out.push_back(&b.qkv);
    out.push_back(&b.attn_out);
    out.push_back(&b.fc1);
    out.push_back(&b.fc2);
  }
  out.push_back(&lm_head_);
  return out;
}

std::vector<const AdaptableLinear*> VlmModel::linear_layers() const {
  auto layers = const_cast<VlmModel*>(this)->linear_layers();
  return {layers.begin(), layers.end()};
}

bool VlmModel::has_adapters() const { return adapted_layer_count() > 0; }

std::size_t VlmModel::adapted_layer_count() const {
  std::size_t n = 0;
  for (const auto* layer : linear_layers()) n += layer->has_adapter() ? 1 : 0;
  return n;
}

std::vector<NamedTensor> VlmModel::base_tensors() const {
  std::vector<NamedTensor> out;
  auto add_layer = [&out](const AdaptableLinear& layer) {
    if (!layer.is_quantized()) out.push_back({layer.name() + ".weight", layer.weight()});
    if (layer.bias().defined()) out.push_back({layer.name() + ".bias", layer.bias()});
  };
  add_layer(patch_proj_);
  out.push_back({"tok_emb", tok_emb_});
  out.push_back({"pos_emb", pos_emb_});
  for (std::size_t l = 0; l < blocks_.size(); ++l) {
    const auto& b = blocks_[l];
    const std::string p = "blocks." + std::to_string(l) + ".";
    out.push_back({p + "ln1.gamma", b.ln1_gamma});
    out.push_back({p + "ln1.beta", b.ln1_beta});
    add_layer(b.qkv);
    add_layer(b.attn_out);
    out.push_back({p + "ln2.gamma", b.ln2_gamma});
    out.push_back({p + "ln2.beta", b.ln2_beta});
    add_layer(b.fc1);
    add_layer(b.fc2);
  }
  out.push_back({"final_norm.gamma", final_gamma_});
  out.push_back({"final_norm.beta", final_beta_});
  add_layer(lm_head_);
  return out;
}

std::vector<NamedTensor> VlmModel::adapter_tensors() const {
  std::vector<NamedTensor> out;
  for (const auto* layer : linear_layers()) {
    if (!layer->has_adapter()) continue;
    out.push_back({layer->name() + ".lora_a", layer->adapter().a});
    out.push_back({layer->name() + ".lora_b", layer->adapter().b});
  }
  return out;
}

std::vector<NamedTensor> VlmModel::head_tensors() const {
  return {{"regression_head.weight", head_w_}, {"regression_head.bias", head_b_}};
}

VlmModel VlmModel::clone() const {
  VlmModel copy = *this;
  copy.patch_proj_ = patch_proj_.clone();
  copy.tok_emb_ = deep_copy(tok_emb_);
  copy.pos_emb_ = deep_copy(pos_emb_);
  for (std::size_t l = 0; l < blocks_.size(); ++l) {
    auto& dst = copy.blocks_[l];
    const auto& src = blocks_[l];
    dst.ln1_gamma = deep_copy(src.ln1_gamma);
    dst.ln1_beta = deep_copy(src.ln1_beta);
    dst.qkv = src.qkv.clone();
    dst.attn_out = src.attn_out.clone();
    dst.ln2_gamma = deep_copy(src.ln2_gamma);
    dst.ln2_beta = deep_copy(src.ln2_beta);
    dst.fc1 = src.fc1.clone();
    dst.fc2 = src.fc2.clone();
  }
  copy.final_gamma_ = deep_copy(final_gamma_);
  copy.final_beta_ = deep_copy(final_beta_);
  copy.lm_head_ = lm_head_.clone();
  copy.head_w_ = deep_copy(head_w_);
  copy.head_b_ = deep_copy(head_b_);
  return copy;
}

std::vector<NamedTensor> trainable_parameters(const VlmModel& model, TrainMode mode) {
  std::vector<NamedTensor> out;
  if (mode == TrainMode::adapters_only) {
    if (!model.has_adapters()) throw ContractError("adapters_only training needs injected LoRA adapters");
    out = model.adapter_tensors();
  } else {
    // Biases of quantized layers stay frozen with their weights.
    std::vector<std::string> frozen;
    for (const auto* layer : model.linear_layers()) {
      if (layer->is_quantized()) frozen.push_back(layer->name() + ".bias");
    }
    for (auto& t : model.base_tensors()) {
      if (std::find(frozen.begin(), frozen.end(), t.name) == frozen.end()) out.push_back(t);
    }
    for (auto& t : model.adapter_tensors()) out.push_back(t);
  }
  for (auto& t : model.head_tensors()) out.push_back(t);
  return out;
}

std::size_t parameter_count(const std::vector<NamedTensor>& params) {
  std::size_t n = 0;
  for (const auto& p : params) n += p.tensor.numel();
  return n;
}

namespace {

constexpr std::uint64_t kFnvOffset = 0xcbf29ce484222325ULL;
constexpr std::uint64_t kFnvPrime = 0x100000001b3ULL;

void fnv_bytes(std::uint64_t& h, const void* data, std::size_t len) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= kFnvPrime;
  }
}

}  // namespace

std::uint64_t base_fingerprint(const VlmModel& model) {
  std::uint64_t h = kFnvOffset;
  for (const auto* layer : model.linear_layers()) {
    fnv_bytes(h, layer->name().data(), layer->name().size());
    if (!layer->is_quantized()) continue;
    const auto& q = layer->quantized();
    fnv_bytes(h, q.codes.data(), q.codes.size());
    fnv_bytes(h, q.scales.data(), q.scales.size() * sizeof(double));
  }
  for (const auto& t : model.base_tensors()) {
    fnv_bytes(h, t.name.data(), t.name.size());
    fnv_bytes(h, t.tensor.data().data(), t.tensor.numel() * sizeof(double));
  }
  return h;
}

const char* to_string(TrainMode mode) { return mode == TrainMode::full ? "full" : "adapters_only"; }

TrainMode train_mode_from_string(const std::string& text) {
  if (text == "full") return TrainMode::full;
  if (text == "adapters_only") return TrainMode::adapters_only;
  throw ContractError("unknown training mode '" + text + "' (expected full or adapters_only)");
}

}  // namespace atelier
