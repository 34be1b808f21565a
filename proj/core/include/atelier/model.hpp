#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "atelier/image.hpp"
#include "atelier/lora.hpp"
#include "atelier/tensor.hpp"

namespace atelier {

struct ModelConfig {
  std::size_t d_model = 64;
  std::size_t n_layers = 4;
  std::size_t n_heads = 4;
  std::size_t image_size = 32;
  std::size_t patch_size = 8;
  std::size_t vocab_size = 0;  // taken from the tokenizer
  std::size_t max_seq_len = 256;
  std::size_t lora_rank = 8;
  double lora_alpha = 16.0;
  std::size_t quant_block = 64;
  std::uint64_t seed = 1;

  std::size_t visual_tokens() const {
    const std::size_t side = image_size / patch_size;
    return side * side;
  }
  std::size_t patch_dim() const { return patch_size * patch_size * 3; }
  std::size_t mlp_hidden() const { return 4 * d_model; }

  // Throws ContractError on inconsistent sizes.
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

struct ModelOutput {
  Tensor logits;     // [(visual + tokens) x vocab]
  Tensor score_raw;  // [1 x 1], regression head pre-activation
  double score = 0;  // 100 * sigmoid(score_raw)
};

struct DecodeMode {
  bool greedy = true;
  double temperature = 1.0;
  std::uint64_t seed = 0;

  static DecodeMode argmax() { return {}; }
  static DecodeMode sampled(double temperature, std::uint64_t seed) { return {false, temperature, seed}; }
};

enum class TrainMode { full, adapters_only };

struct TransformerBlock {
  Tensor ln1_gamma, ln1_beta;
  AdaptableLinear qkv;       // fused query/key/value projection, d -> 3d
  AdaptableLinear attn_out;  // d -> d
  Tensor ln2_gamma, ln2_beta;
  AdaptableLinear fc1;  // d -> 4d
  AdaptableLinear fc2;  // 4d -> d
};

// Decoder-only vision-language transformer.
//
// Image patches are projected into d_model and placed in front of the text
// tokens, so one causal decoder sees [visual prefix | prompt | critique].
// The prompt ends with [SCORING] then [CRITIQUE]. The language-model head
// produces logits at every position; the regression head reads the final
// (post final-norm) hidden state at the [SCORING] position and yields
// score = 100 * sigmoid(raw). Both come out of the same forward call.
class VlmModel {
 public:
  // Seeded random initialization; the regression head starts at zero, so
  // an untrained model scores every input at exactly 50.
  explicit VlmModel(ModelConfig config);

  const ModelConfig& config() const { return config_; }

  // [(H/p)^2 x p*p*3] constant tensor of flattened patches in row-major
  // patch order; each patch is flattened (row, column, channel).
  Tensor patchify(const Image& image) const;
  // Projected patches, [(H/p)^2 x d_model].
  Tensor encode_image(const Image& image) const;
  Tensor encode_patches(const Tensor& patches) const;

  ModelOutput forward(const Tensor& visual, std::span<const int> tokens, std::size_t scoring_pos) const;

  // Autoregressive decoding after a prompt that ends in [SCORING], [CRITIQUE].
  // Returns only the new tokens; an EOS, when produced, is the last one.
  std::vector<int> generate_critique(const Tensor& visual, std::span<const int> prompt, std::size_t max_new,
                                     const DecodeMode& mode = DecodeMode::argmax()) const;

  std::vector<AdaptableLinear*> linear_layers();
  std::vector<const AdaptableLinear*> linear_layers() const;
  bool has_adapters() const;
  std::size_t adapted_layer_count() const;

  // Full-precision tensors other than adapter factors: embeddings, norms,
  // dense linear weights and biases, biases of quantized layers, heads.
  std::vector<NamedTensor> base_tensors() const;
  // A and B factors of every adapter.
  std::vector<NamedTensor> adapter_tensors() const;
  std::vector<NamedTensor> head_tensors() const;

  const Tensor& regression_weight() const { return head_w_; }
  const Tensor& regression_bias() const { return head_b_; }

  // Deep copy; the clone shares no storage with this model.
  VlmModel clone() const;

 private:
  ModelConfig config_;
  AdaptableLinear patch_proj_;
  Tensor tok_emb_;
  Tensor pos_emb_;
  std::vector<TransformerBlock> blocks_;
  Tensor final_gamma_, final_beta_;
  AdaptableLinear lm_head_;
  Tensor head_w_;  // [1 x d_model]
  Tensor head_b_;  // [1]
};

// Full mode: every base tensor that is not frozen by quantization, plus
// adapters and the regression head. Adapters-only mode: every adapter factor
// plus the regression head, which is new and therefore never frozen.
// Adapters-only on a model without adapters is a ContractError.
std::vector<NamedTensor> trainable_parameters(const VlmModel& model, TrainMode mode);

std::size_t parameter_count(const std::vector<NamedTensor>& params);

// 64-bit FNV-1a over quantized codes, scales and every base tensor, in
// name order. Used to prove the frozen base never moves.
std::uint64_t base_fingerprint(const VlmModel& model);

const char* to_string(TrainMode mode);
TrainMode train_mode_from_string(const std::string& text);

}  // namespace atelier
