#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "atelier/model.hpp"

namespace atelier {

// Binary container shared by model, adapter and training checkpoints.
// All integers and floats are little-endian.
//
//   "ATLRCKPT"                      8-byte magic
//   u32 version                     currently 1
//   u32 kind                        0 model, 1 adapters, 2 training state
//   ModelConfig                     d_model, n_layers, n_heads, image_size,
//                                   patch_size, vocab_size, max_seq_len,
//                                   lora_rank as u64; lora_alpha as f64;
//                                   quant_block, seed as u64
//   u32 n_meta, then n_meta x (str key, str value)
//   u32 n_blocks, then per block:
//     str name, u8 dtype (0 = f64, 1 = u8), u32 ndim, ndim x u64 dims,
//     payload (numel x f64, or numel bytes)
//   "ENDCKPT!"                      8-byte trailer
//
// str is a u32 byte length followed by the bytes. Quantized layers are
// stored as "<layer>.qcodes" (u8, packed nibbles) and "<layer>.qscales".
enum class CheckpointKind : std::uint32_t { model = 0, adapters = 1, training = 2 };

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointBlock {
  std::string name;
  Shape shape;
  std::vector<double> values;       // dtype f64
  std::vector<std::uint8_t> bytes;  // dtype u8
  bool is_bytes = false;
};

struct CheckpointFile {
  CheckpointKind kind = CheckpointKind::model;
  ModelConfig config;
  std::map<std::string, std::string> meta;
  std::vector<CheckpointBlock> blocks;

  const CheckpointBlock* find(const std::string& name) const;
};

std::string encode_checkpoint(const CheckpointFile& file);
// Parses the whole buffer before returning; any truncation or trailing
// garbage is a FormatError.
CheckpointFile decode_checkpoint(std::string_view data);

void write_checkpoint(const CheckpointFile& file, const std::filesystem::path& path);
CheckpointFile read_checkpoint(const std::filesystem::path& path);

// Blocks describing a model. With include_base=false only the adapter
// factors and the regression head are emitted.
void append_model_blocks(const VlmModel& model, CheckpointFile& file, bool include_base);

// Rebuilds a model from a file holding a complete set of base blocks.
VlmModel model_from_blocks(const CheckpointFile& file);
// Rebuilds the seeded base (init + quantized targets), then applies whatever
// blocks the file carries. Used for adapters-only training checkpoints.
VlmModel model_from_seeded_base(const CheckpointFile& file);

void save_model(const VlmModel& model, const std::filesystem::path& path);
// Accepts model and training checkpoints.
VlmModel load_model(const std::filesystem::path& path);

// Adapter-only file: A/B factors, rank, alpha and target layer names.
void save_adapters(const VlmModel& model, const std::filesystem::path& path);
// Attaches the stored adapters onto a matching base. The base's config must
// equal the stored one and its targeted layers must be free of adapters.
void load_adapters(VlmModel& model, const std::filesystem::path& path);

}  // namespace atelier
