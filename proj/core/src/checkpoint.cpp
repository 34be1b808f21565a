#include "atelier/checkpoint.hpp"

#include <set>
#include <sstream>

#include "atelier/binary_io.hpp"
#include "atelier/errors.hpp"

namespace atelier {

namespace {

constexpr std::string_view kMagic = "ATLRCKPT";
constexpr std::string_view kTrailer = "ENDCKPT!";

std::string join(const std::vector<std::string>& items) {
  std::string out;
  for (const auto& s : items) {
    if (!out.empty()) out.push_back(',');
    out += s;
  }
  return out;
}

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

CheckpointBlock tensor_block(const std::string& name, const Tensor& t) {
  CheckpointBlock b;
  b.name = name;
  b.shape = t.shape();
  b.values.assign(t.data().begin(), t.data().end());
  return b;
}

const CheckpointBlock& require_block(const CheckpointFile& file, const std::string& name, std::set<std::string>& used) {
  const CheckpointBlock* b = file.find(name);
  if (!b) throw FormatError("checkpoint is missing block '" + name + "'");
  used.insert(name);
  return *b;
}

Tensor block_tensor(const CheckpointBlock& b) {
  if (b.is_bytes) throw FormatError("block '" + b.name + "' holds bytes, expected float64 values");
  return Tensor(b.shape, b.values);
}

void copy_into(const CheckpointBlock& b, const Tensor& target) {
  if (b.is_bytes || b.shape != target.shape()) {
    throw FormatError("block '" + b.name + "' has shape " + shape_string(b.shape) + ", model expects " +
                      shape_string(target.shape()));
  }
  Tensor t = target;
  std::copy(b.values.begin(), b.values.end(), t.mutable_data().begin());
}

std::string meta_or(const CheckpointFile& file, const std::string& key, const std::string& fallback) {
  const auto it = file.meta.find(key);
  return it == file.meta.end() ? fallback : it->second;
}

AdaptableLinear* layer_named(VlmModel& model, const std::string& name) {
  for (AdaptableLinear* layer : model.linear_layers()) {
    if (layer->name() == name) return layer;
  }
  throw FormatError("checkpoint names unknown layer '" + name + "'");
}

void attach_adapters(const CheckpointFile& file, VlmModel& model, std::set<std::string>& used) {
  const auto targets = split_list(meta_or(file, "lora.targets", ""));
  if (targets.empty()) return;
  std::size_t rank = 0;
  double alpha = 0.0;
  try {
    rank = std::stoull(file.meta.at("lora.rank"));
    alpha = std::stod(file.meta.at("lora.alpha"));
  } catch (const std::exception&) {
    throw FormatError("checkpoint adapter metadata (lora.rank / lora.alpha) is missing or malformed");
  }
  for (const auto& name : targets) {
    AdaptableLinear* layer = layer_named(model, name);
    LoraAdapter adapter;
    adapter.rank = rank;
    adapter.alpha = alpha;
    adapter.a = block_tensor(require_block(file, name + ".lora_a", used));
    adapter.b = block_tensor(require_block(file, name + ".lora_b", used));
    layer->attach(std::move(adapter));
  }
}

void load_head(const CheckpointFile& file, VlmModel& model, std::set<std::string>& used) {
  for (const auto& t : model.head_tensors()) copy_into(require_block(file, t.name, used), t.tensor);
}

void reject_unused(const CheckpointFile& file, const std::set<std::string>& used) {
  for (const auto& b : file.blocks) {
    const bool trainer_block = b.name.rfind("adam.", 0) == 0 || b.name.rfind("train.", 0) == 0;
    if (!used.count(b.name) && !trainer_block) {
      throw FormatError("checkpoint block '" + b.name + "' does not belong to this model");
    }
  }
}

}  // namespace

const CheckpointBlock* CheckpointFile::find(const std::string& name) const {
  for (const auto& b : blocks) {
    if (b.name == name) return &b;
  }
  return nullptr;
}

std::string encode_checkpoint(const CheckpointFile& file) {
  BinaryWriter w;
  w.bytes(kMagic);
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(file.kind));
  const auto& c = file.config;
  for (std::size_t v : {c.d_model, c.n_layers, c.n_heads, c.image_size, c.patch_size, c.vocab_size, c.max_seq_len,
                        c.lora_rank}) {
    w.u64(v);
  }
  w.f64(c.lora_alpha);
  w.u64(c.quant_block);
  w.u64(c.seed);
  w.u32(static_cast<std::uint32_t>(file.meta.size()));
  for (const auto& [k, v] : file.meta) {
    w.str(k);
    w.str(v);
  }
  w.u32(static_cast<std::uint32_t>(file.blocks.size()));
  for (const auto& b : file.blocks) {
    w.str(b.name);
    w.u8(b.is_bytes ? 1 : 0);
    w.u32(static_cast<std::uint32_t>(b.shape.size()));
    for (auto d : b.shape) w.u64(d);
    if (b.is_bytes) {
      w.bytes(std::string_view(reinterpret_cast<const char*>(b.bytes.data()), b.bytes.size()));
    } else {
      for (double v : b.values) w.f64(v);
    }
  }
  w.bytes(kTrailer);
  return w.buffer();
}

CheckpointFile decode_checkpoint(std::string_view data) {
  BinaryReader r(data);
  if (r.remaining() < kMagic.size() || r.bytes(kMagic.size()) != kMagic) throw FormatError("not a checkpoint file (bad magic)");
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw FormatError("checkpoint format version " + std::to_string(version) + " is not supported (expected " +
                      std::to_string(kCheckpointVersion) + ")");
  }
  CheckpointFile file;
  const std::uint32_t kind = r.u32();
  if (kind > 2) throw FormatError("unknown checkpoint kind " + std::to_string(kind));
  file.kind = static_cast<CheckpointKind>(kind);
  auto& c = file.config;
  for (std::size_t* v : {&c.d_model, &c.n_layers, &c.n_heads, &c.image_size, &c.patch_size, &c.vocab_size,
                         &c.max_seq_len, &c.lora_rank}) {
    *v = r.u64();
  }
  c.lora_alpha = r.f64();
  c.quant_block = r.u64();
  c.seed = r.u64();
  const std::uint32_t n_meta = r.u32();
  for (std::uint32_t i = 0; i < n_meta; ++i) {
    std::string key = r.str();
    file.meta[key] = r.str();
  }
  const std::uint32_t n_blocks = r.u32();
  for (std::uint32_t i = 0; i < n_blocks; ++i) {
    CheckpointBlock b;
    b.name = r.str();
    const std::uint8_t dtype = r.u8();
    if (dtype > 1) throw FormatError("block '" + b.name + "' has unknown dtype " + std::to_string(dtype));
    b.is_bytes = dtype == 1;
    const std::uint32_t ndim = r.u32();
    if (ndim == 0 || ndim > 8) throw FormatError("block '" + b.name + "' has an invalid rank");
    std::size_t numel = 1;
    for (std::uint32_t d = 0; d < ndim; ++d) {
      b.shape.push_back(r.u64());
      numel *= b.shape.back();
    }
    const std::size_t width = b.is_bytes ? 1 : 8;
    if (numel > r.remaining() / width) throw FormatError("truncated file: block '" + b.name + "' is cut short");
    if (b.is_bytes) {
      const auto raw = r.bytes(numel);
      b.bytes.assign(raw.begin(), raw.end());
    } else {
      b.values.resize(numel);
      for (auto& v : b.values) v = r.f64();
    }
    file.blocks.push_back(std::move(b));
  }
  if (r.remaining() < kTrailer.size() || r.bytes(kTrailer.size()) != kTrailer) {
    throw FormatError("truncated file: checkpoint trailer missing");
  }
  if (!r.done()) throw FormatError("checkpoint has trailing bytes after its trailer");
  return file;
}

void write_checkpoint(const CheckpointFile& file, const std::filesystem::path& path) {
  write_file_atomic(path, encode_checkpoint(file));
}

CheckpointFile read_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(read_file(path)); }

void append_model_blocks(const VlmModel& model, CheckpointFile& file, bool include_base) {
  std::vector<std::string> quantized, adapted;
  std::size_t rank = 0;
  double alpha = 0.0;
  for (const auto* layer : model.linear_layers()) {
    if (layer->is_quantized()) {
      quantized.push_back(layer->name());
      if (include_base) {
        const auto& q = layer->quantized();
        CheckpointBlock codes;
        codes.name = layer->name() + ".qcodes";
        codes.shape = {q.codes.size()};
        codes.bytes = q.codes;
        codes.is_bytes = true;
        file.blocks.push_back(std::move(codes));
        CheckpointBlock scales;
        scales.name = layer->name() + ".qscales";
        scales.shape = {q.scales.size()};
        scales.values = q.scales;
        file.blocks.push_back(std::move(scales));
      }
    }
    if (layer->has_adapter()) {
      adapted.push_back(layer->name());
      rank = layer->adapter().rank;
      alpha = layer->adapter().alpha;
    }
  }
  if (include_base) {
    for (const auto& t : model.base_tensors()) file.blocks.push_back(tensor_block(t.name, t.tensor));
  }
  for (const auto& t : model.adapter_tensors()) file.blocks.push_back(tensor_block(t.name, t.tensor));
  for (const auto& t : model.head_tensors()) file.blocks.push_back(tensor_block(t.name, t.tensor));

  file.config = model.config();
  file.meta["quantized"] = join(quantized);
  file.meta["lora.targets"] = join(adapted);
  if (!adapted.empty()) {
    std::ostringstream a;
    a.precision(17);
    a << alpha;
    file.meta["lora.rank"] = std::to_string(rank);
    file.meta["lora.alpha"] = a.str();
  }
  file.meta["base_fingerprint"] = std::to_string(base_fingerprint(model));
}

VlmModel model_from_blocks(const CheckpointFile& file) {
  VlmModel model(file.config);
  std::set<std::string> used;
  for (const auto& name : split_list(meta_or(file, "quantized", ""))) {
    AdaptableLinear* layer = layer_named(model, name);
    const auto& codes = require_block(file, name + ".qcodes", used);
    const auto& scales = require_block(file, name + ".qscales", used);
    if (!codes.is_bytes || scales.is_bytes) throw FormatError("quantized blocks of '" + name + "' have the wrong dtype");
    QuantizedLinear q;
    q.out_features = layer->out_features();
    q.in_features = layer->in_features();
    q.block = file.config.quant_block;
    q.codes = codes.bytes;
    q.scales = scales.values;
    Tensor bias = layer->bias().defined() ? block_tensor(require_block(file, name + ".bias", used)) : Tensor();
    layer->load_quantized(std::move(q), std::move(bias));
  }
  for (const auto& t : model.base_tensors()) {
    if (!used.count(t.name)) copy_into(require_block(file, t.name, used), t.tensor);
  }
  attach_adapters(file, model, used);
  load_head(file, model, used);
  reject_unused(file, used);
  return model;
}

VlmModel model_from_seeded_base(const CheckpointFile& file) {
  VlmModel model(file.config);
  for (const auto& name : split_list(meta_or(file, "quantized", ""))) {
    layer_named(model, name)->quantize(file.config.quant_block);
  }
  const std::string expected = meta_or(file, "base_fingerprint", "");
  if (!expected.empty() && expected != std::to_string(base_fingerprint(model))) {
    throw FormatError("checkpoint was trained on a different base: seeded base fingerprint does not match");
  }
  std::set<std::string> used;
  attach_adapters(file, model, used);
  load_head(file, model, used);
  reject_unused(file, used);
  return model;
}

void save_model(const VlmModel& model, const std::filesystem::path& path) {
  CheckpointFile file;
  file.kind = CheckpointKind::model;
  append_model_blocks(model, file, true);
  write_checkpoint(file, path);
}

VlmModel load_model(const std::filesystem::path& path) {
  const CheckpointFile file = read_checkpoint(path);
  if (file.kind == CheckpointKind::adapters) {
    throw FormatError(path.string() + " holds adapters only; load it onto a base with load_adapters");
  }
  const bool has_base = file.find("tok_emb") != nullptr;
  return has_base ? model_from_blocks(file) : model_from_seeded_base(file);
}

void save_adapters(const VlmModel& model, const std::filesystem::path& path) {
  if (!model.has_adapters()) throw ContractError("save_adapters: the model has no adapters");
  CheckpointFile file;
  file.kind = CheckpointKind::adapters;
  append_model_blocks(model, file, false);
  // Adapter files carry factors only; the head travels with full checkpoints.
  std::erase_if(file.blocks, [](const CheckpointBlock& b) { return b.name.rfind("regression_head", 0) == 0; });
  write_checkpoint(file, path);
}

void load_adapters(VlmModel& model, const std::filesystem::path& path) {
  const CheckpointFile file = read_checkpoint(path);
  if (file.kind != CheckpointKind::adapters) throw FormatError(path.string() + " is not an adapter checkpoint");
  if (!(file.config == model.config())) {
    throw FormatError("adapter checkpoint was built for a different model configuration");
  }
  for (const auto& name : split_list(meta_or(file, "lora.targets", ""))) {
    const AdaptableLinear* layer = layer_named(model, name);
    if (!layer->is_quantized()) throw ContractError("load_adapters: base layer '" + name + "' is not quantized");
    if (layer->has_adapter()) throw ContractError("load_adapters: layer '" + name + "' already carries an adapter");
  }
  std::set<std::string> used;
  attach_adapters(file, model, used);
  reject_unused(file, used);
}

}  // namespace atelier
