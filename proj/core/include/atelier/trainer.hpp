#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "atelier/dataset.hpp"
#include "atelier/model.hpp"

namespace atelier {

struct TrainConfig {
  std::size_t epochs = 30;
  std::size_t batch_size = 8;
  double learning_rate = 3e-4;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double lambda_reg = 1.0;
  double lambda_gen = 1.0;
  std::size_t plateau_patience = 3;
  double plateau_min_delta = 0.1;  // MAE points
  std::uint64_t seed = 1;
  TrainMode mode = TrainMode::full;

  // Throws ContractError on negative weights, both weights zero, a zero
  // batch size or non-positive Adam constants.
  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

// JSON object with the field names above; mode is "full" or
// "adapters_only". Missing fields keep their defaults, unknown ones are a
// FormatError.
TrainConfig train_config_from_json(std::string_view text);
std::string train_config_to_json(const TrainConfig& config);

// L1 is measured on the normalized [0, 1] score, so 100 * l1 is the absolute
// error in points.
struct LossParts {
  Tensor total;  // scalar, differentiable
  double l1 = 0.0;
  double ce = 0.0;
};

// total = lambda_reg * |sigmoid(score_raw) - target| + lambda_gen * CE, where
// CE averages over the non-ignored entries of `targets` (aligned with the
// logits). The CE term is skipped entirely when lambda_gen is zero.
LossParts joint_loss(const ModelOutput& output, double target_score_norm, std::span<const int> targets,
                     double lambda_reg, double lambda_gen);

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double total = 0.0;
  double l1 = 0.0;
  double ce = 0.0;
  double train_mae = 0.0;  // points, from the forward passes taken while training
  std::optional<double> held_out_mae;

  bool operator==(const EpochRecord&) const = default;
};

struct AdamMoments {
  std::vector<double> m;
  std::vector<double> v;

  bool operator==(const AdamMoments&) const = default;
};

struct TrainState {
  std::size_t step = 0;
  std::size_t epoch = 0;
  std::map<std::string, AdamMoments> moments;  // keyed by parameter name
  double best_metric = 0.0;
  bool has_best = false;
  std::size_t epochs_without_improvement = 0;
  std::vector<EpochRecord> history;

  bool operator==(const TrainState&) const = default;
};

struct StepStats {
  double total = 0.0;
  double l1 = 0.0;
  double ce = 0.0;
  double abs_error_points = 0.0;  // summed over the batch
};

// Adam over trainable_parameters(model, mode). The trainer flips
// requires_grad on so that exactly the trainable set records gradients.
//
//   m <- b1 m + (1 - b1) g
//   v <- b2 v + (1 - b2) g^2
//   p <- p - lr * (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps)
class Trainer {
 public:
  Trainer(VlmModel& model, TrainConfig config, TrainState state = {});

  // One optimizer update. Each sample's loss is scaled by 1/|batch| and
  // backpropagated in batch order, so gradients are reduced in a fixed order.
  StepStats step(std::span<const TrainSample* const> batch);

  const TrainConfig& config() const { return config_; }
  const TrainState& state() const { return state_; }
  TrainState& state() { return state_; }
  const std::vector<NamedTensor>& parameters() const { return params_; }

 private:
  VlmModel& model_;
  TrainConfig config_;
  TrainState state_;
  std::vector<NamedTensor> params_;
};

struct TrainHooks {
  std::ostream* log = nullptr;  // CSV rows, header included when the state is fresh
  // Called after every epoch; returning false stops training.
  std::function<bool(const EpochRecord&, const VlmModel&)> on_epoch;
};

// Per-epoch shuffle with a permutation seeded by derive_seed(seed, epoch).
// After each epoch, when `held_out` is non-empty, its MAE feeds plateau
// detection: training stops once it fails to improve by more than
// plateau_min_delta for plateau_patience consecutive epochs. A non-finite
// loss raises NumericalError naming the step. Resumes from the state's
// epoch counter.
TrainState train(VlmModel& model, std::span<const TrainSample> samples, std::span<const TrainSample> held_out,
                 const TrainConfig& config, TrainState state = {}, const TrainHooks& hooks = {});

struct SampleMetrics {
  double mae_points = 0.0;
  double mean_ce = 0.0;
  std::vector<double> predicted;  // points, per sample
};

// Gradient-free pass: absolute score error (points) and teacher-forced CE.
SampleMetrics measure(const VlmModel& model, std::span<const TrainSample> samples);

void write_log_header(std::ostream& out);

// Training checkpoint: model blocks (the base only in full mode, since an
// adapters_only base is rebuilt from its seed), Adam moments, counters and
// history, plus the TrainConfig.
void save_checkpoint(const VlmModel& model, const TrainConfig& config, const TrainState& state,
                     const std::filesystem::path& path);

struct TrainCheckpoint {
  VlmModel model;
  TrainConfig config;
  TrainState state;
};

// With `expected` given, any difference other than the epoch budget is
// refused with a FormatError naming the field.
TrainCheckpoint load_checkpoint(const std::filesystem::path& path,
                                const std::optional<TrainConfig>& expected = std::nullopt);

}  // namespace atelier
