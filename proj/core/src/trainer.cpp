#include "atelier/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "atelier/checkpoint.hpp"
#include "atelier/errors.hpp"
#include "atelier/ops.hpp"
#include "atelier/rng.hpp"
#include "atelier/special_tokens.hpp"
#include "json.hpp"

namespace atelier {

using nlohmann::json;

void TrainConfig::validate() const {
  auto fail = [](const std::string& what) { throw ContractError("train config: " + what); };
  if (!(lambda_reg >= 0.0) || !(lambda_gen >= 0.0)) fail("lambda_reg and lambda_gen must be non-negative");
  if (lambda_reg == 0.0 && lambda_gen == 0.0) fail("lambda_reg and lambda_gen cannot both be zero");
  if (batch_size == 0) fail("batch_size must be at least 1");
  if (!(learning_rate >= 0.0)) fail("learning_rate must be non-negative");
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0) || !(adam_beta2 >= 0.0 && adam_beta2 < 1.0)) {
    fail("adam betas must lie in [0, 1)");
  }
  if (!(adam_eps > 0.0)) fail("adam_eps must be positive");
  if (!(plateau_min_delta >= 0.0)) fail("plateau_min_delta must be non-negative");
}

TrainConfig train_config_from_json(std::string_view text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw FormatError(std::string("train config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw FormatError("train config must be a JSON object");
  TrainConfig c;
  try {
    for (const auto& [key, value] : j.items()) {
      if (key == "epochs") c.epochs = value.get<std::size_t>();
      else if (key == "batch_size") c.batch_size = value.get<std::size_t>();
      else if (key == "learning_rate") c.learning_rate = value.get<double>();
      else if (key == "adam_beta1") c.adam_beta1 = value.get<double>();
      else if (key == "adam_beta2") c.adam_beta2 = value.get<double>();
      else if (key == "adam_eps") c.adam_eps = value.get<double>();
      else if (key == "lambda_reg") c.lambda_reg = value.get<double>();
      else if (key == "lambda_gen") c.lambda_gen = value.get<double>();
      else if (key == "plateau_patience") c.plateau_patience = value.get<std::size_t>();
      else if (key == "plateau_min_delta") c.plateau_min_delta = value.get<double>();
      else if (key == "seed") c.seed = value.get<std::uint64_t>();
      else if (key == "mode") {
        try {
          c.mode = train_mode_from_string(value.get<std::string>());
        } catch (const ContractError& e) {
          throw FormatError(std::string("train config: ") + e.what());
        }
      }
      else throw FormatError("train config: unknown field '" + key + "'");
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("train config: ") + e.what());
  }
  return c;
}

std::string train_config_to_json(const TrainConfig& c) {
  json j;
  j["epochs"] = c.epochs;
  j["batch_size"] = c.batch_size;
  j["learning_rate"] = c.learning_rate;
  j["adam_beta1"] = c.adam_beta1;
  j["adam_beta2"] = c.adam_beta2;
  j["adam_eps"] = c.adam_eps;
  j["lambda_reg"] = c.lambda_reg;
  j["lambda_gen"] = c.lambda_gen;
  j["plateau_patience"] = c.plateau_patience;
  j["plateau_min_delta"] = c.plateau_min_delta;
  j["seed"] = c.seed;
  j["mode"] = to_string(c.mode);
  return j.dump(2);
}

LossParts joint_loss(const ModelOutput& output, double target_score_norm, std::span<const int> targets,
                     double lambda_reg, double lambda_gen) {
  if (!(target_score_norm >= 0.0 && target_score_norm <= 1.0)) {
    throw ContractError("joint_loss: target score " + std::to_string(target_score_norm) + " is outside [0, 1]");
  }
  if (targets.size() != output.logits.rows()) {
    throw DimensionError("joint_loss: " + std::to_string(targets.size()) + " targets for " +
                         std::to_string(output.logits.rows()) + " logit rows");
  }
  LossParts parts;
  const Tensor l1 = sum(abs(add(sigmoid(output.score_raw), -target_score_norm)));
  parts.l1 = l1.item();
  parts.total = scale(l1, lambda_reg);
  if (lambda_gen > 0.0) {
    const bool any = std::any_of(targets.begin(), targets.end(), [](int t) { return t != special::kIgnore; });
    if (!any) throw ContractError("joint_loss: no critique positions to score while lambda_gen > 0");
    const Tensor ce = softmax_cross_entropy(output.logits, targets, special::kIgnore);
    parts.ce = ce.item();
    parts.total = add(parts.total, scale(ce, lambda_gen));
  }
  return parts;
}

Trainer::Trainer(VlmModel& model, TrainConfig config, TrainState state)
    : model_(model), config_(config), state_(std::move(state)) {
  config_.validate();
  params_ = trainable_parameters(model_, config_.mode);
  for (auto& p : params_) {
    if (!p.tensor.requires_grad()) p.tensor.set_requires_grad(true);
    auto& mom = state_.moments[p.name];
    if (mom.m.empty()) {
      mom.m.assign(p.tensor.numel(), 0.0);
      mom.v.assign(p.tensor.numel(), 0.0);
    } else if (mom.m.size() != p.tensor.numel() || mom.v.size() != p.tensor.numel()) {
      throw ContractError("optimizer state for '" + p.name + "' does not match the parameter size");
    }
  }
  if (state_.moments.size() != params_.size()) {
    throw ContractError("optimizer state holds moments for parameters that are not trainable");
  }
}

StepStats Trainer::step(std::span<const TrainSample* const> batch) {
  if (batch.empty()) throw ContractError("Trainer::step: empty batch");
  for (auto& p : params_) p.tensor.zero_grad();

  StepStats stats;
  const double inv = 1.0 / static_cast<double>(batch.size());
  const std::size_t step_number = state_.step + 1;
  for (const TrainSample* sample : batch) {
    const Tensor visual = model_.encode_image(sample->image);
    const ModelOutput out = model_.forward(visual, sample->tokens, sample->scoring_pos);
    const auto targets = sample->aligned_targets(visual.rows());
    LossParts parts = joint_loss(out, sample->target_score, targets, config_.lambda_reg, config_.lambda_gen);
    const double total = parts.total.item();
    if (!std::isfinite(total)) {
      throw NumericalError("training diverged at step " + std::to_string(step_number) + " (epoch " +
                           std::to_string(state_.epoch + 1) + ", sample " + sample->id + "): loss is " +
                           std::to_string(total));
    }
    backward(scale(parts.total, inv));
    stats.total += total * inv;
    stats.l1 += parts.l1 * inv;
    stats.ce += parts.ce * inv;
    stats.abs_error_points += std::abs(out.score - 100.0 * sample->target_score);
  }

  state_.step = step_number;
  const double t = static_cast<double>(state_.step);
  const double b1 = config_.adam_beta1, b2 = config_.adam_beta2;
  const double c1 = 1.0 - std::pow(b1, t);
  const double c2 = 1.0 - std::pow(b2, t);
  const double lr = config_.learning_rate;
  for (auto& p : params_) {
    auto& mom = state_.moments[p.name];
    auto data = p.tensor.mutable_data();
    const auto grad = p.tensor.has_grad() ? p.tensor.grad() : std::span<const double>();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double g = grad.empty() ? 0.0 : grad[i];
      if (!std::isfinite(g)) {
        throw NumericalError("training diverged at step " + std::to_string(state_.step) + ": gradient of '" +
                             p.name + "' is not finite");
      }
      mom.m[i] = b1 * mom.m[i] + (1.0 - b1) * g;
      mom.v[i] = b2 * mom.v[i] + (1.0 - b2) * g * g;
      const double m_hat = mom.m[i] / c1;
      const double v_hat = mom.v[i] / c2;
      data[i] -= lr * m_hat / (std::sqrt(v_hat) + config_.adam_eps);
    }
  }
  for (auto& p : params_) p.tensor.zero_grad();
  return stats;
}

namespace {

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed(seed, epoch));
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  return order;
}

void write_row(std::ostream& out, std::size_t epoch, std::size_t step, const StepStats& s,
               const std::optional<double>& held, double wall) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%zu,%zu,%.17g,%.17g,%.17g,", epoch, step, s.total, s.l1, s.ce);
  out << buf;
  if (held) {
    std::snprintf(buf, sizeof buf, "%.17g", *held);
    out << buf;
  }
  std::snprintf(buf, sizeof buf, ",%.3f\n", wall);
  out << buf;
}

}  // namespace

void write_log_header(std::ostream& out) { out << "epoch,step,total,l1,ce,held_out_mae,wall_time\n"; }

TrainState train(VlmModel& model, std::span<const TrainSample> samples, std::span<const TrainSample> held_out,
                 const TrainConfig& config, TrainState state, const TrainHooks& hooks) {
  if (samples.empty()) throw ContractError("train: the training set is empty");
  Trainer trainer(model, config, std::move(state));
  TrainState& st = trainer.state();
  if (hooks.log && st.step == 0) write_log_header(*hooks.log);
  const auto start = std::chrono::steady_clock::now();
  auto wall = [&] { return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count(); };

  if (config.plateau_patience > 0 && st.epochs_without_improvement >= config.plateau_patience) return st;
  while (st.epoch < config.epochs) {
    const std::size_t epoch = st.epoch + 1;
    const auto order = epoch_order(samples.size(), config.seed, epoch);
    EpochRecord record;
    record.epoch = epoch;
    double abs_err = 0.0;
    std::vector<const TrainSample*> batch;
    for (std::size_t begin = 0; begin < order.size(); begin += config.batch_size) {
      batch.clear();
      for (std::size_t i = begin; i < std::min(order.size(), begin + config.batch_size); ++i) {
        batch.push_back(&samples[order[i]]);
      }
      const StepStats s = trainer.step(batch);
      const double weight = static_cast<double>(batch.size());
      record.total += s.total * weight;
      record.l1 += s.l1 * weight;
      record.ce += s.ce * weight;
      abs_err += s.abs_error_points;
      const bool last = begin + config.batch_size >= order.size();
      if (last && !held_out.empty()) record.held_out_mae = measure(model, held_out).mae_points;
      if (hooks.log) write_row(*hooks.log, epoch, st.step, s, last ? record.held_out_mae : std::nullopt, wall());
    }
    const double n = static_cast<double>(samples.size());
    record.total /= n;
    record.l1 /= n;
    record.ce /= n;
    record.train_mae = abs_err / n;
    st.epoch = epoch;
    st.history.push_back(record);

    if (record.held_out_mae) {
      if (!st.has_best || *record.held_out_mae < st.best_metric - config.plateau_min_delta) {
        st.best_metric = *record.held_out_mae;
        st.has_best = true;
        st.epochs_without_improvement = 0;
      } else {
        ++st.epochs_without_improvement;
      }
    }
    if (hooks.log) hooks.log->flush();
    if (hooks.on_epoch && !hooks.on_epoch(record, model)) break;
    if (config.plateau_patience > 0 && st.epochs_without_improvement >= config.plateau_patience) break;
  }
  return st;
}

SampleMetrics measure(const VlmModel& model, std::span<const TrainSample> samples) {
  if (samples.empty()) throw ContractError("measure: no samples");
  NoGradGuard no_grad;
  SampleMetrics m;
  for (const auto& s : samples) {
    const Tensor visual = model.encode_image(s.image);
    const ModelOutput out = model.forward(visual, s.tokens, s.scoring_pos);
    m.predicted.push_back(out.score);
    m.mae_points += std::abs(out.score - 100.0 * s.target_score);
    m.mean_ce += softmax_cross_entropy(out.logits, s.aligned_targets(visual.rows()), special::kIgnore).item();
  }
  m.mae_points /= static_cast<double>(samples.size());
  m.mean_ce /= static_cast<double>(samples.size());
  return m;
}

namespace {

constexpr std::size_t kHistoryCols = 7;

CheckpointBlock f64_block(std::string name, Shape shape, std::vector<double> values) {
  CheckpointBlock b;
  b.name = std::move(name);
  b.shape = std::move(shape);
  b.values = std::move(values);
  return b;
}

void compare(const TrainConfig& stored, const TrainConfig& want) {
  auto check = [](bool same, const char* field) {
    if (!same) throw FormatError(std::string("checkpoint config mismatch: ") + field + " differs");
  };
  check(stored.batch_size == want.batch_size, "batch_size");
  check(stored.learning_rate == want.learning_rate, "learning_rate");
  check(stored.adam_beta1 == want.adam_beta1, "adam_beta1");
  check(stored.adam_beta2 == want.adam_beta2, "adam_beta2");
  check(stored.adam_eps == want.adam_eps, "adam_eps");
  check(stored.lambda_reg == want.lambda_reg, "lambda_reg");
  check(stored.lambda_gen == want.lambda_gen, "lambda_gen");
  check(stored.plateau_patience == want.plateau_patience, "plateau_patience");
  check(stored.plateau_min_delta == want.plateau_min_delta, "plateau_min_delta");
  check(stored.seed == want.seed, "seed");
  check(stored.mode == want.mode, "mode");
}

}  // namespace

void save_checkpoint(const VlmModel& model, const TrainConfig& config, const TrainState& state,
                     const std::filesystem::path& path) {
  CheckpointFile file;
  file.kind = CheckpointKind::training;
  append_model_blocks(model, file, config.mode == TrainMode::full);
  file.meta["train.config"] = train_config_to_json(config);
  file.blocks.push_back(f64_block("train.counters", {5},
                                  {static_cast<double>(state.step), static_cast<double>(state.epoch),
                                   state.best_metric, state.has_best ? 1.0 : 0.0,
                                   static_cast<double>(state.epochs_without_improvement)}));
  if (!state.history.empty()) {
    std::vector<double> h;
    for (const auto& r : state.history) {
      h.insert(h.end(), {static_cast<double>(r.epoch), r.total, r.l1, r.ce, r.train_mae,
                         r.held_out_mae ? 1.0 : 0.0, r.held_out_mae.value_or(0.0)});
    }
    file.blocks.push_back(f64_block("train.history", {state.history.size(), kHistoryCols}, std::move(h)));
  }
  for (const auto& [name, mom] : state.moments) {
    file.blocks.push_back(f64_block("adam.m." + name, {mom.m.size()}, mom.m));
    file.blocks.push_back(f64_block("adam.v." + name, {mom.v.size()}, mom.v));
  }
  write_checkpoint(file, path);
}

TrainCheckpoint load_checkpoint(const std::filesystem::path& path, const std::optional<TrainConfig>& expected) {
  const CheckpointFile file = read_checkpoint(path);
  if (file.kind != CheckpointKind::training) throw FormatError(path.string() + " is not a training checkpoint");
  const auto cfg = file.meta.find("train.config");
  if (cfg == file.meta.end()) throw FormatError("training checkpoint lacks its train config");
  TrainConfig config = train_config_from_json(cfg->second);
  if (expected) compare(config, *expected);

  const bool has_base = file.find("tok_emb") != nullptr;
  VlmModel model = has_base ? model_from_blocks(file) : model_from_seeded_base(file);

  TrainState state;
  const CheckpointBlock* counters = file.find("train.counters");
  if (!counters || counters->values.size() != 5) throw FormatError("training checkpoint lacks its counters");
  state.step = static_cast<std::size_t>(counters->values[0]);
  state.epoch = static_cast<std::size_t>(counters->values[1]);
  state.best_metric = counters->values[2];
  state.has_best = counters->values[3] != 0.0;
  state.epochs_without_improvement = static_cast<std::size_t>(counters->values[4]);
  if (const CheckpointBlock* h = file.find("train.history")) {
    if (h->shape.size() != 2 || h->shape[1] != kHistoryCols) throw FormatError("malformed training history");
    for (std::size_t r = 0; r < h->shape[0]; ++r) {
      const double* row = h->values.data() + r * kHistoryCols;
      EpochRecord rec;
      rec.epoch = static_cast<std::size_t>(row[0]);
      rec.total = row[1];
      rec.l1 = row[2];
      rec.ce = row[3];
      rec.train_mae = row[4];
      if (row[5] != 0.0) rec.held_out_mae = row[6];
      state.history.push_back(rec);
    }
  }
  const std::string m_prefix = "adam.m.";
  for (const auto& b : file.blocks) {
    if (b.name.rfind(m_prefix, 0) != 0) continue;
    const std::string name = b.name.substr(m_prefix.size());
    const CheckpointBlock* v = file.find("adam.v." + name);
    if (!v || v->values.size() != b.values.size()) throw FormatError("optimizer moments for '" + name + "' are incomplete");
    state.moments[name] = AdamMoments{b.values, v->values};
  }
  // Validates moment/parameter agreement.
  Trainer check(model, config, state);
  return TrainCheckpoint{std::move(model), config, std::move(state)};
}

}  // namespace atelier
