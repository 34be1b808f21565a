#include <cmath>
#include <sstream>

#include "atelier/dataset.hpp"
#include "atelier/errors.hpp"
#include "atelier/lora.hpp"
#include "atelier/model.hpp"
#include "atelier/ops.hpp"
#include "atelier/rng.hpp"
#include "atelier/special_tokens.hpp"
#include "atelier/trainer.hpp"
#include "doctest.h"
#include "oracles.hpp"

using namespace atelier;

namespace {

const Tokenizer& tokenizer() {
  static const Tokenizer tok = Tokenizer::build_default();
  return tok;
}

const Dataset& corpus() {
  static const Dataset ds = generate_dataset(20, 13, tokenizer());
  return ds;
}

std::vector<TrainSample> samples(std::size_t begin, std::size_t count) {
  std::vector<TrainSample> out;
  for (std::size_t i = begin; i < begin + count; ++i) out.push_back(corpus().records[i].sample);
  return out;
}

ModelConfig small_config() {
  ModelConfig c;
  c.vocab_size = tokenizer().size();
  c.d_model = 16;
  c.n_heads = 2;
  c.n_layers = 2;
  return c;
}

TrainConfig adapters_only() {
  TrainConfig c;
  c.mode = TrainMode::adapters_only;
  return c;
}

VlmModel adapted_model() {
  VlmModel m(small_config());
  inject_lora(m, {}, 4, 8.0, 21);
  return m;
}

std::vector<std::vector<double>> snapshot(const std::vector<NamedTensor>& tensors) {
  std::vector<std::vector<double>> out;
  for (const auto& t : tensors) out.emplace_back(t.tensor.data().begin(), t.tensor.data().end());
  return out;
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream in(line);
  for (std::string cell; std::getline(in, cell, ',');) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

ModelOutput fixed_output(std::size_t rows, std::size_t vocab, double raw, const std::vector<int>& targets, double peak) {
  std::vector<double> logits(rows * vocab, 0.0);
  for (std::size_t r = 0; r < rows; ++r)
    if (targets[r] >= 0) logits[r * vocab + static_cast<std::size_t>(targets[r])] = peak;
  ModelOutput out;
  out.logits = Tensor({rows, vocab}, logits, true);
  out.score_raw = Tensor({1, 1}, {raw}, true);
  out.score = 100.0 * oracle::sigmoid(raw);
  return out;
}

}  // namespace

TEST_SUITE("trainer") {

TEST_CASE("config validation and json") {
  TrainConfig c;
  CHECK_NOTHROW(c.validate());
  CHECK(c.mode == TrainMode::full);
  c.lambda_reg = -1.0;
  CHECK_THROWS_AS(c.validate(), ContractError);
  c = TrainConfig{};
  c.lambda_reg = 0.0;
  c.lambda_gen = 0.0;
  CHECK_THROWS_AS(c.validate(), ContractError);
  c = TrainConfig{};
  c.batch_size = 0;
  CHECK_THROWS_AS(c.validate(), ContractError);

  TrainConfig d;
  d.epochs = 7;
  d.learning_rate = 1.25e-3;
  d.mode = TrainMode::adapters_only;
  d.lambda_gen = 0.5;
  CHECK(train_config_from_json(train_config_to_json(d)) == d);
  CHECK(train_config_from_json("{\"epochs\": 3}").epochs == 3);
  CHECK(train_config_from_json("{}") == TrainConfig{});
  CHECK_THROWS_AS(train_config_from_json("{\"epoch\": 3}"), FormatError);
  CHECK_THROWS_AS(train_config_from_json("{\"mode\": \"partial\"}"), FormatError);
  CHECK_THROWS_AS(train_config_from_json("[1]"), FormatError);
}

TEST_CASE("joint loss decomposition") {
  const std::size_t vocab = 7;
  const std::vector<int> targets{-1, -1, 3, 5, 2};
  const ModelOutput exact = fixed_output(5, vocab, 0.0, targets, 1000.0);
  const LossParts zero = joint_loss(exact, 0.5, targets, 1.0, 1.0);
  CHECK(zero.l1 == 0.0);
  CHECK(zero.ce == 0.0);
  CHECK(zero.total.item() == 0.0);

  const ModelOutput off = fixed_output(5, vocab, 0.8, targets, 1.5);
  const LossParts reg_only = joint_loss(off, 0.3, targets, 0.7, 0.0);
  CHECK(reg_only.total.item() == 0.7 * reg_only.l1);
  CHECK(reg_only.l1 == doctest::Approx(std::fabs(oracle::sigmoid(0.8) - 0.3)).epsilon(1e-15));
  const std::vector<int> ignored(5, special::kIgnore);
  CHECK_NOTHROW(joint_loss(off, 0.3, ignored, 1.0, 0.0));
  CHECK_THROWS_AS(joint_loss(off, 0.3, ignored, 1.0, 1.0), ContractError);
  CHECK_THROWS_AS(joint_loss(off, 1.5, targets, 1.0, 1.0), ContractError);

  Rng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> logits(5 * vocab);
    for (auto& v : logits) v = rng.normal(0.0, 2.0);
    ModelOutput out;
    out.logits = Tensor({5, vocab}, logits);
    const double raw = rng.normal();
    out.score_raw = Tensor({1, 1}, {raw});
    const double lr = rng.uniform(0.0, 2.0), lg = rng.uniform(0.0, 2.0), t = rng.uniform();
    const LossParts p = joint_loss(out, t, targets, lr, lg);
    CHECK(std::fabs(p.total.item() - (lr * p.l1 + lg * p.ce)) <= 1e-12);
    double ce = 0.0;
    for (std::size_t r = 2; r < 5; ++r) {
      double z = 0.0;
      for (std::size_t j = 0; j < vocab; ++j) z += std::exp(logits[r * vocab + j]);
      ce += -std::log(std::exp(logits[r * vocab + static_cast<std::size_t>(targets[r])]) / z);
    }
    CHECK(p.ce == doctest::Approx(ce / 3.0).epsilon(1e-12));
  }
}

TEST_CASE("adam update matches the documented rule") {
  VlmModel model = adapted_model();
  Rng rng(2);
  for (auto& t : model.adapter_tensors())
    for (auto& v : t.tensor.mutable_data()) v += rng.normal(0.0, 0.1);
  VlmModel probe = model.clone();
  const auto batch_samples = samples(0, 3);

  auto probe_params = trainable_parameters(probe, TrainMode::adapters_only);
  for (auto& p : probe_params) p.tensor.set_requires_grad(true);
  for (const auto& s : batch_samples) {
    const Tensor visual = probe.encode_image(s.image);
    const LossParts l = joint_loss(probe.forward(visual, s.tokens, s.scoring_pos), s.target_score,
                                   s.aligned_targets(visual.rows()), 1.0, 1.0);
    backward(scale(l.total, 1.0 / 3.0));
  }

  TrainConfig cfg = adapters_only();
  cfg.learning_rate = 1e-2;
  Trainer trainer(model, cfg);
  const auto before = snapshot(trainer.parameters());
  std::vector<const TrainSample*> batch;
  for (const auto& s : batch_samples) batch.push_back(&s);
  trainer.step(batch);
  const auto& params = trainer.parameters();
  REQUIRE(params.size() == probe_params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    CHECK(params[i].name == probe_params[i].name);
    const auto& g = probe_params[i].tensor;
    const auto& m = trainer.state().moments.at(params[i].name);
    for (std::size_t j = 0; j < before[i].size(); ++j) {
      const double grad = g.has_grad() ? g.grad()[j] : 0.0;
      const double mhat = (0.1 * grad) / (1.0 - 0.9);
      const double vhat = (0.001 * grad * grad) / (1.0 - 0.999);
      const double expect = before[i][j] - 1e-2 * mhat / (std::sqrt(vhat) + 1e-8);
      CHECK(m.m[j] == doctest::Approx(0.1 * grad).epsilon(1e-9).scale(1e-300));
      CHECK(params[i].tensor.at(j) == doctest::Approx(expect).epsilon(1e-9));
    }
  }
  CHECK(trainer.state().step == 1);
  CHECK(trainer.state().moments.size() == params.size());
}

TEST_CASE("zero learning rate leaves every weight bit-identical") {
  VlmModel model(small_config());
  const auto before = snapshot(trainable_parameters(model, TrainMode::full));
  TrainConfig cfg;
  cfg.mode = TrainMode::full;
  cfg.learning_rate = 0.0;
  cfg.epochs = 2;
  cfg.batch_size = 3;
  const auto data = samples(0, 7);
  train(model, data, {}, cfg);
  CHECK(snapshot(trainable_parameters(model, TrainMode::full)) == before);
}

TEST_CASE("identical runs give identical histories and weights") {
  TrainConfig cfg = adapters_only();
  cfg.epochs = 3;
  cfg.batch_size = 2;
  cfg.learning_rate = 3e-3;
  const auto data = samples(0, 6);
  const auto held = samples(10, 3);
  VlmModel a = adapted_model(), b = adapted_model();
  const TrainState sa = train(a, data, held, cfg);
  const TrainState sb = train(b, data, held, cfg);
  CHECK(sa == sb);
  CHECK(snapshot(trainable_parameters(a, TrainMode::adapters_only)) ==
        snapshot(trainable_parameters(b, TrainMode::adapters_only)));
  CHECK(sa.history.size() == 3);
  CHECK(sa.step == 9);

  TrainConfig reseeded = cfg;
  reseeded.seed = 2;
  VlmModel c = adapted_model();
  CHECK_FALSE(train(c, data, held, reseeded).history == sa.history);
}

TEST_CASE("adapters-only training never moves the frozen base") {
  VlmModel model = adapted_model();
  const std::uint64_t fp = base_fingerprint(model);
  const auto base = snapshot(model.base_tensors());
  TrainConfig cfg = adapters_only();
  cfg.epochs = 2;
  cfg.batch_size = 2;
  cfg.learning_rate = 1e-2;
  train(model, samples(0, 4), {}, cfg);
  CHECK(base_fingerprint(model) == fp);
  CHECK(snapshot(model.base_tensors()) == base);
}

TEST_CASE("one-sample memorization lowers the joint loss within 50 steps") {
  VlmModel model = adapted_model();
  const auto data = samples(3, 1);
  const double initial = measure(model, data).mean_ce + measure(model, data).mae_points / 100.0;
  Trainer trainer(model, adapters_only());
  const TrainSample* batch[] = {&data[0]};
  for (int i = 0; i < 50; ++i) trainer.step(batch);
  const auto after = measure(model, data);
  CHECK(after.mean_ce + after.mae_points / 100.0 < initial);
}

TEST_CASE("plateau detection stops after patience epochs without improvement") {
  VlmModel model = adapted_model();
  TrainConfig cfg = adapters_only();
  cfg.learning_rate = 0.0;
  cfg.epochs = 20;
  cfg.batch_size = 4;
  const TrainState st = train(model, samples(0, 4), samples(10, 2), cfg);
  CHECK(st.history.size() == 1 + cfg.plateau_patience);
  CHECK(st.epochs_without_improvement == cfg.plateau_patience);
  CHECK(st.has_best);

  cfg.plateau_patience = 0;
  cfg.epochs = 5;
  VlmModel other = adapted_model();
  CHECK(train(other, samples(0, 4), samples(10, 2), cfg).history.size() == 5);
}

TEST_CASE("hooks can stop training early") {
  VlmModel model = adapted_model();
  TrainConfig cfg = adapters_only();
  cfg.epochs = 10;
  TrainHooks hooks;
  hooks.on_epoch = [](const EpochRecord& r, const VlmModel&) { return r.epoch < 2; };
  CHECK(train(model, samples(0, 3), {}, cfg, {}, hooks).epoch == 2);
}

TEST_CASE("divergence aborts naming the step") {
  VlmModel model = adapted_model();
  for (auto& t : model.head_tensors()) t.tensor.mutable_data()[0] = std::nan("");
  TrainConfig cfg = adapters_only();
  cfg.batch_size = 2;
  try {
    train(model, samples(0, 4), {}, cfg);
    FAIL("expected NumericalError");
  } catch (const NumericalError& e) {
    CHECK(std::string(e.what()).find("step 1") != std::string::npos);
  }
}

TEST_CASE("adapters-only on a model without adapters is refused") {
  VlmModel model(small_config());
  CHECK_THROWS_AS(Trainer(model, adapters_only()), ContractError);
  CHECK_THROWS_AS(train(model, samples(0, 2), {}, adapters_only()), ContractError);
}

TEST_CASE("csv log rows decompose exactly and carry held-out mae at epoch ends") {
  VlmModel model = adapted_model();
  TrainConfig cfg = adapters_only();
  cfg.epochs = 2;
  cfg.batch_size = 3;
  cfg.lambda_reg = 0.75;
  cfg.lambda_gen = 1.5;
  std::ostringstream log;
  TrainHooks hooks;
  hooks.log = &log;
  const TrainState st = train(model, samples(0, 7), samples(12, 2), cfg, {}, hooks);
  std::istringstream in(log.str());
  std::string line;
  std::getline(in, line);
  CHECK(line == "epoch,step,total,l1,ce,held_out_mae,wall_time");
  std::size_t rows = 0;
  std::vector<std::size_t> filled;
  while (std::getline(in, line)) {
    const auto cells = split_csv(line);
    REQUIRE(cells.size() == 7);
    const double total = std::stod(cells[2]), l1 = std::stod(cells[3]), ce = std::stod(cells[4]);
    CHECK(std::fabs(total - (0.75 * l1 + 1.5 * ce)) <= 1e-12);
    CHECK(std::stoul(cells[1]) == rows + 1);
    if (!cells[5].empty()) filled.push_back(rows + 1);
    ++rows;
  }
  CHECK(rows == st.step);
  CHECK(rows == 6);
  CHECK(filled == std::vector<std::size_t>{3, 6});
  for (const auto& r : st.history) CHECK(std::fabs(r.total - (0.75 * r.l1 + 1.5 * r.ce)) <= 1e-12);
}

}  // TEST_SUITE
