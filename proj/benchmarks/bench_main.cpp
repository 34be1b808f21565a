#include <benchmark/benchmark.h>

#include "atelier/dataset.hpp"
#include "atelier/lora.hpp"
#include "atelier/model.hpp"
#include "atelier/ops.hpp"
#include "atelier/quantization.hpp"
#include "atelier/rng.hpp"
#include "atelier/trainer.hpp"

using namespace atelier;

namespace {

Tensor random_tensor(Shape shape, std::uint64_t seed) {
  Rng rng(seed);
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  std::vector<double> v(n);
  for (auto& x : v) x = rng.normal();
  return Tensor(std::move(shape), std::move(v));
}

struct Fixture {
  Tokenizer tok = Tokenizer::build_default();
  Dataset data = generate_dataset(10, 7, tok);
  VlmModel model = [this] {
    ModelConfig c;
    c.vocab_size = tok.size();
    VlmModel m(c);
    inject_lora(m, {}, c.lora_rank, c.lora_alpha, 1);
    return m;
  }();
};

Fixture& fixture() {
  static Fixture f;
  return f;
}

void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const Tensor a = random_tensor({n, n}, 1), b = random_tensor({n, n}, 2);
  for (auto _ : state) benchmark::DoNotOptimize(matmul(a, b));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(2 * n * n * n));
}
BENCHMARK(BM_Matmul)->Arg(64)->Arg(128)->Arg(256);

void BM_CausalAttention(benchmark::State& state) {
  const auto t = static_cast<std::size_t>(state.range(0));
  const Tensor qkv = random_tensor({t, 192}, 3);
  for (auto _ : state) benchmark::DoNotOptimize(causal_self_attention(qkv, 4));
}
BENCHMARK(BM_CausalAttention)->Arg(64)->Arg(128)->Arg(256);

void BM_Quantize(benchmark::State& state) {
  const Tensor w = random_tensor({256, 64}, 4);
  for (auto _ : state) benchmark::DoNotOptimize(quantize(w, 64));
}
BENCHMARK(BM_Quantize);

void BM_Dequantize(benchmark::State& state) {
  const QuantizedLinear q = quantize(random_tensor({256, 64}, 5), 64);
  for (auto _ : state) benchmark::DoNotOptimize(dequantize(q));
}
BENCHMARK(BM_Dequantize);

void BM_Forward(benchmark::State& state) {
  auto& f = fixture();
  const auto& s = f.data.records[0].sample;
  NoGradGuard guard;
  for (auto _ : state) {
    const Tensor visual = f.model.encode_image(s.image);
    benchmark::DoNotOptimize(f.model.forward(visual, s.tokens, s.scoring_pos));
  }
}
BENCHMARK(BM_Forward)->Unit(benchmark::kMillisecond);

void BM_TrainSample(benchmark::State& state) {
  auto& f = fixture();
  const auto& s = f.data.records[1].sample;
  auto params = trainable_parameters(f.model, TrainMode::adapters_only);
  for (auto& p : params) p.tensor.set_requires_grad(true);
  const auto targets = s.aligned_targets(f.model.config().visual_tokens());
  for (auto _ : state) {
    const ModelOutput out = f.model.forward(f.model.encode_image(s.image), s.tokens, s.scoring_pos);
    backward(joint_loss(out, s.target_score, targets, 1.0, 1.0).total);
    for (auto& p : params) p.tensor.zero_grad();
  }
  for (auto& p : params) p.tensor.set_requires_grad(false);
}
BENCHMARK(BM_TrainSample)->Unit(benchmark::kMillisecond);

void BM_GenerateCritique(benchmark::State& state) {
  auto& f = fixture();
  const auto& s = f.data.records[2].sample;
  const Tensor visual = f.model.encode_image(s.image);
  for (auto _ : state) benchmark::DoNotOptimize(f.model.generate_critique(visual, s.prompt(), kCritiqueBudget));
}
BENCHMARK(BM_GenerateCritique)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
