#include <benchmark/benchmark.h>

#include <vector>

#include "skillformer/config.hpp"
#include "skillformer/data.hpp"
#include "skillformer/model.hpp"

namespace sf = skillformer;
using sf::Tape;
using sf::Tensor;

namespace {

void BM_Matmul(benchmark::State& state) {
  const auto m = static_cast<std::size_t>(state.range(0));
  const auto k = static_cast<std::size_t>(state.range(1));
  const auto n = static_cast<std::size_t>(state.range(2));
  sf::SplitMix64 rng(1);
  const Tensor a = Tensor::normal({m, k}, rng, 1.0);
  const Tensor b = Tensor::normal({k, n}, rng, 1.0);
  for (auto _ : state) {
    Tape tape;
    benchmark::DoNotOptimize(sf::matmul(tape.constant(a), tape.constant(b)).value().data().data());
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * 2 * m * n * k));
}
// Patch embedding, qkv projection and MLP shapes of a desk training batch.
BENCHMARK(BM_Matmul)->Args({5120, 64, 64})->Args({5120, 64, 192})->Args({5120, 64, 256})->Args({5120, 256, 64})
    ->Args({17, 17, 16});

void BM_Linear_Backward(benchmark::State& state) {
  const auto rows = static_cast<std::size_t>(state.range(0));
  sf::SplitMix64 rng(2);
  const Tensor x = Tensor::normal({rows, 64}, rng, 1.0);
  Tensor w = Tensor::normal({256, 64}, rng, 0.1);
  Tensor b({256}, 0.0);
  w.set_requires_grad(true);
  b.set_requires_grad(true);
  for (auto _ : state) {
    Tape tape;
    tape.backward(sf::sum(sf::gelu(sf::linear(tape.constant(x), tape.watch(w), tape.watch(b)))));
    w.zero_grad();
    b.zero_grad();
  }
}
BENCHMARK(BM_Linear_Backward)->Arg(1024)->Arg(5120);

sf::PreparedData desk_batch(std::size_t n, const sf::SkillFormerConfig& cfg) {
  sf::SyntheticSpec spec;
  spec.views = cfg.views;
  return sf::prepare(sf::generate(spec, n), cfg.frames, cfg.backbone.image_size);
}

void BM_DeskForward(benchmark::State& state) {
  const sf::SkillFormerConfig cfg = sf::preset("desk").model;
  const sf::SkillFormer model = sf::SkillFormer::init(cfg, 0);
  const auto batch = static_cast<std::size_t>(state.range(0));
  const sf::PreparedData data = desk_batch(batch, cfg);
  std::vector<std::size_t> idx(batch);
  for (std::size_t i = 0; i < batch; ++i) idx[i] = i;
  const Tensor x = data.batch(idx);
  for (auto _ : state) benchmark::DoNotOptimize(model.logits(x).data().data());
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * batch));
}
BENCHMARK(BM_DeskForward)->Arg(1)->Arg(16)->Unit(benchmark::kMillisecond);

void BM_DeskTrainStep(benchmark::State& state) {
  const sf::SkillFormerConfig cfg = sf::preset("desk").model;
  sf::SkillFormer model = sf::SkillFormer::init(cfg, 0);
  const sf::PreparedData data = desk_batch(16, cfg);
  std::vector<std::size_t> idx(16);
  for (std::size_t i = 0; i < 16; ++i) idx[i] = i;
  const Tensor x = data.batch(idx);
  const std::vector<int> labels = data.batch_labels(idx);
  sf::SplitMix64 dropout(3);
  auto params = model.trainable_parameters();
  for (auto _ : state) {
    Tape tape;
    tape.backward(sf::cross_entropy(model.forward(tape, x, &dropout, true), labels));
    for (auto& p : params) p.tensor->clear_grad();
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * 16));
}
BENCHMARK(BM_DeskTrainStep)->Unit(benchmark::kMillisecond);

void BM_MergeLora(benchmark::State& state) {
  const sf::SkillFormer model = sf::SkillFormer::init(sf::preset("desk").model, 0);
  for (auto _ : state) {
    sf::SkillFormer copy = model;
    copy.merge_lora();
    benchmark::DoNotOptimize(copy.count_params().total);
  }
}
BENCHMARK(BM_MergeLora)->Unit(benchmark::kMicrosecond);

void BM_GenerateSamples(benchmark::State& state) {
  sf::SyntheticSpec spec;
  for (auto _ : state) benchmark::DoNotOptimize(sf::generate(spec, 16).pixels.data());
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * 16));
}
BENCHMARK(BM_GenerateSamples)->Unit(benchmark::kMillisecond);

void BM_BayesOracle(benchmark::State& state) {
  sf::SyntheticSpec spec;
  const std::vector<std::size_t> observed = {0};
  for (auto _ : state) benchmark::DoNotOptimize(sf::bayes_oracle(spec, observed, 10000).accuracy);
}
BENCHMARK(BM_BayesOracle)->Unit(benchmark::kMillisecond);

}  // namespace
BENCHMARK_MAIN();
