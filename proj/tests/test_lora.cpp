#include <gtest/gtest.h>

#include <vector>

#include "skillformer/config.hpp"
#include "skillformer/error.hpp"
#include "skillformer/grad_check.hpp"
#include "skillformer/lora.hpp"
#include "skillformer/model.hpp"
#include "test_util.hpp"

namespace sf = skillformer;
using sf::Tape;
using sf::Tensor;
using sf::Var;

namespace {

Tensor run(const sf::LoraLinear& layer, const Tensor& x) {
  Tape tape;
  return layer.forward(tape, tape.constant(x)).value();
}

Tensor run(const sf::Dense& layer, const Tensor& x) {
  Tape tape;
  return layer.forward(tape, tape.constant(x)).value();
}

sf::LoraLinear random_adapted(std::size_t in, std::size_t out, std::size_t rank, sf::SplitMix64& rng) {
  sf::Dense base = sf::Dense::normal(in, out, 0.5, rng);
  for (double& v : base.bias.data()) v = rng.normal();
  sf::LoraLinear layer = sf::LoraLinear::wrap(std::move(base), rank, 2.0 * rank, rng);
  for (double& v : layer.lora_b().data()) v = 0.3 * rng.normal();
  return layer;
}

std::size_t trainable_count(sf::LoraLinear& layer) {
  std::size_t n = 0;
  layer.for_each_parameter("l", [&](const std::string&, Tensor& t) {
    if (t.requires_grad()) n += t.numel();
  });
  return n;
}

}  // namespace

TEST(Lora, HandComputedForward) {
  sf::Dense base = sf::Dense::zeros(2, 2);
  sf::LoraLinear layer(std::move(base), Tensor({1, 2}, std::vector<double>{1, 0}),
                       Tensor({2, 1}, std::vector<double>{1, 1}), 2.0);
  EXPECT_EQ(layer.scale(), 2.0);
  const Tensor y = run(layer, Tensor({1, 2}, std::vector<double>{1, 0}));
  EXPECT_EQ(y[0], 2.0);
  EXPECT_EQ(y[1], 2.0);
}

TEST(Lora, FreshWrapComputesBaseLayerBitwise) {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    sf::SplitMix64 rng(seed);
    const std::size_t in = 1 + rng.below(20), out = 1 + rng.below(20);
    const std::size_t rank = 1 + rng.below(std::min(in, out));
    sf::Dense base = sf::Dense::normal(in, out, 1.0, rng);
    for (double& v : base.bias.data()) v = rng.normal();
    const sf::LoraLinear layer = sf::LoraLinear::wrap(base, rank, 16.0, rng);
    const Tensor x = Tensor::normal({3, in}, rng, 1.0);
    EXPECT_TRUE(sf::bitwise_equal(run(layer, x), run(base, x))) << "seed " << seed;
    for (const double b : layer.lora_b().data()) EXPECT_EQ(b, 0.0);
  }
}

TEST(Lora, FactorInitStatistics) {
  sf::SplitMix64 rng(1);
  const sf::LoraLinear layer = sf::LoraLinear::wrap(sf::Dense::zeros(200, 200), 50, 100.0, rng);
  double s = 0.0, s2 = 0.0;
  for (const double a : layer.lora_a().data()) s += a, s2 += a * a;
  const double n = static_cast<double>(layer.lora_a().numel());
  EXPECT_NEAR(s / n, 0.0, 0.001);
  EXPECT_NEAR(std::sqrt(s2 / n), sf::LoraLinear::kInitStd, 0.001);
}

TEST(Lora, RankBounds) {
  sf::SplitMix64 rng(1);
  EXPECT_NO_THROW((void)sf::LoraLinear::wrap(sf::Dense::zeros(6, 4), 4, 8.0, rng));
  EXPECT_THROW((void)sf::LoraLinear::wrap(sf::Dense::zeros(6, 4), 5, 8.0, rng), sf::ConfigError);
  EXPECT_THROW((void)sf::LoraLinear::wrap(sf::Dense::zeros(6, 4), 0, 8.0, rng), sf::ConfigError);
}

TEST(Lora, ScalingPresetsConstruct) {
  for (const char* name : {"Ego", "Exos", "EgoExos"}) {
    const sf::RunConfig cfg = sf::preset(name);
    const sf::SkillFormer model = sf::SkillFormer::init(cfg.model, 0);
    for (const auto& block : model.backbone().blocks()) {
      EXPECT_EQ(block.temporal_qkv.adapter().rank(), cfg.model.lora_rank) << name;
      EXPECT_EQ(block.fc2.adapter().alpha(), cfg.model.lora_alpha) << name;
    }
  }
}

TEST(Lora, OnlyFactorsReceiveGradients) {
  sf::SplitMix64 rng(2);
  sf::LoraLinear layer = random_adapted(6, 5, 2, rng);
  const Tensor x = Tensor::normal({4, 6}, rng, 1.0);
  Tape tape;
  tape.backward(sf::sum(sf::mul(layer.forward(tape, tape.constant(x)), tape.constant(Tensor::normal({4, 5}, rng, 1.0)))));
  EXPECT_FALSE(layer.base().weight.has_grad());
  EXPECT_FALSE(layer.base().bias.has_grad());
  EXPECT_GT(sf::testing::max_abs(layer.lora_a().grad()), 0.0);
  EXPECT_GT(sf::testing::max_abs(layer.lora_b().grad()), 0.0);
}

TEST(Lora, FactorGradientsMatchFiniteDifferences) {
  sf::SplitMix64 rng(3);
  sf::LoraLinear layer = random_adapted(6, 5, 2, rng);
  const Tensor x = Tensor::normal({3, 6}, rng, 1.0);
  const Tensor r = Tensor::normal({3, 5}, rng, 1.0);
  const std::vector<sf::CheckedTensor> checked = {{"A", &layer.lora_a()}, {"B", &layer.lora_b()}};
  const auto report = sf::grad_check(
      [&](Tape& t) { return sf::sum(sf::mul(layer.forward(t, t.constant(x)), t.constant(r))); }, checked);
  EXPECT_LT(report.max_rel_error, 1e-6);
}

TEST(LoraMerge, ZeroCorrectionKeepsWeightsBitwise) {
  sf::SplitMix64 rng(4);
  const sf::Dense base = sf::Dense::normal(7, 3, 1.0, rng);
  const sf::Dense merged = sf::LoraLinear::wrap(base, 2, 4.0, rng).merge();
  EXPECT_TRUE(sf::bitwise_equal(merged.weight, base.weight));
  EXPECT_TRUE(sf::bitwise_equal(merged.bias, base.bias));
}

TEST(LoraMerge, EffectiveWeightFormula) {
  sf::SplitMix64 rng(5);
  const sf::LoraLinear layer = random_adapted(4, 3, 2, rng);
  const sf::Dense merged = layer.merge();
  for (std::size_t o = 0; o < 3; ++o) {
    for (std::size_t i = 0; i < 4; ++i) {
      double delta = 0.0;
      for (std::size_t k = 0; k < 2; ++k) delta += layer.lora_b()[o * 2 + k] * layer.lora_a()[k * 4 + i];
      EXPECT_NEAR(merged.weight[o * 4 + i], layer.base().weight[o * 4 + i] + layer.scale() * delta, 1e-15);
    }
  }
}

TEST(LoraMerge, ThousandInputsAgree) {
  sf::SplitMix64 rng(6);
  const sf::LoraLinear layer = random_adapted(16, 12, 4, rng);
  const sf::Dense merged = layer.merge();
  const Tensor x = Tensor::normal({1000, 16}, rng, 1.0);
  EXPECT_LT(sf::max_abs_diff(run(layer, x), run(merged, x)), 1e-12);
}

TEST(LoraMerge, MergedModelHasBaseParameterCount) {
  const sf::SkillFormerConfig cfg = sf::testing::tiny_config();
  sf::SkillFormer model = sf::SkillFormer::init(cfg, 1);
  std::size_t lora = 0;
  model.for_each_parameter([&](const std::string& name, const Tensor& t) {
    if (name.find(".lora_") != std::string::npos) lora += t.numel();
  });
  const sf::ParamCounts before = model.count_params();
  model.merge_lora();
  const sf::ParamCounts after = model.count_params();
  EXPECT_EQ(after.total, before.total - lora);
  EXPECT_EQ(after.frozen, before.frozen);
  EXPECT_TRUE(model.merged());
}

TEST(LoraCount, SingleEightByEightLayer) {
  sf::SplitMix64 rng(7);
  sf::LoraLinear layer = sf::LoraLinear::wrap(sf::Dense::zeros(8, 8), 2, 4.0, rng);
  EXPECT_EQ(trainable_count(layer), 32u);
}

TEST(LoraCount, TrainableStrictlyIncreasesWithRank) {
  sf::SkillFormerConfig cfg = sf::testing::tiny_config();
  std::size_t previous = 0;
  for (std::size_t r = 1; r <= cfg.backbone.embed_dim; ++r) {
    cfg.lora_rank = r;
    const std::size_t n = sf::SkillFormer::init(cfg, 0).count_params().trainable;
    EXPECT_GT(n, previous) << "rank " << r;
    previous = n;
  }
}

TEST(LoraCount, DeskTrainableShareBelowHalf) {
  sf::SkillFormerConfig cfg = sf::preset("desk").model;
  // Rank-to-width ratios of 32, 48 and 64 over 768, scaled to desk width.
  for (const std::size_t r : {cfg.lora_rank, std::size_t{3}, std::size_t{4}, std::size_t{5}}) {
    cfg.lora_rank = r;
    const sf::ParamCounts c = sf::SkillFormer::init(cfg, 0).count_params();
    EXPECT_EQ(c.total, c.trainable + c.frozen);
    EXPECT_LT(static_cast<double>(c.trainable) / static_cast<double>(c.total), 0.5) << "rank " << r;
  }
}
