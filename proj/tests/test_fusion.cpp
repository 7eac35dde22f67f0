#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "skillformer/diagnostics.hpp"
#include "skillformer/error.hpp"
#include "skillformer/fusion.hpp"
#include "skillformer/grad_check.hpp"
#include "test_util.hpp"

namespace sf = skillformer;
using sf::Tape;
using sf::Tensor;
using sf::Var;

namespace {

constexpr std::size_t kDim = 8;

sf::FusionConfig small_fusion() {
  sf::FusionConfig cfg;
  cfg.hidden = 12;
  cfg.out_dim = 6;
  cfg.heads = 2;
  return cfg;
}

// Random module with every vector parameter moved off its init value so no
// branch is trivially the identity.
sf::CrossViewFusion random_fusion(std::uint64_t seed, sf::FusionConfig cfg = small_fusion()) {
  sf::SplitMix64 rng(seed);
  sf::CrossViewFusion f = sf::CrossViewFusion::init(kDim, cfg, rng);
  f.for_each_parameter("", [&](const std::string& name, Tensor& t) {
    if (t.rank() == 1 && name != ".mu_learn" && name != ".sigma_learn") {
      for (double& v : t.data()) v += 0.2 * rng.normal();
    }
  });
  return f;
}

Tensor permute_views(const Tensor& x, const std::vector<std::size_t>& perm) {
  const std::size_t b = x.dim(0), v = x.dim(1), d = x.dim(2);
  Tensor out(x.shape());
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t j = 0; j < v; ++j) {
      std::copy_n(x.data().begin() + (i * v + perm[j]) * d, d, out.data().begin() + (i * v + j) * d);
    }
  }
  return out;
}

std::vector<std::size_t> random_permutation(std::size_t n, sf::SplitMix64& rng) {
  std::vector<std::size_t> p(n);
  std::iota(p.begin(), p.end(), 0);
  for (std::size_t i = n; i > 1; --i) std::swap(p[i - 1], p[rng.below(i)]);
  return p;
}

Tensor row_stats(const Tensor& y) {
  const std::size_t rows = y.dim(0), d = y.dim(1);
  Tensor out({rows, 2});
  for (std::size_t i = 0; i < rows; ++i) {
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += y[i * d + j] / d;
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (y[i * d + j] - mean) * (y[i * d + j] - mean) / d;
    out[2 * i] = mean;
    out[2 * i + 1] = std::sqrt(var);
  }
  return out;
}

}  // namespace

TEST(FusionConfig, RejectsUnusableCombinations) {
  sf::FusionConfig cfg = small_fusion();
  cfg.out_dim = 1;
  EXPECT_THROW(cfg.validate(kDim), sf::ConfigError);
  cfg = small_fusion();
  cfg.heads = 3;
  EXPECT_THROW(cfg.validate(kDim), sf::ConfigError);
  cfg = small_fusion();
  cfg.dropout = 1.0;
  EXPECT_THROW(cfg.validate(kDim), sf::ConfigError);
}

TEST(FusionInit, CalibrationStartsAtUnitScale) {
  sf::SplitMix64 rng(1);
  const sf::CrossViewFusion f = sf::CrossViewFusion::init(kDim, small_fusion(), rng);
  for (const double v : f.params().mu_learn.data()) EXPECT_EQ(v, 0.0);
  for (const double v : f.params().sigma_learn.data()) EXPECT_EQ(v, 1.0);
  std::size_t tensors = 0;
  f.for_each_parameter("fusion", [&](const std::string& name, const Tensor& t) {
    EXPECT_TRUE(t.requires_grad()) << name;
    ++tensors;
  });
  EXPECT_EQ(tensors, 18u);
}

TEST(FusionInit, ParameterNames) {
  sf::SplitMix64 rng(1);
  const sf::CrossViewFusion f = sf::CrossViewFusion::init(kDim, small_fusion(), rng);
  std::vector<std::string> names;
  f.for_each_parameter("fusion", [&](const std::string& name, const Tensor&) { names.push_back(name); });
  for (const char* expected : {"fusion.view_ln.weight", "fusion.attn.in_proj.weight", "fusion.attn.out_proj.bias",
                               "fusion.w1.weight", "fusion.gate.bias", "fusion.w2.weight", "fusion.mu_learn",
                               "fusion.sigma_learn"}) {
    EXPECT_NE(std::find(names.begin(), names.end(), expected), names.end()) << expected;
  }
}

// ---------------------------------------------------------------- view_attend

TEST(ViewAttend, SingleViewIsValuePath) {
  const sf::CrossViewFusion f = random_fusion(2);
  sf::SplitMix64 rng(3);
  const Tensor x = Tensor::normal({4, 1, kDim}, rng, 1.0);
  Tape tape;
  const Tensor out = f.view_attend(tape, tape.constant(x)).value();
  const Var normed = f.params().view_ln.forward(tape, tape.constant(x), f.config().ln_eps);
  const Var v = sf::slice(f.params().attn_in.forward(tape, normed), 2, 2 * kDim, kDim);
  EXPECT_LT(sf::max_abs_diff(out, f.params().attn_out.forward(tape, v).value()), 1e-14);
}

TEST(ViewAttend, IdenticalViewsGiveIdenticalRows) {
  const sf::CrossViewFusion f = random_fusion(4);
  sf::SplitMix64 rng(5);
  const Tensor row = Tensor::normal({kDim}, rng, 1.0);
  Tensor x({2, 5, kDim});
  for (std::size_t i = 0; i < 10; ++i) std::copy_n(row.data().begin(), kDim, x.data().begin() + i * kDim);
  Tape tape;
  const Tensor out = f.view_attend(tape, tape.constant(x)).value();
  for (std::size_t i = 1; i < 10; ++i) {
    for (std::size_t j = 0; j < kDim; ++j) EXPECT_EQ(out[i * kDim + j], out[j]);
  }
}

TEST(ViewAttendProperty, PermutationEquivariant) {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const sf::CrossViewFusion f = random_fusion(seed);
    sf::SplitMix64 rng(seed + 1000);
    const std::size_t views = 2 + rng.below(5);
    const Tensor x = Tensor::normal({3, views, kDim}, rng, 1.0);
    const auto perm = random_permutation(views, rng);
    Tape tape;
    const Tensor a = permute_views(f.view_attend(tape, tape.constant(x)).value(), perm);
    const Tensor b = f.view_attend(tape, tape.constant(permute_views(x, perm))).value();
    EXPECT_LT(sf::max_abs_diff(a, b), 1e-12) << "seed " << seed;
  }
}

TEST(ViewAttend, WrongFeatureWidthIsDimensionError) {
  const sf::CrossViewFusion f = random_fusion(1);
  Tape tape;
  EXPECT_THROW(f.view_attend(tape, tape.constant(Tensor({2, 3, kDim + 1}))), sf::DimensionError);
  EXPECT_THROW(f.view_attend(tape, tape.constant(Tensor({2, kDim}))), sf::DimensionError);
}

// ---------------------------------------------------------------- aggregate

TEST(Aggregate, IdenticalRowsPoolToThatRow) {
  const sf::CrossViewFusion f = random_fusion(6);
  sf::SplitMix64 rng(7);
  const Tensor row = Tensor::normal({1, 1, kDim}, rng, 1.0);
  Tensor repeated({1, 4, kDim});
  for (std::size_t v = 0; v < 4; ++v) std::copy_n(row.data().begin(), kDim, repeated.data().begin() + v * kDim);
  Tape tape;
  const Tensor a = f.aggregate_transform(tape, tape.constant(row)).value();
  const Tensor b = f.aggregate_transform(tape, tape.constant(repeated)).value();
  EXPECT_LT(sf::max_abs_diff(a, b), 1e-15);
}

TEST(Aggregate, EvalModeIsDeterministicAndTrainingDropsUnits) {
  const sf::CrossViewFusion f = random_fusion(8);
  sf::SplitMix64 rng(9);
  const Tensor x = Tensor::normal({4, 3, kDim}, rng, 1.0);
  Tape tape;
  sf::SplitMix64 mask(1);
  const Tensor e1 = f.aggregate_transform(tape, tape.constant(x), &mask, false).value();
  const Tensor e2 = f.aggregate_transform(tape, tape.constant(x), &mask, false).value();
  EXPECT_TRUE(sf::bitwise_equal(e1, e2));
  const Tensor t = f.aggregate_transform(tape, tape.constant(x), &mask, true).value();
  EXPECT_FALSE(sf::bitwise_equal(e1, t));
}

TEST(Aggregate, GradientsMatchFiniteDifferences) {
  sf::CrossViewFusion f = random_fusion(10);
  sf::SplitMix64 rng(11);
  Tensor x = Tensor::normal({2, 3, kDim}, rng, 1.0);
  const Tensor r = Tensor::normal({2, small_fusion().hidden}, rng, 1.0);
  auto& p = f.params();
  const std::vector<sf::CheckedTensor> checked = {{"x", &x},
                                                  {"w1.weight", &p.w1.weight},
                                                  {"w1.bias", &p.w1.bias},
                                                  {"w1.norm.weight", &p.w1_norm.weight},
                                                  {"w1.norm.bias", &p.w1_norm.bias}};
  const auto report = sf::grad_check(
      [&](Tape& t) { return sf::sum(sf::mul(f.aggregate_transform(t, t.watch(x)), t.constant(r))); }, checked);
  EXPECT_LT(report.max_rel_error, 1e-5);
}

// ---------------------------------------------------------------- gate

TEST(Gate, ZeroGateHalvesInput) {
  sf::CrossViewFusion f = random_fusion(12);
  f.params().gate.weight.fill(0.0);
  f.params().gate.bias.fill(0.0);
  sf::SplitMix64 rng(13);
  const Tensor h = Tensor::normal({3, 12}, rng, 2.0);
  Tape tape;
  const Tensor g = f.gate(tape, tape.constant(h)).value();
  for (std::size_t i = 0; i < h.numel(); ++i) EXPECT_EQ(g[i], 0.5 * h[i]);
}

TEST(Gate, SaturatedGatePassesInput) {
  sf::CrossViewFusion f = random_fusion(14);
  f.params().gate.weight.fill(0.0);
  f.params().gate.bias.fill(30.0);
  sf::SplitMix64 rng(15);
  const Tensor h = Tensor::normal({3, 12}, rng, 2.0);
  Tape tape;
  EXPECT_LT(sf::max_abs_diff(f.gate(tape, tape.constant(h)).value(), h), 1e-9);
}

TEST(GateProperty, WeightsStrictlyBetweenZeroAndOne) {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const sf::CrossViewFusion f = random_fusion(seed);
    sf::SplitMix64 rng(seed + 77);
    const Tensor h = Tensor::normal({4, 12}, rng, 3.0);
    Tape tape;
    const Tensor g = sf::sigmoid(f.params().gate.forward(tape, tape.constant(h))).value();
    for (const double v : g.data()) {
      EXPECT_GT(v, 0.0) << "seed " << seed;
      EXPECT_LT(v, 1.0) << "seed " << seed;
    }
  }
}

// ---------------------------------------------------------------- calibrate

TEST(CalibrateProperty, InitStandardizesEveryRow) {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    sf::SplitMix64 rng(seed);
    const sf::CrossViewFusion f = sf::CrossViewFusion::init(kDim, small_fusion(), rng);
    const Tensor h = Tensor::normal({5, 12}, rng, 0.1 + 10.0 * rng.uniform());
    Tape tape;
    const Tensor stats = row_stats(f.calibrate(tape, tape.constant(h)).value());
    for (std::size_t i = 0; i < 5; ++i) {
      EXPECT_LT(std::abs(stats[2 * i]), 1e-7) << "seed " << seed;
      EXPECT_LT(std::abs(stats[2 * i + 1] - 1.0), 1e-6) << "seed " << seed;
    }
  }
}

TEST(Calibrate, ZeroSigmaOutputsMu) {
  sf::CrossViewFusion f = random_fusion(16);
  sf::SplitMix64 rng(17);
  f.params().sigma_learn.fill(0.0);
  for (double& v : f.params().mu_learn.data()) v = rng.normal();
  const Tensor x = Tensor::normal({3, 4, kDim}, rng, 1.0);
  const Tensor y = f.fuse(x);
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = 0; j < 6; ++j) EXPECT_EQ(y[i * 6 + j], f.params().mu_learn[j]);
  }
}

TEST(Calibrate, ScaleInvariantWithoutEpsilons) {
  sf::FusionConfig cfg = small_fusion();
  cfg.eps = 0.0;
  cfg.ln_eps = 0.0;
  sf::CrossViewFusion f = random_fusion(18, cfg);
  f.params().w2.bias.fill(0.0);
  sf::SplitMix64 rng(19);
  const Tensor h = Tensor::normal({4, 12}, rng, 1.0);
  Tape tape;
  const Tensor base = f.calibrate(tape, tape.constant(h)).value();
  for (const double c : {1e-3, 0.5, 3.0, 250.0}) {
    Tensor scaled = h;
    for (double& v : scaled.data()) v *= c;
    EXPECT_LT(sf::max_abs_diff(f.calibrate(tape, tape.constant(scaled)).value(), base), 1e-9) << c;
  }
}

// ---------------------------------------------------------------- fuse

TEST(Fuse, OutputShapeForViewCounts) {
  const sf::CrossViewFusion f = random_fusion(20);
  sf::SplitMix64 rng(21);
  for (const std::size_t v : {1u, 4u, 5u}) {
    EXPECT_EQ(f.fuse(Tensor::normal({3, v, kDim}, rng, 1.0)).shape(), (sf::Shape{3, 6}));
  }
}

TEST(FuseProperty, ViewPermutationInvariant) {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const sf::CrossViewFusion f = random_fusion(seed);
    sf::SplitMix64 rng(seed + 500);
    const std::size_t views = 2 + rng.below(5);
    const Tensor x = Tensor::normal({3, views, kDim}, rng, 1.0);
    const Tensor y = f.fuse(permute_views(x, random_permutation(views, rng)));
    EXPECT_LT(sf::max_abs_diff(f.fuse(x), y), 1e-12) << "seed " << seed;
  }
}

TEST(FuseProperty, DuplicatingEveryViewKeepsOutput) {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const sf::CrossViewFusion f = random_fusion(seed);
    sf::SplitMix64 rng(seed + 900);
    const std::size_t views = 1 + rng.below(5), k = 2 + rng.below(3);
    const Tensor x = Tensor::normal({2, views, kDim}, rng, 1.0);
    std::vector<std::size_t> dup;
    for (std::size_t r = 0; r < k; ++r) {
      for (std::size_t v = 0; v < views; ++v) dup.push_back(v);
    }
    Tensor xd({2, views * k, kDim});
    for (std::size_t b = 0; b < 2; ++b) {
      for (std::size_t j = 0; j < dup.size(); ++j) {
        std::copy_n(x.data().begin() + (b * views + dup[j]) * kDim, kDim,
                    xd.data().begin() + (b * views * k + j) * kDim);
      }
    }
    EXPECT_LT(sf::max_abs_diff(f.fuse(x), f.fuse(xd)), 1e-9) << "seed " << seed;
  }
}

TEST(Fuse, EvalCallsAreBitwiseIdentical) {
  const sf::CrossViewFusion f = random_fusion(22);
  sf::SplitMix64 rng(23);
  const Tensor x = Tensor::normal({4, 5, kDim}, rng, 1.0);
  EXPECT_TRUE(sf::bitwise_equal(f.fuse(x), f.fuse(x)));
}

TEST(Fuse, FullModuleGradientsMatchFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    for (const auto& c : sf::run_gradcheck_suite(sf::testing::tiny_config(5), seed, 0)) {
      if (c.name != "fusion") continue;
      EXPECT_LT(c.report.max_rel_error, 1e-4) << c.report.worst_tensor;
    }
  }
}
