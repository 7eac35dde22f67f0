#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "skillformer/checkpoint.hpp"
#include "skillformer/config.hpp"
#include "skillformer/diagnostics.hpp"
#include "skillformer/error.hpp"
#include "test_util.hpp"

namespace sf = skillformer;
using sf::Tensor;

namespace {

std::string error_of(const std::string& text) {
  try {
    (void)sf::parse_run_config(text, "cfg.json");
  } catch (const sf::ConfigError& e) {
    return e.what();
  }
  return {};
}

sf::SkillFormer trained_like_model(const sf::SkillFormerConfig& cfg, std::uint64_t seed) {
  sf::SkillFormer model = sf::SkillFormer::init(cfg, seed);
  sf::testing::perturb_adapters(model, seed + 1);
  return model;
}

std::string data_error_of(std::vector<std::uint8_t> bytes) {
  try {
    (void)sf::deserialize(std::move(bytes), "ckpt");
  } catch (const sf::DataError& e) {
    return e.what();
  }
  return {};
}

}  // namespace

// ---------------------------------------------------------------- presets

TEST(Presets, ScalingTuplesAreExact) {
  struct Row {
    const char* name;
    std::size_t views, frames, rank;
    double alpha;
    std::size_t hidden;
    double lr;
  };
  for (const Row& row : {Row{"Ego", 1, 32, 32, 64.0, 1536, 5e-5}, Row{"Exos", 4, 24, 48, 96.0, 2048, 3e-5},
                         Row{"EgoExos", 5, 16, 64, 128.0, 2560, 2e-5}}) {
    const sf::RunConfig cfg = sf::preset(row.name);
    EXPECT_EQ(cfg.model.preset, row.name);
    EXPECT_EQ(cfg.model.views, row.views) << row.name;
    EXPECT_EQ(cfg.model.frames, row.frames) << row.name;
    EXPECT_EQ(cfg.model.lora_rank, row.rank) << row.name;
    EXPECT_EQ(cfg.model.lora_alpha, row.alpha) << row.name;
    EXPECT_EQ(cfg.model.fusion.hidden, row.hidden) << row.name;
    EXPECT_EQ(cfg.model.fusion.out_dim, 768u) << row.name;
    EXPECT_EQ(cfg.model.fusion.heads, 16u) << row.name;
    EXPECT_EQ(cfg.train.lr, row.lr) << row.name;
    EXPECT_EQ(cfg.train.weight_decay, 0.01) << row.name;
    EXPECT_NO_THROW(cfg.model.validate());
  }
}

TEST(Presets, NamesAndUnknown) {
  EXPECT_EQ(sf::preset_names(), (std::vector<std::string>{"Ego", "Exos", "EgoExos", "desk"}));
  EXPECT_THROW((void)sf::preset("ego"), sf::ConfigError);
  EXPECT_THROW((void)sf::parse_run_config(R"({"preset": "Big"})"), sf::ConfigError);
}

TEST(Presets, TrainableCountsIncreaseAcrossScalingPresets) {
  const std::size_t ego = sf::SkillFormer::init(sf::preset("Ego").model, 0).count_params().trainable;
  const std::size_t exos = sf::SkillFormer::init(sf::preset("Exos").model, 0).count_params().trainable;
  const std::size_t both = sf::SkillFormer::init(sf::preset("EgoExos").model, 0).count_params().trainable;
  EXPECT_LT(ego, exos);
  EXPECT_LT(exos, both);
}

// ---------------------------------------------------------------- config files

TEST(ConfigFile, EmptyObjectIsDesk) {
  EXPECT_EQ(sf::parse_run_config("{}"), sf::preset("desk"));
}

TEST(ConfigFile, OverridesApplyOnTopOfPreset) {
  const sf::RunConfig cfg = sf::parse_run_config(
      R"({"preset": "Exos", "model": {"frames": 8, "fusion": {"dropout": 0.0}}, "train": {"epochs": 3, "seed": 9}})");
  EXPECT_EQ(cfg.model.preset, "Exos");
  EXPECT_EQ(cfg.model.frames, 8u);
  EXPECT_EQ(cfg.model.lora_rank, 48u);
  EXPECT_EQ(cfg.model.fusion.dropout, 0.0);
  EXPECT_EQ(cfg.train.epochs, 3u);
  EXPECT_EQ(cfg.train.seed, 9u);
  EXPECT_EQ(cfg.train.lr, 3e-5);
}

TEST(ConfigFile, JsonRoundTrip) {
  for (const auto& name : sf::preset_names()) {
    sf::RunConfig cfg = sf::preset(name);
    cfg.train.seed = 123;
    cfg.model.backbone.ln_eps = 1e-6;
    EXPECT_EQ(sf::parse_run_config(sf::run_config_to_json(cfg)), cfg) << name;
  }
}

TEST(ConfigFile, SyntaxErrorsCarryLineAndColumn) {
  const std::string msg = error_of("{\n  \"preset\": \"desk\",\n  \"train\": {\"epochs\": }\n}");
  EXPECT_NE(msg.find("cfg.json"), std::string::npos) << msg;
  EXPECT_NE(msg.find("line 3"), std::string::npos) << msg;
  EXPECT_NE(msg.find("column"), std::string::npos) << msg;
}

TEST(ConfigFile, UnknownKeysAreErrors) {
  EXPECT_NE(error_of(R"({"modle": {}})").find("modle"), std::string::npos);
  EXPECT_NE(error_of(R"({"model": {"backbone": {"depht": 3}}})").find("depht"), std::string::npos);
  EXPECT_NE(error_of(R"({"train": {"learning_rate": 0.1}})").find("learning_rate"), std::string::npos);
}

TEST(ConfigFile, WrongTypesAndInvalidValues) {
  EXPECT_FALSE(error_of(R"({"model": {"views": "five"}})").empty());
  EXPECT_FALSE(error_of(R"({"model": {"views": -1}})").empty());
  EXPECT_FALSE(error_of(R"({"train": {"lr": -0.1}})").empty());
  EXPECT_FALSE(error_of(R"({"model": {"lora_rank": 0}})").empty());
  EXPECT_FALSE(error_of(R"({"model": {"backbone": {"patch_size": 5}}})").empty());
  EXPECT_FALSE(error_of(R"([1, 2])").empty());
}

TEST(ConfigFile, MissingFileIsConfigError) {
  EXPECT_THROW((void)sf::load_run_config("/nonexistent/run.json"), sf::ConfigError);
}

// ---------------------------------------------------------------- checkpoints

TEST(Checkpoint, SerializeRoundTripIsByteIdentical) {
  const sf::SkillFormer model = trained_like_model(sf::testing::tiny_config(), 3);
  const sf::Checkpoint ckpt = sf::make_checkpoint(model, sf::TrainConfig{});
  const std::vector<std::uint8_t> bytes = sf::serialize(ckpt);
  const sf::Checkpoint back = sf::deserialize(bytes);
  EXPECT_EQ(back, ckpt);
  EXPECT_EQ(sf::serialize(back), bytes);
  EXPECT_EQ(bytes[0], 'S');
  EXPECT_EQ(bytes[3], 'M');
  EXPECT_EQ(bytes[4], 1u);
}

TEST(Checkpoint, FileRoundTrip) {
  const auto path = std::filesystem::temp_directory_path() / "skillformer_test_ckpt.skfm";
  const sf::Checkpoint ckpt = sf::make_checkpoint(trained_like_model(sf::testing::tiny_config(), 4), sf::TrainConfig{});
  sf::save_checkpoint(path.string(), ckpt);
  EXPECT_EQ(sf::load_checkpoint(path.string()), ckpt);
  std::filesystem::remove(path);
  EXPECT_THROW((void)sf::load_checkpoint(path.string()), sf::DataError);
}

TEST(Checkpoint, MalformedArchivesAreDataErrors) {
  const std::vector<std::uint8_t> good =
      sf::serialize(sf::make_checkpoint(sf::SkillFormer::init(sf::testing::tiny_config(), 0), sf::TrainConfig{}));
  auto bad_magic = good;
  bad_magic[0] = 'X';
  EXPECT_NE(data_error_of(bad_magic).find("offset 0"), std::string::npos) << data_error_of(bad_magic);
  auto bad_version = good;
  bad_version[4] = 2;
  const std::string version_msg = data_error_of(bad_version);
  EXPECT_NE(version_msg.find("version"), std::string::npos) << version_msg;
  EXPECT_NE(version_msg.find("offset 4"), std::string::npos) << version_msg;
  auto truncated = good;
  truncated.resize(good.size() - 3);
  EXPECT_FALSE(data_error_of(truncated).empty());
  auto trailing = good;
  trailing.push_back(0);
  EXPECT_FALSE(data_error_of(trailing).empty());
  EXPECT_FALSE(data_error_of({}).empty());
}

TEST(Checkpoint, RestoreRebuildsEquivalentModel) {
  const sf::SkillFormerConfig cfg = sf::testing::tiny_config();
  sf::TrainConfig train;
  train.seed = 17;
  const sf::SkillFormer model = trained_like_model(cfg, 5);
  const sf::Checkpoint ckpt = sf::make_checkpoint(model, train);
  const sf::RestoredRun run = sf::restore(ckpt);
  EXPECT_EQ(run.config.model, cfg);
  EXPECT_EQ(run.config.train, train);
  EXPECT_FALSE(run.model.merged());
  // Restoring a restored model loses nothing more.
  EXPECT_EQ(sf::make_checkpoint(run.model, run.config.train), ckpt);
  const Tensor batch = sf::testing::random_batch(cfg, 2, 6);
  EXPECT_LT(sf::max_abs_diff(run.model.logits(batch), model.logits(batch)), 1e-4);
}

TEST(Checkpoint, MergedCheckpointRestoresWithoutAdapters) {
  const sf::SkillFormerConfig cfg = sf::testing::tiny_config();
  sf::SkillFormer model = trained_like_model(cfg, 6);
  const sf::RestoredRun adapted = sf::restore(sf::make_checkpoint(model, sf::TrainConfig{}));
  sf::SkillFormer merged_copy = adapted.model;
  merged_copy.merge_lora();
  const sf::Checkpoint merged_ckpt = sf::make_checkpoint(merged_copy, sf::TrainConfig{});
  EXPECT_NE(merged_ckpt.config_json.find("\"lora_merged\": true"), std::string::npos);
  const sf::RestoredRun merged = sf::restore(merged_ckpt);
  EXPECT_TRUE(merged.model.merged());
  const Tensor batch = sf::testing::random_batch(cfg, 3, 7);
  EXPECT_LT(sf::max_abs_diff(merged.model.logits(batch), adapted.model.logits(batch)), 1e-5);
}

TEST(Checkpoint, RestoreRejectsMissingOrExtraTensors) {
  const sf::Checkpoint good = sf::make_checkpoint(sf::SkillFormer::init(sf::testing::tiny_config(), 0), sf::TrainConfig{});
  sf::Checkpoint missing = good;
  missing.tensors.pop_back();
  EXPECT_THROW((void)sf::restore(missing), sf::DataError);
  sf::Checkpoint extra = good;
  extra.tensors.emplace_back("head.extra", Tensor({1}, 0.0));
  EXPECT_THROW((void)sf::restore(extra), sf::DataError);
  sf::Checkpoint reshaped = good;
  reshaped.tensors.back().second = Tensor({reshaped.tensors.back().second.numel() + 1}, 0.0);
  EXPECT_THROW((void)sf::restore(reshaped), sf::DataError);
}

// ---------------------------------------------------------------- gradcheck

TEST(GradcheckSuite, DeskConfigWithinTolerance) {
  const sf::SkillFormerConfig cfg = sf::preset("desk").model;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    const auto cases = sf::run_gradcheck_suite(cfg, seed);
    std::vector<std::string> names;
    for (const auto& c : cases) {
      names.push_back(c.name);
      EXPECT_LT(c.report.max_rel_error, sf::kGradcheckTolerance) << c.name << " seed " << seed;
      EXPECT_GT(c.report.entries_checked, 0u) << c.name;
    }
    EXPECT_EQ(names, (std::vector<std::string>{"linear", "attention_1head", "attention_3head", "divided_block", "lora",
                                               "fusion", "cross_entropy"}));
  }
}
