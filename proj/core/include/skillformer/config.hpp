#pragma once

#include <string>
#include <string_view>
#include <vector>

#include "skillformer/data.hpp"
#include "skillformer/model.hpp"
#include "skillformer/training.hpp"

namespace skillformer {

struct RunConfig {
  SkillFormerConfig model;
  TrainConfig train;

  bool operator==(const RunConfig&) const = default;
};

/// Names accepted by `preset`.
[[nodiscard]] const std::vector<std::string>& preset_names();

/// Resolved configuration of a named preset: "Ego", "Exos", "EgoExos" or
/// "desk". Throws ConfigError for any other name.
[[nodiscard]] RunConfig preset(std::string_view name);

/// Parses a run configuration:
///
///   {"preset": "desk",
///    "model": {"views", "frames", "lora_rank", "lora_alpha", "num_classes",
///              "backbone": {...}, "fusion": {...}},
///    "train": {...}}
///
/// Every key is optional; values override the preset (default "desk").
/// Unknown keys, wrong types and syntax errors raise ConfigError with the
/// line and column.
[[nodiscard]] RunConfig parse_run_config(std::string_view text, std::string_view source = "<config>");
[[nodiscard]] RunConfig load_run_config(const std::string& path);
/// Fully resolved configuration in the same schema.
[[nodiscard]] std::string run_config_to_json(const RunConfig& cfg, int indent = 2);

/// Keys: views, frames, raw_size, crop_size, channels, noise, noisy_factor,
/// skew, seed. Defaults from SyntheticSpec.
[[nodiscard]] SyntheticSpec parse_synthetic_spec(std::string_view text, std::string_view source = "<spec>");
[[nodiscard]] SyntheticSpec load_synthetic_spec(const std::string& path);
[[nodiscard]] std::string synthetic_spec_to_json(const SyntheticSpec& spec, int indent = 2);

}  // namespace skillformer
