#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "skillformer/config.hpp"
#include "skillformer/model.hpp"

namespace skillformer {

/// Portable model archive.
///
///   "SKFM" | u32 version | u32 config length | config JSON (UTF-8)
///   | u32 tensor count | per tensor: u16 name length, name, u8 dtype (0 =
///   binary32), u8 rank, u32 dims[rank], payload
///
/// All integers and floats are little-endian; payloads are row-major. The
/// config JSON holds the run configuration plus "lora_merged".
struct Checkpoint {
  std::string config_json;
  std::vector<std::pair<std::string, Tensor>> tensors;

  bool operator==(const Checkpoint& other) const;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

[[nodiscard]] std::vector<std::uint8_t> serialize(const Checkpoint& ckpt);
/// Throws DataError for a bad magic, an unknown version, unknown dtypes or
/// truncated data.
[[nodiscard]] Checkpoint deserialize(std::vector<std::uint8_t> bytes, const std::string& source = "<memory>");

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
[[nodiscard]] Checkpoint load_checkpoint(const std::string& path);

/// Snapshot of a model; tensors are rounded to binary32.
[[nodiscard]] Checkpoint make_checkpoint(const SkillFormer& model, const TrainConfig& train);

struct RestoredRun {
  RunConfig config;
  SkillFormer model;
};

/// Rebuilds the model. Every expected tensor must be present with the right
/// shape and nothing else may be; mismatches are DataErrors.
[[nodiscard]] RestoredRun restore(const Checkpoint& ckpt);

}  // namespace skillformer
