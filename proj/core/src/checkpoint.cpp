#include "skillformer/checkpoint.hpp"

#include <limits>
#include <map>

#include <nlohmann/json.hpp>

#include "binary_io.hpp"
#include "skillformer/error.hpp"

namespace skillformer {

namespace {

constexpr char kMagic[4] = {'S', 'K', 'F', 'M'};
constexpr std::uint8_t kDtypeF32 = 0;

}  // namespace

bool Checkpoint::operator==(const Checkpoint& other) const {
  if (config_json != other.config_json || tensors.size() != other.tensors.size()) return false;
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    if (tensors[i].first != other.tensors[i].first || !bitwise_equal(tensors[i].second, other.tensors[i].second)) {
      return false;
    }
  }
  return true;
}

std::vector<std::uint8_t> serialize(const Checkpoint& ckpt) {
  io::Writer w;
  w.bytes(kMagic, 4);
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(ckpt.config_json.size()));
  w.text(ckpt.config_json);
  w.u32(static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& [name, t] : ckpt.tensors) {
    if (name.size() > std::numeric_limits<std::uint16_t>::max()) throw ContractError("tensor name too long: " + name);
    if (t.rank() > std::numeric_limits<std::uint8_t>::max()) throw ContractError("tensor rank too large: " + name);
    w.u16(static_cast<std::uint16_t>(name.size()));
    w.text(name);
    w.u8(kDtypeF32);
    w.u8(static_cast<std::uint8_t>(t.rank()));
    for (const std::size_t d : t.shape()) w.u32(static_cast<std::uint32_t>(d));
    for (const double v : t.data()) w.f32(static_cast<float>(v));
  }
  return w.buffer();
}

Checkpoint deserialize(std::vector<std::uint8_t> bytes, const std::string& source) {
  io::Reader r(std::move(bytes), source);
  char magic[4];
  r.bytes(magic, 4, "magic");
  if (std::memcmp(magic, kMagic, 4) != 0) r.fail_at(0, "not a checkpoint (bad magic)");
  const std::size_t version_at = r.offset();
  const std::uint32_t version = r.u32("version");
  if (version != kCheckpointVersion) {
    r.fail_at(version_at, "unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint ckpt;
  const std::uint32_t config_len = r.u32("config length");
  ckpt.config_json = r.text(config_len, "config");
  const std::uint32_t count = r.u32("tensor count");
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint16_t name_len = r.u16("name length");
    std::string name = r.text(name_len, "tensor name");
    const std::size_t dtype_at = r.offset();
    const std::uint8_t dtype = r.u8("dtype");
    if (dtype != kDtypeF32) r.fail_at(dtype_at, "unknown dtype code " + std::to_string(dtype) + " for " + name);
    const std::uint8_t rank = r.u8("rank");
    Shape shape(rank);
    for (auto& d : shape) {
      d = r.u32("dimension");
      if (d == 0) r.fail("zero extent in " + name);
    }
    const std::size_t n = shape_numel(shape);
    if (r.remaining() / 4 < n) r.fail("truncated payload of " + name);
    std::vector<double> values(n);
    for (double& v : values) v = static_cast<double>(r.f32("payload"));
    ckpt.tensors.emplace_back(std::move(name), Tensor(std::move(shape), std::move(values)));
  }
  if (r.remaining() != 0) r.fail("trailing bytes after the last tensor");
  return ckpt;
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  io::Writer w;
  const std::vector<std::uint8_t> bytes = serialize(ckpt);
  w.bytes(bytes.data(), bytes.size());
  w.save(path);
}

Checkpoint load_checkpoint(const std::string& path) {
  io::Reader r = io::Reader::load(path);
  std::vector<std::uint8_t> bytes(r.remaining());
  r.bytes(bytes.data(), bytes.size(), "file");
  return deserialize(std::move(bytes), path);
}

Checkpoint make_checkpoint(const SkillFormer& model, const TrainConfig& train) {
  nlohmann::ordered_json header = nlohmann::ordered_json::parse(run_config_to_json({model.config(), train}, -1));
  header["lora_merged"] = model.merged();
  Checkpoint ckpt;
  ckpt.config_json = header.dump(2);
  model.for_each_parameter([&](const std::string& name, const Tensor& t) {
    std::vector<double> values(t.numel());
    for (std::size_t i = 0; i < values.size(); ++i) values[i] = static_cast<double>(static_cast<float>(t[i]));
    ckpt.tensors.emplace_back(name, Tensor(t.shape(), std::move(values)));
  });
  return ckpt;
}

RestoredRun restore(const Checkpoint& ckpt) {
  nlohmann::ordered_json header;
  try {
    header = nlohmann::ordered_json::parse(ckpt.config_json);
  } catch (const nlohmann::json::parse_error& e) {
    throw DataError(std::string("checkpoint config is not valid JSON: ") + e.what());
  }
  if (!header.is_object() || !header.contains("lora_merged") || !header["lora_merged"].is_boolean()) {
    throw DataError("checkpoint config lacks a boolean 'lora_merged'");
  }
  const bool merged = header["lora_merged"].get<bool>();
  header.erase("lora_merged");
  RunConfig cfg = parse_run_config(header.dump(), "checkpoint config");

  SkillFormer model = SkillFormer::init(cfg.model, 0);
  if (merged) model.merge_lora();

  std::map<std::string, const Tensor*> stored;
  for (const auto& [name, t] : ckpt.tensors) {
    if (!stored.emplace(name, &t).second) throw DataError("checkpoint repeats tensor '" + name + "'");
  }
  std::size_t used = 0;
  model.for_each_parameter([&](const std::string& name, Tensor& t) {
    const auto it = stored.find(name);
    if (it == stored.end()) throw DataError("checkpoint is missing tensor '" + name + "'");
    if (it->second->shape() != t.shape()) {
      throw DataError("checkpoint tensor '" + name + "' has shape " + shape_to_string(it->second->shape()) +
                      ", expected " + shape_to_string(t.shape()));
    }
    std::copy(it->second->data().begin(), it->second->data().end(), t.data().begin());
    ++used;
  });
  if (used != stored.size()) throw DataError("checkpoint holds tensors the model does not have");
  return {std::move(cfg), std::move(model)};
}

}  // namespace skillformer
