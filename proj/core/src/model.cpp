#include "skillformer/model.hpp"

#include "skillformer/error.hpp"

namespace skillformer {

namespace {

enum Stream : std::uint64_t { kBackboneStream = 0, kLoraStream = 1, kFusionStream = 2, kHeadStream = 3 };

}  // namespace

void SkillFormerConfig::validate() const {
  backbone.validate();
  fusion.validate(backbone.embed_dim);
  if (views == 0) throw ConfigError("views must be positive");
  if (frames == 0) throw ConfigError("frames must be positive");
  if (num_classes != kNumClasses) {
    throw ConfigError("num_classes must be " + std::to_string(kNumClasses) + ", got " + std::to_string(num_classes));
  }
  if (!(lora_alpha > 0.0)) throw ConfigError("lora alpha must be positive");
  const std::size_t d = backbone.embed_dim;
  const std::size_t bound = d;  // smallest dense layer in a block is d -> d
  if (lora_rank < 1 || lora_rank > bound) {
    throw ConfigError("LoRA rank " + std::to_string(lora_rank) + " outside [1, " + std::to_string(bound) + "]");
  }
}

SkillFormer SkillFormer::init(const SkillFormerConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  SplitMix64 backbone_rng = SplitMix64::stream(seed, kBackboneStream);
  SplitMix64 lora_rng = SplitMix64::stream(seed, kLoraStream);
  SplitMix64 fusion_rng = SplitMix64::stream(seed, kFusionStream);
  SplitMix64 head_rng = SplitMix64::stream(seed, kHeadStream);

  Backbone backbone = Backbone::init(cfg.backbone, backbone_rng);
  backbone.apply_lora(cfg.lora_rank, cfg.lora_alpha, lora_rng);
  CrossViewFusion fusion = CrossViewFusion::init(cfg.backbone.embed_dim, cfg.fusion, fusion_rng);
  Dense head = Dense::normal(cfg.fusion.out_dim, cfg.num_classes, kHeadInitStd, head_rng);
  return SkillFormer(cfg, std::move(backbone), std::move(fusion), std::move(head));
}

SkillFormer::SkillFormer(SkillFormerConfig cfg, Backbone backbone, CrossViewFusion fusion, Dense head)
    : cfg_(std::move(cfg)), backbone_(std::move(backbone)), fusion_(std::move(fusion)), head_(std::move(head)) {
  cfg_.validate();
  if (!(backbone_.config() == cfg_.backbone)) throw ConfigError("backbone does not match the model config");
  if (!(fusion_.config() == cfg_.fusion) || fusion_.in_dim() != cfg_.backbone.embed_dim) {
    throw ConfigError("fusion does not match the model config");
  }
  if (head_.in_features() != cfg_.fusion.out_dim || head_.out_features() != cfg_.num_classes ||
      head_.bias.numel() != cfg_.num_classes) {
    throw DimensionError("head must map " + std::to_string(cfg_.fusion.out_dim) + " -> " +
                         std::to_string(cfg_.num_classes));
  }
  head_.set_trainable(true);
}

Var SkillFormer::forward(Tape& tape, const Tensor& batch, SplitMix64* rng, bool training) const {
  if (batch.rank() != 6) {
    throw DimensionError("batch must be [B, V, T, C, H, W], got " + shape_to_string(batch.shape()));
  }
  const std::size_t b = batch.dim(0), v = batch.dim(1);
  if (v != cfg_.views) {
    throw ContractError("batch has " + std::to_string(v) + " views, model expects " + std::to_string(cfg_.views));
  }
  const Shape& s = batch.shape();
  const Tensor clips = batch.reshaped({b * v, s[2], s[3], s[4], s[5]});
  Var features;
  {
    Tape::Scope scope(tape, "backbone");
    features = backbone_.encode(tape, clips);
  }
  features = reshape(features, {b, v, cfg_.backbone.embed_dim});
  const Var fused = fusion_.fuse(tape, features, rng, training);
  Tape::Scope scope(tape, "head");
  return head_.forward(tape, fused);
}

Tensor SkillFormer::logits(const Tensor& batch) const {
  Tape tape;
  return forward(tape, batch).value();
}

void SkillFormer::merge_lora() { backbone_.merge_lora(); }

ParamCounts SkillFormer::count_params() const {
  ParamCounts counts;
  for_each_parameter([&](const std::string&, const Tensor& t) {
    (t.requires_grad() ? counts.trainable : counts.frozen) += t.numel();
  });
  counts.total = counts.trainable + counts.frozen;
  return counts;
}

std::vector<SkillFormer::NamedTensor> SkillFormer::trainable_parameters() {
  std::vector<NamedTensor> out;
  for_each_parameter([&](const std::string& name, Tensor& t) {
    if (t.requires_grad()) out.push_back({name, &t});
  });
  return out;
}

std::vector<int> predict(const Tensor& logits) {
  if (logits.rank() != 2) throw DimensionError("logits must be [B, C], got " + shape_to_string(logits.shape()));
  const std::size_t rows = logits.dim(0), cols = logits.dim(1);
  std::vector<int> labels(rows);
  for (std::size_t i = 0; i < rows; ++i) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < cols; ++c) {
      if (logits[i * cols + c] > logits[i * cols + best]) best = c;
    }
    labels[i] = static_cast<int>(best);
  }
  return labels;
}

}  // namespace skillformer
