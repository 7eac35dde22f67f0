#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "skillformer/backbone.hpp"
#include "skillformer/fusion.hpp"

namespace skillformer {

inline constexpr std::size_t kNumClasses = 4;

struct SkillFormerConfig {
  std::string preset = "desk";
  BackboneConfig backbone;
  std::size_t views = 5;
  std::size_t frames = 4;
  std::size_t lora_rank = 8;
  double lora_alpha = 16.0;
  FusionConfig fusion;
  std::size_t num_classes = kNumClasses;

  void validate() const;
  bool operator==(const SkillFormerConfig&) const = default;
};

struct ParamCounts {
  std::size_t trainable = 0;
  std::size_t frozen = 0;
  std::size_t total = 0;
};

/// Multi-view classifier: every clip of every view runs through one shared
/// backbone, the per-view features are fused, and an affine head produces
/// class logits.
class SkillFormer {
 public:
  static constexpr double kHeadInitStd = 0.01;

  SkillFormer() = default;
  /// Random init: frozen backbone, LoRA adapters on every block dense layer,
  /// fusion and head trainable.
  static SkillFormer init(const SkillFormerConfig& cfg, std::uint64_t seed);
  /// Assembles a model from restored parts.
  SkillFormer(SkillFormerConfig cfg, Backbone backbone, CrossViewFusion fusion, Dense head);

  [[nodiscard]] const SkillFormerConfig& config() const noexcept { return cfg_; }

  /// batch [B, V, T, C, H, W] -> logits [B, num_classes]. Throws
  /// ContractError when V differs from the configured view count.
  Var forward(Tape& tape, const Tensor& batch, SplitMix64* rng = nullptr, bool training = false) const;
  /// Eval-mode logits.
  [[nodiscard]] Tensor logits(const Tensor& batch) const;

  /// Folds every adapter into its base weights.
  void merge_lora();
  [[nodiscard]] bool merged() const { return !backbone_.adapted(); }

  [[nodiscard]] ParamCounts count_params() const;

  [[nodiscard]] Backbone& backbone() noexcept { return backbone_; }
  [[nodiscard]] const Backbone& backbone() const noexcept { return backbone_; }
  [[nodiscard]] CrossViewFusion& fusion() noexcept { return fusion_; }
  [[nodiscard]] const CrossViewFusion& fusion() const noexcept { return fusion_; }
  [[nodiscard]] Dense& head() noexcept { return head_; }
  [[nodiscard]] const Dense& head() const noexcept { return head_; }

  /// Visits every tensor as (name, tensor) in a fixed order.
  template <typename Fn>
  void for_each_parameter(Fn&& fn) {
    backbone_.for_each_parameter("backbone", fn);
    fusion_.for_each_parameter("fusion", fn);
    head_.for_each_parameter("head", fn);
  }
  template <typename Fn>
  void for_each_parameter(Fn&& fn) const {
    backbone_.for_each_parameter("backbone", fn);
    fusion_.for_each_parameter("fusion", fn);
    head_.for_each_parameter("head", fn);
  }

  struct NamedTensor {
    std::string name;
    Tensor* tensor;
  };
  /// Tensors with requires_grad set, in visiting order.
  [[nodiscard]] std::vector<NamedTensor> trainable_parameters();

 private:
  SkillFormerConfig cfg_;
  Backbone backbone_;
  CrossViewFusion fusion_;
  Dense head_;
};

/// Row-wise argmax; ties go to the lowest class index.
[[nodiscard]] std::vector<int> predict(const Tensor& logits);

}  // namespace skillformer
