#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "skillformer/lora.hpp"

namespace skillformer {

struct BackboneConfig {
  std::size_t image_size = 32;
  std::size_t patch_size = 8;
  std::size_t channels = 1;
  std::size_t embed_dim = 64;
  std::size_t depth = 2;
  std::size_t heads = 4;
  std::size_t mlp_ratio = 4;
  /// Frame count of the learned time-embedding table.
  std::size_t pretrain_frames = 8;
  double ln_eps = 1e-5;

  /// Throws ConfigError on inconsistent geometry.
  void validate() const;
  [[nodiscard]] std::size_t grid() const { return image_size / patch_size; }
  [[nodiscard]] std::size_t num_patches() const { return grid() * grid(); }
  [[nodiscard]] std::size_t patch_dim() const { return channels * patch_size * patch_size; }

  bool operator==(const BackboneConfig&) const = default;
};

/// Resamples a [T0, d] table to [target, d]. Target position t reads source
/// coordinate t (T0 - 1) / (target - 1) (index 0 when target == 1) and
/// interpolates linearly per feature. Returns an exact copy when
/// target == T0.
[[nodiscard]] Tensor interpolate_time_embeddings(const Tensor& table, std::size_t target);

/// Splits clips [M, T, C, H, W] into flattened patches [M, T, N, C p p].
/// Patches are ordered row-major over the grid; each patch flattens as
/// (channel, row, col).
[[nodiscard]] Tensor extract_patches(const Tensor& clips, std::size_t patch_size);

/// One divided space-time block: temporal attention, spatial attention,
/// MLP, each pre-normalized with a residual connection.
struct DividedBlock {
  LayerNormParams temporal_norm;
  AdaptableLinear temporal_qkv;
  AdaptableLinear temporal_proj;
  LayerNormParams spatial_norm;
  AdaptableLinear spatial_qkv;
  AdaptableLinear spatial_proj;
  LayerNormParams mlp_norm;
  AdaptableLinear fc1;
  AdaptableLinear fc2;

  static DividedBlock init(const BackboneConfig& cfg, SplitMix64& rng);

  /// tokens [M, T, L, d] -> [M, T, L, d]. Temporal attention mixes the T
  /// frames at each of the L token positions; spatial attention mixes the L
  /// tokens of each frame.
  Var forward(Tape& tape, Var tokens, std::size_t heads, double eps) const;

  template <typename Self, typename Fn>
  static void visit(Self& self, const std::string& prefix, Fn&& fn) {
    self.temporal_norm.for_each_parameter(prefix + ".temporal_norm1", fn);
    self.temporal_qkv.for_each_parameter(prefix + ".temporal_attn.qkv", fn);
    self.temporal_proj.for_each_parameter(prefix + ".temporal_attn.proj", fn);
    self.spatial_norm.for_each_parameter(prefix + ".norm1", fn);
    self.spatial_qkv.for_each_parameter(prefix + ".attn.qkv", fn);
    self.spatial_proj.for_each_parameter(prefix + ".attn.proj", fn);
    self.mlp_norm.for_each_parameter(prefix + ".norm2", fn);
    self.fc1.for_each_parameter(prefix + ".mlp.fc1", fn);
    self.fc2.for_each_parameter(prefix + ".mlp.fc2", fn);
  }

  /// Every dense slot, in a fixed order.
  [[nodiscard]] std::vector<AdaptableLinear*> dense_layers();
};

/// Shared video encoder. The per-frame token layout is [CLS, patch_0, ...,
/// patch_{N-1}]. The clip feature is the final-normalized CLS token averaged
/// over frames.
class Backbone {
 public:
  Backbone() = default;
  static Backbone init(const BackboneConfig& cfg, SplitMix64& rng);

  [[nodiscard]] const BackboneConfig& config() const noexcept { return cfg_; }

  /// clips [M, T, C, H, W] -> patch tokens [M, T, N, d] with spatial position
  /// embeddings added.
  Var patch_embed(Tape& tape, const Tensor& clips) const;
  /// clips [M, T, C, H, W] -> features [M, d].
  Var encode(Tape& tape, const Tensor& clips) const;
  /// Single clip [T, C, H, W] -> feature [d].
  [[nodiscard]] Tensor encode_video(const Tensor& clip) const;

  /// Wraps every dense layer of every block with a rank-r adapter.
  void apply_lora(std::size_t rank, double alpha, SplitMix64& rng);
  /// Folds every adapter into its base layer.
  void merge_lora();
  [[nodiscard]] bool adapted() const;

  [[nodiscard]] std::vector<DividedBlock>& blocks() noexcept { return blocks_; }
  [[nodiscard]] const std::vector<DividedBlock>& blocks() const noexcept { return blocks_; }
  Tensor& cls_token() noexcept { return cls_token_; }
  Tensor& pos_embed() noexcept { return pos_embed_; }
  Tensor& time_embed() noexcept { return time_embed_; }
  Dense& patch_projection() noexcept { return patch_proj_; }
  LayerNormParams& final_norm() noexcept { return norm_; }

  template <typename Fn>
  void for_each_parameter(const std::string& prefix, Fn&& fn) {
    visit(*this, prefix, fn);
  }
  template <typename Fn>
  void for_each_parameter(const std::string& prefix, Fn&& fn) const {
    visit(*this, prefix, fn);
  }

 private:
  template <typename Self, typename Fn>
  static void visit(Self& self, const std::string& prefix, Fn&& fn) {
    self.patch_proj_.for_each_parameter(prefix + ".patch_embed", fn);
    fn(prefix + ".cls_token", self.cls_token_);
    fn(prefix + ".pos_embed", self.pos_embed_);
    fn(prefix + ".time_embed", self.time_embed_);
    for (std::size_t l = 0; l < self.blocks_.size(); ++l) {
      DividedBlock::visit(self.blocks_[l], prefix + ".blocks." + std::to_string(l), fn);
    }
    self.norm_.for_each_parameter(prefix + ".norm", fn);
  }

  BackboneConfig cfg_;
  Dense patch_proj_;
  Tensor cls_token_;
  Tensor pos_embed_;
  Tensor time_embed_;
  std::vector<DividedBlock> blocks_;
  LayerNormParams norm_;
};

}  // namespace skillformer
