#pragma once

#include <cstddef>
#include <string>

#include "skillformer/layers.hpp"

namespace skillformer {

struct FusionConfig {
  std::size_t hidden = 128;
  std::size_t out_dim = 64;
  std::size_t heads = 4;
  double dropout = 0.1;
  /// Added to the standard deviation in the self-calibration step.
  double eps = 1e-7;
  double ln_eps = 1e-5;

  /// Throws ConfigError for an unusable combination with view features of
  /// width `in_dim`.
  void validate(std::size_t in_dim) const;

  bool operator==(const FusionConfig&) const = default;
};

/// Learnable state of the cross-view fusion module.
struct FusionParams {
  LayerNormParams view_ln;
  Dense attn_in;   // d -> 3d, packed q | k | v
  Dense attn_out;  // d -> d
  Dense w1;        // d -> hidden
  LayerNormParams w1_norm;
  Dense gate;  // hidden -> hidden
  Dense w2;    // hidden -> out_dim
  LayerNormParams w2_norm;
  Tensor mu_learn;
  Tensor sigma_learn;

  template <typename Self, typename Fn>
  static void visit(Self& self, const std::string& prefix, Fn&& fn) {
    self.view_ln.for_each_parameter(prefix + ".view_ln", fn);
    self.attn_in.for_each_parameter(prefix + ".attn.in_proj", fn);
    self.attn_out.for_each_parameter(prefix + ".attn.out_proj", fn);
    self.w1.for_each_parameter(prefix + ".w1", fn);
    self.w1_norm.for_each_parameter(prefix + ".w1.norm", fn);
    self.gate.for_each_parameter(prefix + ".gate", fn);
    self.w2.for_each_parameter(prefix + ".w2", fn);
    self.w2_norm.for_each_parameter(prefix + ".w2.norm", fn);
    fn(prefix + ".mu_learn", self.mu_learn);
    fn(prefix + ".sigma_learn", self.sigma_learn);
  }
};

/// Fuses per-view features [B, V, d] into one vector per sample [B, out_dim]:
///
///   X_norm  = LayerNorm(X)                      shared across views
///   X_attn  = MultiHeadAttention(X_norm)        over the view axis
///   h       = mean_v X_attn
///   h_hid   = Dropout(LayerNorm(GELU(W1 h)))
///   h_gated = sigmoid(W_gate h_hid) * h_hid
///   h_norm  = LayerNorm(W2 h_gated)
///   h_final = (h_norm - mean) / (std + eps) * sigma_learn + mu_learn
///
/// There are no residual connections. With the module's weights fixed, the
/// output does not depend on the order of the views.
class CrossViewFusion {
 public:
  CrossViewFusion() = default;
  static CrossViewFusion init(std::size_t in_dim, const FusionConfig& cfg, SplitMix64& rng);
  CrossViewFusion(FusionConfig cfg, FusionParams params);

  [[nodiscard]] const FusionConfig& config() const noexcept { return cfg_; }
  [[nodiscard]] std::size_t in_dim() const { return params_.attn_out.out_features(); }
  [[nodiscard]] FusionParams& params() noexcept { return params_; }
  [[nodiscard]] const FusionParams& params() const noexcept { return params_; }

  /// [B, V, d] -> [B, V, d]
  Var view_attend(Tape& tape, Var x) const;
  /// [B, V, d] -> [B, hidden]. Dropout is active only when `training`.
  Var aggregate_transform(Tape& tape, Var x_attn, SplitMix64* rng = nullptr, bool training = false) const;
  /// [B, hidden] -> [B, hidden]
  Var gate(Tape& tape, Var h_hidden) const;
  /// [B, hidden] -> [B, out_dim]
  Var calibrate(Tape& tape, Var h_gated) const;
  /// [B, V, d] -> [B, out_dim]
  Var fuse(Tape& tape, Var x, SplitMix64* rng = nullptr, bool training = false) const;
  /// Eval-mode convenience without a caller-visible tape.
  [[nodiscard]] Tensor fuse(const Tensor& x) const;

  template <typename Fn>
  void for_each_parameter(const std::string& prefix, Fn&& fn) {
    FusionParams::visit(params_, prefix, fn);
  }
  template <typename Fn>
  void for_each_parameter(const std::string& prefix, Fn&& fn) const {
    FusionParams::visit(params_, prefix, fn);
  }

 private:
  FusionConfig cfg_;
  FusionParams params_;
};

}  // namespace skillformer
