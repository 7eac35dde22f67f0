#pragma once

#include <cstddef>
#include <string>

#include "skillformer/autograd.hpp"

namespace skillformer {

/// Affine map y = x W^T + b with W [out, in] and b [out].
struct Dense {
  Tensor weight;
  Tensor bias;
  /// Packed q | k | v projection: the key third of `bias` is held at zero.
  bool packed_qkv = false;

  static Dense zeros(std::size_t in_features, std::size_t out_features);
  /// Weights N(0, stddev^2), zero bias.
  static Dense normal(std::size_t in_features, std::size_t out_features, double stddev, SplitMix64& rng);
  /// Glorot-uniform weights, zero bias.
  static Dense xavier(std::size_t in_features, std::size_t out_features, SplitMix64& rng);
  /// Returns `layer` marked as a packed q | k | v projection.
  static Dense packed(Dense layer);

  [[nodiscard]] std::size_t in_features() const { return weight.dim(1); }
  [[nodiscard]] std::size_t out_features() const { return weight.dim(0); }

  Var forward(Tape& tape, Var x) const;
  void set_trainable(bool trainable);

  template <typename Fn>
  void for_each_parameter(const std::string& prefix, Fn&& fn) {
    fn(prefix + ".weight", weight);
    fn(prefix + ".bias", bias);
  }
  template <typename Fn>
  void for_each_parameter(const std::string& prefix, Fn&& fn) const {
    fn(prefix + ".weight", weight);
    fn(prefix + ".bias", bias);
  }
};

/// LayerNorm affine parameters over a last axis of size d.
struct LayerNormParams {
  Tensor weight;
  Tensor bias;

  /// gamma = 1, beta = 0.
  static LayerNormParams identity(std::size_t features);

  Var forward(Tape& tape, Var x, double eps) const;
  void set_trainable(bool trainable);

  template <typename Fn>
  void for_each_parameter(const std::string& prefix, Fn&& fn) {
    fn(prefix + ".weight", weight);
    fn(prefix + ".bias", bias);
  }
  template <typename Fn>
  void for_each_parameter(const std::string& prefix, Fn&& fn) const {
    fn(prefix + ".weight", weight);
    fn(prefix + ".bias", bias);
  }
};

/// Scaled dot-product attention over packed projections.
///
/// `qkv` is [G, L, 3d] holding q | k | v along the last axis, as produced by
/// a packed Dense. Each of the G groups attends independently over its L
/// positions with `heads` heads of size d / heads. Returns the merged-head
/// context [G, L, d], before any output projection.
Var attention_context(Var qkv, std::size_t heads);

}  // namespace skillformer
