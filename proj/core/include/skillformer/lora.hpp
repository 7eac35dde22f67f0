#pragma once

#include <cstddef>
#include <string>
#include <variant>

#include "skillformer/layers.hpp"

namespace skillformer {

/// Dense layer with frozen base weights and a trainable rank-r correction:
///
///   y = x W^T + b + (alpha / r) (x A^T) B^T,   A [r, in], B [out, r]
///
/// Freshly wrapped layers have A ~ N(0, 0.02^2) and B = 0, so they compute
/// exactly the base layer until B moves.
class LoraLinear {
 public:
  static constexpr double kInitStd = 0.02;

  /// Throws ConfigError unless 1 <= rank <= min(in, out).
  static LoraLinear wrap(Dense base, std::size_t rank, double alpha, SplitMix64& rng);

  /// Rebuilds a layer from stored factors (checkpoint restore).
  LoraLinear(Dense base, Tensor lora_a, Tensor lora_b, double alpha);

  Var forward(Tape& tape, Var x) const;

  /// Folds the adapter into the base: W' = W + (alpha / r) B A.
  [[nodiscard]] Dense merge() const;

  [[nodiscard]] const Dense& base() const noexcept { return base_; }
  [[nodiscard]] Tensor& lora_a() noexcept { return a_; }
  [[nodiscard]] Tensor& lora_b() noexcept { return b_; }
  [[nodiscard]] const Tensor& lora_a() const noexcept { return a_; }
  [[nodiscard]] const Tensor& lora_b() const noexcept { return b_; }
  [[nodiscard]] std::size_t rank() const noexcept { return a_.dim(0); }
  [[nodiscard]] double alpha() const noexcept { return alpha_; }
  [[nodiscard]] double scale() const noexcept { return alpha_ / static_cast<double>(rank()); }

  /// Base tensors as `<prefix>.weight` / `.bias`, factors as
  /// `<prefix>.lora_A` / `.lora_B`.
  template <typename Fn>
  void for_each_parameter(const std::string& prefix, Fn&& fn) {
    base_.for_each_parameter(prefix, fn);
    fn(prefix + ".lora_A", a_);
    fn(prefix + ".lora_B", b_);
  }
  template <typename Fn>
  void for_each_parameter(const std::string& prefix, Fn&& fn) const {
    base_.for_each_parameter(prefix, fn);
    fn(prefix + ".lora_A", a_);
    fn(prefix + ".lora_B", b_);
  }

 private:
  Dense base_;
  Tensor a_;
  Tensor b_;
  double alpha_;
};

/// A dense slot in the backbone that may or may not carry an adapter.
class AdaptableLinear {
 public:
  AdaptableLinear() = default;
  explicit AdaptableLinear(Dense dense) : impl_(std::move(dense)) {}
  explicit AdaptableLinear(LoraLinear layer) : impl_(std::move(layer)) {}

  Var forward(Tape& tape, Var x) const;

  /// Replaces the dense layer by a LoRA-wrapped one (frozen base).
  void wrap(std::size_t rank, double alpha, SplitMix64& rng);
  /// Folds any adapter into the base weights.
  void merge();

  [[nodiscard]] bool adapted() const noexcept { return std::holds_alternative<LoraLinear>(impl_); }
  [[nodiscard]] const Dense& base() const;
  [[nodiscard]] Dense& dense();
  [[nodiscard]] LoraLinear& adapter();
  [[nodiscard]] const LoraLinear& adapter() const;

  template <typename Fn>
  void for_each_parameter(const std::string& prefix, Fn&& fn) {
    std::visit([&](auto& layer) { layer.for_each_parameter(prefix, fn); }, impl_);
  }
  template <typename Fn>
  void for_each_parameter(const std::string& prefix, Fn&& fn) const {
    std::visit([&](const auto& layer) { layer.for_each_parameter(prefix, fn); }, impl_);
  }

 private:
  std::variant<Dense, LoraLinear> impl_;
};

}  // namespace skillformer
