#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "skillformer/autograd.hpp"

namespace skillformer {

struct GradCheckOptions {
  double eps = 1e-5;
  /// Entries probed per tensor; 0 probes every entry. Probed entries are
  /// drawn without replacement from a generator seeded with `seed`.
  std::size_t max_entries_per_tensor = 0;
  std::uint64_t seed = 0;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst_tensor;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t entries_checked = 0;
};

struct CheckedTensor {
  std::string name;
  Tensor* tensor;
};

/// Builds a scalar loss on the given tape. Must be deterministic: dropout
/// off, no hidden state.
using LossBuilder = std::function<Var(Tape&)>;

/// Compares tape adjoints against central differences
/// (f(theta + eps) - f(theta - eps)) / 2 eps for every probed entry of every
/// tensor. Relative error is |a - n| / max(|a|, |n|, 1e-8).
///
/// Each tensor's requires_grad flag is forced on for the analytic pass and
/// restored afterwards; existing gradients are left untouched. Throws
/// ContractError when two forward passes at the same point disagree.
GradCheckReport grad_check(const LossBuilder& loss, std::span<const CheckedTensor> tensors,
                           const GradCheckOptions& options = {});

/// Relative error with the oracle's denominator floor.
[[nodiscard]] double relative_error(double analytic, double numeric) noexcept;

}  // namespace skillformer
