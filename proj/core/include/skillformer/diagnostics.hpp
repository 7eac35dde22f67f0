#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "skillformer/grad_check.hpp"
#include "skillformer/model.hpp"

namespace skillformer {

struct GradcheckCase {
  std::string name;
  GradCheckReport report;
};

inline constexpr double kGradcheckTolerance = 1e-4;

/// Finite-difference checks of every trainable building block: linear,
/// attention, divided block, LoRA path, the full fusion module and
/// cross-entropy. The fusion case uses the widths of `cfg`; the others use
/// small fixed shapes. Each loss is sum(output * R) for a random R. At most
/// `max_entries` entries per tensor are probed (0 = all).
[[nodiscard]] std::vector<GradcheckCase> run_gradcheck_suite(const SkillFormerConfig& cfg, std::uint64_t seed,
                                                             std::size_t max_entries = 12);

}  // namespace skillformer
