#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <string>

#include "skillformer/data.hpp"

namespace skillformer {

using ConfusionMatrix = std::array<std::array<std::size_t, 4>, 4>;

/// Classification summary. `confusion[true][predicted]`.
struct Metrics {
  std::size_t count = 0;
  double accuracy = 0.0;
  double loss = 0.0;
  std::array<std::size_t, kNumScenarios> scenario_count{};
  std::array<double, kNumScenarios> scenario_accuracy{};
  ConfusionMatrix confusion{};
};

/// Accuracy, per-scenario accuracy and confusion counts. Scenarios with no
/// samples report accuracy 0. `loss` is left at 0.
[[nodiscard]] Metrics compute_metrics(std::span<const int> labels, std::span<const int> predictions,
                                      std::span<const int> scenarios);

/// sum_s count_s * acc_s / count, recomputed from the per-scenario fields.
[[nodiscard]] double weighted_scenario_accuracy(const Metrics& m);

/// One-line JSON object.
[[nodiscard]] std::string metrics_to_json(const Metrics& m);
/// Human-readable report: overall accuracy, per-scenario table, confusion
/// matrix.
[[nodiscard]] std::string format_report(const Metrics& m);

}  // namespace skillformer
