#include "skillformer/metrics.hpp"

#include <fmt/format.h>

#include <nlohmann/json.hpp>

#include "skillformer/error.hpp"

namespace skillformer {

Metrics compute_metrics(std::span<const int> labels, std::span<const int> predictions,
                        std::span<const int> scenarios) {
  if (labels.size() != predictions.size() || labels.size() != scenarios.size()) {
    throw ContractError("metrics: labels, predictions and scenarios differ in length");
  }
  Metrics m;
  m.count = labels.size();
  std::size_t correct = 0;
  std::array<std::size_t, kNumScenarios> scenario_correct{};
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int y = labels[i], p = predictions[i], s = scenarios[i];
    if (y < 0 || y > 3 || p < 0 || p > 3) throw DataError("metrics: class id out of range");
    if (s < 0 || s >= static_cast<int>(kNumScenarios)) throw DataError("metrics: scenario id out of range");
    ++m.confusion[static_cast<std::size_t>(y)][static_cast<std::size_t>(p)];
    ++m.scenario_count[static_cast<std::size_t>(s)];
    if (y == p) {
      ++correct;
      ++scenario_correct[static_cast<std::size_t>(s)];
    }
  }
  if (m.count > 0) m.accuracy = static_cast<double>(correct) / static_cast<double>(m.count);
  for (std::size_t s = 0; s < kNumScenarios; ++s) {
    if (m.scenario_count[s] > 0) {
      m.scenario_accuracy[s] = static_cast<double>(scenario_correct[s]) / static_cast<double>(m.scenario_count[s]);
    }
  }
  return m;
}

double weighted_scenario_accuracy(const Metrics& m) {
  if (m.count == 0) return 0.0;
  double total = 0.0;
  for (std::size_t s = 0; s < kNumScenarios; ++s) total += static_cast<double>(m.scenario_count[s]) * m.scenario_accuracy[s];
  return total / static_cast<double>(m.count);
}

std::string metrics_to_json(const Metrics& m) {
  nlohmann::ordered_json j;
  j["count"] = m.count;
  j["accuracy"] = m.accuracy;
  j["loss"] = m.loss;
  nlohmann::ordered_json per = nlohmann::ordered_json::object();
  for (std::size_t s = 0; s < kNumScenarios; ++s) {
    per[kScenarioNames[s]] = {{"count", m.scenario_count[s]}, {"accuracy", m.scenario_accuracy[s]}};
  }
  j["per_scenario"] = per;
  j["confusion"] = m.confusion;
  return j.dump();
}

std::string format_report(const Metrics& m) {
  std::string out = fmt::format("samples   {}\naccuracy  {:.4f}\nloss      {:.6f}\n\n", m.count, m.accuracy, m.loss);
  out += fmt::format("{:<10} {:>7} {:>9}\n", "scenario", "count", "accuracy");
  for (std::size_t s = 0; s < kNumScenarios; ++s) {
    out += fmt::format("{:<10} {:>7} {:>9.4f}\n", kScenarioNames[s], m.scenario_count[s], m.scenario_accuracy[s]);
  }
  out += "\nconfusion (rows: true, cols: predicted)\n      ";
  for (int c = 0; c < 4; ++c) out += fmt::format("{:>7}", c);
  out += '\n';
  for (std::size_t y = 0; y < 4; ++y) {
    out += fmt::format("{:>6}", y);
    for (std::size_t p = 0; p < 4; ++p) out += fmt::format("{:>7}", m.confusion[y][p]);
    out += '\n';
  }
  return out;
}

}  // namespace skillformer
