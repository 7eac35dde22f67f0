#include "skillformer/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>

#include "skillformer/error.hpp"

namespace skillformer {

namespace {

double evaluate(const LossBuilder& loss) {
  Tape tape;
  const Var out = loss(tape);
  if (out.value().numel() != 1) {
    throw ContractError("grad_check: loss must be scalar, got " + shape_to_string(out.value().shape()));
  }
  return out.value().item();
}

std::vector<std::size_t> probe_indices(std::size_t numel, std::size_t limit, SplitMix64& rng) {
  std::vector<std::size_t> all(numel);
  std::iota(all.begin(), all.end(), std::size_t{0});
  if (limit == 0 || limit >= numel) return all;
  // Partial Fisher-Yates.
  for (std::size_t i = 0; i < limit; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.below(numel - i));
    std::swap(all[i], all[j]);
  }
  all.resize(limit);
  std::sort(all.begin(), all.end());
  return all;
}

}  // namespace

double relative_error(double analytic, double numeric) noexcept {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
  return std::abs(analytic - numeric) / denom;
}

GradCheckReport grad_check(const LossBuilder& loss, std::span<const CheckedTensor> tensors,
                           const GradCheckOptions& options) {
  if (!(options.eps > 0.0)) throw ContractError("grad_check: eps must be positive");

  // Analytic pass with private gradient buffers.
  std::vector<bool> saved_flags;
  std::vector<std::optional<std::vector<double>>> saved_grads;
  for (const auto& t : tensors) {
    saved_flags.push_back(t.tensor->requires_grad());
    saved_grads.emplace_back(t.tensor->has_grad() ? std::optional(t.tensor->grad()) : std::nullopt);
    t.tensor->set_requires_grad(true);
    t.tensor->clear_grad();
  }
  std::vector<std::vector<double>> analytic;
  double reference = 0.0;
  {
    Tape tape;
    const Var out = loss(tape);
    if (out.value().numel() != 1) {
      throw ContractError("grad_check: loss must be scalar, got " + shape_to_string(out.value().shape()));
    }
    reference = out.value().item();
    tape.backward(out);
  }
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    Tensor& t = *tensors[i].tensor;
    analytic.push_back(t.has_grad() ? t.grad() : std::vector<double>(t.numel(), 0.0));
    t.clear_grad();
    t.set_requires_grad(saved_flags[i]);
    if (saved_grads[i]) t.grad() = *saved_grads[i];
  }

  const double again = evaluate(loss);
  if (std::memcmp(&again, &reference, sizeof(double)) != 0) {
    throw ContractError("grad_check: loss is not deterministic (" + std::to_string(reference) + " vs " +
                        std::to_string(again) + ")");
  }

  GradCheckReport report;
  SplitMix64 rng(options.seed);
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    Tensor& t = *tensors[i].tensor;
    for (const std::size_t k : probe_indices(t.numel(), options.max_entries_per_tensor, rng)) {
      const double original = t[k];
      t[k] = original + options.eps;
      const double plus = evaluate(loss);
      t[k] = original - options.eps;
      const double minus = evaluate(loss);
      t[k] = original;
      const double numeric = (plus - minus) / (2.0 * options.eps);
      const double err = relative_error(analytic[i][k], numeric);
      ++report.entries_checked;
      if (err > report.max_rel_error || report.entries_checked == 1) {
        report.max_rel_error = err;
        report.worst_tensor = tensors[i].name;
        report.worst_index = k;
        report.worst_analytic = analytic[i][k];
        report.worst_numeric = numeric;
      }
    }
  }
  return report;
}

}  // namespace skillformer
