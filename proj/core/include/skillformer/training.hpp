#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "skillformer/data.hpp"
#include "skillformer/metrics.hpp"
#include "skillformer/model.hpp"

namespace skillformer {

struct TrainConfig {
  std::size_t epochs = 4;
  std::size_t batch_size = 16;
  double lr = 1e-3;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;
  /// Fraction of each scenario held out for validation. 0 disables
  /// validation; the last epoch is then kept.
  double val_fraction = 0.1;

  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

/// base_lr (1 + cos(pi step / total)) / 2, decaying to 0 at `total`.
[[nodiscard]] double cosine_lr(std::size_t step, std::size_t total, double base_lr);

/// Moments of one parameter tensor.
struct AdamWMoments {
  std::vector<double> m;
  std::vector<double> v;
};

/// One AdamW update at step t >= 1 (1-based):
///   p <- p (1 - lr wd)
///   p <- p - lr m_hat / (sqrt(v_hat) + eps)
void adamw_step(Tensor& param, std::span<const double> grad, AdamWMoments& moments, std::size_t t, double lr,
                const TrainConfig& cfg);

/// AdamW over a fixed parameter list. Parameters without a gradient are
/// skipped.
class AdamW {
 public:
  AdamW(std::vector<Tensor*> params, const TrainConfig& cfg);
  void step(double lr);
  [[nodiscard]] std::size_t steps() const noexcept { return t_; }

 private:
  std::vector<Tensor*> params_;
  std::vector<AdamWMoments> moments_;
  TrainConfig cfg_;
  std::size_t t_ = 0;
};

/// Stratified hold-out: round(fraction * n_s) samples of each scenario s go
/// to validation, chosen by a seeded shuffle. Both index lists are sorted.
struct Split {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
};
[[nodiscard]] Split stratified_split(std::span<const int> scenarios, double fraction, std::uint64_t seed);

struct EpochRecord {
  std::size_t epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double train_acc = 0.0;
  Metrics val;
  bool best = false;
};

/// One-line JSON: epoch, lr, train_loss, train_acc, val_acc, val_per_scenario.
[[nodiscard]] std::string epoch_record_to_json(const EpochRecord& r);

struct TrainResult {
  SkillFormer model;
  std::size_t best_epoch = 0;
  std::vector<EpochRecord> history;
  /// Loss of every optimizer step, in order.
  std::vector<double> step_losses;
};

struct TrainOptions {
  /// Called after every epoch.
  std::function<void(const EpochRecord&)> on_epoch;
  /// Starting point; a fresh model from `train.seed` when absent.
  const SkillFormer* initial = nullptr;
};

/// Trains with AdamW and a per-step cosine schedule. Returns the model of the
/// epoch with the best validation accuracy (earliest on ties). A non-finite
/// loss raises NumericError naming the step and the first non-finite node.
[[nodiscard]] TrainResult train(const SkillFormerConfig& model_cfg, const TrainConfig& train_cfg,
                                const PreparedData& data, const TrainOptions& options = {});

struct EvalOptions {
  std::size_t batch_size = 16;
  /// Evaluate a copy with adapters folded into the base weights.
  bool merge = true;
};

/// Eval-mode metrics, including the mean cross-entropy.
[[nodiscard]] Metrics evaluate(const SkillFormer& model, const PreparedData& data, const EvalOptions& options = {});
/// Evaluates only the listed samples.
[[nodiscard]] Metrics evaluate(const SkillFormer& model, const PreparedData& data,
                               std::span<const std::size_t> indices, const EvalOptions& options = {});

}  // namespace skillformer
