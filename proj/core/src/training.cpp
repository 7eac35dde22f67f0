#include "skillformer/training.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <optional>

#include <nlohmann/json.hpp>

#include "skillformer/error.hpp"

namespace skillformer {

namespace {

constexpr std::uint64_t kShuffleStream = 0x5u;
constexpr std::uint64_t kDropoutStream = 0xd0u;
constexpr std::uint64_t kSplitStream = 0x5e1u;

void shuffle(std::vector<std::size_t>& v, SplitMix64& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng.below(i));
    std::swap(v[i - 1], v[j]);
  }
}

SkillFormer eval_copy(const SkillFormer& model, bool merge) {
  SkillFormer copy = model;
  copy.for_each_parameter([](const std::string&, Tensor& t) { t.clear_grad(); });
  if (merge) copy.merge_lora();
  return copy;
}

}  // namespace

void TrainConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("train: " + msg); };
  if (epochs == 0) fail("epochs must be positive");
  if (batch_size == 0) fail("batch_size must be positive");
  if (!(lr >= 0.0) || !std::isfinite(lr)) fail("lr must be a finite non-negative number");
  if (!(weight_decay >= 0.0)) fail("weight_decay must be non-negative");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) fail("betas must be in [0, 1)");
  if (!(adam_eps > 0.0)) fail("adam_eps must be positive");
  if (!(val_fraction >= 0.0 && val_fraction < 1.0)) fail("val_fraction must be in [0, 1)");
}

double cosine_lr(std::size_t step, std::size_t total, double base_lr) {
  if (step > total) throw ContractError("cosine_lr: step beyond total");
  if (total == 0) return base_lr;
  if (step == total) return 0.0;
  const double phase = std::numbers::pi * static_cast<double>(step) / static_cast<double>(total);
  return base_lr * (1.0 + std::cos(phase)) / 2.0;
}

void adamw_step(Tensor& param, std::span<const double> grad, AdamWMoments& s, std::size_t t, double lr,
                const TrainConfig& cfg) {
  const std::size_t n = param.numel();
  if (grad.size() != n) throw DimensionError("adamw: gradient length differs from parameter");
  if (t == 0) throw ContractError("adamw: step count starts at 1");
  if (s.m.empty()) {
    s.m.assign(n, 0.0);
    s.v.assign(n, 0.0);
  }
  if (s.m.size() != n || s.v.size() != n) throw DimensionError("adamw: moment length differs from parameter");
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
  const double decay = 1.0 - lr * cfg.weight_decay;
  double* p = param.data().data();
  for (std::size_t i = 0; i < n; ++i) {
    s.m[i] = cfg.beta1 * s.m[i] + (1.0 - cfg.beta1) * grad[i];
    s.v[i] = cfg.beta2 * s.v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
    const double m_hat = s.m[i] / c1;
    const double v_hat = s.v[i] / c2;
    p[i] *= decay;
    p[i] -= lr * m_hat / (std::sqrt(v_hat) + cfg.adam_eps);
  }
}

AdamW::AdamW(std::vector<Tensor*> params, const TrainConfig& cfg)
    : params_(std::move(params)), moments_(params_.size()), cfg_(cfg) {}

void AdamW::step(double lr) {
  ++t_;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor& p = *params_[i];
    if (!p.requires_grad() || !p.has_grad()) continue;
    adamw_step(p, p.grad(), moments_[i], t_, lr, cfg_);
  }
}

Split stratified_split(std::span<const int> scenarios, double fraction, std::uint64_t seed) {
  if (!(fraction >= 0.0 && fraction < 1.0)) throw ConfigError("validation fraction must be in [0, 1)");
  Split split;
  for (std::size_t s = 0; s < kNumScenarios; ++s) {
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < scenarios.size(); ++i) {
      if (scenarios[i] == static_cast<int>(s)) members.push_back(i);
    }
    SplitMix64 rng = SplitMix64::stream(seed, kSplitStream + s);
    shuffle(members, rng);
    const auto held = static_cast<std::size_t>(std::lround(fraction * static_cast<double>(members.size())));
    split.val.insert(split.val.end(), members.begin(), members.begin() + static_cast<std::ptrdiff_t>(held));
    split.train.insert(split.train.end(), members.begin() + static_cast<std::ptrdiff_t>(held), members.end());
  }
  std::sort(split.train.begin(), split.train.end());
  std::sort(split.val.begin(), split.val.end());
  return split;
}

std::string epoch_record_to_json(const EpochRecord& r) {
  nlohmann::ordered_json j;
  j["epoch"] = r.epoch;
  j["lr"] = r.lr;
  j["train_loss"] = r.train_loss;
  j["train_acc"] = r.train_acc;
  j["val_acc"] = r.val.accuracy;
  j["val_loss"] = r.val.loss;
  nlohmann::ordered_json per = nlohmann::ordered_json::object();
  for (std::size_t s = 0; s < kNumScenarios; ++s) per[kScenarioNames[s]] = r.val.scenario_accuracy[s];
  j["val_per_scenario"] = per;
  j["best"] = r.best;
  return j.dump();
}

TrainResult train(const SkillFormerConfig& model_cfg, const TrainConfig& cfg, const PreparedData& data,
                  const TrainOptions& options) {
  model_cfg.validate();
  cfg.validate();
  if (data.size() == 0) throw DataError("training set is empty");
  if (data.views != model_cfg.views) {
    throw ConfigError("data has " + std::to_string(data.views) + " views, model expects " +
                      std::to_string(model_cfg.views));
  }
  if (data.channels != model_cfg.backbone.channels || data.size_px != model_cfg.backbone.image_size) {
    throw ConfigError("data geometry does not match the backbone");
  }

  TrainResult result;
  SkillFormer model = options.initial ? *options.initial : SkillFormer::init(model_cfg, cfg.seed);
  if (!(model.config() == model_cfg)) throw ConfigError("initial model does not match the model config");

  const Split split = cfg.val_fraction > 0.0 ? stratified_split(data.scenarios, cfg.val_fraction, cfg.seed)
                                             : Split{[&] {
                                                       std::vector<std::size_t> all(data.size());
                                                       std::iota(all.begin(), all.end(), std::size_t{0});
                                                       return all;
                                                     }(),
                                                     {}};
  if (split.train.empty()) throw DataError("no training samples left after the validation split");

  std::vector<Tensor*> params;
  for (const auto& p : model.trainable_parameters()) params.push_back(p.tensor);
  AdamW optimizer(params, cfg);

  const std::size_t batches = (split.train.size() + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t total_steps = cfg.epochs * batches;
  SplitMix64 dropout_rng = SplitMix64::stream(cfg.seed, kDropoutStream);
  double best_acc = -1.0;
  std::size_t step = 0;

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::vector<std::size_t> order = split.train;
    SplitMix64 shuffle_rng = SplitMix64::stream(cfg.seed, kShuffleStream + epoch);
    shuffle(order, shuffle_rng);

    double loss_sum = 0.0;
    std::size_t correct = 0;
    double lr = 0.0;
    for (std::size_t b = 0; b < batches; ++b) {
      const std::size_t lo = b * cfg.batch_size, hi = std::min(order.size(), lo + cfg.batch_size);
      const std::span<const std::size_t> idx(order.data() + lo, hi - lo);
      const std::vector<int> labels = data.batch_labels(idx);

      Tape tape;
      auto fail = [&] {
        std::string where = "unknown node";
        if (const auto bad = tape.first_non_finite()) {
          where = "op '" + bad->op + "' in '" + (bad->scope.empty() ? std::string("<root>") : bad->scope) + "'";
        }
        throw NumericError("non-finite loss at step " + std::to_string(step) + " (epoch " + std::to_string(epoch) +
                           "); first non-finite value from " + where);
      };
      std::optional<Var> logits, loss;
      try {
        logits = model.forward(tape, data.batch(idx), &dropout_rng, /*training=*/true);
        loss = cross_entropy(*logits, labels);
      } catch (const NumericError&) {
        fail();
      }
      const double value = loss->value().item();
      if (!std::isfinite(value)) fail();
      tape.backward(*loss);

      lr = cosine_lr(step, total_steps, cfg.lr);
      optimizer.step(lr);
      for (Tensor* p : params) p->clear_grad();

      result.step_losses.push_back(value);
      loss_sum += value * static_cast<double>(idx.size());
      const std::vector<int> pred = predict(logits->value());
      for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == labels[i] ? 1 : 0;
      ++step;
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = lr;
    rec.train_loss = loss_sum / static_cast<double>(split.train.size());
    rec.train_acc = static_cast<double>(correct) / static_cast<double>(split.train.size());
    if (!split.val.empty()) {
      rec.val = evaluate(model, data, split.val);
      rec.best = rec.val.accuracy > best_acc;
    } else {
      rec.best = true;
    }
    if (rec.best) {
      best_acc = rec.val.accuracy;
      result.best_epoch = epoch;
      result.model = eval_copy(model, /*merge=*/false);
    }
    result.history.push_back(rec);
    if (options.on_epoch) options.on_epoch(rec);
  }
  return result;
}

Metrics evaluate(const SkillFormer& model, const PreparedData& data, const EvalOptions& options) {
  std::vector<std::size_t> all(data.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  return evaluate(model, data, all, options);
}

Metrics evaluate(const SkillFormer& model, const PreparedData& data, std::span<const std::size_t> indices,
                 const EvalOptions& options) {
  if (options.batch_size == 0) throw ConfigError("eval batch_size must be positive");
  const SkillFormerConfig& cfg = model.config();
  if (data.views != cfg.views || data.channels != cfg.backbone.channels || data.size_px != cfg.backbone.image_size) {
    throw ConfigError("data geometry (views " + std::to_string(data.views) + ", channels " +
                      std::to_string(data.channels) + ", size " + std::to_string(data.size_px) +
                      ") does not match the model");
  }
  const SkillFormer* runner = &model;
  SkillFormer merged;
  if (options.merge && !model.merged()) {
    merged = eval_copy(model, true);
    runner = &merged;
  }
  std::vector<int> labels, predictions, scenarios;
  double loss_sum = 0.0;
  for (std::size_t lo = 0; lo < indices.size(); lo += options.batch_size) {
    const std::size_t hi = std::min(indices.size(), lo + options.batch_size);
    const std::span<const std::size_t> idx = indices.subspan(lo, hi - lo);
    const std::vector<int> y = data.batch_labels(idx);
    Tape tape;
    const Var logits = runner->forward(tape, data.batch(idx));
    loss_sum += cross_entropy(logits, y).value().item() * static_cast<double>(idx.size());
    const std::vector<int> p = predict(logits.value());
    labels.insert(labels.end(), y.begin(), y.end());
    predictions.insert(predictions.end(), p.begin(), p.end());
    for (const std::size_t i : idx) scenarios.push_back(data.scenarios[i]);
  }
  Metrics m = compute_metrics(labels, predictions, scenarios);
  if (m.count > 0) m.loss = loss_sum / static_cast<double>(m.count);
  return m;
}

}  // namespace skillformer
