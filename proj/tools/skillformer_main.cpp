#include <malloc.h>

#include <CLI11.hpp>
#include <algorithm>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <fmt/core.h>
#include <fmt/ostream.h>

#include "skillformer/checkpoint.hpp"
#include "skillformer/config.hpp"
#include "skillformer/data.hpp"
#include "skillformer/diagnostics.hpp"
#include "skillformer/error.hpp"
#include "skillformer/metrics.hpp"
#include "skillformer/training.hpp"

namespace sf = skillformer;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitNumeric = 4;
constexpr int kExitContract = 5;

void echo_config(const std::string& title, const std::string& json) {
  fmt::print("{}\n{}\n", title, json);
  std::fflush(stdout);
}

sf::RunConfig resolve_run(const std::string& config_path, const std::string& preset_name) {
  if (!config_path.empty() && !preset_name.empty()) throw sf::ConfigError("--config and --preset are exclusive");
  if (!config_path.empty()) return sf::load_run_config(config_path);
  return sf::preset(preset_name.empty() ? "desk" : preset_name);
}

std::vector<std::size_t> parse_views(const std::string& text, std::size_t total) {
  std::vector<std::size_t> views;
  if (text == "all") {
    views.resize(total);
    std::iota(views.begin(), views.end(), std::size_t{0});
    return views;
  }
  if (text == "none" || text.empty()) return views;
  std::stringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    std::size_t pos = 0;
    unsigned long v = 0;
    try {
      v = std::stoul(item, &pos);
    } catch (const std::exception&) {
      pos = 0;
    }
    if (pos == 0 || pos != item.size()) throw sf::ConfigError("bad view index '" + item + "' in --views");
    views.push_back(v);
  }
  return views;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw sf::DataError("cannot open '" + path + "' for writing");
  out << text;
  if (!out) throw sf::DataError("write to '" + path + "' failed");
}

sf::PreparedData load_prepared(const std::string& path, const sf::SkillFormerConfig& model) {
  const sf::Dataset raw = sf::read_dataset(path);
  if (raw.views != model.views) {
    throw sf::ConfigError(fmt::format("dataset '{}' has {} views; the model expects {}", path, raw.views, model.views));
  }
  if (raw.channels != model.backbone.channels) {
    throw sf::ConfigError(
        fmt::format("dataset '{}' has {} channels; the model expects {}", path, raw.channels, model.backbone.channels));
  }
  fmt::print("data: {} ({} samples, {} views, {} frames, {}x{})\n", path, raw.size(), raw.views, raw.frames,
             raw.height, raw.width);
  return sf::prepare(raw, model.frames, model.backbone.image_size);
}

// ---------------------------------------------------------------- commands

struct GenDataArgs {
  std::string spec, out;
  std::size_t n = 1000;
  std::optional<std::uint64_t> seed;
  std::uint64_t first = 0;
};

int cmd_gen_data(const GenDataArgs& a, std::size_t threads) {
  sf::SyntheticSpec spec = a.spec.empty() ? sf::SyntheticSpec{} : sf::load_synthetic_spec(a.spec);
  if (a.seed) spec.seed = *a.seed;
  spec.validate();
  echo_config("spec:", sf::synthetic_spec_to_json(spec));
  const sf::Dataset data = sf::generate(spec, a.n, threads, a.first);
  sf::write_dataset(a.out, data);
  std::array<std::size_t, 4> counts{};
  for (const auto y : data.labels) ++counts[y];
  fmt::print("wrote {} samples to {} (labels {} {} {} {})\n", data.size(), a.out, counts[0], counts[1], counts[2],
             counts[3]);
  return 0;
}

struct TrainArgs {
  std::string config, preset, data, out, metrics_out;
  std::optional<std::size_t> epochs;
  std::optional<std::uint64_t> seed;
  bool dry_run = false;
};

int cmd_train(const TrainArgs& a) {
  sf::RunConfig cfg = resolve_run(a.config, a.preset);
  if (a.epochs) cfg.train.epochs = *a.epochs;
  if (a.seed) cfg.train.seed = *a.seed;
  cfg.train.validate();
  echo_config("config:", sf::run_config_to_json(cfg));
  const sf::ParamCounts counts = sf::SkillFormer::init(cfg.model, cfg.train.seed).count_params();
  fmt::print("parameters: trainable {} frozen {} total {}\n", counts.trainable, counts.frozen, counts.total);
  if (a.dry_run) return 0;
  if (a.data.empty() || a.out.empty()) throw sf::ConfigError("train needs --data and --out (or --dry-run)");

  const sf::PreparedData data = load_prepared(a.data, cfg.model);
  const std::string metrics_path = a.metrics_out.empty() ? a.out + ".metrics.jsonl" : a.metrics_out;
  std::ofstream metrics(metrics_path);
  if (!metrics) throw sf::DataError("cannot open '" + metrics_path + "' for writing");

  sf::TrainOptions options;
  options.on_epoch = [&](const sf::EpochRecord& rec) {
    const std::string line = sf::epoch_record_to_json(rec);
    metrics << line << '\n';
    metrics.flush();
    fmt::print("{}\n", line);
    std::fflush(stdout);
  };
  const sf::TrainResult result = sf::train(cfg.model, cfg.train, data, options);
  sf::save_checkpoint(a.out, sf::make_checkpoint(result.model, cfg.train));
  fmt::print("best epoch {}; checkpoint {}; history {}\n", result.best_epoch, a.out, metrics_path);
  return 0;
}

struct EvalArgs {
  std::string ckpt, data, metrics_out;
  bool merged = false;
  std::size_t batch_size = 16;
};

int cmd_eval(const EvalArgs& a) {
  const sf::RestoredRun run = sf::restore(sf::load_checkpoint(a.ckpt));
  echo_config("config:", sf::run_config_to_json(run.config));
  const sf::PreparedData data = load_prepared(a.data, run.config.model);
  sf::EvalOptions options;
  options.merge = a.merged;
  options.batch_size = a.batch_size;
  const sf::Metrics m = sf::evaluate(run.model, data, options);
  fmt::print("mode: {}\n", run.model.merged() ? "merged checkpoint" : (a.merged ? "adapters merged" : "adapters"));
  fmt::print("{}", sf::format_report(m));
  if (!a.metrics_out.empty()) write_text(a.metrics_out, sf::metrics_to_json(m) + "\n");
  return 0;
}

int cmd_merge(const std::string& in, const std::string& out) {
  sf::RestoredRun run = sf::restore(sf::load_checkpoint(in));
  echo_config("config:", sf::run_config_to_json(run.config));
  const sf::ParamCounts before = run.model.count_params();
  run.model.merge_lora();
  const sf::ParamCounts after = run.model.count_params();
  sf::save_checkpoint(out, sf::make_checkpoint(run.model, run.config.train));
  fmt::print("merged adapters: {} -> {} parameters; wrote {}\n", before.total, after.total, out);
  return 0;
}

struct GradcheckArgs {
  std::string config, preset;
  std::uint64_t seed = 0;
  std::size_t seeds = 1;
  std::size_t entries = 12;
};

int cmd_gradcheck(const GradcheckArgs& a) {
  const sf::RunConfig cfg = resolve_run(a.config, a.preset);
  echo_config("config:", sf::run_config_to_json(cfg));
  double worst = 0.0;
  std::string worst_case;
  for (std::uint64_t s = a.seed; s < a.seed + a.seeds; ++s) {
    for (const auto& c : sf::run_gradcheck_suite(cfg.model, s, a.entries)) {
      fmt::print("seed {:>3}  {:<16} max_rel_err {:.3e}  ({} entries, worst {}[{}])\n", s, c.name,
                 c.report.max_rel_error, c.report.entries_checked, c.report.worst_tensor, c.report.worst_index);
      if (!(c.report.max_rel_error <= worst)) {
        worst = c.report.max_rel_error;
        worst_case = fmt::format("{} (seed {})", c.name, s);
      }
    }
  }
  const bool ok = worst < sf::kGradcheckTolerance;
  fmt::print("max relative error {:.3e} in {}: {}\n", worst, worst_case, ok ? "PASS" : "FAIL");
  return ok ? 0 : kExitNumeric;
}

struct OracleArgs {
  std::string spec, views = "all";
  std::size_t m = 200000;
  std::uint64_t seed = 0;
};

int cmd_oracle(const OracleArgs& a) {
  const sf::SyntheticSpec spec = a.spec.empty() ? sf::SyntheticSpec{} : sf::load_synthetic_spec(a.spec);
  echo_config("spec:", sf::synthetic_spec_to_json(spec));
  const std::vector<std::size_t> views = parse_views(a.views, spec.views);
  const sf::OracleResult r = sf::bayes_oracle(spec, views, a.m, a.seed);
  const auto prior = sf::class_prior(spec);
  fmt::print("class prior: {:.4f} {:.4f} {:.4f} {:.4f}\n", prior[0], prior[1], prior[2], prior[3]);
  fmt::print("observed views: {}\n", views.empty() ? std::string("none") : a.views);
  fmt::print("oracle accuracy {:.4f} +- {:.4f} ({} draws)\n", r.accuracy, r.std_error, r.draws);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 64 << 20);

  CLI::App app{"SkillFormer: multi-view proficiency classifier with LoRA adapters"};
  app.require_subcommand(1);
  app.fallthrough();
  std::size_t threads = 1;
  app.add_option("--threads", threads, "Worker threads for data generation")->check(CLI::PositiveNumber);

  GenDataArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "Generate a synthetic dataset file");
  gen_cmd->add_option("--spec", gen.spec, "Synthetic spec JSON (defaults when omitted)")->check(CLI::ExistingFile);
  gen_cmd->add_option("--out", gen.out, "Output dataset file")->required();
  gen_cmd->add_option("--n", gen.n, "Number of samples")->check(CLI::PositiveNumber);
  gen_cmd->add_option("--seed", gen.seed, "Override the spec seed");
  gen_cmd->add_option("--first", gen.first, "Index of the first sample in the stream");

  TrainArgs tr;
  auto* train_cmd = app.add_subcommand("train", "Train a model and write the best checkpoint");
  train_cmd->add_option("--config", tr.config, "Run config JSON")->check(CLI::ExistingFile);
  train_cmd->add_option("--preset", tr.preset, "Preset name (Ego, Exos, EgoExos, desk)");
  train_cmd->add_option("--data", tr.data, "Training dataset file")->check(CLI::ExistingFile);
  train_cmd->add_option("--out", tr.out, "Output checkpoint");
  train_cmd->add_option("--metrics-out", tr.metrics_out, "Per-epoch JSON lines (default <out>.metrics.jsonl)");
  train_cmd->add_option("--epochs", tr.epochs, "Override train.epochs");
  train_cmd->add_option("--seed", tr.seed, "Override train.seed");
  train_cmd->add_flag("--dry-run", tr.dry_run, "Print the resolved config and exit");

  EvalArgs ev;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset");
  eval_cmd->add_option("--ckpt", ev.ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--data", ev.data, "Dataset file")->required()->check(CLI::ExistingFile);
  eval_cmd->add_flag("--merged", ev.merged, "Fold adapters into the base weights first");
  eval_cmd->add_option("--metrics-out", ev.metrics_out, "Write the metrics as JSON");
  eval_cmd->add_option("--batch-size", ev.batch_size, "Evaluation batch size")->check(CLI::PositiveNumber);

  std::string merge_in, merge_out;
  auto* merge_cmd = app.add_subcommand("merge", "Fold adapters into the base weights");
  merge_cmd->add_option("--ckpt", merge_in, "Input checkpoint")->required()->check(CLI::ExistingFile);
  merge_cmd->add_option("--out", merge_out, "Output checkpoint")->required();

  GradcheckArgs gc;
  auto* grad_cmd = app.add_subcommand("gradcheck", "Finite-difference check of every trainable block");
  grad_cmd->add_option("--config", gc.config, "Run config JSON")->check(CLI::ExistingFile);
  grad_cmd->add_option("--preset", gc.preset, "Preset name");
  grad_cmd->add_option("--seed", gc.seed, "First seed");
  grad_cmd->add_option("--seeds", gc.seeds, "Number of consecutive seeds")->check(CLI::PositiveNumber);
  grad_cmd->add_option("--entries", gc.entries, "Entries probed per tensor (0 = all)");

  OracleArgs orc;
  auto* oracle_cmd = app.add_subcommand("oracle", "Bayes-optimal accuracy for a subset of views");
  oracle_cmd->add_option("--spec", orc.spec, "Synthetic spec JSON")->check(CLI::ExistingFile);
  oracle_cmd->add_option("--views", orc.views, "Observed views: all, none or a list like 0,2");
  oracle_cmd->add_option("--m", orc.m, "Monte-Carlo draws")->check(CLI::PositiveNumber);
  oracle_cmd->add_option("--seed", orc.seed, "Monte-Carlo seed");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen_cmd) return cmd_gen_data(gen, threads);
    if (*train_cmd) return cmd_train(tr);
    if (*eval_cmd) return cmd_eval(ev);
    if (*merge_cmd) return cmd_merge(merge_in, merge_out);
    if (*grad_cmd) return cmd_gradcheck(gc);
    if (*oracle_cmd) return cmd_oracle(orc);
  } catch (const sf::ConfigError& e) {
    fmt::print(stderr, "config error: {}\n", e.what());
    return kExitConfig;
  } catch (const sf::DataError& e) {
    fmt::print(stderr, "data error: {}\n", e.what());
    return kExitData;
  } catch (const sf::NumericError& e) {
    fmt::print(stderr, "numeric error: {}\n", e.what());
    return kExitNumeric;
  } catch (const sf::ContractError& e) {
    fmt::print(stderr, "error: {}\n", e.what());
    return kExitContract;
  }
  return 0;
}
