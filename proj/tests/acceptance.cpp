#include <malloc.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include <fmt/core.h>

#include "skillformer/checkpoint.hpp"
#include "skillformer/config.hpp"
#include "skillformer/data.hpp"
#include "skillformer/diagnostics.hpp"
#include "skillformer/error.hpp"
#include "skillformer/metrics.hpp"
#include "skillformer/training.hpp"

namespace sf = skillformer;
using sf::Tape;
using sf::Tensor;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

// ---------------------------------------------------------------- helpers

std::size_t worker_count() { return std::max(1u, std::thread::hardware_concurrency()); }

Tensor random_inputs(const sf::SkillFormerConfig& cfg, std::size_t batch, sf::SplitMix64& rng) {
  const std::size_t s = cfg.backbone.image_size;
  return Tensor::normal({batch, cfg.views, cfg.frames, cfg.backbone.channels, s, s}, rng, 1.0);
}

/// Max |a - b| over the logits of `count` random inputs.
double max_logit_gap(const sf::SkillFormer& a, const sf::SkillFormer& b, std::size_t count, std::uint64_t seed) {
  sf::SplitMix64 rng(seed);
  double gap = 0.0;
  for (std::size_t done = 0; done < count;) {
    const std::size_t n = std::min<std::size_t>(50, count - done);
    const Tensor x = random_inputs(a.config(), n, rng);
    gap = std::max(gap, sf::max_abs_diff(a.logits(x), b.logits(x)));
    done += n;
  }
  return gap;
}

bool is_frozen_name(const std::string& name) {
  return name.rfind("backbone.", 0) == 0 && name.find(".lora_") == std::string::npos;
}

std::vector<std::pair<std::string, Tensor>> snapshot(const sf::SkillFormer& model) {
  std::vector<std::pair<std::string, Tensor>> out;
  model.for_each_parameter([&](const std::string& name, const Tensor& t) { out.emplace_back(name, t); });
  return out;
}

/// Independent piecewise-linear resampling: walks source segments in long
/// double instead of flooring a coordinate.
Tensor interpolation_oracle(const Tensor& table, std::size_t target) {
  const std::size_t t0 = table.dim(0), d = table.dim(1);
  Tensor out({target, d});
  for (std::size_t t = 0; t < target; ++t) {
    const long double pos = target == 1 ? 0.0L : static_cast<long double>(t) * (t0 - 1) / (target - 1);
    std::size_t seg = 0;
    while (seg + 1 < t0 - 1 && pos >= static_cast<long double>(seg + 1)) ++seg;
    const long double w = pos - seg;
    for (std::size_t j = 0; j < d; ++j) {
      const long double a = table[seg * d + j], b = table[(seg + 1) * d + j];
      out[t * d + j] = static_cast<double>((1.0L - w) * a + w * b);
    }
  }
  return out;
}

sf::SyntheticSpec benchmark_spec() {
  sf::SyntheticSpec spec;
  spec.views = 5;
  spec.noise = 0.05;
  spec.seed = 7;
  return spec;
}

// ---------------------------------------------------------------- criteria

Outcome gradient_fidelity() {
  const sf::SkillFormerConfig cfg = sf::preset("desk").model;
  double worst = 0.0;
  std::string where;
  std::set<std::string> cases;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    for (const auto& c : sf::run_gradcheck_suite(cfg, seed)) {
      cases.insert(c.name);
      if (!(c.report.max_rel_error <= worst)) {
        worst = c.report.max_rel_error;
        where = fmt::format("{} seed {}", c.name, seed);
      }
    }
  }
  const bool pass = worst < sf::kGradcheckTolerance && cases.size() == 7;
  return {pass, fmt::format("{} cases x 20 seeds, max rel err {:.2e} ({}) < 1e-4", cases.size(), worst, where)};
}

Outcome merge_equivalence() {
  const sf::RunConfig run = sf::preset("desk");
  const sf::SkillFormerConfig& cfg = run.model;
  const std::size_t inputs = 1000;

  const sf::SkillFormer fresh = sf::SkillFormer::init(cfg, 11);
  sf::SkillFormer fresh_merged = fresh;
  fresh_merged.merge_lora();
  const double before = max_logit_gap(fresh, fresh_merged, inputs, 1);

  sf::TrainConfig tc = run.train;
  tc.epochs = 2;
  tc.lr = 1e-2;
  tc.val_fraction = 0.0;
  tc.seed = 11;
  const sf::PreparedData data =
      sf::prepare(sf::generate(benchmark_spec(), 48, worker_count()), cfg.frames, cfg.backbone.image_size);
  const sf::SkillFormer trained = sf::train(cfg, tc, data).model;
  double adapter_norm = 0.0;
  trained.for_each_parameter([&](const std::string& name, const Tensor& t) {
    if (name.find(".lora_B") == std::string::npos) return;
    for (const double b : t.data()) adapter_norm = std::max(adapter_norm, std::abs(b));
  });
  sf::SkillFormer trained_merged = trained;
  trained_merged.merge_lora();
  const double after = max_logit_gap(trained, trained_merged, inputs, 2);

  // Binary32 storage: adapted and merged checkpoints of the trained model.
  const sf::RestoredRun stored = sf::restore(sf::make_checkpoint(trained, tc));
  sf::SkillFormer stored_merged = stored.model;
  stored_merged.merge_lora();
  const sf::RestoredRun stored_merged_run = sf::restore(sf::make_checkpoint(stored_merged, tc));
  const double after32 = max_logit_gap(stored.model, stored_merged_run.model, inputs, 3);

  const bool pass = before < 1e-12 && after < 1e-12 && after32 < 1e-5 && adapter_norm > 0.0;
  return {pass, fmt::format("{} inputs: before training {:.2e}, after training {:.2e} (max |B| {:.2e}) < 1e-12; "
                            "binary32 checkpoints {:.2e} < 1e-5",
                            inputs, before, after, adapter_norm, after32)};
}

Outcome fusion_invariants() {
  const sf::SkillFormerConfig cfg = sf::preset("desk").model;
  const std::size_t d = cfg.backbone.embed_dim, views = cfg.views, hidden = cfg.fusion.hidden;
  std::size_t passed = 0;
  double perm_gap = 0.0, mean_err = 0.0, std_err = 0.0, g_min = 1.0, g_max = 0.0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    sf::SplitMix64 rng = sf::SplitMix64::stream(seed, 0);
    sf::CrossViewFusion fusion = sf::CrossViewFusion::init(d, cfg.fusion, rng);
    bool ok = true;

    // View permutation.
    const std::size_t batch = 4;
    const Tensor x = Tensor::normal({batch, views, d}, rng, 1.0);
    std::vector<std::size_t> perm(views);
    for (std::size_t v = 0; v < views; ++v) perm[v] = v;
    for (std::size_t v = views - 1; v > 0; --v) std::swap(perm[v], perm[rng.below(v + 1)]);
    Tensor xp({batch, views, d});
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t v = 0; v < views; ++v) {
        std::copy_n(x.data().begin() + (b * views + perm[v]) * d, d, xp.data().begin() + (b * views + v) * d);
      }
    }
    const double gap = sf::max_abs_diff(fusion.fuse(x), fusion.fuse(xp));
    perm_gap = std::max(perm_gap, gap);
    ok = ok && gap < 1e-12;

    // Gate range: output / input is the gate value.
    {
      Tape tape;
      const Tensor h = Tensor::normal({8, hidden}, rng, 3.0);
      const Tensor out = fusion.gate(tape, tape.constant(h)).value();
      for (std::size_t i = 0; i < h.numel(); ++i) {
        if (h[i] == 0.0) continue;
        const double g = out[i] / h[i];
        g_min = std::min(g_min, g);
        g_max = std::max(g_max, g);
        ok = ok && g > 0.0 && g < 1.0;
      }
    }

    // Standardization at init.
    const Tensor hg = Tensor::normal({8, hidden}, rng, 2.0, 0.5);
    {
      Tape tape;
      const Tensor y = fusion.calibrate(tape, tape.constant(hg)).value();
      const std::size_t out_dim = y.dim(1);
      for (std::size_t r = 0; r < y.dim(0); ++r) {
        double mean = 0.0, var = 0.0;
        for (std::size_t j = 0; j < out_dim; ++j) mean += y[r * out_dim + j];
        mean /= static_cast<double>(out_dim);
        for (std::size_t j = 0; j < out_dim; ++j) var += (y[r * out_dim + j] - mean) * (y[r * out_dim + j] - mean);
        const double sd = std::sqrt(var / static_cast<double>(out_dim));
        mean_err = std::max(mean_err, std::abs(mean));
        std_err = std::max(std_err, std::abs(sd - 1.0));
        ok = ok && std::abs(mean) < 1e-7 && std::abs(sd - 1.0) < 1e-6;
      }
    }

    // sigma_learn = 0 returns mu_learn.
    fusion.params().sigma_learn.fill(0.0);
    for (double& v : fusion.params().mu_learn.data()) v = rng.normal();
    {
      Tape tape;
      const Tensor y = fusion.calibrate(tape, tape.constant(hg)).value();
      const std::size_t out_dim = y.dim(1);
      for (std::size_t r = 0; r < y.dim(0); ++r) {
        for (std::size_t j = 0; j < out_dim; ++j) ok = ok && y[r * out_dim + j] == fusion.params().mu_learn[j];
      }
    }
    passed += ok ? 1 : 0;
  }
  return {passed == 100,
          fmt::format("{}/100 seeds; permutation gap {:.2e} < 1e-12, gate min {:.2e} > 0 and 1 - max {:.2e} > 0, "
                      "row |mean| {:.2e} < 1e-7, |std-1| {:.2e} < 1e-6, sigma=0 gives mu exactly",
                      passed, perm_gap, g_min, 1.0 - g_max, mean_err, std_err)};
}

Outcome interpolation() {
  double worst = 0.0;
  bool ok = true;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    sf::SplitMix64 rng(seed);
    const Tensor table = Tensor::normal({8, 64}, rng, 0.02);
    ok = ok && sf::bitwise_equal(sf::interpolate_time_embeddings(table, 8), table);
    for (const std::size_t target : {16u, 24u, 32u}) {
      const Tensor out = sf::interpolate_time_embeddings(table, target);
      ok = ok && out.shape() == sf::Shape{target, 64};
      for (std::size_t j = 0; j < 64; ++j) {
        ok = ok && out[j] == table[j] && out[(target - 1) * 64 + j] == table[7 * 64 + j];
      }
      worst = std::max(worst, sf::max_abs_diff(out, interpolation_oracle(table, target)));
    }
  }
  return {ok && worst < 1e-12,
          fmt::format("T0=8 -> 16/24/32 over 20 tables: identity bitwise, endpoints exact, oracle gap {:.2e} < 1e-12",
                      worst)};
}

struct BenchmarkRun {
  sf::SkillFormer model;
  sf::PreparedData test;
};

Outcome fusion_beats_single_view(std::optional<BenchmarkRun>& keep) {
  const sf::SyntheticSpec spec = benchmark_spec();
  const sf::RunConfig run = sf::preset("desk");
  const sf::SkillFormerConfig& cfg = run.model;
  const std::size_t threads = worker_count();
  const sf::PreparedData train_data =
      sf::prepare(sf::generate(spec, 2000, threads), cfg.frames, cfg.backbone.image_size);
  const sf::PreparedData test_data =
      sf::prepare(sf::generate(spec, 500, threads, 1'000'000), cfg.frames, cfg.backbone.image_size);
  const double n_test = static_cast<double>(test_data.size());

  auto log_epoch = [](const char* who) {
    return [who](const sf::EpochRecord& r) {
      std::fprintf(stderr, "  [5] %s epoch %zu train_loss %.4f val_acc %.4f\n", who, r.epoch, r.train_loss,
                   r.val.accuracy);
    };
  };

  // Bound: oracle accuracy plus two standard errors of a test-set accuracy
  // at that level, combined with the oracle's own Monte-Carlo error.
  auto bound = [&](const std::vector<std::size_t>& observed, std::uint64_t seed) {
    const sf::OracleResult o = sf::bayes_oracle(spec, observed, 200000, seed);
    const double se = std::sqrt(o.accuracy * (1.0 - o.accuracy) / n_test + o.std_error * o.std_error);
    return std::pair{o.accuracy, o.accuracy + 2.0 * se};
  };

  sf::TrainOptions multi_opts;
  multi_opts.on_epoch = log_epoch("5-view");
  const sf::TrainResult multi = sf::train(cfg, run.train, train_data, multi_opts);
  const double multi_acc = sf::evaluate(multi.model, test_data).accuracy;
  const auto [multi_oracle, multi_bound] = bound({0, 1, 2, 3, 4}, 100);

  bool ok = multi_acc <= multi_bound;
  double best_single = 0.0;
  std::string singles;
  for (std::size_t v = 0; v < cfg.views; ++v) {
    const std::size_t keep_view[1] = {v};
    sf::SkillFormerConfig single_cfg = cfg;
    single_cfg.views = 1;
    sf::TrainOptions opts;
    const std::string who = fmt::format("view {}", v);
    opts.on_epoch = log_epoch(who.c_str());
    const sf::TrainResult single = sf::train(single_cfg, run.train, train_data.select_views(keep_view), opts);
    const double acc = sf::evaluate(single.model, test_data.select_views(keep_view)).accuracy;
    const auto [oracle, upper] = bound({v}, 101 + v);
    ok = ok && acc <= upper;
    best_single = std::max(best_single, acc);
    singles += fmt::format("{}{:.3f}/{:.3f}", v == 0 ? "" : " ", acc, oracle);
  }
  const double gap = multi_acc - best_single;
  ok = ok && gap >= 0.10;
  keep = BenchmarkRun{multi.model, test_data};
  return {ok, fmt::format("5-view acc {:.3f} (oracle {:.3f}, bound {:.3f}); single-view acc/oracle [{}]; "
                          "gap {:+.1f} points >= 10",
                          multi_acc, multi_oracle, multi_bound, singles, 100.0 * gap)};
}

Outcome scaling_presets() {
  struct Row {
    const char* name;
    std::size_t frames, rank;
    double alpha;
    std::size_t hidden;
    double lr;
  };
  const Row rows[] = {{"Ego", 32, 32, 64.0, 1536, 5e-5}, {"Exos", 24, 48, 96.0, 2048, 3e-5},
                      {"EgoExos", 16, 64, 128.0, 2560, 2e-5}};
  bool ok = true;
  std::vector<std::size_t> counts;
  for (const Row& row : rows) {
    const sf::RunConfig cfg = sf::preset(row.name);
    ok = ok && cfg.model.frames == row.frames && cfg.model.lora_rank == row.rank && cfg.model.lora_alpha == row.alpha &&
         cfg.model.fusion.hidden == row.hidden && cfg.train.lr == row.lr;
    const sf::SkillFormer model = sf::SkillFormer::init(cfg.model, 0);
    for (const auto& block : model.backbone().blocks()) {
      ok = ok && block.temporal_qkv.adapter().rank() == row.rank && block.fc2.adapter().alpha() == row.alpha;
    }
    counts.push_back(model.count_params().trainable);
  }
  ok = ok && counts[0] < counts[1] && counts[1] < counts[2];
  return {ok, fmt::format("(T, r, alpha, Hid, lr) exact for Ego/Exos/EgoExos; trainable {} < {} < {}", counts[0],
                          counts[1], counts[2])};
}

Outcome training_sanity() {
  const sf::RunConfig run = sf::preset("desk");
  const sf::SkillFormerConfig& cfg = run.model;
  const sf::PreparedData data =
      sf::prepare(sf::generate(benchmark_spec(), 32, worker_count()), cfg.frames, cfg.backbone.image_size);

  sf::TrainConfig tc = run.train;
  tc.val_fraction = 0.0;
  tc.seed = 3;
  const auto initial = snapshot(sf::SkillFormer::init(cfg, tc.seed));

  sf::TrainConfig still = tc;
  still.lr = 0.0;
  still.epochs = 1;
  const auto after_still = snapshot(sf::train(cfg, still, data).model);
  bool unchanged = initial.size() == after_still.size();
  for (std::size_t i = 0; unchanged && i < initial.size(); ++i) {
    unchanged = sf::bitwise_equal(initial[i].second, after_still[i].second);
  }

  sf::TrainConfig overfit = tc;
  overfit.epochs = 50;
  overfit.batch_size = 4;
  const sf::TrainResult fit = sf::train(cfg, overfit, data);
  const double train_acc = sf::evaluate(fit.model, data).accuracy;
  const double first_loss = fit.step_losses.front();

  const auto fitted = snapshot(fit.model);
  bool frozen_kept = true;
  std::size_t frozen_tensors = 0;
  for (std::size_t i = 0; i < initial.size(); ++i) {
    if (!is_frozen_name(initial[i].first)) continue;
    ++frozen_tensors;
    frozen_kept = frozen_kept && sf::bitwise_equal(initial[i].second, fitted[i].second);
  }

  sf::TrainConfig repeat = tc;
  repeat.epochs = 3;
  const sf::TrainResult r1 = sf::train(cfg, repeat, data);
  const sf::TrainResult r2 = sf::train(cfg, repeat, data);
  const bool reproducible = r1.step_losses == r2.step_losses &&
                            sf::serialize(sf::make_checkpoint(r1.model, repeat)) ==
                                sf::serialize(sf::make_checkpoint(r2.model, repeat));

  const bool loss_ok = std::abs(first_loss - std::log(4.0)) <= 0.05;
  return {unchanged && train_acc == 1.0 && loss_ok && reproducible && frozen_kept,
          fmt::format("lr=0 bitwise {}; 32-sample overfit acc {:.3f} after 50 epochs at batch {}; first loss {:.4f} "
                      "(ln 4 {:+.4f}); repeat run bitwise {}; {} frozen tensors unchanged {}",
                      unchanged ? "yes" : "no", train_acc, overfit.batch_size, first_loss, first_loss - std::log(4.0),
                      reproducible ? "yes" : "no", frozen_tensors, frozen_kept ? "yes" : "no")};
}

Outcome metrics_structure(const std::optional<BenchmarkRun>& bench) {
  sf::SkillFormer model;
  sf::PreparedData data;
  if (bench) {
    model = bench->model;
    data = bench->test;
  } else {
    const sf::SkillFormerConfig cfg = sf::preset("desk").model;
    model = sf::SkillFormer::init(cfg, 0);
    data = sf::prepare(sf::generate(benchmark_spec(), 120, worker_count(), 1'000'000), cfg.frames,
                       cfg.backbone.image_size);
  }
  const sf::Metrics m = sf::evaluate(model, data);
  bool ok = m.count == data.size();
  std::size_t scen_total = 0, conf_total = 0;
  std::array<std::size_t, 4> support{};
  for (const int y : data.labels) ++support[y];
  for (std::size_t s = 0; s < sf::kNumScenarios; ++s) scen_total += m.scenario_count[s];
  for (std::size_t y = 0; y < 4; ++y) {
    std::size_t row = 0;
    for (const auto c : m.confusion[y]) row += c;
    ok = ok && row == support[y];
    conf_total += row;
  }
  ok = ok && scen_total == m.count && conf_total == m.count;
  const double weighted_gap = std::abs(sf::weighted_scenario_accuracy(m) - m.accuracy);
  ok = ok && weighted_gap <= 1e-12;
  const std::string report = sf::format_report(m);
  for (const char* part : {"accuracy", "clean", "noisy", "occluded", "confusion"}) {
    ok = ok && report.find(part) != std::string::npos;
  }

  const int majority = static_cast<int>(std::max_element(support.begin(), support.end()) - support.begin());
  const sf::Metrics constant =
      sf::compute_metrics(data.labels, std::vector<int>(data.size(), majority), data.scenarios);
  const double prior = static_cast<double>(support[majority]) / static_cast<double>(data.size());
  ok = ok && constant.accuracy == prior;
  return {ok, fmt::format("overall {:.3f}, per-scenario {:.3f}/{:.3f}/{:.3f}, confusion sums {}; weighted mean gap "
                          "{:.1e} <= 1e-12; majority class {} accuracy {:.4f} == prior {:.4f}",
                          m.accuracy, m.scenario_accuracy[0], m.scenario_accuracy[1], m.scenario_accuracy[2],
                          conf_total, weighted_gap, majority, constant.accuracy, prior)};
}

}  // namespace

int main(int argc, char** argv) {
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 64 << 20);

  std::set<int> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));
  auto wanted = [&](int id) { return selected.empty() || selected.count(id) > 0; };

  std::optional<BenchmarkRun> bench;
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria = {
      {"gradient fidelity", gradient_fidelity},
      {"LoRA merge equivalence", merge_equivalence},
      {"fusion invariants", fusion_invariants},
      {"temporal embedding interpolation", interpolation},
      {"fusion beats single view", [&] { return fusion_beats_single_view(bench); }},
      {"scaling presets", scaling_presets},
      {"training sanity", training_sanity},
      {"metrics structure", [&] { return metrics_structure(bench); }},
  };

  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!wanted(id)) continue;
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const sf::Error& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    fmt::print("{} {}. {}: {} [{:.1f}s]\n", o.pass ? "PASS" : "FAIL", id, criteria[i].first, o.detail, seconds);
    std::fflush(stdout);
    failures += o.pass ? 0 : 1;
  }
  return failures == 0 ? 0 : 1;
}
