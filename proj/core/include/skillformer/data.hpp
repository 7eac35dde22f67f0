#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "skillformer/tensor.hpp"

namespace skillformer {

inline constexpr std::size_t kNumScenarios = 3;
inline constexpr std::array<const char*, kNumScenarios> kScenarioNames = {"clean", "noisy", "occluded"};

/// Parameters of the synthetic multi-view benchmark.
///
/// Each sample draws one latent z_v in [0, 1] per view. View v renders only
/// z_v, as the brightness and the speed of a moving gaussian blob. The label
/// is min(3, floor(4 mean(z))), so no single view determines it. Samples
/// cycle through the scenarios by index: clean, noisy (noise scaled by
/// `noisy_factor`), occluded (a gray vertical bar over every frame).
struct SyntheticSpec {
  std::size_t views = 5;
  std::size_t frames = 8;
  std::size_t raw_size = 40;
  std::size_t crop_size = 32;
  std::size_t channels = 1;
  double noise = 0.05;
  double noisy_factor = 3.0;
  /// Draw z = sqrt(u) instead of u, which shifts labels toward 2 and 3.
  bool skew = false;
  std::uint64_t seed = 0;

  void validate() const;
  /// Pixel noise standard deviation for a scenario id.
  [[nodiscard]] double scenario_noise(int scenario) const { return scenario == 1 ? noise * noisy_factor : noise; }
  bool operator==(const SyntheticSpec&) const = default;
};

struct LabeledSample {
  Tensor views;  // [V, T_raw, C, H, W], values in [0, 1]
  int label = 0;
  int scenario = 0;
  std::vector<double> latent;
};

/// min(3, floor(4 mean(z))).
[[nodiscard]] int label_from_latent(std::span<const double> z);

/// Sample `index` of the stream defined by `spec.seed`. Independent of any
/// other index.
[[nodiscard]] LabeledSample generate_sample(const SyntheticSpec& spec, std::uint64_t index);

/// Raw samples with pixels stored as binary32, matching the file format.
struct Dataset {
  std::size_t views = 0;
  std::size_t frames = 0;
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> labels;
  std::vector<std::uint8_t> scenarios;
  std::vector<float> pixels;

  [[nodiscard]] std::size_t size() const noexcept { return labels.size(); }
  [[nodiscard]] std::size_t sample_numel() const noexcept { return views * frames * channels * height * width; }
  /// [V, T_raw, C, H, W]
  [[nodiscard]] Tensor sample(std::size_t i) const;
  [[nodiscard]] Dataset subset(std::span<const std::size_t> indices) const;

  bool operator==(const Dataset&) const = default;
};

/// Samples [first, first + n) of the stream. Work is split across `threads`
/// workers; the result does not depend on the thread count.
[[nodiscard]] Dataset generate(const SyntheticSpec& spec, std::size_t n, std::size_t threads = 1,
                               std::uint64_t first = 0);

void write_dataset(const std::string& path, const Dataset& data);
/// Throws DataError naming the byte offset of any malformed field.
[[nodiscard]] Dataset read_dataset(const std::string& path);

/// `target` indices spread evenly over [0, raw - 1], rounded to nearest.
/// A single target frame takes index 0.
[[nodiscard]] std::vector<std::size_t> sample_frames(std::size_t raw, std::size_t target);

enum class PixelCoding { unit, integer };

inline constexpr double kPixelMean = 0.45;
inline constexpr double kPixelStd = 0.225;

/// frames [T, C, H, W] -> [T, C, crop, crop]: center crop, rescale to [0, 1]
/// when integer-coded, then (x - 0.45) / 0.225. Unit-coded input outside
/// [0, 1] and integer-coded input outside {0..255} are DataErrors, which
/// also catches a second application.
[[nodiscard]] Tensor preprocess(const Tensor& frames, std::size_t crop, PixelCoding coding = PixelCoding::unit);

/// Model-ready clips: sampled frames, cropped and normalized.
struct PreparedData {
  std::size_t views = 0;
  std::size_t frames = 0;
  std::size_t channels = 0;
  std::size_t size_px = 0;
  std::vector<int> labels;
  std::vector<int> scenarios;
  std::vector<double> inputs;

  [[nodiscard]] std::size_t size() const noexcept { return labels.size(); }
  [[nodiscard]] std::size_t sample_numel() const noexcept { return views * frames * channels * size_px * size_px; }
  /// [B, V, T, C, S, S] for the listed samples.
  [[nodiscard]] Tensor batch(std::span<const std::size_t> indices) const;
  [[nodiscard]] std::vector<int> batch_labels(std::span<const std::size_t> indices) const;
  /// Keeps only the listed views, in the given order.
  [[nodiscard]] PreparedData select_views(std::span<const std::size_t> views) const;
};

[[nodiscard]] PreparedData prepare(const Dataset& data, std::size_t frames, std::size_t crop);

struct OracleResult {
  double accuracy = 0.0;
  double std_error = 0.0;
  std::size_t draws = 0;
};

/// Monte-Carlo accuracy of the Bayes-optimal classifier that sees the
/// latents of `observed` views exactly and nothing else. The hidden latents
/// are integrated under the generator's prior; ties go to the lowest class.
/// Pixel noise is ignored, so the estimate bounds any pixel-based model.
[[nodiscard]] OracleResult bayes_oracle(const SyntheticSpec& spec, std::span<const std::size_t> observed,
                                        std::size_t draws, std::uint64_t seed = 0);

/// Exact label distribution under the generator's prior.
[[nodiscard]] std::array<double, 4> class_prior(const SyntheticSpec& spec);

}  // namespace skillformer
