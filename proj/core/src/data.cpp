#include "skillformer/data.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <thread>

#include "binary_io.hpp"
#include "skillformer/error.hpp"
#include "skillformer/rng.hpp"

namespace skillformer {

namespace {

constexpr char kDataMagic[4] = {'S', 'K', 'F', 'D'};
constexpr std::uint32_t kDataVersion = 1;

constexpr double kBackground = 0.1;
constexpr double kBlobSigma = 3.0;
constexpr double kOcclusionValue = 0.5;
constexpr std::size_t kOcclusionWidth = 6;

/// Reflects `p` into [lo, hi].
double bounce(double p, double lo, double hi) {
  const double span = hi - lo;
  double u = std::fmod(p - lo, 2.0 * span);
  if (u < 0.0) u += 2.0 * span;
  if (u > span) u = 2.0 * span - u;
  return lo + u;
}

}  // namespace

void SyntheticSpec::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("synthetic spec: " + msg); };
  if (views == 0) fail("views must be positive");
  if (frames == 0) fail("frames must be positive");
  if (channels == 0) fail("channels must be positive");
  if (crop_size == 0 || crop_size > raw_size) fail("crop_size must be in [1, raw_size]");
  if (crop_size < 2 * kOcclusionWidth) fail("crop_size too small for the occlusion bar");
  if (!(noise >= 0.0) || !(noisy_factor >= 0.0)) fail("noise levels must be non-negative");
}

int label_from_latent(std::span<const double> z) {
  double total = 0.0;
  for (const double v : z) total += v;
  const double m = total / static_cast<double>(z.size());
  return std::min(3, static_cast<int>(std::floor(4.0 * m)));
}

LabeledSample generate_sample(const SyntheticSpec& spec, std::uint64_t index) {
  spec.validate();
  SplitMix64 rng = SplitMix64::stream(spec.seed, index);
  const std::size_t v_count = spec.views, t_count = spec.frames, c_count = spec.channels, size = spec.raw_size;

  LabeledSample s;
  s.latent.resize(v_count);
  for (double& z : s.latent) {
    const double u = rng.uniform();
    z = spec.skew ? std::sqrt(u) : u;
  }
  s.label = label_from_latent(s.latent);
  s.scenario = static_cast<int>(index % kNumScenarios);
  const double sigma = spec.scenario_noise(s.scenario);

  // Keep the blob inside the central crop window.
  const double margin = static_cast<double>(size - spec.crop_size) / 2.0;
  const double lo = margin + kBlobSigma, hi = static_cast<double>(size) - 1.0 - margin - kBlobSigma;

  s.views = Tensor({v_count, t_count, c_count, size, size});
  double* px = s.views.data().data();
  for (std::size_t v = 0; v < v_count; ++v) {
    const double z = s.latent[v];
    const double amplitude = 0.15 + 0.8 * z;
    const double speed = 0.5 + 2.5 * z;
    const double angle = 2.0 * std::numbers::pi * rng.uniform();
    const double x0 = lo + (hi - lo) * rng.uniform();
    const double y0 = lo + (hi - lo) * rng.uniform();
    std::size_t bar = 0;
    if (s.scenario == 2) {
      bar = static_cast<std::size_t>(margin) +
            static_cast<std::size_t>(rng.below(spec.crop_size - kOcclusionWidth + 1));
    }
    for (std::size_t t = 0; t < t_count; ++t) {
      const double step = speed * static_cast<double>(t);
      const double cx = bounce(x0 + step * std::cos(angle), lo, hi);
      const double cy = bounce(y0 + step * std::sin(angle), lo, hi);
      for (std::size_t c = 0; c < c_count; ++c) {
        for (std::size_t y = 0; y < size; ++y) {
          const double dy = static_cast<double>(y) - cy;
          for (std::size_t x = 0; x < size; ++x) {
            const double dx = static_cast<double>(x) - cx;
            double value = kBackground + amplitude * std::exp(-(dx * dx + dy * dy) / (2.0 * kBlobSigma * kBlobSigma));
            if (s.scenario == 2 && x >= bar && x < bar + kOcclusionWidth) value = kOcclusionValue;
            value += sigma * rng.normal();
            *px++ = std::clamp(value, 0.0, 1.0);
          }
        }
      }
    }
  }
  return s;
}

Tensor Dataset::sample(std::size_t i) const {
  if (i >= size()) throw ContractError("sample index " + std::to_string(i) + " out of range");
  const std::size_t n = sample_numel();
  std::vector<double> values(pixels.begin() + static_cast<std::ptrdiff_t>(i * n),
                             pixels.begin() + static_cast<std::ptrdiff_t>((i + 1) * n));
  return Tensor({views, frames, channels, height, width}, std::move(values));
}

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
  Dataset out{views, frames, channels, height, width, {}, {}, {}};
  const std::size_t n = sample_numel();
  out.pixels.reserve(indices.size() * n);
  for (const std::size_t i : indices) {
    if (i >= size()) throw ContractError("sample index " + std::to_string(i) + " out of range");
    out.labels.push_back(labels[i]);
    out.scenarios.push_back(scenarios[i]);
    const auto first = pixels.begin() + static_cast<std::ptrdiff_t>(i * n);
    out.pixels.insert(out.pixels.end(), first, first + static_cast<std::ptrdiff_t>(n));
  }
  return out;
}

Dataset generate(const SyntheticSpec& spec, std::size_t n, std::size_t threads, std::uint64_t first) {
  spec.validate();
  if (n == 0) throw ConfigError("dataset size must be positive");
  Dataset data{spec.views, spec.frames, spec.channels, spec.raw_size, spec.raw_size, {}, {}, {}};
  data.labels.resize(n);
  data.scenarios.resize(n);
  const std::size_t per = data.sample_numel();
  data.pixels.resize(n * per);

  auto work = [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      const LabeledSample s = generate_sample(spec, first + i);
      data.labels[i] = static_cast<std::uint8_t>(s.label);
      data.scenarios[i] = static_cast<std::uint8_t>(s.scenario);
      float* dst = data.pixels.data() + i * per;
      for (const double v : s.views.data()) *dst++ = static_cast<float>(v);
    }
  };
  threads = std::clamp<std::size_t>(threads, 1, n);
  if (threads == 1) {
    work(0, n);
    return data;
  }
  std::vector<std::jthread> pool;
  for (std::size_t w = 0; w < threads; ++w) pool.emplace_back(work, n * w / threads, n * (w + 1) / threads);
  pool.clear();
  return data;
}

void write_dataset(const std::string& path, const Dataset& data) {
  if (data.labels.size() != data.scenarios.size() || data.pixels.size() != data.size() * data.sample_numel()) {
    throw ContractError("dataset fields are inconsistent");
  }
  io::Writer w;
  w.bytes(kDataMagic, 4);
  w.u32(kDataVersion);
  for (const std::size_t v : {data.views, data.frames, data.height, data.width, data.channels, data.size()}) {
    w.u32(static_cast<std::uint32_t>(v));
  }
  const std::size_t per = data.sample_numel();
  for (std::size_t i = 0; i < data.size(); ++i) {
    w.u8(data.labels[i]);
    w.u8(data.scenarios[i]);
    for (std::size_t j = 0; j < per; ++j) w.f32(data.pixels[i * per + j]);
  }
  w.save(path);
}

Dataset read_dataset(const std::string& path) {
  io::Reader r = io::Reader::load(path);
  char magic[4];
  r.bytes(magic, 4, "magic");
  if (std::memcmp(magic, kDataMagic, 4) != 0) r.fail_at(0, "not a dataset file (bad magic)");
  const std::size_t version_at = r.offset();
  const std::uint32_t version = r.u32("version");
  if (version != kDataVersion) r.fail_at(version_at, "unsupported dataset version " + std::to_string(version));
  Dataset data;
  data.views = r.u32("views");
  data.frames = r.u32("frames");
  data.height = r.u32("height");
  data.width = r.u32("width");
  data.channels = r.u32("channels");
  const std::size_t n = r.u32("sample count");
  if (data.views == 0 || data.frames == 0 || data.height == 0 || data.width == 0 || data.channels == 0) {
    r.fail("zero extent in header");
  }
  const std::size_t per = data.sample_numel();
  if (r.remaining() != n * (2 + 4 * per)) {
    r.fail("payload size " + std::to_string(r.remaining()) + " does not match " + std::to_string(n) + " samples");
  }
  data.labels.resize(n);
  data.scenarios.resize(n);
  data.pixels.resize(n * per);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t at = r.offset();
    data.labels[i] = r.u8("label");
    data.scenarios[i] = r.u8("scenario");
    if (data.labels[i] > 3) r.fail_at(at, "label " + std::to_string(data.labels[i]) + " out of range");
    if (data.scenarios[i] >= kNumScenarios) r.fail_at(at + 1, "unknown scenario id");
    for (std::size_t j = 0; j < per; ++j) data.pixels[i * per + j] = r.f32("pixel");
  }
  return data;
}

std::vector<std::size_t> sample_frames(std::size_t raw, std::size_t target) {
  if (raw == 0 || target == 0) throw ContractError("frame counts must be positive");
  std::vector<std::size_t> idx(target, 0);
  if (target == 1) return idx;
  for (std::size_t t = 0; t < target; ++t) {
    const double pos = static_cast<double>(t * (raw - 1)) / static_cast<double>(target - 1);
    idx[t] = static_cast<std::size_t>(std::lround(pos));
  }
  return idx;
}

Tensor preprocess(const Tensor& frames, std::size_t crop, PixelCoding coding) {
  if (frames.rank() != 4) throw DimensionError("frames must be [T, C, H, W], got " + shape_to_string(frames.shape()));
  const std::size_t t = frames.dim(0), c = frames.dim(1), h = frames.dim(2), w = frames.dim(3);
  if (crop == 0 || h < crop || w < crop) {
    throw DataError("frame " + std::to_string(h) + "x" + std::to_string(w) + " is smaller than crop " +
                    std::to_string(crop));
  }
  const double scale = coding == PixelCoding::integer ? 1.0 / 255.0 : 1.0;
  for (const double v : frames.data()) {
    const bool ok = coding == PixelCoding::integer ? (v >= 0.0 && v <= 255.0 && v == std::floor(v))
                                                   : (v >= 0.0 && v <= 1.0);
    if (!ok) {
      throw DataError("pixel value " + std::to_string(v) +
                      (coding == PixelCoding::integer ? " is not an integer in [0, 255]" : " outside [0, 1]") +
                      "; input may already be normalized");
    }
  }
  const std::size_t top = (h - crop) / 2, left = (w - crop) / 2;
  Tensor out({t, c, crop, crop});
  double* dst = out.data().data();
  for (std::size_t plane = 0; plane < t * c; ++plane) {
    const double* src = frames.data().data() + plane * h * w;
    for (std::size_t y = 0; y < crop; ++y) {
      const double* row = src + (top + y) * w + left;
      for (std::size_t x = 0; x < crop; ++x) *dst++ = (row[x] * scale - kPixelMean) / kPixelStd;
    }
  }
  return out;
}

Tensor PreparedData::batch(std::span<const std::size_t> indices) const {
  const std::size_t n = sample_numel();
  std::vector<double> values;
  values.reserve(indices.size() * n);
  for (const std::size_t i : indices) {
    if (i >= size()) throw ContractError("sample index " + std::to_string(i) + " out of range");
    const auto first = inputs.begin() + static_cast<std::ptrdiff_t>(i * n);
    values.insert(values.end(), first, first + static_cast<std::ptrdiff_t>(n));
  }
  return Tensor({indices.size(), views, frames, channels, size_px, size_px}, std::move(values));
}

std::vector<int> PreparedData::batch_labels(std::span<const std::size_t> indices) const {
  std::vector<int> out;
  out.reserve(indices.size());
  for (const std::size_t i : indices) out.push_back(labels.at(i));
  return out;
}

PreparedData PreparedData::select_views(std::span<const std::size_t> keep) const {
  PreparedData out{keep.size(), frames, channels, size_px, labels, scenarios, {}};
  const std::size_t clip = frames * channels * size_px * size_px;
  out.inputs.reserve(size() * keep.size() * clip);
  for (std::size_t i = 0; i < size(); ++i) {
    for (const std::size_t v : keep) {
      if (v >= views) throw ContractError("view " + std::to_string(v) + " out of range");
      const auto first = inputs.begin() + static_cast<std::ptrdiff_t>((i * views + v) * clip);
      out.inputs.insert(out.inputs.end(), first, first + static_cast<std::ptrdiff_t>(clip));
    }
  }
  return out;
}

PreparedData prepare(const Dataset& data, std::size_t frames, std::size_t crop) {
  const std::vector<std::size_t> idx = sample_frames(data.frames, frames);
  PreparedData out{data.views, frames, data.channels, crop, {}, {}, {}};
  out.inputs.reserve(data.size() * out.sample_numel());
  const std::size_t plane = data.channels * data.height * data.width;
  for (std::size_t i = 0; i < data.size(); ++i) {
    out.labels.push_back(data.labels[i]);
    out.scenarios.push_back(data.scenarios[i]);
    for (std::size_t v = 0; v < data.views; ++v) {
      Tensor clip({frames, data.channels, data.height, data.width});
      for (std::size_t t = 0; t < frames; ++t) {
        const float* src = data.pixels.data() + ((i * data.views + v) * data.frames + idx[t]) * plane;
        std::copy(src, src + plane, clip.data().begin() + static_cast<std::ptrdiff_t>(t * plane));
      }
      const Tensor ready = preprocess(clip, crop);
      out.inputs.insert(out.inputs.end(), ready.data().begin(), ready.data().end());
    }
  }
  return out;
}

}  // namespace skillformer
