#include "skillformer/backbone.hpp"

#include <cmath>

#include "skillformer/error.hpp"

namespace skillformer {

namespace {

constexpr double kEmbedStd = 0.02;

}  // namespace

void BackboneConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("backbone: " + msg); };
  if (patch_size == 0 || image_size == 0) fail("image_size and patch_size must be positive");
  if (image_size % patch_size != 0) {
    fail("image_size " + std::to_string(image_size) + " is not divisible by patch_size " + std::to_string(patch_size));
  }
  if (channels == 0) fail("channels must be positive");
  if (embed_dim == 0 || heads == 0 || embed_dim % heads != 0) {
    fail("embed_dim " + std::to_string(embed_dim) + " is not divisible by heads " + std::to_string(heads));
  }
  if (depth == 0) fail("depth must be positive");
  if (mlp_ratio == 0) fail("mlp_ratio must be positive");
  if (pretrain_frames == 0) fail("pretrain_frames must be positive");
  if (!(ln_eps >= 0.0)) fail("ln_eps must be non-negative");
}

Tensor interpolate_time_embeddings(const Tensor& table, std::size_t target) {
  if (table.rank() != 2) throw DimensionError("time embeddings must be [T0, d], got " + shape_to_string(table.shape()));
  if (target == 0) throw ConfigError("target frame count must be positive");
  const std::size_t t0 = table.dim(0), d = table.dim(1);
  if (target == t0) return Tensor(table.shape(), table.storage());

  Tensor out({target, d});
  for (std::size_t t = 0; t < target; ++t) {
    const double coord =
        target == 1 ? 0.0 : static_cast<double>(t * (t0 - 1)) / static_cast<double>(target - 1);
    std::size_t lo = static_cast<std::size_t>(std::floor(coord));
    if (lo >= t0 - 1) lo = t0 - 1;
    const double frac = coord - static_cast<double>(lo);
    const double* a = table.data().data() + lo * d;
    double* dst = out.data().data() + t * d;
    if (frac == 0.0) {
      std::copy(a, a + d, dst);
      continue;
    }
    const double* b = a + d;
    for (std::size_t j = 0; j < d; ++j) dst[j] = a[j] + frac * (b[j] - a[j]);
  }
  return out;
}

Tensor extract_patches(const Tensor& clips, std::size_t p) {
  if (clips.rank() != 5) throw DimensionError("clips must be [M, T, C, H, W], got " + shape_to_string(clips.shape()));
  const std::size_t m = clips.dim(0), t = clips.dim(1), c = clips.dim(2), h = clips.dim(3), w = clips.dim(4);
  if (p == 0 || h % p != 0 || w % p != 0) {
    throw ConfigError("frame " + std::to_string(h) + "x" + std::to_string(w) + " is not divisible by patch size " +
                      std::to_string(p));
  }
  const std::size_t gy = h / p, gx = w / p, pd = c * p * p;
  Tensor out({m, t, gy * gx, pd});
  const double* src = clips.data().data();
  double* dst = out.data().data();
  for (std::size_t f = 0; f < m * t; ++f) {
    const double* frame = src + f * c * h * w;
    for (std::size_t by = 0; by < gy; ++by) {
      for (std::size_t bx = 0; bx < gx; ++bx) {
        for (std::size_t ch = 0; ch < c; ++ch) {
          for (std::size_t py = 0; py < p; ++py) {
            const double* row = frame + (ch * h + by * p + py) * w + bx * p;
            dst = std::copy(row, row + p, dst);
          }
        }
      }
    }
  }
  return out;
}

DividedBlock DividedBlock::init(const BackboneConfig& cfg, SplitMix64& rng) {
  const std::size_t d = cfg.embed_dim, hidden = d * cfg.mlp_ratio;
  DividedBlock b{
      LayerNormParams::identity(d),
      AdaptableLinear(Dense::packed(Dense::xavier(d, 3 * d, rng))),
      AdaptableLinear(Dense::xavier(d, d, rng)),
      LayerNormParams::identity(d),
      AdaptableLinear(Dense::packed(Dense::xavier(d, 3 * d, rng))),
      AdaptableLinear(Dense::xavier(d, d, rng)),
      LayerNormParams::identity(d),
      AdaptableLinear(Dense::xavier(d, hidden, rng)),
      AdaptableLinear(Dense::xavier(hidden, d, rng)),
  };
  return b;
}

Var DividedBlock::forward(Tape& tape, Var x, std::size_t heads, double eps) const {
  const std::size_t m = x.dim(0), t = x.dim(1), l = x.dim(2), d = x.dim(3);
  {
    Tape::Scope scope(tape, "temporal");
    Var h = permute(temporal_norm.forward(tape, x, eps), {0, 2, 1, 3});
    h = reshape(h, {m * l, t, d});
    h = temporal_proj.forward(tape, attention_context(temporal_qkv.forward(tape, h), heads));
    h = permute(reshape(h, {m, l, t, d}), {0, 2, 1, 3});
    x = add(x, h);
  }
  {
    Tape::Scope scope(tape, "spatial");
    Var h = reshape(spatial_norm.forward(tape, x, eps), {m * t, l, d});
    h = spatial_proj.forward(tape, attention_context(spatial_qkv.forward(tape, h), heads));
    x = add(x, reshape(h, {m, t, l, d}));
  }
  {
    Tape::Scope scope(tape, "mlp");
    const Var h = fc2.forward(tape, gelu(fc1.forward(tape, mlp_norm.forward(tape, x, eps))));
    x = add(x, h);
  }
  return x;
}

std::vector<AdaptableLinear*> DividedBlock::dense_layers() {
  return {&temporal_qkv, &temporal_proj, &spatial_qkv, &spatial_proj, &fc1, &fc2};
}

Backbone Backbone::init(const BackboneConfig& cfg, SplitMix64& rng) {
  cfg.validate();
  Backbone bb;
  bb.cfg_ = cfg;
  const std::size_t d = cfg.embed_dim;
  bb.patch_proj_ = Dense::xavier(cfg.patch_dim(), d, rng);
  bb.cls_token_ = Tensor::normal({d}, rng, kEmbedStd);
  bb.pos_embed_ = Tensor::normal({cfg.num_patches() + 1, d}, rng, kEmbedStd);
  bb.time_embed_ = Tensor::normal({cfg.pretrain_frames, d}, rng, kEmbedStd);
  for (std::size_t l = 0; l < cfg.depth; ++l) bb.blocks_.push_back(DividedBlock::init(cfg, rng));
  bb.norm_ = LayerNormParams::identity(d);
  return bb;
}

Var Backbone::patch_embed(Tape& tape, const Tensor& clips) const {
  if (clips.rank() != 5 || clips.dim(2) != cfg_.channels || clips.dim(3) != cfg_.image_size ||
      clips.dim(4) != cfg_.image_size) {
    throw DimensionError("backbone expects clips [M, T, " + std::to_string(cfg_.channels) + ", " +
                         std::to_string(cfg_.image_size) + ", " + std::to_string(cfg_.image_size) + "], got " +
                         shape_to_string(clips.shape()));
  }
  Tape::Scope scope(tape, "patch_embed");
  const Var patches = tape.constant(extract_patches(clips, cfg_.patch_size));
  const Var tokens = patch_proj_.forward(tape, patches);
  return add(tokens, slice(tape.watch(pos_embed_), 0, 1, cfg_.num_patches()));
}

Var Backbone::encode(Tape& tape, const Tensor& clips) const {
  const Var patches = patch_embed(tape, clips);
  const std::size_t m = clips.dim(0), t = clips.dim(1), d = cfg_.embed_dim;

  Var x;
  {
    Tape::Scope scope(tape, "embed");
    const Var cls = add(tape.watch(cls_token_), reshape(slice(tape.watch(pos_embed_), 0, 0, 1), {d}));
    const Var cls_tokens = add(tape.constant(Tensor::zeros({m, t, 1, d})), cls);
    const Var parts[] = {cls_tokens, patches};
    x = concat(parts, 2);
    const Tensor time = interpolate_time_embeddings(time_embed_, t);
    x = add(x, tape.constant(time.reshaped({t, 1, d})));
  }
  for (std::size_t l = 0; l < blocks_.size(); ++l) {
    Tape::Scope scope(tape, "blocks." + std::to_string(l));
    x = blocks_[l].forward(tape, x, cfg_.heads, cfg_.ln_eps);
  }
  Tape::Scope scope(tape, "readout");
  Var cls = reshape(slice(x, 2, 0, 1), {m, t, d});
  cls = norm_.forward(tape, cls, cfg_.ln_eps);
  return mean(cls, 1);
}

Tensor Backbone::encode_video(const Tensor& clip) const {
  if (clip.rank() != 4) throw DimensionError("clip must be [T, C, H, W], got " + shape_to_string(clip.shape()));
  Shape batched = clip.shape();
  batched.insert(batched.begin(), 1);
  Tape tape;
  const Var f = encode(tape, clip.reshaped(batched));
  return f.value().reshaped({cfg_.embed_dim});
}

void Backbone::apply_lora(std::size_t rank, double alpha, SplitMix64& rng) {
  for (auto& block : blocks_) {
    for (AdaptableLinear* layer : block.dense_layers()) layer->wrap(rank, alpha, rng);
  }
}

void Backbone::merge_lora() {
  for (auto& block : blocks_) {
    for (AdaptableLinear* layer : block.dense_layers()) layer->merge();
  }
}

bool Backbone::adapted() const {
  for (const auto& block : blocks_) {
    if (block.temporal_qkv.adapted()) return true;
  }
  return false;
}

}  // namespace skillformer
