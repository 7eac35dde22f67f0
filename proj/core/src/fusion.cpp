#include "skillformer/fusion.hpp"

#include "skillformer/error.hpp"

namespace skillformer {

void FusionConfig::validate(std::size_t in_dim) const {
  auto fail = [](const std::string& msg) { throw ConfigError("fusion: " + msg); };
  if (in_dim == 0) fail("input dim must be positive");
  if (heads == 0 || in_dim % heads != 0) {
    fail("input dim " + std::to_string(in_dim) + " is not divisible by " + std::to_string(heads) + " heads");
  }
  if (hidden == 0) fail("hidden must be positive");
  if (out_dim < 2) fail("out_dim must be at least 2, got " + std::to_string(out_dim));
  if (!(dropout >= 0.0 && dropout < 1.0)) fail("dropout must be in [0, 1)");
  if (!(eps >= 0.0) || !(ln_eps >= 0.0)) fail("eps must be non-negative");
}

CrossViewFusion CrossViewFusion::init(std::size_t in_dim, const FusionConfig& cfg, SplitMix64& rng) {
  cfg.validate(in_dim);
  FusionParams p{
      LayerNormParams::identity(in_dim),
      Dense::packed(Dense::xavier(in_dim, 3 * in_dim, rng)),
      Dense::xavier(in_dim, in_dim, rng),
      Dense::xavier(in_dim, cfg.hidden, rng),
      LayerNormParams::identity(cfg.hidden),
      Dense::xavier(cfg.hidden, cfg.hidden, rng),
      Dense::xavier(cfg.hidden, cfg.out_dim, rng),
      LayerNormParams::identity(cfg.out_dim),
      Tensor::zeros({cfg.out_dim}),
      Tensor::ones({cfg.out_dim}),
  };
  return CrossViewFusion(cfg, std::move(p));
}

CrossViewFusion::CrossViewFusion(FusionConfig cfg, FusionParams params) : cfg_(cfg), params_(std::move(params)) {
  const std::size_t d = params_.view_ln.weight.numel();
  cfg_.validate(d);
  auto expect = [](const Tensor& t, const Shape& s, const char* name) {
    if (t.shape() != s) {
      throw DimensionError(std::string("fusion.") + name + " has shape " + shape_to_string(t.shape()) +
                           ", expected " + shape_to_string(s));
    }
  };
  const std::size_t hid = cfg_.hidden, out = cfg_.out_dim;
  expect(params_.view_ln.bias, {d}, "view_ln.bias");
  expect(params_.attn_in.weight, {3 * d, d}, "attn.in_proj.weight");
  expect(params_.attn_in.bias, {3 * d}, "attn.in_proj.bias");
  expect(params_.attn_out.weight, {d, d}, "attn.out_proj.weight");
  expect(params_.attn_out.bias, {d}, "attn.out_proj.bias");
  expect(params_.w1.weight, {hid, d}, "w1.weight");
  expect(params_.w1.bias, {hid}, "w1.bias");
  expect(params_.w1_norm.weight, {hid}, "w1.norm.weight");
  expect(params_.w1_norm.bias, {hid}, "w1.norm.bias");
  expect(params_.gate.weight, {hid, hid}, "gate.weight");
  expect(params_.gate.bias, {hid}, "gate.bias");
  expect(params_.w2.weight, {out, hid}, "w2.weight");
  expect(params_.w2.bias, {out}, "w2.bias");
  expect(params_.w2_norm.weight, {out}, "w2.norm.weight");
  expect(params_.w2_norm.bias, {out}, "w2.norm.bias");
  expect(params_.mu_learn, {out}, "mu_learn");
  expect(params_.sigma_learn, {out}, "sigma_learn");
  FusionParams::visit(params_, "", [](const std::string&, Tensor& t) { t.set_requires_grad(true); });
}

Var CrossViewFusion::view_attend(Tape& tape, Var x) const {
  if (x.rank() != 3 || x.dim(2) != in_dim()) {
    throw DimensionError("fusion expects [B, V, " + std::to_string(in_dim()) + "], got " + shape_to_string(x.shape()));
  }
  Tape::Scope scope(tape, "fusion.attn");
  const Var normed = params_.view_ln.forward(tape, x, cfg_.ln_eps);
  const Var context = attention_context(params_.attn_in.forward(tape, normed), cfg_.heads);
  return params_.attn_out.forward(tape, context);
}

Var CrossViewFusion::aggregate_transform(Tape& tape, Var x_attn, SplitMix64* rng, bool training) const {
  Tape::Scope scope(tape, "fusion.w1");
  const Var pooled = mean(x_attn, 1);
  const Var proj = params_.w1.forward(tape, pooled);
  const Var normed = params_.w1_norm.forward(tape, gelu(proj), cfg_.ln_eps);
  return dropout(normed, cfg_.dropout, rng, training);
}

Var CrossViewFusion::gate(Tape& tape, Var h_hidden) const {
  Tape::Scope scope(tape, "fusion.gate");
  const Var g = sigmoid(params_.gate.forward(tape, h_hidden));
  return mul(g, h_hidden);
}

Var CrossViewFusion::calibrate(Tape& tape, Var h_gated) const {
  Tape::Scope scope(tape, "fusion.w2");
  const Var proj = params_.w2.forward(tape, h_gated);
  const Var normed = params_.w2_norm.forward(tape, proj, cfg_.ln_eps);
  const Var scaled = standardize(normed, cfg_.eps);
  return add(mul(scaled, tape.watch(params_.sigma_learn)), tape.watch(params_.mu_learn));
}

Var CrossViewFusion::fuse(Tape& tape, Var x, SplitMix64* rng, bool training) const {
  const Var attended = view_attend(tape, x);
  const Var hidden = aggregate_transform(tape, attended, rng, training);
  return calibrate(tape, gate(tape, hidden));
}

Tensor CrossViewFusion::fuse(const Tensor& x) const {
  Tape tape;
  return fuse(tape, tape.constant(x)).value();
}

}  // namespace skillformer
