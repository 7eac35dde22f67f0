#include "skillformer/layers.hpp"

#include <algorithm>
#include <cmath>

#include "skillformer/error.hpp"

namespace skillformer {

Dense Dense::zeros(std::size_t in_features, std::size_t out_features) {
  return Dense{Tensor::zeros({out_features, in_features}), Tensor::zeros({out_features})};
}

Dense Dense::normal(std::size_t in_features, std::size_t out_features, double stddev, SplitMix64& rng) {
  return Dense{Tensor::normal({out_features, in_features}, rng, stddev), Tensor::zeros({out_features})};
}

Dense Dense::xavier(std::size_t in_features, std::size_t out_features, SplitMix64& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(in_features + out_features));
  return Dense{Tensor::uniform({out_features, in_features}, rng, -bound, bound), Tensor::zeros({out_features})};
}

Dense Dense::packed(Dense layer) {
  if (layer.out_features() % 3 != 0) {
    throw ConfigError("packed q|k|v projection needs a multiple of 3 outputs, got " +
                      std::to_string(layer.out_features()));
  }
  layer.packed_qkv = true;
  return layer;
}

Var Dense::forward(Tape& tape, Var x) const {
  if (!packed_qkv) return linear(x, tape.watch(weight), tape.watch(bias));
  const std::size_t third = bias.numel() / 3;
  Tensor mask(bias.shape(), 1.0);
  std::fill_n(mask.data().begin() + third, third, 0.0);
  return linear(x, tape.watch(weight), mul(tape.watch(bias), tape.constant(std::move(mask))));
}

void Dense::set_trainable(bool trainable) {
  weight.set_requires_grad(trainable);
  bias.set_requires_grad(trainable);
}

LayerNormParams LayerNormParams::identity(std::size_t features) {
  return LayerNormParams{Tensor::ones({features}), Tensor::zeros({features})};
}

Var LayerNormParams::forward(Tape& tape, Var x, double eps) const {
  return layer_norm(x, tape.watch(weight), tape.watch(bias), eps);
}

void LayerNormParams::set_trainable(bool trainable) {
  weight.set_requires_grad(trainable);
  bias.set_requires_grad(trainable);
}

Var attention_context(Var qkv, std::size_t heads) {
  const Shape& s = qkv.shape();
  if (s.size() != 3 || s[2] % 3 != 0) {
    throw DimensionError("attention: packed projections must be [G, L, 3d], got " + shape_to_string(s));
  }
  const std::size_t groups = s[0], length = s[1], model = s[2] / 3;
  if (heads == 0 || model % heads != 0) {
    throw ConfigError("attention: model dim " + std::to_string(model) + " is not divisible by " +
                      std::to_string(heads) + " heads");
  }
  const std::size_t head_dim = model / heads;
  const std::size_t gh = groups * heads;

  Var split = reshape(qkv, {groups, length, 3, heads, head_dim});
  split = permute(split, {2, 0, 3, 1, 4});
  split = reshape(split, {3 * gh, length, head_dim});
  const Var q = slice(split, 0, 0, gh);
  const Var k = slice(split, 0, gh, gh);
  const Var v = slice(split, 0, 2 * gh, gh);

  const Var scores = scale(bmm(q, k, /*transpose_b=*/true), 1.0 / std::sqrt(static_cast<double>(head_dim)));
  const Var weights = softmax(scores);
  Var context = bmm(weights, v);
  context = reshape(context, {groups, heads, length, head_dim});
  context = permute(context, {0, 2, 1, 3});
  return reshape(context, {groups, length, model});
}

}  // namespace skillformer
