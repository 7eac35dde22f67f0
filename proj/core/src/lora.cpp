#include "skillformer/lora.hpp"

#include <algorithm>

#include "kernels.hpp"
#include "skillformer/error.hpp"

namespace skillformer {

LoraLinear LoraLinear::wrap(Dense base, std::size_t rank, double alpha, SplitMix64& rng) {
  const std::size_t in = base.in_features(), out = base.out_features();
  if (rank < 1 || rank > std::min(in, out)) {
    throw ConfigError("LoRA rank " + std::to_string(rank) + " outside [1, " + std::to_string(std::min(in, out)) +
                      "] for a " + std::to_string(in) + "->" + std::to_string(out) + " layer");
  }
  Tensor a = Tensor::normal({rank, in}, rng, kInitStd);
  Tensor b = Tensor::zeros({out, rank});
  return LoraLinear(std::move(base), std::move(a), std::move(b), alpha);
}

LoraLinear::LoraLinear(Dense base, Tensor lora_a, Tensor lora_b, double alpha)
    : base_(std::move(base)), a_(std::move(lora_a)), b_(std::move(lora_b)), alpha_(alpha) {
  const std::size_t in = base_.in_features(), out = base_.out_features();
  if (a_.rank() != 2 || b_.rank() != 2 || a_.dim(1) != in || b_.dim(0) != out || b_.dim(1) != a_.dim(0)) {
    throw DimensionError("LoRA factors " + shape_to_string(a_.shape()) + " / " + shape_to_string(b_.shape()) +
                         " do not fit a " + std::to_string(in) + "->" + std::to_string(out) + " layer");
  }
  if (a_.dim(0) > std::min(in, out)) {
    throw ConfigError("LoRA rank " + std::to_string(a_.dim(0)) + " exceeds min(in, out)");
  }
  base_.set_trainable(false);
  a_.set_requires_grad(true);
  b_.set_requires_grad(true);
}

Var LoraLinear::forward(Tape& tape, Var x) const {
  const Var base_out = base_.forward(tape, x);
  const Var down = linear(x, tape.watch(a_));
  const Var up = linear(down, tape.watch(b_));
  return add(base_out, skillformer::scale(up, scale()));
}

Dense LoraLinear::merge() const {
  const std::size_t in = base_.in_features(), out = base_.out_features(), r = rank();
  std::vector<double> delta(out * in);
  kernels::gemm(out, in, r, b_.data().data(), r, a_.data().data(), in, delta.data(), in, false);
  Dense merged = base_;
  const double s = scale();
  for (std::size_t i = 0; i < delta.size(); ++i) merged.weight[i] += s * delta[i];
  merged.set_trainable(false);
  return merged;
}

Var AdaptableLinear::forward(Tape& tape, Var x) const {
  return std::visit([&](const auto& layer) { return layer.forward(tape, x); }, impl_);
}

void AdaptableLinear::wrap(std::size_t rank, double alpha, SplitMix64& rng) {
  if (adapted()) throw ContractError("layer already carries an adapter");
  impl_ = LoraLinear::wrap(std::get<Dense>(std::move(impl_)), rank, alpha, rng);
}

void AdaptableLinear::merge() {
  if (adapted()) impl_ = std::get<LoraLinear>(impl_).merge();
}

const Dense& AdaptableLinear::base() const {
  return adapted() ? std::get<LoraLinear>(impl_).base() : std::get<Dense>(impl_);
}

Dense& AdaptableLinear::dense() {
  if (adapted()) throw ContractError("layer carries an adapter; its base is read-only");
  return std::get<Dense>(impl_);
}

LoraLinear& AdaptableLinear::adapter() {
  if (!adapted()) throw ContractError("layer has no adapter");
  return std::get<LoraLinear>(impl_);
}

const LoraLinear& AdaptableLinear::adapter() const {
  if (!adapted()) throw ContractError("layer has no adapter");
  return std::get<LoraLinear>(impl_);
}

}  // namespace skillformer
