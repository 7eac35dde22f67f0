#include "skillformer/diagnostics.hpp"

#include "skillformer/backbone.hpp"
#include "skillformer/fusion.hpp"

namespace skillformer {

namespace {

Var weighted_sum(Tape& tape, Var out, const Tensor& weights) { return sum(mul(out, tape.constant(weights))); }

void jitter(Tensor& t, SplitMix64& rng, double stddev) {
  for (double& v : t.data()) v += stddev * rng.normal();
}

template <typename Module>
std::vector<CheckedTensor> checked_parameters(Module& m, const std::string& prefix) {
  std::vector<CheckedTensor> out;
  m.for_each_parameter(prefix, [&](const std::string& name, Tensor& t) { out.push_back({name, &t}); });
  return out;
}

GradCheckReport run(const LossBuilder& loss, const std::vector<CheckedTensor>& tensors, std::size_t max_entries,
                    std::uint64_t seed) {
  GradCheckOptions opt;
  opt.max_entries_per_tensor = max_entries;
  opt.seed = seed;
  return grad_check(loss, tensors, opt);
}

GradCheckReport check_linear(SplitMix64& rng, std::size_t max_entries) {
  Dense layer = Dense::normal(5, 4, 0.5, rng);
  jitter(layer.bias, rng, 0.5);
  Tensor x = Tensor::normal({3, 5}, rng, 1.0);
  const Tensor r = Tensor::normal({3, 4}, rng, 1.0);
  auto tensors = checked_parameters(layer, "linear");
  tensors.push_back({"x", &x});
  return run([&](Tape& t) { return weighted_sum(t, layer.forward(t, t.watch(x)), r); }, tensors, max_entries,
             rng.next());
}

GradCheckReport check_attention(SplitMix64& rng, std::size_t heads, std::size_t max_entries) {
  const std::size_t d = 6;
  Dense in_proj = Dense::packed(Dense::normal(d, 3 * d, 0.5, rng));
  Dense out_proj = Dense::normal(d, d, 0.5, rng);
  jitter(in_proj.bias, rng, 0.2);
  jitter(out_proj.bias, rng, 0.2);
  Tensor x = Tensor::normal({2, 4, d}, rng, 1.0);
  const Tensor r = Tensor::normal({2, 4, d}, rng, 1.0);
  auto tensors = checked_parameters(in_proj, "in_proj");
  for (auto& c : checked_parameters(out_proj, "out_proj")) tensors.push_back(c);
  tensors.push_back({"x", &x});
  return run(
      [&](Tape& t) {
        const Var ctx = attention_context(in_proj.forward(t, t.watch(x)), heads);
        return weighted_sum(t, out_proj.forward(t, ctx), r);
      },
      tensors, max_entries, rng.next());
}

GradCheckReport check_block(SplitMix64& rng, std::size_t max_entries) {
  BackboneConfig cfg;
  cfg.image_size = 8;
  cfg.patch_size = 4;
  cfg.embed_dim = 8;
  cfg.depth = 1;
  cfg.heads = 2;
  cfg.mlp_ratio = 2;
  DividedBlock block = DividedBlock::init(cfg, rng);
  for (AdaptableLinear* layer : block.dense_layers()) {
    layer->wrap(2, 4.0, rng);
    jitter(layer->adapter().lora_b(), rng, 0.1);
  }
  DividedBlock::visit(block, "", [&](const std::string& name, Tensor& t) {
    if (name.find("norm") != std::string::npos) jitter(t, rng, 0.1);
  });
  Tensor x = Tensor::normal({2, 3, cfg.num_patches() + 1, cfg.embed_dim}, rng, 1.0);
  const Tensor r = Tensor::normal(x.shape(), rng, 1.0);
  std::vector<CheckedTensor> tensors;
  DividedBlock::visit(block, "block", [&](const std::string& name, Tensor& t) { tensors.push_back({name, &t}); });
  tensors.push_back({"tokens", &x});
  return run([&](Tape& t) { return weighted_sum(t, block.forward(t, t.watch(x), cfg.heads, cfg.ln_eps), r); },
             tensors, max_entries, rng.next());
}

GradCheckReport check_lora(SplitMix64& rng, std::size_t max_entries) {
  LoraLinear layer = LoraLinear::wrap(Dense::normal(6, 5, 0.5, rng), 2, 4.0, rng);
  jitter(layer.lora_b(), rng, 0.5);
  jitter(layer.lora_a(), rng, 0.5);
  Tensor x = Tensor::normal({3, 6}, rng, 1.0);
  const Tensor r = Tensor::normal({3, 5}, rng, 1.0);
  auto tensors = checked_parameters(layer, "lora");
  tensors.push_back({"x", &x});
  return run([&](Tape& t) { return weighted_sum(t, layer.forward(t, t.watch(x)), r); }, tensors, max_entries,
             rng.next());
}

GradCheckReport check_fusion(const SkillFormerConfig& cfg, SplitMix64& rng, std::size_t max_entries) {
  CrossViewFusion fusion = CrossViewFusion::init(cfg.backbone.embed_dim, cfg.fusion, rng);
  fusion.for_each_parameter("", [&](const std::string&, Tensor& t) {
    if (t.rank() == 1) jitter(t, rng, 0.1);
  });
  Tensor x = Tensor::normal({2, cfg.views, cfg.backbone.embed_dim}, rng, 1.0);
  const Tensor r = Tensor::normal({2, cfg.fusion.out_dim}, rng, 1.0);
  auto tensors = checked_parameters(fusion, "fusion");
  tensors.push_back({"x", &x});
  return run([&](Tape& t) { return weighted_sum(t, fusion.fuse(t, t.watch(x)), r); }, tensors, max_entries,
             rng.next());
}

GradCheckReport check_cross_entropy(SplitMix64& rng, std::size_t max_entries) {
  Tensor logits = Tensor::normal({5, kNumClasses}, rng, 2.0);
  std::vector<int> labels(5);
  for (int& y : labels) y = static_cast<int>(rng.below(kNumClasses));
  const std::vector<CheckedTensor> tensors = {{"logits", &logits}};
  return run([&](Tape& t) { return cross_entropy(t.watch(logits), labels); }, tensors, max_entries, rng.next());
}

}  // namespace

std::vector<GradcheckCase> run_gradcheck_suite(const SkillFormerConfig& cfg, std::uint64_t seed,
                                               std::size_t max_entries) {
  cfg.validate();
  std::vector<GradcheckCase> out;
  std::uint64_t index = 0;
  auto next = [&] { return SplitMix64::stream(seed, index++); };
  {
    SplitMix64 rng = next();
    out.push_back({"linear", check_linear(rng, max_entries)});
  }
  {
    SplitMix64 rng = next();
    out.push_back({"attention_1head", check_attention(rng, 1, max_entries)});
  }
  {
    SplitMix64 rng = next();
    out.push_back({"attention_3head", check_attention(rng, 3, max_entries)});
  }
  {
    SplitMix64 rng = next();
    out.push_back({"divided_block", check_block(rng, max_entries)});
  }
  {
    SplitMix64 rng = next();
    out.push_back({"lora", check_lora(rng, max_entries)});
  }
  {
    SplitMix64 rng = next();
    out.push_back({"fusion", check_fusion(cfg, rng, max_entries)});
  }
  {
    SplitMix64 rng = next();
    out.push_back({"cross_entropy", check_cross_entropy(rng, max_entries)});
  }
  return out;
}

}  // namespace skillformer
