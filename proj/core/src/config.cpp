#include "skillformer/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "skillformer/error.hpp"

namespace skillformer {

namespace {

using Json = nlohmann::ordered_json;

std::string line_column(std::string_view text, std::size_t byte) {
  std::size_t line = 1, col = 1;
  for (std::size_t i = 0; i + 1 < byte && i < text.size(); ++i) {
    if (text[i] == '\n') {
      ++line;
      col = 1;
    } else {
      ++col;
    }
  }
  return "line " + std::to_string(line) + ", column " + std::to_string(col);
}

Json parse_json(std::string_view text, std::string_view source) {
  try {
    return Json::parse(text.begin(), text.end());
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string(source) + ": parse error at " + line_column(text, e.byte) + " (byte offset " +
                      std::to_string(e.byte) + "): " + e.what());
  }
}

std::string read_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Reads known keys from one JSON object and rejects everything else.
class Fields {
 public:
  Fields(const Json& obj, std::string path, std::string_view source)
      : obj_(obj), path_(std::move(path)), source_(source) {
    if (!obj_.is_object()) fail(path_.empty() ? "top level must be an object" : "'" + path_ + "' must be an object");
  }

  void get(const char* key, std::size_t& out) {
    if (const Json* v = find(key)) {
      if (!v->is_number_unsigned()) fail("'" + name(key) + "' must be a non-negative integer");
      out = v->get<std::size_t>();
    }
  }
  void get(const char* key, std::uint64_t& out, int) {
    if (const Json* v = find(key)) {
      if (!v->is_number_unsigned()) fail("'" + name(key) + "' must be a non-negative integer");
      out = v->get<std::uint64_t>();
    }
  }
  void get(const char* key, double& out) {
    if (const Json* v = find(key)) {
      if (!v->is_number()) fail("'" + name(key) + "' must be a number");
      out = v->get<double>();
    }
  }
  void get(const char* key, bool& out) {
    if (const Json* v = find(key)) {
      if (!v->is_boolean()) fail("'" + name(key) + "' must be true or false");
      out = v->get<bool>();
    }
  }
  void get(const char* key, std::string& out) {
    if (const Json* v = find(key)) {
      if (!v->is_string()) fail("'" + name(key) + "' must be a string");
      out = v->get<std::string>();
    }
  }
  const Json* child(const char* key) { return find(key); }

  /// Throws for any key that was not read.
  void finish() const {
    for (const auto& [key, value] : obj_.items()) {
      if (!seen_.count(key)) fail("unknown key '" + name(key.c_str()) + "'");
    }
  }

  [[noreturn]] void fail(const std::string& msg) const { throw ConfigError(std::string(source_) + ": " + msg); }
  [[nodiscard]] std::string name(const char* key) const { return path_.empty() ? key : path_ + "." + key; }

 private:
  const Json* find(const char* key) {
    seen_.insert(key);
    const auto it = obj_.find(key);
    return it == obj_.end() ? nullptr : &*it;
  }

  const Json& obj_;
  std::string path_;
  std::string_view source_;
  std::set<std::string> seen_;
};

void read_backbone(Fields& f, BackboneConfig& b) {
  f.get("image_size", b.image_size);
  f.get("patch_size", b.patch_size);
  f.get("channels", b.channels);
  f.get("embed_dim", b.embed_dim);
  f.get("depth", b.depth);
  f.get("heads", b.heads);
  f.get("mlp_ratio", b.mlp_ratio);
  f.get("pretrain_frames", b.pretrain_frames);
  f.get("ln_eps", b.ln_eps);
}

void read_fusion(Fields& f, FusionConfig& c) {
  f.get("hidden", c.hidden);
  f.get("out_dim", c.out_dim);
  f.get("heads", c.heads);
  f.get("dropout", c.dropout);
  f.get("eps", c.eps);
  f.get("ln_eps", c.ln_eps);
}

void read_model(Fields& f, SkillFormerConfig& m, std::string_view source) {
  f.get("views", m.views);
  f.get("frames", m.frames);
  f.get("lora_rank", m.lora_rank);
  f.get("lora_alpha", m.lora_alpha);
  f.get("num_classes", m.num_classes);
  if (const Json* b = f.child("backbone")) {
    Fields bf(*b, f.name("backbone"), source);
    read_backbone(bf, m.backbone);
    bf.finish();
  }
  if (const Json* c = f.child("fusion")) {
    Fields cf(*c, f.name("fusion"), source);
    read_fusion(cf, m.fusion);
    cf.finish();
  }
}

void read_train(Fields& f, TrainConfig& t) {
  f.get("epochs", t.epochs);
  f.get("batch_size", t.batch_size);
  f.get("lr", t.lr);
  f.get("weight_decay", t.weight_decay);
  f.get("beta1", t.beta1);
  f.get("beta2", t.beta2);
  f.get("adam_eps", t.adam_eps);
  f.get("seed", t.seed, 0);
  f.get("val_fraction", t.val_fraction);
}

Json backbone_json(const BackboneConfig& b) {
  return Json{{"image_size", b.image_size}, {"patch_size", b.patch_size}, {"channels", b.channels},
              {"embed_dim", b.embed_dim},   {"depth", b.depth},           {"heads", b.heads},
              {"mlp_ratio", b.mlp_ratio},   {"pretrain_frames", b.pretrain_frames}, {"ln_eps", b.ln_eps}};
}

Json fusion_json(const FusionConfig& c) {
  return Json{{"hidden", c.hidden},   {"out_dim", c.out_dim}, {"heads", c.heads},
              {"dropout", c.dropout}, {"eps", c.eps},         {"ln_eps", c.ln_eps}};
}

/// Desk-scale base shared by all presets.
RunConfig desk_base() {
  RunConfig cfg;
  cfg.model.preset = "desk";
  cfg.model.backbone = BackboneConfig{};
  cfg.model.views = 5;
  cfg.model.frames = 4;
  cfg.model.lora_rank = 8;
  cfg.model.lora_alpha = 16.0;
  cfg.model.fusion = FusionConfig{};
  cfg.model.fusion.hidden = 128;
  cfg.model.fusion.out_dim = 64;
  cfg.model.fusion.heads = 4;
  cfg.train = TrainConfig{};
  cfg.train.lr = 1e-3;
  return cfg;
}

/// Frames, rank, alpha, hidden width and learning rate of the three scaling
/// presets. Fusion output 768 with 16 heads throughout.
RunConfig scaled(const char* name, std::size_t views, std::size_t frames, std::size_t rank, double alpha,
                 std::size_t hidden, double lr) {
  RunConfig cfg = desk_base();
  cfg.model.preset = name;
  cfg.model.views = views;
  cfg.model.frames = frames;
  cfg.model.lora_rank = rank;
  cfg.model.lora_alpha = alpha;
  cfg.model.fusion.hidden = hidden;
  cfg.model.fusion.out_dim = 768;
  cfg.model.fusion.heads = 16;
  cfg.train.lr = lr;
  return cfg;
}

}  // namespace

const std::vector<std::string>& preset_names() {
  static const std::vector<std::string> names = {"Ego", "Exos", "EgoExos", "desk"};
  return names;
}

RunConfig preset(std::string_view name) {
  if (name == "desk") return desk_base();
  if (name == "Ego") return scaled("Ego", 1, 32, 32, 64.0, 1536, 5e-5);
  if (name == "Exos") return scaled("Exos", 4, 24, 48, 96.0, 2048, 3e-5);
  if (name == "EgoExos") return scaled("EgoExos", 5, 16, 64, 128.0, 2560, 2e-5);
  throw ConfigError("unknown preset '" + std::string(name) + "' (expected Ego, Exos, EgoExos or desk)");
}

RunConfig parse_run_config(std::string_view text, std::string_view source) {
  const Json root = parse_json(text, source);
  Fields top(root, "", source);
  std::string name = "desk";
  top.get("preset", name);
  RunConfig cfg = preset(name);
  if (const Json* m = top.child("model")) {
    Fields mf(*m, "model", source);
    read_model(mf, cfg.model, source);
    mf.finish();
  }
  if (const Json* t = top.child("train")) {
    Fields tf(*t, "train", source);
    read_train(tf, cfg.train);
    tf.finish();
  }
  top.finish();
  cfg.model.validate();
  cfg.train.validate();
  return cfg;
}

RunConfig load_run_config(const std::string& path) { return parse_run_config(read_file(path), path); }

std::string run_config_to_json(const RunConfig& cfg, int indent) {
  const SkillFormerConfig& m = cfg.model;
  const TrainConfig& t = cfg.train;
  Json j;
  j["preset"] = m.preset;
  j["model"] = Json{{"views", m.views},
                    {"frames", m.frames},
                    {"lora_rank", m.lora_rank},
                    {"lora_alpha", m.lora_alpha},
                    {"num_classes", m.num_classes},
                    {"backbone", backbone_json(m.backbone)},
                    {"fusion", fusion_json(m.fusion)}};
  j["train"] = Json{{"epochs", t.epochs}, {"batch_size", t.batch_size}, {"lr", t.lr},
                    {"weight_decay", t.weight_decay}, {"beta1", t.beta1}, {"beta2", t.beta2},
                    {"adam_eps", t.adam_eps}, {"seed", t.seed}, {"val_fraction", t.val_fraction}};
  return j.dump(indent);
}

SyntheticSpec parse_synthetic_spec(std::string_view text, std::string_view source) {
  const Json root = parse_json(text, source);
  Fields f(root, "", source);
  SyntheticSpec s;
  f.get("views", s.views);
  f.get("frames", s.frames);
  f.get("raw_size", s.raw_size);
  f.get("crop_size", s.crop_size);
  f.get("channels", s.channels);
  f.get("noise", s.noise);
  f.get("noisy_factor", s.noisy_factor);
  f.get("skew", s.skew);
  f.get("seed", s.seed, 0);
  f.finish();
  s.validate();
  return s;
}

SyntheticSpec load_synthetic_spec(const std::string& path) { return parse_synthetic_spec(read_file(path), path); }

std::string synthetic_spec_to_json(const SyntheticSpec& s, int indent) {
  const Json j{{"views", s.views},   {"frames", s.frames},       {"raw_size", s.raw_size},
               {"crop_size", s.crop_size}, {"channels", s.channels}, {"noise", s.noise},
               {"noisy_factor", s.noisy_factor}, {"skew", s.skew}, {"seed", s.seed}};
  return j.dump(indent);
}

}  // namespace skillformer
