#include "drl/config.hpp"

#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "drl/error.hpp"
#include "drl/rng.hpp"
#include "drl/tensor.hpp"

namespace drl {

using nlohmann::json;

namespace {

void reject_unknown(const json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!allowed.count(it.key())) throw ConfigError(where + ": unknown key '" + it.key() + "'");
}

template <typename T>
void read(const json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(where + "." + key + ": " + e.what());
  }
}

json optimizer_json(const OptimizerConfig& o) {
  return {{"base_lr", o.base_lr},
          {"momentum", o.momentum},
          {"weight_decay", o.weight_decay},
          {"epochs", o.epochs},
          {"batch_size", o.batch_size}};
}

OptimizerConfig optimizer_from(const json& j, OptimizerConfig o, const std::string& where) {
  reject_unknown(j, {"base_lr", "momentum", "weight_decay", "epochs", "batch_size"}, where);
  read(j, "base_lr", o.base_lr, where);
  read(j, "momentum", o.momentum, where);
  read(j, "weight_decay", o.weight_decay, where);
  read(j, "epochs", o.epochs, where);
  read(j, "batch_size", o.batch_size, where);
  return o;
}

json to_json_value(const RunConfig& c) {
  const auto& b = c.backbone;
  const auto& s = c.stream;
  const auto& d = c.loss.das;
  json loss = {{"kind", to_string(c.loss.kind)},
               {"k", d.k},
               {"lambda_p", d.lambda_p},
               {"lambda_n", d.lambda_n},
               {"alpha", c.loss.alpha},
               {"cosface_margin", c.loss.cosface_margin}};
  loss["k_plus"] = d.k_plus ? json(*d.k_plus) : json(nullptr);
  loss["k_minus"] = d.k_minus ? json(*d.k_minus) : json(nullptr);
  return {{"method", to_string(c.method)},
          {"backbone",
           {{"image_side", b.image_side},
            {"patch_side", b.patch_side},
            {"embed_dim", b.embed_dim},
            {"heads", b.heads},
            {"blocks", b.blocks},
            {"ffn_hidden", b.ffn_hidden}}},
          {"stream",
           {{"base_classes", s.base_classes},
            {"incremental_classes", s.incremental_classes},
            {"inc_n", s.inc_n},
            {"train_per_class", s.train_per_class},
            {"test_per_class", s.test_per_class},
            {"noise_sigma", s.noise_sigma},
            {"image_side", s.image_side},
            {"data_root", c.data_root}}},
          {"ipa",
           {{"fusion", to_string(c.ipa.fusion)},
            {"attention", to_string(c.ipa.attention)},
            {"reuse", to_string(c.ipa.reuse)},
            {"gamma", c.ipa.gamma},
            {"bottleneck", c.ipa.bottleneck}}},
          {"loss", loss},
          {"tau", c.tau},
          {"optimizer", optimizer_json(c.optimizer)},
          {"pretrain", optimizer_json(c.pretrain)},
          {"seed", c.seed},
          {"output_dir", c.output_dir}};
}

}  // namespace

Method parse_method(const std::string& s) {
  if (s == "drl") return Method::drl;
  if (s == "finetune") return Method::finetune;
  throw ConfigError("unknown method '" + s + "'");
}

std::string to_string(Method m) { return m == Method::drl ? "drl" : "finetune"; }

void RunConfig::validate() const {
  backbone.validate();
  stream.validate();
  if (stream.image_side != backbone.image_side)
    throw ConfigError("stream image_side " + std::to_string(stream.image_side) + " differs from backbone " +
                      std::to_string(backbone.image_side));
  ipa.validate(backbone.embed_dim);
  loss.das.validate();
  if (!(loss.alpha >= 0.0)) throw ConfigError("alpha must be non-negative");
  if (!(loss.cosface_margin >= 0.0)) throw ConfigError("cosface_margin must be non-negative");
  if (!(tau > 0.0)) throw ConfigError("tau must be positive");
  optimizer.validate();
  pretrain.validate();
  if (output_dir.empty()) throw ConfigError("output_dir must not be empty");
}

StageConfig RunConfig::stage_config() const {
  StageConfig s;
  s.ipa = ipa;
  s.loss = loss;
  s.optimizer = optimizer;
  s.seed = mix_seed(seed, 0x57A6E);
  return s;
}

PretrainConfig RunConfig::pretrain_config() const {
  PretrainConfig p;
  p.optimizer = pretrain;
  p.seed = mix_seed(seed, 0x9BE7);
  return p;
}

bool RunConfig::operator==(const RunConfig& o) const { return to_json_value(*this) == to_json_value(o); }

std::string to_json(const RunConfig& config, int indent) { return to_json_value(config).dump(indent); }

RunConfig config_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: invalid JSON: ") + e.what());
  }
  reject_unknown(j, {"method", "backbone", "stream", "ipa", "loss", "tau", "optimizer", "pretrain", "seed",
                     "output_dir"},
                 "config");
  RunConfig c;
  if (j.contains("method")) c.method = parse_method(j.at("method").get<std::string>());
  if (j.contains("backbone")) {
    const json& b = j.at("backbone");
    const std::string w = "backbone";
    reject_unknown(b, {"image_side", "patch_side", "embed_dim", "heads", "blocks", "ffn_hidden"}, w);
    read(b, "image_side", c.backbone.image_side, w);
    read(b, "patch_side", c.backbone.patch_side, w);
    read(b, "embed_dim", c.backbone.embed_dim, w);
    read(b, "heads", c.backbone.heads, w);
    read(b, "blocks", c.backbone.blocks, w);
    read(b, "ffn_hidden", c.backbone.ffn_hidden, w);
  }
  if (j.contains("stream")) {
    const json& s = j.at("stream");
    const std::string w = "stream";
    reject_unknown(s, {"base_classes", "incremental_classes", "inc_n", "train_per_class", "test_per_class",
                       "noise_sigma", "image_side", "data_root"},
                   w);
    read(s, "base_classes", c.stream.base_classes, w);
    read(s, "incremental_classes", c.stream.incremental_classes, w);
    read(s, "inc_n", c.stream.inc_n, w);
    read(s, "train_per_class", c.stream.train_per_class, w);
    read(s, "test_per_class", c.stream.test_per_class, w);
    read(s, "noise_sigma", c.stream.noise_sigma, w);
    read(s, "image_side", c.stream.image_side, w);
    read(s, "data_root", c.data_root, w);
  }
  if (j.contains("ipa")) {
    const json& p = j.at("ipa");
    const std::string w = "ipa";
    reject_unknown(p, {"fusion", "attention", "reuse", "gamma", "bottleneck"}, w);
    if (p.contains("fusion")) c.ipa.fusion = parse_fusion_mode(p.at("fusion").get<std::string>());
    if (p.contains("attention")) c.ipa.attention = parse_attention_mode(p.at("attention").get<std::string>());
    if (p.contains("reuse")) c.ipa.reuse = parse_attention_reuse(p.at("reuse").get<std::string>());
    read(p, "gamma", c.ipa.gamma, w);
    read(p, "bottleneck", c.ipa.bottleneck, w);
  }
  if (j.contains("loss")) {
    const json& l = j.at("loss");
    const std::string w = "loss";
    reject_unknown(l, {"kind", "k", "k_plus", "k_minus", "lambda_p", "lambda_n", "alpha", "cosface_margin"}, w);
    if (l.contains("kind")) c.loss.kind = parse_loss_kind(l.at("kind").get<std::string>());
    read(l, "k", c.loss.das.k, w);
    read(l, "lambda_p", c.loss.das.lambda_p, w);
    read(l, "lambda_n", c.loss.das.lambda_n, w);
    read(l, "alpha", c.loss.alpha, w);
    read(l, "cosface_margin", c.loss.cosface_margin, w);
    for (const char* key : {"k_plus", "k_minus"}) {
      if (!l.contains(key) || l.at(key).is_null()) continue;
      double v = 0.0;
      read(l, key, v, w);
      (std::string(key) == "k_plus" ? c.loss.das.k_plus : c.loss.das.k_minus) = v;
    }
  }
  read(j, "tau", c.tau, "config");
  if (j.contains("optimizer")) c.optimizer = optimizer_from(j.at("optimizer"), c.optimizer, "optimizer");
  if (j.contains("pretrain")) c.pretrain = optimizer_from(j.at("pretrain"), c.pretrain, "pretrain");
  read(j, "seed", c.seed, "config");
  read(j, "output_dir", c.output_dir, "config");
  c.stream.seed = c.seed;
  c.validate();
  return c;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return config_from_json(ss.str());
}

std::uint64_t config_digest(const RunConfig& config) {
  const std::string s = to_json_value(config).dump();
  return fnv1a(s.data(), s.size());
}

std::vector<std::string> preset_names() { return {"drl-default", "drl-table-best"}; }

void apply_preset(RunConfig& config, const std::string& name) {
  auto& das = config.loss.das;
  if (name == "drl-default") {
    config.loss.kind = LossKind::das;
    config.loss.alpha = 0.5;
    das.lambda_p = 3.0;
    das.lambda_n = 1.0;
    das.k = 1.0;
    config.ipa.gamma = 0.9;
  } else if (name == "drl-table-best") {
    config.loss.kind = LossKind::das;
    config.loss.alpha = 0.5;
    das.lambda_p = 1.0;
    das.lambda_n = 2.0;
    das.k = 1.0;
  } else {
    throw ConfigError("unknown preset '" + name + "'");
  }
  das.k_plus.reset();
  das.k_minus.reset();
}

bool apply_seed_env(RunConfig& config) {
  const char* v = std::getenv("DRL_SEED");
  if (!v || !*v) return false;
  char* end = nullptr;
  const unsigned long long s = std::strtoull(v, &end, 10);
  if (*end != '\0') throw ConfigError(std::string("DRL_SEED is not an unsigned integer: ") + v);
  config.seed = s;
  config.stream.seed = s;
  return true;
}

}  // namespace drl
