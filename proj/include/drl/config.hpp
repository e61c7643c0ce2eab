#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "drl/backbone.hpp"
#include "drl/datagen.hpp"
#include "drl/engine.hpp"

namespace drl {

enum class Method { drl, finetune };

Method parse_method(const std::string& s);
std::string to_string(Method m);

struct RunConfig {
  Method method = Method::drl;
  BackboneConfig backbone;
  StreamSpec stream;
  std::string data_root;  // optional PGM folder tree; synthetic stream when empty
  StageOptions ipa;
  LossConfig loss;
  double tau = 0.1;
  OptimizerConfig optimizer;
  OptimizerConfig pretrain{0.01, 0.9, 5e-4, 30, 48};
  std::uint64_t seed = 0;
  std::string output_dir = "runs/default";

  void validate() const;
  StageConfig stage_config() const;
  PretrainConfig pretrain_config() const;

  bool operator==(const RunConfig&) const;
};

std::string to_json(const RunConfig& config, int indent = 2);
// Rejects unknown keys at every level; missing keys keep their defaults.
RunConfig config_from_json(const std::string& text);
RunConfig load_config(const std::filesystem::path& path);

// FNV-1a over the compact JSON form.
std::uint64_t config_digest(const RunConfig& config);

std::vector<std::string> preset_names();
// drl-default: alpha 0.5, lambda_p 3, lambda_n 1, k 1, gamma 0.9.
// drl-table-best: alpha 0.5, lambda_p 1, lambda_n 2, k 1.
void apply_preset(RunConfig& config, const std::string& name);

// DRL_SEED, when set, replaces config.seed. Returns true if applied.
bool apply_seed_env(RunConfig& config);

}  // namespace drl
