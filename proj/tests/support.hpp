#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "drl/backbone.hpp"
#include "drl/config.hpp"
#include "drl/datagen.hpp"
#include "drl/engine.hpp"
#include "drl/rng.hpp"

namespace drl::testing {

inline Tensor random_tensor(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  Rng rng(seed);
  Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

// Default stream and backbone for seed 0, built once per process.
inline const ClassStream& default_stream() {
  static const ClassStream stream = [] {
    RunConfig cfg;
    StreamSpec spec = cfg.stream;
    spec.seed = 0;
    return generate_stream(spec);
  }();
  return stream;
}

inline const Backbone& pretrained_backbone() {
  static const Backbone backbone = [] {
    RunConfig cfg;
    return pretrain_backbone(default_stream().base, cfg.backbone, cfg.pretrain_config()).backbone;
  }();
  return backbone;
}

inline Backbone copy_backbone(const Backbone& src) {
  Backbone b = Backbone::random_init(src.config, 0);
  ConstParamRefs from = src.params();
  ParamRefs to = b.params();
  for (std::size_t i = 0; i < from.size(); ++i) {
    to[i]->mutable_value() = from[i]->value();
    to[i]->set_frozen(from[i]->frozen());
  }
  return b;
}

inline IncrementalState fresh_state() { return IncrementalState::from_backbone(copy_backbone(pretrained_backbone())); }

// Fresh, empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("drl_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace drl::testing
