#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "drl/config.hpp"
#include "drl/engine.hpp"

namespace drl {

inline constexpr std::uint16_t kCheckpointVersion = 1;

// Layout (little-endian):
//   "DRLC" | u16 version | u64 payload bytes | payload | u64 FNV-1a of payload
// payload:
//   u64 config digest | str config json | u32 stage index
//   u32 n | n x (i32 class, i32 stage)                        class registry
//   u32 n | n x (i32 stage, u8 fusion, u8 attention, u8 reuse, f64 gamma, u32 r)
//   u32 n | n x (str name, u8 frozen, u8 decays, u32 rank, rank x u64, f64[])
//   u32 n | n x (i32 class, i32 stage, u32 segs, segs x (u8 provenance, u64 len, f64[]))
// str = u32 length + bytes.
struct Checkpoint {
  RunConfig config;
  IncrementalState state;
  PrototypeStore store;
};

std::vector<std::uint8_t> encode_checkpoint(const RunConfig& config, const IncrementalState& state,
                                            const PrototypeStore& store);
// Parses into fresh objects; nothing is returned unless the whole buffer is valid.
Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes);

void save_checkpoint(const std::filesystem::path& path, const RunConfig& config, const IncrementalState& state,
                     const PrototypeStore& store);
Checkpoint load_checkpoint(const std::filesystem::path& path);

struct CheckpointInfo {
  std::uint16_t version = 0;
  std::uint64_t config_digest = 0;
  std::uint64_t file_digest = 0;  // FNV-1a of the whole file
  std::size_t bytes = 0;
  int stage_index = 0;
  std::size_t streams = 0;
  std::size_t params = 0;
  std::size_t prototype_classes = 0;
  std::string config_json;
};
CheckpointInfo inspect_checkpoint(const std::filesystem::path& path);

}  // namespace drl
