#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "drl/tensor.hpp"

namespace drl {

enum class Split : std::uint8_t { train = 0, test = 1 };

const char* to_string(Split s);

struct Sample {
  std::uint64_t id = 0;
  int label = 0;
  Split split = Split::train;
  Tensor image;  // [side x side], pixels in [0, 1]
};

// Data of one stage. Stage 0 is the base task used to pretrain the backbone;
// incremental stages are numbered from 1.
struct StageDataset {
  int stage = 0;
  std::vector<int> classes;
  std::vector<Sample> train;
  std::vector<Sample> test;
};

// Records every sample id a training routine reads.
struct DataAccessLog {
  std::vector<std::uint64_t> ids;
  void record(std::uint64_t id) { ids.push_back(id); }
};

}  // namespace drl
