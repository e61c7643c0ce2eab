#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "drl/dataset.hpp"

namespace drl {

struct StreamSpec {
  int base_classes = 10;
  int incremental_classes = 10;
  int inc_n = 2;
  int train_per_class = 40;
  int test_per_class = 20;
  double noise_sigma = 0.15;
  int image_side = 16;
  std::uint64_t seed = 0;

  void validate() const;
  int num_stages() const { return incremental_classes / inc_n; }
  bool operator==(const StreamSpec&) const = default;
};

struct ClassStream {
  StageDataset base;                 // stage 0
  std::vector<StageDataset> stages;  // stages 1..T
};

// Ordered partition of `classes` into consecutive groups of n (B0 Inc-n).
std::vector<std::vector<int>> split_b0_inc_n(const std::vector<int>& classes, int n);

// Noise-free template of one class: an oriented sinusoid grating plus a
// mixture of Gaussian blobs, all drawn from (seed, class_id).
Tensor class_template(int class_id, int side, std::uint64_t seed);

// Template, +/-2 pixel cyclic shift and Gaussian noise, clipped to [0, 1].
Sample make_sample(int class_id, Split split, int index, const StreamSpec& spec);

std::uint64_t sample_id(int class_id, Split split, int index);

ClassStream generate_stream(const StreamSpec& spec);

// class_id,stage,split,sample_count rows; stage 0 is the base task.
std::string stream_manifest_csv(const ClassStream& stream);

// Binary P5 grayscale. Pixels are scaled by 1/maxval.
Tensor read_pgm(const std::filesystem::path& path);
void write_pgm(const std::filesystem::path& path, const Tensor& image, int maxval = 255);

// root/<class_dir>/*.pgm, class directories in lexicographic order. The first
// spec.base_classes directories form the base task, the rest are split into
// stages of spec.inc_n. Within a class the last test_per_class/(train+test)
// share of files (sorted by name) is held out for testing.
ClassStream load_pgm_stream(const std::filesystem::path& root, const StreamSpec& spec);

}  // namespace drl
