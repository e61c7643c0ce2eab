#pragma once

#include <cstdint>
#include <vector>

#include "drl/autograd.hpp"
#include "drl/dataset.hpp"
#include "drl/optim.hpp"
#include "drl/param.hpp"

namespace drl {

struct BackboneConfig {
  int image_side = 16;
  int patch_side = 4;
  int embed_dim = 32;
  int heads = 4;
  int blocks = 4;
  int ffn_hidden = 128;

  void validate() const;
  std::size_t num_patches() const;
  std::size_t tokens() const { return num_patches() + 1; }
  std::size_t head_dim() const { return static_cast<std::size_t>(embed_dim / heads); }

  bool operator==(const BackboneConfig&) const = default;
};

// Pre-norm transformer block: x + MHSA(LN1(x)), then + FFN(LN2(.)) with GELU.
struct BlockParams {
  Param ln1_gain, ln1_bias;
  Param w_qkv, b_qkv;
  Param w_out, b_out;
  Param ln2_gain, ln2_bias;
  Param w_ffn1, b_ffn1;
  Param w_ffn2, b_ffn2;

  ParamRefs refs();
  ConstParamRefs refs() const;
};

// Block output tokens and the post-softmax attention [heads x T x T].
struct BlockTrace {
  Tensor output_tokens;
  Tensor attention;

  // Row-stochastic head-mean of the attention, [T x T].
  Tensor mean_attention() const;
  // Slice of one head, [T x T].
  Tensor head_attention(std::size_t head) const;
};

struct Backbone {
  BackboneConfig config;
  Param patch_w;    // [patch_side^2 x d]
  Param patch_b;    // [d]
  Param cls_token;  // [d]
  Param pos_embed;  // [T x d]
  std::vector<BlockParams> blocks;

  static Backbone random_init(const BackboneConfig& config, std::uint64_t seed);

  ParamRefs params();
  ConstParamRefs params() const;
  bool frozen() const;
};

struct BackboneOutput {
  Tensor stem_tokens;          // patch embedding, shared by every stream
  Tensor cls_feature;          // final class token f_0^{o_L}, [d]
  std::vector<BlockTrace> traces;
};

// [N x patch_side^2] matrix of flattened patches in raster order.
Tensor extract_patches(const Tensor& image, const BackboneConfig& config);

Var patch_embed(const Tensor& image, const Backbone& backbone);

struct BlockResult {
  Var tokens;
  Tensor attention;
};
BlockResult block_forward(const Var& tokens, const BlockParams& block, const BackboneConfig& config);
BlockTrace block_forward(const Tensor& tokens, const BlockParams& block, const BackboneConfig& config);

// Frozen, tape-free forward of the whole backbone.
BackboneOutput backbone_forward(const Tensor& image, const Backbone& backbone);

// Recording forward returning the final tokens; used for pretraining.
Var backbone_forward_graph(const Tensor& image, const Backbone& backbone);

struct PretrainConfig {
  OptimizerConfig optimizer{0.01, 0.9, 5e-4, 30, 48};
  std::uint64_t seed = 0;
};

struct PretrainReport {
  std::vector<double> epoch_losses;
  double final_train_accuracy = 0.0;  // percent
};

struct PretrainResult {
  Backbone backbone;
  PretrainReport report;
};

// Trains backbone plus a temporary linear head with cross-entropy on the base
// task, discards the head and freezes every backbone param.
PretrainResult pretrain_backbone(const StageDataset& base, const BackboneConfig& config,
                                 const PretrainConfig& pretrain);

}  // namespace drl
