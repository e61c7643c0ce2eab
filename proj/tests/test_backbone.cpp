#include <cmath>

#include <gtest/gtest.h>

#include "drl/backbone.hpp"
#include "drl/error.hpp"
#include "drl/gradcheck.hpp"
#include "support.hpp"

using namespace drl;
using drl::testing::default_stream;
using drl::testing::random_tensor;

namespace {

void expect_row_stochastic(const Tensor& attention) {
  const std::size_t h = attention.shape()[0], t = attention.shape()[1];
  for (std::size_t k = 0; k < h; ++k)
    for (std::size_t i = 0; i < t; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < t; ++j) {
        const double a = attention[(k * t + i) * t + j];
        EXPECT_GE(a, 0.0);
        s += a;
      }
      EXPECT_NEAR(s, 1.0, 1e-9);
    }
}

const PretrainResult& pretrained() {
  static const PretrainResult r = [] {
    RunConfig cfg;
    return pretrain_backbone(default_stream().base, cfg.backbone, cfg.pretrain_config());
  }();
  return r;
}

}  // namespace

TEST(BackboneConfig, Arithmetic) {
  BackboneConfig c;
  EXPECT_EQ(c.num_patches(), 16u);
  EXPECT_EQ(c.tokens(), 17u);
  EXPECT_EQ(c.head_dim(), 8u);
  c.patch_side = 5;
  EXPECT_THROW(c.validate(), ConfigError);
  c = BackboneConfig{};
  c.heads = 5;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(PatchEmbed, DefaultShape) {
  const Backbone b = Backbone::random_init(BackboneConfig{}, 0);
  const Var x = patch_embed(random_tensor({16, 16}, 1, 0.0, 1.0), b);
  EXPECT_EQ(x.shape(), (Shape{17, 32}));
}

TEST(PatchEmbed, ZeroImageZeroProjection) {
  Backbone b = Backbone::random_init(BackboneConfig{}, 0);
  b.patch_w.mutable_value().fill(0.0);
  const Tensor x = patch_embed(Tensor({16, 16}, 0.0), b).value();
  const Tensor& pos = b.pos_embed.value();
  for (std::size_t j = 0; j < 32; ++j) EXPECT_EQ(x(0, j), b.cls_token.value()[j] + pos(0, j));
  for (std::size_t i = 1; i < 17; ++i)
    for (std::size_t j = 0; j < 32; ++j) EXPECT_EQ(x(i, j), pos(i, j));
}

TEST(PatchEmbed, DeterministicAndSizeChecked) {
  const Backbone b = Backbone::random_init(BackboneConfig{}, 3);
  const Tensor img = random_tensor({16, 16}, 2, 0.0, 1.0);
  EXPECT_TRUE(patch_embed(img, b).value().bit_equal(patch_embed(img, b).value()));
  EXPECT_THROW(patch_embed(Tensor({12, 16}), b), DimensionError);
}

TEST(PatchEmbed, RasterOrderPatches) {
  BackboneConfig c;
  Tensor img({16, 16});
  for (std::size_t i = 0; i < img.size(); ++i) img[i] = static_cast<double>(i);
  const Tensor p = extract_patches(img, c);
  EXPECT_EQ(p.shape(), (Shape{16, 16}));
  EXPECT_EQ(p(0, 0), 0.0);
  EXPECT_EQ(p(0, 4), 16.0);  // second row of the first patch
  EXPECT_EQ(p(1, 0), 4.0);   // second patch starts four columns in
  EXPECT_EQ(p(4, 0), 64.0);  // first patch of the second patch row
}

TEST(Block, AttentionRowsAndShape) {
  const Backbone b = Backbone::random_init(BackboneConfig{}, 0);
  const Tensor tokens = random_tensor({17, 32}, 4);
  const BlockTrace tr = block_forward(tokens, b.blocks[0], b.config);
  EXPECT_EQ(tr.output_tokens.shape(), tokens.shape());
  EXPECT_EQ(tr.attention.shape(), (Shape{4, 17, 17}));
  expect_row_stochastic(tr.attention);
  expect_row_stochastic(tr.mean_attention().reshaped({1, 17, 17}));
}

TEST(Block, ZeroProjectionsAreIdentity) {
  Backbone b = Backbone::random_init(BackboneConfig{}, 0);
  auto& blk = b.blocks[1];
  for (Param* p : {&blk.w_qkv, &blk.b_qkv, &blk.w_out, &blk.b_out, &blk.w_ffn1, &blk.b_ffn1, &blk.w_ffn2, &blk.b_ffn2})
    p->mutable_value().fill(0.0);
  const Tensor tokens = random_tensor({17, 32}, 5);
  const BlockTrace tr = block_forward(tokens, blk, b.config);
  EXPECT_TRUE(tr.output_tokens.bit_equal(tokens));
  // zero queries and keys give uniform attention
  for (double a : tr.attention.values()) EXPECT_NEAR(a, 1.0 / 17.0, 1e-15);
}

TEST(Block, RejectsWrongWidth) {
  const Backbone b = Backbone::random_init(BackboneConfig{}, 0);
  EXPECT_THROW(block_forward(Tensor({17, 16}), b.blocks[0], b.config), DimensionError);
}

TEST(Block, GradientCheckOnTinyBackbone) {
  BackboneConfig c{8, 4, 8, 2, 2, 16};
  Backbone b = Backbone::random_init(c, 11);
  const Tensor img = random_tensor({8, 8}, 12, 0.0, 1.0);
  const Tensor proj = random_tensor({5, 8}, 13);
  auto loss = [&] { return sum(mul(backbone_forward_graph(img, b), constant(proj))); };
  // key biases have an exactly zero gradient, so their numeric value is pure roundoff
  const auto r = finite_difference_check(loss, b.params(), 1e-4, 1e-6);
  EXPECT_LE(r.max_rel_error, 1e-4) << r.worst_param << "[" << r.worst_index << "] " << r.worst_analytic << " vs "
                                   << r.worst_numeric;
}

TEST(BackboneForward, TracesAndPurity) {
  const Backbone b = Backbone::random_init(BackboneConfig{}, 0);
  const Tensor img = random_tensor({16, 16}, 6, 0.0, 1.0);
  const BackboneOutput first = backbone_forward(img, b);
  EXPECT_EQ(first.traces.size(), 4u);
  EXPECT_EQ(first.cls_feature.shape(), (Shape{32}));
  for (const auto& tr : first.traces) expect_row_stochastic(tr.attention);
  for (int i = 0; i < 100; ++i) EXPECT_TRUE(backbone_forward(img, b).cls_feature.bit_equal(first.cls_feature));
  EXPECT_TRUE(first.traces.back().output_tokens.row(0).bit_equal(first.cls_feature));
}

TEST(Pretrain, LossFallsAndBackboneIsFrozen) {
  const PretrainResult& r = pretrained();
  const auto& losses = r.report.epoch_losses;
  ASSERT_EQ(losses.size(), 30u);
  EXPECT_GT(losses.front(), losses.back());
  // coarse monotone trend: each third of training ends below the previous
  EXPECT_GT(losses[9], losses[19]);
  EXPECT_GT(losses[19], losses[29]);
  EXPECT_GE(r.report.final_train_accuracy, 80.0);
  EXPECT_TRUE(r.backbone.frozen());
  for (const Param* p : r.backbone.params()) EXPECT_TRUE(p->frozen()) << p->name();
}

TEST(Pretrain, NonzeroFeatures) {
  for (const auto& s : default_stream().stages[0].test) {
    const Tensor f = backbone_forward(s.image, pretrained().backbone).cls_feature;
    EXPECT_GT(l2_norm(f.values()), 0.0);
  }
}

TEST(Pretrain, DeterministicChecksum) {
  RunConfig cfg;
  PretrainConfig p = cfg.pretrain_config();
  p.optimizer.epochs = 2;
  const auto a = pretrain_backbone(default_stream().base, cfg.backbone, p);
  const auto b = pretrain_backbone(default_stream().base, cfg.backbone, p);
  EXPECT_EQ(params_hash(a.backbone.params()), params_hash(b.backbone.params()));
}

TEST(Pretrain, EmptyDatasetRejected) {
  StageDataset empty;
  EXPECT_THROW(pretrain_backbone(empty, BackboneConfig{}, PretrainConfig{}), ConfigError);
}
