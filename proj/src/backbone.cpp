#include "drl/backbone.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "drl/error.hpp"
#include "drl/rng.hpp"
#include "drl/supervision.hpp"

namespace drl {

void BackboneConfig::validate() const {
  if (image_side <= 0 || patch_side <= 0 || embed_dim <= 0 || heads <= 0 || blocks <= 0 ||
      ffn_hidden <= 0) {
    throw ConfigError("backbone: all sizes must be positive");
  }
  if (image_side % patch_side != 0) throw ConfigError("backbone: image_side must be divisible by patch_side");
  if (embed_dim % heads != 0) throw ConfigError("backbone: embed_dim must be divisible by heads");
  if (blocks < 2) throw ConfigError("backbone: at least two blocks are required");
}

std::size_t BackboneConfig::num_patches() const {
  const std::size_t per_side = static_cast<std::size_t>(image_side / patch_side);
  return per_side * per_side;
}

ParamRefs BlockParams::refs() {
  return {&ln1_gain, &ln1_bias, &w_qkv, &b_qkv, &w_out, &b_out,
          &ln2_gain, &ln2_bias, &w_ffn1, &b_ffn1, &w_ffn2, &b_ffn2};
}

ConstParamRefs BlockParams::refs() const {
  return {&ln1_gain, &ln1_bias, &w_qkv, &b_qkv, &w_out, &b_out,
          &ln2_gain, &ln2_bias, &w_ffn1, &b_ffn1, &w_ffn2, &b_ffn2};
}

Tensor BlockTrace::mean_attention() const {
  const std::size_t h = attention.shape()[0];
  const std::size_t t = attention.shape()[1];
  Tensor out({t, t}, 0.0);
  for (std::size_t k = 0; k < h; ++k)
    for (std::size_t i = 0; i < t * t; ++i) out[i] += attention[k * t * t + i];
  for (std::size_t i = 0; i < t * t; ++i) out[i] /= static_cast<double>(h);
  return out;
}

Tensor BlockTrace::head_attention(std::size_t head) const {
  const std::size_t t = attention.shape()[1];
  std::vector<double> v(attention.values().begin() + static_cast<std::ptrdiff_t>(head * t * t),
                        attention.values().begin() + static_cast<std::ptrdiff_t>((head + 1) * t * t));
  return Tensor({t, t}, std::move(v));
}

Backbone Backbone::random_init(const BackboneConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(mix_seed(seed, 0xBAC0));
  const std::size_t d = static_cast<std::size_t>(config.embed_dim);
  const std::size_t p2 = static_cast<std::size_t>(config.patch_side * config.patch_side);
  const std::size_t hidden = static_cast<std::size_t>(config.ffn_hidden);
  auto fan_in = [](std::size_t n) { return 1.0 / std::sqrt(static_cast<double>(n)); };

  Backbone b;
  b.config = config;
  b.patch_w = Param("backbone.patch.w", rng.normal_tensor({p2, d}, fan_in(p2)));
  b.patch_b = Param("backbone.patch.b", Tensor({d}, 0.0), false);
  b.cls_token = Param("backbone.cls", rng.normal_tensor({d}, 0.1));
  b.pos_embed = Param("backbone.pos", rng.normal_tensor({config.tokens(), d}, 0.1));
  for (int l = 0; l < config.blocks; ++l) {
    const std::string p = "backbone.block" + std::to_string(l) + ".";
    BlockParams blk;
    blk.ln1_gain = Param(p + "ln1.gain", Tensor({d}, 1.0), false);
    blk.ln1_bias = Param(p + "ln1.bias", Tensor({d}, 0.0), false);
    blk.w_qkv = Param(p + "attn.w_qkv", rng.normal_tensor({d, 3 * d}, fan_in(d)));
    blk.b_qkv = Param(p + "attn.b_qkv", Tensor({3 * d}, 0.0), false);
    blk.w_out = Param(p + "attn.w_out", rng.normal_tensor({d, d}, fan_in(d)));
    blk.b_out = Param(p + "attn.b_out", Tensor({d}, 0.0), false);
    blk.ln2_gain = Param(p + "ln2.gain", Tensor({d}, 1.0), false);
    blk.ln2_bias = Param(p + "ln2.bias", Tensor({d}, 0.0), false);
    blk.w_ffn1 = Param(p + "ffn.w1", rng.normal_tensor({d, hidden}, fan_in(d)));
    blk.b_ffn1 = Param(p + "ffn.b1", Tensor({hidden}, 0.0), false);
    blk.w_ffn2 = Param(p + "ffn.w2", rng.normal_tensor({hidden, d}, fan_in(hidden)));
    blk.b_ffn2 = Param(p + "ffn.b2", Tensor({d}, 0.0), false);
    b.blocks.push_back(std::move(blk));
  }
  return b;
}

ParamRefs Backbone::params() {
  ParamRefs out{&patch_w, &patch_b, &cls_token, &pos_embed};
  for (auto& blk : blocks) {
    auto r = blk.refs();
    out.insert(out.end(), r.begin(), r.end());
  }
  return out;
}

ConstParamRefs Backbone::params() const {
  ConstParamRefs out{&patch_w, &patch_b, &cls_token, &pos_embed};
  for (const auto& blk : blocks) {
    auto r = blk.refs();
    out.insert(out.end(), r.begin(), r.end());
  }
  return out;
}

bool Backbone::frozen() const {
  auto ps = params();
  return std::all_of(ps.begin(), ps.end(), [](const Param* p) { return p->frozen(); });
}

Tensor extract_patches(const Tensor& image, const BackboneConfig& config) {
  const std::size_t side = static_cast<std::size_t>(config.image_side);
  if (image.rank() != 2 || image.shape()[0] != side || image.shape()[1] != side) {
    throw DimensionError("patch_embed: image " + shape_str(image.shape()) + " does not match " +
                         std::to_string(side) + "x" + std::to_string(side));
  }
  const std::size_t ps = static_cast<std::size_t>(config.patch_side);
  const std::size_t per_side = side / ps;
  Tensor out({per_side * per_side, ps * ps});
  for (std::size_t py = 0; py < per_side; ++py)
    for (std::size_t px = 0; px < per_side; ++px) {
      const std::size_t patch = py * per_side + px;
      for (std::size_t y = 0; y < ps; ++y)
        for (std::size_t x = 0; x < ps; ++x) out(patch, y * ps + x) = image(py * ps + y, px * ps + x);
    }
  return out;
}

Var patch_embed(const Tensor& image, const Backbone& backbone) {
  const std::size_t d = static_cast<std::size_t>(backbone.config.embed_dim);
  Var patches = constant(extract_patches(image, backbone.config));
  Var proj = add_bias(matmul(patches, backbone.patch_w.var()), backbone.patch_b.var());
  const Var rows[] = {reshape(backbone.cls_token.var(), {1, d}), proj};
  return add(concat_rows(rows), backbone.pos_embed.var());
}

BlockResult block_forward(const Var& tokens, const BlockParams& block, const BackboneConfig& config) {
  const std::size_t d = static_cast<std::size_t>(config.embed_dim);
  if (tokens.value().rank() != 2 || tokens.value().cols() != d) {
    throw DimensionError("block_forward: tokens " + shape_str(tokens.shape()) + " vs width " +
                         std::to_string(d));
  }
  const std::size_t t = tokens.value().rows();
  const std::size_t heads = static_cast<std::size_t>(config.heads);
  const std::size_t hd = config.head_dim();
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));

  Var h = layer_norm(tokens, block.ln1_gain.var(), block.ln1_bias.var());
  Var qkv = add_bias(matmul(h, block.w_qkv.var()), block.b_qkv.var());
  std::vector<Var> head_out;
  head_out.reserve(heads);
  Tensor attention({heads, t, t});
  for (std::size_t k = 0; k < heads; ++k) {
    Var q = slice_cols(qkv, k * hd, hd);
    Var kk = slice_cols(qkv, d + k * hd, hd);
    Var v = slice_cols(qkv, 2 * d + k * hd, hd);
    Var a = softmax_rows(scale(matmul(q, transpose(kk)), inv_sqrt));
    std::copy(a.value().values().begin(), a.value().values().end(),
              attention.values().begin() + static_cast<std::ptrdiff_t>(k * t * t));
    head_out.push_back(matmul(a, v));
  }
  Var attn = add_bias(matmul(concat_cols(head_out), block.w_out.var()), block.b_out.var());
  Var x1 = add(tokens, attn);
  Var h2 = layer_norm(x1, block.ln2_gain.var(), block.ln2_bias.var());
  Var ffn = add_bias(matmul(gelu(add_bias(matmul(h2, block.w_ffn1.var()), block.b_ffn1.var())),
                            block.w_ffn2.var()),
                     block.b_ffn2.var());
  return {add(x1, ffn), std::move(attention)};
}

BlockTrace block_forward(const Tensor& tokens, const BlockParams& block, const BackboneConfig& config) {
  NoGradGuard guard;
  BlockResult r = block_forward(constant(tokens), block, config);
  return {r.tokens.value(), std::move(r.attention)};
}

BackboneOutput backbone_forward(const Tensor& image, const Backbone& backbone) {
  NoGradGuard guard;
  BackboneOutput out;
  Var x = patch_embed(image, backbone);
  out.stem_tokens = x.value();
  out.traces.reserve(backbone.blocks.size());
  for (const auto& blk : backbone.blocks) {
    BlockResult r = block_forward(x, blk, backbone.config);
    x = r.tokens;
    out.traces.push_back({x.value(), std::move(r.attention)});
  }
  out.cls_feature = x.value().row(0);
  return out;
}

Var backbone_forward_graph(const Tensor& image, const Backbone& backbone) {
  Var x = patch_embed(image, backbone);
  for (const auto& blk : backbone.blocks) x = block_forward(x, blk, backbone.config).tokens;
  return x;
}

PretrainResult pretrain_backbone(const StageDataset& base, const BackboneConfig& config,
                                 const PretrainConfig& pretrain) {
  if (base.train.empty() || base.classes.empty()) throw ConfigError("pretrain_backbone: empty base dataset");
  pretrain.optimizer.validate();
  PretrainResult result{Backbone::random_init(config, pretrain.seed), {}};
  Backbone& bb = result.backbone;

  const std::size_t d = static_cast<std::size_t>(config.embed_dim);
  const std::size_t c = base.classes.size();
  Rng rng(mix_seed(pretrain.seed, 0x9E7));
  Param head_w("pretrain.head.w", rng.normal_tensor({d, c}, 1.0 / std::sqrt(static_cast<double>(d))));
  Param head_b("pretrain.head.b", Tensor({c}, 0.0), false);

  ParamRefs params = bb.params();
  params.push_back(&head_w);
  params.push_back(&head_b);

  auto label_index = [&](int label) {
    auto it = std::find(base.classes.begin(), base.classes.end(), label);
    if (it == base.classes.end()) throw ProtocolError("pretrain_backbone: sample label outside base classes");
    return static_cast<std::size_t>(it - base.classes.begin());
  };
  auto logits_of = [&](const Tensor& image) {
    Var cls = reshape(row(backbone_forward_graph(image, bb), 0), {1, d});
    return reshape(add_bias(matmul(cls, head_w.var()), head_b.var()), {c});
  };

  std::vector<std::size_t> order(base.train.size());
  std::iota(order.begin(), order.end(), 0);
  const OptimizerConfig& opt = pretrain.optimizer;
  for (int epoch = 0; epoch < opt.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng.engine());
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += opt.batch_size) {
      const std::size_t end = std::min(order.size(), start + opt.batch_size);
      const double inv_b = 1.0 / static_cast<double>(end - start);
      for (std::size_t i = start; i < end; ++i) {
        const Sample& s = base.train[order[i]];
        Var loss = cross_entropy(logits_of(s.image), label_index(s.label));
        loss.backward(inv_b);
        epoch_loss += loss.item();
      }
      sgd_step(params, opt, epoch);
    }
    result.report.epoch_losses.push_back(epoch_loss / static_cast<double>(order.size()));
  }

  {
    NoGradGuard guard;
    std::size_t correct = 0;
    for (const auto& s : base.train) {
      const Tensor z = logits_of(s.image).value();
      const auto best = std::max_element(z.values().begin(), z.values().end()) - z.values().begin();
      if (static_cast<std::size_t>(best) == label_index(s.label)) ++correct;
    }
    result.report.final_train_accuracy = 100.0 * static_cast<double>(correct) /
                                         static_cast<double>(base.train.size());
  }
  freeze_all(bb.params());
  return result;
}

}  // namespace drl
