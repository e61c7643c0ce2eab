#include "drl/ipa.hpp"

#include <algorithm>
#include <cmath>

#include "drl/error.hpp"
#include "drl/rng.hpp"

namespace drl {

namespace {

double fan_in(std::size_t n) { return 1.0 / std::sqrt(static_cast<double>(n)); }

void append(ParamRefs& out, ParamRefs more) { out.insert(out.end(), more.begin(), more.end()); }
void append(ConstParamRefs& out, ConstParamRefs more) { out.insert(out.end(), more.begin(), more.end()); }

Tensor head_mean(const Tensor& attention) {
  const std::size_t h = attention.shape()[0];
  const std::size_t t = attention.shape()[1];
  Tensor out({t, t}, 0.0);
  for (std::size_t k = 0; k < h; ++k)
    for (std::size_t i = 0; i < t * t; ++i) out[i] += attention[k * t * t + i];
  for (std::size_t i = 0; i < t * t; ++i) out[i] /= static_cast<double>(h);
  return out;
}

Tensor head_slice(const Tensor& attention, std::size_t head) {
  const std::size_t t = attention.shape()[1];
  Tensor out({t, t});
  std::copy_n(attention.data() + head * t * t, t * t, out.data());
  return out;
}

Var self_attention_mix(const Var& f_hat, const SelfAttentionParams& p) {
  const std::size_t r = p.w_q.shape()[1];
  Var q = add_bias(matmul(f_hat, p.w_q.var()), p.b_q.var());
  Var k = matmul(f_hat, p.w_k.var());
  Var scores = scale(matmul(q, transpose(k)), 1.0 / std::sqrt(static_cast<double>(r)));
  return matmul(softmax_rows(scores), f_hat);
}

}  // namespace

FusionMode parse_fusion_mode(const std::string& s) {
  if (s == "sum") return FusionMode::sum;
  if (s == "gate_part") return FusionMode::gate_part;
  if (s == "gate_adapt") return FusionMode::gate_adapt;
  if (s == "gate_extra") return FusionMode::gate_extra;
  throw ConfigError("unknown fusion mode '" + s + "'");
}

AttentionMode parse_attention_mode(const std::string& s) {
  if (s == "n_att") return AttentionMode::n_att;
  if (s == "s_att") return AttentionMode::s_att;
  if (s == "r_att") return AttentionMode::r_att;
  throw ConfigError("unknown attention mode '" + s + "'");
}

AttentionReuse parse_attention_reuse(const std::string& s) {
  if (s == "head_mean") return AttentionReuse::head_mean;
  if (s == "per_head") return AttentionReuse::per_head;
  throw ConfigError("unknown attention reuse '" + s + "'");
}

std::string to_string(FusionMode m) {
  switch (m) {
    case FusionMode::sum: return "sum";
    case FusionMode::gate_part: return "gate_part";
    case FusionMode::gate_adapt: return "gate_adapt";
    case FusionMode::gate_extra: return "gate_extra";
  }
  return "?";
}

std::string to_string(AttentionMode m) {
  switch (m) {
    case AttentionMode::n_att: return "n_att";
    case AttentionMode::s_att: return "s_att";
    case AttentionMode::r_att: return "r_att";
  }
  return "?";
}

std::string to_string(AttentionReuse m) {
  return m == AttentionReuse::head_mean ? "head_mean" : "per_head";
}

void StageOptions::validate(int embed_dim) const {
  if (!(gamma >= 0.0 && gamma <= 1.0)) throw ConfigError("gamma must lie in [0, 1]");
  if (bottleneck < 0) throw ConfigError("bottleneck width must be non-negative");
  const std::size_t r = resolved_bottleneck(embed_dim);
  if (r == 0 || r >= static_cast<std::size_t>(embed_dim))
    throw ConfigError("bottleneck width must satisfy 0 < r < d, got r=" + std::to_string(r));
}

std::size_t StageOptions::resolved_bottleneck(int embed_dim) const {
  if (bottleneck > 0) return static_cast<std::size_t>(bottleneck);
  return static_cast<std::size_t>(std::min(48, embed_dim / 2));
}

Bottleneck Bottleneck::create(const std::string& prefix, std::size_t d, std::size_t r, std::uint64_t seed) {
  Rng rng(seed);
  Bottleneck b;
  b.w_down = Param(prefix + ".w_down", rng.normal_tensor({d, r}, fan_in(d)));
  b.b_down = Param(prefix + ".b_down", Tensor({r}, 0.0), false);
  b.w_up = Param(prefix + ".w_up", rng.normal_tensor({r, d}, fan_in(r)));
  b.b_up = Param(prefix + ".b_up", Tensor({d}, 0.0), false);
  return b;
}

ParamRefs Bottleneck::refs() { return {&w_down, &b_down, &w_up, &b_up}; }
ConstParamRefs Bottleneck::refs() const { return {&w_down, &b_down, &w_up, &b_up}; }

SelfAttentionParams SelfAttentionParams::create(const std::string& prefix, std::size_t d, std::size_t r,
                                                std::uint64_t seed) {
  Rng rng(seed);
  SelfAttentionParams p;
  p.w_q = Param(prefix + ".w_q", rng.normal_tensor({d, r}, fan_in(d)));
  p.b_q = Param(prefix + ".b_q", Tensor({r}, 0.0), false);
  p.w_k = Param(prefix + ".w_k", rng.normal_tensor({d, r}, fan_in(d)));
  return p;
}

ParamRefs SelfAttentionParams::refs() { return {&w_q, &b_q, &w_k}; }
ConstParamRefs SelfAttentionParams::refs() const { return {&w_q, &b_q, &w_k}; }

StageModule StageModule::create(const BackboneConfig& config, const StageOptions& options, int stage,
                                std::uint64_t seed) {
  config.validate();
  options.validate(config.embed_dim);
  if (options.reuse == AttentionReuse::per_head && config.embed_dim % config.heads != 0)
    throw ConfigError("per_head reuse needs embed_dim divisible by heads");
  const std::size_t d = static_cast<std::size_t>(config.embed_dim);
  const std::size_t r = options.resolved_bottleneck(config.embed_dim);
  const std::uint64_t base = mix_seed(seed, 0x1FA000 + static_cast<std::uint64_t>(stage));

  StageModule m;
  m.options = options;
  m.stage = stage;
  const std::string root = "stage" + std::to_string(stage);
  for (int l = 1; l < config.blocks; ++l) {
    const std::string p = root + ".block" + std::to_string(l);
    const std::uint64_t s = mix_seed(base, static_cast<std::uint64_t>(l));
    BlockAdapter blk{AdapterParams::create(p + ".adapter", d, r, mix_seed(s, 1)), std::nullopt, std::nullopt,
                     std::nullopt};
    if (options.fusion != FusionMode::sum) blk.gate = GateParams::create(p + ".gate", d, r, mix_seed(s, 2));
    if (options.fusion == FusionMode::gate_extra)
      blk.extra_gate = GateParams::create(p + ".extra_gate", d, r, mix_seed(s, 3));
    if (options.attention == AttentionMode::s_att)
      blk.attention = SelfAttentionParams::create(p + ".attn", d, r, mix_seed(s, 4));
    m.blocks.push_back(std::move(blk));
  }

  const std::string p = root + ".transfer";
  Rng rng(mix_seed(base, 0xFFFF));
  m.transfer.w_first = Param(p + ".w_first", rng.normal_tensor({d, d}, fan_in(d)));
  m.transfer.b_first = Param(p + ".b_first", Tensor({d}, 0.0), false);
  m.transfer.w_second = Param(p + ".w_second", rng.normal_tensor({d, d}, fan_in(d)));
  m.transfer.b_second = Param(p + ".b_second", Tensor({d}, 0.0), false);
  if (options.attention == AttentionMode::s_att)
    m.transfer.attention = SelfAttentionParams::create(p + ".attn", d, r, mix_seed(base, 0xFFFE));
  return m;
}

ParamRefs StageModule::params() {
  ParamRefs out;
  for (auto& b : blocks) {
    append(out, b.adapter.refs());
    if (b.gate) append(out, b.gate->refs());
    if (b.extra_gate) append(out, b.extra_gate->refs());
    if (b.attention) append(out, b.attention->refs());
  }
  append(out, {&transfer.w_first, &transfer.b_first, &transfer.w_second, &transfer.b_second});
  if (transfer.attention) append(out, transfer.attention->refs());
  return out;
}

ConstParamRefs StageModule::params() const {
  ConstParamRefs out;
  for (const auto& b : blocks) {
    append(out, b.adapter.refs());
    if (b.gate) append(out, b.gate->refs());
    if (b.extra_gate) append(out, b.extra_gate->refs());
    if (b.attention) append(out, b.attention->refs());
  }
  append(out, {&transfer.w_first, &transfer.b_first, &transfer.w_second, &transfer.b_second});
  if (transfer.attention) append(out, transfer.attention->refs());
  return out;
}

bool StageModule::frozen() const {
  const auto ps = params();
  return std::all_of(ps.begin(), ps.end(), [](const Param* p) { return p->frozen(); });
}

void StageModule::freeze() { freeze_all(params()); }

std::size_t closed_form_param_count(std::size_t d, std::size_t r, std::size_t blocks,
                                    std::size_t head_classes) {
  return (blocks - 1) * (2 * (d * r + r + r * d + d)) + 2 * (d * d + d) + (d * head_classes + 1);
}

Var adapter_forward(const Var& f_in, const AdapterParams& adapter) {
  Var h = gelu(add_bias(matmul(f_in, adapter.w_down.var()), adapter.b_down.var()));
  return add_bias(matmul(h, adapter.w_up.var()), adapter.b_up.var());
}

void require_row_stochastic(const Tensor& attention) {
  if (attention.rank() != 3 || attention.shape()[1] != attention.shape()[2])
    throw ProtocolError("contract violation: attention must be [heads x T x T]");
  const std::size_t h = attention.shape()[0];
  const std::size_t t = attention.shape()[1];
  for (std::size_t k = 0; k < h; ++k) {
    for (std::size_t i = 0; i < t; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < t; ++j) {
        const double a = attention[(k * t + i) * t + j];
        if (!(a >= 0.0)) throw ProtocolError("contract violation: negative attention entry");
        s += a;
      }
      if (std::abs(s - 1.0) > 1e-9)
        throw ProtocolError("contract violation: attention row " + std::to_string(i) + " of head " +
                            std::to_string(k) + " sums to " + std::to_string(s));
    }
  }
}

Var reusable_attention_apply(const Var& f_hat, const Tensor& attention, AttentionMode mode,
                             const SelfAttentionParams* self_attention, AttentionReuse reuse) {
  switch (mode) {
    case AttentionMode::n_att:
      return f_hat;
    case AttentionMode::s_att:
      if (!self_attention) throw ConfigError("s_att requires self-attention parameters");
      return self_attention_mix(f_hat, *self_attention);
    case AttentionMode::r_att:
      break;
  }
  require_row_stochastic(attention);
  const std::size_t t = attention.shape()[1];
  if (f_hat.value().rows() != t)
    throw DimensionError("reusable attention over " + std::to_string(t) + " tokens applied to " +
                         std::to_string(f_hat.value().rows()) + " rows");
  if (reuse == AttentionReuse::head_mean) return matmul(constant(head_mean(attention)), f_hat);

  const std::size_t heads = attention.shape()[0];
  const std::size_t d = f_hat.value().cols();
  if (d % heads != 0) throw DimensionError("per-head reuse needs width divisible by head count");
  const std::size_t dh = d / heads;
  std::vector<Var> parts;
  for (std::size_t k = 0; k < heads; ++k)
    parts.push_back(matmul(constant(head_slice(attention, k)), slice_cols(f_hat, k * dh, dh)));
  return concat_cols(parts);
}

Var gate_mask(const Var& g_in, const GateParams& gate) { return sigmoid(adapter_forward(g_in, gate)); }

Tensor gate_input(const Tensor& f_prev_stream, const Tensor& f_ptm, double gamma) {
  if (!(gamma >= 0.0 && gamma <= 1.0)) throw ConfigError("gamma must lie in [0, 1]");
  if (f_prev_stream.shape() != f_ptm.shape()) throw DimensionError("gate_input: shapes differ");
  Tensor out(f_ptm.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double a = f_prev_stream[i], b = f_ptm[i];
    out[i] = a == b ? a : (1.0 - gamma) * a + gamma * b;
  }
  return out;
}

Var fuse(const FuseInputs& in, FusionMode mode) {
  switch (mode) {
    case FusionMode::sum:
      return in.f_bar + in.g_in;
    case FusionMode::gate_part:
      if (!in.mask.defined()) throw ConfigError("gate_part requires a mask");
      return in.f_bar + in.mask * in.g_in;
    case FusionMode::gate_adapt:
      if (!in.mask.defined()) throw ConfigError("gate_adapt requires a mask");
      return convex_blend(in.f_bar, in.g_in, in.mask);
    case FusionMode::gate_extra: {
      if (!in.mask.defined()) throw ConfigError("gate_extra requires a mask");
      if (!in.extra_mask.defined()) throw ConfigError("gate_extra requires a second gate");
      if (!in.f_prev_raw.defined() || !in.f_ptm.defined())
        throw ConfigError("gate_extra requires previous-stream and PTM features");
      // 0.5 * [(2 - M - M0) f_bar + M f_prev + M0 f_ptm]
      Var part = in.mask * (in.f_prev_raw - in.f_bar) + in.extra_mask * (in.f_ptm - in.f_bar);
      return in.f_bar + scale(part, 0.5);
    }
  }
  throw ConfigError("unknown fusion mode");
}

Var transfer_block_forward(const Var& f_in, const TransferBlockParams& block, const Tensor& attention_last,
                           AttentionMode mode, AttentionReuse reuse) {
  Var u = reusable_attention_apply(f_in, attention_last, mode,
                                   block.attention ? &*block.attention : nullptr, reuse);
  Var h = gelu(add_bias(matmul(u, block.w_first.var()), block.b_first.var()));
  return u + add_bias(matmul(h, block.w_second.var()), block.b_second.var());
}

StreamResult stream_forward(const StreamContext& ctx, const StageModule& module) {
  const std::size_t n_blocks = module.blocks.size() + 1;
  if (ctx.ptm.size() != n_blocks)
    throw DimensionError("stream has " + std::to_string(n_blocks) + " blocks, PTM trace has " +
                         std::to_string(ctx.ptm.size()));
  if (!ctx.prev_blocks.empty() && ctx.prev_blocks.size() != module.blocks.size())
    throw DimensionError("previous stream block count mismatch");

  const auto& opt = module.options;
  StreamResult out;
  Var e = constant(ctx.stem);
  for (std::size_t l = 0; l < module.blocks.size(); ++l) {
    const BlockAdapter& blk = module.blocks[l];
    const Tensor& f_ptm = ctx.ptm[l].output_tokens;
    const Tensor& f_prev = ctx.prev_blocks.empty() ? f_ptm : ctx.prev_blocks[l];

    Var f_hat = adapter_forward(e, blk.adapter);
    Var f_bar = reusable_attention_apply(f_hat, ctx.ptm[l].attention, opt.attention,
                                         blk.attention ? &*blk.attention : nullptr, opt.reuse);
    FuseInputs in;
    in.f_bar = f_bar;
    in.g_in = constant(gate_input(f_prev, f_ptm, opt.gamma));
    if (blk.gate) in.mask = gate_mask(in.g_in, *blk.gate);
    if (opt.fusion == FusionMode::gate_extra) {
      in.f_prev_raw = constant(f_prev);
      in.f_ptm = constant(f_ptm);
      if (blk.extra_gate) in.extra_mask = gate_mask(in.f_ptm, *blk.extra_gate);
    }
    e = fuse(in, opt.fusion);
    out.block_outputs.push_back(e.value());
  }
  out.final_tokens = transfer_block_forward(e, module.transfer, ctx.ptm.back().attention, opt.attention, opt.reuse);
  return out;
}

CompositeOutput composite_forward(const Tensor& image, const Backbone& backbone,
                                  std::span<const StageModule> streams, ForwardCounter* counter,
                                  StreamContext* last_context) {
  NoGradGuard no_grad;
  BackboneOutput ptm = backbone_forward(image, backbone);
  if (counter) ++counter->backbone_passes;

  const std::size_t d = ptm.cls_feature.size();
  CompositeOutput out;
  out.per_stream_cls.push_back(ptm.cls_feature);

  StreamContext ctx;
  ctx.stem = std::move(ptm.stem_tokens);
  ctx.ptm = std::move(ptm.traces);
  ctx.ptm_cls = ptm.cls_feature;
  for (const StageModule& module : streams) {
    StreamResult r = stream_forward(ctx, module);
    if (counter) ++counter->stream_passes;
    out.per_stream_cls.push_back(r.cls().value());
    ctx.prev_blocks = std::move(r.block_outputs);
  }

  out.features = Tensor({d * out.per_stream_cls.size()});
  for (std::size_t s = 0; s < out.per_stream_cls.size(); ++s)
    std::copy_n(out.per_stream_cls[s].data(), d, out.features.data() + s * d);
  if (last_context) *last_context = std::move(ctx);
  return out;
}

}  // namespace drl
