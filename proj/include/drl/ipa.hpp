#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "drl/autograd.hpp"
#include "drl/backbone.hpp"
#include "drl/param.hpp"

namespace drl {

enum class FusionMode { sum, gate_part, gate_adapt, gate_extra };
enum class AttentionMode { n_att, s_att, r_att };
// How a multi-head PTM attention is reused on full-width adapter features.
enum class AttentionReuse { head_mean, per_head };

FusionMode parse_fusion_mode(const std::string& s);
AttentionMode parse_attention_mode(const std::string& s);
AttentionReuse parse_attention_reuse(const std::string& s);
std::string to_string(FusionMode m);
std::string to_string(AttentionMode m);
std::string to_string(AttentionReuse m);

struct StageOptions {
  FusionMode fusion = FusionMode::gate_adapt;
  AttentionMode attention = AttentionMode::r_att;
  AttentionReuse reuse = AttentionReuse::head_mean;
  double gamma = 0.9;
  int bottleneck = 0;  // 0 selects min(48, d / 2)

  void validate(int embed_dim) const;
  std::size_t resolved_bottleneck(int embed_dim) const;
  bool operator==(const StageOptions&) const = default;
};

// Two 1x1 projections around a GELU: up(gelu(down(x))). Serves both as the
// lightweight adapter and as the body of a transfer gate.
struct Bottleneck {
  Param w_down;  // [d x r]
  Param b_down;  // [r]
  Param w_up;    // [r x d]
  Param b_up;    // [d]

  static Bottleneck create(const std::string& prefix, std::size_t d, std::size_t r, std::uint64_t seed);
  ParamRefs refs();
  ConstParamRefs refs() const;
};
using AdapterParams = Bottleneck;
using GateParams = Bottleneck;

// Q/K projections owned by the s_att variant; V is the adapter output. A key
// bias would add the same amount to every score of a row, so there is none.
struct SelfAttentionParams {
  Param w_q, b_q, w_k;

  static SelfAttentionParams create(const std::string& prefix, std::size_t d, std::size_t r,
                                    std::uint64_t seed);
  ParamRefs refs();
  ConstParamRefs refs() const;
};

struct BlockAdapter {
  AdapterParams adapter;
  std::optional<GateParams> gate;        // absent for FusionMode::sum
  std::optional<GateParams> extra_gate;  // gate_extra only, fed by the PTM feature
  std::optional<SelfAttentionParams> attention;  // s_att only
};

// Replaces the last block: attention mixing, then W_second(gelu(W_first x)) + x.
struct TransferBlockParams {
  Param w_first, b_first;    // [d x d], [d]
  Param w_second, b_second;  // [d x d], [d]
  std::optional<SelfAttentionParams> attention;
};

// Trainable bundle added at one incremental stage.
struct StageModule {
  StageOptions options;
  int stage = 0;
  std::vector<BlockAdapter> blocks;  // blocks 1..L-1
  TransferBlockParams transfer;      // block L

  static StageModule create(const BackboneConfig& config, const StageOptions& options, int stage,
                            std::uint64_t seed);

  ParamRefs params();
  ConstParamRefs params() const;
  bool frozen() const;
  void freeze();
};

// (L-1) * 2 * (d*r + r + r*d + d) + 2 * (d*d + d) + (d*C + 1): adapters and
// gates, transfer block, cosine head with its log-scale.
std::size_t closed_form_param_count(std::size_t d, std::size_t r, std::size_t blocks,
                                    std::size_t head_classes);

Var adapter_forward(const Var& f_in, const AdapterParams& adapter);

// r_att: head-mean (or per-head) PTM attention applied to f_hat; n_att: f_hat
// unchanged; s_att: attention computed from f_hat with the stream's own Q/K.
// Throws ProtocolError when a reused attention is not row-stochastic.
Var reusable_attention_apply(const Var& f_hat, const Tensor& attention, AttentionMode mode,
                             const SelfAttentionParams* self_attention = nullptr,
                             AttentionReuse reuse = AttentionReuse::head_mean);

// Checks attention [heads x T x T] rows sum to 1 within 1e-9 and are >= 0.
void require_row_stochastic(const Tensor& attention);

Var gate_mask(const Var& g_in, const GateParams& gate);

// (1 - gamma) * f_prev + gamma * f_ptm; elementwise equal operands pass through unchanged.
Tensor gate_input(const Tensor& f_prev_stream, const Tensor& f_ptm, double gamma);

struct FuseInputs {
  Var f_bar;
  Var g_in;
  Var mask;           // M, unused by sum
  Var f_prev_raw;     // previous stream block output (gate_extra)
  Var f_ptm;          // PTM block output (gate_extra)
  Var extra_mask;     // M0 (gate_extra)
};
Var fuse(const FuseInputs& in, FusionMode mode);

Var transfer_block_forward(const Var& f_in, const TransferBlockParams& block, const Tensor& attention_last,
                           AttentionMode mode, AttentionReuse reuse = AttentionReuse::head_mean);

// Everything a stream needs from the frozen part of the network for one input.
struct StreamContext {
  Tensor stem;                       // shared patch embedding
  std::vector<BlockTrace> ptm;       // PTM block outputs and attentions
  std::vector<Tensor> prev_blocks;   // previous adapter stream, blocks 1..L-1; empty at stage 1
  Tensor ptm_cls;                    // f_0^{o_L}
};

struct StreamResult {
  Var final_tokens;                 // [T x d] after the transfer block
  std::vector<Tensor> block_outputs;  // blocks 1..L-1, consumed by the next stream
  Var cls() const { return row(final_tokens, 0); }
};

StreamResult stream_forward(const StreamContext& ctx, const StageModule& module);

struct ForwardCounter {
  std::size_t backbone_passes = 0;
  std::size_t stream_passes = 0;
};

struct CompositeOutput {
  Tensor features;                     // F_t = [f_0^{o_L}, f_1^{e_L}, ..., f_t^{e_L}]
  std::vector<Tensor> per_stream_cls;  // stream 0 is the backbone
};

// Single pass: the PTM, then each stream in stage order, each consuming the
// previous stream's block features. `last_context`, when given, receives the
// context a stream appended after `streams` would see.
CompositeOutput composite_forward(const Tensor& image, const Backbone& backbone,
                                  std::span<const StageModule> streams, ForwardCounter* counter = nullptr,
                                  StreamContext* last_context = nullptr);

}  // namespace drl
