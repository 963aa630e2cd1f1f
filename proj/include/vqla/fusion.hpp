#pragma once

#include <random>
#include <string>
#include <utility>
#include <vector>

#include "vqla/nn.hpp"

namespace vqla::fusion {

using ag::Index;
using ag::Matrix;
using ag::Var;

enum class AttnMode { kSelf, kGuided, kCoT2V, kCoV2T, kCoBi };
AttnMode parse_attn_mode(const std::string& s);
const char* attn_mode_name(AttnMode m);

struct MultiHeadAttention {
  nn::Linear wq, wk, wv, wo;
  Index heads = 1;

  MultiHeadAttention() = default;
  MultiHeadAttention(nn::ParamStore& store, const std::string& name, Index dim, Index heads,
                     std::mt19937_64& rng);
};

// q: (B*Lq) x D; k, v: (B*Lk) x D.
Var mha(const Var& q, const Var& k, const Var& v, const MultiHeadAttention& p, Index batch,
        std::vector<Matrix>* weights_out = nullptr);

// Post-norm transformer block: y = LN1(x + MHA(x, ctx, ctx)); out = LN2(y + FFN(y)).
struct AttentionBlock {
  MultiHeadAttention attn;
  nn::LayerNorm ln1, ln2;
  nn::FeedForward ffn;

  AttentionBlock() = default;
  AttentionBlock(nn::ParamStore& store, const std::string& name, Index dim, Index heads,
                 std::mt19937_64& rng);
  Var operator()(const Var& x, const Var& context, Index batch,
                 std::vector<Matrix>* weights_out = nullptr) const;
};

Var self_attention(const Var& x, const AttentionBlock& block, Index batch);
// Queries from the visual sequence, keys and values from the text sequence.
Var guided_attention(const Var& visual_seq, const Var& text_seq, const AttentionBlock& block,
                     Index batch);

struct CoAttentionLayer {
  AttentionBlock sa_text, sa_visual;
  AttentionBlock ga_visual;  // text guides visual
  AttentionBlock ga_text;    // visual guides text
};

class CoAttentionStack {
 public:
  CoAttentionStack() = default;
  // n_layers = 0 builds an empty pass-through stack.
  CoAttentionStack(nn::ParamStore& store, const std::string& name, int n_layers, AttnMode mode,
                   Index dim, Index heads, std::mt19937_64& rng);
  std::pair<Var, Var> operator()(const Var& text, const Var& visual, Index batch) const;
  int n_layers() const { return static_cast<int>(layers_.size()); }
  AttnMode mode() const { return mode_; }
  std::vector<CoAttentionLayer>& layers() { return layers_; }

 private:
  AttnMode mode_ = AttnMode::kCoT2V;
  std::vector<CoAttentionLayer> layers_;
};

std::pair<Var, Var> coattention_stack(const Var& text, const Var& visual,
                                      const CoAttentionStack& stack, Index batch);

// Multimodal collaborated calibration: the target embedding, split into heads,
// is gated per head by a sigmoid map of the matching source head.
struct MCCParams {
  Index heads = 1;
  nn::Linear target_proj, source_proj;
  std::vector<nn::Linear> gates;  // per head, head_dim x head_dim
  nn::Linear out;
  nn::LayerNorm norm;
  bool use_norm = true;

  MCCParams() = default;
  MCCParams(nn::ParamStore& store, const std::string& name, Index dim, Index heads,
            std::mt19937_64& rng);
};

Var mcc_calibrate(const Var& target, const Var& source, const MCCParams& p);

// Global contextual calibration via per-head bilinear pooling over positions.
struct GCCParams {
  Index heads = 1;
  std::vector<Var> theta;             // per head, head_dim x 1
  std::vector<nn::Linear> l1, l2, l3; // per head, head_dim x head_dim
  nn::Linear l4, l5;                  // dim x dim
  nn::LayerNorm norm;

  GCCParams() = default;
  GCCParams(nn::ParamStore& store, const std::string& name, Index dim, Index heads,
            std::mt19937_64& rng);
};

// weights_out receives the B x L softmax weights of each head.
Var gcc_calibrate(const Var& e_n, const Var& e_m, const GCCParams& p, Index batch,
                  std::vector<Matrix>* weights_out = nullptr);

struct GateParams {
  nn::Linear omega;    // 2D -> D with bias
  nn::Linear omega_v;  // D -> D
  nn::Linear omega_t;  // D -> D

  GateParams() = default;
  GateParams(nn::ParamStore& store, const std::string& name, Index dim, std::mt19937_64& rng);
};

// k = sigmoid(omega [I_v | I_t]); I = k * tanh(omega_v I_v) + (1 - k) * tanh(omega_t I_t).
Var gated_fusion(const Var& i_v, const Var& i_t, const GateParams& p, Var* gate_out = nullptr);

struct FusionConfig {
  int n_coattn_layers = 6;
  AttnMode attn_mode = AttnMode::kCoT2V;
  int attn_heads = 4;
  int mcc_heads = 4;
  int gcc_heads = 4;
  bool use_coattention = true;
  bool use_mcc = true;
  bool use_gcc = true;
  bool use_gate = true;
};

class C2GViL {
 public:
  C2GViL() = default;
  C2GViL(nn::ParamStore& store, const FusionConfig& config, Index dim, std::mt19937_64& rng);

  // text, visual: (B*L) x D with equal L. Returns the fused (B*L) x D sequence.
  Var operator()(const Var& text, const Var& visual, Index batch) const;
  const FusionConfig& config() const { return config_; }
  FusionConfig& mutable_config() { return config_; }

  CoAttentionStack coattention;
  MCCParams mcc_visual;  // visual calibrated by text
  MCCParams mcc_text;    // text calibrated by visual
  GCCParams gcc_visual, gcc_text;
  GateParams gate;

 private:
  FusionConfig config_;
};

Var c2g_vil_forward(const Var& text, const Var& visual, const C2GViL& fusion, Index batch);

}  // namespace vqla::fusion
