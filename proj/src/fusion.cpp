#include "vqla/fusion.hpp"

#include "vqla/error.hpp"

namespace vqla::fusion {

namespace {

void require_divisible(Index dim, Index heads, const char* what) {
  if (heads < 1 || dim % heads != 0) {
    throw ConfigError(std::string(what) + ": dim " + std::to_string(dim) + " not divisible by " +
                      std::to_string(heads) + " heads");
  }
}

void require_same(const Var& a, const Var& b, const char* what) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw ShapeError(std::string(what) + ": shape mismatch");
}

}  // namespace

AttnMode parse_attn_mode(const std::string& s) {
  if (s == "self") return AttnMode::kSelf;
  if (s == "guided") return AttnMode::kGuided;
  if (s == "co_T2V" || s == "t2v") return AttnMode::kCoT2V;
  if (s == "co_V2T" || s == "v2t") return AttnMode::kCoV2T;
  if (s == "co_Bi" || s == "bi") return AttnMode::kCoBi;
  throw ConfigError("unknown attention mode: " + s);
}

const char* attn_mode_name(AttnMode m) {
  switch (m) {
    case AttnMode::kSelf: return "self";
    case AttnMode::kGuided: return "guided";
    case AttnMode::kCoT2V: return "co_T2V";
    case AttnMode::kCoV2T: return "co_V2T";
    case AttnMode::kCoBi: return "co_Bi";
  }
  return "?";
}

MultiHeadAttention::MultiHeadAttention(nn::ParamStore& store, const std::string& name, Index dim,
                                       Index h, std::mt19937_64& rng)
    : wq(store, name + ".wq", dim, dim, rng),
      wk(store, name + ".wk", dim, dim, rng),
      wv(store, name + ".wv", dim, dim, rng),
      wo(store, name + ".wo", dim, dim, rng),
      heads(h) {
  require_divisible(dim, h, "attention");
}

Var mha(const Var& q, const Var& k, const Var& v, const MultiHeadAttention& p, Index batch,
        std::vector<Matrix>* weights_out) {
  if (k.rows() != v.rows()) throw ShapeError("mha: key and value lengths differ");
  if (q.cols() != p.wq.in_features() || k.cols() != p.wk.in_features() || v.cols() != p.wv.in_features()) {
    throw ShapeError("mha: feature width does not match the projections");
  }
  if (batch < 1 || q.rows() % batch != 0 || k.rows() % batch != 0) {
    throw ShapeError("mha: rows not divisible by batch");
  }
  return p.wo(ag::attention(p.wq(q), p.wk(k), p.wv(v), batch, p.heads, weights_out));
}

AttentionBlock::AttentionBlock(nn::ParamStore& store, const std::string& name, Index dim, Index heads,
                               std::mt19937_64& rng)
    : attn(store, name + ".attn", dim, heads, rng),
      ln1(store, name + ".ln1", dim),
      ln2(store, name + ".ln2", dim),
      ffn(store, name + ".ffn", dim, 4 * dim, rng) {}

Var AttentionBlock::operator()(const Var& x, const Var& context, Index batch,
                               std::vector<Matrix>* weights_out) const {
  const Var y = ln1(ag::add(x, mha(x, context, context, attn, batch, weights_out)));
  return ln2(ag::add(y, ffn(y)));
}

Var self_attention(const Var& x, const AttentionBlock& block, Index batch) { return block(x, x, batch); }

Var guided_attention(const Var& visual_seq, const Var& text_seq, const AttentionBlock& block, Index batch) {
  if (visual_seq.cols() != text_seq.cols()) throw ShapeError("guided_attention: feature widths differ");
  return block(visual_seq, text_seq, batch);
}

CoAttentionStack::CoAttentionStack(nn::ParamStore& store, const std::string& name, int n_layers,
                                   AttnMode mode, Index dim, Index heads, std::mt19937_64& rng)
    : mode_(mode) {
  if (n_layers < 0) throw ConfigError("n_coattn_layers must be >= 0");
  const bool self = mode != AttnMode::kGuided;
  const bool t2v = mode == AttnMode::kGuided || mode == AttnMode::kCoT2V || mode == AttnMode::kCoBi;
  const bool v2t = mode == AttnMode::kCoV2T || mode == AttnMode::kCoBi;
  for (int i = 0; i < n_layers; ++i) {
    const std::string prefix = name + ".layer" + std::to_string(i);
    CoAttentionLayer layer;
    if (self) {
      layer.sa_text = AttentionBlock(store, prefix + ".sa_text", dim, heads, rng);
      layer.sa_visual = AttentionBlock(store, prefix + ".sa_visual", dim, heads, rng);
    }
    if (t2v) layer.ga_visual = AttentionBlock(store, prefix + ".ga_visual", dim, heads, rng);
    if (v2t) layer.ga_text = AttentionBlock(store, prefix + ".ga_text", dim, heads, rng);
    layers_.push_back(std::move(layer));
  }
}

std::pair<Var, Var> CoAttentionStack::operator()(const Var& text, const Var& visual, Index batch) const {
  require_same(text, visual, "coattention_stack");
  Var t = text;
  Var v = visual;
  for (const auto& layer : layers_) {
    if (mode_ != AttnMode::kGuided) {
      t = self_attention(t, layer.sa_text, batch);
      v = self_attention(v, layer.sa_visual, batch);
    }
    switch (mode_) {
      case AttnMode::kSelf: break;
      case AttnMode::kGuided:
      case AttnMode::kCoT2V: v = guided_attention(v, t, layer.ga_visual, batch); break;
      case AttnMode::kCoV2T: t = layer.ga_text(t, v, batch); break;
      case AttnMode::kCoBi: {
        const Var v_next = guided_attention(v, t, layer.ga_visual, batch);
        t = layer.ga_text(t, v, batch);
        v = v_next;
        break;
      }
    }
  }
  return {t, v};
}

std::pair<Var, Var> coattention_stack(const Var& text, const Var& visual, const CoAttentionStack& stack,
                                      Index batch) {
  return stack(text, visual, batch);
}

MCCParams::MCCParams(nn::ParamStore& store, const std::string& name, Index dim, Index h,
                     std::mt19937_64& rng)
    : heads(h) {
  require_divisible(dim, h, "mcc");
  const Index hd = dim / h;
  target_proj = nn::Linear(store, name + ".target_proj", dim, dim, rng);
  source_proj = nn::Linear(store, name + ".source_proj", dim, dim, rng);
  for (Index i = 0; i < h; ++i) gates.emplace_back(store, name + ".gate" + std::to_string(i), hd, hd, rng);
  out = nn::Linear(store, name + ".out", dim, dim, rng);
  norm = nn::LayerNorm(store, name + ".norm", dim);
}

Var mcc_calibrate(const Var& target, const Var& source, const MCCParams& p) {
  require_same(target, source, "mcc_calibrate");
  const Index dim = target.cols();
  require_divisible(dim, p.heads, "mcc");
  const Index hd = dim / p.heads;
  const Var pt = p.target_proj(target);
  const Var ps = p.source_proj(source);
  std::vector<Var> gated;
  for (Index i = 0; i < p.heads; ++i) {
    const Var gate = ag::sigmoid(p.gates[i](ag::slice_cols(ps, i * hd, hd)));
    gated.push_back(ag::mul(ag::slice_cols(pt, i * hd, hd), gate));
  }
  Var y = p.out(p.heads == 1 ? gated[0] : ag::concat_cols(gated));
  if (p.use_norm) y = p.norm(y);
  return ag::relu(y);
}

GCCParams::GCCParams(nn::ParamStore& store, const std::string& name, Index dim, Index h,
                     std::mt19937_64& rng)
    : heads(h) {
  require_divisible(dim, h, "gcc");
  const Index hd = dim / h;
  for (Index i = 0; i < h; ++i) {
    const std::string prefix = name + ".head" + std::to_string(i);
    theta.push_back(store.add(prefix + ".theta", nn::xavier_uniform(hd, 1, rng)));
    l1.emplace_back(store, prefix + ".l1", hd, hd, rng, false);
    l2.emplace_back(store, prefix + ".l2", hd, hd, rng, false);
    l3.emplace_back(store, prefix + ".l3", hd, hd, rng, false);
  }
  l4 = nn::Linear(store, name + ".l4", dim, dim, rng, false);
  l5 = nn::Linear(store, name + ".l5", dim, dim, rng, false);
  norm = nn::LayerNorm(store, name + ".norm", dim);
}

Var gcc_calibrate(const Var& e_n, const Var& e_m, const GCCParams& p, Index batch,
                  std::vector<Matrix>* weights_out) {
  require_same(e_n, e_m, "gcc_calibrate");
  const Index dim = e_n.cols();
  require_divisible(dim, p.heads, "gcc");
  if (batch < 1 || e_n.rows() % batch != 0) throw ShapeError("gcc_calibrate: rows not divisible by batch");
  const Index len = e_n.rows() / batch;
  const Index hd = dim / p.heads;
  std::vector<Var> contexts;
  for (Index i = 0; i < p.heads; ++i) {
    const Var n_i = ag::slice_cols(e_n, i * hd, hd);
    const Var m_i = ag::slice_cols(e_m, i * hd, hd);
    const Var scores = ag::matmul(ag::mul(p.l1[i](n_i), p.l2[i](m_i)), p.theta[i]);  // (B*L) x 1
    const Var weights = ag::softmax_rows(ag::reshape(scores, batch, len));
    if (weights_out) weights_out->push_back(weights.value());
    contexts.push_back(ag::weighted_pool(weights, p.l3[i](m_i)));
  }
  const Var pooled = p.heads == 1 ? contexts[0] : ag::concat_cols(contexts);  // B x D
  const Var calib = p.l5(ag::relu(p.norm(p.l4(pooled))));
  return ag::add(e_n, ag::repeat_rows(calib, len));
}

GateParams::GateParams(nn::ParamStore& store, const std::string& name, Index dim, std::mt19937_64& rng)
    : omega(store, name + ".omega", 2 * dim, dim, rng),
      omega_v(store, name + ".omega_v", dim, dim, rng, false),
      omega_t(store, name + ".omega_t", dim, dim, rng, false) {}

Var gated_fusion(const Var& i_v, const Var& i_t, const GateParams& p, Var* gate_out) {
  require_same(i_v, i_t, "gated_fusion");
  if (p.omega_v.in_features() != i_v.cols()) throw ShapeError("gated_fusion: feature width mismatch");
  const Var k = ag::sigmoid(p.omega(ag::concat_cols({i_v, i_t})));
  if (gate_out) *gate_out = k;
  const Var one_minus_k = ag::add_scalar(ag::scale(k, -1.0), 1.0);
  return ag::add(ag::mul(k, ag::tanh(p.omega_v(i_v))), ag::mul(one_minus_k, ag::tanh(p.omega_t(i_t))));
}

C2GViL::C2GViL(nn::ParamStore& store, const FusionConfig& config, Index dim, std::mt19937_64& rng)
    : config_(config) {
  coattention = CoAttentionStack(store, "fusion.coattn", config.n_coattn_layers, config.attn_mode, dim,
                                 config.attn_heads, rng);
  mcc_visual = MCCParams(store, "fusion.mcc_visual", dim, config.mcc_heads, rng);
  mcc_text = MCCParams(store, "fusion.mcc_text", dim, config.mcc_heads, rng);
  gcc_visual = GCCParams(store, "fusion.gcc_visual", dim, config.gcc_heads, rng);
  gcc_text = GCCParams(store, "fusion.gcc_text", dim, config.gcc_heads, rng);
  gate = GateParams(store, "fusion.gate", dim, rng);
}

Var C2GViL::operator()(const Var& text, const Var& visual, Index batch) const {
  require_same(text, visual, "c2g_vil_forward");
  Var t = text;
  Var v = visual;
  if (config_.use_coattention) std::tie(t, v) = coattention(t, v, batch);
  if (config_.use_mcc) {
    const Var v_cal = mcc_calibrate(v, t, mcc_visual);
    const Var t_cal = mcc_calibrate(t, v, mcc_text);
    v = v_cal;
    t = t_cal;
  }
  if (config_.use_gcc) {
    v = gcc_calibrate(v, v, gcc_visual, batch);
    t = gcc_calibrate(t, t, gcc_text, batch);
  }
  if (config_.use_gate) return gated_fusion(v, t, gate);
  return ag::scale(ag::add(ag::tanh(v), ag::tanh(t)), 0.5);
}

Var c2g_vil_forward(const Var& text, const Var& visual, const C2GViL& fusion, Index batch) {
  return fusion(text, visual, batch);
}

}  // namespace vqla::fusion
