#pragma once

// Network family F = h ∘ g_ar ∘ d: stem, (masked) residual blocks, optional
// masked attention block, and a clustering head (AC) or separable critics
// (ARL). Masks are applied at forward time as weight ⊙ mask, so masked kernel
// entries receive exactly zero gradient; inference runs the identical
// architecture with masks off and shifts removed.

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "arseg/conv.hpp"
#include "arseg/orderings.hpp"
#include "arseg/rng.hpp"
#include "arseg/tensor.hpp"

namespace arseg::model {

using core::Mode;

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------
enum class Variant { F1, F2, F3, F4 };
enum class Task { AC, ARL };

inline const char* variant_name(Variant v) {
  switch (v) {
    case Variant::F1: return "F1";
    case Variant::F2: return "F2";
    case Variant::F3: return "F3";
    default: return "F4";
  }
}
inline Variant variant_from_string(const std::string& s) {
  if (s == "F1") return Variant::F1;
  if (s == "F2") return Variant::F2;
  if (s == "F3") return Variant::F3;
  if (s == "F4") return Variant::F4;
  throw ConfigError(cat("unknown variant '", s, "' (expected F1|F2|F3|F4)"));
}
inline const char* task_name(Task t) { return t == Task::AC ? "AC" : "ARL"; }
inline Task task_from_string(const std::string& s) {
  if (s == "AC") return Task::AC;
  if (s == "ARL") return Task::ARL;
  throw ConfigError(cat("unknown task '", s, "' (expected AC|ARL)"));
}

struct NetworkConfig {
  Variant variant = Variant::F2;
  Task task = Task::AC;
  int K = 3;        // cluster count (AC head)
  int C_feat = 32;  // feature channels (ARL head)
  int output_stride = 2;
  bool attention = false;
  int attention_embed = 0;  // d; 0 -> C/2 at the insertion point
  int attention_depth = 1;  // insert after this many g_ar residual blocks
  float dropout_p = 0.0f;
  int base_channels = 64;
  int max_channels = 0;  // clamp for channel doubling; 0 = uncapped
  int n_blocks = 5;      // residual blocks total (h + g_ar)

  void validate() const {
    ARSG_CHECK_CFG(output_stride == 2 || output_stride == 4,
                   "output_stride must be 2 or 4, got ", output_stride);
    ARSG_CHECK_CFG(base_channels >= 1, "base_channels must be positive");
    ARSG_CHECK_CFG(max_channels == 0 || max_channels >= base_channels,
                   "max_channels must be 0 (uncapped) or >= base_channels");
    ARSG_CHECK_CFG(dropout_p >= 0.0f && dropout_p < 1.0f, "dropout_p must be in [0,1)");
    ARSG_CHECK_CFG(n_blocks >= 1, "need at least one residual block");
    if (task == Task::AC) ARSG_CHECK_CFG(K >= 2, "AC task needs K >= 2");
    if (task == Task::ARL) ARSG_CHECK_CFG(C_feat >= 1, "ARL task needs C_feat >= 1");
    if (variant == Variant::F4 && attention)
      throw ConfigError("F4 has an empty autoregressive path; attention cannot be inserted");
    if (attention) {
      int n_ar = (variant == Variant::F3) ? n_blocks - 1 : n_blocks;
      ARSG_CHECK_CFG(attention_depth >= 1 && attention_depth <= n_ar,
                     "attention_depth out of range");
    }
  }
};

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------
template <typename T>
struct Conv {
  core::Tensor<T> w, b;
  int F = 3, pad = 1;
  bool masked = false;  // whether conv_plan applies under forward_ordered
};

template <typename T>
Conv<T> make_conv(int c_in, int c_out, int F, bool masked, core::Rng& rng) {
  Conv<T> c;
  c.F = F;
  c.pad = F / 2;
  c.masked = masked;
  int fan_in = c_in * F * F, fan_out = c_out * F * F;
  c.w = core::Tensor<T>::xavier({c_out, c_in, F, F}, rng, fan_in, fan_out);
  c.w.set_requires_grad(true);
  c.b = core::Tensor<T>::zeros({c_out}, true);
  return c;
}

// Forward one conv layer. When a plan is given (masked layer under an
// ordering), shift the input along the plan and zero the masked weights.
template <typename T>
core::Tensor<T> conv_forward(const Conv<T>& c, const core::Tensor<T>& x,
                             const orderings::KernelMask* plan) {
  core::Tensor<T> xin = x;
  core::Tensor<T> w = c.w;
  if (plan != nullptr) {
    ARSG_CHECK_CONTRACT(plan->F == c.F, "conv plan / kernel size mismatch");
    if (plan->shift_amount > 0)
      xin = core::shift2d(x, plan->shift_direction, plan->shift_amount);
    int c_out = c.w.dim(0), c_in = c.w.dim(1);
    std::vector<T> md(static_cast<size_t>(c_out) * c_in * c.F * c.F);
    for (int oc = 0; oc < c_out; ++oc)
      for (int ic = 0; ic < c_in; ++ic)
        for (int t = 0; t < c.F * c.F; ++t)
          md[(static_cast<size_t>(oc) * c_in + ic) * c.F * c.F + t] =
              plan->mask[t] ? T(1) : T(0);
    core::Tensor<T> m = core::Tensor<T>::from_data(c.w.shape(), std::move(md));
    w = core::mul(c.w, m);
  }
  return core::conv2d(xin, w, c.b, 1, c.pad);
}

template <typename T>
struct BnLayer {
  core::Tensor<T> gamma, beta;
  // shared_ptr so the stats registry stays valid if the Network is moved
  std::shared_ptr<core::BnStats<T>> stats;
};

template <typename T>
BnLayer<T> make_bn(int C) {
  BnLayer<T> bn;
  bn.gamma = core::Tensor<T>::filled({C}, T(1), true);
  bn.beta = core::Tensor<T>::zeros({C}, true);
  bn.stats = std::make_shared<core::BnStats<T>>(C);
  return bn;
}

// Residual block: conv3x3 C->C2 + ReLU, conv1x1 C2->C2 + ReLU, zero-pad the
// input to C2, add; then two (conv1x1 + ReLU, conv1x1 + ReLU, add)
// sub-blocks. The 3x3 conv is the only spatial (maskable) one.
template <typename T>
struct ResBlock {
  Conv<T> a;            // 3x3, C -> C2
  Conv<T> b;            // 1x1, C2 -> C2
  Conv<T> r1a, r1b;     // refine sub-block 1
  Conv<T> r2a, r2b;     // refine sub-block 2
  int c_in = 0, c_out = 0;
};

template <typename T>
ResBlock<T> make_res_block(int c_in, int c_out, bool masked, core::Rng& rng) {
  ResBlock<T> blk;
  blk.c_in = c_in;
  blk.c_out = c_out;
  blk.a = make_conv<T>(c_in, c_out, 3, masked, rng);
  blk.b = make_conv<T>(c_out, c_out, 1, false, rng);
  blk.r1a = make_conv<T>(c_out, c_out, 1, false, rng);
  blk.r1b = make_conv<T>(c_out, c_out, 1, false, rng);
  blk.r2a = make_conv<T>(c_out, c_out, 1, false, rng);
  blk.r2b = make_conv<T>(c_out, c_out, 1, false, rng);
  return blk;
}

// Dropout on intermediate activations (train: zero w.p. p, scale survivors by
// 1/(1-p); eval: identity).
template <typename T>
core::Tensor<T> apply_dropout(const core::Tensor<T>& x, float p, Mode mode, core::Rng* rng) {
  ARSG_CHECK_CFG(p >= 0.0f && p < 1.0f, "dropout p must be in [0,1)");
  if (p == 0.0f || mode == Mode::eval) return x;
  ARSG_CHECK_CONTRACT(rng != nullptr, "dropout in train mode needs an rng");
  std::vector<T> md(x.numel());
  T keep = T(1) - static_cast<T>(p);
  for (auto& v : md) v = (rng->uniform() < p) ? T(0) : T(1) / keep;
  core::Tensor<T> m = core::Tensor<T>::from_data(x.shape(), std::move(md));
  return core::mul(x, m);
}

template <typename T>
struct ForwardCtx {
  const orderings::Ordering* o = nullptr;  // nullptr = inference (mask-free)
  Mode mode = Mode::train;
  core::Rng* rng = nullptr;
  float dropout_p = 0.0f;
};

template <typename T>
core::Tensor<T> res_block_forward(ResBlock<T>& blk, const core::Tensor<T>& x,
                                  ForwardCtx<T>& ctx) {
  const orderings::KernelMask* plan = nullptr;
  orderings::KernelMask km;
  if (blk.a.masked && ctx.o != nullptr) {
    km = orderings::conv_plan(*ctx.o, blk.a.F);
    plan = &km;
  }
  auto drop = [&](const core::Tensor<T>& t) {
    return apply_dropout(t, ctx.dropout_p, ctx.mode, ctx.rng);
  };
  core::Tensor<T> y = core::relu(conv_forward(blk.a, x, plan));
  y = drop(y);
  y = core::relu(conv_forward(blk.b, y, nullptr));
  core::Tensor<T> h0 = core::add(y, core::zero_pad_channels(x, blk.c_out));
  core::Tensor<T> y1 = core::relu(conv_forward(blk.r1a, h0, nullptr));
  y1 = drop(y1);
  y1 = core::relu(conv_forward(blk.r1b, y1, nullptr));
  core::Tensor<T> h1 = core::add(y1, h0);
  core::Tensor<T> y2 = core::relu(conv_forward(blk.r2a, h1, nullptr));
  y2 = drop(y2);
  y2 = core::relu(conv_forward(blk.r2b, y2, nullptr));
  return core::add(y2, h1);
}

// ---------------------------------------------------------------------------
// Attention block (single head): Q = XᵀW_q, K = XᵀW_k, V = XᵀW_v per image;
// A = softmax(QKᵀ/√d + mask_additive); X_att = (A V) W_O; output =
// merge1x1(concat(X, X_att)).
// ---------------------------------------------------------------------------
template <typename T>
struct AttentionBlock {
  core::Tensor<T> wq, wk, wv;  // C x d
  core::Tensor<T> wo;          // d x C
  Conv<T> merge;               // 1x1, 2C -> C
  int C = 0, d = 0;
};

template <typename T>
AttentionBlock<T> make_attention(int C, int d, core::Rng& rng) {
  ARSG_CHECK_CFG(d >= 1, "attention embed dim must be positive");
  AttentionBlock<T> ab;
  ab.C = C;
  ab.d = d;
  ab.wq = core::Tensor<T>::xavier({C, d}, rng, C, d);
  ab.wq.set_requires_grad(true);
  ab.wk = core::Tensor<T>::xavier({C, d}, rng, C, d);
  ab.wk.set_requires_grad(true);
  ab.wv = core::Tensor<T>::xavier({C, d}, rng, C, d);
  ab.wv.set_requires_grad(true);
  ab.wo = core::Tensor<T>::xavier({d, C}, rng, d, C);
  ab.wo.set_requires_grad(true);
  ab.merge = make_conv<T>(2 * C, C, 1, false, rng);
  return ab;
}

// mask == nullptr runs unmasked (inference).
template <typename T>
core::Tensor<T> attention_forward(AttentionBlock<T>& ab, const core::Tensor<T>& x,
                                  const orderings::AttentionMask* mask) {
  ARSG_CHECK_DIM(x.ndim() == 4 && x.dim(1) == ab.C, "attention_forward: channel mismatch");
  int N = x.dim(0), h = x.dim(2), w = x.dim(3);
  int hw = h * w;
  if (mask != nullptr)
    ARSG_CHECK_DIM(mask->H == h && mask->W == w, "attention mask built for ", mask->H, "x",
                   mask->W, ", feature map is ", h, "x", w);
  core::Tensor<T> madd;
  if (mask != nullptr)
    madd = core::Tensor<T>::from_data({hw, hw}, orderings::additive_mask<T>(*mask));
  T inv_sqrt_d = T(1) / std::sqrt(static_cast<T>(ab.d));
  std::vector<core::Tensor<T>> outs;
  outs.reserve(N);
  for (int n = 0; n < N; ++n) {
    core::Tensor<T> xi = core::reshape(core::select_image(x, n), {ab.C, hw});
    core::Tensor<T> xt = core::transpose2d(xi);  // hw x C
    core::Tensor<T> q = core::matmul(xt, ab.wq);
    core::Tensor<T> k = core::matmul(xt, ab.wk);
    core::Tensor<T> v = core::matmul(xt, ab.wv);
    core::Tensor<T> s = core::scale(core::matmul(q, core::transpose2d(k)), inv_sqrt_d);
    if (mask != nullptr) s = core::add(s, madd);
    core::Tensor<T> a = core::softmax(s, 1);
    core::Tensor<T> att = core::matmul(core::matmul(a, v), ab.wo);  // hw x C
    outs.push_back(core::reshape(core::transpose2d(att), {1, ab.C, h, w}));
  }
  core::Tensor<T> x_att = core::concat_batch(outs);
  return conv_forward(ab.merge, core::concat_channels(x, x_att), nullptr);
}

// ---------------------------------------------------------------------------
// Separable critics (ARL): φ = conv1x1->2C + ReLU, conv1x1->2C + ReLU,
// residual conv1x1 on the input, add, batchnorm.
// ---------------------------------------------------------------------------
template <typename T>
struct Critic {
  Conv<T> c1, c2, cr;
  BnLayer<T> bn;
};

template <typename T>
Critic<T> make_critic(int c_in, core::Rng& rng) {
  Critic<T> cr;
  cr.c1 = make_conv<T>(c_in, 2 * c_in, 1, false, rng);
  cr.c2 = make_conv<T>(2 * c_in, 2 * c_in, 1, false, rng);
  cr.cr = make_conv<T>(c_in, 2 * c_in, 1, false, rng);
  cr.bn = make_bn<T>(2 * c_in);
  return cr;
}

template <typename T>
core::Tensor<T> critic_forward(Critic<T>& cr, const core::Tensor<T>& y, Mode mode) {
  core::Tensor<T> z = core::relu(conv_forward(cr.c1, y, nullptr));
  z = core::relu(conv_forward(cr.c2, z, nullptr));
  z = core::add(z, conv_forward(cr.cr, y, nullptr));
  return core::batchnorm2d(z, cr.bn.gamma, cr.bn.beta, *cr.bn.stats, mode);
}

// ---------------------------------------------------------------------------
// Network
// ---------------------------------------------------------------------------
template <typename T>
struct Stem {
  Conv<T> conv;  // 3x3, stride realized as conv s1 (+ subsample for OS 4)
  BnLayer<T> bn;
  bool strided = false;  // OS 4: subsample x2 after the conv
};

template <typename T>
struct Network {
  NetworkConfig config;
  uint64_t init_seed = 0;

  std::optional<Stem<T>> stem;            // F2, F3, F4
  std::vector<Conv<T>> f1_down;           // F1: strided masked convs replacing the stem
  std::vector<ResBlock<T>> h_blocks;      // unmasked blocks (F3: 1, F4: all)
  std::vector<ResBlock<T>> ar_blocks;     // masked blocks
  std::optional<AttentionBlock<T>> attn;  // after ar_blocks[config.attention_depth-1]
  Conv<T> head;                           // 1x1 -> K or C_feat
  std::optional<Critic<T>> crit1, crit2;  // ARL only

  std::vector<std::pair<std::string, core::Tensor<T>>> params;
  std::vector<std::pair<std::string, std::shared_ptr<core::BnStats<T>>>> stat_blocks;

  int feature_channels() const { return head.w.dim(1); }

  void register_conv(const std::string& name, Conv<T>& c) {
    params.emplace_back(name + ".w", c.w);
    params.emplace_back(name + ".b", c.b);
  }
  void register_bn(const std::string& name, BnLayer<T>& bn) {
    params.emplace_back(name + ".gamma", bn.gamma);
    params.emplace_back(name + ".beta", bn.beta);
    stat_blocks.emplace_back(name, bn.stats);
  }
  void register_block(const std::string& name, ResBlock<T>& blk) {
    register_conv(name + ".a", blk.a);
    register_conv(name + ".b", blk.b);
    register_conv(name + ".r1a", blk.r1a);
    register_conv(name + ".r1b", blk.r1b);
    register_conv(name + ".r2a", blk.r2a);
    register_conv(name + ".r2b", blk.r2b);
  }

  void zero_grad() {
    for (auto& [name, p] : params) p.zero_grad();
  }
  int64_t param_count() const {
    int64_t n = 0;
    for (const auto& [name, p] : params) n += p.numel();
    return n;
  }
};

template <typename T>
Network<T> build_network(const NetworkConfig& config, core::Rng& rng) {
  config.validate();
  Network<T> net;
  net.config = config;
  net.init_seed = rng.seed();

  auto clamp_ch = [&](int c) {
    return (config.max_channels > 0) ? std::min(c, config.max_channels) : c;
  };

  int c = config.base_channels;
  if (config.variant == Variant::F1) {
    // Stem is identity; downsampling happens via strided masked convs.
    net.f1_down.push_back(make_conv<T>(3, c, 3, true, rng));
    if (config.output_stride == 4) net.f1_down.push_back(make_conv<T>(c, c, 3, true, rng));
    for (size_t i = 0; i < net.f1_down.size(); ++i)
      net.register_conv(cat("f1down", i), net.f1_down[i]);
  } else {
    Stem<T> stem;
    stem.conv = make_conv<T>(3, c, 3, false, rng);
    stem.bn = make_bn<T>(c);
    stem.strided = (config.output_stride == 4);
    net.stem = std::move(stem);
    net.register_conv("stem.conv", net.stem->conv);
    net.register_bn("stem.bn", net.stem->bn);
  }

  int n_h = 0, n_ar = config.n_blocks;
  if (config.variant == Variant::F3) {
    n_h = 1;
    n_ar = config.n_blocks - 1;
  } else if (config.variant == Variant::F4) {
    n_h = config.n_blocks;
    n_ar = 0;
  }

  for (int i = 0; i < n_h; ++i) {
    int c_out = clamp_ch(2 * c);
    net.h_blocks.push_back(make_res_block<T>(c, c_out, false, rng));
    net.register_block(cat("h", i), net.h_blocks.back());
    c = c_out;
  }
  for (int i = 0; i < n_ar; ++i) {
    int c_out = clamp_ch(2 * c);
    net.ar_blocks.push_back(make_res_block<T>(c, c_out, true, rng));
    net.register_block(cat("ar", i), net.ar_blocks.back());
    c = c_out;
    if (config.attention && i + 1 == config.attention_depth) {
      int d = (config.attention_embed > 0) ? config.attention_embed : std::max(1, c / 2);
      net.attn = make_attention<T>(c, d, rng);
      net.params.emplace_back("attn.wq", net.attn->wq);
      net.params.emplace_back("attn.wk", net.attn->wk);
      net.params.emplace_back("attn.wv", net.attn->wv);
      net.params.emplace_back("attn.wo", net.attn->wo);
      net.register_conv("attn.merge", net.attn->merge);
    }
  }

  int c_head = (config.task == Task::AC) ? config.K : config.C_feat;
  net.head = make_conv<T>(c, c_head, 1, false, rng);
  net.register_conv("head", net.head);

  if (config.task == Task::ARL) {
    net.crit1 = make_critic<T>(config.C_feat, rng);
    net.crit2 = make_critic<T>(config.C_feat, rng);
    net.register_conv("crit1.c1", net.crit1->c1);
    net.register_conv("crit1.c2", net.crit1->c2);
    net.register_conv("crit1.cr", net.crit1->cr);
    net.register_bn("crit1.bn", net.crit1->bn);
    net.register_conv("crit2.c1", net.crit2->c1);
    net.register_conv("crit2.c2", net.crit2->c2);
    net.register_conv("crit2.cr", net.crit2->cr);
    net.register_bn("crit2.bn", net.crit2->bn);
  }
  return net;
}

// Shared forward: o == nullptr means inference (no masks, no shifts,
// attention unmasked). The decoder output is the head map upsampled to the
// input resolution (softmax over channels for AC).
template <typename T>
core::Tensor<T> network_forward(Network<T>& net, const core::Tensor<T>& x,
                                const orderings::Ordering* o, Mode mode,
                                core::Rng* rng = nullptr) {
  ARSG_CHECK_DIM(x.ndim() == 4 && x.dim(1) == 3, "network input must be Nx3xHxW");
  int H = x.dim(2), W = x.dim(3);
  ARSG_CHECK_DIM(H % net.config.output_stride == 0 && W % net.config.output_stride == 0,
                 "input dims must be divisible by output_stride");
  if (o != nullptr && o->kind == orderings::Kind::zigzag && !net.attn.has_value())
    throw ConfigError("zigzag orderings require attention (conv masks cannot realize them)");

  ForwardCtx<T> ctx;
  ctx.o = o;
  ctx.mode = mode;
  ctx.rng = rng;
  ctx.dropout_p = net.config.dropout_p;

  core::Tensor<T> h = x;
  if (net.stem.has_value()) {
    Stem<T>& st = *net.stem;
    h = conv_forward(st.conv, h, nullptr);
    if (st.strided) h = core::subsample2d(h, 2);
    h = core::batchnorm2d(h, st.bn.gamma, st.bn.beta, *st.bn.stats, mode);
    h = core::relu(h);
    h = core::maxpool2d(h, 3, 2, 1);
  }
  for (Conv<T>& dc : net.f1_down) {
    const orderings::KernelMask* plan = nullptr;
    orderings::KernelMask km;
    if (o != nullptr) {
      km = orderings::conv_plan(*o, dc.F);
      plan = &km;
    }
    h = core::relu(conv_forward(dc, h, plan));
    h = core::subsample2d(h, 2);
  }
  for (ResBlock<T>& blk : net.h_blocks) h = res_block_forward(blk, h, ctx);

  int depth = 0;
  for (ResBlock<T>& blk : net.ar_blocks) {
    h = res_block_forward(blk, h, ctx);
    ++depth;
    if (net.attn.has_value() && depth == net.config.attention_depth) {
      if (o != nullptr) {
        orderings::AttentionMask am = orderings::attention_mask(*o, h.dim(2), h.dim(3));
        h = attention_forward(*net.attn, h, &am);
      } else {
        h = attention_forward<T>(*net.attn, h, nullptr);
      }
    }
  }

  core::Tensor<T> logits = conv_forward(net.head, h, nullptr);
  core::Tensor<T> up = core::bilinear_upsample(logits, H, W);
  if (net.config.task == Task::AC) return core::softmax(up, 1);
  return up;
}

template <typename T>
core::Tensor<T> forward_ordered(Network<T>& net, const core::Tensor<T>& x,
                                const orderings::Ordering& o, Mode mode = Mode::train,
                                core::Rng* rng = nullptr) {
  return network_forward(net, x, &o, mode, rng);
}

template <typename T>
core::Tensor<T> forward_inference(Network<T>& net, const core::Tensor<T>& x,
                                  Mode mode = Mode::eval) {
  return network_forward(net, x, nullptr, mode);
}

// ---------------------------------------------------------------------------
// F1-style flat stack fixture: n masked convs at constant resolution with an
// optional attention block, used by the soundness/blind-spot analyses and the
// receptive-field tool.
// ---------------------------------------------------------------------------
template <typename T>
struct F1Stack {
  std::vector<Conv<T>> layers;
  std::optional<AttentionBlock<T>> attn;
  int attn_after = 0;  // insert attention after this many conv layers
};

template <typename T>
F1Stack<T> build_f1_stack(int n_layers, int c_in, int channels, int F, bool attention,
                          core::Rng& rng, int attn_after = 1) {
  ARSG_CHECK_CFG(n_layers >= 1, "stack needs at least one layer");
  F1Stack<T> st;
  int c = c_in;
  for (int i = 0; i < n_layers; ++i) {
    st.layers.push_back(make_conv<T>(c, channels, F, true, rng));
    c = channels;
  }
  if (attention) {
    st.attn = make_attention<T>(channels, std::max(1, channels / 2), rng);
    st.attn_after = attn_after;
  }
  return st;
}

template <typename T>
core::Tensor<T> f1_stack_forward(F1Stack<T>& st, const core::Tensor<T>& x,
                                 const orderings::Ordering* o, bool final_relu = false) {
  core::Tensor<T> h = x;
  int i = 0;
  for (Conv<T>& c : st.layers) {
    const orderings::KernelMask* plan = nullptr;
    orderings::KernelMask km;
    if (o != nullptr) {
      km = orderings::conv_plan(*o, c.F);
      plan = &km;
    }
    h = conv_forward(c, h, plan);
    ++i;
    if (i < static_cast<int>(st.layers.size()) || final_relu) h = core::relu(h);
    if (st.attn.has_value() && i == st.attn_after) {
      if (o != nullptr) {
        orderings::AttentionMask am = orderings::attention_mask(*o, h.dim(2), h.dim(3));
        h = attention_forward(*st.attn, h, &am);
      } else {
        h = attention_forward<T>(*st.attn, h, nullptr);
      }
    }
  }
  return h;
}

// ---------------------------------------------------------------------------
// Checkpoints. Layout: magic "ARSG", version u32 LE, param count u32; per
// param: name len u16 + UTF-8 name, ndim u8, extents u32 x ndim, raw f32 LE
// data; then running-stats blocks in the same layout (<name>.mean /
// <name>.var); trailing CRC32 of all preceding bytes.
// ---------------------------------------------------------------------------
inline uint32_t crc32_update(uint32_t crc, const uint8_t* data, size_t n) {
  static const auto table = [] {
    std::array<uint32_t, 256> t{};
    for (uint32_t i = 0; i < 256; ++i) {
      uint32_t c = i;
      for (int k = 0; k < 8; ++k) c = (c & 1u) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
      t[i] = c;
    }
    return t;
  }();
  crc ^= 0xFFFFFFFFu;
  for (size_t i = 0; i < n; ++i) crc = table[(crc ^ data[i]) & 0xFFu] ^ (crc >> 8);
  return crc ^ 0xFFFFFFFFu;
}

namespace detail {

struct CkptWriter {
  std::ofstream out;
  uint32_t crc = 0;
  explicit CkptWriter(const std::string& path) : out(path, std::ios::binary) {
    if (!out) throw IoError(cat("cannot open '", path, "' for writing"));
  }
  void raw(const void* p, size_t n) {
    out.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
    crc = crc32_update(crc, static_cast<const uint8_t*>(p), n);
  }
  void u16(uint16_t v) {
    uint8_t b[2] = {static_cast<uint8_t>(v), static_cast<uint8_t>(v >> 8)};
    raw(b, 2);
  }
  void u32(uint32_t v) {
    uint8_t b[4] = {static_cast<uint8_t>(v), static_cast<uint8_t>(v >> 8),
                    static_cast<uint8_t>(v >> 16), static_cast<uint8_t>(v >> 24)};
    raw(b, 4);
  }
  void u8(uint8_t v) { raw(&v, 1); }
  void f32s(const float* p, size_t n) { raw(p, n * 4); }
  void block(const std::string& name, const std::vector<int>& shape, const float* data,
             size_t n) {
    if (name.size() > 0xFFFF) throw IoError("parameter name too long");
    u16(static_cast<uint16_t>(name.size()));
    raw(name.data(), name.size());
    u8(static_cast<uint8_t>(shape.size()));
    for (int e : shape) u32(static_cast<uint32_t>(e));
    f32s(data, n);
  }
};

struct CkptReader {
  std::ifstream in;
  uint32_t crc = 0;
  std::string path;
  explicit CkptReader(const std::string& p) : in(p, std::ios::binary), path(p) {
    if (!in) throw IoError(cat("cannot open checkpoint '", p, "'"));
  }
  void raw(void* p, size_t n) {
    in.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (static_cast<size_t>(in.gcount()) != n)
      throw ParseError(cat("checkpoint '", path, "': truncated at byte ",
                           static_cast<long long>(in.tellg())));
    crc = crc32_update(crc, static_cast<const uint8_t*>(p), n);
  }
  uint16_t u16() {
    uint8_t b[2];
    raw(b, 2);
    return static_cast<uint16_t>(b[0] | (b[1] << 8));
  }
  uint32_t u32() {
    uint8_t b[4];
    raw(b, 4);
    return b[0] | (b[1] << 8) | (b[2] << 16) | (static_cast<uint32_t>(b[3]) << 24);
  }
  uint8_t u8() {
    uint8_t b;
    raw(&b, 1);
    return b;
  }
};

}  // namespace detail

// float-only: checkpoints store f32 payloads.
inline void save_checkpoint(Network<float>& net, const std::string& path,
                            uint32_t version = 1) {
  detail::CkptWriter w(path);
  w.raw("ARSG", 4);
  w.u32(version);
  w.u32(static_cast<uint32_t>(net.params.size()));
  for (auto& [name, p] : net.params)
    w.block(name, p.shape(), p.data().data(), static_cast<size_t>(p.numel()));
  w.u32(static_cast<uint32_t>(2 * net.stat_blocks.size()));
  for (auto& [name, st] : net.stat_blocks) {
    std::vector<int> shape = {static_cast<int>(st->mean.size())};
    w.block(name + ".mean", shape, st->mean.data(), st->mean.size());
    w.block(name + ".var", shape, st->var.data(), st->var.size());
  }
  uint32_t crc = w.crc;
  w.out.write(reinterpret_cast<const char*>(&crc), 4);  // LE on all targets we build
  if (!w.out) throw IoError(cat("write failure on '", path, "'"));
}

inline void load_checkpoint(Network<float>& net, const std::string& path) {
  detail::CkptReader r(path);
  char magic[4];
  r.raw(magic, 4);
  if (std::memcmp(magic, "ARSG", 4) != 0)
    throw ParseError(cat("checkpoint '", path, "': bad magic bytes"));
  uint32_t version = r.u32();
  if (version != 1) throw ParseError(cat("checkpoint '", path, "': unsupported version ", version));

  auto read_block = [&](std::string& name, std::vector<int>& shape, std::vector<float>& data) {
    uint16_t len = r.u16();
    name.resize(len);
    r.raw(name.data(), len);
    uint8_t nd = r.u8();
    shape.resize(nd);
    int64_t n = 1;
    for (int i = 0; i < nd; ++i) {
      shape[i] = static_cast<int>(r.u32());
      n *= shape[i];
    }
    data.resize(static_cast<size_t>(n));
    r.raw(data.data(), static_cast<size_t>(n) * 4);
  };

  uint32_t n_params = r.u32();
  if (n_params != net.params.size())
    throw ParseError(cat("checkpoint '", path, "': has ", n_params, " parameters, network has ",
                         net.params.size()));
  for (auto& [pname, p] : net.params) {
    std::string name;
    std::vector<int> shape;
    std::vector<float> data;
    read_block(name, shape, data);
    if (name != pname)
      throw ParseError(cat("checkpoint '", path, "': parameter '", name, "' where '", pname,
                           "' expected (architecture mismatch)"));
    if (shape != p.shape())
      throw ParseError(cat("checkpoint '", path, "': shape mismatch for '", name, "'"));
    std::copy(data.begin(), data.end(), p.data().begin());
  }
  uint32_t n_stats = r.u32();
  if (n_stats != 2 * net.stat_blocks.size())
    throw ParseError(cat("checkpoint '", path, "': has ", n_stats, " stats blocks, network has ",
                         2 * net.stat_blocks.size()));
  for (auto& [sname, st] : net.stat_blocks) {
    for (int part = 0; part < 2; ++part) {
      std::string name;
      std::vector<int> shape;
      std::vector<float> data;
      read_block(name, shape, data);
      std::string expect = sname + (part == 0 ? ".mean" : ".var");
      if (name != expect || data.size() != st->mean.size())
        throw ParseError(cat("checkpoint '", path, "': bad stats block '", name, "'"));
      if (part == 0)
        std::copy(data.begin(), data.end(), st->mean.begin());
      else
        std::copy(data.begin(), data.end(), st->var.begin());
    }
  }
  uint32_t stored_crc = r.crc;  // CRC of all bytes up to (not incl.) the trailer
  uint32_t trailer;
  r.in.read(reinterpret_cast<char*>(&trailer), 4);
  if (r.in.gcount() != 4) throw ParseError(cat("checkpoint '", path, "': missing CRC trailer"));
  if (trailer != stored_crc)
    throw ParseError(cat("checkpoint '", path, "': CRC mismatch (corrupt file)"));
}

}  // namespace arseg::model
