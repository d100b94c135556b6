#pragma once

// Receptive-field support analysis: which input positions can influence the
// center output pixel of a masked-conv stack under a given ordering. Built on
// the F1-style flat stack with strictly positive weights, so a position has
// nonzero gradient exactly when a dependency path reaches it (no sign
// cancellation, no dead relu paths).

#include <cmath>

#include "arseg/model.hpp"

namespace arseg::model {

struct RfSupport {
  int H = 0, W = 0;
  std::vector<uint8_t> support;  // H*W row-major; 1 = center depends on it

  int count() const {
    int n = 0;
    for (uint8_t v : support) n += (v != 0);
    return n;
  }
  bool at(int i, int j) const { return support[static_cast<size_t>(i) * W + j] != 0; }
};

// Gradient of the center output pixel w.r.t. every input pixel through
// `layers` masked convs (+ one attention block with the ordering's mask when
// `attention`). Zigzag orderings without attention are rejected, mirroring
// the network rule.
inline RfSupport rf_support(const orderings::Ordering& o, int layers, int H, int W,
                            bool attention, uint64_t seed = 123) {
  ARSG_CHECK_CFG(layers >= 1, "rf_support: need at least one layer");
  ARSG_CHECK_CFG(H >= 1 && W >= 1, "rf_support: bad size");
  if (o.kind == orderings::Kind::zigzag && !attention)
    throw ConfigError("zigzag orderings require attention (conv masks cannot realize them)");

  core::Rng rng(seed);
  F1Stack<double> st = build_f1_stack<double>(layers, 1, 4, 3, attention, rng);
  for (Conv<double>& c : st.layers) {
    for (double& v : c.w.impl()->data) v = std::abs(v) + 0.05;
    c.w.set_requires_grad(false);
    c.b.set_requires_grad(false);
  }
  if (st.attn.has_value()) {
    // Positive value/output/merge paths keep attention contributions strictly
    // positive; q/k only shape the (positive) softmax weights.
    for (auto* t : {&st.attn->wv, &st.attn->wo, &st.attn->merge.w})
      for (double& v : t->impl()->data) v = std::abs(v) + 0.05;
    for (auto* t : {&st.attn->wq, &st.attn->wk, &st.attn->wv, &st.attn->wo, &st.attn->merge.w,
                    &st.attn->merge.b})
      t->set_requires_grad(false);
  }

  auto x = core::Tensor<double>::filled({1, 1, H, W}, 1.0, /*requires_grad=*/true);
  core::Tensor<double> out = f1_stack_forward(st, x, &o);
  // Scalar: sum over channels of the center position.
  int ci = H / 2, cj = W / 2;
  std::vector<double> sel(static_cast<size_t>(out.numel()), 0.0);
  int C = out.dim(1);
  for (int k = 0; k < C; ++k)
    sel[(static_cast<size_t>(k) * H + ci) * W + cj] = 1.0;
  core::Tensor<double> pick = core::Tensor<double>::from_data(out.shape(), std::move(sel));
  core::Tensor<double> scalar = core::sum(core::mul(out, pick));
  scalar.backward();

  RfSupport rf;
  rf.H = H;
  rf.W = W;
  rf.support.assign(static_cast<size_t>(H) * W, 0);
  const auto& g = x.impl()->grad;
  for (size_t q = 0; q < rf.support.size(); ++q) rf.support[q] = (g[q] != 0.0) ? 1 : 0;
  return rf;
}

// The ordering's allowed-past set of the center pixel (rank <= center's),
// the reference set for blind-spot analyses.
inline RfSupport allowed_past_of_center(const orderings::Ordering& o, int H, int W) {
  orderings::AttentionMask am = orderings::attention_mask(o, H, W);
  int center = (H / 2) * W + (W / 2);
  RfSupport rf;
  rf.H = H;
  rf.W = W;
  rf.support.assign(static_cast<size_t>(H) * W, 0);
  for (int m = 0; m < H * W; ++m) rf.support[static_cast<size_t>(m)] = am.at(center, m) ? 1 : 0;
  return rf;
}

}  // namespace arseg::model
