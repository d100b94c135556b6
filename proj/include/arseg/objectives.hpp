#pragma once

// Training losses. L_AC: exact mutual information of the K x K joint
// co-assignment distribution accumulated over small displacements, maximized
// (loss = -MI, bounded in [-ln K, 0]). L_ARL: InfoNCE over separable-critic
// scores with in-image displaced positives and all positions of one other
// image as negatives (objective = -loss, bounded by ln N).

#include <cmath>
#include <utility>
#include <vector>

#include "arseg/model.hpp"
#include "arseg/tensor.hpp"

namespace arseg::objectives {

// ---------------------------------------------------------------------------
// Displacements
// ---------------------------------------------------------------------------
struct DisplacementSet {
  std::vector<std::pair<int, int>> offsets;  // (du rows, dv cols)
};

// The 10 defaults: center, the 8-neighborhood, and (2,0).
inline DisplacementSet default_displacements() {
  return {{{0, 0}, {1, 0}, {-1, 0}, {0, 1}, {0, -1}, {1, 1}, {1, -1}, {-1, 1}, {-1, -1}, {2, 0}}};
}

inline void check_displacements(const DisplacementSet& omega, int h, int w) {
  ARSG_CHECK_CFG(!omega.offsets.empty(), "displacement set must be non-empty");
  for (auto [du, dv] : omega.offsets) {
    int m = std::max(std::abs(du), std::abs(dv));
    ARSG_CHECK_CFG(2 * m < std::min(h, w), "displacement (", du, ",", dv,
                   ") too large for ", h, "x", w, " maps");
  }
}

// ---------------------------------------------------------------------------
// Row-matrix views of NCHW maps: (B*h*w) x K with row index (n, i, j).
// ---------------------------------------------------------------------------
template <typename T>
core::Tensor<T> to_rows(const core::Tensor<T>& y) {
  ARSG_CHECK_DIM(y.ndim() == 4, "to_rows: input must be 4-d");
  int N = y.dim(0), K = y.dim(1), H = y.dim(2), W = y.dim(3);
  int64_t hw = static_cast<int64_t>(H) * W;
  std::vector<T> out(y.numel());
  const T* p = y.data().data();
  for (int n = 0; n < N; ++n)
    for (int k = 0; k < K; ++k) {
      const T* src = p + (static_cast<int64_t>(n) * K + k) * hw;
      T* dst = out.data() + static_cast<int64_t>(n) * hw * K + k;
      for (int64_t q = 0; q < hw; ++q) dst[q * K] = src[q];
    }
  auto iy = y.impl();
  return core::detail::make_result<T>(
      {static_cast<int>(N * hw), K}, std::move(out), "to_rows", {y},
      [iy, N, K, hw](const core::TensorImpl<T>& o) {
        if (!iy->requires_grad) return;
        iy->ensure_grad();
        for (int n = 0; n < N; ++n)
          for (int k = 0; k < K; ++k) {
            T* dst = iy->grad.data() + (static_cast<int64_t>(n) * K + k) * hw;
            const T* src = o.grad.data() + static_cast<int64_t>(n) * hw * K + k;
            for (int64_t q = 0; q < hw; ++q) dst[q] += src[q * K];
          }
      });
}

// Column-wise concatenation of two 2-d tensors with equal row counts.
template <typename T>
core::Tensor<T> concat_cols(const core::Tensor<T>& a, const core::Tensor<T>& b) {
  ARSG_CHECK_DIM(a.ndim() == 2 && b.ndim() == 2 && a.dim(0) == b.dim(0),
                 "concat_cols: need 2-d tensors with equal rows");
  int M = a.dim(0), Na = a.dim(1), Nb = b.dim(1);
  std::vector<T> out(static_cast<int64_t>(M) * (Na + Nb));
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  for (int i = 0; i < M; ++i) {
    std::copy(pa + static_cast<int64_t>(i) * Na, pa + static_cast<int64_t>(i + 1) * Na,
              out.begin() + static_cast<int64_t>(i) * (Na + Nb));
    std::copy(pb + static_cast<int64_t>(i) * Nb, pb + static_cast<int64_t>(i + 1) * Nb,
              out.begin() + static_cast<int64_t>(i) * (Na + Nb) + Na);
  }
  auto ia = a.impl();
  auto ib = b.impl();
  return core::detail::make_result<T>(
      {M, Na + Nb}, std::move(out), "concat_cols", {a, b},
      [ia, ib, M, Na, Nb](const core::TensorImpl<T>& o) {
        for (int i = 0; i < M; ++i) {
          const T* go = o.grad.data() + static_cast<int64_t>(i) * (Na + Nb);
          if (ia->requires_grad) {
            ia->ensure_grad();
            T* ga = ia->grad.data() + static_cast<int64_t>(i) * Na;
            for (int c = 0; c < Na; ++c) ga[c] += go[c];
          }
          if (ib->requires_grad) {
            ib->ensure_grad();
            T* gb = ib->grad.data() + static_cast<int64_t>(i) * Nb;
            for (int c = 0; c < Nb; ++c) gb[c] += go[Na + c];
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Joint distribution and mutual information
// ---------------------------------------------------------------------------
struct JointDistribution {
  int K = 0;
  std::vector<double> P;  // K x K, row-major
  double at(int a, int b) const { return P[static_cast<size_t>(a) * K + b]; }
};

template <typename T>
void check_simplex(const core::Tensor<T>& y, double tol = 1e-3) {
  ARSG_CHECK_DIM(y.ndim() == 4, "simplex check: input must be 4-d");
  int N = y.dim(0), K = y.dim(1);
  int64_t hw = static_cast<int64_t>(y.dim(2)) * y.dim(3);
  const T* p = y.data().data();
  for (int n = 0; n < N; ++n)
    for (int64_t q = 0; q < hw; ++q) {
      double s = 0;
      for (int k = 0; k < K; ++k) s += p[(static_cast<int64_t>(n) * K + k) * hw + q];
      if (std::abs(s - 1.0) > tol)
        throw ContractError(cat("joint_distribution: non-simplex input, pixel channel sum ", s,
                                " at image ", n, " position ", q));
    }
}

// Differentiable joint: sum_u to_rows(y)^T to_rows(shift_u(y')), normalized to
// total mass 1, then symmetrized. Zero-padded shifts make only the overlap
// region contribute.
template <typename T>
core::Tensor<T> joint_tensor(const core::Tensor<T>& y, const core::Tensor<T>& yp,
                             const DisplacementSet& omega) {
  ARSG_CHECK_DIM(y.ndim() == 4 && yp.ndim() == 4 && y.shape() == yp.shape(),
                 "joint: views must share shape B x K x h x w");
  check_displacements(omega, y.dim(2), y.dim(3));
  check_simplex(y);
  check_simplex(yp);
  core::Tensor<T> rows_t = core::transpose2d(to_rows(y));  // K x BHW
  core::Tensor<T> acc;
  bool first = true;
  for (auto [du, dv] : omega.offsets) {
    core::Tensor<T> shifted = core::shift2d_offset(yp, du, dv);
    core::Tensor<T> pu = core::matmul(rows_t, to_rows(shifted));  // K x K
    acc = first ? pu : core::add(acc, pu);
    first = false;
  }
  core::Tensor<T> pn = core::normalize_sum(acc);
  return core::scale(core::add(pn, core::transpose2d(pn)), T(0.5));
}

// Non-differentiable [OP] form.
template <typename T>
JointDistribution joint_distribution(const core::Tensor<T>& y, const core::Tensor<T>& yp,
                                     const DisplacementSet& omega) {
  core::NoGradGuard guard;
  core::Tensor<T> p = joint_tensor(y, yp, omega);
  JointDistribution jd;
  jd.K = p.dim(0);
  jd.P.assign(p.data().begin(), p.data().end());
  return jd;
}

inline constexpr double kMiEps = 1e-12;

inline double mutual_information(const JointDistribution& jd) {
  int K = jd.K;
  std::vector<double> r(K, 0.0), c(K, 0.0);
  for (int a = 0; a < K; ++a)
    for (int b = 0; b < K; ++b) {
      r[a] += jd.at(a, b);
      c[b] += jd.at(a, b);
    }
  double mi = 0.0;
  for (int a = 0; a < K; ++a)
    for (int b = 0; b < K; ++b) {
      double p = jd.at(a, b);
      mi += p * std::log((p + kMiEps) / ((r[a] + kMiEps) * (c[b] + kMiEps)));
    }
  return mi;
}

// Differentiable MI of a K x K joint.
// d MI / d P_ab = ln(P_ab+e) - ln(r_a+e) - ln(c_b+e)
//               + P_ab/(P_ab+e) - r_a/(r_a+e) - c_b/(c_b+e).
template <typename T>
core::Tensor<T> mi_from_joint(const core::Tensor<T>& p) {
  ARSG_CHECK_DIM(p.ndim() == 2 && p.dim(0) == p.dim(1), "mi_from_joint: joint must be K x K");
  int K = p.dim(0);
  const T* pd = p.data().data();
  std::vector<double> r(K, 0.0), c(K, 0.0);
  for (int a = 0; a < K; ++a)
    for (int b = 0; b < K; ++b) {
      double v = pd[static_cast<size_t>(a) * K + b];
      r[a] += v;
      c[b] += v;
    }
  double mi = 0.0;
  for (int a = 0; a < K; ++a)
    for (int b = 0; b < K; ++b) {
      double v = pd[static_cast<size_t>(a) * K + b];
      mi += v * std::log((v + kMiEps) / ((r[a] + kMiEps) * (c[b] + kMiEps)));
    }
  auto ip = p.impl();
  return core::detail::make_result<T>(
      {1}, {static_cast<T>(mi)}, "mi_from_joint", {p},
      [ip, K, r = std::move(r), c = std::move(c)](const core::TensorImpl<T>& o) {
        if (!ip->requires_grad) return;
        ip->ensure_grad();
        T g = o.grad[0];
        for (int a = 0; a < K; ++a)
          for (int b = 0; b < K; ++b) {
            double v = ip->data[static_cast<size_t>(a) * K + b];
            double d = std::log(v + kMiEps) - std::log(r[a] + kMiEps) - std::log(c[b] + kMiEps) +
                       v / (v + kMiEps) - r[a] / (r[a] + kMiEps) - c[b] / (c[b] + kMiEps);
            ip->grad[static_cast<size_t>(a) * K + b] += g * static_cast<T>(d);
          }
      });
}

// L_AC = -MI(joint(y, y', omega)); in [-ln K, 0].
template <typename T>
core::Tensor<T> ac_loss(const core::Tensor<T>& y, const core::Tensor<T>& yp,
                        const DisplacementSet& omega) {
  return core::neg(mi_from_joint(joint_tensor(y, yp, omega)));
}

// ---------------------------------------------------------------------------
// InfoNCE (L_ARL)
// ---------------------------------------------------------------------------

// Per-anchor term for one displacement u: lse(negatives U {pos_u}) - pos_u -
// ln N, with N = hw + 1; negatives are all positions of the ring partner
// (i+1 mod B). Displaced positives are averaged per anchor over valid u; loss
// is the mean over anchors. Reported objective = -loss <= ln N, and constant
// scores give exactly 0.
template <typename T>
core::Tensor<T> infonce_loss(const core::Tensor<T>& y, const core::Tensor<T>& yp,
                             model::Critic<T>& crit1, model::Critic<T>& crit2,
                             const DisplacementSet& omega, core::Rng& rng,
                             core::Mode mode = core::Mode::train) {
  (void)rng;  // pairing is the fixed ring i -> i+1; kept for interface stability
  ARSG_CHECK_DIM(y.ndim() == 4 && yp.ndim() == 4 && y.shape() == yp.shape(),
                 "infonce: views must share shape");
  int B = y.dim(0), h = y.dim(2), w = y.dim(3);
  if (B < 2) throw ConfigError("infonce: negatives need at least 2 images per batch");
  check_displacements(omega, h, w);
  int hw = h * w;

  // Displacements with (0,0) forced in, deduplicated.
  std::vector<std::pair<int, int>> offs{{0, 0}};
  for (auto u : omega.offsets)
    if (!(u.first == 0 && u.second == 0)) offs.push_back(u);

  core::Tensor<T> z = model::critic_forward(crit1, y, mode);    // B x 2C x h x w
  core::Tensor<T> zp = model::critic_forward(crit2, yp, mode);  // B x 2C x h x w
  int C2 = z.dim(1);

  // Per-anchor validity masks and counts per displacement (constants).
  std::vector<core::Tensor<T>> valid;
  std::vector<T> counts(static_cast<size_t>(hw), T(0));
  valid.reserve(offs.size());
  for (auto [du, dv] : offs) {
    std::vector<T> m(static_cast<size_t>(hw), T(0));
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j)
        if (i + du >= 0 && i + du < h && j + dv >= 0 && j + dv < w) {
          m[static_cast<size_t>(i) * w + j] = T(1);
          counts[static_cast<size_t>(i) * w + j] += T(1);
        }
    valid.push_back(core::Tensor<T>::from_data({hw}, std::move(m)));
  }
  std::vector<T> inv_counts(static_cast<size_t>(hw));
  for (int q = 0; q < hw; ++q) inv_counts[q] = T(1) / std::max(counts[q], T(1));
  core::Tensor<T> inv_count_t = core::Tensor<T>::from_data({hw}, std::move(inv_counts));

  core::Tensor<T> total;
  bool first_total = true;
  for (int i = 0; i < B; ++i) {
    int j = (i + 1) % B;
    core::Tensor<T> zi4 = core::select_image(z, i);
    core::Tensor<T> zt = core::transpose2d(core::reshape(zi4, {C2, hw}));       // hw x 2C
    core::Tensor<T> negk = core::reshape(core::select_image(zp, j), {C2, hw});  // 2C x hw
    core::Tensor<T> neg = core::matmul(zt, negk);                               // hw x hw
    core::Tensor<T> zpi4 = core::select_image(zp, i);

    core::Tensor<T> img_terms;
    bool first_u = true;
    for (size_t ui = 0; ui < offs.size(); ++ui) {
      auto [du, dv] = offs[ui];
      core::Tensor<T> aligned = core::shift2d_offset(zpi4, -du, -dv);  // (a,b) -> zp(a+du,b+dv)
      core::Tensor<T> pos =
          core::reshape(core::sum_channels(core::mul(zi4, aligned)), {hw, 1});
      core::Tensor<T> terms = core::infonce_terms(concat_cols(neg, pos));  // {hw}
      core::Tensor<T> masked = core::mul(terms, valid[ui]);
      img_terms = first_u ? masked : core::add(img_terms, masked);
      first_u = false;
    }
    core::Tensor<T> avg = core::mul(img_terms, inv_count_t);
    core::Tensor<T> img_sum = core::sum(avg);
    total = first_total ? img_sum : core::add(total, img_sum);
    first_total = false;
  }
  return core::scale(total, T(1) / static_cast<T>(static_cast<int64_t>(B) * hw));
}

}  // namespace arseg::objectives
