#pragma once

// Spatial ops over NCHW tensors: conv2d (im2col + GEMM), maxpool, bilinear
// upsampling, pad/crop shifts, subsampling, batchnorm, and a per-pixel
// cross-entropy used by the probes.

#include <cmath>
#include <cstring>
#include <limits>
#include <memory>

#include "arseg/tensor.hpp"

namespace arseg::core {

// ---------------------------------------------------------------------------
// im2col / col2im. cols is (C*F*F) x (N*Ho*Wo), column index (n, i, j)
// lexicographic, so one GEMM covers the whole batch.
// ---------------------------------------------------------------------------
template <typename T>
void im2col(const T* x, int N, int C, int H, int W, int F, int stride, int pad, int Ho,
            int Wo, T* cols) {
  int64_t out_cols = static_cast<int64_t>(N) * Ho * Wo;
  parallel_for(static_cast<int64_t>(N) * Ho, [&](int64_t ni) {
    int n = static_cast<int>(ni / Ho);
    int i = static_cast<int>(ni % Ho);
    for (int j = 0; j < Wo; ++j) {
      int64_t col = (static_cast<int64_t>(n) * Ho + i) * Wo + j;
      for (int c = 0; c < C; ++c) {
        const T* xc = x + (static_cast<int64_t>(n) * C + c) * H * W;
        for (int a = 0; a < F; ++a) {
          int r = i * stride + a - pad;
          for (int b = 0; b < F; ++b) {
            int s = j * stride + b - pad;
            int64_t row = (static_cast<int64_t>(c) * F + a) * F + b;
            cols[row * out_cols + col] =
                (r >= 0 && r < H && s >= 0 && s < W) ? xc[static_cast<int64_t>(r) * W + s] : T(0);
          }
        }
      }
    }
  });
}

template <typename T>
void col2im_accum(const T* cols, int N, int C, int H, int W, int F, int stride, int pad,
                  int Ho, int Wo, T* gx) {
  int64_t out_cols = static_cast<int64_t>(N) * Ho * Wo;
  // Scatter-add; serialized over images to keep writes disjoint per slab.
  parallel_for(N, [&](int64_t n) {
    for (int i = 0; i < Ho; ++i)
      for (int j = 0; j < Wo; ++j) {
        int64_t col = (n * Ho + i) * Wo + j;
        for (int c = 0; c < C; ++c) {
          T* gxc = gx + (n * C + c) * H * W;
          for (int a = 0; a < F; ++a) {
            int r = i * stride + a - pad;
            if (r < 0 || r >= H) continue;
            for (int b = 0; b < F; ++b) {
              int s = j * stride + b - pad;
              if (s < 0 || s >= W) continue;
              int64_t row = (static_cast<int64_t>(c) * F + a) * F + b;
              gxc[static_cast<int64_t>(r) * W + s] += cols[row * out_cols + col];
            }
          }
        }
      }
  }, 1);
}

// Gather NCHW -> C x (N*HW) channel-major matrix and back (for GEMM staging).
template <typename T>
void nchw_to_cmat(const T* x, int N, int C, int64_t hw, T* m) {
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c)
      std::memcpy(m + (static_cast<int64_t>(c) * N + n) * hw, x + (static_cast<int64_t>(n) * C + c) * hw,
                  sizeof(T) * hw);
}
template <typename T>
void cmat_to_nchw(const T* m, int N, int C, int64_t hw, T* x) {
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c)
      std::memcpy(x + (static_cast<int64_t>(n) * C + c) * hw, m + (static_cast<int64_t>(c) * N + n) * hw,
                  sizeof(T) * hw);
}

// ---------------------------------------------------------------------------
// conv2d. Strict output geometry: (H + 2*pad - F) must divide stride exactly.
// Strided downsampling in the network is realized as stride-1 conv followed
// by subsample2d, which keeps this contract satisfiable on even-sized inputs.
// ---------------------------------------------------------------------------
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias, int stride,
                 int pad) {
  ARSG_CHECK_DIM(x.ndim() == 4, "conv2d: input must be NxCxHxW");
  ARSG_CHECK_DIM(w.ndim() == 4, "conv2d: weight must be CoutxCinxFxF");
  int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  int Cout = w.dim(0), Cin = w.dim(1), F = w.dim(2), F2 = w.dim(3);
  ARSG_CHECK_DIM(F == F2, "conv2d: kernel must be square, got ", F, "x", F2);
  ARSG_CHECK_CFG(F % 2 == 1, "conv2d: kernel size must be odd, got ", F);
  ARSG_CHECK_DIM(Cin == C, "conv2d: input channels ", C, " != kernel channels ", Cin);
  ARSG_CHECK_DIM(bias.ndim() == 1 && bias.dim(0) == Cout, "conv2d: bias must have shape {Cout}");
  ARSG_CHECK_CFG(stride >= 1 && pad >= 0, "conv2d: bad stride/pad");
  int num = H + 2 * pad - F;
  int numw = W + 2 * pad - F;
  ARSG_CHECK_DIM(num >= 0 && num % stride == 0 && numw >= 0 && numw % stride == 0,
                 "conv2d: (H+2p-F) must be a non-negative multiple of stride; H=", H, " W=", W,
                 " F=", F, " pad=", pad, " stride=", stride);
  int Ho = num / stride + 1, Wo = numw / stride + 1;

  int64_t rows = static_cast<int64_t>(C) * F * F;
  int64_t ncols = static_cast<int64_t>(N) * Ho * Wo;
  auto cols = std::make_shared<std::vector<T>>(rows * ncols);
  im2col(x.data().data(), N, C, H, W, F, stride, pad, Ho, Wo, cols->data());

  std::vector<T> out_mat(static_cast<int64_t>(Cout) * ncols);
  gemm_nn(w.data().data(), cols->data(), out_mat.data(), Cout, rows, ncols);

  int64_t hw = static_cast<int64_t>(Ho) * Wo;
  std::vector<T> out(static_cast<int64_t>(N) * Cout * hw);
  const T* pb = bias.data().data();
  for (int n = 0; n < N; ++n)
    for (int o = 0; o < Cout; ++o) {
      const T* src = out_mat.data() + (static_cast<int64_t>(o) * N + n) * hw;
      T* dst = out.data() + (static_cast<int64_t>(n) * Cout + o) * hw;
      T bo = pb[o];
      for (int64_t i = 0; i < hw; ++i) dst[i] = src[i] + bo;
    }

  // 1x1 stride-1 unpadded cols are just a re-layout of x; rebuild in backward
  // instead of keeping them alive.
  bool keep_cols = !(F == 1 && stride == 1 && pad == 0);
  if (!keep_cols) cols.reset();

  auto ix = x.impl();
  auto iw = w.impl();
  auto ib = bias.impl();
  return detail::make_result<T>(
      {N, Cout, Ho, Wo}, std::move(out), "conv2d", {x, w, bias},
      [ix, iw, ib, cols, keep_cols, N, C, H, W, F, stride, pad, Ho, Wo, Cout,
       rows, ncols, hw](const TensorImpl<T>& o) {
        // Gather upstream grad into Cout x (N*HoWo).
        std::vector<T> go_mat(static_cast<int64_t>(Cout) * ncols);
        nchw_to_cmat(o.grad.data(), N, Cout, hw, go_mat.data());

        if (ib->requires_grad) {
          ib->ensure_grad();
          for (int oc = 0; oc < Cout; ++oc) {
            T acc = T(0);
            const T* row = go_mat.data() + static_cast<int64_t>(oc) * ncols;
            for (int64_t i = 0; i < ncols; ++i) acc += row[i];
            ib->grad[oc] += acc;
          }
        }

        const std::vector<T>* cols_ptr = cols.get();
        std::vector<T> rebuilt;
        if (!keep_cols) {
          rebuilt.resize(rows * ncols);
          im2col(ix->data.data(), N, C, H, W, F, stride, pad, Ho, Wo, rebuilt.data());
          cols_ptr = &rebuilt;
        }

        if (iw->requires_grad) {
          iw->ensure_grad();
          std::vector<T> dw(static_cast<int64_t>(Cout) * rows);
          gemm_nt(go_mat.data(), cols_ptr->data(), dw.data(), Cout, ncols, rows);
          for (int64_t i = 0; i < static_cast<int64_t>(Cout) * rows; ++i) iw->grad[i] += dw[i];
        }

        if (ix->requires_grad) {
          ix->ensure_grad();
          std::vector<T> dcols(rows * ncols);
          gemm_tn(iw->data.data(), go_mat.data(), dcols.data(), rows, Cout, ncols);
          col2im_accum(dcols.data(), N, C, H, W, F, stride, pad, Ho, Wo, ix->grad.data());
        }
      });
}

// ---------------------------------------------------------------------------
// maxpool2d with floor geometry (padding cells never win a window).
// ---------------------------------------------------------------------------
template <typename T>
Tensor<T> maxpool2d(const Tensor<T>& x, int F, int stride, int pad) {
  ARSG_CHECK_DIM(x.ndim() == 4, "maxpool2d: input must be 4-d");
  int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  int Ho = (H + 2 * pad - F) / stride + 1;
  int Wo = (W + 2 * pad - F) / stride + 1;
  ARSG_CHECK_DIM(Ho >= 1 && Wo >= 1, "maxpool2d: window larger than padded input");
  int64_t hwo = static_cast<int64_t>(Ho) * Wo;
  std::vector<T> out(static_cast<int64_t>(N) * C * hwo);
  auto argmax = std::make_shared<std::vector<int>>(out.size());
  const T* px = x.data().data();
  parallel_for(static_cast<int64_t>(N) * C, [&](int64_t nc) {
    const T* xc = px + nc * H * W;
    T* oc = out.data() + nc * hwo;
    int* am = argmax->data() + nc * hwo;
    for (int i = 0; i < Ho; ++i)
      for (int j = 0; j < Wo; ++j) {
        T best = -std::numeric_limits<T>::infinity();
        int best_idx = -1;
        for (int a = 0; a < F; ++a) {
          int r = i * stride + a - pad;
          if (r < 0 || r >= H) continue;
          for (int b = 0; b < F; ++b) {
            int s = j * stride + b - pad;
            if (s < 0 || s >= W) continue;
            T v = xc[static_cast<int64_t>(r) * W + s];
            if (v > best) {
              best = v;
              best_idx = r * W + s;
            }
          }
        }
        oc[static_cast<int64_t>(i) * Wo + j] = best;
        am[static_cast<int64_t>(i) * Wo + j] = best_idx;
      }
  }, 1);
  auto ix = x.impl();
  return detail::make_result<T>(
      {N, C, Ho, Wo}, std::move(out), "maxpool2d", {x},
      [ix, argmax, N, C, H, W, hwo](const TensorImpl<T>& o) {
        if (!ix->requires_grad) return;
        ix->ensure_grad();
        for (int64_t nc = 0; nc < static_cast<int64_t>(N) * C; ++nc) {
          T* gx = ix->grad.data() + nc * H * W;
          const T* go = o.grad.data() + nc * hwo;
          const int* am = argmax->data() + nc * hwo;
          for (int64_t i = 0; i < hwo; ++i) gx[am[i]] += go[i];
        }
      });
}

// Keep every stride-th row/col (top-left anchored): conv s1 + subsample2d is
// the strided conv used for downsampling.
template <typename T>
Tensor<T> subsample2d(const Tensor<T>& x, int stride) {
  ARSG_CHECK_DIM(x.ndim() == 4, "subsample2d: input must be 4-d");
  ARSG_CHECK_CFG(stride >= 1, "subsample2d: stride must be >= 1");
  if (stride == 1) return scale(x, T(1));
  int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  int Ho = (H + stride - 1) / stride, Wo = (W + stride - 1) / stride;
  std::vector<T> out(static_cast<int64_t>(N) * C * Ho * Wo);
  const T* px = x.data().data();
  for (int64_t nc = 0; nc < static_cast<int64_t>(N) * C; ++nc)
    for (int i = 0; i < Ho; ++i)
      for (int j = 0; j < Wo; ++j)
        out[(nc * Ho + i) * Wo + j] = px[(nc * H + static_cast<int64_t>(i) * stride) * W + j * stride];
  auto ix = x.impl();
  return detail::make_result<T>(
      {N, C, Ho, Wo}, std::move(out), "subsample2d", {x},
      [ix, N, C, H, W, Ho, Wo, stride](const TensorImpl<T>& o) {
        if (!ix->requires_grad) return;
        ix->ensure_grad();
        for (int64_t nc = 0; nc < static_cast<int64_t>(N) * C; ++nc)
          for (int i = 0; i < Ho; ++i)
            for (int j = 0; j < Wo; ++j)
              ix->grad[(nc * H + static_cast<int64_t>(i) * stride) * W + j * stride] +=
                  o.grad[(nc * Ho + i) * Wo + j];
      });
}

// ---------------------------------------------------------------------------
// bilinear_upsample, align-corners=false: src = (dst + 0.5) * in/out - 0.5.
// ---------------------------------------------------------------------------
struct BilinearAxis {
  std::vector<int> i0, i1;
  std::vector<double> w0;
};
inline BilinearAxis bilinear_axis(int in, int out) {
  BilinearAxis ax;
  ax.i0.resize(out);
  ax.i1.resize(out);
  ax.w0.resize(out);
  double scale = static_cast<double>(in) / out;
  for (int d = 0; d < out; ++d) {
    double src = (d + 0.5) * scale - 0.5;
    if (src < 0) src = 0;
    if (src > in - 1) src = in - 1;
    int lo = static_cast<int>(std::floor(src));
    int hi = std::min(lo + 1, in - 1);
    ax.i0[d] = lo;
    ax.i1[d] = hi;
    ax.w0[d] = 1.0 - (src - lo);
  }
  return ax;
}

template <typename T>
Tensor<T> bilinear_upsample(const Tensor<T>& x, int outH, int outW) {
  ARSG_CHECK_DIM(x.ndim() == 4, "bilinear_upsample: input must be 4-d");
  int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  ARSG_CHECK_DIM(outH >= H && outW >= W, "bilinear_upsample: output must not shrink");
  BilinearAxis ay = bilinear_axis(H, outH);
  BilinearAxis axx = bilinear_axis(W, outW);
  std::vector<T> out(static_cast<int64_t>(N) * C * outH * outW);
  const T* px = x.data().data();
  parallel_for(static_cast<int64_t>(N) * C, [&](int64_t nc) {
    const T* xc = px + nc * H * W;
    T* oc = out.data() + nc * outH * outW;
    for (int i = 0; i < outH; ++i) {
      double wy = ay.w0[i];
      const T* r0 = xc + static_cast<int64_t>(ay.i0[i]) * W;
      const T* r1 = xc + static_cast<int64_t>(ay.i1[i]) * W;
      for (int j = 0; j < outW; ++j) {
        double wx = axx.w0[j];
        double v = wy * (wx * r0[axx.i0[j]] + (1 - wx) * r0[axx.i1[j]]) +
                   (1 - wy) * (wx * r1[axx.i0[j]] + (1 - wx) * r1[axx.i1[j]]);
        oc[static_cast<int64_t>(i) * outW + j] = static_cast<T>(v);
      }
    }
  }, 1);
  auto ix = x.impl();
  return detail::make_result<T>(
      {N, C, outH, outW}, std::move(out), "bilinear_upsample", {x},
      [ix, N, C, H, W, outH, outW, ay, axx](const TensorImpl<T>& o) {
        if (!ix->requires_grad) return;
        ix->ensure_grad();
        for (int64_t nc = 0; nc < static_cast<int64_t>(N) * C; ++nc) {
          T* gx = ix->grad.data() + nc * H * W;
          const T* go = o.grad.data() + nc * outH * outW;
          for (int i = 0; i < outH; ++i) {
            T wy = static_cast<T>(ay.w0[i]);
            for (int j = 0; j < outW; ++j) {
              T wx = static_cast<T>(axx.w0[j]);
              T g = go[static_cast<int64_t>(i) * outW + j];
              gx[static_cast<int64_t>(ay.i0[i]) * W + axx.i0[j]] += g * wy * wx;
              gx[static_cast<int64_t>(ay.i0[i]) * W + axx.i1[j]] += g * wy * (1 - wx);
              gx[static_cast<int64_t>(ay.i1[i]) * W + axx.i0[j]] += g * (1 - wy) * wx;
              gx[static_cast<int64_t>(ay.i1[i]) * W + axx.i1[j]] += g * (1 - wy) * (1 - wx);
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// shift2d: pad one side, crop the other; shape preserved.
// ---------------------------------------------------------------------------
enum class Shift { up, down, left, right };

inline const char* shift_name(Shift s) {
  switch (s) {
    case Shift::up: return "up";
    case Shift::down: return "down";
    case Shift::left: return "left";
    default: return "right";
  }
}
inline Shift shift_opposite(Shift s) {
  switch (s) {
    case Shift::up: return Shift::down;
    case Shift::down: return Shift::up;
    case Shift::left: return Shift::right;
    default: return Shift::left;
  }
}

template <typename T>
Tensor<T> shift2d(const Tensor<T>& x, Shift dir, int amount) {
  ARSG_CHECK_DIM(x.ndim() == 4, "shift2d: input must be 4-d");
  ARSG_CHECK_CFG(amount >= 0, "shift2d: negative amount");
  int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  bool vertical = (dir == Shift::up || dir == Shift::down);
  ARSG_CHECK_DIM(amount < (vertical ? H : W), "shift2d: amount ", amount,
                 " >= extent ", vertical ? H : W);
  if (amount == 0) return scale(x, T(1));
  std::vector<T> out(x.numel(), T(0));
  const T* px = x.data().data();
  int di = 0, dj = 0;
  switch (dir) {
    case Shift::down: di = amount; break;
    case Shift::up: di = -amount; break;
    case Shift::right: dj = amount; break;
    case Shift::left: dj = -amount; break;
  }
  for (int64_t nc = 0; nc < static_cast<int64_t>(N) * C; ++nc) {
    const T* xc = px + nc * H * W;
    T* oc = out.data() + nc * H * W;
    for (int i = 0; i < H; ++i) {
      int r = i - di;
      if (r < 0 || r >= H) continue;
      for (int j = 0; j < W; ++j) {
        int s = j - dj;
        if (s < 0 || s >= W) continue;
        oc[static_cast<int64_t>(i) * W + j] = xc[static_cast<int64_t>(r) * W + s];
      }
    }
  }
  auto ix = x.impl();
  return detail::make_result<T>(
      x.shape(), std::move(out), "shift2d", {x},
      [ix, N, C, H, W, di, dj](const TensorImpl<T>& o) {
        if (!ix->requires_grad) return;
        ix->ensure_grad();
        for (int64_t nc = 0; nc < static_cast<int64_t>(N) * C; ++nc) {
          T* gx = ix->grad.data() + nc * H * W;
          const T* go = o.grad.data() + nc * H * W;
          for (int i = 0; i < H; ++i) {
            int r = i - di;
            if (r < 0 || r >= H) continue;
            for (int j = 0; j < W; ++j) {
              int s = j - dj;
              if (s < 0 || s >= W) continue;
              gx[static_cast<int64_t>(r) * W + s] += go[static_cast<int64_t>(i) * W + j];
            }
          }
        }
      });
}

// Integer 2-d displacement (du rows down, dv cols right) built from shifts.
template <typename T>
Tensor<T> shift2d_offset(const Tensor<T>& x, int du, int dv) {
  Tensor<T> y = x;
  if (du > 0)
    y = shift2d(y, Shift::down, du);
  else if (du < 0)
    y = shift2d(y, Shift::up, -du);
  if (dv > 0)
    y = shift2d(y, Shift::right, dv);
  else if (dv < 0)
    y = shift2d(y, Shift::left, -dv);
  return y;
}

// ---------------------------------------------------------------------------
// batchnorm2d. Biased (1/m) variance is used both to normalize and in the
// running buffers -- one convention everywhere, stored verbatim in
// checkpoints. Updating the running stats is a documented side effect of
// train-mode forward.
// ---------------------------------------------------------------------------
template <typename T>
struct BnStats {
  std::vector<T> mean, var;
  explicit BnStats(int C = 0) : mean(C, T(0)), var(C, T(1)) {}
};

enum class Mode { train, eval };

template <typename T>
Tensor<T> batchnorm2d(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                      BnStats<T>& stats, Mode mode, T momentum = T(0.1), T eps = T(1e-5)) {
  ARSG_CHECK_DIM(x.ndim() == 4, "batchnorm2d: input must be 4-d");
  int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  ARSG_CHECK_DIM(gamma.ndim() == 1 && gamma.dim(0) == C, "batchnorm2d: gamma shape mismatch");
  ARSG_CHECK_DIM(beta.ndim() == 1 && beta.dim(0) == C, "batchnorm2d: beta shape mismatch");
  ARSG_CHECK_DIM(static_cast<int>(stats.mean.size()) == C, "batchnorm2d: stats shape mismatch");
  int64_t m = static_cast<int64_t>(N) * H * W;
  if (mode == Mode::train && m < 2)
    throw NumericError("batchnorm2d: degenerate variance (N*H*W < 2 in train mode)");

  int64_t hw = static_cast<int64_t>(H) * W;
  std::vector<T> mu(C), invstd(C);
  if (mode == Mode::train) {
    for (int c = 0; c < C; ++c) {
      double acc = 0;
      for (int n = 0; n < N; ++n) {
        const T* xc = x.data().data() + (static_cast<int64_t>(n) * C + c) * hw;
        for (int64_t i = 0; i < hw; ++i) acc += xc[i];
      }
      T mean_c = static_cast<T>(acc / m);
      double accv = 0;
      for (int n = 0; n < N; ++n) {
        const T* xc = x.data().data() + (static_cast<int64_t>(n) * C + c) * hw;
        for (int64_t i = 0; i < hw; ++i) {
          double d = xc[i] - mean_c;
          accv += d * d;
        }
      }
      T var_c = static_cast<T>(accv / m);
      mu[c] = mean_c;
      invstd[c] = T(1) / std::sqrt(var_c + eps);
      stats.mean[c] = (T(1) - momentum) * stats.mean[c] + momentum * mean_c;
      stats.var[c] = (T(1) - momentum) * stats.var[c] + momentum * var_c;
    }
  } else {
    for (int c = 0; c < C; ++c) {
      mu[c] = stats.mean[c];
      invstd[c] = T(1) / std::sqrt(stats.var[c] + eps);
    }
  }

  std::vector<T> out(x.numel());
  const T* px = x.data().data();
  const T* pg = gamma.data().data();
  const T* pb = beta.data().data();
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const T* xc = px + (static_cast<int64_t>(n) * C + c) * hw;
      T* oc = out.data() + (static_cast<int64_t>(n) * C + c) * hw;
      T mc = mu[c], ic = invstd[c], gc = pg[c], bc = pb[c];
      for (int64_t i = 0; i < hw; ++i) oc[i] = (xc[i] - mc) * ic * gc + bc;
    }

  auto ix = x.impl();
  auto ig = gamma.impl();
  auto ib = beta.impl();
  bool train = (mode == Mode::train);
  return detail::make_result<T>(
      x.shape(), std::move(out), "batchnorm2d", {x, gamma, beta},
      [ix, ig, ib, N, C, hw, m, train, mu = std::move(mu),
       invstd = std::move(invstd)](const TensorImpl<T>& o) {
        for (int c = 0; c < C; ++c) {
          T mc = mu[c], ic = invstd[c], gc = ig->data[c];
          // Channel reductions over the upstream grad and x-hat.
          double sum_go = 0, sum_go_xhat = 0;
          for (int n = 0; n < N; ++n) {
            const T* go = o.grad.data() + (static_cast<int64_t>(n) * C + c) * hw;
            const T* xc = ix->data.data() + (static_cast<int64_t>(n) * C + c) * hw;
            for (int64_t i = 0; i < hw; ++i) {
              sum_go += go[i];
              sum_go_xhat += go[i] * (xc[i] - mc) * ic;
            }
          }
          if (ig->requires_grad) {
            ig->ensure_grad();
            ig->grad[c] += static_cast<T>(sum_go_xhat);
          }
          if (ib->requires_grad) {
            ib->ensure_grad();
            ib->grad[c] += static_cast<T>(sum_go);
          }
          if (ix->requires_grad) {
            ix->ensure_grad();
            for (int n = 0; n < N; ++n) {
              const T* go = o.grad.data() + (static_cast<int64_t>(n) * C + c) * hw;
              const T* xc = ix->data.data() + (static_cast<int64_t>(n) * C + c) * hw;
              T* gx = ix->grad.data() + (static_cast<int64_t>(n) * C + c) * hw;
              if (train) {
                // d/dx through batch statistics.
                T k1 = gc * ic;
                T mgo = static_cast<T>(sum_go / m);
                T mgx = static_cast<T>(sum_go_xhat / m);
                for (int64_t i = 0; i < hw; ++i) {
                  T xhat = (xc[i] - mc) * ic;
                  gx[i] += k1 * (go[i] - mgo - xhat * mgx);
                }
              } else {
                T k1 = gc * ic;
                for (int64_t i = 0; i < hw; ++i) gx[i] += k1 * go[i];
              }
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Per-pixel softmax cross-entropy against integer labels (255 = ignore).
// Used by the supervised probes.
// ---------------------------------------------------------------------------
template <typename T>
Tensor<T> cross_entropy_pixel(const Tensor<T>& logits, const std::vector<uint8_t>& labels,
                              int ignore_label = 255) {
  ARSG_CHECK_DIM(logits.ndim() == 4, "cross_entropy_pixel: logits must be 4-d");
  int N = logits.dim(0), K = logits.dim(1), H = logits.dim(2), W = logits.dim(3);
  int64_t hw = static_cast<int64_t>(H) * W;
  ARSG_CHECK_DIM(static_cast<int64_t>(labels.size()) == static_cast<int64_t>(N) * hw,
                 "cross_entropy_pixel: label count mismatch");
  const T* px = logits.data().data();
  double loss = 0;
  int64_t valid = 0;
  for (int n = 0; n < N; ++n)
    for (int64_t p = 0; p < hw; ++p) {
      uint8_t y = labels[static_cast<int64_t>(n) * hw + p];
      if (y == ignore_label) continue;
      ARSG_CHECK_CONTRACT(y < K, "cross_entropy_pixel: label ", static_cast<int>(y),
                          " out of range for K=", K);
      const T* base = px + static_cast<int64_t>(n) * K * hw + p;
      T m = base[0];
      for (int k = 1; k < K; ++k) m = std::max(m, base[static_cast<int64_t>(k) * hw]);
      double z = 0;
      for (int k = 0; k < K; ++k) z += std::exp(base[static_cast<int64_t>(k) * hw] - m);
      loss += std::log(z) - (base[static_cast<int64_t>(y) * hw] - m);
      ++valid;
    }
  ARSG_CHECK_CONTRACT(valid > 0, "cross_entropy_pixel: no labeled pixels");
  auto il = logits.impl();
  auto saved_labels = std::make_shared<std::vector<uint8_t>>(labels);
  int64_t nvalid = valid;
  return detail::make_result<T>(
      {1}, {static_cast<T>(loss / valid)}, "cross_entropy_pixel", {logits},
      [il, saved_labels, N, K, hw, nvalid, ignore_label](const TensorImpl<T>& o) {
        if (!il->requires_grad) return;
        il->ensure_grad();
        T gscale = o.grad[0] / static_cast<T>(nvalid);
        for (int n = 0; n < N; ++n)
          for (int64_t p = 0; p < hw; ++p) {
            uint8_t y = (*saved_labels)[static_cast<int64_t>(n) * hw + p];
            if (y == ignore_label) continue;
            const T* base = il->data.data() + static_cast<int64_t>(n) * K * hw + p;
            T* g = il->grad.data() + static_cast<int64_t>(n) * K * hw + p;
            T m = base[0];
            for (int k = 1; k < K; ++k) m = std::max(m, base[static_cast<int64_t>(k) * hw]);
            double z = 0;
            for (int k = 0; k < K; ++k) z += std::exp(base[static_cast<int64_t>(k) * hw] - m);
            for (int k = 0; k < K; ++k) {
              T soft = static_cast<T>(std::exp(base[static_cast<int64_t>(k) * hw] - m) / z);
              g[static_cast<int64_t>(k) * hw] += gscale * (soft - (k == y ? T(1) : T(0)));
            }
          }
      });
}

}  // namespace arseg::core
