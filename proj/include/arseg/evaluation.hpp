#pragma once

// Evaluation: Hungarian matching accuracy, many-to-one overclustering,
// PCA whitening + k-means for ARL inference, and budget-matched probes.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "arseg/conv.hpp"
#include "arseg/model.hpp"
#include "arseg/training.hpp"

namespace arseg::evaluation {

// ---------------------------------------------------------------------------
// Hungarian assignment (Jonker-Volgenant style shortest augmenting paths with
// potentials, O(n^3)). Square cost matrices only; callers pad as needed.
// Returns row -> column minimizing total cost.
// ---------------------------------------------------------------------------
inline std::vector<int> hungarian(const std::vector<double>& cost, int n) {
  ARSG_CHECK_DIM(n >= 1, "hungarian: need n >= 1");
  ARSG_CHECK_DIM(cost.size() == static_cast<size_t>(n) * n,
                 "hungarian: cost must be square n x n (callers pad)");
  for (double c : cost)
    ARSG_CHECK_CONTRACT(std::isfinite(c), "hungarian: non-finite cost entry");
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0), v(n + 1, 0);
  std::vector<int> p(n + 1, 0), way(n + 1, 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(n + 1, inf);
    std::vector<char> used(n + 1, 0);
    do {
      used[j0] = 1;
      int i0 = p[j0], j1 = -1;
      double delta = inf;
      for (int j = 1; j <= n; ++j)
        if (!used[j]) {
          double cur = cost[static_cast<size_t>(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
          if (cur < minv[j]) {
            minv[j] = cur;
            way[j] = j0;
          }
          if (minv[j] < delta) {
            delta = minv[j];
            j1 = j;
          }
        }
      for (int j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0);
  }
  std::vector<int> row_to_col(n, -1);
  for (int j = 1; j <= n; ++j)
    if (p[j] >= 1) row_to_col[p[j] - 1] = j - 1;
  return row_to_col;
}

inline double assignment_cost(const std::vector<double>& cost, int n,
                              const std::vector<int>& perm) {
  double s = 0;
  for (int i = 0; i < n; ++i) s += cost[static_cast<size_t>(i) * n + perm[i]];
  return s;
}

// ---------------------------------------------------------------------------
// Cluster accuracy (one-to-one, Hungarian on negated confusion counts)
// ---------------------------------------------------------------------------
struct AssignmentResult {
  std::vector<int> permutation;    // cluster id -> class id
  double matched_accuracy = 0;
  std::vector<int64_t> confusion;  // K x K_gt counts, row-major
  int K = 0, K_gt = 0;
  int64_t n_labeled = 0;
};

inline std::vector<int64_t> confusion_counts(const std::vector<int>& pred,
                                             const std::vector<uint8_t>& gt, int K, int K_gt) {
  ARSG_CHECK_DIM(pred.size() == gt.size(), "confusion: pred/gt size mismatch");
  std::vector<int64_t> c(static_cast<size_t>(K) * K_gt, 0);
  for (size_t i = 0; i < pred.size(); ++i) {
    if (gt[i] == data::kUnlabeled) continue;
    ARSG_CHECK_CONTRACT(pred[i] >= 0 && pred[i] < K, "confusion: pred ", pred[i],
                        " out of range");
    ARSG_CHECK_CONTRACT(gt[i] < K_gt, "confusion: gt label ", int(gt[i]), " out of range");
    ++c[static_cast<size_t>(pred[i]) * K_gt + gt[i]];
  }
  return c;
}

inline AssignmentResult cluster_accuracy(const std::vector<int>& pred,
                                         const std::vector<uint8_t>& gt, int K, int K_gt) {
  AssignmentResult r;
  r.K = K;
  r.K_gt = K_gt;
  r.confusion = confusion_counts(pred, gt, K, K_gt);
  for (int64_t c : r.confusion) r.n_labeled += c;
  if (r.n_labeled == 0)
    throw ContractError("cluster_accuracy: every pixel is unlabeled; accuracy undefined");
  // Pad to square and minimize negated counts = maximize matched mass.
  int n = std::max(K, K_gt);
  std::vector<double> cost(static_cast<size_t>(n) * n, 0.0);
  for (int k = 0; k < K; ++k)
    for (int c = 0; c < K_gt; ++c)
      cost[static_cast<size_t>(k) * n + c] =
          -static_cast<double>(r.confusion[static_cast<size_t>(k) * K_gt + c]);
  std::vector<int> perm = hungarian(cost, n);
  r.permutation.assign(perm.begin(), perm.begin() + K);
  int64_t matched = 0;
  for (int k = 0; k < K; ++k)
    if (r.permutation[k] < K_gt)
      matched += r.confusion[static_cast<size_t>(k) * K_gt + r.permutation[k]];
  r.matched_accuracy = static_cast<double>(matched) / static_cast<double>(r.n_labeled);
  return r;
}

// ---------------------------------------------------------------------------
// Overclustering: many-to-one majority map fit on a labeled subset,
// evaluated on the full labeled set.
// ---------------------------------------------------------------------------
struct OverclusterResult {
  std::vector<int> mapping;  // cluster id -> class id
  double accuracy = 0;
  int64_t n_labeled = 0;
};

inline OverclusterResult overcluster_map(const std::vector<int>& subset_pred,
                                         const std::vector<uint8_t>& subset_gt,
                                         const std::vector<int>& full_pred,
                                         const std::vector<uint8_t>& full_gt, int K, int K_gt) {
  ARSG_CHECK_CFG(K >= K_gt, "overcluster_map: need K >= K_gt");
  std::vector<int64_t> c = confusion_counts(subset_pred, subset_gt, K, K_gt);
  std::vector<int64_t> class_tot(K_gt, 0);
  for (int k = 0; k < K; ++k)
    for (int g = 0; g < K_gt; ++g) class_tot[g] += c[static_cast<size_t>(k) * K_gt + g];
  int64_t subset_labeled = 0;
  for (int64_t t : class_tot) subset_labeled += t;
  ARSG_CHECK_CONTRACT(subset_labeled > 0, "overcluster_map: subset has no labeled pixels");
  int fallback = static_cast<int>(std::max_element(class_tot.begin(), class_tot.end()) -
                                  class_tot.begin());
  OverclusterResult r;
  r.mapping.resize(K);
  for (int k = 0; k < K; ++k) {
    const int64_t* row = c.data() + static_cast<size_t>(k) * K_gt;
    int best = fallback;
    int64_t bc = 0;
    for (int g = 0; g < K_gt; ++g)
      if (row[g] > bc) {
        bc = row[g];
        best = g;
      }
    r.mapping[k] = best;  // absent clusters keep the subset's most frequent class
  }
  ARSG_CHECK_DIM(full_pred.size() == full_gt.size(), "overcluster_map: full size mismatch");
  int64_t hit = 0;
  for (size_t i = 0; i < full_pred.size(); ++i) {
    if (full_gt[i] == data::kUnlabeled) continue;
    ++r.n_labeled;
    if (r.mapping[full_pred[i]] == full_gt[i]) ++hit;
  }
  ARSG_CHECK_CONTRACT(r.n_labeled > 0, "overcluster_map: no labeled pixels to evaluate");
  r.accuracy = static_cast<double>(hit) / static_cast<double>(r.n_labeled);
  return r;
}

// ---------------------------------------------------------------------------
// PCA whitening
// ---------------------------------------------------------------------------
struct PcaWhitener {
  int C = 0, Cp = 0;
  std::vector<double> mean;  // C
  std::vector<double> proj;  // Cp x C row-major: y = proj * (x - mean)

  std::vector<double> apply(const std::vector<double>& x, int64_t n) const {
    ARSG_CHECK_DIM(x.size() == static_cast<size_t>(n) * C, "pca apply: size mismatch");
    std::vector<double> y(static_cast<size_t>(n) * Cp, 0.0);
    for (int64_t i = 0; i < n; ++i)
      for (int p = 0; p < Cp; ++p) {
        double s = 0;
        for (int c = 0; c < C; ++c)
          s += proj[static_cast<size_t>(p) * C + c] * (x[i * C + c] - mean[c]);
        y[i * Cp + p] = s;
      }
    return y;
  }
};

inline constexpr double kPcaEps = 1e-5;

// Fit on N x C rows: center, eigendecompose the covariance, keep the top
// c_prime components scaled to unit variance (eps-floored eigenvalues).
inline PcaWhitener pca_fit(const std::vector<double>& x, int64_t n, int c, int c_prime = -1) {
  if (c_prime <= 0) c_prime = std::min(c, 32);
  ARSG_CHECK_CFG(c_prime <= c, "pca: c_prime must be <= C");
  ARSG_CHECK_CFG(n > c_prime, "pca: need more samples than components");
  ARSG_CHECK_DIM(x.size() == static_cast<size_t>(n) * c, "pca: size mismatch");
  PcaWhitener w;
  w.C = c;
  w.Cp = c_prime;
  w.mean.assign(c, 0.0);
  Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> X(
      x.data(), n, c);
  Eigen::VectorXd mu = X.colwise().mean();
  for (int i = 0; i < c; ++i) w.mean[i] = mu[i];
  Eigen::MatrixXd centered = X.rowwise() - mu.transpose();
  Eigen::MatrixXd cov = (centered.transpose() * centered) / static_cast<double>(n);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
  ARSG_CHECK_CONTRACT(es.info() == Eigen::Success, "pca: eigendecomposition failed");
  // Eigenvalues ascending; take the top c_prime in descending order.
  w.proj.assign(static_cast<size_t>(c_prime) * c, 0.0);
  for (int p = 0; p < c_prime; ++p) {
    int src = c - 1 - p;
    double scale = 1.0 / std::sqrt(std::max(es.eigenvalues()[src], 0.0) + kPcaEps);
    for (int i = 0; i < c; ++i)
      w.proj[static_cast<size_t>(p) * c + i] = es.eigenvectors()(i, src) * scale;
  }
  return w;
}

// ---------------------------------------------------------------------------
// K-means (k-means++ seeding, Lloyd, best of `restarts`)
// ---------------------------------------------------------------------------
struct KmeansResult {
  std::vector<int> labels;      // N
  std::vector<double> centers;  // K x C
  double inertia = 0;
  std::vector<double> inertia_trace;  // per accepted Lloyd iteration, best restart
};

namespace detail {

inline double sqdist(const double* a, const double* b, int c) {
  double s = 0;
  for (int i = 0; i < c; ++i) {
    double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

}  // namespace detail

inline KmeansResult kmeans(const std::vector<double>& x, int64_t n, int c, int k, core::Rng& rng,
                           int max_iter = 100, int restarts = 5) {
  ARSG_CHECK_CFG(n >= k && k >= 1, "kmeans: need N >= K >= 1");
  ARSG_CHECK_DIM(x.size() == static_cast<size_t>(n) * c, "kmeans: size mismatch");
  KmeansResult best;
  best.inertia = std::numeric_limits<double>::infinity();
  std::vector<double> d2(n);
  for (int r = 0; r < restarts; ++r) {
    // k-means++ seeding.
    std::vector<double> centers(static_cast<size_t>(k) * c);
    int64_t first = static_cast<int64_t>(rng.uniform_int(static_cast<uint64_t>(n)));
    std::copy(x.begin() + first * c, x.begin() + (first + 1) * c, centers.begin());
    std::fill(d2.begin(), d2.end(), std::numeric_limits<double>::infinity());
    for (int j = 1; j < k; ++j) {
      double tot = 0;
      for (int64_t i = 0; i < n; ++i) {
        double d = detail::sqdist(x.data() + i * c, centers.data() + (j - 1) * c, c);
        d2[i] = std::min(d2[i], d);
        tot += d2[i];
      }
      int64_t pick = 0;
      if (tot > 0) {
        double target = rng.uniform() * tot, acc = 0;
        for (int64_t i = 0; i < n; ++i) {
          acc += d2[i];
          if (acc >= target) {
            pick = i;
            break;
          }
        }
      } else {
        pick = static_cast<int64_t>(rng.uniform_int(static_cast<uint64_t>(n)));
      }
      std::copy(x.begin() + pick * c, x.begin() + (pick + 1) * c,
                centers.begin() + static_cast<size_t>(j) * c);
    }
    // Lloyd iterations.
    std::vector<int> labels(n, 0);
    std::vector<double> trace;
    double inertia = 0;
    for (int it = 0; it < max_iter; ++it) {
      bool changed = false;
      inertia = 0;
      for (int64_t i = 0; i < n; ++i) {
        int bj = 0;
        double bd = detail::sqdist(x.data() + i * c, centers.data(), c);
        for (int j = 1; j < k; ++j) {
          double d = detail::sqdist(x.data() + i * c, centers.data() + static_cast<size_t>(j) * c,
                                    c);
          if (d < bd) {
            bd = d;
            bj = j;
          }
        }
        if (labels[i] != bj) {
          labels[i] = bj;
          changed = true;
        }
        inertia += bd;
      }
      trace.push_back(inertia);
      if (!changed && it > 0) break;
      // Recompute centers; reseed empty clusters at the farthest point.
      std::vector<double> sum(static_cast<size_t>(k) * c, 0.0);
      std::vector<int64_t> cnt(k, 0);
      for (int64_t i = 0; i < n; ++i) {
        ++cnt[labels[i]];
        for (int j = 0; j < c; ++j) sum[static_cast<size_t>(labels[i]) * c + j] += x[i * c + j];
      }
      for (int j = 0; j < k; ++j) {
        if (cnt[j] == 0) {
          int64_t far = 0;
          double fd = -1;
          for (int64_t i = 0; i < n; ++i) {
            double d = detail::sqdist(x.data() + i * c,
                                      centers.data() + static_cast<size_t>(labels[i]) * c, c);
            if (d > fd) {
              fd = d;
              far = i;
            }
          }
          std::copy(x.begin() + far * c, x.begin() + (far + 1) * c,
                    centers.begin() + static_cast<size_t>(j) * c);
        } else {
          for (int q = 0; q < c; ++q)
            centers[static_cast<size_t>(j) * c + q] = sum[static_cast<size_t>(j) * c + q] / cnt[j];
        }
      }
    }
    if (inertia < best.inertia) {
      best.inertia = inertia;
      best.labels = std::move(labels);
      best.centers = std::move(centers);
      best.inertia_trace = std::move(trace);
    }
  }
  return best;
}

// ---------------------------------------------------------------------------
// Probes: budget-matched trainable heads over frozen feature maps.
// linear = conv1x1 head; nonlinear = conv3x3 + BN + ReLU + conv1x1 head.
// ---------------------------------------------------------------------------
enum class ProbeKind { linear, nonlinear };

inline ProbeKind probe_kind_from_string(const std::string& s) {
  if (s == "linear") return ProbeKind::linear;
  if (s == "nonlinear") return ProbeKind::nonlinear;
  throw ConfigError(cat("unknown probe kind '", s, "'"));
}

struct ProbeResult {
  double train_accuracy = 0;
  double test_accuracy = 0;
};

struct ProbeHead {
  bool nonlinear = false;
  model::Conv<float> c3;       // nonlinear only
  model::BnLayer<float> bn;    // nonlinear only
  model::Conv<float> out;
  training::ParamList params;
};

namespace detail {

inline ProbeHead make_probe_head(int c_in, int k_out, ProbeKind kind, core::Rng& rng) {
  ProbeHead head;
  head.nonlinear = kind == ProbeKind::nonlinear;
  if (head.nonlinear) {
    head.c3 = model::make_conv<float>(c_in, c_in, 3, false, rng);
    head.bn = model::make_bn<float>(c_in);
    head.params.emplace_back("probe.c3.w", head.c3.w);
    head.params.emplace_back("probe.c3.b", head.c3.b);
    head.params.emplace_back("probe.bn.gamma", head.bn.gamma);
    head.params.emplace_back("probe.bn.beta", head.bn.beta);
  }
  head.out = model::make_conv<float>(c_in, k_out, 1, false, rng);
  head.params.emplace_back("probe.head.w", head.out.w);
  head.params.emplace_back("probe.head.b", head.out.b);
  return head;
}

inline core::Tensor<float> probe_forward(ProbeHead& head, const core::Tensor<float>& feats,
                                         core::Mode mode) {
  core::Tensor<float> h = feats;
  if (head.nonlinear) {
    h = model::conv_forward(head.c3, h, nullptr);
    h = core::batchnorm2d(h, head.bn.gamma, head.bn.beta, *head.bn.stats, mode);
    h = core::relu(h);
  }
  return model::conv_forward(head.out, h, nullptr);
}

inline double pixel_accuracy(const core::Tensor<float>& logits,
                             const std::vector<uint8_t>& labels) {
  int B = logits.dim(0), K = logits.dim(1);
  int64_t hw = static_cast<int64_t>(logits.dim(2)) * logits.dim(3);
  int64_t hit = 0, tot = 0;
  const float* p = logits.data().data();
  for (int n = 0; n < B; ++n)
    for (int64_t q = 0; q < hw; ++q) {
      uint8_t l = labels[static_cast<size_t>(n) * hw + q];
      if (l == data::kUnlabeled) continue;
      int bk = 0;
      float bv = p[(static_cast<int64_t>(n) * K) * hw + q];
      for (int k = 1; k < K; ++k) {
        float v = p[(static_cast<int64_t>(n) * K + k) * hw + q];
        if (v > bv) {
          bv = v;
          bk = k;
        }
      }
      ++tot;
      if (bk == l) ++hit;
    }
  return tot == 0 ? 0.0 : static_cast<double>(hit) / tot;
}

}  // namespace detail

// Train a probe head on frozen train features (labels at feature resolution,
// kUnlabeled ignored), report train/test pixel accuracy. Budget: `steps` Adam
// steps at lr 1e-3 on minibatches of up to 16 feature maps.
inline ProbeResult probe(const core::Tensor<float>& train_feats,
                         const std::vector<uint8_t>& train_labels,
                         const core::Tensor<float>& test_feats,
                         const std::vector<uint8_t>& test_labels, int k_gt, ProbeKind kind,
                         core::Rng& rng, int steps = 2000, double lr = 1e-3) {
  int B = train_feats.dim(0), C = train_feats.dim(1);
  int h = train_feats.dim(2), w = train_feats.dim(3);
  ARSG_CHECK_DIM(train_labels.size() == static_cast<size_t>(B) * h * w,
                 "probe: train labels size mismatch");
  ARSG_CHECK_DIM(test_labels.size() ==
                     static_cast<size_t>(test_feats.dim(0)) * test_feats.dim(2) *
                         test_feats.dim(3),
                 "probe: test labels size mismatch");
  ProbeHead head = detail::make_probe_head(C, k_gt, kind, rng);
  training::AdamState adam;
  adam.init(head.params);
  int mb = std::min(B, 16);
  int64_t chw = static_cast<int64_t>(C) * h * w;
  int64_t lhw = static_cast<int64_t>(h) * w;
  for (int s = 0; s < steps; ++s) {
    // Sample a minibatch of feature maps (with replacement).
    std::vector<float> xs(static_cast<size_t>(mb) * chw);
    std::vector<uint8_t> ls(static_cast<size_t>(mb) * lhw);
    for (int i = 0; i < mb; ++i) {
      int pick = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(B)));
      std::copy(train_feats.data().begin() + pick * chw,
                train_feats.data().begin() + (pick + 1) * chw, xs.begin() + i * chw);
      std::copy(train_labels.begin() + pick * lhw, train_labels.begin() + (pick + 1) * lhw,
                ls.begin() + i * lhw);
    }
    auto x = core::Tensor<float>::from_data({mb, C, h, w}, std::move(xs));
    auto logits = detail::probe_forward(head, x, core::Mode::train);
    auto loss = core::cross_entropy_pixel(logits, ls);
    loss.backward();
    training::adam_step(head.params, adam, lr);
  }
  ProbeResult r;
  {
    core::NoGradGuard guard;
    r.train_accuracy =
        detail::pixel_accuracy(detail::probe_forward(head, train_feats, core::Mode::eval),
                               train_labels);
    r.test_accuracy =
        detail::pixel_accuracy(detail::probe_forward(head, test_feats, core::Mode::eval),
                               test_labels);
  }
  return r;
}

}  // namespace arseg::evaluation
