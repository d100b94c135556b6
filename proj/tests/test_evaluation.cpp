// Evaluation: Hungarian assignment, cluster accuracy (one-to-one and
// many-to-one), PCA whitening, k-means, and the probe heads.

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "arseg/evaluation.hpp"

using namespace arseg;

TEST(Hungarian, TrivialAndHandComputedCases) {
  EXPECT_EQ(evaluation::hungarian({7.0}, 1), (std::vector<int>{0}));

  std::vector<double> idc = {0, 1, 1, 1, 0, 1, 1, 1, 0};
  EXPECT_EQ(evaluation::hungarian(idc, 3), (std::vector<int>{0, 1, 2}));

  std::vector<double> ex = {4, 1, 3, 2, 0, 5, 3, 2, 2};
  auto pe = evaluation::hungarian(ex, 3);
  EXPECT_NEAR(evaluation::assignment_cost(ex, 3, pe), 5.0, 1e-12);
}

TEST(Hungarian, MatchesBruteForceOnRandomMatrices) {
  core::Rng rng(9);
  for (int t = 0; t < 100; ++t) {
    int n = 2 + static_cast<int>(rng.uniform_int(6));
    std::vector<double> cost(static_cast<size_t>(n) * n);
    for (auto& v : cost) v = rng.normal();
    double hc = evaluation::assignment_cost(cost, n, evaluation::hungarian(cost, n));
    std::vector<int> perm(n);
    for (int i = 0; i < n; ++i) perm[i] = i;
    double bc = 1e300;
    do {
      bc = std::min(bc, evaluation::assignment_cost(cost, n, perm));
    } while (std::next_permutation(perm.begin(), perm.end()));
    ASSERT_NEAR(hc, bc, 1e-9) << "n=" << n << " trial " << t;
  }
}

TEST(Hungarian, BeatsRandomPermutationsAtLargerSizes) {
  core::Rng rng(77);
  int n = 15;
  std::vector<double> cost(static_cast<size_t>(n) * n);
  for (auto& v : cost) v = rng.normal();
  double hc = evaluation::assignment_cost(cost, n, evaluation::hungarian(cost, n));
  std::vector<int> perm(n);
  for (int i = 0; i < n; ++i) perm[i] = i;
  for (int t = 0; t < 1000; ++t) {
    for (int i = n - 1; i > 0; --i)
      std::swap(perm[i], perm[static_cast<int>(rng.uniform_int(i + 1))]);
    EXPECT_LE(hc, evaluation::assignment_cost(cost, n, perm) + 1e-12);
  }
}

TEST(ClusterAccuracy, InvariantToLabelPermutation) {
  core::Rng rng(17);
  std::vector<int> pred(1000);
  std::vector<uint8_t> gt(1000);
  for (size_t i = 0; i < pred.size(); ++i) {
    gt[i] = static_cast<uint8_t>(rng.uniform_int(3));
    pred[i] = (gt[i] + 1) % 3;
  }
  EXPECT_EQ(evaluation::cluster_accuracy(pred, gt, 3, 3).matched_accuracy, 1.0);

  std::vector<int> same(gt.begin(), gt.end());
  auto r2 = evaluation::cluster_accuracy(same, gt, 3, 3);
  EXPECT_EQ(r2.matched_accuracy, 1.0);
  EXPECT_EQ(r2.permutation, (std::vector<int>{0, 1, 2}));
}

TEST(ClusterAccuracy, RandomPredictionsScoreNearChance) {
  for (int s = 0; s < 20; ++s) {
    core::Rng r3(1000 + s);
    std::vector<int> p2(10000);
    std::vector<uint8_t> g2(10000);
    for (int i = 0; i < 10000; ++i) {
      p2[i] = static_cast<int>(r3.uniform_int(3));
      g2[i] = static_cast<uint8_t>(r3.uniform_int(3));
    }
    double acc = evaluation::cluster_accuracy(p2, g2, 3, 3).matched_accuracy;
    EXPECT_GE(acc, 0.30) << "seed " << s;
    EXPECT_LE(acc, 0.45) << "seed " << s;
  }
}

TEST(ClusterAccuracy, AllPixelsUnlabeledIsAContractViolation) {
  std::vector<uint8_t> unl(10, data::kUnlabeled);
  std::vector<int> pz(10, 0);
  EXPECT_THROW(evaluation::cluster_accuracy(pz, unl, 3, 3), ContractError);
}

TEST(Overcluster, PureClustersMapPerfectly) {
  std::vector<int> pred = {0, 0, 1, 1, 2, 2, 3, 3};
  std::vector<uint8_t> gt = {0, 0, 0, 0, 1, 1, 1, 1};
  EXPECT_EQ(evaluation::overcluster_map(pred, gt, pred, gt, 4, 2).accuracy, 1.0);
}

TEST(Overcluster, ManyToOneDominatesOneToOneAtEqualK) {
  core::Rng rng(23);
  std::vector<int> p2(5000);
  std::vector<uint8_t> g2(5000);
  for (int i = 0; i < 5000; ++i) {
    g2[i] = static_cast<uint8_t>(rng.uniform_int(3));
    p2[i] = rng.uniform() < 0.7 ? static_cast<int>(g2[i])
                                : static_cast<int>(rng.uniform_int(3));
  }
  auto oto = evaluation::cluster_accuracy(p2, g2, 3, 3);
  auto mto = evaluation::overcluster_map(p2, g2, p2, g2, 3, 3);
  EXPECT_GE(mto.accuracy, oto.matched_accuracy - 1e-12);
}

TEST(Pca, WhiteningProducesIdentityCovariance) {
  core::Rng rng(31);
  int n = 500, c = 8;
  std::vector<double> x(static_cast<size_t>(n) * c);
  std::vector<double> scales = {5, 3, 2, 1.5, 1, 0.7, 0.5, 0.2};
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < c; ++j) x[static_cast<size_t>(i) * c + j] = rng.normal() * scales[j] + j;
  auto w = evaluation::pca_fit(x, n, c, 8);
  auto y = w.apply(x, n);
  std::vector<double> mean(c, 0), cov(static_cast<size_t>(c) * c, 0);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < c; ++j) mean[j] += y[static_cast<size_t>(i) * c + j] / n;
  for (int i = 0; i < n; ++i)
    for (int a = 0; a < c; ++a)
      for (int b = 0; b < c; ++b)
        cov[static_cast<size_t>(a) * c + b] += (y[static_cast<size_t>(i) * c + a] - mean[a]) *
                                               (y[static_cast<size_t>(i) * c + b] - mean[b]) / n;
  double maxdev = 0;
  for (int a = 0; a < c; ++a)
    for (int b = 0; b < c; ++b)
      maxdev = std::max(maxdev, std::abs(cov[static_cast<size_t>(a) * c + b] - (a == b ? 1.0 : 0.0)));
  EXPECT_LT(maxdev, 5e-2);
}

TEST(Pca, ReductionToOneComponentKeepsTheVarianceDirection) {
  core::Rng rng(32);
  std::vector<double> line(200 * 2);
  for (int i = 0; i < 200; ++i) {
    double t = rng.normal();
    line[static_cast<size_t>(i) * 2] = 3 * t;
    line[static_cast<size_t>(i) * 2 + 1] = -1.5 * t;
  }
  auto wl = evaluation::pca_fit(line, 200, 2, 1);
  auto yl = wl.apply(line, 200);
  double var = 0;
  for (int i = 0; i < 200; ++i) var += yl[i] * yl[i] / 200;
  EXPECT_NEAR(var, 1.0, 0.05);
}

TEST(Kmeans, ExactFitWhenKEqualsN) {
  core::Rng rng(41);
  std::vector<double> pts = {0, 0, 5, 5, 9, 1};
  auto r = evaluation::kmeans(pts, 3, 2, 3, rng);
  EXPECT_LT(r.inertia, 1e-18);
}

TEST(Kmeans, SeparatesWellSpacedBlobs) {
  core::Rng rng(42);
  std::vector<double> blobs;
  for (int i = 0; i < 50; ++i) {
    blobs.push_back(rng.normal() * 0.1);
    blobs.push_back(rng.normal() * 0.1);
  }
  for (int i = 0; i < 50; ++i) {
    blobs.push_back(10 + rng.normal() * 0.1);
    blobs.push_back(10 + rng.normal() * 0.1);
  }
  auto rb = evaluation::kmeans(blobs, 100, 2, 2, rng);
  for (int i = 1; i < 50; ++i) EXPECT_EQ(rb.labels[i], rb.labels[0]);
  for (int i = 51; i < 100; ++i) EXPECT_EQ(rb.labels[i], rb.labels[50]);
  EXPECT_NE(rb.labels[0], rb.labels[50]);
}

TEST(Kmeans, InertiaDecreasesMonotonically) {
  core::Rng rng(43);
  std::vector<double> rd(300 * 4);
  for (auto& v : rd) v = rng.normal();
  auto rr = evaluation::kmeans(rd, 300, 4, 5, rng);
  for (size_t i = 1; i < rr.inertia_trace.size(); ++i)
    EXPECT_LE(rr.inertia_trace[i], rr.inertia_trace[i - 1] + 1e-9);
}

namespace {

struct ProbeFixture {
  int B = 12, K = 3, h = 8, w = 8, btr = 9;
  std::vector<uint8_t> ltr, lte;
  core::Tensor<float> t_tr, t_te;

  // Features = one-hot ground truth plus optional Gaussian noise.
  ProbeFixture(float noise, core::Rng& rng) {
    std::vector<uint8_t> labels(static_cast<size_t>(B) * h * w);
    std::vector<float> feats(static_cast<size_t>(B) * K * h * w, 0.f);
    for (int n = 0; n < B; ++n)
      for (int q = 0; q < h * w; ++q) {
        int cls = static_cast<int>(rng.uniform_int(K));
        labels[static_cast<size_t>(n) * h * w + q] = static_cast<uint8_t>(cls);
        feats[(static_cast<size_t>(n) * K + cls) * h * w + q] = 1.f;
      }
    if (noise > 0)
      for (auto& v : feats) v += noise * static_cast<float>(rng.normal());
    size_t cut_f = static_cast<size_t>(btr) * K * h * w;
    size_t cut_l = static_cast<size_t>(btr) * h * w;
    t_tr = core::Tensor<float>::from_data(
        {btr, K, h, w}, std::vector<float>(feats.begin(), feats.begin() + cut_f));
    t_te = core::Tensor<float>::from_data(
        {B - btr, K, h, w}, std::vector<float>(feats.begin() + cut_f, feats.end()));
    ltr.assign(labels.begin(), labels.begin() + cut_l);
    lte.assign(labels.begin() + cut_l, labels.end());
  }
};

}  // namespace

TEST(Probe, LinearHeadSeparatesOneHotFeatures) {
  core::Rng rng(51);
  ProbeFixture fx(0.f, rng);
  auto pr = evaluation::probe(fx.t_tr, fx.ltr, fx.t_te, fx.lte, fx.K,
                              evaluation::ProbeKind::linear, rng, 300, 1e-2);
  EXPECT_GT(pr.test_accuracy, 0.99);
}

TEST(Probe, RandomFeaturesScoreNearThePrior) {
  core::Rng rng(51);
  ProbeFixture fx(0.f, rng);
  int B = fx.B, h = fx.h, w = fx.w, btr = fx.btr;
  std::vector<float> rf(static_cast<size_t>(B) * 4 * h * w);
  for (auto& v : rf) v = static_cast<float>(rng.normal());
  size_t cut = static_cast<size_t>(btr) * 4 * h * w;
  auto rt_tr = core::Tensor<float>::from_data({btr, 4, h, w},
                                              std::vector<float>(rf.begin(), rf.begin() + cut));
  auto rt_te = core::Tensor<float>::from_data({B - btr, 4, h, w},
                                              std::vector<float>(rf.begin() + cut, rf.end()));
  auto pr = evaluation::probe(rt_tr, fx.ltr, rt_te, fx.lte, fx.K,
                              evaluation::ProbeKind::linear, rng, 300, 1e-2);
  EXPECT_LT(pr.test_accuracy, 1.0 / 3 + 0.15);
}

TEST(Probe, NonlinearHeadMatchesLinearOnEqualBudget) {
  // Same features, labels, step count, and learning rate for both heads; the
  // extra capacity must not cost accuracy beyond a small optimization margin.
  core::Rng rng(52);
  ProbeFixture fx(0.25f, rng);
  core::Rng r_lin(7), r_non(7);
  auto lin = evaluation::probe(fx.t_tr, fx.ltr, fx.t_te, fx.lte, fx.K,
                               evaluation::ProbeKind::linear, r_lin, 300, 1e-2);
  auto non = evaluation::probe(fx.t_tr, fx.ltr, fx.t_te, fx.lte, fx.K,
                               evaluation::ProbeKind::nonlinear, r_non, 300, 1e-2);
  EXPECT_GE(non.test_accuracy, lin.test_accuracy - 0.02);
  EXPECT_GT(lin.test_accuracy, 0.8);  // the noisy one-hot signal is learnable
}
