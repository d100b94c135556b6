// Acceptance gate: one binary, one PASS/FAIL line per criterion, exit 0 only
// when every criterion holds. Criteria 1-6 and 10 are property suites;
// 7-9 and 11 run the scaled end-to-end experiment and its companions.
//
// Usage: acceptance [criterion numbers...]   (no arguments = run all)

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "arseg/evaluation.hpp"
#include "arseg/gradcheck.hpp"
#include "arseg/receptive.hpp"
#include "arseg/training.hpp"

using namespace arseg;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

// ---------------------------------------------------------------------------
// Calibrated end-to-end schedule (criteria 7, 8, 9, 11). The criterion pins
// base width 32, lr 1e-5, batch 16, raster-8 pool, random sampling, the
// default 10-offset displacement set, and <= 5000 iterations; depth, channel
// cap, and epoch count below were chosen on this hardware so each run clears
// the accuracy bar with margin inside the runtime budget.
// ---------------------------------------------------------------------------
constexpr int kRunMaxChannels = 64;
constexpr int kRunBlocks = 3;
constexpr int kRunEpochs = 40;  // 200 images / batch 16 -> 13 iters per epoch
constexpr double kSigmaClass = 0.05;
constexpr double kSigmaNoise = 0.03;
constexpr uint64_t kDataSeed = 1;
const std::vector<uint64_t> kTrainSeeds = {1, 2, 3};

double elapsed_s(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Gate {
  std::vector<std::string> lines{std::vector<std::string>(12)};
  bool all_pass = true;

  void record(int criterion, bool pass, const std::string& detail) {
    std::ostringstream os;
    os << (pass ? "PASS" : "FAIL") << " criterion " << criterion << ": " << detail;
    lines[static_cast<size_t>(criterion)] = os.str();
    all_pass = all_pass && pass;
    std::fprintf(stderr, "[acceptance] %s\n", os.str().c_str());
  }
};

std::string fmt(const char* f, ...) {
  char buf[512];
  va_list ap;
  va_start(ap, f);
  std::vsnprintf(buf, sizeof buf, f, ap);
  va_end(ap);
  return buf;
}

// ---------------------------------------------------------------------------
// 1. Gradient suite
// ---------------------------------------------------------------------------
void criterion_1(Gate& g) {
  auto t0 = Clock::now();
  auto reports = gradcheck::run_ops_suite();
  reports.push_back(gradcheck::run_network_composite());
  double wall = elapsed_s(t0);
  bool ok = true;
  double worst = 0;
  std::string worst_op;
  for (const auto& r : reports) {
    ok = ok && r.pass;
    if (r.max_rel > worst) {
      worst = r.max_rel;
      worst_op = r.op;
    }
    if (!r.pass)
      std::fprintf(stderr, "[acceptance]   gradcheck %s rel %.3e > tol %.0e\n", r.op.c_str(),
                   r.max_rel, r.tol);
  }
  ok = ok && wall < 120.0;
  g.record(1, ok,
           fmt("%zu ops finite-difference checked, worst rel err %.2e (%s), %.1f s",
               reports.size(), worst, worst_op.c_str(), wall));
}

// ---------------------------------------------------------------------------
// 2. Dependency soundness, exhaustive over (target, perturbed) pairs
// ---------------------------------------------------------------------------
void criterion_2(Gate& g) {
  const int H = 8, W = 8, HW = H * W;
  bool ok = true;
  double worst_attn = 0;
  long long pairs = 0;
  for (int id = 1; id <= 16 && ok; ++id) {
    const auto& o = orderings::ordering_by_id(id);
    bool zig = o.kind == orderings::Kind::zigzag;
    core::Rng rng(40 + id);
    auto st = model::build_f1_stack<float>(3, 1, 4, 3, /*attention=*/zig, rng);
    auto ranks = orderings::position_rank(o, H, W);

    core::Rng xr(7);
    auto x = core::Tensor<float>::randn({1, 1, H, W}, xr);
    core::NoGradGuard ng;
    auto base = model::f1_stack_forward(st, x, &o);
    int C = base.dim(1);

    for (int m = 0; m < HW && ok; ++m) {
      auto xp = core::Tensor<float>::from_data({1, 1, H, W}, x.data());
      xp.data()[static_cast<size_t>(m)] += 2.3f;
      auto out = model::f1_stack_forward(st, xp, &o);
      for (int l = 0; l < HW; ++l) {
        if (ranks[l] >= ranks[m]) continue;  // l must rank strictly before m
        ++pairs;
        for (int c = 0; c < C; ++c) {
          size_t idx = (static_cast<size_t>(c) * H + l / W) * W + l % W;
          float a = base.data()[idx], b = out.data()[idx];
          if (!zig && a != b) {
            ok = false;
            std::fprintf(stderr,
                         "[acceptance]   o%d conv leak: perturbing %d changed target %d\n", id,
                         m, l);
            break;
          }
          if (zig && std::abs(double(a) - double(b)) > 1e-6) {
            ok = false;
            std::fprintf(stderr,
                         "[acceptance]   o%d attention leak %.3e: perturb %d, target %d\n", id,
                         std::abs(double(a) - double(b)), m, l);
            break;
          }
          if (zig)
            worst_attn = std::max(worst_attn, std::abs(double(a) - double(b)));
        }
        if (!ok) break;
      }
    }
  }
  g.record(2, ok,
           fmt("16 orderings, %lld (target, perturbed) pairs on 8x8; conv exact, attention "
               "max dev %.1e",
               pairs, worst_attn));
}

// ---------------------------------------------------------------------------
// 3. Blind spots and the attention repair
// ---------------------------------------------------------------------------
void criterion_3(Gate& g) {
  const auto& o1 = orderings::ordering_by_id(1);
  auto allowed = model::allowed_past_of_center(o1, 16, 16);
  auto conv_only = model::rf_support(o1, 8, 16, 16, /*attention=*/false);
  auto with_attn = model::rf_support(o1, 8, 16, 16, /*attention=*/true);

  int blind = 0, missing_with_attn = 0;
  for (size_t q = 0; q < allowed.support.size(); ++q) {
    if (allowed.support[q] && !conv_only.support[q]) ++blind;
    if (allowed.support[q] && !with_attn.support[q]) ++missing_with_attn;
  }
  bool ok = blind >= 1 && missing_with_attn == 0;
  g.record(3, ok,
           fmt("8 masked convs on 16x16: %d blind allowed-past positions; with one attention "
               "block: %d missing (full support)",
               blind, missing_with_attn));
}

// ---------------------------------------------------------------------------
// 4. Weight coverage across the 8 raster plans
// ---------------------------------------------------------------------------
void criterion_4(Gate& g) {
  // (a) union of active kernel taps over the raster plans is all 9
  std::vector<int> active(9, 0);
  for (int id = 1; id <= 8; ++id) {
    auto plan = orderings::conv_plan(orderings::ordering_by_id(id), 3);
    for (int t = 0; t < 9; ++t)
      if (plan.mask[t]) ++active[static_cast<size_t>(t)];
  }
  bool union_ok = std::all_of(active.begin(), active.end(), [](int n) { return n > 0; });

  // (b) one training pass per ordering: every masked-kernel entry accumulates
  // a nonzero update somewhere along the 8 passes.
  training::TrainConfig cfg;
  cfg.task = model::Task::AC;
  cfg.network.task = model::Task::AC;
  cfg.network.variant = model::Variant::F2;
  cfg.network.K = 3;
  cfg.network.base_channels = 8;
  cfg.network.max_channels = 16;
  cfg.network.n_blocks = 2;
  cfg.lr = 1e-3;  // updates merely need to register, not converge
  core::Rng rng(19);
  auto net = model::build_network<float>(cfg.network, rng);
  training::AdamState adam;
  adam.init(net);
  std::vector<float> d(2 * 3 * 16 * 16);
  for (auto& v : d) v = static_cast<float>(rng.uniform());
  auto batch = core::Tensor<float>::from_data({2, 3, 16, 16}, d);

  std::vector<std::vector<double>> acc(net.ar_blocks.size());
  for (size_t b = 0; b < net.ar_blocks.size(); ++b)
    acc[b].assign(net.ar_blocks[b].a.w.data().size(), 0.0);

  for (int id = 1; id <= 8; ++id) {
    const auto& o = orderings::ordering_by_id(id);
    std::vector<std::vector<float>> before(net.ar_blocks.size());
    for (size_t b = 0; b < net.ar_blocks.size(); ++b) before[b] = net.ar_blocks[b].a.w.data();
    core::Rng frng(100 + id);
    auto y = model::forward_ordered(net, batch, o, core::Mode::train, &frng);
    auto yp = model::forward_ordered(net, batch, o, core::Mode::train, &frng);
    auto loss = objectives::ac_loss(y, yp, cfg.omega);
    loss.backward();
    training::clip_global_norm(net, cfg.clip_norm);
    training::adam_step(net, adam, cfg.lr);
    for (size_t b = 0; b < net.ar_blocks.size(); ++b) {
      const auto& now = net.ar_blocks[b].a.w.data();
      for (size_t i = 0; i < now.size(); ++i)
        acc[b][i] += std::abs(double(now[i]) - double(before[b][i]));
    }
  }
  int untouched = 0;
  for (const auto& block : acc)
    for (double v : block)
      if (v == 0.0) ++untouched;
  bool ok = union_ok && untouched == 0;
  g.record(4, ok,
           fmt("raster plans cover all 9 taps (union %s); %d kernel entries without updates "
               "after 8 ordered passes",
               union_ok ? "complete" : "INCOMPLETE", untouched));
}

// ---------------------------------------------------------------------------
// 5. MI identities
// ---------------------------------------------------------------------------
void criterion_5(Gate& g) {
  bool ok = true;
  for (int K : {2, 3, 10}) {
    objectives::JointDistribution jd;
    jd.K = K;
    jd.P.assign(static_cast<size_t>(K) * K, 0.0);
    for (int a = 0; a < K; ++a) jd.P[static_cast<size_t>(a) * K + a] = 1.0 / K;
    ok = ok && std::abs(objectives::mutual_information(jd) - std::log(double(K))) < 1e-9;
    objectives::JointDistribution ju;
    ju.K = K;
    ju.P.assign(static_cast<size_t>(K) * K, 1.0 / (K * K));
    ok = ok && std::abs(objectives::mutual_information(ju)) < 1e-9;
  }

  core::Rng rng(5);
  double worst_low = 0, worst_high = 0;
  for (int t = 0; t < 10000; ++t) {
    int K = 2 + static_cast<int>(rng.uniform_int(6));
    objectives::JointDistribution jd;
    jd.K = K;
    jd.P.resize(static_cast<size_t>(K) * K);
    double s = 0;
    for (auto& p : jd.P) {
      p = -std::log(rng.uniform());
      s += p;
    }
    for (auto& p : jd.P) p /= s;
    double mi = objectives::mutual_information(jd);
    worst_low = std::min(worst_low, mi);
    worst_high = std::max(worst_high, mi - std::log(double(K)));
  }
  ok = ok && worst_low >= -1e-12 && worst_high <= 1e-12;

  // Symmetrized joints from the estimator: symmetric, normalized.
  double worst_asym = 0, worst_mass = 0;
  for (int t = 0; t < 100; ++t) {
    int K = 2 + static_cast<int>(rng.uniform_int(5));
    int h = 6, w = 6;
    std::vector<float> a(static_cast<size_t>(K) * h * w), b(a.size());
    for (int q = 0; q < h * w; ++q) {
      double sa = 0, sb = 0;
      std::vector<double> ea(K), eb(K);
      for (int k = 0; k < K; ++k) {
        ea[k] = std::exp(rng.normal());
        eb[k] = std::exp(rng.normal());
        sa += ea[k];
        sb += eb[k];
      }
      for (int k = 0; k < K; ++k) {
        a[static_cast<size_t>(k) * h * w + q] = static_cast<float>(ea[k] / sa);
        b[static_cast<size_t>(k) * h * w + q] = static_cast<float>(eb[k] / sb);
      }
    }
    auto y = core::Tensor<float>::from_data({1, K, h, w}, a);
    auto yp = core::Tensor<float>::from_data({1, K, h, w}, b);
    auto jd = objectives::joint_distribution(y, yp, objectives::default_displacements());
    double mass = 0;
    for (int p = 0; p < K; ++p)
      for (int q = 0; q < K; ++q) {
        worst_asym = std::max(worst_asym, std::abs(jd.at(p, q) - jd.at(q, p)));
        mass += jd.at(p, q);
      }
    worst_mass = std::max(worst_mass, std::abs(mass - 1.0));
  }
  ok = ok && worst_asym < 1e-6 && worst_mass < 1e-6;
  g.record(5, ok,
           fmt("ln K and zero identities at 1e-9; 10^4 joints in [0, ln K]; symmetry dev "
               "%.1e, mass dev %.1e",
               worst_asym, worst_mass));
}

// ---------------------------------------------------------------------------
// 6. Hungarian against brute force
// ---------------------------------------------------------------------------
void criterion_6(Gate& g) {
  std::vector<double> ex = {4, 1, 3, 2, 0, 5, 3, 2, 2};
  bool ok =
      std::abs(evaluation::assignment_cost(ex, 3, evaluation::hungarian(ex, 3)) - 5.0) < 1e-12;

  core::Rng rng(9);
  int checked = 0;
  for (int n = 2; n <= 7 && ok; ++n) {
    for (int t = 0; t < 500; ++t) {
      std::vector<double> cost(static_cast<size_t>(n) * n);
      for (auto& v : cost) v = rng.normal();
      double hc = evaluation::assignment_cost(cost, n, evaluation::hungarian(cost, n));
      std::vector<int> perm(n);
      for (int i = 0; i < n; ++i) perm[i] = i;
      double bc = 1e300;
      do {
        bc = std::min(bc, evaluation::assignment_cost(cost, n, perm));
      } while (std::next_permutation(perm.begin(), perm.end()));
      ++checked;
      if (std::abs(hc - bc) > 1e-9) {
        ok = false;
        std::fprintf(stderr, "[acceptance]   hungarian %f != brute force %f at n=%d\n", hc, bc,
                     n);
        break;
      }
    }
  }
  g.record(6, ok, fmt("3x3 example cost 5; %d random matrices match brute force (n=2..7)",
                      checked));
}

// ---------------------------------------------------------------------------
// Shared end-to-end machinery (criteria 7, 8, 9, 11)
// ---------------------------------------------------------------------------
struct E2E {
  data::Dataset ds;
  fs::path root;
  std::vector<double> ac_acc;        // per training seed
  std::vector<double> baseline_acc;  // per training seed
  std::vector<double> run_minutes;
  fs::path seed1_metrics;
  training::TrainConfig seed1_cfg;
  bool ready = false;
};

training::TrainConfig e2e_config(model::Task task, int K, uint64_t seed) {
  training::TrainConfig cfg;
  cfg.task = task;
  cfg.network.task = task;
  cfg.network.variant = model::Variant::F2;
  cfg.network.K = K;
  cfg.network.C_feat = 8;
  cfg.network.base_channels = 32;
  cfg.network.max_channels = kRunMaxChannels;
  cfg.network.n_blocks = kRunBlocks;
  cfg.network.output_stride = 2;
  cfg.lr = 1e-5;
  cfg.batch = 16;
  cfg.crop = 32;
  cfg.pool = "raster8";
  cfg.sampling = orderings::PairStrategy::random;
  cfg.omega = objectives::default_displacements();
  cfg.epochs = kRunEpochs;
  cfg.seed = seed;
  cfg.checkpoint_every = 1000000;  // final checkpoint only
  return cfg;
}

std::vector<int> predict_labels(model::Network<float>& net, const data::Dataset& ds) {
  core::NoGradGuard ng;
  std::vector<int> pred;
  pred.reserve(static_cast<size_t>(ds.size()) * ds.H * ds.W);
  for (const auto& im : ds.items) {
    auto x = core::Tensor<float>::from_data({1, 3, im.H, im.W}, im.rgb);
    auto y = model::forward_inference(net, x);
    int K = y.dim(1);
    int64_t hw = static_cast<int64_t>(im.H) * im.W;
    for (int64_t q = 0; q < hw; ++q) {
      int best = 0;
      float bv = y.data()[static_cast<size_t>(q)];
      for (int k = 1; k < K; ++k) {
        float v = y.data()[static_cast<size_t>(k) * hw + q];
        if (v > bv) {
          bv = v;
          best = k;
        }
      }
      pred.push_back(best);
    }
  }
  return pred;
}

std::vector<uint8_t> flat_labels(const data::Dataset& ds) {
  std::vector<uint8_t> gt;
  gt.reserve(static_cast<size_t>(ds.size()) * ds.H * ds.W);
  for (const auto& im : ds.items) gt.insert(gt.end(), im.labels.begin(), im.labels.end());
  return gt;
}

const E2E& e2e(Gate& g) {
  static E2E state = [&g] {
    E2E s;
    s.root = fs::temp_directory_path() / "arseg-acceptance";
    fs::remove_all(s.root);
    fs::create_directories(s.root);

    data::SyntheticSpec sp;
    sp.n_images = 200;
    sp.H = 32;
    sp.W = 32;
    sp.K_gt = 3;
    sp.sigma_class = kSigmaClass;
    sp.sigma_noise = kSigmaNoise;
    sp.seed = kDataSeed;
    s.ds = data::generate_synthetic(sp);
    auto gt = flat_labels(s.ds);

    for (uint64_t seed : kTrainSeeds) {
      auto cfg = e2e_config(model::Task::AC, 3, seed);
      fs::path out = s.root / ("ac-seed" + std::to_string(seed));
      auto t0 = Clock::now();
      auto res = training::fit(cfg, s.ds, out.string());
      double minutes = elapsed_s(t0) / 60.0;

      model::Network<float> net = [&] {
        core::Rng r(1);
        auto n = model::build_network<float>(cfg.network, r);
        model::load_checkpoint(n, res.last_checkpoint);
        return n;
      }();
      auto pred = predict_labels(net, s.ds);
      double acc = evaluation::cluster_accuracy(pred, gt, 3, 3).matched_accuracy;

      core::Rng rr(cfg.seed);  // the exact pre-training starting point
      auto untrained = model::build_network<float>(cfg.network, rr);
      auto pred0 = predict_labels(untrained, s.ds);
      double acc0 = evaluation::cluster_accuracy(pred0, gt, 3, 3).matched_accuracy;

      s.ac_acc.push_back(acc);
      s.baseline_acc.push_back(acc0);
      s.run_minutes.push_back(minutes);
      std::fprintf(stderr,
                   "[acceptance]   AC seed %llu: %lld iters, acc %.4f, random-init %.4f, "
                   "%.1f min\n",
                   (unsigned long long)seed, (long long)res.iterations, acc, acc0, minutes);
      if (seed == kTrainSeeds.front()) {
        s.seed1_metrics = out / "metrics.csv";
        s.seed1_cfg = cfg;
      }
    }
    s.ready = true;
    return s;
  }();
  (void)g;
  return state;
}

void criterion_7(Gate& g) {
  const E2E& s = e2e(g);
  bool ok = s.ready;
  double min_acc = 1.0, max_base = 0.0, max_min = 0.0;
  for (size_t i = 0; i < s.ac_acc.size(); ++i) {
    min_acc = std::min(min_acc, s.ac_acc[i]);
    max_base = std::max(max_base, s.baseline_acc[i]);
    max_min = std::max(max_min, s.run_minutes[i]);
  }
  ok = ok && min_acc >= 0.80 && max_base <= 0.50 && max_min <= 30.0;
  g.record(7, ok,
           fmt("3 seeds: min acc %.4f (bar 0.80), max random-init %.4f (bar 0.50), max run "
               "%.1f min (bar 30)",
               min_acc, max_base, max_min));
}

void criterion_8(Gate& g) {
  const E2E& s = e2e(g);
  auto cfg = e2e_config(model::Task::ARL, 3, kTrainSeeds.front());
  fs::path out = s.root / "arl-seed1";
  auto t0 = Clock::now();
  auto res = training::fit(cfg, s.ds, out.string());
  double minutes = elapsed_s(t0) / 60.0;

  core::Rng r(1);
  auto net = model::build_network<float>(cfg.network, r);
  model::load_checkpoint(net, res.last_checkpoint);

  // PCA-whiten the per-pixel features, then K-means at K_gt (the CLI's
  // arl-kmeans path, inlined).
  core::NoGradGuard ng;
  const int C = cfg.network.C_feat;
  int64_t px = static_cast<int64_t>(s.ds.H) * s.ds.W;
  int64_t n = static_cast<int64_t>(s.ds.size()) * px;
  std::vector<double> feats(static_cast<size_t>(n) * C);
  int64_t img = 0;
  for (const auto& im : s.ds.items) {
    auto x = core::Tensor<float>::from_data({1, 3, im.H, im.W}, im.rgb);
    auto y = model::forward_inference(net, x);
    for (int64_t q = 0; q < px; ++q)
      for (int c = 0; c < C; ++c)
        feats[(static_cast<size_t>(img) * px + q) * C + c] =
            y.data()[static_cast<size_t>(c) * px + q];
    ++img;
  }
  auto whitener = evaluation::pca_fit(feats, n, C);
  auto white = whitener.apply(feats, n);
  core::Rng krng(cfg.seed + 17);
  auto km = evaluation::kmeans(white, n, whitener.Cp, 3, krng);
  auto gt = flat_labels(s.ds);
  double arl_acc = evaluation::cluster_accuracy(km.labels, gt, 3, 3).matched_accuracy;
  double ac_acc = s.ac_acc.front();

  bool ok = s.ready && arl_acc <= ac_acc + 0.02;
  std::fprintf(stderr, "[acceptance]   ARL: %lld iters, kmeans acc %.4f, %.1f min\n",
               (long long)res.iterations, arl_acc, minutes);
  g.record(8, ok, fmt("ARL + PCA-whiten + k-means acc %.4f vs AC %.4f (bar: ARL <= AC + 0.02)",
                      arl_acc, ac_acc));
}

void criterion_9(Gate& g) {
  const E2E& s = e2e(g);
  auto cfg = e2e_config(model::Task::AC, 6, kTrainSeeds.front());
  fs::path out = s.root / "ac-k6-seed1";
  auto res = training::fit(cfg, s.ds, out.string());

  core::Rng r(1);
  auto net = model::build_network<float>(cfg.network, r);
  model::load_checkpoint(net, res.last_checkpoint);
  auto pred = predict_labels(net, s.ds);
  auto gt = flat_labels(s.ds);
  auto m2o = evaluation::overcluster_map(pred, gt, pred, gt, 6, 3);
  double k3 = s.ac_acc.front();

  bool ok = s.ready && m2o.accuracy >= k3;
  g.record(9, ok,
           fmt("K=6 many-to-one acc %.4f vs K=3 one-to-one %.4f (overclustering must not "
               "lose)",
               m2o.accuracy, k3));
}

// ---------------------------------------------------------------------------
// 10. InfoNCE bound
// ---------------------------------------------------------------------------
void criterion_10(Gate& g) {
  core::Rng rng(77);
  bool ok = true;
  double worst_slack = -1e300;
  for (int t = 0; t < 1000; ++t) {
    int M = 2 + static_cast<int>(rng.uniform_int(15));
    int N = 2 + static_cast<int>(rng.uniform_int(24));
    std::vector<float> sdat(static_cast<size_t>(M) * N);
    for (auto& v : sdat) v = static_cast<float>(4.0 * rng.normal());
    auto S = core::Tensor<float>::from_data({M, N}, sdat);
    auto terms = core::infonce_terms(S);
    double obj = 0;
    for (int i = 0; i < M; ++i) obj -= terms.data()[static_cast<size_t>(i)];
    obj /= M;
    worst_slack = std::max(worst_slack, obj - std::log(double(N)));
    if (obj > std::log(double(N)) + 1e-6) ok = false;
  }

  // Degenerate constant-feature case: exactly zero.
  core::Rng crng(3);
  auto c1 = model::make_critic<float>(4, crng);
  auto c2 = model::make_critic<float>(4, crng);
  for (auto* c : {&c1, &c2})
    for (auto* t : {&c->c1.w, &c->c1.b, &c->c2.w, &c->c2.b, &c->cr.w, &c->cr.b})
      std::fill(t->data().begin(), t->data().end(), 0.f);
  auto y = core::Tensor<float>::filled({2, 4, 5, 5}, 0.3f);
  core::Rng lrng(9);
  auto loss = objectives::infonce_loss(y, y, c1, c2, objectives::default_displacements(), lrng);
  ok = ok && loss.data()[0] == 0.0f;
  g.record(10, ok,
           fmt("10^3 random critic outputs within ln N (worst slack %.1e); constant features "
               "give exactly %g",
               worst_slack, loss.data()[0]));
}

// ---------------------------------------------------------------------------
// 11. Determinism of the criterion-7 run
// ---------------------------------------------------------------------------
std::string strip_seconds_column(const fs::path& csv) {
  std::ifstream f(csv);
  std::ostringstream out;
  std::string line;
  while (std::getline(f, line)) {
    auto p = line.rfind(',');
    out << line.substr(0, p) << "\n";
  }
  return out.str();
}

void criterion_11(Gate& g) {
  const E2E& s = e2e(g);
  auto cfg = s.seed1_cfg;
  fs::path out = s.root / "ac-seed1-rerun";
  (void)training::fit(cfg, s.ds, out.string());
  std::string a = strip_seconds_column(s.seed1_metrics);
  std::string b = strip_seconds_column(out / "metrics.csv");
  bool ok = s.ready && !a.empty() && a == b;
  g.record(11, ok,
           fmt("rerun metrics identical across %zu lines (iter and loss columns; the "
               "wall-clock seconds column is excluded by design)",
               std::count(a.begin(), a.end(), '\n')));
}

}  // namespace

int main(int argc, char** argv) {
  std::set<int> wanted;
  for (int i = 1; i < argc; ++i) wanted.insert(std::atoi(argv[i]));
  auto run = [&](int n) { return wanted.empty() || wanted.count(n) > 0; };

  Gate g;
  auto t0 = Clock::now();
  if (run(1)) criterion_1(g);
  if (run(2)) criterion_2(g);
  if (run(3)) criterion_3(g);
  if (run(4)) criterion_4(g);
  if (run(5)) criterion_5(g);
  if (run(6)) criterion_6(g);
  if (run(10)) criterion_10(g);
  if (run(7)) criterion_7(g);
  if (run(8)) criterion_8(g);
  if (run(9)) criterion_9(g);
  if (run(11)) criterion_11(g);

  std::printf("\n");
  for (const auto& l : g.lines)
    if (!l.empty()) std::printf("%s\n", l.c_str());
  std::printf("\nacceptance: %s (%.1f min total)\n", g.all_pass ? "ALL CRITERIA PASS" : "FAILURES",
              elapsed_s(t0) / 60.0);
  return g.all_pass ? 0 : 1;
}
