// arseg: command-line driver for the autoregressive segmentation library.
//
// Subcommands: gen-data, train, eval, segment, rf-vis, gradcheck. Every run
// writes a run.json (resolved config + seed + version) next to its outputs,
// and each command is reproducible from that file alone.
//
// Exit codes: 0 success, 1 numerical/test failure, 2 usage/config error,
// 3 I/O error.

#include <CLI11.hpp>
#include <algorithm>
#include <atomic>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <thread>

#include "arseg/evaluation.hpp"
#include "arseg/gradcheck.hpp"
#include "arseg/receptive.hpp"
#include "arseg/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

#ifdef ARSEG_VERSION_STRING
constexpr const char* kVersion = ARSEG_VERSION_STRING;
#else
constexpr const char* kVersion = "v1.0.0-untracked";
#endif

int worker_threads() {
  unsigned hw = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("ARSG_THREADS")) {
    char* end = nullptr;
    long v = std::strtol(env, &end, 10);
    if (end == env || *end != '\0' || v < 1)
      throw arseg::ConfigError(arseg::cat("ARSG_THREADS must be a positive integer, got '", env,
                                          "'"));
    hw = std::min<unsigned>(hw, static_cast<unsigned>(v));
  }
  return static_cast<int>(hw);
}

json slurp_json(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw arseg::IoError(arseg::cat("cannot open ", path.string()));
  json j;
  try {
    f >> j;
  } catch (const json::exception& e) {
    throw arseg::ParseError(arseg::cat(path.string(), ": ", e.what()));
  }
  return j;
}

void write_run_json(const fs::path& dir, const std::string& command, const json& config,
                    uint64_t seed) {
  fs::create_directories(dir);
  fs::path target = dir / "run.json";
  // A train-written run.json is the only record of the network architecture;
  // refuse to let another command destroy it.
  if (command != "train" && fs::exists(target)) {
    try {
      if (slurp_json(target).value("command", "") == "train")
        throw arseg::ConfigError(arseg::cat(target.string(),
                                            " records a training run; direct this"
                                            " command's output elsewhere"));
    } catch (const arseg::ParseError&) {
      // unreadable leftovers are fair game
    }
  }
  json j = {{"command", command}, {"version", kVersion}, {"seed", seed}, {"config", config}};
  std::ofstream f(target);
  if (!f) throw arseg::IoError(arseg::cat("cannot write run.json in ", dir.string()));
  f << j.dump(2) << "\n";
}

// The architecture isn't stored in the checkpoint; recover the training
// config from the run.json that `arseg train` wrote beside it.
arseg::training::TrainConfig config_for_checkpoint(const fs::path& ckpt) {
  fs::path rj = ckpt.parent_path() / "run.json";
  if (!fs::exists(rj))
    throw arseg::ConfigError(arseg::cat("no run.json next to ", ckpt.string(),
                                        "; cannot recover the network architecture"));
  json j = slurp_json(rj);
  if (j.value("command", "") != "train")
    throw arseg::ConfigError(arseg::cat(rj.string(), " was written by '",
                                        j.value("command", "?"),
                                        "', not by train; architecture unavailable"));
  arseg::training::TrainConfig cfg;
  try {
    j.at("config").get_to(cfg);
  } catch (const json::exception& e) {
    throw arseg::ParseError(arseg::cat(rj.string(), ": ", e.what()));
  }
  return cfg;
}

arseg::model::Network<float> load_network(const arseg::training::TrainConfig& cfg,
                                          const fs::path& ckpt) {
  arseg::core::Rng rng(cfg.seed);
  auto net = arseg::model::build_network<float>(cfg.network, rng);
  arseg::model::load_checkpoint(net, ckpt.string());
  return net;
}

arseg::core::Tensor<float> image_tensor(const arseg::data::LabeledImage& im) {
  return arseg::core::Tensor<float>::from_data({1, 3, im.H, im.W}, im.rgb);
}

// Per-image inference over the dataset, parallelized over images
// (ARSG_THREADS caps the workers). Returns the network output for each item.
std::vector<arseg::core::Tensor<float>> infer_all(arseg::model::Network<float>& net,
                                                  const arseg::data::Dataset& ds) {
  std::vector<arseg::core::Tensor<float>> outs(ds.items.size());
  int n_workers = std::min(worker_threads(), std::max(1, ds.size()));
  if (n_workers <= 1) {
    arseg::core::NoGradGuard guard;
    for (size_t i = 0; i < ds.items.size(); ++i)
      outs[i] = arseg::model::forward_inference(net, image_tensor(ds.items[i]));
    return outs;
  }
  std::atomic<size_t> next{0};
  std::vector<std::thread> pool;
  pool.reserve(n_workers);
  for (int t = 0; t < n_workers; ++t)
    pool.emplace_back([&] {
      arseg::core::NoGradGuard guard;  // grad mode is thread-local
      for (size_t i = next.fetch_add(1); i < ds.items.size(); i = next.fetch_add(1))
        outs[i] = arseg::model::forward_inference(net, image_tensor(ds.items[i]));
    });
  for (auto& th : pool) th.join();
  return outs;
}

std::vector<int> argmax_channels(const arseg::core::Tensor<float>& y) {
  int C = y.dim(1);
  int64_t hw = static_cast<int64_t>(y.dim(2)) * y.dim(3);
  std::vector<int> pred(static_cast<size_t>(hw));
  const auto& d = y.data();
  for (int64_t q = 0; q < hw; ++q) {
    int bk = 0;
    float bv = d[static_cast<size_t>(q)];
    for (int k = 1; k < C; ++k) {
      float v = d[static_cast<size_t>(k) * hw + q];
      if (v > bv) {
        bv = v;
        bk = k;
      }
    }
    pred[static_cast<size_t>(q)] = bk;
  }
  return pred;
}

// Fixed 16-color palette for segmentation output (class id -> RGB).
constexpr uint8_t kPalette[16][3] = {
    {230, 25, 75},  {60, 180, 75},   {255, 225, 25}, {0, 130, 200},
    {245, 130, 48}, {145, 30, 180},  {70, 240, 240}, {240, 50, 230},
    {210, 245, 60}, {250, 190, 212}, {0, 128, 128},  {220, 190, 255},
    {170, 110, 40}, {255, 250, 200}, {128, 0, 0},    {170, 255, 195}};

json accuracy_report(const arseg::evaluation::AssignmentResult& r, const std::string& mode) {
  return json{{"mode", mode},
              {"accuracy", r.matched_accuracy},
              {"permutation", r.permutation},
              {"confusion", r.confusion},
              {"K", r.K},
              {"K_gt", r.K_gt},
              {"n_labeled_pixels", r.n_labeled}};
}

void emit_report(const json& report, const fs::path& ckpt, const std::string& mode) {
  fs::path out = ckpt.parent_path() / ("report-" + mode + ".json");
  std::ofstream f(out);
  if (!f) throw arseg::IoError(arseg::cat("cannot write ", out.string()));
  f << report.dump(2) << "\n";
  std::printf("%s\n", report.dump(2).c_str());
  std::fprintf(stderr, "report written to %s\n", out.string().c_str());
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------
int cmd_gen_data(const std::string& spec_path, const std::string& out, bool force) {
  json sj = slurp_json(spec_path);
  arseg::data::SyntheticSpec spec;
  try {
    sj.get_to(spec);
  } catch (const json::exception& e) {
    throw arseg::ParseError(arseg::cat(spec_path, ": ", e.what()));
  }
  fs::path dir(out);
  if (fs::exists(dir) && !fs::is_empty(dir) && !force)
    throw arseg::ConfigError(arseg::cat("output directory '", out,
                                        "' is not empty (use --force to overwrite)"));
  auto ds = arseg::data::generate_synthetic(spec);
  arseg::data::save_dataset(ds, out);
  write_run_json(dir, "gen-data", sj, spec.seed);

  std::vector<int64_t> counts(static_cast<size_t>(spec.K_gt), 0);
  int64_t total = 0;
  for (const auto& im : ds.items)
    for (uint8_t l : im.labels)
      if (l != arseg::data::kUnlabeled) {
        ++counts[l];
        ++total;
      }
  std::printf("wrote %d images (%dx%d, K_gt=%d) to %s\n", ds.size(), ds.W, ds.H, ds.K_gt,
              out.c_str());
  for (int k = 0; k < spec.K_gt; ++k)
    std::printf("class %d: %.4f\n", k,
                total ? static_cast<double>(counts[k]) / static_cast<double>(total) : 0.0);
  return 0;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------
int cmd_train(const std::string& config_path, const std::string& data_dir,
              const std::string& out, const std::string& resume) {
  auto cfg = arseg::training::load_train_config(config_path);
  auto ds = arseg::data::load_dataset(data_dir);
  write_run_json(out, "train", json(cfg), cfg.seed);
  auto res = arseg::training::fit(cfg, ds, out, resume);
  std::printf("trained %lld iterations, final loss %.9g\n",
              static_cast<long long>(res.iterations), res.final_loss);
  std::printf("last checkpoint: %s\n", res.last_checkpoint.c_str());
  return 0;
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------
int parse_map_images(const std::string& s, int n_items) {
  if (s == "all") return n_items;
  char* end = nullptr;
  long v = std::strtol(s.c_str(), &end, 10);
  if (end == s.c_str() || *end != '\0' || v < 1)
    throw arseg::ConfigError(arseg::cat("--map-images wants a positive integer or 'all', got '",
                                        s, "'"));
  return static_cast<int>(std::min<long>(v, n_items));
}

int cmd_eval(const std::string& ckpt_path, const std::string& data_dir, const std::string& mode,
             int overcluster, const std::string& map_images) {
  fs::path ckpt(ckpt_path);
  auto cfg = config_for_checkpoint(ckpt);
  auto ds = arseg::data::load_dataset(data_dir);
  ARSG_CHECK_CFG(ds.K_gt >= 2, "eval: dataset has no class count in meta.json");
  auto net = load_network(cfg, ckpt);

  json run_cfg = {{"ckpt", ckpt_path},          {"data", data_dir},
                  {"mode", mode},               {"overcluster", overcluster},
                  {"map_images", map_images},   {"train", json(cfg)}};
  write_run_json(".", "eval", run_cfg, cfg.seed);

  std::vector<uint8_t> gt;
  for (const auto& im : ds.items) {
    ARSG_CHECK_CFG(im.has_labels, "eval: dataset item without labels");
    gt.insert(gt.end(), im.labels.begin(), im.labels.end());
  }
  int64_t px_per_image = static_cast<int64_t>(ds.H) * ds.W;

  if (mode == "ac") {
    if (cfg.network.task != arseg::model::Task::AC)
      throw arseg::ConfigError("eval --mode ac needs an AC checkpoint (this one is ARL)");
    auto outs = infer_all(net, ds);
    std::vector<int> pred;
    pred.reserve(gt.size());
    for (auto& y : outs) {
      auto p = argmax_channels(y);
      pred.insert(pred.end(), p.begin(), p.end());
    }
    int K = cfg.network.K;
    if (overcluster > 0) {
      ARSG_CHECK_CFG(overcluster == K, "--overcluster ", overcluster,
                     " does not match the checkpoint's K=", K);
      int n_map = parse_map_images(map_images, ds.size());
      size_t cut = static_cast<size_t>(n_map) * px_per_image;
      std::vector<int> sp(pred.begin(), pred.begin() + cut);
      std::vector<uint8_t> sg(gt.begin(), gt.begin() + cut);
      auto r = arseg::evaluation::overcluster_map(sp, sg, pred, gt, K, ds.K_gt);
      json rep = {{"mode", "ac-overcluster"}, {"accuracy", r.accuracy},
                  {"mapping", r.mapping},    {"K", K},
                  {"K_gt", ds.K_gt},         {"n_labeled_pixels", r.n_labeled},
                  {"map_images", n_map}};
      emit_report(rep, ckpt, mode);
    } else {
      auto r = arseg::evaluation::cluster_accuracy(pred, gt, K, ds.K_gt);
      emit_report(accuracy_report(r, mode), ckpt, mode);
    }
    return 0;
  }

  if (mode == "arl-kmeans") {
    if (cfg.network.task != arseg::model::Task::ARL)
      throw arseg::ConfigError("eval --mode arl-kmeans needs an ARL checkpoint (this one is AC)");
    auto outs = infer_all(net, ds);
    int C = outs[0].dim(1);
    int64_t n = static_cast<int64_t>(ds.size()) * px_per_image;
    std::vector<double> feats(static_cast<size_t>(n) * C);
    for (size_t i = 0; i < outs.size(); ++i) {
      const auto& d = outs[i].data();
      for (int64_t q = 0; q < px_per_image; ++q)
        for (int c = 0; c < C; ++c)
          feats[(static_cast<size_t>(i) * px_per_image + q) * C + c] =
              d[static_cast<size_t>(c) * px_per_image + q];
    }
    auto whitener = arseg::evaluation::pca_fit(feats, n, C);
    auto white = whitener.apply(feats, n);
    int K = overcluster > 0 ? overcluster : ds.K_gt;
    arseg::core::Rng krng(cfg.seed + 17);
    auto km = arseg::evaluation::kmeans(white, n, whitener.Cp, K, krng);
    if (overcluster > 0) {
      int n_map = parse_map_images(map_images, ds.size());
      size_t cut = static_cast<size_t>(n_map) * px_per_image;
      std::vector<int> sp(km.labels.begin(), km.labels.begin() + cut);
      std::vector<uint8_t> sg(gt.begin(), gt.begin() + cut);
      auto r = arseg::evaluation::overcluster_map(sp, sg, km.labels, gt, K, ds.K_gt);
      json rep = {{"mode", "arl-kmeans-overcluster"}, {"accuracy", r.accuracy},
                  {"mapping", r.mapping},            {"K", K},
                  {"K_gt", ds.K_gt},                 {"n_labeled_pixels", r.n_labeled},
                  {"map_images", n_map}};
      emit_report(rep, ckpt, mode);
    } else {
      auto r = arseg::evaluation::cluster_accuracy(km.labels, gt, K, ds.K_gt);
      emit_report(accuracy_report(r, mode), ckpt, mode);
    }
    return 0;
  }

  if (mode == "probe-linear" || mode == "probe-nonlinear") {
    // Deterministic 80/20 split by index: first 80% train, rest test.
    int n_train = std::max(1, (ds.size() * 4) / 5);
    if (n_train == ds.size()) --n_train;
    ARSG_CHECK_CFG(n_train >= 1, "probe eval needs at least 2 images");
    auto outs = infer_all(net, ds);
    int C = outs[0].dim(1);
    auto pack = [&](int lo, int hi) {
      std::vector<float> buf;
      buf.reserve(static_cast<size_t>(hi - lo) * C * px_per_image);
      for (int i = lo; i < hi; ++i) {
        const auto& d = outs[static_cast<size_t>(i)].data();
        buf.insert(buf.end(), d.begin(), d.end());
      }
      return arseg::core::Tensor<float>::from_data({hi - lo, C, ds.H, ds.W}, std::move(buf));
    };
    auto t_train = pack(0, n_train);
    auto t_test = pack(n_train, ds.size());
    std::vector<uint8_t> l_train(gt.begin(), gt.begin() + n_train * px_per_image);
    std::vector<uint8_t> l_test(gt.begin() + n_train * px_per_image, gt.end());
    arseg::core::Rng prng(cfg.seed + 29);
    auto kind = arseg::evaluation::probe_kind_from_string(
        mode == "probe-linear" ? "linear" : "nonlinear");
    auto r = arseg::evaluation::probe(t_train, l_train, t_test, l_test, ds.K_gt, kind, prng);
    json rep = {{"mode", mode},
                {"train_accuracy", r.train_accuracy},
                {"test_accuracy", r.test_accuracy},
                {"K_gt", ds.K_gt},
                {"n_train_images", n_train},
                {"n_test_images", ds.size() - n_train}};
    emit_report(rep, ckpt, mode);
    return 0;
  }

  throw arseg::ConfigError(arseg::cat("unknown eval mode '", mode,
                                      "' (want ac | arl-kmeans | probe-linear | probe-nonlinear)"));
}

// ---------------------------------------------------------------------------
// segment
// ---------------------------------------------------------------------------
int cmd_segment(const std::string& ckpt_path, const std::string& image_path,
                const std::string& out_path) {
  fs::path ckpt(ckpt_path);
  auto cfg = config_for_checkpoint(ckpt);
  auto net = load_network(cfg, ckpt);
  auto im = arseg::data::read_image(image_path);

  int os = cfg.network.output_stride;
  int H = im.H, W = im.W;
  int Hp = ((H + os - 1) / os) * os, Wp = ((W + os - 1) / os) * os;
  std::vector<float> rgb = im.rgb;
  if (Hp != H || Wp != W) {
    std::fprintf(stderr,
                 "warning: %dx%d not divisible by output stride %d; reflect-padding to %dx%d "
                 "and cropping the result\n",
                 W, H, os, Wp, Hp);
    std::vector<float> padded(static_cast<size_t>(3) * Hp * Wp);
    for (int c = 0; c < 3; ++c)
      for (int i = 0; i < Hp; ++i) {
        int si = i < H ? i : 2 * H - 2 - i;  // reflect without repeating the edge
        si = std::clamp(si, 0, H - 1);
        for (int j = 0; j < Wp; ++j) {
          int sj = j < W ? j : 2 * W - 2 - j;
          sj = std::clamp(sj, 0, W - 1);
          padded[(static_cast<size_t>(c) * Hp + i) * Wp + j] =
              rgb[(static_cast<size_t>(c) * H + si) * W + sj];
        }
      }
    rgb = std::move(padded);
  }

  arseg::core::NoGradGuard guard;
  auto x = arseg::core::Tensor<float>::from_data({1, 3, Hp, Wp}, std::move(rgb));
  auto y = arseg::model::forward_inference(net, x);
  int C = y.dim(1);
  const auto& d = y.data();
  arseg::data::LabeledImage seg;
  seg.H = H;
  seg.W = W;
  seg.rgb.assign(static_cast<size_t>(3) * H * W, 0.f);
  for (int i = 0; i < H; ++i)
    for (int j = 0; j < W; ++j) {
      int bk = 0;
      float bv = d[static_cast<size_t>(i) * Wp + j];
      for (int k = 1; k < C; ++k) {
        float v = d[(static_cast<size_t>(k) * Hp + i) * Wp + j];
        if (v > bv) {
          bv = v;
          bk = k;
        }
      }
      const uint8_t* rgbv = kPalette[bk % 16];
      for (int c = 0; c < 3; ++c)
        seg.rgb[(static_cast<size_t>(c) * H + i) * W + j] = rgbv[c] / 255.0f;
    }
  arseg::data::write_image(out_path, seg);

  fs::path out_dir = fs::path(out_path).parent_path();
  if (out_dir.empty()) out_dir = ".";
  write_run_json(out_dir, "segment",
                 json{{"ckpt", ckpt_path}, {"image", image_path}, {"out", out_path}}, cfg.seed);
  std::printf("wrote %s (%dx%d)\n", out_path.c_str(), W, H);
  return 0;
}

// ---------------------------------------------------------------------------
// rf-vis
// ---------------------------------------------------------------------------
std::pair<int, int> parse_size(const std::string& s) {
  auto x = s.find('x');
  if (x == std::string::npos || x == 0 || x + 1 >= s.size())
    throw arseg::ConfigError(arseg::cat("--size wants HxW (e.g. 16x16), got '", s, "'"));
  char* end = nullptr;
  long h = std::strtol(s.c_str(), &end, 10);
  if (end != s.c_str() + x) throw arseg::ConfigError(arseg::cat("bad --size '", s, "'"));
  long w = std::strtol(s.c_str() + x + 1, &end, 10);
  if (*end != '\0' || h < 1 || w < 1)
    throw arseg::ConfigError(arseg::cat("bad --size '", s, "'"));
  return {static_cast<int>(h), static_cast<int>(w)};
}

int cmd_rf_vis(int ordering_id, int layers, const std::string& size, bool attention,
               const std::string& out_path) {
  auto [H, W] = parse_size(size);
  auto o = arseg::orderings::ordering_by_id(ordering_id);
  auto rf = arseg::model::rf_support(o, layers, H, W, attention);
  std::vector<uint8_t> img(rf.support.size());
  for (size_t q = 0; q < img.size(); ++q) img[q] = rf.support[q] ? 255 : 0;
  arseg::data::write_labels(out_path, img, H, W);

  fs::path out_dir = fs::path(out_path).parent_path();
  if (out_dir.empty()) out_dir = ".";
  write_run_json(out_dir, "rf-vis",
                 json{{"ordering", ordering_id},
                      {"layers", layers},
                      {"size", size},
                      {"attention", attention},
                      {"out", out_path}},
                 123);
  std::printf("support: %d of %d positions (center pixel, %d layers, o%d%s)\n", rf.count(),
              H * W, layers, ordering_id, attention ? " + attention" : "");
  return 0;
}

// ---------------------------------------------------------------------------
// gradcheck
// ---------------------------------------------------------------------------
int cmd_gradcheck(const std::string& scope, const std::string& inject_fault) {
  arseg::gradcheck::fault_target() = inject_fault;
  std::vector<arseg::gradcheck::OpReport> reports;
  if (scope == "ops") {
    reports = arseg::gradcheck::run_ops_suite();
  } else if (scope == "network") {
    reports.push_back(arseg::gradcheck::run_network_composite());
  } else {
    throw arseg::ConfigError(arseg::cat("unknown --scope '", scope, "' (want ops | network)"));
  }
  arseg::gradcheck::fault_target().clear();
  bool ok = true;
  for (const auto& r : reports) {
    std::printf("%-22s worst rel %.3e (tol %.0e) %s\n", r.op.c_str(), r.max_rel, r.tol,
                r.pass ? "ok" : "FAIL");
    ok = ok && r.pass;
  }
  write_run_json(".", "gradcheck", json{{"scope", scope}}, 7);
  if (!ok) {
    for (const auto& r : reports)
      if (!r.pass)
        std::fprintf(stderr, "gradient mismatch in %s: worst relative error %.3e\n",
                     r.op.c_str(), r.max_rel);
    return 1;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"autoregressive unsupervised segmentation toolkit"};
  app.require_subcommand(1);

  std::string spec_path, out, config_path, data_dir, resume, ckpt_path, mode = "ac";
  std::string image_path, size = "16x16", map_images = "all", scope = "ops", inject_fault;
  bool force = false, attention = false;
  int overcluster = 0, ordering_id = 1, layers = 3;

  auto* gen = app.add_subcommand("gen-data", "generate a synthetic Voronoi dataset");
  gen->add_option("--spec", spec_path, "dataset spec JSON")->required();
  gen->add_option("--out", out, "output directory")->required();
  gen->add_flag("--force", force, "overwrite a non-empty output directory");

  auto* train = app.add_subcommand("train", "train a network");
  train->add_option("--config", config_path, "training config JSON")->required();
  train->add_option("--data", data_dir, "dataset directory")->required();
  train->add_option("--out", out, "output directory (checkpoints, metrics, run.json)")
      ->required();
  train->add_option("--resume", resume, "checkpoint to resume from");

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  eval->add_option("--ckpt", ckpt_path, "checkpoint path (run.json must sit next to it)")
      ->required();
  eval->add_option("--data", data_dir, "dataset directory")->required();
  eval->add_option("--mode", mode, "ac | arl-kmeans | probe-linear | probe-nonlinear")
      ->required();
  eval->add_option("--overcluster", overcluster,
                   "evaluate with the many-to-one overclustering protocol (value = K)");
  eval->add_option("--map-images", map_images,
                   "images used to fit the many-to-one mapping (count or 'all')");

  auto* seg = app.add_subcommand("segment", "segment one image with a trained checkpoint");
  seg->add_option("--ckpt", ckpt_path, "checkpoint path")->required();
  seg->add_option("--image", image_path, "input PPM")->required();
  seg->add_option("--out", out, "output segmentation PPM")->required();

  auto* rf = app.add_subcommand("rf-vis", "receptive-field support of the center pixel");
  rf->add_option("--ordering", ordering_id, "ordering id (1..16)")->required();
  rf->add_option("--layers", layers, "number of masked conv layers")->required();
  rf->add_option("--size", size, "feature map size HxW");
  rf->add_flag("--attention", attention, "insert an attention block after the first layer");
  rf->add_option("--out", out, "output PGM (255 = inside support)")->required();

  auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient verification");
  gc->add_option("--scope", scope, "ops | network");
  gc->add_option("--inject-fault", inject_fault, "corrupt the named op's backward (test fixture)")
      ->group("");  // hidden

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int rc = app.exit(e);      // prints the usage message; 0 for --help/--version
    return rc == 0 ? 0 : 2;    // usage errors exit 2 per the CLI contract
  }

  try {
    if (gen->parsed()) return cmd_gen_data(spec_path, out, force);
    if (train->parsed()) return cmd_train(config_path, data_dir, out, resume);
    if (eval->parsed()) return cmd_eval(ckpt_path, data_dir, mode, overcluster, map_images);
    if (seg->parsed()) return cmd_segment(ckpt_path, image_path, out);
    if (rf->parsed()) return cmd_rf_vis(ordering_id, layers, size, attention, out);
    if (gc->parsed()) return cmd_gradcheck(scope, inject_fault);
  } catch (const arseg::ConfigError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const arseg::ParseError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const arseg::IoError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  } catch (const arseg::Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
