#pragma once

// Optimization loop: ordering sampling, two forward passes, loss, Adam step,
// metrics CSV, checkpointing with filename-encoded resume.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "arseg/data.hpp"
#include "arseg/model.hpp"
#include "arseg/objectives.hpp"
#include "arseg/orderings.hpp"

namespace arseg::model {

inline void to_json(nlohmann::json& j, const NetworkConfig& c) {
  j = {{"variant", variant_name(c.variant)},
       {"K", c.K},
       {"C_feat", c.C_feat},
       {"output_stride", c.output_stride},
       {"attention", c.attention},
       {"attention_embed", c.attention_embed},
       {"attention_depth", c.attention_depth},
       {"dropout_p", c.dropout_p},
       {"base_channels", c.base_channels},
       {"max_channels", c.max_channels},
       {"n_blocks", c.n_blocks}};
}

inline void from_json(const nlohmann::json& j, NetworkConfig& c) {
  c.variant = variant_from_string(j.value("variant", "F2"));
  c.K = j.value("K", c.K);
  c.C_feat = j.value("C_feat", c.C_feat);
  c.output_stride = j.value("output_stride", c.output_stride);
  c.attention = j.value("attention", c.attention);
  c.attention_embed = j.value("attention_embed", c.attention_embed);
  c.attention_depth = j.value("attention_depth", c.attention_depth);
  c.dropout_p = j.value("dropout_p", c.dropout_p);
  c.base_channels = j.value("base_channels", c.base_channels);
  c.max_channels = j.value("max_channels", c.max_channels);
  c.n_blocks = j.value("n_blocks", c.n_blocks);
}

}  // namespace arseg::model

namespace arseg::data {

inline void to_json(nlohmann::json& j, const Augmentation& a) {
  j = {{"photometric", a.photometric}, {"flip", a.flip},
       {"rotation", a.rotation},       {"brightness", a.brightness},
       {"contrast", a.contrast},       {"saturation", a.saturation},
       {"hue", a.hue},                 {"flip_prob", a.flip_prob}};
}

inline void from_json(const nlohmann::json& j, Augmentation& a) {
  a.photometric = j.value("photometric", a.photometric);
  a.flip = j.value("flip", a.flip);
  a.rotation = j.value("rotation", a.rotation);
  a.brightness = j.value("brightness", a.brightness);
  a.contrast = j.value("contrast", a.contrast);
  a.saturation = j.value("saturation", a.saturation);
  a.hue = j.value("hue", a.hue);
  a.flip_prob = j.value("flip_prob", a.flip_prob);
}

}  // namespace arseg::data

namespace arseg::training {

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------
using ParamList = std::vector<std::pair<std::string, core::Tensor<float>>>;

struct AdamState {
  std::vector<std::vector<float>> m, v;  // parallel to the param list
  int64_t t = 0;

  void init(const ParamList& params) {
    m.assign(params.size(), {});
    v.assign(params.size(), {});
    for (size_t i = 0; i < params.size(); ++i) {
      size_t n = params[i].second.numel();
      m[i].assign(n, 0.f);
      v[i].assign(n, 0.f);
    }
    t = 0;
  }
  void init(const model::Network<float>& net) { init(net.params); }
};

// Standard bias-corrected Adam. Parameters with no populated gradient this
// step are treated as zero-gradient. Gradients are zeroed afterwards.
inline void adam_step(ParamList& params, AdamState& st, double lr, double beta1 = 0.9,
                      double beta2 = 0.999, double eps = 1e-8) {
  ARSG_CHECK_DIM(st.m.size() == params.size(), "adam: state does not match the param list");
  ++st.t;
  double bc1 = 1.0 - std::pow(beta1, double(st.t));
  double bc2 = 1.0 - std::pow(beta2, double(st.t));
  for (size_t p = 0; p < params.size(); ++p) {
    auto& [name, tensor] = params[p];
    auto impl = tensor.impl();
    size_t n = impl->data.size();
    bool has_grad = impl->grad.size() == n;
    float* w = impl->data.data();
    float* g = has_grad ? impl->grad.data() : nullptr;
    float* mi = st.m[p].data();
    float* vi = st.v[p].data();
    for (size_t i = 0; i < n; ++i) {
      double gv = g ? double(g[i]) : 0.0;
      if (std::isnan(gv) || std::isinf(gv))
        throw NumericError(cat("adam: non-finite gradient in parameter ", name, " at index ", i));
      double mn = beta1 * mi[i] + (1 - beta1) * gv;
      double vn = beta2 * vi[i] + (1 - beta2) * gv * gv;
      mi[i] = float(mn);
      vi[i] = float(vn);
      w[i] -= float(lr * (mn / bc1) / (std::sqrt(vn / bc2) + eps));
    }
    if (g) std::fill(impl->grad.begin(), impl->grad.end(), 0.f);
  }
}

inline void adam_step(model::Network<float>& net, AdamState& st, double lr, double beta1 = 0.9,
                      double beta2 = 0.999, double eps = 1e-8) {
  adam_step(net.params, st, lr, beta1, beta2, eps);
}

// Global-norm gradient clip across all parameters; returns the pre-clip norm.
inline double clip_global_norm(ParamList& params, double max_norm) {
  double sq = 0;
  for (auto& [name, tensor] : params)
    for (float g : tensor.impl()->grad) sq += double(g) * g;
  double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0) {
    float s = float(max_norm / norm);
    for (auto& [name, tensor] : params)
      for (float& g : tensor.impl()->grad) g *= s;
  }
  return norm;
}

inline double clip_global_norm(model::Network<float>& net, double max_norm) {
  return clip_global_norm(net.params, max_norm);
}

// ---------------------------------------------------------------------------
// TrainConfig
// ---------------------------------------------------------------------------
struct TrainConfig {
  model::Task task = model::Task::AC;
  model::NetworkConfig network;
  double lr = 1e-5;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  int batch = 16;
  int epochs = 1;
  int crop = 32;
  double rescale = 1.0;
  std::string pool = "raster8";  // raster8 | all16
  orderings::PairStrategy sampling = orderings::PairStrategy::random;
  objectives::DisplacementSet omega = objectives::default_displacements();
  bool aug_enabled = false;
  data::Augmentation aug;
  uint64_t seed = 1;
  int checkpoint_every = 1000;
  double clip_norm = 5.0;

  std::vector<orderings::Ordering> ordering_pool() const {
    if (pool == "raster8") return orderings::raster_pool();
    if (pool == "all16") return orderings::full_pool();
    throw ConfigError(cat("unknown ordering pool '", pool, "' (want raster8 or all16)"));
  }

  void validate() const {
    network.validate();
    ARSG_CHECK_CFG(network.task == task, "config: task and network.task disagree");
    ARSG_CHECK_CFG(lr > 0, "config: lr must be > 0");
    ARSG_CHECK_CFG(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1, "config: bad betas");
    ARSG_CHECK_CFG(batch >= 1, "config: batch must be >= 1");
    ARSG_CHECK_CFG(epochs >= 0, "config: epochs must be >= 0");
    ARSG_CHECK_CFG(crop >= 1, "config: crop must be >= 1");
    ARSG_CHECK_CFG(rescale > 0, "config: rescale must be > 0");
    ARSG_CHECK_CFG(checkpoint_every >= 1, "config: checkpoint_every must be >= 1");
    ARSG_CHECK_CFG(pool == "raster8" || pool == "all16", "config: pool must be raster8 or all16");
    if (pool == "all16")
      ARSG_CHECK_CFG(network.attention, "config: the all16 pool requires attention = on");
    if (task == model::Task::ARL) ARSG_CHECK_CFG(batch >= 2, "config: ARL needs batch >= 2");
    aug.validate();
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  nlohmann::json om = nlohmann::json::array();
  for (auto [du, dv] : c.omega.offsets) om.push_back({du, dv});
  j = {{"task", model::task_name(c.task)},
       {"network", c.network},
       {"lr", c.lr},
       {"beta1", c.beta1},
       {"beta2", c.beta2},
       {"eps", c.eps},
       {"batch", c.batch},
       {"epochs", c.epochs},
       {"crop", c.crop},
       {"rescale", c.rescale},
       {"pool", c.pool},
       {"sampling", orderings::pair_strategy_name(c.sampling)},
       {"omega", om},
       {"augmentation_enabled", c.aug_enabled},
       {"augmentation", c.aug},
       {"seed", c.seed},
       {"checkpoint_every", c.checkpoint_every},
       {"clip_norm", c.clip_norm}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  static const std::vector<std::string> known = {
      "task",   "network", "lr",       "beta1",   "beta2",
      "eps",    "batch",   "epochs",   "crop",    "rescale",
      "pool",   "sampling", "omega",   "augmentation_enabled", "augmentation",
      "seed",   "checkpoint_every", "clip_norm", "dropout_p"};
  for (auto it = j.begin(); it != j.end(); ++it)
    if (std::find(known.begin(), known.end(), it.key()) == known.end())
      throw ParseError(cat("config: unknown key '", it.key(), "'"));
  c.task = model::task_from_string(j.value("task", "AC"));
  if (j.contains("network")) j.at("network").get_to(c.network);
  c.network.task = c.task;
  if (j.contains("dropout_p")) c.network.dropout_p = j.at("dropout_p").get<double>();
  c.lr = j.value("lr", c.lr);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.eps = j.value("eps", c.eps);
  c.batch = j.value("batch", c.batch);
  c.epochs = j.value("epochs", c.epochs);
  c.crop = j.value("crop", c.crop);
  c.rescale = j.value("rescale", c.rescale);
  c.pool = j.value("pool", c.pool);
  if (j.contains("sampling"))
    c.sampling = orderings::pair_strategy_from_string(j.at("sampling").get<std::string>());
  if (j.contains("omega")) {
    c.omega.offsets.clear();
    for (const auto& o : j.at("omega"))
      c.omega.offsets.emplace_back(o.at(0).get<int>(), o.at(1).get<int>());
  }
  c.aug_enabled = j.value("augmentation_enabled", c.aug_enabled);
  if (j.contains("augmentation")) j.at("augmentation").get_to(c.aug);
  c.seed = j.value("seed", c.seed);
  c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
  c.clip_norm = j.value("clip_norm", c.clip_norm);
}

inline TrainConfig load_train_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError(cat("cannot open config ", path));
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(cat(path, ": ", e.what()));
  }
  TrainConfig c;
  try {
    j.get_to(c);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(cat(path, ": ", e.what()));
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Augmented second view at the tensor level
// ---------------------------------------------------------------------------
struct ViewPair {
  core::Tensor<float> view;             // B x 3 x h x w
  std::vector<data::GeomRecord> recs;   // per image
};

// Photometric jitter per image on raw buffers, then per-image flip/rotation.
// Only square inputs rotate in place, which batching guarantees (crop x crop).
inline ViewPair make_second_view(const core::Tensor<float>& batch, const data::Augmentation& aug,
                                 core::Rng& rng) {
  int B = batch.dim(0), C = batch.dim(1), H = batch.dim(2), W = batch.dim(3);
  ARSG_CHECK_DIM(C == 3, "make_second_view: expected RGB input");
  ARSG_CHECK_CFG(H == W || !aug.rotation, "make_second_view: rotation requires square crops");
  ViewPair vp;
  vp.recs.resize(B);
  std::vector<float> out(batch.numel());
  int64_t chw = static_cast<int64_t>(C) * H * W;
  for (int n = 0; n < B; ++n) {
    data::LabeledImage im;
    im.H = H;
    im.W = W;
    im.rgb.assign(batch.data().begin() + n * chw, batch.data().begin() + (n + 1) * chw);
    auto [a, rec] = data::augment(im, aug, rng);
    vp.recs[n] = rec;
    std::copy(a.rgb.begin(), a.rgb.end(), out.begin() + n * chw);
  }
  vp.view = core::Tensor<float>::from_data(batch.shape(), std::move(out));
  return vp;
}

// Per-image inverse geometry on a batched output map (differentiable). The
// records' stored dims are rescaled to the map's spatial size (maps stay
// square through the network).
template <typename T>
core::Tensor<T> invert_geometry_batch(const core::Tensor<T>& y,
                                      const std::vector<data::GeomRecord>& recs) {
  int B = y.dim(0);
  ARSG_CHECK_DIM(static_cast<size_t>(B) == recs.size(), "invert_geometry_batch: record count");
  bool all_identity = true;
  for (const auto& r : recs)
    if (!r.identity()) all_identity = false;
  if (all_identity) return y;
  std::vector<core::Tensor<T>> parts;
  parts.reserve(B);
  for (int n = 0; n < B; ++n) {
    data::GeomRecord r = recs[n];
    r.H = y.dim(2);
    r.W = y.dim(3);
    parts.push_back(data::invert_geometry(core::select_image(y, n), r));
  }
  return core::concat_batch(parts);
}

// ---------------------------------------------------------------------------
// Train step and fit
// ---------------------------------------------------------------------------

// One optimization step: sample an ordering pair, run both views, undo the
// second view's geometry, evaluate the task loss, clip, Adam. Returns the
// loss value.
inline double train_step(model::Network<float>& net, AdamState& adam,
                         const core::Tensor<float>& batch, const TrainConfig& cfg,
                         core::Rng& rng) {
  auto pool = cfg.ordering_pool();
  int hf = batch.dim(2) / net.config.output_stride;
  int wf = batch.dim(3) / net.config.output_stride;
  auto [oi, oj] = orderings::sample_pair(cfg.sampling, pool, rng, hf, wf);

  core::Tensor<float> y = model::forward_ordered(net, batch, oi, core::Mode::train, &rng);
  core::Tensor<float> loss;
  if (cfg.aug_enabled) {
    ViewPair vp = make_second_view(batch, cfg.aug, rng);
    core::Tensor<float> yp = model::forward_ordered(net, vp.view, oj, core::Mode::train, &rng);
    yp = invert_geometry_batch(yp, vp.recs);
    loss = cfg.task == model::Task::AC
               ? objectives::ac_loss(y, yp, cfg.omega)
               : objectives::infonce_loss(y, yp, *net.crit1, *net.crit2, cfg.omega, rng);
  } else {
    core::Tensor<float> yp = model::forward_ordered(net, batch, oj, core::Mode::train, &rng);
    loss = cfg.task == model::Task::AC
               ? objectives::ac_loss(y, yp, cfg.omega)
               : objectives::infonce_loss(y, yp, *net.crit1, *net.crit2, cfg.omega, rng);
  }
  double lv = loss.data()[0];
  if (std::isnan(lv) || std::isinf(lv)) throw NumericError(cat("train_step: non-finite loss ", lv));
  loss.backward();
  clip_global_norm(net, cfg.clip_norm);
  adam_step(net, adam, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps);
  return lv;
}

namespace detail {
// Recovers the iteration count encoded in "ckpt-NNNNNN.arsg".
inline int64_t iteration_from_checkpoint_name(const std::string& path) {
  std::string base = std::filesystem::path(path).filename().string();
  const std::string prefix = "ckpt-", suffix = ".arsg";
  if (base.size() > prefix.size() + suffix.size() && base.rfind(prefix, 0) == 0 &&
      base.compare(base.size() - suffix.size(), suffix.size(), suffix) == 0) {
    std::string digits = base.substr(prefix.size(), base.size() - prefix.size() - suffix.size());
    if (!digits.empty() &&
        std::all_of(digits.begin(), digits.end(), [](char c) { return std::isdigit(c); }))
      return std::stoll(digits);
  }
  throw ParseError(cat("cannot recover iteration from checkpoint name '", base,
                       "' (expected ckpt-NNNNNN.arsg)"));
}

inline std::string checkpoint_name(const std::string& dir, int64_t iter) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "ckpt-%06lld.arsg", static_cast<long long>(iter));
  return (std::filesystem::path(dir) / buf).string();
}
}  // namespace detail

struct FitResult {
  model::Network<float> net;
  int64_t iterations = 0;
  std::string last_checkpoint;
  double final_loss = 0;
};

// Epoch loop over make_batches with metrics CSV (iter,loss,seconds; 1-based
// iteration, loss at %.9g, flushed per line) and periodic checkpoints. The
// rng streams are forked per epoch / per iteration from the seed, so a resume
// at iteration t replays iterations > t exactly (Adam moments restart —
// documented deviation).
inline FitResult fit(const TrainConfig& cfg, const data::Dataset& ds, const std::string& out_dir,
                     const std::string& resume = "") {
  cfg.validate();
  ARSG_CHECK_CFG(ds.size() >= 1, "fit: empty dataset");
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);

  core::Rng init_rng(cfg.seed);
  FitResult res{model::build_network<float>(cfg.network, init_rng), 0, "", 0.0};
  int64_t start_iter = 0;
  if (!resume.empty()) {
    model::load_checkpoint(res.net, resume);
    start_iter = detail::iteration_from_checkpoint_name(resume);
  }
  AdamState adam;
  adam.init(res.net);

  int64_t ipe = (ds.size() + cfg.batch - 1) / cfg.batch;  // iterations per epoch
  int64_t total = ipe * cfg.epochs;
  ARSG_CHECK_CFG(start_iter <= total, "fit: resume iteration ", start_iter,
                 " exceeds the configured budget ", total);

  std::string metrics_path = (fs::path(out_dir) / "metrics.csv").string();
  bool append = !resume.empty() && fs::exists(metrics_path);
  std::ofstream metrics(metrics_path, append ? std::ios::app : std::ios::out);
  if (!metrics) throw IoError(cat("cannot open ", metrics_path, " for writing"));
  if (!append) metrics << "iter,loss,seconds\n" << std::flush;

  core::Rng master(cfg.seed);
  auto t0 = std::chrono::steady_clock::now();
  std::vector<data::Batch> batches;
  int64_t batches_epoch = -1;
  for (int64_t it = start_iter; it < total; ++it) {
    int64_t epoch = it / ipe;
    if (epoch != batches_epoch) {
      core::Rng erng = master.fork(1'000'000 + static_cast<uint64_t>(epoch));
      batches = data::make_batches(ds, cfg.batch, cfg.crop, cfg.rescale, erng);
      batches_epoch = epoch;
    }
    const data::Batch& b = batches[it % ipe];
    core::Rng srng = master.fork(2'000'000 + static_cast<uint64_t>(it));
    double loss = train_step(res.net, adam, b.x, cfg, srng);
    res.final_loss = loss;
    double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    char line[96];
    std::snprintf(line, sizeof(line), "%lld,%.9g,%.3f\n", static_cast<long long>(it + 1), loss,
                  secs);
    metrics << line << std::flush;
    if ((it + 1) % cfg.checkpoint_every == 0 && it + 1 != total) {
      res.last_checkpoint = detail::checkpoint_name(out_dir, it + 1);
      model::save_checkpoint(res.net, res.last_checkpoint);
    }
  }
  res.iterations = total;
  res.last_checkpoint = detail::checkpoint_name(out_dir, total);
  model::save_checkpoint(res.net, res.last_checkpoint);
  return res;
}

}  // namespace arseg::training
