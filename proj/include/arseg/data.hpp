#pragma once

// Dataset representation, synthetic Voronoi data generation, PPM/PGM I/O,
// batching with rescale + random crop, and the augmentation pipeline with an
// invertible geometric record.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "arseg/common.hpp"
#include "arseg/conv.hpp"
#include "arseg/rng.hpp"
#include "arseg/tensor.hpp"

namespace arseg::data {

inline constexpr uint8_t kUnlabeled = 255;

// ---------------------------------------------------------------------------
// Domain types
// ---------------------------------------------------------------------------
struct LabeledImage {
  int H = 0, W = 0;
  std::vector<float> rgb;       // planar 3 x H x W, values in [0,1]
  bool has_labels = false;
  std::vector<uint8_t> labels;  // H x W, class ids or kUnlabeled

  void validate(int k_gt) const {
    ARSG_CHECK_DIM(rgb.size() == static_cast<size_t>(3) * H * W, "image buffer size mismatch");
    if (has_labels) {
      ARSG_CHECK_DIM(labels.size() == static_cast<size_t>(H) * W, "label buffer size mismatch");
      for (uint8_t l : labels)
        ARSG_CHECK_CONTRACT(l == kUnlabeled || l < k_gt, "label ", int(l), " out of range for ",
                            k_gt, " classes");
    }
  }
};

struct SyntheticSpec {
  int n_images = 0;
  int H = 0, W = 0;
  int K_gt = 0;
  int min_sites = 3, max_sites = 6;
  double sigma_class = 0.05;  // per-image jitter of each class color
  double sigma_noise = 0.03;  // per-pixel noise
  uint64_t seed = 0;
  std::vector<std::array<float, 3>> class_colors;  // empty -> auto palette

  void validate() const {
    ARSG_CHECK_CFG(n_images >= 1, "spec: n_images must be >= 1");
    ARSG_CHECK_CFG(H >= 1 && W >= 1, "spec: H and W must be >= 1");
    ARSG_CHECK_CFG(K_gt >= 2, "spec: K_gt must be >= 2");
    ARSG_CHECK_CFG(min_sites >= 1 && max_sites >= min_sites, "spec: bad site range");
    ARSG_CHECK_CFG(sigma_class >= 0 && sigma_noise >= 0, "spec: sigmas must be >= 0");
    ARSG_CHECK_CFG(class_colors.empty() || static_cast<int>(class_colors.size()) == K_gt,
                   "spec: class_colors must have K_gt entries or be empty");
  }
};

inline void to_json(nlohmann::json& j, const SyntheticSpec& s) {
  j = {{"n_images", s.n_images}, {"H", s.H},
       {"W", s.W},               {"K_gt", s.K_gt},
       {"min_sites", s.min_sites}, {"max_sites", s.max_sites},
       {"sigma_class", s.sigma_class}, {"sigma_noise", s.sigma_noise},
       {"seed", s.seed}};
  if (!s.class_colors.empty()) {
    nlohmann::json cols = nlohmann::json::array();
    for (const auto& c : s.class_colors) cols.push_back({c[0], c[1], c[2]});
    j["class_colors"] = cols;
  }
}

inline void from_json(const nlohmann::json& j, SyntheticSpec& s) {
  j.at("n_images").get_to(s.n_images);
  j.at("H").get_to(s.H);
  j.at("W").get_to(s.W);
  j.at("K_gt").get_to(s.K_gt);
  s.min_sites = j.value("min_sites", 3);
  s.max_sites = j.value("max_sites", 6);
  s.sigma_class = j.value("sigma_class", 0.05);
  s.sigma_noise = j.value("sigma_noise", 0.03);
  s.seed = j.value("seed", uint64_t(0));
  s.class_colors.clear();
  if (j.contains("class_colors"))
    for (const auto& c : j.at("class_colors"))
      s.class_colors.push_back({c.at(0).get<float>(), c.at(1).get<float>(), c.at(2).get<float>()});
}

struct Dataset {
  int K_gt = 0;
  int H = 0, W = 0;
  uint64_t seed = 0;
  bool has_spec = false;
  SyntheticSpec spec;
  std::vector<LabeledImage> items;

  int size() const { return static_cast<int>(items.size()); }
};

// ---------------------------------------------------------------------------
// Color helpers (shared by the generator and photometric augmentation)
// ---------------------------------------------------------------------------
inline float luma(float r, float g, float b) { return 0.299f * r + 0.587f * g + 0.114f * b; }

inline void rgb_to_hsv(float r, float g, float b, float& h, float& s, float& v) {
  float maxc = std::max({r, g, b});
  float minc = std::min({r, g, b});
  float d = maxc - minc;
  v = maxc;
  s = maxc <= 0.f ? 0.f : d / maxc;
  if (d <= 0.f) {
    h = 0.f;
    return;
  }
  if (maxc == r)
    h = 60.f * ((g - b) / d);
  else if (maxc == g)
    h = 60.f * ((b - r) / d + 2.f);
  else
    h = 60.f * ((r - g) / d + 4.f);
  if (h < 0.f) h += 360.f;
}

inline void hsv_to_rgb(float h, float s, float v, float& r, float& g, float& b) {
  float c = v * s;
  float hp = h / 60.f;
  float x = c * (1.f - std::abs(std::fmod(hp, 2.f) - 1.f));
  float r1 = 0, g1 = 0, b1 = 0;
  int sec = static_cast<int>(hp) % 6;
  switch (sec) {
    case 0: r1 = c; g1 = x; break;
    case 1: r1 = x; g1 = c; break;
    case 2: g1 = c; b1 = x; break;
    case 3: g1 = x; b1 = c; break;
    case 4: r1 = x; b1 = c; break;
    default: r1 = c; b1 = x; break;
  }
  float m = v - c;
  r = r1 + m;
  g = g1 + m;
  b = b1 + m;
}

// K well-separated colors: evenly spaced hues at fixed saturation/value.
inline std::vector<std::array<float, 3>> auto_palette(int k) {
  std::vector<std::array<float, 3>> cols(k);
  for (int i = 0; i < k; ++i) {
    float r, g, b;
    hsv_to_rgb(360.f * i / k, 0.75f, 0.85f, r, g, b);
    cols[i] = {r, g, b};
  }
  return cols;
}

// ---------------------------------------------------------------------------
// Synthetic Voronoi generator
// ---------------------------------------------------------------------------
inline Dataset generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  auto colors = spec.class_colors.empty() ? auto_palette(spec.K_gt) : spec.class_colors;
  Dataset ds;
  ds.K_gt = spec.K_gt;
  ds.H = spec.H;
  ds.W = spec.W;
  ds.seed = spec.seed;
  ds.has_spec = true;
  ds.spec = spec;
  ds.items.reserve(spec.n_images);
  core::Rng master(spec.seed);
  auto clamp01 = [](double v) { return static_cast<float>(std::clamp(v, 0.0, 1.0)); };
  for (int img = 0; img < spec.n_images; ++img) {
    core::Rng rng = master.fork(static_cast<uint64_t>(img));
    int n_sites = spec.min_sites +
                  static_cast<int>(rng.uniform_int(
                      static_cast<uint64_t>(spec.max_sites - spec.min_sites + 1)));
    std::vector<double> sy(n_sites), sx(n_sites);
    for (int s = 0; s < n_sites; ++s) {
      sy[s] = rng.uniform() * spec.H;
      sx[s] = rng.uniform() * spec.W;
    }
    // Round-robin class assignment over a shuffled class order keeps every
    // class present whenever n_sites >= K_gt and areas roughly balanced.
    std::vector<int> order(spec.K_gt);
    for (int k = 0; k < spec.K_gt; ++k) order[k] = k;
    rng.shuffle(order);
    std::vector<int> site_class(n_sites);
    for (int s = 0; s < n_sites; ++s) site_class[s] = order[s % spec.K_gt];
    // Per-image jitter of each class color.
    std::vector<std::array<float, 3>> col(spec.K_gt);
    for (int k = 0; k < spec.K_gt; ++k)
      for (int c = 0; c < 3; ++c)
        col[k][c] = clamp01(colors[k][c] + spec.sigma_class * rng.normal());

    LabeledImage im;
    im.H = spec.H;
    im.W = spec.W;
    im.rgb.resize(static_cast<size_t>(3) * spec.H * spec.W);
    im.has_labels = true;
    im.labels.resize(static_cast<size_t>(spec.H) * spec.W);
    int64_t hw = static_cast<int64_t>(spec.H) * spec.W;
    for (int i = 0; i < spec.H; ++i)
      for (int j = 0; j < spec.W; ++j) {
        double py = i + 0.5, px = j + 0.5;
        int best = 0;
        double bd = 1e300;
        for (int s = 0; s < n_sites; ++s) {
          double d = (py - sy[s]) * (py - sy[s]) + (px - sx[s]) * (px - sx[s]);
          if (d < bd) {  // strict: ties keep the lowest site index
            bd = d;
            best = s;
          }
        }
        int cls = site_class[best];
        im.labels[static_cast<size_t>(i) * spec.W + j] = static_cast<uint8_t>(cls);
        for (int c = 0; c < 3; ++c)
          im.rgb[c * hw + static_cast<int64_t>(i) * spec.W + j] =
              clamp01(col[cls][c] + spec.sigma_noise * rng.normal());
      }
    ds.items.push_back(std::move(im));
  }
  return ds;
}

// ---------------------------------------------------------------------------
// PPM (P6) / PGM (P5) binary I/O, 8-bit, with byte-offset parse errors
// ---------------------------------------------------------------------------
namespace detail {

inline std::string slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError(cat("cannot open ", path, " for reading"));
  std::ostringstream ss;
  ss << f.rdbuf();
  return std::move(ss).str();
}

inline void skip_space(const std::string& s, size_t& pos) {
  while (pos < s.size()) {
    if (std::isspace(static_cast<unsigned char>(s[pos]))) {
      ++pos;
    } else if (s[pos] == '#') {
      while (pos < s.size() && s[pos] != '\n') ++pos;
    } else {
      break;
    }
  }
}

inline long long read_pnm_int(const std::string& s, size_t& pos, const char* what,
                              const std::string& path) {
  skip_space(s, pos);
  size_t start = pos;
  long long v = 0;
  while (pos < s.size() && std::isdigit(static_cast<unsigned char>(s[pos]))) {
    v = v * 10 + (s[pos] - '0');
    if (v > 1'000'000'000LL)
      throw ParseError(cat(path, ": ", what, " overflows at byte ", start));
    ++pos;
  }
  if (pos == start)
    throw ParseError(cat(path, ": expected ", what, " at byte ", start));
  return v;
}

// Parses a P6/P5 header, returns (W, H) and leaves pos at the payload start.
inline std::pair<int, int> read_pnm_header(const std::string& s, size_t& pos, char kind,
                                           const std::string& path) {
  if (s.size() < 2 || s[0] != 'P' || s[1] != kind)
    throw ParseError(cat(path, ": bad magic at byte 0 (expected P", kind, ")"));
  pos = 2;
  long long w = read_pnm_int(s, pos, "width", path);
  long long h = read_pnm_int(s, pos, "height", path);
  long long maxval = read_pnm_int(s, pos, "maxval", path);
  if (w < 1 || h < 1 || w > 65535 || h > 65535)
    throw ParseError(cat(path, ": dimensions ", w, "x", h, " out of range"));
  if (maxval != 255) throw ParseError(cat(path, ": unsupported maxval ", maxval, " (want 255)"));
  if (pos >= s.size() || !std::isspace(static_cast<unsigned char>(s[pos])))
    throw ParseError(cat(path, ": expected single whitespace before payload at byte ", pos));
  ++pos;
  return {static_cast<int>(w), static_cast<int>(h)};
}

inline uint8_t quantize(float v) {
  float q = std::round(std::clamp(v, 0.f, 1.f) * 255.f);
  return static_cast<uint8_t>(q);
}

}  // namespace detail

inline LabeledImage read_image(const std::string& path) {
  std::string s = detail::slurp(path);
  size_t pos = 0;
  auto [w, h] = detail::read_pnm_header(s, pos, '6', path);
  size_t need = static_cast<size_t>(w) * h * 3;
  if (s.size() - pos < need)
    throw ParseError(cat(path, ": truncated payload, expected ", need, " bytes, got ",
                         s.size() - pos, " (payload starts at byte ", pos, ")"));
  LabeledImage im;
  im.H = h;
  im.W = w;
  im.rgb.resize(need);
  int64_t hw = static_cast<int64_t>(h) * w;
  const auto* p = reinterpret_cast<const unsigned char*>(s.data() + pos);
  for (int64_t q = 0; q < hw; ++q)
    for (int c = 0; c < 3; ++c) im.rgb[c * hw + q] = p[q * 3 + c] / 255.f;
  return im;
}

inline void write_image(const std::string& path, const LabeledImage& im) {
  ARSG_CHECK_DIM(im.rgb.size() == static_cast<size_t>(3) * im.H * im.W,
                 "write_image: buffer size mismatch");
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError(cat("cannot open ", path, " for writing"));
  f << "P6\n" << im.W << " " << im.H << "\n255\n";
  int64_t hw = static_cast<int64_t>(im.H) * im.W;
  std::vector<unsigned char> buf(static_cast<size_t>(hw) * 3);
  for (int64_t q = 0; q < hw; ++q)
    for (int c = 0; c < 3; ++c) buf[q * 3 + c] = detail::quantize(im.rgb[c * hw + q]);
  f.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!f) throw IoError(cat("short write to ", path));
}

struct LabelMap {
  int H = 0, W = 0;
  std::vector<uint8_t> v;
};

inline LabelMap read_labels(const std::string& path) {
  std::string s = detail::slurp(path);
  size_t pos = 0;
  auto [w, h] = detail::read_pnm_header(s, pos, '5', path);
  size_t need = static_cast<size_t>(w) * h;
  if (s.size() - pos < need)
    throw ParseError(cat(path, ": truncated payload, expected ", need, " bytes, got ",
                         s.size() - pos, " (payload starts at byte ", pos, ")"));
  LabelMap lm;
  lm.H = h;
  lm.W = w;
  lm.v.assign(reinterpret_cast<const unsigned char*>(s.data() + pos),
              reinterpret_cast<const unsigned char*>(s.data() + pos) + need);
  return lm;
}

inline void write_labels(const std::string& path, const std::vector<uint8_t>& labels, int h,
                         int w) {
  ARSG_CHECK_DIM(labels.size() == static_cast<size_t>(h) * w, "write_labels: size mismatch");
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError(cat("cannot open ", path, " for writing"));
  f << "P5\n" << w << " " << h << "\n255\n";
  f.write(reinterpret_cast<const char*>(labels.data()),
          static_cast<std::streamsize>(labels.size()));
  if (!f) throw IoError(cat("short write to ", path));
}

// ---------------------------------------------------------------------------
// Dataset directory layout: images/NNNNNN.ppm, labels/NNNNNN.pgm, meta.json
// ---------------------------------------------------------------------------
namespace detail {
inline std::string index_name(int i, const char* ext) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%06d%s", i, ext);
  return buf;
}
}  // namespace detail

inline void save_dataset(const Dataset& ds, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(dir) / "images");
  fs::create_directories(fs::path(dir) / "labels");
  for (int i = 0; i < ds.size(); ++i) {
    const auto& im = ds.items[i];
    write_image((fs::path(dir) / "images" / detail::index_name(i, ".ppm")).string(), im);
    if (im.has_labels)
      write_labels((fs::path(dir) / "labels" / detail::index_name(i, ".pgm")).string(),
                   im.labels, im.H, im.W);
  }
  nlohmann::json j = {{"n_images", ds.size()},
                      {"K_gt", ds.K_gt},
                      {"H", ds.H},
                      {"W", ds.W},
                      {"seed", ds.seed}};
  if (ds.has_spec) j["spec"] = ds.spec;
  std::ofstream f(fs::path(dir) / "meta.json");
  if (!f) throw IoError(cat("cannot write meta.json in ", dir));
  f << j.dump(2) << "\n";
}

inline Dataset load_dataset(const std::string& dir) {
  namespace fs = std::filesystem;
  std::string meta_path = (fs::path(dir) / "meta.json").string();
  nlohmann::json j;
  {
    std::ifstream f(meta_path);
    if (!f) throw IoError(cat("cannot open ", meta_path));
    try {
      f >> j;
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(cat(meta_path, ": ", e.what()));
    }
  }
  Dataset ds;
  try {
    int n = j.at("n_images").get<int>();
    ds.K_gt = j.at("K_gt").get<int>();
    ds.H = j.at("H").get<int>();
    ds.W = j.at("W").get<int>();
    ds.seed = j.value("seed", uint64_t(0));
    if (j.contains("spec")) {
      ds.has_spec = true;
      ds.spec = j.at("spec").get<SyntheticSpec>();
    }
    ds.items.reserve(n);
    for (int i = 0; i < n; ++i) {
      LabeledImage im =
          read_image((fs::path(dir) / "images" / detail::index_name(i, ".ppm")).string());
      std::string lp = (fs::path(dir) / "labels" / detail::index_name(i, ".pgm")).string();
      if (fs::exists(lp)) {
        LabelMap lm = read_labels(lp);
        ARSG_CHECK_DIM(lm.H == im.H && lm.W == im.W, "label/image dims differ for item ", i);
        im.has_labels = true;
        im.labels = std::move(lm.v);
      }
      im.validate(ds.K_gt);
      ds.items.push_back(std::move(im));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(cat(meta_path, ": ", e.what()));
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------
struct Augmentation {
  bool photometric = true;
  bool flip = true;
  bool rotation = true;
  float brightness = 0.1f, contrast = 0.1f, saturation = 0.1f, hue = 0.1f;
  float flip_prob = 0.5f;

  void validate() const {
    ARSG_CHECK_CFG(brightness <= 0.5f && contrast <= 0.5f && saturation <= 0.5f && hue <= 0.5f,
                   "augmentation: jitter amplitudes must be <= 0.5");
    ARSG_CHECK_CFG(brightness >= 0 && contrast >= 0 && saturation >= 0 && hue >= 0,
                   "augmentation: jitter amplitudes must be >= 0");
    ARSG_CHECK_CFG(flip_prob >= 0.f && flip_prob <= 1.f, "augmentation: flip_prob in [0,1]");
  }
};

struct GeomRecord {
  bool flip = false;
  int k = 0;  // quarter-turns counter-clockwise, applied after the flip
  int H = 0, W = 0;  // pre-transform spatial dims
  bool identity() const { return !flip && k == 0; }
};

// Photometric pipeline with explicit deltas (fractions; hue in degrees):
// brightness x(1+db); contrast toward the per-image luma mean x(1+dc);
// saturation toward per-pixel luma x(1+ds); hue rotation by dh degrees.
// Applied in that order, then clamped to [0,1]. RGB only.
inline void apply_photometric(LabeledImage& im, float db, float dc, float ds, float dh_degrees) {
  int64_t hw = static_cast<int64_t>(im.H) * im.W;
  float* r = im.rgb.data();
  float* g = im.rgb.data() + hw;
  float* b = im.rgb.data() + 2 * hw;
  if (db != 0.f)
    for (int64_t q = 0; q < 3 * hw; ++q) im.rgb[q] *= 1.f + db;
  if (dc != 0.f) {
    double mean = 0;
    for (int64_t q = 0; q < hw; ++q) mean += luma(r[q], g[q], b[q]);
    float mu = static_cast<float>(mean / hw);
    for (int64_t q = 0; q < 3 * hw; ++q) im.rgb[q] = mu + (im.rgb[q] - mu) * (1.f + dc);
  }
  if (ds != 0.f)
    for (int64_t q = 0; q < hw; ++q) {
      float y = luma(r[q], g[q], b[q]);
      r[q] = y + (r[q] - y) * (1.f + ds);
      g[q] = y + (g[q] - y) * (1.f + ds);
      b[q] = y + (b[q] - y) * (1.f + ds);
    }
  if (dh_degrees != 0.f)
    for (int64_t q = 0; q < hw; ++q) {
      float h, s, v;
      rgb_to_hsv(std::clamp(r[q], 0.f, 1.f), std::clamp(g[q], 0.f, 1.f),
                 std::clamp(b[q], 0.f, 1.f), h, s, v);
      h = std::fmod(h + dh_degrees, 360.f);
      if (h < 0.f) h += 360.f;
      hsv_to_rgb(h, s, v, r[q], g[q], b[q]);
    }
  for (auto& v : im.rgb) v = std::clamp(v, 0.f, 1.f);
}

namespace detail {

// Raw geometric transforms mirroring the core::flip_horizontal / core::rot90
// conventions (rot90 = k quarter-turns CCW; k=1 reads in[j][W-1-i]).
template <typename V>
std::vector<V> flip_raw(const std::vector<V>& src, int channels, int h, int w) {
  std::vector<V> out(src.size());
  for (int c = 0; c < channels; ++c)
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j)
        out[(static_cast<int64_t>(c) * h + i) * w + j] =
            src[(static_cast<int64_t>(c) * h + i) * w + (w - 1 - j)];
  return out;
}

template <typename V>
std::vector<V> rot90_raw(const std::vector<V>& src, int channels, int h, int w, int k) {
  k = ((k % 4) + 4) % 4;
  if (k == 0) return src;
  int ho = (k % 2 == 0) ? h : w;
  int wo = (k % 2 == 0) ? w : h;
  std::vector<V> out(src.size());
  for (int c = 0; c < channels; ++c)
    for (int i = 0; i < ho; ++i)
      for (int j = 0; j < wo; ++j) {
        int r, s;
        if (k == 1) {
          r = j;
          s = w - 1 - i;
        } else if (k == 2) {
          r = h - 1 - i;
          s = w - 1 - j;
        } else {
          r = h - 1 - j;
          s = i;
        }
        out[(static_cast<int64_t>(c) * ho + i) * wo + j] =
            src[(static_cast<int64_t>(c) * h + r) * w + s];
      }
  return out;
}

}  // namespace detail

// Photometric on rgb only, then flip -> rot90 on rgb and labels. The rng is
// consumed on a fixed path (four jitter draws, flip draw, rotation draw) so
// a given seed always yields the same record.
inline std::pair<LabeledImage, GeomRecord> augment(const LabeledImage& img, const Augmentation& aug,
                                                   core::Rng& rng) {
  aug.validate();
  LabeledImage out = img;
  GeomRecord rec;
  rec.H = img.H;
  rec.W = img.W;
  if (aug.photometric) {
    float db = static_cast<float>((rng.uniform() * 2 - 1) * aug.brightness);
    float dc = static_cast<float>((rng.uniform() * 2 - 1) * aug.contrast);
    float ds = static_cast<float>((rng.uniform() * 2 - 1) * aug.saturation);
    float dh = static_cast<float>((rng.uniform() * 2 - 1) * aug.hue * 360.0);
    apply_photometric(out, db, dc, ds, dh);
  }
  if (aug.flip) rec.flip = rng.uniform() < aug.flip_prob;
  if (aug.rotation) rec.k = static_cast<int>(rng.uniform_int(4));
  if (rec.flip) {
    out.rgb = detail::flip_raw(out.rgb, 3, out.H, out.W);
    if (out.has_labels) out.labels = detail::flip_raw(out.labels, 1, out.H, out.W);
  }
  if (rec.k != 0) {
    out.rgb = detail::rot90_raw(out.rgb, 3, out.H, out.W, rec.k);
    if (out.has_labels) out.labels = detail::rot90_raw(out.labels, 1, out.H, out.W, rec.k);
    if (rec.k % 2 == 1) std::swap(out.H, out.W);
  }
  return {std::move(out), rec};
}

// Forward geometric transform on an NCHW tensor (differentiable).
template <typename T>
core::Tensor<T> apply_geometry(const core::Tensor<T>& t, const GeomRecord& rec) {
  ARSG_CHECK_DIM(t.ndim() == 4 && t.dim(2) == rec.H && t.dim(3) == rec.W,
                 "apply_geometry: tensor is ", t.dim(2), "x", t.dim(3), ", record expects ",
                 rec.H, "x", rec.W);
  core::Tensor<T> y = t;
  if (rec.flip) y = core::flip_horizontal(y);
  if (rec.k != 0) y = core::rot90(y, rec.k);
  return y;
}

// Inverse geometric transform: undo the rotation, then the flip
// (g = R_k . F  =>  g^-1 = F . R_{4-k}). Differentiable.
template <typename T>
core::Tensor<T> invert_geometry(const core::Tensor<T>& t, const GeomRecord& rec) {
  int he = (rec.k % 2 == 1) ? rec.W : rec.H;
  int we = (rec.k % 2 == 1) ? rec.H : rec.W;
  ARSG_CHECK_DIM(t.ndim() == 4 && t.dim(2) == he && t.dim(3) == we,
                 "invert_geometry: tensor is ", t.dim(2), "x", t.dim(3), ", record expects ", he,
                 "x", we);
  core::Tensor<T> y = t;
  if (rec.k != 0) y = core::rot90(y, 4 - rec.k);
  if (rec.flip) y = core::flip_horizontal(y);
  return y;
}

// ---------------------------------------------------------------------------
// Rescale helpers and batching
// ---------------------------------------------------------------------------

// General bilinear resize of a planar C x H x W buffer (grow or shrink),
// same half-pixel source mapping as the bilinear_upsample op.
inline std::vector<float> resize_bilinear(const std::vector<float>& src, int channels, int h,
                                          int w, int ho, int wo) {
  ARSG_CHECK_DIM(src.size() == static_cast<size_t>(channels) * h * w, "resize: size mismatch");
  ARSG_CHECK_CFG(ho >= 1 && wo >= 1, "resize: target dims must be >= 1");
  core::BilinearAxis ay = core::bilinear_axis(h, ho);
  core::BilinearAxis ax = core::bilinear_axis(w, wo);
  std::vector<float> out(static_cast<size_t>(channels) * ho * wo);
  for (int c = 0; c < channels; ++c) {
    const float* s = src.data() + static_cast<int64_t>(c) * h * w;
    float* d = out.data() + static_cast<int64_t>(c) * ho * wo;
    for (int i = 0; i < ho; ++i)
      for (int j = 0; j < wo; ++j) {
        double wy = ay.w0[i], wx = ax.w0[j];
        double top = s[ay.i0[i] * w + ax.i0[j]] * wx + s[ay.i0[i] * w + ax.i1[j]] * (1 - wx);
        double bot = s[ay.i1[i] * w + ax.i0[j]] * wx + s[ay.i1[i] * w + ax.i1[j]] * (1 - wx);
        d[i * wo + j] = static_cast<float>(top * wy + bot * (1 - wy));
      }
  }
  return out;
}

inline std::vector<uint8_t> resize_nearest(const std::vector<uint8_t>& src, int h, int w, int ho,
                                           int wo) {
  std::vector<uint8_t> out(static_cast<size_t>(ho) * wo);
  for (int i = 0; i < ho; ++i)
    for (int j = 0; j < wo; ++j) {
      int si = std::clamp(static_cast<int>(std::floor((i + 0.5) * h / ho)), 0, h - 1);
      int sj = std::clamp(static_cast<int>(std::floor((j + 0.5) * w / wo)), 0, w - 1);
      out[static_cast<size_t>(i) * wo + j] = src[static_cast<size_t>(si) * w + sj];
    }
  return out;
}

struct Batch {
  core::Tensor<float> x;        // B x 3 x crop x crop
  std::vector<int> indices;     // dataset item index per image
  std::vector<uint8_t> labels;  // B x crop x crop, kUnlabeled where missing
};

// One epoch of batches: shuffle with the (epoch-seeded) rng, optional bilinear
// rescale, then a uniform random crop per image. The final batch may be
// partial. Deterministic for a given rng seed.
inline std::vector<Batch> make_batches(const Dataset& ds, int batch, int crop, double rescale,
                                       core::Rng& rng) {
  ARSG_CHECK_CFG(batch >= 1, "make_batches: batch must be >= 1");
  ARSG_CHECK_CFG(crop >= 1, "make_batches: crop must be >= 1");
  ARSG_CHECK_CFG(rescale > 0, "make_batches: rescale must be > 0");
  ARSG_CHECK_CFG(ds.size() >= 1, "make_batches: empty dataset");
  std::vector<int> order(ds.size());
  for (int i = 0; i < ds.size(); ++i) order[i] = i;
  rng.shuffle(order);
  std::vector<Batch> out;
  int64_t cc = static_cast<int64_t>(crop) * crop;
  for (int start = 0; start < ds.size(); start += batch) {
    int b = std::min(batch, ds.size() - start);
    Batch bt;
    bt.indices.assign(order.begin() + start, order.begin() + start + b);
    std::vector<float> xs(static_cast<size_t>(b) * 3 * cc);
    bt.labels.assign(static_cast<size_t>(b) * cc, kUnlabeled);
    for (int n = 0; n < b; ++n) {
      const LabeledImage& im = ds.items[bt.indices[n]];
      int h = im.H, w = im.W;
      const std::vector<float>* rgb = &im.rgb;
      const std::vector<uint8_t>* lab = im.has_labels ? &im.labels : nullptr;
      std::vector<float> scaled_rgb;
      std::vector<uint8_t> scaled_lab;
      if (rescale != 1.0) {
        int ho = std::max(1, static_cast<int>(std::lround(h * rescale)));
        int wo = std::max(1, static_cast<int>(std::lround(w * rescale)));
        scaled_rgb = resize_bilinear(im.rgb, 3, h, w, ho, wo);
        rgb = &scaled_rgb;
        if (lab) {
          scaled_lab = resize_nearest(im.labels, h, w, ho, wo);
          lab = &scaled_lab;
        }
        h = ho;
        w = wo;
      }
      ARSG_CHECK_CFG(crop <= h && crop <= w, "crop ", crop, " exceeds image ", h, "x", w,
                     " after rescale");
      int top = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(h - crop + 1)));
      int left = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(w - crop + 1)));
      for (int c = 0; c < 3; ++c)
        for (int i = 0; i < crop; ++i) {
          const float* s =
              rgb->data() + (static_cast<int64_t>(c) * h + top + i) * w + left;
          std::copy(s, s + crop,
                    xs.begin() + ((static_cast<int64_t>(n) * 3 + c) * crop + i) * crop);
        }
      if (lab)
        for (int i = 0; i < crop; ++i) {
          const uint8_t* s = lab->data() + static_cast<int64_t>(top + i) * w + left;
          std::copy(s, s + crop, bt.labels.begin() + (static_cast<int64_t>(n) * crop + i) * crop);
        }
    }
    bt.x = core::Tensor<float>::from_data({b, 3, crop, crop}, std::move(xs));
    out.push_back(std::move(bt));
  }
  return out;
}

}  // namespace arseg::data
