// Data pipeline: synthetic generator, PPM/PGM round trips, dataset layout,
// augmentation algebra, and the batching contract.

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "arseg/data.hpp"

using namespace arseg;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& leaf) {
  fs::path p = fs::temp_directory_path() / leaf;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

}  // namespace

TEST(Generator, ZeroNoiseSingleSiteIsConstant) {
  data::SyntheticSpec sp;
  sp.n_images = 2;
  sp.H = 8;
  sp.W = 8;
  sp.K_gt = 2;
  sp.min_sites = sp.max_sites = 1;
  sp.sigma_class = 0;
  sp.sigma_noise = 0;
  sp.seed = 7;
  auto ds = data::generate_synthetic(sp);
  for (const auto& im : ds.items) {
    for (int c = 0; c < 3; ++c)
      for (int q = 0; q < 64; ++q) EXPECT_EQ(im.rgb[c * 64 + q], im.rgb[c * 64]);
    for (int q = 0; q < 64; ++q) EXPECT_EQ(im.labels[q], im.labels[0]);
  }
}

TEST(Generator, SeedDeterminism) {
  data::SyntheticSpec sp;
  sp.n_images = 5;
  sp.H = 16;
  sp.W = 16;
  sp.K_gt = 3;
  sp.seed = 42;
  auto a = data::generate_synthetic(sp);
  auto b = data::generate_synthetic(sp);
  for (int i = 0; i < 5; ++i) {
    EXPECT_EQ(a.items[i].rgb, b.items[i].rgb);
    EXPECT_EQ(a.items[i].labels, b.items[i].labels);
  }
}

TEST(Generator, ClassFrequenciesAreBalanced) {
  data::SyntheticSpec sp;
  sp.n_images = 200;
  sp.H = 32;
  sp.W = 32;
  sp.K_gt = 3;
  sp.seed = 1;
  auto ds = data::generate_synthetic(sp);
  std::vector<int64_t> cnt(3, 0);
  int64_t tot = 0;
  for (const auto& im : ds.items)
    for (uint8_t l : im.labels) {
      ++cnt[l];
      ++tot;
    }
  for (int k = 0; k < 3; ++k) {
    double f = static_cast<double>(cnt[k]) / static_cast<double>(tot);
    EXPECT_GE(f, 0.15) << "class " << k;
    EXPECT_LE(f, 0.55) << "class " << k;
  }
}

TEST(Generator, NoiselessImagesDecodeToLabelsByNearestColor) {
  data::SyntheticSpec sp;
  sp.n_images = 10;
  sp.H = 32;
  sp.W = 32;
  sp.K_gt = 3;
  sp.seed = 1;
  sp.sigma_class = 0;
  sp.sigma_noise = 0;
  auto ds = data::generate_synthetic(sp);
  auto pal = data::auto_palette(3);
  for (const auto& im : ds.items)
    for (int q = 0; q < 32 * 32; ++q) {
      int best = -1;
      double bd = 1e30;
      for (int k = 0; k < 3; ++k) {
        double d = 0;
        for (int c = 0; c < 3; ++c) {
          double diff = im.rgb[c * 1024 + q] - pal[k][c];
          d += diff * diff;
        }
        if (d < bd) {
          bd = d;
          best = k;
        }
      }
      ASSERT_EQ(best, im.labels[q]);
    }
}

TEST(Ppm, RoundTripWithinQuantizationAndIdempotent) {
  auto tmp = fresh_dir("arseg-data-ppm");
  core::Rng rng(3);
  data::LabeledImage im;
  im.H = 7;
  im.W = 5;
  im.rgb.resize(3 * 35);
  for (auto& v : im.rgb) v = static_cast<float>(rng.uniform());
  std::string p1 = (tmp / "a.ppm").string(), p2 = (tmp / "b.ppm").string();
  data::write_image(p1, im);
  auto rd = data::read_image(p1);
  ASSERT_EQ(rd.H, 7);
  ASSERT_EQ(rd.W, 5);
  float maxerr = 0;
  for (size_t i = 0; i < im.rgb.size(); ++i)
    maxerr = std::max(maxerr, std::abs(rd.rgb[i] - im.rgb[i]));
  EXPECT_LE(maxerr, 1.f / 255 + 1e-6f);
  data::write_image(p2, rd);
  EXPECT_EQ(slurp(p1), slurp(p2));
  fs::remove_all(tmp);
}

TEST(Ppm, HeaderParsingHandlesWhitespaceAndComments) {
  auto tmp = fresh_dir("arseg-data-hdr");
  std::string p = (tmp / "h.ppm").string();
  {
    std::ofstream f(p, std::ios::binary);
    f << "P6\n2 2\n255\n";
    for (int i = 0; i < 12; ++i) f.put(static_cast<char>(i * 20));
  }
  auto im = data::read_image(p);
  EXPECT_EQ(im.H, 2);
  EXPECT_EQ(im.W, 2);
  {
    std::ofstream f(p, std::ios::binary);
    f << "P6\n# a comment\n 2\t2 #x\n255\n";
    for (int i = 0; i < 12; ++i) f.put(static_cast<char>(i));
  }
  im = data::read_image(p);
  EXPECT_EQ(im.H, 2);
  EXPECT_EQ(im.W, 2);
  fs::remove_all(tmp);
}

TEST(Ppm, MalformedFilesAreRefusedWithDiagnostics) {
  auto tmp = fresh_dir("arseg-data-bad");
  std::string p = (tmp / "t.ppm").string();
  {
    std::ofstream f(p, std::ios::binary);
    f << "P6\n2 2\n255\n";
    f.put(static_cast<char>(0));
  }
  try {
    data::read_image(p);
    FAIL() << "truncated payload accepted";
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("expected 12"), std::string::npos) << e.what();
    EXPECT_NE(std::string(e.what()).find("got 1"), std::string::npos) << e.what();
  }
  {
    std::ofstream f(p, std::ios::binary);
    f << "P5\n2 2\n255\n";
  }
  EXPECT_THROW(data::read_image(p), ParseError);
  {
    std::ofstream f(p, std::ios::binary);
    f << "P6\n2 2\n65535\n";
  }
  EXPECT_THROW(data::read_image(p), ParseError);
  fs::remove_all(tmp);
}

TEST(Dataset, SaveLoadPreservesContentAndOptionalLabels) {
  auto tmp = fresh_dir("arseg-data-ds");
  data::SyntheticSpec sp;
  sp.n_images = 4;
  sp.H = 8;
  sp.W = 8;
  sp.K_gt = 3;
  sp.seed = 9;
  auto ds = data::generate_synthetic(sp);
  ds.items[2].has_labels = false;
  ds.items[2].labels.clear();
  std::string dir = (tmp / "ds").string();
  data::save_dataset(ds, dir);
  auto ld = data::load_dataset(dir);
  ASSERT_EQ(ld.size(), 4);
  EXPECT_EQ(ld.K_gt, 3);
  EXPECT_EQ(ld.H, 8);
  ASSERT_TRUE(ld.has_spec);
  EXPECT_EQ(ld.spec.K_gt, 3);
  EXPECT_EQ(ld.spec.seed, 9u);
  EXPECT_FALSE(ld.items[2].has_labels);
  ASSERT_TRUE(ld.items[1].has_labels);
  EXPECT_EQ(ld.items[1].labels, ds.items[1].labels);
  float maxerr = 0;
  for (size_t i = 0; i < ds.items[0].rgb.size(); ++i)
    maxerr = std::max(maxerr, std::abs(ld.items[0].rgb[i] - ds.items[0].rgb[i]));
  EXPECT_LE(maxerr, 1.f / 255 + 1e-6f);
  fs::remove_all(tmp);
}

TEST(Augmentation, DisabledConfigIsIdentity) {
  data::SyntheticSpec sp;
  sp.n_images = 1;
  sp.H = 6;
  sp.W = 6;
  sp.K_gt = 2;
  sp.seed = 3;
  auto ds = data::generate_synthetic(sp);
  data::Augmentation aug;
  aug.brightness = aug.contrast = aug.saturation = aug.hue = 0;
  aug.flip_prob = 0;
  aug.rotation = false;
  core::Rng rng(1);
  auto [out, rec] = data::augment(ds.items[0], aug, rng);
  EXPECT_TRUE(rec.identity());
  EXPECT_EQ(out.rgb, ds.items[0].rgb);
  EXPECT_EQ(out.labels, ds.items[0].labels);
}

TEST(Augmentation, FullHueRotationReturnsToStart) {
  core::Rng rng(5);
  data::LabeledImage im;
  im.H = 4;
  im.W = 4;
  im.rgb.resize(48);
  for (auto& v : im.rgb) v = static_cast<float>(rng.uniform());
  data::LabeledImage ref = im;
  data::apply_photometric(im, 0, 0, 0, 360.f);
  float maxerr = 0;
  for (size_t i = 0; i < im.rgb.size(); ++i)
    maxerr = std::max(maxerr, std::abs(im.rgb[i] - ref.rgb[i]));
  EXPECT_LT(maxerr, 1e-5f);
}

TEST(Augmentation, GeometryInvertsExactly) {
  core::Rng rng(11);
  for (int t = 0; t < 20; ++t) {
    data::GeomRecord rec;
    rec.flip = rng.uniform() < 0.5;
    rec.k = static_cast<int>(rng.uniform_int(4));
    rec.H = 5;
    rec.W = 7;
    std::vector<float> d(2 * 3 * 35);
    for (auto& v : d) v = static_cast<float>(rng.normal());
    auto x = core::Tensor<float>::from_data({2, 3, 5, 7}, d);
    auto y = data::apply_geometry(x, rec);
    auto back = data::invert_geometry(y, rec);
    EXPECT_EQ(back.data(), x.data()) << "trial " << t;
  }
}

TEST(Augmentation, GeometricPartPreservesLabelHistogramAndMatchesTensorOps) {
  data::SyntheticSpec sp;
  sp.n_images = 1;
  sp.H = 9;
  sp.W = 9;
  sp.K_gt = 3;
  sp.seed = 13;
  auto ds = data::generate_synthetic(sp);
  data::Augmentation aug;
  aug.photometric = false;
  core::Rng r2(77);
  auto [out, rec] = data::augment(ds.items[0], aug, r2);
  std::vector<int> h1(3, 0), h2(3, 0);
  for (auto l : ds.items[0].labels) ++h1[l];
  for (auto l : out.labels) ++h2[l];
  EXPECT_EQ(h1, h2);
  auto x = core::Tensor<float>::from_data({1, 3, 9, 9}, ds.items[0].rgb);
  auto y = data::apply_geometry(x, rec);
  EXPECT_TRUE(std::equal(y.data().begin(), y.data().end(), out.rgb.begin()));
}

TEST(Batching, PartitionCropAndDeterminismContract) {
  data::SyntheticSpec sp;
  sp.n_images = 200;
  sp.H = 16;
  sp.W = 16;
  sp.K_gt = 3;
  sp.seed = 4;
  auto ds = data::generate_synthetic(sp);
  core::Rng r1(100), r2(100);
  auto b1 = data::make_batches(ds, 30, 16, 1.0, r1);
  ASSERT_EQ(b1.size(), 7u);
  EXPECT_EQ(b1[6].x.dim(0), 20);
  const auto& im = ds.items[b1[0].indices[0]];
  EXPECT_TRUE(std::equal(im.rgb.begin(), im.rgb.end(), b1[0].x.data().begin()));
  EXPECT_TRUE(std::equal(im.labels.begin(), im.labels.end(), b1[0].labels.begin()));
  auto b2 = data::make_batches(ds, 30, 16, 1.0, r2);
  for (size_t i = 0; i < b1.size(); ++i) {
    EXPECT_EQ(b1[i].indices, b2[i].indices);
    EXPECT_EQ(b1[i].x.data(), b2[i].x.data());
  }
}

TEST(Batching, RescaleEnablesLargerCropsAndOversizeCropThrows) {
  data::SyntheticSpec sp;
  sp.n_images = 8;
  sp.H = 16;
  sp.W = 16;
  sp.K_gt = 3;
  sp.seed = 4;
  auto ds = data::generate_synthetic(sp);
  core::Rng r3(5);
  auto b3 = data::make_batches(ds, 8, 20, 2.0, r3);
  EXPECT_EQ(b3[0].x.dim(2), 20);
  EXPECT_EQ(b3[0].x.dim(3), 20);
  core::Rng r4(5);
  EXPECT_THROW(data::make_batches(ds, 8, 20, 1.0, r4), ConfigError);
}
