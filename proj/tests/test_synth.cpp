#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "geomatch/loss.hpp"
#include "geomatch/synth.hpp"
#include "oracles.hpp"

using namespace geomatch;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("geomatch_synth_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

}  // namespace

TEST(ToyImage, DeterministicPerSeed) {
  EXPECT_EQ(gen_toy_image(5, 32), gen_toy_image(5, 32));
  const Image img = gen_toy_image(5, 32);
  EXPECT_EQ(img.height, 32);
  EXPECT_EQ(img.width, 32);
  EXPECT_EQ(img.channels, 3);
  for (double v : img.data) {
    ASSERT_GE(v, 0.0);
    ASSERT_LE(v, 1.0);
  }
}

TEST(ToyImage, DistinctSeedsDifferAndHaveTexture) {
  for (std::uint64_t s = 0; s < 100; ++s) {
    const Image a = gen_toy_image(2 * s, 32), b = gen_toy_image(2 * s + 1, 32);
    int differing = 0;
    for (int r = 0; r < 32; ++r) {
      for (int c = 0; c < 32; ++c) {
        bool diff = false;
        for (int ch = 0; ch < 3; ++ch) diff |= std::abs(a.at(r, c, ch) - b.at(r, c, ch)) > 1e-6;
        differing += diff ? 1 : 0;
      }
    }
    ASSERT_GT(differing, 32 * 32 / 10) << "seed pair " << s;
    for (int ch = 0; ch < 3; ++ch) {
      double mean = 0.0, sq = 0.0;
      for (int i = 0; i < 32 * 32; ++i) mean += a.data[i * 3 + ch];
      mean /= 1024.0;
      for (int i = 0; i < 32 * 32; ++i) sq += (a.data[i * 3 + ch] - mean) * (a.data[i * 3 + ch] - mean);
      ASSERT_GT(sq / 1024.0, 1e-4) << "seed " << 2 * s << " channel " << ch;
    }
  }
}

TEST(PerturbCorners, ZeroFractionIsIdentity) {
  Rng rng(1);
  const auto c = perturb_corners(rng, 0.0);
  EXPECT_EQ(c.src, unit_corners());
  EXPECT_EQ(c.dst, unit_corners());
}

TEST(PerturbCorners, OffsetsBoundedAndQuadConvex) {
  Rng rng(2);
  for (int trial = 0; trial < 2000; ++trial) {
    const auto c = perturb_corners(rng, 0.25);
    ASSERT_TRUE(is_convex(c.dst));
    for (int i = 0; i < 4; ++i) {
      ASSERT_LE(std::abs(c.dst[i].x - c.src[i].x), 0.5);
      ASSERT_LE(std::abs(c.dst[i].y - c.src[i].y), 0.5);
    }
  }
}

TEST(IsConvex, RejectsBowtieAndDegenerate) {
  EXPECT_TRUE(is_convex(unit_corners()));
  EXPECT_FALSE(is_convex({{{-1, -1}, {1, 1}, {1, -1}, {-1, 1}}}));
  EXPECT_FALSE(is_convex({{{-1, -1}, {0, -1}, {1, -1}, {0, 1}}}));
  EXPECT_FALSE(is_convex({{{-1, -1}, {1, -1}, {-0.5, -0.5}, {-1, 1}}}));
}

TEST(MakeSample, ZeroPerturbationIsIdentity) {
  Rng rng(3);
  const Image img = gen_toy_image(rng, 32);
  GenConfig cfg;
  cfg.max_perturb_frac = 0.0;
  cfg.image_size = 32;
  const auto s = make_sample(img, rng, cfg);
  const auto id = TransformParams::identity(TransformKind::Homography);
  for (std::size_t i = 0; i < 9; ++i) EXPECT_NEAR(s.h_gt[i], id[i], 1e-12);
  for (std::size_t i = 0; i < img.data.size(); ++i) ASSERT_NEAR(s.warped.data[i], img.data[i], 1e-6);
}

TEST(MakeSample, LabelMapsCornersAndDrivesTheWarp) {
  Rng rng(4);
  const Image img = gen_toy_image(rng, 32);
  GenConfig cfg;
  cfg.image_size = 32;
  for (int trial = 0; trial < 50; ++trial) {
    const auto s = make_sample(img, rng, cfg, trial);
    EXPECT_DOUBLE_EQ(s.h_gt[8], 1.0);
    for (int i = 0; i < 4; ++i) {
      const Point2 q = oracle::apply_matrix(s.h_gt.matrix(), s.corners_src[i]);
      ASSERT_NEAR(q.x, s.corners_dst[i].x, 1e-9);
      ASSERT_NEAR(q.y, s.corners_dst[i].y, 1e-9);
    }
    const Image ref = oracle::direct_warp(img, s.h_gt.matrix());
    for (std::size_t i = 0; i < ref.data.size(); ++i) ASSERT_NEAR(s.warped.data[i], ref.data[i], 1e-9);
    EXPECT_GE(coverage_fraction(s.h_gt, 32, 32), 0.25);
  }
}

TEST(MakeSample, DeterministicGivenRngState) {
  const Image img = gen_toy_image(9, 24);
  GenConfig cfg;
  cfg.image_size = 24;
  Rng a(77), b(77);
  const auto s1 = make_sample(img, a, cfg), s2 = make_sample(img, b, cfg);
  EXPECT_EQ(s1.h_gt, s2.h_gt);
  EXPECT_EQ(s1.warped, s2.warped);
}

TEST(GenerateDataset, LabelsConsistentAfterReconstruction) {
  const auto corpus = generate_corpus(4, 24, 1);
  GenConfig cfg;
  cfg.image_size = 24;
  cfg.count = 20;
  cfg.seed = 3;
  const auto data = generate_dataset(corpus, cfg);
  const Grid g = make_grid(20);
  for (const auto& s : data) {
    const auto refit = fit_homography_dlt(s.corners_src, s.corners_dst);
    EXPECT_LT(grid_loss(refit, s.h_gt, g), 1e-12);
  }
  ::setenv("GEOMATCH_THREADS", "3", 1);
  const auto again = generate_dataset(corpus, cfg);
  ::unsetenv("GEOMATCH_THREADS");
  for (std::size_t i = 0; i < data.size(); ++i) EXPECT_EQ(data[i].h_gt, again[i].h_gt);
}

TEST(DatasetIo, RoundTrip) {
  const fs::path dir = scratch("roundtrip");
  const auto corpus = generate_corpus(3, 20, 2);
  GenConfig cfg;
  cfg.image_size = 20;
  cfg.count = 10;
  const auto data = generate_dataset(corpus, cfg);
  write_dataset(dir, data);
  const auto back = read_dataset(dir);
  ASSERT_EQ(back.size(), 10u);
  for (std::size_t i = 0; i < back.size(); ++i) {
    EXPECT_EQ(back[i].id, data[i].id);
    EXPECT_EQ(back[i].h_gt, data[i].h_gt);
    EXPECT_EQ(back[i].corners_dst, data[i].corners_dst);
    EXPECT_EQ(back[i].source, quantize_8bit(data[i].source));
    EXPECT_EQ(back[i].warped, quantize_8bit(data[i].warped));
  }
  fs::remove_all(dir);
}

TEST(DatasetIo, MalformedManifestNamesLine) {
  const fs::path dir = scratch("malformed");
  const auto corpus = generate_corpus(1, 20, 2);
  GenConfig cfg;
  cfg.image_size = 20;
  cfg.count = 2;
  write_dataset(dir, generate_dataset(corpus, cfg));
  std::string text = slurp(dir / "manifest.jsonl");
  const auto second = text.find('\n') + 1;
  const auto h_end = text.find("],\"corners_src\"", second);
  const auto last_comma = text.rfind(',', h_end);
  text.erase(last_comma, h_end - last_comma);
  std::ofstream(dir / "manifest.jsonl", std::ios::binary) << text;
  try {
    (void)read_dataset(dir);
    FAIL() << "expected a data error";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find(":2:"), std::string::npos) << e.what();
    EXPECT_NE(std::string(e.what()).find("got 8"), std::string::npos) << e.what();
  }
  fs::remove_all(dir);
}

TEST(DatasetIo, EmptyDirectoryReadsEmpty) {
  const fs::path dir = scratch("empty");
  EXPECT_TRUE(read_dataset(dir).empty());
  fs::remove_all(dir);
}

TEST(DatasetIo, RegenerationIsByteIdentical) {
  const fs::path a = scratch("regen_a"), b = scratch("regen_b");
  GenConfig cfg;
  cfg.image_size = 24;
  cfg.count = 12;
  cfg.seed = 42;
  write_dataset(a, generate_dataset(generate_corpus(5, 24, 7), cfg));
  write_dataset(b, generate_dataset(generate_corpus(5, 24, 7), cfg));
  EXPECT_EQ(slurp(a / "manifest.jsonl"), slurp(b / "manifest.jsonl"));
  EXPECT_EQ(slurp(a / "images" / "warp_000011.png"), slurp(b / "images" / "warp_000011.png"));
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST(GenConfig, Validation) {
  GenConfig cfg;
  cfg.max_perturb_frac = 0.6;
  EXPECT_THROW(cfg.validate(), UsageError);
  cfg.max_perturb_frac = 0.1;
  cfg.image_size = 8;
  EXPECT_THROW(cfg.validate(), UsageError);
  EXPECT_THROW(generate_dataset(std::vector<Image>{}, GenConfig{}), DataError);
}
