#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "geomatch/gradcheck.hpp"
#include "geomatch/matching.hpp"
#include "oracles.hpp"

using namespace geomatch;

namespace {

// 1x2 feature maps holding the two descriptors under test; the correlation
// entry of f_B cell 0 against f_A cell 0 is their score.
double pair_score(const std::vector<double>& x, const std::vector<double>& y, CorrelationKind kind) {
  const int d = static_cast<int>(x.size());
  FeatureMap fa(1, 2, d), fb(1, 2, d);
  for (int c = 0; c < d; ++c) {
    fa.data[c] = x[c];
    fb.data[c] = y[c];
    // Second cell only needs to be non-degenerate.
    fa.data[d + c] = fb.data[d + c] = c + 1.0;
  }
  return correlate(fa, fb, kind).at(0, 0, 0);
}

}  // namespace

TEST(Cosine, Examples) {
  // One-hot orthonormal descriptors: the score is 1 exactly on the own-cell index.
  FeatureMap f(2, 3, 6);
  for (int r = 0; r < 2; ++r) {
    for (int c = 0; c < 3; ++c) f.data[(r * 3 + c) * 6 + r * 3 + c] = 1.0;
  }
  const auto corr = cosine_correlation(f, f);
  for (int r = 0; r < 2; ++r) {
    for (int c = 0; c < 3; ++c) {
      for (int k = 0; k < 6; ++k) {
        EXPECT_DOUBLE_EQ(corr.at(r, c, k), k == flat_index(r, c, 2) ? 1.0 : 0.0);
      }
    }
  }
  EXPECT_NEAR(pair_score({1, 2, 3}, {3, 6, 9}, CorrelationKind::Cosine), 1.0, 1e-15);
  EXPECT_NEAR(pair_score({1, 0}, {1 / std::sqrt(2.0), 1 / std::sqrt(2.0)}, CorrelationKind::Cosine),
              1 / std::sqrt(2.0), 1e-15);
}

TEST(Cosine, ZeroDescriptorNamesCell) {
  FeatureMap fa(2, 2, 3, 1.0), fb(2, 2, 3, 1.0);
  for (int c = 0; c < 3; ++c) fb.data[(1 * 2 + 0) * 3 + c] = 0.0;
  try {
    (void)cosine_correlation(fa, fb);
    FAIL() << "expected a degenerate descriptor";
  } catch (const DegenerateDescriptorError& e) {
    EXPECT_EQ(e.row(), 1);
    EXPECT_EQ(e.col(), 0);
  }
}

TEST(Pearson, Examples) {
  EXPECT_NEAR(pair_score({1, 2, 3}, {2, 4, 6}, CorrelationKind::Pearson), 1.0, 1e-15);
  EXPECT_NEAR(pair_score({1, 2, 3}, {-1, -2, -3}, CorrelationKind::Pearson), -1.0, 1e-15);
  EXPECT_NEAR(pair_score({1, 2, 3}, {5, 7, 9}, CorrelationKind::Pearson), 1.0, 1e-15);
  EXPECT_NEAR(pair_score({1, 0, 0, 1}, {0, 1, 1, 0}, CorrelationKind::Pearson), -1.0, 1e-15);
}

TEST(Pearson, ConstantDescriptorIsDegenerate) {
  FeatureMap fa(2, 2, 4), fb(2, 2, 4);
  for (std::size_t i = 0; i < fa.data.size(); ++i) fa.data[i] = fb.data[i] = static_cast<double>(i % 5);
  for (int c = 0; c < 4; ++c) fa.data[3 * 4 + c] = 2.5;
  EXPECT_THROW(pearson_correlation(fa, fb), DegenerateDescriptorError);
  EXPECT_THROW(pearson_correlation(FeatureMap(2, 2, 1, 1.0), FeatureMap(2, 2, 1, 1.0)), UsageError);
}

TEST(Pearson, ShiftAndScaleInvariance) {
  Rng rng(41);
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<double> x(8), y(8);
    for (auto& v : x) v = rng.normal();
    for (auto& v : y) v = rng.normal();
    const double a = rng.uniform(0.1, 5.0), b = rng.uniform(-5.0, 5.0);
    std::vector<double> pos(8), neg(8);
    for (int i = 0; i < 8; ++i) pos[i] = a * y[i] + b, neg[i] = -a * y[i] + b;
    const double base = pair_score(x, y, CorrelationKind::Pearson);
    ASSERT_NEAR(pair_score(x, pos, CorrelationKind::Pearson), base, 1e-12);
    ASSERT_NEAR(pair_score(x, neg, CorrelationKind::Pearson), -base, 1e-12);
    ASSERT_NEAR(base, oracle::pearson(x, y), 1e-12);
  }
}

TEST(Pearson, EqualsCosineOfCenteredVectors) {
  Rng rng(43);
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<double> x(6), y(6);
    for (auto& v : x) v = rng.normal() + 3.0;
    for (auto& v : y) v = rng.normal() - 1.0;
    double mx = 0, my = 0;
    for (int i = 0; i < 6; ++i) mx += x[i] / 6, my += y[i] / 6;
    std::vector<double> xc(6), yc(6);
    for (int i = 0; i < 6; ++i) xc[i] = x[i] - mx, yc[i] = y[i] - my;
    ASSERT_NEAR(pair_score(x, y, CorrelationKind::Pearson), oracle::cosine(xc, yc), 1e-12);
  }
}

TEST(Cosine, NotShiftInvariant) {
  const std::vector<double> x{1.0, -0.5, 2.0, 0.25};
  std::vector<double> shifted = x;
  for (auto& v : shifted) v += 1.5;
  EXPECT_NEAR(pair_score(x, x, CorrelationKind::Cosine), 1.0, 1e-15);
  EXPECT_LT(pair_score(x, shifted, CorrelationKind::Cosine), 0.99);
  EXPECT_NEAR(pair_score(x, shifted, CorrelationKind::Pearson), 1.0, 1e-15);
}

TEST(Correlation, SelfDiagonalAndRange) {
  Rng rng(47);
  for (int trial = 0; trial < 1000; ++trial) {
    const auto fa = gradcheck::random_features(rng, 3, 3, 5);
    const auto fb = gradcheck::random_features(rng, 3, 3, 5);
    for (auto kind : {CorrelationKind::Cosine, CorrelationKind::Pearson}) {
      const auto c = correlate(fa, fb, kind);
      ASSERT_EQ(c.data.size(), 81u);
      for (double v : c.data) ASSERT_LE(std::abs(v), 1.0 + 1e-9);
    }
    if (trial < 50) {
      const auto self = pearson_correlation(fa, fa);
      for (int r = 0; r < 3; ++r) {
        for (int col = 0; col < 3; ++col) ASSERT_NEAR(self.at(r, col, flat_index(r, col, 3)), 1.0, 1e-9);
      }
    }
  }
}

TEST(Correlation, GradientsMatchFiniteDifferences) {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    for (const auto& r : gradcheck::check_matching(seed)) {
      EXPECT_LT(r.max_rel_error, 1e-5) << r.name << " seed " << seed;
    }
  }
}

TEST(FeatureMapIo, RoundTripAndValidation) {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "geomatch_featuremap_test";
  fs::create_directories(dir);
  Rng rng(53);
  const auto f = gradcheck::random_features(rng, 3, 4, 5);
  const std::string stem = (dir / "feat").string();
  save_feature_map(stem, f);
  const auto g = load_feature_map(stem);
  ASSERT_TRUE(g.same_shape(f));
  for (std::size_t i = 0; i < f.data.size(); ++i) EXPECT_EQ(g.data[i], static_cast<float>(f.data[i]));
  EXPECT_EQ(fs::file_size(stem + ".bin"), f.data.size() * 4);

  fs::resize_file(stem + ".bin", 8);
  EXPECT_THROW(load_feature_map(stem), DataError);
  EXPECT_THROW(load_feature_map((dir / "missing").string()), DataError);
  fs::remove_all(dir);
}
