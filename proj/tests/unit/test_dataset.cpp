#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "eqprune/dataset.hpp"
#include "eqprune/equivariant.hpp"
#include "testing.hpp"

namespace eqprune {
namespace {

// Pool whose image i holds two marker pixels that identify i under any rotation.
ImagePool marked_pool(std::size_t n, std::size_t side) {
  ImagePool p;
  p.images.count = n;
  p.images.rows = p.images.cols = side;
  p.images.pixels.assign(n * side * side, 0);
  p.labels.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    p.images.pixels[i * side * side + 1] = static_cast<std::uint8_t>(1 + i % 200);
    p.images.pixels[i * side * side + side + 2] = static_cast<std::uint8_t>(201 + i / 200);
    p.labels.labels[i] = static_cast<std::uint8_t>(i % 10);
  }
  return p;
}

std::size_t identify(const Split& s, std::size_t k) {
  const std::size_t plane = s.images.dim(2) * s.images.dim(3);
  long small = -1, big = -1;
  for (std::size_t j = 0; j < plane; ++j) {
    const double raw = (s.images[k * plane + j] * kMnistStd + kMnistMean) * 255.0;
    const long v = std::lround(raw);
    if (v >= 201) big = v;
    else if (v >= 1) small = v;
  }
  return static_cast<std::size_t>((small - 1) + 200 * (big - 201));
}

TEST(RotationMode, Names) {
  EXPECT_EQ(parse_rotation_mode(rotation_mode_name(RotationMode::continuous)), RotationMode::continuous);
  EXPECT_THROW(parse_rotation_mode("diagonal"), ConfigError);
}

TEST(MakeRotated, SeededAndBitIdentical) {
  const auto fit = testing::synthetic_pool(60, 8, 1), test = testing::synthetic_pool(30, 8, 2);
  const SplitSizes sizes{20, 10, 10};
  const auto a = make_rotated(fit, test, RotationMode::exact90, 5, sizes);
  const auto b = make_rotated(fit, test, RotationMode::exact90, 5, sizes);
  const auto c = make_rotated(fit, test, RotationMode::exact90, 6, sizes);
  EXPECT_EQ(a.train.images, b.train.images);
  EXPECT_EQ(a.test.labels, b.test.labels);
  EXPECT_EQ(a.val.rotations, b.val.rotations);
  EXPECT_NE(a.train.images, c.train.images);
  EXPECT_EQ(a.train.images.shape(), (Shape{20, 1, 8, 8}));
}

TEST(MakeRotated, DisjointSplits) {
  const auto fit = marked_pool(400, 6), test = marked_pool(200, 6);
  const auto d = make_rotated(fit, test, RotationMode::exact90, 3, {150, 100, 50});
  std::set<std::size_t> train, val;
  for (std::size_t k = 0; k < d.train.size(); ++k) train.insert(identify(d.train, k));
  for (std::size_t k = 0; k < d.val.size(); ++k) val.insert(identify(d.val, k));
  EXPECT_EQ(train.size(), 150u);
  EXPECT_EQ(val.size(), 100u);
  for (std::size_t v : val) EXPECT_EQ(train.count(v), 0u);
  for (std::size_t k = 0; k < d.train.size(); ++k)
    EXPECT_EQ(static_cast<std::size_t>(d.train.labels[k]), identify(d.train, k) % 10);
}

TEST(MakeRotated, UsesAllQuarterTurns) {
  const auto fit = testing::synthetic_pool(200, 4, 4), test = testing::synthetic_pool(10, 4, 5);
  const auto d = make_rotated(fit, test, RotationMode::exact90, 1, {150, 40, 10});
  std::set<double> turns(d.train.rotations.begin(), d.train.rotations.end());
  EXPECT_EQ(turns, (std::set<double>{0, 1, 2, 3}));
}

TEST(MakeRotated, Oversubscription) {
  const auto fit = testing::synthetic_pool(10, 4, 6), test = testing::synthetic_pool(5, 4, 7);
  EXPECT_THROW(make_rotated(fit, test, RotationMode::exact90, 1, {8, 3, 2}), DataError);
  EXPECT_THROW(make_rotated(fit, test, RotationMode::exact90, 1, {5, 3, 6}), DataError);
}

TEST(RotateImage, SameQuarterTurnAsFieldRotation) {
  const auto pool = testing::synthetic_pool(1, 6, 8);
  const auto base = rotate_image(pool.images.image(0), 6, 6, RotationMode::exact90, 0);
  for (int r = 0; r < 4; ++r) {
    const auto img = rotate_image(pool.images.image(0), 6, 6, RotationMode::exact90, r);
    EXPECT_EQ(img, rotate_spatial(base, C4Element(r))) << r;
  }
  const auto twice = rotate_spatial(rotate_spatial(base, C4Element(1)), C4Element(1));
  EXPECT_EQ(rotate_image(pool.images.image(0), 6, 6, RotationMode::exact90, 2), twice);
}

TEST(RotateImage, PixelMassConserved) {
  const auto pool = testing::synthetic_pool(1, 8, 9);
  const auto sum = [](const Tensor<float>& t) {
    double s = 0;
    for (std::size_t i = 0; i < t.size(); ++i) s += t[i];
    return s;
  };
  const double s0 = sum(rotate_image(pool.images.image(0), 8, 8, RotationMode::exact90, 0));
  for (int r = 1; r < 4; ++r)
    EXPECT_NEAR(sum(rotate_image(pool.images.image(0), 8, 8, RotationMode::exact90, r)), s0, 1e-3);
}

TEST(RotateImage, Standardized) {
  std::vector<std::uint8_t> px{0, 255, 0, 255};
  const auto img = rotate_image(px, 2, 2, RotationMode::exact90, 0);
  EXPECT_NEAR(img[0], -kMnistMean / kMnistStd, 1e-6);
  EXPECT_NEAR(img[1], (1.0 - kMnistMean) / kMnistStd, 1e-6);
}

TEST(RotateImage, ContinuousAgreesAtQuarterTurns) {
  const auto pool = testing::synthetic_pool(1, 8, 10);
  for (int r = 0; r < 4; ++r) {
    const auto exact = rotate_image(pool.images.image(0), 8, 8, RotationMode::exact90, r);
    const auto bil = rotate_image(pool.images.image(0), 8, 8, RotationMode::continuous, 90.0 * r);
    EXPECT_LE(max_abs_diff(exact, bil), 1e-4f) << r;
  }
}

TEST(RotateImage, ContinuousZeroFillOutside) {
  // A 45 degree turn moves the corners outside the source grid.
  std::vector<std::uint8_t> px(8 * 8, 255);
  const auto img = rotate_image(px, 8, 8, RotationMode::continuous, 45.0);
  EXPECT_NEAR(img.at(0, 0, 0), -kMnistMean / kMnistStd, 1e-6);
  EXPECT_NEAR(img.at(0, 4, 4), (1.0 - kMnistMean) / kMnistStd, 1e-5);
}

TEST(LocateMnist, MissingFiles) {
  EXPECT_THROW(locate_mnist(std::filesystem::temp_directory_path() / "no_such_mnist_dir"), DataError);
}

TEST(MakeRotated, RealMnistDeskSplits) {
  const auto root = testing::mnist_root();
  if (!root) GTEST_SKIP() << "EQPRUNE_DATA_ROOT not set";
  const auto paths = locate_mnist(*root);
  const auto fit = load_pool(paths.train_images, paths.train_labels);
  const auto test = load_pool(paths.test_images, paths.test_labels);
  const auto d = make_rotated(fit, test, RotationMode::exact90, 42, SplitSizes{});
  EXPECT_EQ(d.train.size(), 10000u);
  EXPECT_EQ(d.val.size(), 2000u);
  EXPECT_EQ(d.test.size(), 2000u);
  const auto m = dataset_manifest(d, paths);
  EXPECT_EQ(m.at("sources").size(), 4u);
  EXPECT_EQ(m.at("mode"), "exact90");
}

}  // namespace
}  // namespace eqprune
