#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "eqprune/idx.hpp"
#include "eqprune/tensor.hpp"

namespace eqprune {

inline constexpr double kMnistMean = 0.1307;
inline constexpr double kMnistStd = 0.3081;

enum class RotationMode { exact90, continuous };

std::string_view rotation_mode_name(RotationMode mode);
RotationMode parse_rotation_mode(std::string_view name);

/// Samples [N,1,H,W] (standardized), labels, and the rotation applied to
/// each sample (quarter turns for exact90, degrees for continuous).
struct Split {
  Tensor<float> images;
  std::vector<std::int32_t> labels;
  std::vector<double> rotations;

  std::size_t size() const { return labels.size(); }
  bool empty() const { return labels.empty(); }
  /// Samples [first, first + count) in order, converted to T.
  template <typename T>
  Tensor<T> batch(std::size_t first, std::size_t count) const;
  /// Samples at `indices`, converted to T.
  template <typename T>
  Tensor<T> gather(std::span<const std::size_t> indices) const;
};

struct SplitSizes {
  std::size_t train = 10000;
  std::size_t val = 2000;
  std::size_t test = 2000;
};

struct RotatedDataset {
  Split train, val, test;
  RotationMode mode = RotationMode::exact90;
  std::uint64_t seed = 0;
};

/// Raw labelled images, e.g. one MNIST file pair.
struct ImagePool {
  IdxImages images;
  IdxLabels labels;
};

ImagePool load_pool(const std::filesystem::path& images, const std::filesystem::path& labels);

/// Train and val are drawn from `fit_pool`, test from `test_pool`, each by a
/// seeded shuffle, so the three splits never share a source image. Every
/// sample gets its own seeded rotation; pixels are scaled to [0,1],
/// rotated, then standardized.
RotatedDataset make_rotated(const ImagePool& fit_pool, const ImagePool& test_pool,
                            RotationMode mode, std::uint64_t seed, SplitSizes sizes);

/// Standardized [1,H,W] sample of one raw image after rotation.
/// exact90 takes quarter turns (same permutation as rot90 on fields),
/// continuous takes degrees (bilinear, zero fill outside the source).
Tensor<float> rotate_image(std::span<const std::uint8_t> pixels, std::size_t rows,
                           std::size_t cols, RotationMode mode, double amount);

/// Locations of the four MNIST files below a data root.
struct MnistPaths {
  std::filesystem::path train_images, train_labels, test_images, test_labels;
};

/// Accepts the standard names with or without a .gz suffix. DataError when
/// any file is missing.
MnistPaths locate_mnist(const std::filesystem::path& root);

/// Data root from EQPRUNE_DATA_ROOT, if set.
std::optional<std::filesystem::path> data_root_from_env();

/// Seed, sizes, mode and CRC32 of each source file.
nlohmann::json dataset_manifest(const RotatedDataset& data, const MnistPaths& paths);

}  // namespace eqprune
