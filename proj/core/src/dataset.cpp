#include "eqprune/dataset.hpp"

#include <zlib.h>

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <numbers>
#include <numeric>

#include "eqprune/equivariant.hpp"
#include "eqprune/error.hpp"
#include "eqprune/random.hpp"

namespace eqprune {
namespace {

constexpr std::uint64_t kSplitTag = 0xda7a;
constexpr std::uint64_t kTestTag = 0x7e57;
constexpr std::uint64_t kRotationTag = 0x0707;

float standardize(double v) { return static_cast<float>((v - kMnistMean) / kMnistStd); }

double bilinear(const std::vector<double>& src, std::size_t rows, std::size_t cols, double y,
                double x) {
  const double fy = std::floor(y), fx = std::floor(x);
  const double ty = y - fy, tx = x - fx;
  const auto at = [&](double yy, double xx) -> double {
    if (yy < 0 || xx < 0 || yy >= static_cast<double>(rows) || xx >= static_cast<double>(cols)) {
      return 0.0;
    }
    return src[static_cast<std::size_t>(yy) * cols + static_cast<std::size_t>(xx)];
  };
  return (1 - ty) * ((1 - tx) * at(fy, fx) + tx * at(fy, fx + 1)) +
         ty * ((1 - tx) * at(fy + 1, fx) + tx * at(fy + 1, fx + 1));
}

void fill_split(Split& out, const ImagePool& pool, std::span<const std::size_t> picks,
                RotationMode mode, Rng& rot_rng) {
  const std::size_t rows = pool.images.rows, cols = pool.images.cols, plane = rows * cols;
  out.images = Tensor<float>({picks.size(), 1, rows, cols});
  out.labels.resize(picks.size());
  out.rotations.resize(picks.size());
  for (std::size_t n = 0; n < picks.size(); ++n) {
    const std::size_t src = picks[n];
    const double amount = mode == RotationMode::exact90 ? static_cast<double>(rot_rng.below(4))
                                                        : rot_rng.uniform(0.0, 360.0);
    const Tensor<float> img = rotate_image(pool.images.image(src), rows, cols, mode, amount);
    std::copy_n(img.data(), plane, out.images.data() + n * plane);
    out.labels[n] = pool.labels.labels[src];
    out.rotations[n] = amount;
  }
}

std::vector<std::size_t> shuffled_indices(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  Rng rng(seed);
  rng.shuffle(idx.begin(), idx.end());
  return idx;
}

std::string crc_hex(const std::filesystem::path& path) {
  const auto bytes = read_maybe_gzip(path);
  const uLong crc = crc32(crc32(0L, Z_NULL, 0), bytes.data(), static_cast<uInt>(bytes.size()));
  char buf[16];
  std::snprintf(buf, sizeof buf, "%08lx", static_cast<unsigned long>(crc));
  return buf;
}

}  // namespace

std::string_view rotation_mode_name(RotationMode mode) {
  return mode == RotationMode::exact90 ? "exact90" : "continuous";
}

RotationMode parse_rotation_mode(std::string_view name) {
  if (name == "exact90") return RotationMode::exact90;
  if (name == "continuous") return RotationMode::continuous;
  throw ConfigError("unknown rotation mode '" + std::string(name) + "'");
}

template <typename T>
Tensor<T> Split::batch(std::size_t first, std::size_t count) const {
  if (count == 0 || first + count > size()) {
    throw IndexError("batch [" + std::to_string(first) + ", " + std::to_string(first + count) +
                     ") of a split with " + std::to_string(size()) + " samples");
  }
  const std::size_t plane = images.size() / size();
  Tensor<T> out({count, images.dim(1), images.dim(2), images.dim(3)});
  const float* src = images.data() + first * plane;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<T>(src[i]);
  return out;
}

template <typename T>
Tensor<T> Split::gather(std::span<const std::size_t> indices) const {
  if (indices.empty()) throw IndexError("empty gather");
  const std::size_t plane = images.size() / size();
  Tensor<T> out({indices.size(), images.dim(1), images.dim(2), images.dim(3)});
  T* dst = out.data();
  for (std::size_t idx : indices) {
    if (idx >= size()) throw IndexError("sample " + std::to_string(idx) + " out of range");
    const float* src = images.data() + idx * plane;
    for (std::size_t i = 0; i < plane; ++i) *dst++ = static_cast<T>(src[i]);
  }
  return out;
}

template Tensor<float> Split::batch<float>(std::size_t, std::size_t) const;
template Tensor<double> Split::batch<double>(std::size_t, std::size_t) const;
template Tensor<float> Split::gather<float>(std::span<const std::size_t>) const;
template Tensor<double> Split::gather<double>(std::span<const std::size_t>) const;

ImagePool load_pool(const std::filesystem::path& images, const std::filesystem::path& labels) {
  ImagePool pool{load_idx_images(images), load_idx_labels(labels)};
  if (pool.images.count != pool.labels.labels.size()) {
    throw DataError(images.string() + " holds " + std::to_string(pool.images.count) +
                    " images but " + labels.string() + " holds " +
                    std::to_string(pool.labels.labels.size()) + " labels");
  }
  return pool;
}

Tensor<float> rotate_image(std::span<const std::uint8_t> pixels, std::size_t rows,
                           std::size_t cols, RotationMode mode, double amount) {
  if (pixels.size() != rows * cols) throw DimensionError("image size does not match extents");
  Tensor<float> out({1, rows, cols});
  if (mode == RotationMode::exact90) {
    if (rows != cols) throw GeometryError("quarter-turn rotation needs a square image");
    const double turns = std::round(amount);
    if (turns != amount) throw ParameterError("exact90 rotation must be a whole number of turns");
    for (std::size_t i = 0; i < pixels.size(); ++i) out[i] = standardize(pixels[i] / 255.0);
    return rotate_spatial(out, C4Element(static_cast<int>(turns)));
  }
  std::vector<double> src(pixels.size());
  for (std::size_t i = 0; i < src.size(); ++i) src[i] = pixels[i] / 255.0;
  const double theta = amount * std::numbers::pi / 180.0;
  const double c = std::cos(theta), s = std::sin(theta);
  const double cy = (static_cast<double>(rows) - 1) / 2, cx = (static_cast<double>(cols) - 1) / 2;
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < cols; ++j) {
      const double dy = static_cast<double>(i) - cy, dx = static_cast<double>(j) - cx;
      const double sx = cx + c * dx - s * dy;
      const double sy = cy + s * dx + c * dy;
      out[i * cols + j] = standardize(bilinear(src, rows, cols, sy, sx));
    }
  }
  return out;
}

RotatedDataset make_rotated(const ImagePool& fit_pool, const ImagePool& test_pool,
                            RotationMode mode, std::uint64_t seed, SplitSizes sizes) {
  if (sizes.train == 0 || sizes.val == 0 || sizes.test == 0) {
    throw DataError("every split needs at least one sample");
  }
  if (sizes.train + sizes.val > fit_pool.images.count) {
    throw DataError("requested " + std::to_string(sizes.train) + " train + " +
                    std::to_string(sizes.val) + " val samples from a pool of " +
                    std::to_string(fit_pool.images.count));
  }
  if (sizes.test > test_pool.images.count) {
    throw DataError("requested " + std::to_string(sizes.test) + " test samples from a pool of " +
                    std::to_string(test_pool.images.count));
  }
  if (fit_pool.images.rows != test_pool.images.rows ||
      fit_pool.images.cols != test_pool.images.cols) {
    throw DataError("train and test pools have different image extents");
  }
  const auto fit = shuffled_indices(fit_pool.images.count, derive_seed(seed, kSplitTag));
  const auto test = shuffled_indices(test_pool.images.count, derive_seed(seed, kTestTag));
  RotatedDataset out;
  out.mode = mode;
  out.seed = seed;
  Rng rot_rng(derive_seed(seed, kRotationTag));
  const std::span<const std::size_t> f(fit);
  fill_split(out.train, fit_pool, f.first(sizes.train), mode, rot_rng);
  fill_split(out.val, fit_pool, f.subspan(sizes.train, sizes.val), mode, rot_rng);
  fill_split(out.test, test_pool, std::span<const std::size_t>(test).first(sizes.test), mode,
             rot_rng);
  return out;
}

MnistPaths locate_mnist(const std::filesystem::path& root) {
  const auto find = [&](const char* stem) {
    for (const char* suffix : {"", ".gz"}) {
      auto p = root / (std::string(stem) + suffix);
      if (std::filesystem::exists(p)) return p;
    }
    throw DataError(std::string("missing ") + stem + "[.gz] under " + root.string());
  };
  return {find("train-images-idx3-ubyte"), find("train-labels-idx1-ubyte"),
          find("t10k-images-idx3-ubyte"), find("t10k-labels-idx1-ubyte")};
}

std::optional<std::filesystem::path> data_root_from_env() {
  const char* v = std::getenv("EQPRUNE_DATA_ROOT");
  if (!v || !*v) return std::nullopt;
  return std::filesystem::path(v);
}

nlohmann::json dataset_manifest(const RotatedDataset& data, const MnistPaths& paths) {
  nlohmann::json sources;
  for (const auto& p : {paths.train_images, paths.train_labels, paths.test_images,
                        paths.test_labels}) {
    sources.push_back({{"file", p.filename().string()}, {"crc32", crc_hex(p)}});
  }
  return {{"seed", data.seed},
          {"mode", rotation_mode_name(data.mode)},
          {"sizes", {{"train", data.train.size()}, {"val", data.val.size()},
                     {"test", data.test.size()}}},
          {"sources", sources}};
}

}  // namespace eqprune
