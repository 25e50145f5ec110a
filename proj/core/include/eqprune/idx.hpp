#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace eqprune {

inline constexpr std::uint32_t kIdxImageMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelMagic = 0x00000801;

struct IdxImages {
  std::size_t count = 0, rows = 0, cols = 0;
  std::vector<std::uint8_t> pixels;  // [count, rows, cols]

  std::span<const std::uint8_t> image(std::size_t i) const {
    return std::span(pixels).subspan(i * rows * cols, rows * cols);
  }
};

struct IdxLabels {
  std::vector<std::uint8_t> labels;  // each in 0..9
};

/// Big-endian header, payload length must equal the declared extents.
/// Throws FormatError (magic, zero extents, label out of range) or
/// LengthError (short header, payload size mismatch).
IdxImages parse_idx_images(std::span<const std::uint8_t> bytes);
IdxLabels parse_idx_labels(std::span<const std::uint8_t> bytes);

/// Whole file, transparently gunzipped. DataError when unreadable.
std::vector<std::uint8_t> read_maybe_gzip(const std::filesystem::path& path);

IdxImages load_idx_images(const std::filesystem::path& path);
IdxLabels load_idx_labels(const std::filesystem::path& path);

}  // namespace eqprune
