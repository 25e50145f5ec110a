#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "eqprune/model.hpp"

namespace eqprune {

inline constexpr char kCheckpointMagic[4] = {'E', 'Q', 'C', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Layout, little-endian throughout:
///   "EQCP" | u32 version | payload | u32 crc32(payload)
/// payload:
///   u32 len, arch tag | u8 precision (0 f32, 1 f64) | u32 rank, u64 input extents
///   u32 entry count, then per entry:
///   u32 len, name | u8 dtype | u8 rank | u64 extents | raw element data
template <typename T>
std::vector<std::uint8_t> encode_checkpoint(const Model<T>& model);

/// Rebuilds the architecture, then resizes linear layers (or swaps in
/// quantized ones) to match the stored tensors before loading them.
/// FormatError (magic, layout, precision), VersionError, CorruptionError (CRC),
/// LengthError (shorter than header plus trailer).
template <typename T>
Model<T> decode_checkpoint(std::span<const std::uint8_t> bytes);

template <typename T>
void save_checkpoint(const Model<T>& model, const std::filesystem::path& path);

template <typename T>
Model<T> load_checkpoint(const std::filesystem::path& path);

struct CheckpointInfo {
  std::uint32_t version = 0;
  Arch arch = Arch::base_cnn;
  Precision precision = Precision::f32;
  Shape input_shape;
  StateDict entries;
};

/// Validated contents without building a model.
CheckpointInfo read_checkpoint_info(std::span<const std::uint8_t> bytes);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

}  // namespace eqprune
