#include "eqprune/idx.hpp"

#include <zlib.h>

#include <cstdio>
#include <limits>
#include <string>

#include "eqprune/error.hpp"

namespace eqprune {
namespace {

std::uint32_t read_be32(std::span<const std::uint8_t> b, std::size_t at) {
  return (std::uint32_t{b[at]} << 24) | (std::uint32_t{b[at + 1]} << 16) |
         (std::uint32_t{b[at + 2]} << 8) | std::uint32_t{b[at + 3]};
}

struct IdxHeader {
  std::vector<std::size_t> dims;
  std::size_t payload_offset = 0;
  std::size_t payload_size = 0;
};

IdxHeader parse_header(std::span<const std::uint8_t> bytes, std::uint32_t magic,
                       std::size_t rank, const char* what) {
  if (bytes.size() < 4) throw LengthError(std::string(what) + ": file shorter than magic");
  const std::uint32_t got = read_be32(bytes, 0);
  if (got != magic) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "bad magic 0x%08x (expected 0x%08x)", got, magic);
    throw FormatError(std::string(what) + ": " + buf);
  }
  IdxHeader h;
  h.payload_offset = 4 + 4 * rank;
  if (bytes.size() < h.payload_offset) {
    throw LengthError(std::string(what) + ": truncated header");
  }
  std::size_t total = 1;
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t d = read_be32(bytes, 4 + 4 * i);
    if (d == 0) throw FormatError(std::string(what) + ": zero extent on axis " + std::to_string(i));
    if (total > std::numeric_limits<std::size_t>::max() / d) {
      throw LengthError(std::string(what) + ": declared size overflows");
    }
    total *= d;
    h.dims.push_back(d);
  }
  const std::size_t available = bytes.size() - h.payload_offset;
  if (available != total) {
    throw LengthError(std::string(what) + ": payload has " + std::to_string(available) +
                      " bytes, header declares " + std::to_string(total));
  }
  h.payload_size = total;
  return h;
}

}  // namespace

IdxImages parse_idx_images(std::span<const std::uint8_t> bytes) {
  const IdxHeader h = parse_header(bytes, kIdxImageMagic, 3, "idx images");
  IdxImages out;
  out.count = h.dims[0];
  out.rows = h.dims[1];
  out.cols = h.dims[2];
  const auto payload = bytes.subspan(h.payload_offset);
  out.pixels.assign(payload.begin(), payload.end());
  return out;
}

IdxLabels parse_idx_labels(std::span<const std::uint8_t> bytes) {
  const IdxHeader h = parse_header(bytes, kIdxLabelMagic, 1, "idx labels");
  IdxLabels out;
  const auto payload = bytes.subspan(h.payload_offset);
  out.labels.assign(payload.begin(), payload.end());
  for (std::size_t i = 0; i < out.labels.size(); ++i) {
    if (out.labels[i] > 9) {
      throw FormatError("idx labels: label " + std::to_string(out.labels[i]) + " at index " +
                        std::to_string(i));
    }
  }
  return out;
}

std::vector<std::uint8_t> read_maybe_gzip(const std::filesystem::path& path) {
  gzFile f = gzopen(path.string().c_str(), "rb");
  if (!f) throw DataError("cannot open " + path.string());
  std::vector<std::uint8_t> out;
  std::uint8_t buf[1 << 16];
  for (;;) {
    const int n = gzread(f, buf, sizeof buf);
    if (n < 0) {
      int code = 0;
      const std::string msg = gzerror(f, &code);
      gzclose(f);
      throw DataError("read failed on " + path.string() + ": " + msg);
    }
    if (n == 0) break;
    out.insert(out.end(), buf, buf + n);
  }
  gzclose(f);
  return out;
}

IdxImages load_idx_images(const std::filesystem::path& path) {
  return parse_idx_images(read_maybe_gzip(path));
}

IdxLabels load_idx_labels(const std::filesystem::path& path) {
  return parse_idx_labels(read_maybe_gzip(path));
}

}  // namespace eqprune
