#include "eqprune/checkpoint.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <variant>

#include "eqprune/compression.hpp"

namespace eqprune {
namespace {

static_assert(std::endian::native == std::endian::little,
              "checkpoint payloads are written as raw little-endian memory");

constexpr std::size_t kHeaderBytes = 8;
constexpr std::size_t kTrailerBytes = 4;

class Writer {
 public:
  template <typename U>
  void put(U v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    buf_.insert(buf_.end(), p, p + sizeof(U));
  }
  void put_string(const std::string& s) {
    put(static_cast<std::uint32_t>(s.size()));
    buf_.insert(buf_.end(), s.begin(), s.end());
  }
  void put_raw(const void* data, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    buf_.insert(buf_.end(), p, p + n);
  }
  std::vector<std::uint8_t>& bytes() { return buf_; }

 private:
  std::vector<std::uint8_t> buf_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> b) : b_(b) {}

  template <typename U>
  U get() {
    U v;
    std::memcpy(&v, take(sizeof(U)), sizeof(U));
    return v;
  }
  std::string get_string() {
    const auto n = get<std::uint32_t>();
    const auto* p = take(n);
    return std::string(reinterpret_cast<const char*>(p), n);
  }
  const std::uint8_t* take(std::size_t n) {
    if (n > b_.size() - pos_) throw FormatError("checkpoint payload ends early");
    const auto* p = b_.data() + pos_;
    pos_ += n;
    return p;
  }
  bool done() const { return pos_ == b_.size(); }

 private:
  std::span<const std::uint8_t> b_;
  std::size_t pos_ = 0;
};

std::uint32_t crc_of(std::span<const std::uint8_t> bytes) {
  return static_cast<std::uint32_t>(
      crc32(crc32(0L, Z_NULL, 0), bytes.data(), static_cast<uInt>(bytes.size())));
}

template <typename U>
StateEntry::Storage read_values(Reader& r, std::size_t n) {
  std::vector<U> v(n);
  if (n) std::memcpy(v.data(), r.take(n * sizeof(U)), n * sizeof(U));
  return v;
}

std::string prefix_of(std::size_t i) { return "l" + std::to_string(i) + "."; }

template <typename T>
void fit_linear_layers(Model<T>& model, const StateDict& entries) {
  for (std::size_t i = 0; i < model.size(); ++i) {
    const LayerKind kind = model.layer(i).kind();
    if (kind != LayerKind::linear && kind != LayerKind::quantized_linear) continue;
    const std::string p = prefix_of(i);
    if (const StateEntry* q = find_entry(entries, p + "q_weight")) {
      if (q->shape.size() != 2) throw FormatError(p + "q_weight must be rank 2");
      model.replace(i, std::make_unique<QuantizedLinear<T>>(q->shape[0], q->shape[1]));
    } else if (const StateEntry* w = find_entry(entries, p + "weight")) {
      if (w->shape.size() != 2) throw FormatError(p + "weight must be rank 2");
      model.replace(i, std::make_unique<Linear<T>>(w->shape[1], w->shape[0]));
    }
  }
}

}  // namespace

template <typename T>
std::vector<std::uint8_t> encode_checkpoint(const Model<T>& model) {
  Writer w;
  w.put_raw(kCheckpointMagic, 4);
  w.put(kCheckpointVersion);
  w.put_string(std::string(arch_name(model.arch())));
  w.put(static_cast<std::uint8_t>(Tensor<T>::precision() == Precision::f32 ? 0 : 1));
  w.put(static_cast<std::uint32_t>(model.input_shape().size()));
  for (std::size_t e : model.input_shape()) w.put(static_cast<std::uint64_t>(e));
  const StateDict state = model.state();
  w.put(static_cast<std::uint32_t>(state.size()));
  for (const StateEntry& e : state) {
    w.put_string(e.name);
    w.put(static_cast<std::uint8_t>(e.dtype()));
    w.put(static_cast<std::uint8_t>(e.shape.size()));
    for (std::size_t d : e.shape) w.put(static_cast<std::uint64_t>(d));
    std::visit([&](const auto& v) { w.put_raw(v.data(), v.size() * sizeof(v[0])); }, e.data);
  }
  auto& bytes = w.bytes();
  const std::uint32_t crc = crc_of(std::span(bytes).subspan(kHeaderBytes));
  w.put(crc);
  return std::move(bytes);
}

CheckpointInfo read_checkpoint_info(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < kHeaderBytes + kTrailerBytes) {
    throw LengthError("checkpoint of " + std::to_string(bytes.size()) + " bytes");
  }
  if (std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) throw FormatError("not an EQCP file");
  CheckpointInfo info;
  std::memcpy(&info.version, bytes.data() + 4, 4);
  if (info.version != kCheckpointVersion) {
    throw VersionError("checkpoint version " + std::to_string(info.version) + ", this build reads " +
                       std::to_string(kCheckpointVersion));
  }
  const auto payload = bytes.subspan(kHeaderBytes, bytes.size() - kHeaderBytes - kTrailerBytes);
  std::uint32_t stored = 0;
  std::memcpy(&stored, bytes.data() + bytes.size() - kTrailerBytes, 4);
  if (crc_of(payload) != stored) throw CorruptionError("checkpoint CRC mismatch");

  Reader r(payload);
  try {
    info.arch = parse_arch(r.get_string());
  } catch (const ConfigError& e) {
    throw FormatError(std::string("unsupported architecture tag: ") + e.what());
  }
  const auto prec = r.get<std::uint8_t>();
  if (prec > 1) throw FormatError("unknown precision code " + std::to_string(prec));
  info.precision = prec == 0 ? Precision::f32 : Precision::f64;
  const auto in_rank = r.get<std::uint32_t>();
  if (in_rank > 8) throw FormatError("input rank " + std::to_string(in_rank));
  for (std::uint32_t i = 0; i < in_rank; ++i) info.input_shape.push_back(r.get<std::uint64_t>());
  const auto count = r.get<std::uint32_t>();
  for (std::uint32_t k = 0; k < count; ++k) {
    StateEntry e;
    e.name = r.get_string();
    const auto code = r.get<std::uint8_t>();
    if (code > static_cast<std::uint8_t>(DType::i64)) {
      throw FormatError("unknown dtype code " + std::to_string(code) + " for " + e.name);
    }
    const auto dtype = static_cast<DType>(code);
    const auto rank = r.get<std::uint8_t>();
    std::size_t n = 1;
    for (std::uint8_t d = 0; d < rank; ++d) {
      const auto extent = r.get<std::uint64_t>();
      if (extent == 0 || extent > payload.size()) throw FormatError("bad extent for " + e.name);
      e.shape.push_back(extent);
      n *= extent;
      if (n > payload.size()) throw FormatError("tensor " + e.name + " exceeds the payload");
    }
    switch (dtype) {
      case DType::f32: e.data = read_values<float>(r, n); break;
      case DType::f64: e.data = read_values<double>(r, n); break;
      case DType::i8: e.data = read_values<std::int8_t>(r, n); break;
      case DType::i64: e.data = read_values<std::int64_t>(r, n); break;
    }
    info.entries.push_back(std::move(e));
  }
  if (!r.done()) throw FormatError("trailing bytes after the last checkpoint entry");
  return info;
}

template <typename T>
Model<T> decode_checkpoint(std::span<const std::uint8_t> bytes) {
  CheckpointInfo info = read_checkpoint_info(bytes);
  if (info.precision != Tensor<T>::precision()) {
    throw FormatError("checkpoint precision does not match the requested model type");
  }
  if (info.input_shape.size() != 3 || info.input_shape[1] != info.input_shape[2]) {
    throw FormatError("checkpoint input shape " + shape_str(info.input_shape));
  }
  Model<T> model = build_model<T>(info.arch, 0, info.input_shape[1]);
  fit_linear_layers(model, info.entries);
  model.load_state(info.entries);
  return model;
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("cannot write " + path.string());
}

template <typename T>
void save_checkpoint(const Model<T>& model, const std::filesystem::path& path) {
  write_file(path, encode_checkpoint(model));
}

template <typename T>
Model<T> load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint<T>(read_file(path));
}

#define EQPRUNE_INSTANTIATE(T)                                                          \
  template std::vector<std::uint8_t> encode_checkpoint(const Model<T>&);                \
  template Model<T> decode_checkpoint<T>(std::span<const std::uint8_t>);                \
  template void save_checkpoint(const Model<T>&, const std::filesystem::path&);         \
  template Model<T> load_checkpoint<T>(const std::filesystem::path&);
EQPRUNE_INSTANTIATE(float)
EQPRUNE_INSTANTIATE(double)
#undef EQPRUNE_INSTANTIATE

}  // namespace eqprune
