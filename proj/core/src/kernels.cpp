#include "eqprune/kernels.hpp"

#if defined(__AVX512F__)
#include <immintrin.h>
#endif

#include <algorithm>
#include <cmath>
#include <cstring>
#include <type_traits>
#include <string>
#include <vector>

namespace eqprune {

namespace {

constexpr int kTileRows = 8;

#if defined(__AVX512F__)
// Register tile of kTileRows rows by NV*16 columns: `a` is a packed panel of
// kTileRows interleaved rows, row p of B starts at b[p] + j. Each C element
// sums its products in k order.
template <int NV>
inline void tile_f32(std::size_t k, const float* a, const float* const* b, std::size_t j,
                     float* c, std::size_t ldc) {
  __m512 acc[kTileRows][NV];
  for (int r = 0; r < kTileRows; ++r) {
    for (int v = 0; v < NV; ++v) acc[r][v] = _mm512_loadu_ps(c + r * ldc + v * 16);
  }
  for (std::size_t p = 0; p < k; ++p) {
    __m512 bv[NV];
    for (int v = 0; v < NV; ++v) bv[v] = _mm512_loadu_ps(b[p] + j + v * 16);
    for (int r = 0; r < kTileRows; ++r) {
      const __m512 s = _mm512_set1_ps(a[p * kTileRows + r]);
      for (int v = 0; v < NV; ++v) acc[r][v] = _mm512_fmadd_ps(s, bv[v], acc[r][v]);
    }
  }
  for (int r = 0; r < kTileRows; ++r) {
    for (int v = 0; v < NV; ++v) _mm512_storeu_ps(c + r * ldc + v * 16, acc[r][v]);
  }
}
#else
typedef float v16f __attribute__((vector_size(64)));

template <int NV>
inline void tile_f32(std::size_t k, const float* a, const float* const* b, std::size_t j,
                     float* c, std::size_t ldc) {
  v16f acc[kTileRows][NV];
  for (int r = 0; r < kTileRows; ++r) {
    for (int v = 0; v < NV; ++v) std::memcpy(&acc[r][v], c + r * ldc + v * 16, sizeof(v16f));
  }
  for (std::size_t p = 0; p < k; ++p) {
    v16f bv[NV];
    for (int v = 0; v < NV; ++v) std::memcpy(&bv[v], b[p] + j + v * 16, sizeof(v16f));
    for (int r = 0; r < kTileRows; ++r) {
      const float s = a[p * kTileRows + r];
      for (int v = 0; v < NV; ++v) acc[r][v] = __builtin_fmaf(s, bv[v], acc[r][v]);
    }
  }
  for (int r = 0; r < kTileRows; ++r) {
    for (int v = 0; v < NV; ++v) std::memcpy(c + r * ldc + v * 16, &acc[r][v], sizeof(v16f));
  }
}
#endif

void gemm_f32(std::size_t m, std::size_t n, std::size_t k, const float* a, std::size_t lda,
              const float* const* b, float* c, std::size_t ldc) {
  const std::size_t blocks = (m + kTileRows - 1) / kTileRows;
  std::vector<float> ap(blocks * kTileRows * k, 0.0f);
  for (std::size_t i = 0; i < m; ++i) {
    float* dst = ap.data() + (i / kTileRows) * kTileRows * k + i % kTileRows;
    const float* src = a + i * lda;
    for (std::size_t p = 0; p < k; ++p) dst[p * kTileRows] = src[p];
  }
  float edge[kTileRows * 32];
  auto panel = [&](std::size_t j, auto nv) {
    constexpr int NV = decltype(nv)::value;
    constexpr std::size_t width = NV * 16;
    for (std::size_t ib = 0; ib < blocks; ++ib) {
      const std::size_t i = ib * kTileRows;
      const float* at = ap.data() + ib * kTileRows * k;
      if (i + kTileRows <= m) {
        tile_f32<NV>(k, at, b, j, c + i * ldc + j, ldc);
        continue;
      }
      const std::size_t rows = m - i;
      std::fill(edge, edge + kTileRows * width, 0.0f);
      for (std::size_t r = 0; r < rows; ++r) {
        std::memcpy(edge + r * width, c + (i + r) * ldc + j, width * sizeof(float));
      }
      tile_f32<NV>(k, at, b, j, edge, width);
      for (std::size_t r = 0; r < rows; ++r) {
        std::memcpy(c + (i + r) * ldc + j, edge + r * width, width * sizeof(float));
      }
    }
  };
  std::size_t j = 0;
  for (; j + 32 <= n; j += 32) panel(j, std::integral_constant<int, 2>{});
  for (; j + 16 <= n; j += 16) panel(j, std::integral_constant<int, 1>{});
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t jj = j; jj < n; ++jj) {
      float sum = c[i * ldc + jj];
      for (std::size_t p = 0; p < k; ++p) sum = std::fma(a[i * lda + p], b[p][jj], sum);
      c[i * ldc + jj] = sum;
    }
  }
}

template <typename T>
void gemm_generic(std::size_t m, std::size_t n, std::size_t k, const T* a, std::size_t lda,
                  const T* const* b, T* c, std::size_t ldc) {
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c + i * ldc;
    for (std::size_t p = 0; p < k; ++p) {
      const T s = a[i * lda + p];
      const T* brow = b[p];
      for (std::size_t j = 0; j < n; ++j) crow[j] += s * brow[j];
    }
  }
}

void check_conv_operands(const Shape& in, const Shape& ker) {
  if (in.size() != 4) throw DimensionError("conv2d input must be rank 4, got " + shape_str(in));
  if (ker.size() != 4) throw DimensionError("conv2d kernel must be rank 4, got " + shape_str(ker));
  if (ker[1] != in[1]) {
    throw DimensionError("conv2d channel mismatch: input " + shape_str(in) + " kernel " +
                         shape_str(ker));
  }
  if (ker[2] != ker[3] || ker[2] % 2 == 0) {
    throw GeometryError("conv2d kernel must be square with odd extent, got " + shape_str(ker));
  }
}

template <typename T>
void im2col(const T* in, std::size_t channels, std::size_t h, std::size_t w, std::size_t k,
            ConvGeometry g, std::size_t ho, std::size_t wo, T* col) {
  const std::size_t plane = ho * wo;
  const auto pad = static_cast<std::ptrdiff_t>(g.padding);
  const auto stride = static_cast<std::ptrdiff_t>(g.stride);
  for (std::size_t c = 0; c < channels; ++c) {
    const T* src = in + c * h * w;
    for (std::size_t u = 0; u < k; ++u) {
      for (std::size_t v = 0; v < k; ++v) {
        T* dst = col + ((c * k + u) * k + v) * plane;
        for (std::size_t y = 0; y < ho; ++y) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(y) * stride +
                                    static_cast<std::ptrdiff_t>(u) - pad;
          T* drow = dst + y * wo;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) {
            std::fill(drow, drow + wo, T{0});
            continue;
          }
          const T* srow = src + static_cast<std::size_t>(iy) * w;
          if (stride == 1) {
            const std::ptrdiff_t shift = static_cast<std::ptrdiff_t>(v) - pad;
            const auto lo = static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(-shift, 0, wo));
            const auto hi = static_cast<std::size_t>(
                std::clamp<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(w) - shift, lo, wo));
            std::fill(drow, drow + lo, T{0});
            std::copy(srow + lo + shift, srow + hi + shift, drow + lo);
            std::fill(drow + hi, drow + wo, T{0});
            continue;
          }
          for (std::size_t x = 0; x < wo; ++x) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(x) * stride +
                                      static_cast<std::ptrdiff_t>(v) - pad;
            drow[x] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w))
                          ? T{0}
                          : srow[static_cast<std::size_t>(ix)];
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_accumulate(const T* col, std::size_t channels, std::size_t h, std::size_t w,
                       std::size_t k, ConvGeometry g, std::size_t ho, std::size_t wo, T* out) {
  const std::size_t plane = ho * wo;
  const auto pad = static_cast<std::ptrdiff_t>(g.padding);
  const auto stride = static_cast<std::ptrdiff_t>(g.stride);
  for (std::size_t c = 0; c < channels; ++c) {
    T* dst = out + c * h * w;
    for (std::size_t u = 0; u < k; ++u) {
      for (std::size_t v = 0; v < k; ++v) {
        const T* src = col + ((c * k + u) * k + v) * plane;
        for (std::size_t y = 0; y < ho; ++y) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(y) * stride +
                                    static_cast<std::ptrdiff_t>(u) - pad;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
          T* drow = dst + static_cast<std::size_t>(iy) * w;
          const T* srow = src + y * wo;
          if (stride == 1) {
            const std::ptrdiff_t shift = static_cast<std::ptrdiff_t>(v) - pad;
            const auto lo = static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(-shift, 0, wo));
            const auto hi = static_cast<std::size_t>(
                std::clamp<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(w) - shift, lo, wo));
            for (std::size_t x = lo; x < hi; ++x) drow[x + shift] += srow[x];
            continue;
          }
          for (std::size_t x = 0; x < wo; ++x) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(x) * stride +
                                      static_cast<std::ptrdiff_t>(v) - pad;
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
            drow[static_cast<std::size_t>(ix)] += srow[x];
          }
        }
      }
    }
  }
}

}  // namespace

template <typename T>
void gemm_gather_b(std::size_t m, std::size_t n, std::size_t k, const T* a, std::size_t lda,
                   const T* const* b_rows, T* c, std::size_t ldc) {
  if constexpr (std::is_same_v<T, float>) {
    gemm_f32(m, n, k, a, lda, b_rows, c, ldc);
  } else {
    gemm_generic(m, n, k, a, lda, b_rows, c, ldc);
  }
}

template <typename T>
void gemm_accumulate(std::size_t m, std::size_t n, std::size_t k, const T* a, std::size_t lda,
                     const T* b, std::size_t ldb, T* c, std::size_t ldc) {
  std::vector<const T*> rows(k);
  for (std::size_t p = 0; p < k; ++p) rows[p] = b + p * ldb;
  gemm_gather_b(m, n, k, a, lda, rows.data(), c, ldc);
}

template <typename T>
void transpose(std::size_t rows, std::size_t cols, const T* src, T* dst) {
  constexpr std::size_t block = 32;
  for (std::size_t i0 = 0; i0 < rows; i0 += block) {
    const std::size_t i1 = std::min(rows, i0 + block);
    for (std::size_t j0 = 0; j0 < cols; j0 += block) {
      const std::size_t j1 = std::min(cols, j0 + block);
      for (std::size_t i = i0; i < i1; ++i) {
        for (std::size_t j = j0; j < j1; ++j) dst[j * rows + i] = src[i * cols + j];
      }
    }
  }
}

std::size_t conv_output_extent(std::size_t in, std::size_t k, ConvGeometry g) {
  if (g.stride == 0) throw GeometryError("stride must be >= 1");
  const std::size_t padded = in + 2 * g.padding;
  if (padded < k) {
    throw GeometryError("kernel " + std::to_string(k) + " larger than padded extent " +
                        std::to_string(padded));
  }
  if ((padded - k) % g.stride != 0) {
    throw GeometryError("extent " + std::to_string(in) + " with padding " +
                        std::to_string(g.padding) + ", kernel " + std::to_string(k) +
                        " and stride " + std::to_string(g.stride) + " is not integral");
  }
  return (padded - k) / g.stride + 1;
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel, ConvGeometry geometry,
                 ConvIO<T>* io) {
  check_conv_operands(input.shape(), kernel.shape());
  const std::size_t batch = input.dim(0), cin = input.dim(1), h = input.dim(2), w = input.dim(3);
  const std::size_t cout = kernel.dim(0), k = kernel.dim(2);
  const std::size_t ho = conv_output_extent(h, k, geometry);
  const std::size_t wo = conv_output_extent(w, k, geometry);
  const std::size_t depth = cin * k * k, plane = ho * wo;

  Tensor<T> out({batch, cout, ho, wo});
  std::vector<T> col(depth * plane);
  for (std::size_t b = 0; b < batch; ++b) {
    im2col(input.data() + b * cin * h * w, cin, h, w, k, geometry, ho, wo, col.data());
    gemm_accumulate<T>(cout, plane, depth, kernel.data(), depth, col.data(), plane,
                       out.data() + b * cout * plane, plane);
  }
  if (io != nullptr) {
    io->input = input;
    io->kernel = kernel;
    io->geometry = geometry;
    io->ready = true;
  }
  return out;
}

template <typename T>
Tensor<T> conv2d_gathered(const Tensor<T>& input, const Tensor<T>& kernel,
                          std::span<const std::vector<std::size_t>> perms, ConvGeometry geometry) {
  check_conv_operands(input.shape(), kernel.shape());
  const std::size_t batch = input.dim(0), cin = input.dim(1), h = input.dim(2), w = input.dim(3);
  const std::size_t cout = kernel.dim(0), k = kernel.dim(2);
  const std::size_t ho = conv_output_extent(h, k, geometry);
  const std::size_t wo = conv_output_extent(w, k, geometry);
  const std::size_t depth = cin * k * k, plane = ho * wo, groups = perms.size();
  for (const auto& perm : perms) {
    if (perm.size() != depth) throw DimensionError("gathered conv permutation has wrong length");
  }

  Tensor<T> out({batch, groups * cout, ho, wo});
  std::vector<T> col(depth * plane);
  std::vector<const T*> rows(depth);
  for (std::size_t b = 0; b < batch; ++b) {
    im2col(input.data() + b * cin * h * w, cin, h, w, k, geometry, ho, wo, col.data());
    for (std::size_t g = 0; g < groups; ++g) {
      for (std::size_t q = 0; q < depth; ++q) rows[q] = col.data() + perms[g][q] * plane;
      gemm_gather_b<T>(cout, plane, depth, kernel.data(), depth, rows.data(),
                       out.data() + (b * groups + g) * cout * plane, plane);
    }
  }
  return out;
}

template <typename T>
ConvGrads<T> conv2d_backward(const Tensor<T>& grad_out, const ConvIO<T>& io, bool need_input) {
  if (!io.ready) throw StateError("conv2d_backward called without a cached forward");
  const Tensor<T>& input = io.input;
  const Tensor<T>& kernel = io.kernel;
  const std::size_t batch = input.dim(0), cin = input.dim(1), h = input.dim(2), w = input.dim(3);
  const std::size_t cout = kernel.dim(0), k = kernel.dim(2);
  const std::size_t ho = conv_output_extent(h, k, io.geometry);
  const std::size_t wo = conv_output_extent(w, k, io.geometry);
  const Shape expected{batch, cout, ho, wo};
  if (grad_out.shape() != expected) {
    throw DimensionError("conv2d_backward grad_out " + shape_str(grad_out.shape()) +
                         " does not match forward output " + shape_str(expected));
  }
  const std::size_t depth = cin * k * k, plane = ho * wo;

  ConvGrads<T> grads{need_input ? Tensor<T>(input.shape()) : Tensor<T>(),
                     Tensor<T>(kernel.shape())};
  std::vector<T> kernel_t(depth * cout);
  transpose(cout, depth, kernel.data(), kernel_t.data());

  // The kernel gradient is accumulated transposed, [depth, cout] += col * gout^T.
  std::vector<T> col(depth * plane), gout_t(plane * cout), grad_col(depth * plane);
  std::vector<T> grad_kernel_t(depth * cout, T{0});
  for (std::size_t b = 0; b < batch; ++b) {
    const T* gout = grad_out.data() + b * cout * plane;
    im2col(input.data() + b * cin * h * w, cin, h, w, k, io.geometry, ho, wo, col.data());
    transpose(cout, plane, gout, gout_t.data());
    gemm_accumulate<T>(depth, cout, plane, col.data(), plane, gout_t.data(), cout,
                       grad_kernel_t.data(), cout);

    if (!need_input) continue;
    std::fill(grad_col.begin(), grad_col.end(), T{0});
    gemm_accumulate<T>(depth, plane, cout, kernel_t.data(), cout, gout, plane, grad_col.data(),
                       plane);
    col2im_accumulate(grad_col.data(), cin, h, w, k, io.geometry, ho, wo,
                      grads.input.data() + b * cin * h * w);
  }
  transpose(depth, cout, grad_kernel_t.data(), grads.kernel.data());
  return grads;
}

template <typename T>
Tensor<T> matmul_linear(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias) {
  if (input.rank() != 2 || weight.rank() != 2 || bias.rank() != 1) {
    throw DimensionError("matmul_linear expects input[B,Cin], weight[Cout,Cin], bias[Cout]");
  }
  const std::size_t batch = input.dim(0), cin = input.dim(1), cout = weight.dim(0);
  if (weight.dim(1) != cin || bias.dim(0) != cout) {
    throw DimensionError("matmul_linear extents disagree: input " + shape_str(input.shape()) +
                         " weight " + shape_str(weight.shape()) + " bias " +
                         shape_str(bias.shape()));
  }
  Tensor<T> out({batch, cout});
  for (std::size_t b = 0; b < batch; ++b) {
    std::copy(bias.data(), bias.data() + cout, out.data() + b * cout);
  }
  std::vector<T> weight_t(cin * cout);
  transpose(cout, cin, weight.data(), weight_t.data());
  gemm_accumulate<T>(batch, cout, cin, input.data(), cin, weight_t.data(), cout, out.data(), cout);
  return out;
}

template <typename T>
LinearGrads<T> matmul_linear_backward(const Tensor<T>& grad_out, const Tensor<T>& input,
                                      const Tensor<T>& weight) {
  const std::size_t batch = input.dim(0), cin = input.dim(1), cout = weight.dim(0);
  if (grad_out.shape() != Shape{batch, cout}) {
    throw DimensionError("matmul_linear_backward grad_out " + shape_str(grad_out.shape()) +
                         " does not match output [" + std::to_string(batch) + ", " +
                         std::to_string(cout) + "]");
  }
  LinearGrads<T> g{Tensor<T>(input.shape()), Tensor<T>(weight.shape()), Tensor<T>({cout})};
  gemm_accumulate<T>(batch, cin, cout, grad_out.data(), cout, weight.data(), cin, g.input.data(),
                     cin);
  std::vector<T> grad_out_t(cout * batch);
  transpose(batch, cout, grad_out.data(), grad_out_t.data());
  gemm_accumulate<T>(cout, cin, batch, grad_out_t.data(), batch, input.data(), cin,
                     g.weight.data(), cin);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t o = 0; o < cout; ++o) g.bias[o] += grad_out[b * cout + o];
  }
  return g;
}

#define EQPRUNE_INSTANTIATE(T)                                                                  \
  template void gemm_accumulate<T>(std::size_t, std::size_t, std::size_t, const T*,           \
                                   std::size_t, const T*, std::size_t, T*, std::size_t);      \
  template void gemm_gather_b<T>(std::size_t, std::size_t, std::size_t, const T*, std::size_t,  \
                                 const T* const*, T*, std::size_t);                          \
  template Tensor<T> conv2d_gathered<T>(const Tensor<T>&, const Tensor<T>&,                   \
                                        std::span<const std::vector<std::size_t>>,            \
                                        ConvGeometry);                                        \
  template void transpose<T>(std::size_t, std::size_t, const T*, T*);                          \
  template Tensor<T> conv2d<T>(const Tensor<T>&, const Tensor<T>&, ConvGeometry, ConvIO<T>*); \
  template ConvGrads<T> conv2d_backward<T>(const Tensor<T>&, const ConvIO<T>&, bool);          \
  template Tensor<T> matmul_linear<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);   \
  template LinearGrads<T> matmul_linear_backward<T>(const Tensor<T>&, const Tensor<T>&,        \
                                                    const Tensor<T>&);

EQPRUNE_INSTANTIATE(float)
EQPRUNE_INSTANTIATE(double)
#undef EQPRUNE_INSTANTIATE

}  // namespace eqprune
