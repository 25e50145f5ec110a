#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "eqprune/tensor.hpp"

namespace eqprune {

/// C[M,N] += A[M,K] * B[K,N], all row-major with the given leading dimensions.
/// Every C element accumulates its K products in ascending k order, so the
/// result does not depend on how the kernel tiles M and N.
template <typename T>
void gemm_accumulate(std::size_t m, std::size_t n, std::size_t k, const T* a, std::size_t lda,
                     const T* b, std::size_t ldb, T* c, std::size_t ldc);

/// As gemm_accumulate, with row p of B read from b_rows[p] (N contiguous values).
template <typename T>
void gemm_gather_b(std::size_t m, std::size_t n, std::size_t k, const T* a, std::size_t lda,
                   const T* const* b_rows, T* c, std::size_t ldc);

/// Out-of-place transpose of a rows x cols row-major block.
template <typename T>
void transpose(std::size_t rows, std::size_t cols, const T* src, T* dst);

struct ConvGeometry {
  std::size_t padding = 0;
  std::size_t stride = 1;
};

/// Inputs retained by a conv2d forward for its backward pass.
template <typename T>
struct ConvIO {
  Tensor<T> input;
  Tensor<T> kernel;
  ConvGeometry geometry;
  bool ready = false;
};

template <typename T>
struct ConvGrads {
  Tensor<T> input;
  Tensor<T> kernel;
};

/// Output spatial extent; throws GeometryError when the stride does not tile.
std::size_t conv_output_extent(std::size_t in, std::size_t k, ConvGeometry g);

/// Cross-correlation of input[B,Cin,H,W] with kernel[Cout,Cin,k,k] (odd k),
/// zero padding. When `io` is non-null the operands are stored for backward.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel, ConvGeometry geometry,
                 ConvIO<T>* io = nullptr);

/// Convolution with G reindexed copies of `kernel` [Cout,Cin,k,k]: output
/// channel g*Cout + o is sum_q kernel[o,q] * patch[perms[g][q]], where q and
/// perms[g][q] index the flattened (channel, u, v) patch. Products are summed
/// in q order, i.e. in the frame of the unpermuted kernel.
template <typename T>
Tensor<T> conv2d_gathered(const Tensor<T>& input, const Tensor<T>& kernel,
                          std::span<const std::vector<std::size_t>> perms, ConvGeometry geometry);

/// Gradients of sum(grad_out * conv2d(input, kernel)) w.r.t. input and kernel.
template <typename T>
ConvGrads<T> conv2d_backward(const Tensor<T>& grad_out, const ConvIO<T>& io,
                             bool need_input = true);

/// out[b,o] = bias[o] + sum_i input[b,i] * weight[o,i]
template <typename T>
Tensor<T> matmul_linear(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias);

template <typename T>
struct LinearGrads {
  Tensor<T> input;
  Tensor<T> weight;
  Tensor<T> bias;
};

template <typename T>
LinearGrads<T> matmul_linear_backward(const Tensor<T>& grad_out, const Tensor<T>& input,
                                      const Tensor<T>& weight);

}  // namespace eqprune
