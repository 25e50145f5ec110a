#pragma once

#include <cstdint>
#include <vector>

#include "eqprune/tensor.hpp"

namespace eqprune {

struct AdamHyper {
  double lr = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
};

/// Per-parameter Adam moments.
template <typename T>
struct AdamState {
  std::uint64_t step = 0;
  Tensor<T> m;
  Tensor<T> v;
};

/// One bias-corrected Adam update. Weight decay is folded into the gradient
/// (g += wd * param) before the moment update. Moments are lazily shaped on
/// the first call.
template <typename T>
void adam_step(Tensor<T>& param, const Tensor<T>& grad, AdamState<T>& state,
               const AdamHyper& hyper);

}  // namespace eqprune
