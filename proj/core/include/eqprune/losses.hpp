#pragma once

#include <cstdint>
#include <span>

#include "eqprune/tensor.hpp"

namespace eqprune {

template <typename T>
struct LossResult {
  T loss = 0;
  Tensor<T> grad;  ///< d loss / d logits
};

/// Mean over the batch of -log softmax(logits)[label]. Max-subtracted.
template <typename T>
LossResult<T> softmax_cross_entropy(const Tensor<T>& logits, std::span<const std::int32_t> labels);

/// T^2 * mean_b KL(softmax(teacher/T) || softmax(student/T)); the gradient is
/// taken w.r.t. the student logits only.
template <typename T>
LossResult<T> kd_kl_divergence(const Tensor<T>& student, const Tensor<T>& teacher,
                               double temperature);

/// Row-wise softmax of logits / temperature.
template <typename T>
Tensor<T> softmax(const Tensor<T>& logits, double temperature = 1.0);

}  // namespace eqprune
