#include "eqprune/losses.hpp"

#include <cmath>
#include <string>
#include <vector>

namespace eqprune {

namespace {

// log-softmax of one row of logits scaled by 1/temperature.
template <typename T>
void log_softmax_row(const T* logits, std::size_t k, double temperature, double* out) {
  double mx = static_cast<double>(logits[0]) / temperature;
  for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, static_cast<double>(logits[j]) / temperature);
  double sum = 0.0;
  for (std::size_t j = 0; j < k; ++j) {
    out[j] = static_cast<double>(logits[j]) / temperature - mx;
    sum += std::exp(out[j]);
  }
  const double lse = std::log(sum);
  for (std::size_t j = 0; j < k; ++j) out[j] -= lse;
}

template <typename T>
void require_matrix(const Tensor<T>& t, const char* what) {
  if (t.rank() != 2) {
    throw DimensionError(std::string(what) + " must be rank 2 [B,K], got " + shape_str(t.shape()));
  }
}

}  // namespace

template <typename T>
LossResult<T> softmax_cross_entropy(const Tensor<T>& logits,
                                    std::span<const std::int32_t> labels) {
  require_matrix(logits, "logits");
  const std::size_t batch = logits.dim(0), k = logits.dim(1);
  if (labels.size() != batch) {
    throw DimensionError("labels length " + std::to_string(labels.size()) + " != batch " +
                         std::to_string(batch));
  }
  LossResult<T> r{0, Tensor<T>(logits.shape())};
  std::vector<double> logp(k);
  double total = 0.0;
  for (std::size_t b = 0; b < batch; ++b) {
    const std::int32_t label = labels[b];
    if (label < 0 || static_cast<std::size_t>(label) >= k) {
      throw IndexError("label " + std::to_string(label) + " outside [0," + std::to_string(k) + ")");
    }
    log_softmax_row(logits.data() + b * k, k, 1.0, logp.data());
    total -= logp[static_cast<std::size_t>(label)];
    for (std::size_t j = 0; j < k; ++j) {
      const double onehot = (j == static_cast<std::size_t>(label)) ? 1.0 : 0.0;
      r.grad[b * k + j] = static_cast<T>((std::exp(logp[j]) - onehot) / static_cast<double>(batch));
    }
  }
  r.loss = static_cast<T>(total / static_cast<double>(batch));
  return r;
}

template <typename T>
LossResult<T> kd_kl_divergence(const Tensor<T>& student, const Tensor<T>& teacher,
                               double temperature) {
  if (!(temperature > 0.0)) {
    throw ParameterError("temperature must be positive, got " + std::to_string(temperature));
  }
  require_matrix(student, "student logits");
  if (student.shape() != teacher.shape()) {
    throw DimensionError("student " + shape_str(student.shape()) + " vs teacher " +
                         shape_str(teacher.shape()));
  }
  const std::size_t batch = student.dim(0), k = student.dim(1);
  LossResult<T> r{0, Tensor<T>(student.shape())};
  std::vector<double> logp_s(k), logp_t(k);
  double total = 0.0;
  const double t2 = temperature * temperature;
  for (std::size_t b = 0; b < batch; ++b) {
    log_softmax_row(student.data() + b * k, k, temperature, logp_s.data());
    log_softmax_row(teacher.data() + b * k, k, temperature, logp_t.data());
    double kl = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      const double pt = std::exp(logp_t[j]);
      if (pt > 0.0) kl += pt * (logp_t[j] - logp_s[j]);
      // d/dz_s of T^2 * KL / B = T * (p_s - p_t) / B
      r.grad[b * k + j] =
          static_cast<T>(temperature * (std::exp(logp_s[j]) - pt) / static_cast<double>(batch));
    }
    total += kl;
  }
  r.loss = static_cast<T>(t2 * total / static_cast<double>(batch));
  return r;
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& logits, double temperature) {
  require_matrix(logits, "logits");
  const std::size_t batch = logits.dim(0), k = logits.dim(1);
  Tensor<T> out(logits.shape());
  std::vector<double> logp(k);
  for (std::size_t b = 0; b < batch; ++b) {
    log_softmax_row(logits.data() + b * k, k, temperature, logp.data());
    for (std::size_t j = 0; j < k; ++j) out[b * k + j] = static_cast<T>(std::exp(logp[j]));
  }
  return out;
}

template LossResult<float> softmax_cross_entropy(const Tensor<float>&, std::span<const std::int32_t>);
template LossResult<double> softmax_cross_entropy(const Tensor<double>&, std::span<const std::int32_t>);
template LossResult<float> kd_kl_divergence(const Tensor<float>&, const Tensor<float>&, double);
template LossResult<double> kd_kl_divergence(const Tensor<double>&, const Tensor<double>&, double);
template Tensor<float> softmax(const Tensor<float>&, double);
template Tensor<double> softmax(const Tensor<double>&, double);

}  // namespace eqprune
