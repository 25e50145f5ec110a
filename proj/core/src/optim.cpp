#include "eqprune/optim.hpp"

#include <cmath>

namespace eqprune {

template <typename T>
void adam_step(Tensor<T>& param, const Tensor<T>& grad, AdamState<T>& state,
               const AdamHyper& hyper) {
  if (param.shape() != grad.shape()) {
    throw DimensionError("adam_step param " + shape_str(param.shape()) + " vs grad " +
                         shape_str(grad.shape()));
  }
  if (state.m.empty()) {
    state.m = Tensor<T>(param.shape());
    state.v = Tensor<T>(param.shape());
  } else if (state.m.shape() != param.shape()) {
    throw DimensionError("adam moments " + shape_str(state.m.shape()) + " vs param " +
                         shape_str(param.shape()));
  }
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(hyper.beta1, t);
  const double bc2 = 1.0 - std::pow(hyper.beta2, t);
  const T b1 = static_cast<T>(hyper.beta1), b2 = static_cast<T>(hyper.beta2);
  const T wd = static_cast<T>(hyper.weight_decay);
  const T step_size = static_cast<T>(hyper.lr / bc1);
  const T inv_sqrt_bc2 = static_cast<T>(1.0 / std::sqrt(bc2));
  const T eps = static_cast<T>(hyper.eps);
  for (std::size_t i = 0; i < param.size(); ++i) {
    const T g = grad[i] + wd * param[i];
    state.m[i] = b1 * state.m[i] + (T{1} - b1) * g;
    state.v[i] = b2 * state.v[i] + (T{1} - b2) * g * g;
    const T denom = std::sqrt(state.v[i]) * inv_sqrt_bc2 + eps;
    param[i] -= step_size * state.m[i] / denom;
  }
}

template void adam_step(Tensor<float>&, const Tensor<float>&, AdamState<float>&, const AdamHyper&);
template void adam_step(Tensor<double>&, const Tensor<double>&, AdamState<double>&, const AdamHyper&);

}  // namespace eqprune
