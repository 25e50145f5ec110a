#include <cmath>
#include <limits>

#include "eqprune/layer.hpp"

namespace eqprune {

std::string_view layer_kind_name(LayerKind kind) {
  switch (kind) {
    case LayerKind::lift_conv: return "lift_conv";
    case LayerKind::group_conv: return "group_conv";
    case LayerKind::conv2d: return "conv2d";
    case LayerKind::batch_norm: return "batch_norm";
    case LayerKind::relu: return "relu";
    case LayerKind::group_pool: return "group_pool";
    case LayerKind::spatial_pool: return "spatial_pool";
    case LayerKind::max_pool: return "max_pool";
    case LayerKind::flatten: return "flatten";
    case LayerKind::linear: return "linear";
    case LayerKind::dropout: return "dropout";
    case LayerKind::quantized_linear: return "quantized_linear";
  }
  return "unknown";
}

std::size_t StateEntry::size() const {
  return std::visit([](const auto& v) { return v.size(); }, data);
}

const StateEntry* find_entry(const StateDict& dict, std::string_view name) {
  for (const auto& e : dict) {
    if (e.name == name) return &e;
  }
  return nullptr;
}

template <typename T>
Tensor<T> entry_tensor(const StateDict& dict, const std::string& name, const Shape* expected) {
  const StateEntry* e = find_entry(dict, name);
  if (e == nullptr) throw FormatError("missing tensor '" + name + "'");
  const auto* values = std::get_if<std::vector<T>>(&e->data);
  if (values == nullptr) throw FormatError("tensor '" + name + "' has unexpected dtype");
  if (expected != nullptr && e->shape != *expected) {
    throw FormatError("tensor '" + name + "' has shape " + shape_str(e->shape) + ", expected " +
                      shape_str(*expected));
  }
  return Tensor<T>(e->shape, *values);
}

template Tensor<float> entry_tensor(const StateDict&, const std::string&, const Shape*);
template Tensor<double> entry_tensor(const StateDict&, const std::string&, const Shape*);

namespace {

// Four interleaved partial sums combined in a fixed order.
template <typename F>
double lane_sum(std::size_t n, F&& term) {
  double s[4] = {0.0, 0.0, 0.0, 0.0};
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    s[0] += term(i);
    s[1] += term(i + 1);
    s[2] += term(i + 2);
    s[3] += term(i + 3);
  }
  for (; i < n; ++i) s[0] += term(i);
  return (s[0] + s[1]) + (s[2] + s[3]);
}

}  // namespace

// ---------------------------------------------------------------------------
// Layer

template <typename T>
std::size_t Layer<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : const_cast<Layer*>(this)->params()) n += p.value->size();
  return n;
}

template <typename T>
void Layer<T>::append_state(const std::string& prefix, StateDict& out) const {
  auto* self = const_cast<Layer*>(this);
  for (const auto& p : self->params()) out.push_back(make_entry(prefix + p.name, *p.value));
  for (const auto& b : self->buffers()) out.push_back(make_entry(prefix + b.name, *b.value));
}

template <typename T>
void Layer<T>::load_state(const std::string& prefix, const StateDict& dict) {
  for (const auto& p : params()) {
    *p.value = entry_tensor<T>(dict, prefix + p.name, &p.value->shape());
  }
  for (const auto& b : buffers()) {
    *b.value = entry_tensor<T>(dict, prefix + b.name, &b.value->shape());
  }
}

template <typename T>
void Layer<T>::zero_grad() {
  for (const auto& p : params()) p.grad->fill(T{0});
}

// ---------------------------------------------------------------------------
// Linear

template <typename T>
Linear<T>::Linear(std::size_t in_features, std::size_t out_features)
    : Linear(Tensor<T>({out_features, in_features}), Tensor<T>({out_features})) {}

template <typename T>
Linear<T>::Linear(Tensor<T> weight, Tensor<T> bias)
    : weight_(std::move(weight)), bias_(std::move(bias)) {
  if (weight_.rank() != 2 || bias_.rank() != 1 || bias_.dim(0) != weight_.dim(0)) {
    throw DimensionError("linear weight " + shape_str(weight_.shape()) + " and bias " +
                         shape_str(bias_.shape()) + " disagree");
  }
  grad_weight_ = Tensor<T>(weight_.shape());
  grad_bias_ = Tensor<T>(bias_.shape());
}

template <typename T>
Tensor<T> Linear<T>::forward(const Tensor<T>& x, Mode) {
  input_ = x;
  return matmul_linear(x, weight_, bias_);
}

template <typename T>
Tensor<T> Linear<T>::backward(const Tensor<T>& grad_out) {
  if (input_.empty()) throw StateError("linear backward before forward");
  auto g = matmul_linear_backward(grad_out, input_, weight_);
  for (std::size_t i = 0; i < g.weight.size(); ++i) grad_weight_[i] += g.weight[i];
  for (std::size_t i = 0; i < g.bias.size(); ++i) grad_bias_[i] += g.bias[i];
  return std::move(g.input);
}

template <typename T>
Shape Linear<T>::output_shape(const Shape& input) const {
  if (input.size() != 2 || input[1] != in_features()) {
    throw DimensionError("linear expects [B," + std::to_string(in_features()) + "], got " +
                         shape_str(input));
  }
  return {input[0], out_features()};
}

template <typename T>
std::vector<ParamRef<T>> Linear<T>::params() {
  return {{"weight", &weight_, &grad_weight_}, {"bias", &bias_, &grad_bias_}};
}

// ---------------------------------------------------------------------------
// Conv2d

template <typename T>
Conv2d<T>::Conv2d(std::size_t in_channels, std::size_t out_channels, std::size_t kernel)
    : weight_({out_channels, in_channels, kernel, kernel}),
      bias_({out_channels}),
      grad_weight_({out_channels, in_channels, kernel, kernel}),
      grad_bias_({out_channels}) {
  if (kernel % 2 == 0) throw GeometryError("conv kernel extent must be odd");
}

template <typename T>
Tensor<T> Conv2d<T>::forward(const Tensor<T>& x, Mode) {
  const ConvGeometry g{weight_.dim(2) / 2, 1};
  Tensor<T> out = conv2d(x, weight_, g, &io_);
  const std::size_t batch = out.dim(0), channels = out.dim(1), plane = out.dim(2) * out.dim(3);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t c = 0; c < channels; ++c) {
      T* p = out.data() + (b * channels + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) p[i] += bias_[c];
    }
  }
  return out;
}

template <typename T>
Tensor<T> Conv2d<T>::backward(const Tensor<T>& grad_out) {
  auto g = conv2d_backward(grad_out, io_, this->input_grad_);
  for (std::size_t i = 0; i < g.kernel.size(); ++i) grad_weight_[i] += g.kernel[i];
  const std::size_t batch = grad_out.dim(0), channels = grad_out.dim(1);
  const std::size_t plane = grad_out.dim(2) * grad_out.dim(3);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t c = 0; c < channels; ++c) {
      const T* p = grad_out.data() + (b * channels + c) * plane;
      T sum = 0;
      for (std::size_t i = 0; i < plane; ++i) sum += p[i];
      grad_bias_[c] += sum;
    }
  }
  return std::move(g.input);
}

template <typename T>
Shape Conv2d<T>::output_shape(const Shape& input) const {
  if (input.size() != 4 || input[1] != weight_.dim(1)) {
    throw DimensionError("conv2d layer got input " + shape_str(input));
  }
  return {input[0], weight_.dim(0), input[2], input[3]};
}

template <typename T>
std::vector<ParamRef<T>> Conv2d<T>::params() {
  return {{"weight", &weight_, &grad_weight_}, {"bias", &bias_, &grad_bias_}};
}

// ---------------------------------------------------------------------------
// ReLU

template <typename T>
Tensor<T> ReLU<T>::forward(const Tensor<T>& x, Mode) {
  input_ = x;
  Tensor<T> out = x;
  for (auto& v : out.storage()) v = v > T{0} ? v : T{0};
  return out;
}

template <typename T>
Tensor<T> ReLU<T>::backward(const Tensor<T>& grad_out) {
  if (input_.empty()) throw StateError("relu backward before forward");
  if (grad_out.shape() != input_.shape()) throw DimensionError("relu grad shape mismatch");
  Tensor<T> g = grad_out;
  T* gp = g.data();
  const T* xp = input_.data();
  for (std::size_t i = 0; i < g.size(); ++i) gp[i] = xp[i] > T{0} ? gp[i] : T{0};
  return g;
}

// ---------------------------------------------------------------------------
// Dropout

template <typename T>
Dropout<T>::Dropout(double rate, std::uint64_t seed) : rate_(rate), rng_(seed) {
  if (!(rate >= 0.0 && rate < 1.0)) {
    throw ParameterError("dropout rate must be in [0,1), got " + std::to_string(rate));
  }
}

template <typename T>
Tensor<T> Dropout<T>::forward(const Tensor<T>& x, Mode mode) {
  last_train_ = (mode == Mode::train);
  if (!last_train_ || rate_ == 0.0) {
    last_train_ = false;
    return x;
  }
  if (!frozen_ || mask_.shape() != x.shape()) {
    mask_ = Tensor<T>(x.shape());
    const T scale = static_cast<T>(1.0 / (1.0 - rate_));
    for (auto& m : mask_.storage()) m = rng_.uniform() < rate_ ? T{0} : scale;
  }
  Tensor<T> out = x;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= mask_[i];
  return out;
}

template <typename T>
Tensor<T> Dropout<T>::backward(const Tensor<T>& grad_out) {
  if (!last_train_) return grad_out;
  if (grad_out.shape() != mask_.shape()) throw DimensionError("dropout grad shape mismatch");
  Tensor<T> g = grad_out;
  for (std::size_t i = 0; i < g.size(); ++i) g[i] *= mask_[i];
  return g;
}

// ---------------------------------------------------------------------------
// Flatten

template <typename T>
Tensor<T> Flatten<T>::forward(const Tensor<T>& x, Mode) {
  input_shape_ = x.shape();
  return x.reshaped(output_shape(x.shape()));
}

template <typename T>
Tensor<T> Flatten<T>::backward(const Tensor<T>& grad_out) {
  if (input_shape_.empty()) throw StateError("flatten backward before forward");
  return grad_out.reshaped(input_shape_);
}

template <typename T>
Shape Flatten<T>::output_shape(const Shape& input) const {
  if (input.size() < 2) throw DimensionError("flatten needs a batch axis, got " + shape_str(input));
  std::size_t n = 1;
  for (std::size_t i = 1; i < input.size(); ++i) n *= input[i];
  return {input[0], n};
}

// ---------------------------------------------------------------------------
// BatchNorm

template <typename T>
BatchNorm<T>::BatchNorm(std::size_t channels, bool regular)
    : regular_(regular),
      gamma_({channels}, T{1}),
      beta_({channels}),
      grad_gamma_({channels}),
      grad_beta_({channels}),
      running_mean_({channels}),
      running_var_({channels}, T{1}) {}

template <typename T>
Tensor<T> BatchNorm<T>::forward(const Tensor<T>& x, Mode mode) {
  const std::size_t expected_rank = regular_ ? 5 : 4;
  if (x.rank() != expected_rank || x.dim(1) != channels() || (regular_ && x.dim(2) != 4)) {
    throw DimensionError(std::string(regular_ ? "regular" : "plain") + " batch norm over " +
                         std::to_string(channels()) + " channels got " + shape_str(x.shape()));
  }
  const std::size_t batch = x.dim(0), c_count = channels();
  const std::size_t inner = x.size() / (batch * c_count);
  const std::size_t n = batch * inner;

  Tensor<T> out(x.shape());
  xhat_ = Tensor<T>(x.shape());
  inv_std_.assign(c_count, 0.0);
  cached_train_ = (mode == Mode::train);

  for (std::size_t c = 0; c < c_count; ++c) {
    double mean, var;
    if (cached_train_) {
      double sum = 0.0;
      for (std::size_t b = 0; b < batch; ++b) {
        const T* p = x.data() + (b * c_count + c) * inner;
        sum += lane_sum(inner, [p](std::size_t i) { return static_cast<double>(p[i]); });
      }
      mean = sum / static_cast<double>(n);
      double sq = 0.0;
      for (std::size_t b = 0; b < batch; ++b) {
        const T* p = x.data() + (b * c_count + c) * inner;
        sq += lane_sum(inner, [p, mean](std::size_t i) {
          const double d = p[i] - mean;
          return d * d;
        });
      }
      var = sq / static_cast<double>(n);
      const double unbiased = n > 1 ? sq / static_cast<double>(n - 1) : var;
      running_mean_[c] = static_cast<T>((1.0 - kMomentum) * running_mean_[c] + kMomentum * mean);
      running_var_[c] = static_cast<T>((1.0 - kMomentum) * running_var_[c] + kMomentum * unbiased);
    } else {
      mean = running_mean_[c];
      var = running_var_[c];
    }
    const double inv = 1.0 / std::sqrt(var + kEps);
    inv_std_[c] = inv;
    const T tm = static_cast<T>(mean), ti = static_cast<T>(inv);
    const T g = gamma_[c], bt = beta_[c];
    for (std::size_t b = 0; b < batch; ++b) {
      const std::size_t off = (b * c_count + c) * inner;
      const T* xp = x.data() + off;
      T* hp = xhat_.data() + off;
      T* op = out.data() + off;
      for (std::size_t i = 0; i < inner; ++i) {
        const T xh = (xp[i] - tm) * ti;
        hp[i] = xh;
        op[i] = g * xh + bt;
      }
    }
  }
  return out;
}

template <typename T>
Tensor<T> BatchNorm<T>::backward(const Tensor<T>& grad_out) {
  if (xhat_.empty()) throw StateError("batch norm backward before forward");
  if (grad_out.shape() != xhat_.shape()) throw DimensionError("batch norm grad shape mismatch");
  const std::size_t batch = grad_out.dim(0), c_count = channels();
  const std::size_t inner = grad_out.size() / (batch * c_count);
  const double n = static_cast<double>(batch * inner);
  Tensor<T> gin(grad_out.shape());
  for (std::size_t c = 0; c < c_count; ++c) {
    double sum_dy = 0.0, sum_dy_xhat = 0.0;
    for (std::size_t b = 0; b < batch; ++b) {
      const T* gp = grad_out.data() + (b * c_count + c) * inner;
      const T* hp = xhat_.data() + (b * c_count + c) * inner;
      sum_dy += lane_sum(inner, [gp](std::size_t i) { return static_cast<double>(gp[i]); });
      sum_dy_xhat += lane_sum(
          inner, [gp, hp](std::size_t i) { return static_cast<double>(gp[i]) * hp[i]; });
    }
    grad_beta_[c] += static_cast<T>(sum_dy);
    grad_gamma_[c] += static_cast<T>(sum_dy_xhat);
    const double scale = static_cast<double>(gamma_[c]) * inv_std_[c];
    const double mean_dy = cached_train_ ? sum_dy / n : 0.0;
    const double mean_dy_xhat = cached_train_ ? sum_dy_xhat / n : 0.0;
    for (std::size_t b = 0; b < batch; ++b) {
      const std::size_t off = (b * c_count + c) * inner;
      const T* gp = grad_out.data() + off;
      const T* hp = xhat_.data() + off;
      T* op = gin.data() + off;
      for (std::size_t i = 0; i < inner; ++i) {
        op[i] = static_cast<T>(scale * (gp[i] - mean_dy - hp[i] * mean_dy_xhat));
      }
    }
  }
  return gin;
}

template <typename T>
std::vector<ParamRef<T>> BatchNorm<T>::params() {
  return {{"gamma", &gamma_, &grad_gamma_}, {"beta", &beta_, &grad_beta_}};
}

template <typename T>
std::vector<BufferRef<T>> BatchNorm<T>::buffers() {
  return {{"running_mean", &running_mean_}, {"running_var", &running_var_}};
}

// ---------------------------------------------------------------------------
// MaxPool2d

template <typename T>
Shape MaxPool2d<T>::output_shape(const Shape& input) const {
  if (input.size() != 4 || input[2] < 2 || input[3] < 2) {
    throw DimensionError("max pool expects [B,C,H,W] with H,W >= 2, got " + shape_str(input));
  }
  return {input[0], input[1], input[2] / 2, input[3] / 2};
}

template <typename T>
Tensor<T> MaxPool2d<T>::forward(const Tensor<T>& x, Mode) {
  const Shape os = output_shape(x.shape());
  input_shape_ = x.shape();
  const std::size_t planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t ho = os[2], wo = os[3];
  Tensor<T> out(os);
  argmax_.assign(out.size(), 0);
  for (std::size_t pl = 0; pl < planes; ++pl) {
    const T* src = x.data() + pl * h * w;
    for (std::size_t y = 0; y < ho; ++y) {
      for (std::size_t xo = 0; xo < wo; ++xo) {
        std::uint32_t best = static_cast<std::uint32_t>((2 * y) * w + 2 * xo);
        for (std::size_t dy = 0; dy < 2; ++dy) {
          for (std::size_t dx = 0; dx < 2; ++dx) {
            const auto idx = static_cast<std::uint32_t>((2 * y + dy) * w + 2 * xo + dx);
            if (src[idx] > src[best]) best = idx;
          }
        }
        const std::size_t o = pl * ho * wo + y * wo + xo;
        out[o] = src[best];
        argmax_[o] = best;
      }
    }
  }
  return out;
}

template <typename T>
Tensor<T> MaxPool2d<T>::backward(const Tensor<T>& grad_out) {
  if (input_shape_.empty()) throw StateError("max pool backward before forward");
  Tensor<T> gin(input_shape_);
  const std::size_t plane_in = input_shape_[2] * input_shape_[3];
  const std::size_t plane_out = grad_out.dim(2) * grad_out.dim(3);
  const std::size_t planes = input_shape_[0] * input_shape_[1];
  for (std::size_t pl = 0; pl < planes; ++pl) {
    for (std::size_t i = 0; i < plane_out; ++i) {
      const std::size_t o = pl * plane_out + i;
      gin[pl * plane_in + argmax_[o]] += grad_out[o];
    }
  }
  return gin;
}

#define EQPRUNE_INSTANTIATE(T)   \
  template class Layer<T>;       \
  template class Linear<T>;      \
  template class Conv2d<T>;      \
  template class ReLU<T>;        \
  template class Dropout<T>;     \
  template class Flatten<T>;     \
  template class BatchNorm<T>;   \
  template class MaxPool2d<T>;

EQPRUNE_INSTANTIATE(float)
EQPRUNE_INSTANTIATE(double)
#undef EQPRUNE_INSTANTIATE

}  // namespace eqprune
