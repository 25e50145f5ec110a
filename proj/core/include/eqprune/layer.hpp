#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "eqprune/kernels.hpp"
#include "eqprune/random.hpp"
#include "eqprune/tensor.hpp"

namespace eqprune {

enum class Mode { train, eval };

enum class LayerKind {
  lift_conv,
  group_conv,
  conv2d,
  batch_norm,
  relu,
  group_pool,
  spatial_pool,
  max_pool,
  flatten,
  linear,
  dropout,
  quantized_linear,
};

std::string_view layer_kind_name(LayerKind kind);

/// Element type codes shared with the checkpoint format.
enum class DType : std::uint8_t { f32 = 0, f64 = 1, i8 = 2, i64 = 3 };

/// A named tensor of any stored element type.
struct StateEntry {
  using Storage = std::variant<std::vector<float>, std::vector<double>, std::vector<std::int8_t>,
                               std::vector<std::int64_t>>;
  std::string name;
  Shape shape;
  Storage data;

  DType dtype() const { return static_cast<DType>(data.index()); }
  std::size_t size() const;
  bool operator==(const StateEntry&) const = default;
};

using StateDict = std::vector<StateEntry>;

const StateEntry* find_entry(const StateDict& dict, std::string_view name);

/// Fetches a tensor-typed entry, checking dtype and (when given) shape.
template <typename T>
Tensor<T> entry_tensor(const StateDict& dict, const std::string& name, const Shape* expected = nullptr);

template <typename T>
StateEntry make_entry(std::string name, const Tensor<T>& t) {
  return StateEntry{std::move(name), t.shape(), t.storage()};
}

template <typename T>
struct ParamRef {
  std::string name;
  Tensor<T>* value;
  Tensor<T>* grad;
};

template <typename T>
struct BufferRef {
  std::string name;
  Tensor<T>* value;
};

/// A network stage with manual forward/backward. forward() caches what
/// backward() needs; backward() accumulates parameter gradients and returns
/// the gradient w.r.t. the forward input.
template <typename T>
class Layer {
 public:
  virtual ~Layer() = default;

  virtual LayerKind kind() const = 0;
  virtual Tensor<T> forward(const Tensor<T>& x, Mode mode) = 0;
  virtual Tensor<T> backward(const Tensor<T>& grad_out) = 0;
  virtual std::unique_ptr<Layer<T>> clone() const = 0;
  virtual Shape output_shape(const Shape& input) const = 0;

  /// True for layers that commute with the C4 action on their fields.
  virtual bool is_equivariant() const { return false; }

  virtual std::vector<ParamRef<T>> params() { return {}; }
  virtual std::vector<BufferRef<T>> buffers() { return {}; }

  /// Number of stored weight/bias elements (trainable or frozen).
  virtual std::size_t parameter_count() const;

  /// Serializable tensors, names prefixed with `prefix`.
  virtual void append_state(const std::string& prefix, StateDict& out) const;
  virtual void load_state(const std::string& prefix, const StateDict& dict);

  void zero_grad();

  /// When off, backward() may skip the input gradient and return an empty
  /// tensor (used for the first layer of a network).
  void set_input_grad(bool on) { input_grad_ = on; }

 protected:
  bool input_grad_ = true;

  Layer() = default;
  Layer(const Layer&) = default;
  Layer& operator=(const Layer&) = default;
};

template <typename T>
class Linear final : public Layer<T> {
 public:
  Linear(std::size_t in_features, std::size_t out_features);
  Linear(Tensor<T> weight, Tensor<T> bias);

  LayerKind kind() const override { return LayerKind::linear; }
  Tensor<T> forward(const Tensor<T>& x, Mode mode) override;
  Tensor<T> backward(const Tensor<T>& grad_out) override;
  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<Linear>(*this); }
  Shape output_shape(const Shape& input) const override;
  std::vector<ParamRef<T>> params() override;

  std::size_t in_features() const { return weight_.dim(1); }
  std::size_t out_features() const { return weight_.dim(0); }
  const Tensor<T>& weight() const { return weight_; }
  const Tensor<T>& bias() const { return bias_; }
  Tensor<T>& weight() { return weight_; }
  Tensor<T>& bias() { return bias_; }

 private:
  Tensor<T> weight_, bias_, grad_weight_, grad_bias_;
  Tensor<T> input_;
};

/// Plain 2-D convolution with bias and same-size padding (k/2).
template <typename T>
class Conv2d final : public Layer<T> {
 public:
  Conv2d(std::size_t in_channels, std::size_t out_channels, std::size_t kernel);

  LayerKind kind() const override { return LayerKind::conv2d; }
  Tensor<T> forward(const Tensor<T>& x, Mode mode) override;
  Tensor<T> backward(const Tensor<T>& grad_out) override;
  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<Conv2d>(*this); }
  Shape output_shape(const Shape& input) const override;
  std::vector<ParamRef<T>> params() override;

  Tensor<T>& weight() { return weight_; }
  Tensor<T>& bias() { return bias_; }

 private:
  Tensor<T> weight_, bias_, grad_weight_, grad_bias_;
  ConvIO<T> io_;
};

template <typename T>
class ReLU final : public Layer<T> {
 public:
  LayerKind kind() const override { return LayerKind::relu; }
  bool is_equivariant() const override { return true; }
  Tensor<T> forward(const Tensor<T>& x, Mode mode) override;
  Tensor<T> backward(const Tensor<T>& grad_out) override;
  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<ReLU>(*this); }
  Shape output_shape(const Shape& input) const override { return input; }

 private:
  Tensor<T> input_;
};

/// Inverted dropout: zeroes with probability `rate` and rescales survivors
/// by 1/(1-rate) in train mode; identity in eval mode.
template <typename T>
class Dropout final : public Layer<T> {
 public:
  explicit Dropout(double rate, std::uint64_t seed = 0);

  LayerKind kind() const override { return LayerKind::dropout; }
  Tensor<T> forward(const Tensor<T>& x, Mode mode) override;
  Tensor<T> backward(const Tensor<T>& grad_out) override;
  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<Dropout>(*this); }
  Shape output_shape(const Shape& input) const override { return input; }

  double rate() const { return rate_; }
  void reseed(std::uint64_t seed) { rng_ = Rng(seed); }
  /// Reuse the previous mask on the next train-mode forward (for gradient checks).
  void freeze_mask(bool frozen) { frozen_ = frozen; }

 private:
  double rate_;
  Rng rng_;
  Tensor<T> mask_;
  bool frozen_ = false;
  bool last_train_ = false;
};

template <typename T>
class Flatten final : public Layer<T> {
 public:
  LayerKind kind() const override { return LayerKind::flatten; }
  Tensor<T> forward(const Tensor<T>& x, Mode mode) override;
  Tensor<T> backward(const Tensor<T>& grad_out) override;
  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<Flatten>(*this); }
  Shape output_shape(const Shape& input) const override;

 private:
  Shape input_shape_;
};

/// Per-channel batch normalization. With `regular` the input is a C4-regular
/// field [B,C,4,H,W] and the statistics are pooled over batch, group and
/// spatial axes; otherwise the input is [B,C,H,W].
template <typename T>
class BatchNorm final : public Layer<T> {
 public:
  static constexpr double kEps = 1e-5;
  static constexpr double kMomentum = 0.1;

  BatchNorm(std::size_t channels, bool regular);

  LayerKind kind() const override { return LayerKind::batch_norm; }
  bool is_equivariant() const override { return regular_; }
  Tensor<T> forward(const Tensor<T>& x, Mode mode) override;
  Tensor<T> backward(const Tensor<T>& grad_out) override;
  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<BatchNorm>(*this); }
  Shape output_shape(const Shape& input) const override { return input; }
  std::vector<ParamRef<T>> params() override;
  std::vector<BufferRef<T>> buffers() override;

  bool regular() const { return regular_; }
  std::size_t channels() const { return gamma_.size(); }
  Tensor<T>& gamma() { return gamma_; }
  Tensor<T>& beta() { return beta_; }
  Tensor<T>& running_mean() { return running_mean_; }
  Tensor<T>& running_var() { return running_var_; }

 private:
  bool regular_;
  Tensor<T> gamma_, beta_, grad_gamma_, grad_beta_, running_mean_, running_var_;
  Tensor<T> xhat_;
  std::vector<double> inv_std_;
  bool cached_train_ = false;
};

/// 2x2 max pooling with stride 2 (floor mode) on [B,C,H,W].
template <typename T>
class MaxPool2d final : public Layer<T> {
 public:
  LayerKind kind() const override { return LayerKind::max_pool; }
  Tensor<T> forward(const Tensor<T>& x, Mode mode) override;
  Tensor<T> backward(const Tensor<T>& grad_out) override;
  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<MaxPool2d>(*this); }
  Shape output_shape(const Shape& input) const override;

 private:
  Shape input_shape_;
  std::vector<std::uint32_t> argmax_;
};

}  // namespace eqprune
