#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "eqprune/equivariant.hpp"
#include "eqprune/layer.hpp"

namespace eqprune {

enum class Arch { base_cnn, efficient_eq, ultra_efficient_eq };

std::string_view arch_name(Arch arch);
Arch parse_arch(std::string_view name);
bool is_equivariant_arch(Arch arch);

/// Hyperparameters of the equivariant variants.
struct EqArchSpec {
  std::size_t lift_channels = 8;
  std::size_t group_channels = 16;
  std::size_t lift_kernel = 7;
  std::size_t group_kernel = 5;
  std::size_t hidden = 128;
  std::size_t classes = 10;
  double dropout = 0.3;
};

EqArchSpec eq_arch_spec(Arch arch);

/// Sequential network: an ordered list of layers applied to [B,1,H,W].
template <typename T>
class Model {
 public:
  Model(Arch arch, Shape input_shape);
  Model(const Model& other);
  Model& operator=(const Model& other);
  Model(Model&&) noexcept = default;
  Model& operator=(Model&&) noexcept = default;

  Arch arch() const { return arch_; }
  /// Per-sample input shape, e.g. {1, 28, 28}.
  const Shape& input_shape() const { return input_shape_; }

  std::size_t size() const { return layers_.size(); }
  Layer<T>& layer(std::size_t i) { return *layers_.at(i); }
  const Layer<T>& layer(std::size_t i) const { return *layers_.at(i); }
  void add(std::unique_ptr<Layer<T>> layer) { layers_.push_back(std::move(layer)); }
  void replace(std::size_t i, std::unique_ptr<Layer<T>> layer) { layers_.at(i) = std::move(layer); }

  Tensor<T> forward(const Tensor<T>& x, Mode mode);
  /// Returns the input gradient, or an empty tensor unless `need_input`.
  Tensor<T> backward(const Tensor<T>& grad_out, bool need_input = false);
  void zero_grad();

  /// Parameters and buffers named "l<index>.<name>".
  std::vector<ParamRef<T>> params();
  std::vector<BufferRef<T>> buffers();

  StateDict state() const;
  void load_state(const StateDict& dict);

  /// Reseeds every dropout layer from `seed` and its layer index.
  void reseed_dropout(std::uint64_t seed);

  /// Shapes flowing through the network for a batch of one.
  std::vector<Shape> trace_shapes() const;
  /// Width of the first linear layer's input.
  std::size_t flatten_extent() const;

 private:
  Arch arch_;
  Shape input_shape_;
  std::vector<std::unique_ptr<Layer<T>>> layers_;
};

/// Kaiming-uniform weights (bound sqrt(6 / fan_in)), zero biases, BN at
/// identity; fully determined by `seed`.
template <typename T>
Model<T> build_model(Arch arch, std::uint64_t seed, std::size_t extent = 28);

template <typename T>
std::size_t count_params(const Model<T>& model);

/// Closed-form parameter count of an architecture with a given hidden width.
std::size_t analytic_param_count(Arch arch, std::size_t hidden, std::size_t extent = 28);

struct InvarianceReport {
  std::array<double, 4> max_logit_diff{};  // indexed by rotation r
  double tol = 0;
  bool passed = false;
};

/// Eval-mode logits of rotated inputs against unrotated ones, r = 0..3.
template <typename T>
InvarianceReport check_invariance(Model<T>& model, const Tensor<T>& input, double tol);

/// Central-difference check of every parameter and input element of `layer`
/// against its backward, using loss = sum(R * layer(x)) with R ~ N(0,1).
/// Returns the largest ||a - n|| / (||a|| + ||n||) over the input gradient
/// and each parameter gradient.
double grad_check(Layer<double>& layer, const Tensor<double>& input, double eps = 1e-5,
                  Mode mode = Mode::train, std::uint64_t seed = 7);

}  // namespace eqprune
