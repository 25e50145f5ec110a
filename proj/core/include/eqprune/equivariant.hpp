#pragma once

#include <cstdint>

#include "eqprune/layer.hpp"

namespace eqprune {

/// Counterclockwise rotation by 90 degrees times `r`.
struct C4Element {
  std::uint8_t r = 0;

  constexpr C4Element() = default;
  constexpr explicit C4Element(int rot) : r(static_cast<std::uint8_t>(((rot % 4) + 4) % 4)) {}

  static constexpr C4Element identity() { return C4Element(0); }
  constexpr C4Element compose(C4Element other) const { return C4Element(r + other.r); }
  constexpr C4Element inverse() const { return C4Element(4 - r); }
  constexpr bool operator==(const C4Element&) const = default;
};

inline constexpr std::size_t kGroupOrder = 4;

enum class FieldKind { trivial, regular };

/// trivial: [B,C,H,W]; regular: [B,C,4,H,W] with one slot per group element.
template <typename T>
struct FeatureField {
  FieldKind kind = FieldKind::trivial;
  Tensor<T> tensor;

  FeatureField() = default;
  FeatureField(FieldKind k, Tensor<T> t);
};

/// Rotates the trailing two (square) axes counterclockwise by 90 deg * r:
/// out[i][j] = in[j][n-1-i] for one quarter turn.
template <typename T>
Tensor<T> rotate_spatial(const Tensor<T>& t, C4Element g);

/// Group action on a field: spatial rotation, plus for regular fields a
/// cyclic shift of the group axis (slot s receives old slot (s - r) mod 4).
template <typename T>
FeatureField<T> rot90_field(const FeatureField<T>& field, C4Element g);

/// Convenience: act on a raw tensor, inferring the kind from its rank.
template <typename T>
Tensor<T> rot90(const Tensor<T>& t, C4Element g);

/// Rotates each k x k kernel slice (the trailing two axes).
template <typename T>
Tensor<T> rotate_kernel(const Tensor<T>& kernel, C4Element g) {
  return rotate_spatial(kernel, g);
}

/// Filter bank [Cout*4, Cin, k, k] whose slice (o*4+r, i) is weight[o,i]
/// rotated by r.
template <typename T>
Tensor<T> expand_lift_kernel(const Tensor<T>& weight);

/// Filter bank [Cout*4, Cin*4, k, k] with slice (o*4+r, i*4+s) equal to
/// weight[o,i,(s-r) mod 4] rotated by r.
template <typename T>
Tensor<T> expand_group_kernel(const Tensor<T>& weight);

template <typename T>
FeatureField<T> lift_conv_forward(const FeatureField<T>& field, const Tensor<T>& weight,
                                  const Tensor<T>& bias);

template <typename T>
FeatureField<T> gconv_forward(const FeatureField<T>& field, const Tensor<T>& weight,
                              const Tensor<T>& bias);

/// Element-wise maximum over the group axis.
template <typename T>
FeatureField<T> group_pool(const FeatureField<T>& field);

/// Batch norm with statistics pooled over batch, group and spatial axes.
template <typename T>
FeatureField<T> eq_batchnorm(const FeatureField<T>& field, BatchNorm<T>& state, Mode mode);

/// Trivial field [B,Cin,H,W] -> regular field [B,Cout,4,H,W].
template <typename T>
class LiftConv final : public Layer<T> {
 public:
  LiftConv(std::size_t in_channels, std::size_t out_channels, std::size_t kernel);

  LayerKind kind() const override { return LayerKind::lift_conv; }
  bool is_equivariant() const override { return true; }
  Tensor<T> forward(const Tensor<T>& x, Mode mode) override;
  Tensor<T> backward(const Tensor<T>& grad_out) override;
  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<LiftConv>(*this); }
  Shape output_shape(const Shape& input) const override;
  std::vector<ParamRef<T>> params() override;

  Tensor<T>& weight() { return weight_; }
  Tensor<T>& bias() { return bias_; }

 private:
  Tensor<T> weight_, bias_, grad_weight_, grad_bias_;
  ConvIO<T> io_;
};

/// Regular field [B,Cin,4,H,W] -> regular field [B,Cout,4,H,W].
template <typename T>
class GroupConv final : public Layer<T> {
 public:
  GroupConv(std::size_t in_channels, std::size_t out_channels, std::size_t kernel);

  LayerKind kind() const override { return LayerKind::group_conv; }
  bool is_equivariant() const override { return true; }
  Tensor<T> forward(const Tensor<T>& x, Mode mode) override;
  Tensor<T> backward(const Tensor<T>& grad_out) override;
  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<GroupConv>(*this); }
  Shape output_shape(const Shape& input) const override;
  std::vector<ParamRef<T>> params() override;

  Tensor<T>& weight() { return weight_; }
  Tensor<T>& bias() { return bias_; }

 private:
  Tensor<T> weight_, bias_, grad_weight_, grad_bias_;
  ConvIO<T> io_;
};

/// Regular field -> trivial field, max over the group axis.
template <typename T>
class GroupPool final : public Layer<T> {
 public:
  LayerKind kind() const override { return LayerKind::group_pool; }
  bool is_equivariant() const override { return true; }
  Tensor<T> forward(const Tensor<T>& x, Mode mode) override;
  Tensor<T> backward(const Tensor<T>& grad_out) override;
  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<GroupPool>(*this); }
  Shape output_shape(const Shape& input) const override;

 private:
  Shape input_shape_;
  std::vector<std::uint8_t> argmax_;
};

/// Rotation-invariant spatial pooling on a trivial field [B,C,H,W], H == W,
/// H divisible by 4. After a 2x2 max pool each sample is turned to a canonical
/// orientation: the quarter turn whose top-left quadrant has the largest sum
/// over all channels (first turn on ties). A second 2x2 max pool gives
/// [B,C,H/4,W/4]. Rotating the input only changes which turn is picked.
template <typename T>
class SpatialPool final : public Layer<T> {
 public:
  LayerKind kind() const override { return LayerKind::spatial_pool; }
  bool is_equivariant() const override { return true; }
  Tensor<T> forward(const Tensor<T>& x, Mode mode) override;
  Tensor<T> backward(const Tensor<T>& grad_out) override;
  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<SpatialPool>(*this); }
  Shape output_shape(const Shape& input) const override;

 private:
  Shape input_shape_;
  std::vector<std::uint32_t> argmax_;
};

}  // namespace eqprune
