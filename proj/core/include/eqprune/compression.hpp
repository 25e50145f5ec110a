#pragma once

#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "eqprune/layer.hpp"
#include "eqprune/losses.hpp"
#include "eqprune/model.hpp"

namespace eqprune {

struct SaliencyVector {
  std::size_t layer = 0;
  std::vector<double> values;  // L2 norm of each output row
};

template <typename T>
SaliencyVector compute_saliency(const Tensor<T>& weight, std::size_t layer = 0);

/// floor(C_out * (1 - p)) indices of largest saliency, ties toward the lower
/// index, returned ascending.
std::vector<std::size_t> select_kept(const SaliencyVector& saliency, double ratio);

/// Keeps rows (and bias) `kept` of `layer` and the matching input columns of
/// `next`. Everything else is copied verbatim.
template <typename T>
std::pair<Linear<T>, Linear<T>> prune_linear_pair(const Linear<T>& layer, const Linear<T>& next,
                                                  std::span<const std::size_t> kept);

struct LayerPruneRecord {
  std::size_t layer = 0;
  std::size_t out_before = 0;
  std::vector<std::size_t> kept;
  std::vector<double> saliency;
};

struct PruneReport {
  double ratio = 0;
  std::vector<LayerPruneRecord> layers;
  std::size_t params_before = 0;
  std::size_t params_after = 0;
  double reduction_pct = 0;
};

double reduction_pct(std::size_t before, std::size_t after);

/// Structured pruning of every linear layer except the final classifier, in
/// network order; convolution and normalization layers are left untouched.
template <typename T>
std::pair<Model<T>, PruneReport> prune_model(const Model<T>& model, double ratio);

/// alpha * CE(student, labels) + (1 - alpha) * KD(student, teacher, T).
template <typename T>
LossResult<T> distill_loss(const Tensor<T>& student, const Tensor<T>& teacher,
                           std::span<const std::int32_t> labels, double temperature = 4.0,
                           double alpha = 0.5);

/// Linear layer with INT8 weights (per-row symmetric scale) and float bias.
/// Activations are quantized per call (per-tensor, asymmetric). Inference only.
template <typename T>
class QuantizedLinear final : public Layer<T> {
 public:
  QuantizedLinear(std::size_t out_features, std::size_t in_features);
  QuantizedLinear(std::vector<std::int8_t> q_weight, std::vector<double> w_scale, Tensor<T> bias);

  LayerKind kind() const override { return LayerKind::quantized_linear; }
  Tensor<T> forward(const Tensor<T>& x, Mode mode) override;
  Tensor<T> backward(const Tensor<T>& grad_out) override;
  std::unique_ptr<Layer<T>> clone() const override {
    return std::make_unique<QuantizedLinear>(*this);
  }
  Shape output_shape(const Shape& input) const override;
  std::size_t parameter_count() const override { return q_weight_.size() + bias_.size(); }
  void append_state(const std::string& prefix, StateDict& out) const override;
  void load_state(const std::string& prefix, const StateDict& dict) override;

  std::size_t in_features() const { return in_; }
  std::size_t out_features() const { return out_; }
  const std::vector<std::int8_t>& q_weight() const { return q_weight_; }
  const std::vector<double>& w_scale() const { return w_scale_; }
  const Tensor<T>& bias() const { return bias_; }
  /// w_scale[o] * q_weight[o, i]
  Tensor<double> dequantized() const;

 private:
  std::size_t out_ = 0, in_ = 0;
  std::vector<std::int8_t> q_weight_;
  std::vector<double> w_scale_;
  Tensor<T> bias_;
};

template <typename T>
QuantizedLinear<T> quantize_linear(const Linear<T>& layer);

template <typename T>
Tensor<T> quantized_linear_forward(const QuantizedLinear<T>& q, const Tensor<T>& input);

struct ActivationQuant {
  double scale = 1.0;
  std::int32_t zero_point = 0;
};

/// Range [min(x, 0), max(x, 0)] mapped onto 0..255.
template <typename T>
ActivationQuant choose_activation_quant(const Tensor<T>& x);

struct QuantLayerRecord {
  std::size_t layer = 0;
  std::size_t rows = 0, cols = 0;
  double max_roundtrip_ratio = 0;  // max |w - dequant(q)| / w_scale, <= 0.5
};

struct QuantReport {
  std::vector<QuantLayerRecord> layers;
  std::size_t float_bytes = 0;          // 4 bytes per parameter before quantization
  std::size_t effective_bytes = 0;      // 1 per INT8 weight, 4 per remaining float value
  std::size_t linear_weight_bytes_f32 = 0;
  std::size_t linear_weight_bytes_i8 = 0;
};

template <typename T>
std::pair<Model<T>, QuantReport> quantize_model(const Model<T>& model);

}  // namespace eqprune
