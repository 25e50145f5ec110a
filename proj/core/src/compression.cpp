#include "eqprune/compression.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "eqprune/error.hpp"

namespace eqprune {

template <typename T>
SaliencyVector compute_saliency(const Tensor<T>& weight, std::size_t layer) {
  if (weight.rank() != 2) {
    throw DimensionError("saliency needs a rank-2 weight, got " + shape_str(weight.shape()));
  }
  const std::size_t rows = weight.dim(0), cols = weight.dim(1);
  SaliencyVector s{layer, std::vector<double>(rows)};
  for (std::size_t o = 0; o < rows; ++o) {
    double sq = 0.0;
    for (std::size_t i = 0; i < cols; ++i) {
      const double w = weight[o * cols + i];
      sq += w * w;
    }
    s.values[o] = std::sqrt(sq);
  }
  return s;
}

std::vector<std::size_t> select_kept(const SaliencyVector& saliency, double ratio) {
  if (!(ratio >= 0.0 && ratio < 1.0)) {
    throw ParameterError("pruning ratio must be in [0,1), got " + std::to_string(ratio));
  }
  const std::size_t n = saliency.values.size();
  // The small offset keeps products like 10 * 0.7 from flooring to 6.
  const auto n_keep =
      static_cast<std::size_t>(std::floor(static_cast<double>(n) * (1.0 - ratio) + 1e-9));
  if (n_keep == 0) {
    throw DegeneratePruningError("ratio " + std::to_string(ratio) + " keeps no neuron of " +
                                 std::to_string(n));
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return saliency.values[a] > saliency.values[b];
  });
  order.resize(n_keep);
  std::sort(order.begin(), order.end());
  return order;
}

template <typename T>
std::pair<Linear<T>, Linear<T>> prune_linear_pair(const Linear<T>& layer, const Linear<T>& next,
                                                  std::span<const std::size_t> kept) {
  const std::size_t out = layer.out_features(), in = layer.in_features();
  if (next.in_features() != out) {
    throw GraphConsistencyError("next layer expects " + std::to_string(next.in_features()) +
                                " inputs but layer produces " + std::to_string(out));
  }
  for (std::size_t i = 0; i < kept.size(); ++i) {
    if (kept[i] >= out || (i > 0 && kept[i] <= kept[i - 1])) {
      throw GraphConsistencyError("kept indices must be strictly increasing and below " +
                                  std::to_string(out));
    }
  }
  const std::size_t n = kept.size();
  Tensor<T> w({n, in}), b({n});
  for (std::size_t r = 0; r < n; ++r) {
    std::copy_n(layer.weight().data() + kept[r] * in, in, w.data() + r * in);
    b[r] = layer.bias()[kept[r]];
  }
  const std::size_t next_out = next.out_features();
  Tensor<T> nw({next_out, n});
  for (std::size_t o = 0; o < next_out; ++o) {
    for (std::size_t c = 0; c < n; ++c) nw[o * n + c] = next.weight()[o * out + kept[c]];
  }
  return {Linear<T>(std::move(w), std::move(b)), Linear<T>(std::move(nw), next.bias())};
}

double reduction_pct(std::size_t before, std::size_t after) {
  if (before == 0) throw ParameterError("reduction of an empty model");
  return 100.0 * (1.0 - static_cast<double>(after) / static_cast<double>(before));
}

template <typename T>
std::pair<Model<T>, PruneReport> prune_model(const Model<T>& model, double ratio) {
  Model<T> out = model;
  PruneReport report;
  report.ratio = ratio;
  report.params_before = count_params(model);

  std::vector<std::size_t> linear;
  for (std::size_t i = 0; i < out.size(); ++i) {
    const LayerKind k = out.layer(i).kind();
    if (k == LayerKind::linear) {
      linear.push_back(i);
    } else if (k == LayerKind::quantized_linear) {
      throw KindError("cannot prune a quantized model");
    }
  }
  // The last linear layer is the classifier and keeps all of its outputs.
  for (std::size_t j = 0; j + 1 < linear.size(); ++j) {
    const std::size_t li = linear[j], ni = linear[j + 1];
    for (std::size_t between = li + 1; between < ni; ++between) {
      const LayerKind k = out.layer(between).kind();
      if (k != LayerKind::relu && k != LayerKind::dropout) {
        throw GraphConsistencyError("layer " + std::to_string(between) + " (" +
                                    std::string(layer_kind_name(k)) +
                                    ") between linear layers is not elementwise");
      }
    }
    auto& cur = dynamic_cast<Linear<T>&>(out.layer(li));
    auto& next = dynamic_cast<Linear<T>&>(out.layer(ni));
    LayerPruneRecord rec;
    rec.layer = li;
    rec.out_before = cur.out_features();
    SaliencyVector s = compute_saliency(cur.weight(), li);
    rec.kept = select_kept(s, ratio);
    rec.saliency = std::move(s.values);
    auto [a, b] = prune_linear_pair(cur, next, rec.kept);
    out.replace(li, std::make_unique<Linear<T>>(std::move(a)));
    out.replace(ni, std::make_unique<Linear<T>>(std::move(b)));
    report.layers.push_back(std::move(rec));
  }
  report.params_after = count_params(out);
  report.reduction_pct = reduction_pct(report.params_before, report.params_after);
  return {std::move(out), std::move(report)};
}

template <typename T>
LossResult<T> distill_loss(const Tensor<T>& student, const Tensor<T>& teacher,
                           std::span<const std::int32_t> labels, double temperature, double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) {
    throw ParameterError("alpha must be in [0,1], got " + std::to_string(alpha));
  }
  const LossResult<T> ce = softmax_cross_entropy(student, labels);
  const LossResult<T> kd = kd_kl_divergence(student, teacher, temperature);
  LossResult<T> r{static_cast<T>(alpha * ce.loss + (1.0 - alpha) * kd.loss),
                  Tensor<T>(student.shape())};
  for (std::size_t i = 0; i < r.grad.size(); ++i) {
    r.grad[i] = static_cast<T>(alpha * ce.grad[i] + (1.0 - alpha) * kd.grad[i]);
  }
  return r;
}

// ---------------------------------------------------------------------------
// Quantization

template <typename T>
QuantizedLinear<T>::QuantizedLinear(std::size_t out_features, std::size_t in_features)
    : out_(out_features),
      in_(in_features),
      q_weight_(out_features * in_features, 0),
      w_scale_(out_features, 1.0),
      bias_({out_features}) {}

template <typename T>
QuantizedLinear<T>::QuantizedLinear(std::vector<std::int8_t> q_weight, std::vector<double> w_scale,
                                    Tensor<T> bias)
    : out_(w_scale.size()),
      in_(w_scale.empty() ? 0 : q_weight.size() / w_scale.size()),
      q_weight_(std::move(q_weight)),
      w_scale_(std::move(w_scale)),
      bias_(std::move(bias)) {
  if (out_ == 0 || in_ * out_ != q_weight_.size() || bias_.rank() != 1 || bias_.dim(0) != out_) {
    throw DimensionError("inconsistent quantized linear payload");
  }
  for (double s : w_scale_) {
    if (!(s > 0.0)) throw ParameterError("weight scales must be positive");
  }
}

template <typename T>
Tensor<T> QuantizedLinear<T>::forward(const Tensor<T>& x, Mode) {
  return quantized_linear_forward(*this, x);
}

template <typename T>
Tensor<T> QuantizedLinear<T>::backward(const Tensor<T>&) {
  throw StateError("quantized linear layers are inference-only");
}

template <typename T>
Shape QuantizedLinear<T>::output_shape(const Shape& input) const {
  if (input.size() != 2 || input[1] != in_) {
    throw DimensionError("quantized linear expects [B," + std::to_string(in_) + "], got " +
                         shape_str(input));
  }
  return {input[0], out_};
}

template <typename T>
void QuantizedLinear<T>::append_state(const std::string& prefix, StateDict& out) const {
  out.push_back(StateEntry{prefix + "q_weight", {out_, in_}, q_weight_});
  out.push_back(StateEntry{prefix + "w_scale", {out_}, w_scale_});
  out.push_back(make_entry(prefix + "bias", bias_));
}

template <typename T>
void QuantizedLinear<T>::load_state(const std::string& prefix, const StateDict& dict) {
  const StateEntry* q = find_entry(dict, prefix + "q_weight");
  const StateEntry* s = find_entry(dict, prefix + "w_scale");
  if (q == nullptr || s == nullptr) throw FormatError("missing quantized tensors at " + prefix);
  const auto* qv = std::get_if<std::vector<std::int8_t>>(&q->data);
  const auto* sv = std::get_if<std::vector<double>>(&s->data);
  if (qv == nullptr || sv == nullptr) throw FormatError("quantized tensors at " + prefix + " have wrong dtype");
  const Shape bias_shape{q->shape.at(0)};
  *this = QuantizedLinear(*qv, *sv, entry_tensor<T>(dict, prefix + "bias", &bias_shape));
}

template <typename T>
Tensor<double> QuantizedLinear<T>::dequantized() const {
  Tensor<double> w({out_, in_});
  for (std::size_t o = 0; o < out_; ++o) {
    for (std::size_t i = 0; i < in_; ++i) w[o * in_ + i] = w_scale_[o] * q_weight_[o * in_ + i];
  }
  return w;
}

template <typename T>
QuantizedLinear<T> quantize_linear(const Linear<T>& layer) {
  const std::size_t out = layer.out_features(), in = layer.in_features();
  std::vector<std::int8_t> q(out * in);
  std::vector<double> scale(out);
  for (std::size_t o = 0; o < out; ++o) {
    const T* row = layer.weight().data() + o * in;
    double maxabs = 0.0;
    for (std::size_t i = 0; i < in; ++i) maxabs = std::max(maxabs, std::abs(static_cast<double>(row[i])));
    if (maxabs == 0.0) {
      scale[o] = 1.0;
      continue;
    }
    scale[o] = maxabs / 127.0;
    for (std::size_t i = 0; i < in; ++i) {
      // nearbyint rounds half to even under the default rounding mode.
      const double v = std::nearbyint(static_cast<double>(row[i]) * 127.0 / maxabs);
      q[o * in + i] = static_cast<std::int8_t>(std::clamp(v, -127.0, 127.0));
    }
  }
  return QuantizedLinear<T>(std::move(q), std::move(scale), layer.bias());
}

template <typename T>
ActivationQuant choose_activation_quant(const Tensor<T>& x) {
  double lo = 0.0, hi = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    lo = std::min(lo, static_cast<double>(x[i]));
    hi = std::max(hi, static_cast<double>(x[i]));
  }
  if (hi == lo) return {};
  ActivationQuant q;
  q.scale = (hi - lo) / 255.0;
  q.zero_point = static_cast<std::int32_t>(std::nearbyint(-lo / q.scale));
  return q;
}

template <typename T>
Tensor<T> quantized_linear_forward(const QuantizedLinear<T>& q, const Tensor<T>& input) {
  const Shape os = q.output_shape(input.shape());
  const std::size_t batch = input.dim(0), in = q.in_features(), out = q.out_features();
  const ActivationQuant aq = choose_activation_quant(input);

  std::vector<std::int32_t> qa(input.size());
  for (std::size_t i = 0; i < input.size(); ++i) {
    const double v = std::nearbyint(static_cast<double>(input[i]) / aq.scale) + aq.zero_point;
    qa[i] = static_cast<std::int32_t>(std::clamp(v, 0.0, 255.0));
  }
  const auto& qw = q.q_weight();
  std::vector<std::int64_t> row_sum(out, 0);
  for (std::size_t o = 0; o < out; ++o) {
    for (std::size_t i = 0; i < in; ++i) row_sum[o] += qw[o * in + i];
  }

  Tensor<T> y(os);
  for (std::size_t b = 0; b < batch; ++b) {
    const std::int32_t* xa = qa.data() + b * in;
    for (std::size_t o = 0; o < out; ++o) {
      const std::int8_t* wr = qw.data() + o * in;
      std::int32_t acc = 0;
      for (std::size_t i = 0; i < in; ++i) acc += static_cast<std::int32_t>(wr[i]) * xa[i];
      const std::int64_t centered = static_cast<std::int64_t>(acc) - aq.zero_point * row_sum[o];
      y[b * out + o] = static_cast<T>(q.w_scale()[o] * aq.scale * static_cast<double>(centered) +
                                      static_cast<double>(q.bias()[o]));
    }
  }
  return y;
}

template <typename T>
std::pair<Model<T>, QuantReport> quantize_model(const Model<T>& model) {
  Model<T> out = model;
  QuantReport report;
  report.float_bytes = 4 * count_params(model);
  for (std::size_t i = 0; i < out.size(); ++i) {
    Layer<T>& l = out.layer(i);
    if (l.kind() == LayerKind::linear) {
      const auto& lin = dynamic_cast<const Linear<T>&>(l);
      QuantizedLinear<T> q = quantize_linear(lin);
      QuantLayerRecord rec{i, lin.out_features(), lin.in_features(), 0.0};
      const Tensor<double> deq = q.dequantized();
      for (std::size_t o = 0; o < rec.rows; ++o) {
        for (std::size_t c = 0; c < rec.cols; ++c) {
          const double err = std::abs(static_cast<double>(lin.weight()[o * rec.cols + c]) -
                                      deq[o * rec.cols + c]);
          rec.max_roundtrip_ratio = std::max(rec.max_roundtrip_ratio, err / q.w_scale()[o]);
        }
      }
      report.linear_weight_bytes_f32 += 4 * lin.weight().size();
      report.linear_weight_bytes_i8 += lin.weight().size();
      report.layers.push_back(rec);
      out.replace(i, std::make_unique<QuantizedLinear<T>>(std::move(q)));
    }
    const Layer<T>& now = out.layer(i);
    if (now.kind() == LayerKind::quantized_linear) {
      const auto& q = dynamic_cast<const QuantizedLinear<T>&>(now);
      report.effective_bytes += q.q_weight().size() + 4 * (q.bias().size() + q.w_scale().size());
    } else {
      report.effective_bytes += 4 * now.parameter_count();
    }
  }
  return {std::move(out), std::move(report)};
}

#define EQPRUNE_INSTANTIATE(T)                                                               \
  template SaliencyVector compute_saliency(const Tensor<T>&, std::size_t);                   \
  template std::pair<Linear<T>, Linear<T>> prune_linear_pair(const Linear<T>&,               \
                                                             const Linear<T>&,               \
                                                             std::span<const std::size_t>);  \
  template std::pair<Model<T>, PruneReport> prune_model(const Model<T>&, double);            \
  template LossResult<T> distill_loss(const Tensor<T>&, const Tensor<T>&,                    \
                                      std::span<const std::int32_t>, double, double);        \
  template class QuantizedLinear<T>;                                                         \
  template QuantizedLinear<T> quantize_linear(const Linear<T>&);                             \
  template Tensor<T> quantized_linear_forward(const QuantizedLinear<T>&, const Tensor<T>&);  \
  template ActivationQuant choose_activation_quant(const Tensor<T>&);                        \
  template std::pair<Model<T>, QuantReport> quantize_model(const Model<T>&);

EQPRUNE_INSTANTIATE(float)
EQPRUNE_INSTANTIATE(double)
#undef EQPRUNE_INSTANTIATE

}  // namespace eqprune
