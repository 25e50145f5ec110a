#include "eqprune/equivariant.hpp"

#include <algorithm>
#include <string>
#include <vector>

namespace eqprune {

namespace {

// dst (n x n) = src rotated counterclockwise by r quarter turns.
template <typename T, bool Accumulate>
void rotate_plane(const T* src, T* dst, std::size_t n, unsigned r) {
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      std::size_t si, sj;
      switch (r) {
        case 1: si = j; sj = n - 1 - i; break;
        case 2: si = n - 1 - i; sj = n - 1 - j; break;
        case 3: si = n - 1 - j; sj = i; break;
        default: si = i; sj = j; break;
      }
      if constexpr (Accumulate) {
        dst[i * n + j] += src[si * n + sj];
      } else {
        dst[i * n + j] = src[si * n + sj];
      }
    }
  }
}

void require_square(const Shape& s, const char* what) {
  if (s.size() < 2 || s[s.size() - 1] != s[s.size() - 2]) {
    throw GeometryError(std::string(what) + " needs square trailing axes, got " + shape_str(s));
  }
}

void require_regular(const Shape& s, const char* what) {
  if (s.size() != 5 || s[2] != kGroupOrder) {
    throw DimensionError(std::string(what) + " expects a regular field [B,C,4,H,W], got " +
                         shape_str(s));
  }
}

// perm[q] is where kernel offset q (row-major k x k) lands after rotating
// the kernel by r quarter turns.
std::vector<std::size_t> spatial_perm(std::size_t k, unsigned r) {
  std::vector<std::size_t> idx(k * k), rotated(k * k), perm(k * k);
  for (std::size_t q = 0; q < idx.size(); ++q) idx[q] = q;
  rotate_plane<std::size_t, false>(idx.data(), rotated.data(), k, r);
  for (std::size_t d = 0; d < rotated.size(); ++d) perm[rotated[d]] = d;
  return perm;
}

// Reduction-index permutations of the rotated filter copies, one per r, over
// the flattened (channel, u, v) patch. For regular inputs the channel is
// (i, group slot) and slot t of the base filter moves to (t + r) mod 4.
std::vector<std::vector<std::size_t>> rotation_perms(std::size_t channels, std::size_t k,
                                                     bool regular) {
  const std::size_t kk = k * k, slots = regular ? kGroupOrder : 1;
  std::vector<std::vector<std::size_t>> perms(kGroupOrder,
                                              std::vector<std::size_t>(channels * slots * kk));
  for (unsigned r = 0; r < kGroupOrder; ++r) {
    const auto sp = spatial_perm(k, r);
    for (std::size_t i = 0; i < channels; ++i) {
      for (std::size_t t = 0; t < slots; ++t) {
        const std::size_t s = regular ? (t + r) % kGroupOrder : 0;
        for (std::size_t q = 0; q < kk; ++q) {
          perms[r][(i * slots + t) * kk + q] = (i * slots + s) * kk + sp[q];
        }
      }
    }
  }
  return perms;
}

// bank[r*Cout + o, perms[r][q]] = weight[o, q]
template <typename T>
Tensor<T> bank_from_perms(const Tensor<T>& flat, const std::vector<std::vector<std::size_t>>& perms) {
  const std::size_t cout = flat.dim(0), depth = flat.size() / cout;
  Tensor<T> bank({kGroupOrder * cout, flat.dim(1), flat.dim(2), flat.dim(3)});
  for (unsigned r = 0; r < kGroupOrder; ++r) {
    for (std::size_t o = 0; o < cout; ++o) {
      T* row = bank.data() + (r * cout + o) * depth;
      for (std::size_t q = 0; q < depth; ++q) row[perms[r][q]] = flat[o * depth + q];
    }
  }
  return bank;
}

// Adjoint of bank_from_perms, accumulated into grad.
template <typename T>
void fold_bank_grad(const Tensor<T>& gbank, const std::vector<std::vector<std::size_t>>& perms,
                    Tensor<T>& grad) {
  const std::size_t cout = gbank.dim(0) / kGroupOrder, depth = gbank.size() / gbank.dim(0);
  for (unsigned r = 0; r < kGroupOrder; ++r) {
    for (std::size_t o = 0; o < cout; ++o) {
      const T* row = gbank.data() + (r * cout + o) * depth;
      for (std::size_t q = 0; q < depth; ++q) grad[o * depth + q] += row[perms[r][q]];
    }
  }
}

// y[b, r*Cout + o] -> out[b, o, r] + bias[o]
template <typename T>
Tensor<T> to_regular(const Tensor<T>& y, const Tensor<T>& bias) {
  const std::size_t batch = y.dim(0), cout = y.dim(1) / kGroupOrder;
  const std::size_t hw = y.dim(2) * y.dim(3);
  Tensor<T> out({batch, cout, kGroupOrder, y.dim(2), y.dim(3)});
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t o = 0; o < cout; ++o) {
      for (unsigned r = 0; r < kGroupOrder; ++r) {
        const T* src = y.data() + (b * kGroupOrder * cout + r * cout + o) * hw;
        T* dst = out.data() + ((b * cout + o) * kGroupOrder + r) * hw;
        for (std::size_t i = 0; i < hw; ++i) dst[i] = src[i] + bias[o];
      }
    }
  }
  return out;
}

// Inverse layout change of to_regular (without bias).
template <typename T>
Tensor<T> from_regular(const Tensor<T>& g) {
  const std::size_t batch = g.dim(0), cout = g.dim(1), hw = g.dim(3) * g.dim(4);
  Tensor<T> y({batch, kGroupOrder * cout, g.dim(3), g.dim(4)});
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t o = 0; o < cout; ++o) {
      for (unsigned r = 0; r < kGroupOrder; ++r) {
        std::copy_n(g.data() + ((b * cout + o) * kGroupOrder + r) * hw, hw,
                    y.data() + (b * kGroupOrder * cout + r * cout + o) * hw);
      }
    }
  }
  return y;
}

template <typename T>
void accumulate_bias_grad(const Tensor<T>& grad_out, Tensor<T>& grad_bias) {
  const std::size_t batch = grad_out.dim(0), channels = grad_out.dim(1);
  const std::size_t inner = grad_out.size() / (batch * channels);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t c = 0; c < channels; ++c) {
      const T* p = grad_out.data() + (b * channels + c) * inner;
      T sum = 0;
      for (std::size_t i = 0; i < inner; ++i) sum += p[i];
      grad_bias[c] += sum;
    }
  }
}

// Validated operands of a lifting or group convolution, with the input and
// weight flattened to plain-convolution layouts.
template <typename T>
struct EqConvOperands {
  Tensor<T> input;   // [B, Cin (x4 if regular), H, W]
  Tensor<T> weight;  // [Cout, Cin (x4 if regular), k, k]
};

template <typename T>
EqConvOperands<T> lift_operands(const Tensor<T>& x, const Tensor<T>& weight,
                                const Tensor<T>& bias) {
  if (x.rank() != 4) {
    throw DimensionError("lifting convolution expects a trivial field [B,C,H,W], got " +
                         shape_str(x.shape()));
  }
  require_square(x.shape(), "lifting convolution");
  if (weight.rank() != 4 || weight.dim(1) != x.dim(1)) {
    throw DimensionError("lift weight " + shape_str(weight.shape()) + " vs input " +
                         shape_str(x.shape()));
  }
  if (bias.rank() != 1 || bias.dim(0) != weight.dim(0)) {
    throw DimensionError("lift bias " + shape_str(bias.shape()) + " vs weight " +
                         shape_str(weight.shape()));
  }
  return {x, weight};
}

template <typename T>
EqConvOperands<T> gconv_operands(const Tensor<T>& x, const Tensor<T>& weight,
                                 const Tensor<T>& bias) {
  require_regular(x.shape(), "group convolution");
  require_square(x.shape(), "group convolution");
  if (weight.rank() != 5 || weight.dim(2) != kGroupOrder || weight.dim(1) != x.dim(1)) {
    throw DimensionError("group conv weight " + shape_str(weight.shape()) + " vs input " +
                         shape_str(x.shape()));
  }
  if (bias.rank() != 1 || bias.dim(0) != weight.dim(0)) {
    throw DimensionError("group conv bias " + shape_str(bias.shape()) + " vs weight " +
                         shape_str(weight.shape()));
  }
  const std::size_t k = weight.dim(3);
  return {x.reshaped({x.dim(0), x.dim(1) * kGroupOrder, x.dim(3), x.dim(4)}),
          weight.reshaped({weight.dim(0), weight.dim(1) * kGroupOrder, k, k})};
}

// Slot r is the correlation with the filter rotated by r. Each product is
// accumulated in the base filter's own (q) order, so a rotated input replays
// exactly the same arithmetic and equivariance holds bit for bit.
template <typename T>
Tensor<T> eq_conv(const EqConvOperands<T>& ops, const Tensor<T>& bias, bool regular) {
  const std::size_t k = ops.weight.dim(2);
  const std::size_t base_channels = regular ? ops.weight.dim(1) / kGroupOrder : ops.weight.dim(1);
  const auto perms = rotation_perms(base_channels, k, regular);
  const Tensor<T> y = conv2d_gathered<T>(ops.input, ops.weight, perms, ConvGeometry{k / 2, 1});
  return to_regular(y, bias);
}

template <typename T>
Tensor<T> group_pool_impl(const Tensor<T>& x, std::vector<std::uint8_t>* argmax) {
  require_regular(x.shape(), "group pooling");
  const std::size_t planes = x.dim(0) * x.dim(1), hw = x.dim(3) * x.dim(4);
  Tensor<T> out({x.dim(0), x.dim(1), x.dim(3), x.dim(4)});
  if (argmax != nullptr) argmax->assign(out.size(), 0);
  for (std::size_t pl = 0; pl < planes; ++pl) {
    const T* src = x.data() + pl * kGroupOrder * hw;
    for (std::size_t i = 0; i < hw; ++i) {
      std::uint8_t best = 0;
      for (std::uint8_t s = 1; s < kGroupOrder; ++s) {
        if (src[s * hw + i] > src[best * hw + i]) best = s;
      }
      out[pl * hw + i] = src[best * hw + i];
      if (argmax != nullptr) (*argmax)[pl * hw + i] = best;
    }
  }
  return out;
}

}  // namespace

template <typename T>
FeatureField<T>::FeatureField(FieldKind k, Tensor<T> t) : kind(k), tensor(std::move(t)) {
  if (kind == FieldKind::regular) {
    require_regular(tensor.shape(), "regular field");
  } else if (tensor.rank() != 4) {
    throw DimensionError("trivial field must be [B,C,H,W], got " + shape_str(tensor.shape()));
  }
}

template <typename T>
Tensor<T> rotate_spatial(const Tensor<T>& t, C4Element g) {
  require_square(t.shape(), "rotation");
  const std::size_t n = t.dim(t.rank() - 1);
  const std::size_t planes = t.size() / (n * n);
  Tensor<T> out(t.shape());
  for (std::size_t p = 0; p < planes; ++p) {
    rotate_plane<T, false>(t.data() + p * n * n, out.data() + p * n * n, n, g.r);
  }
  return out;
}

template <typename T>
FeatureField<T> rot90_field(const FeatureField<T>& field, C4Element g) {
  if (field.kind == FieldKind::trivial) {
    return FeatureField<T>(FieldKind::trivial, rotate_spatial(field.tensor, g));
  }
  const Tensor<T>& in = field.tensor;
  require_square(in.shape(), "rotation");
  const std::size_t n = in.dim(4), hw = n * n;
  const std::size_t planes = in.dim(0) * in.dim(1);
  Tensor<T> out(in.shape());
  for (std::size_t pl = 0; pl < planes; ++pl) {
    for (std::size_t s = 0; s < kGroupOrder; ++s) {
      const std::size_t src_slot = (s + kGroupOrder - g.r) % kGroupOrder;
      rotate_plane<T, false>(in.data() + (pl * kGroupOrder + src_slot) * hw,
                             out.data() + (pl * kGroupOrder + s) * hw, n, g.r);
    }
  }
  return FeatureField<T>(FieldKind::regular, std::move(out));
}

template <typename T>
Tensor<T> rot90(const Tensor<T>& t, C4Element g) {
  const FieldKind kind = t.rank() == 5 ? FieldKind::regular : FieldKind::trivial;
  if (kind == FieldKind::trivial) return rotate_spatial(t, g);
  return rot90_field(FeatureField<T>(kind, t), g).tensor;
}

template <typename T>
Tensor<T> expand_lift_kernel(const Tensor<T>& weight) {
  if (weight.rank() != 4) {
    throw DimensionError("lift weight must be [Cout,Cin,k,k], got " + shape_str(weight.shape()));
  }
  require_square(weight.shape(), "lift weight");
  const std::size_t cout = weight.dim(0), cin = weight.dim(1), k = weight.dim(2), kk = k * k;
  Tensor<T> bank({cout * kGroupOrder, cin, k, k});
  for (std::size_t o = 0; o < cout; ++o) {
    for (unsigned r = 0; r < kGroupOrder; ++r) {
      for (std::size_t i = 0; i < cin; ++i) {
        rotate_plane<T, false>(weight.data() + (o * cin + i) * kk,
                               bank.data() + ((o * kGroupOrder + r) * cin + i) * kk, k, r);
      }
    }
  }
  return bank;
}

template <typename T>
Tensor<T> expand_group_kernel(const Tensor<T>& weight) {
  if (weight.rank() != 5 || weight.dim(2) != kGroupOrder) {
    throw DimensionError("group conv weight must be [Cout,Cin,4,k,k], got " +
                         shape_str(weight.shape()));
  }
  require_square(weight.shape(), "group conv weight");
  const std::size_t cout = weight.dim(0), cin = weight.dim(1), k = weight.dim(3), kk = k * k;
  const std::size_t bank_in = cin * kGroupOrder;
  Tensor<T> bank({cout * kGroupOrder, bank_in, k, k});
  for (std::size_t o = 0; o < cout; ++o) {
    for (unsigned r = 0; r < kGroupOrder; ++r) {
      for (std::size_t i = 0; i < cin; ++i) {
        for (unsigned s = 0; s < kGroupOrder; ++s) {
          const unsigned t = (s + kGroupOrder - r) % kGroupOrder;
          rotate_plane<T, false>(
              weight.data() + ((o * cin + i) * kGroupOrder + t) * kk,
              bank.data() + ((o * kGroupOrder + r) * bank_in + i * kGroupOrder + s) * kk, k, r);
        }
      }
    }
  }
  return bank;
}

template <typename T>
FeatureField<T> lift_conv_forward(const FeatureField<T>& field, const Tensor<T>& weight,
                                  const Tensor<T>& bias) {
  if (field.kind != FieldKind::trivial) throw KindError("lifting convolution needs a trivial field");
  return FeatureField<T>(FieldKind::regular,
                         eq_conv(lift_operands(field.tensor, weight, bias), bias, false));
}

template <typename T>
FeatureField<T> gconv_forward(const FeatureField<T>& field, const Tensor<T>& weight,
                              const Tensor<T>& bias) {
  if (field.kind != FieldKind::regular) throw KindError("group convolution needs a regular field");
  return FeatureField<T>(FieldKind::regular,
                         eq_conv(gconv_operands(field.tensor, weight, bias), bias, true));
}

template <typename T>
FeatureField<T> group_pool(const FeatureField<T>& field) {
  if (field.kind != FieldKind::regular) throw KindError("group pooling needs a regular field");
  return FeatureField<T>(FieldKind::trivial, group_pool_impl<T>(field.tensor, nullptr));
}

template <typename T>
FeatureField<T> eq_batchnorm(const FeatureField<T>& field, BatchNorm<T>& state, Mode mode) {
  if (field.kind != FieldKind::regular || !state.regular()) {
    throw KindError("equivariant batch norm needs a regular field and regular state");
  }
  return FeatureField<T>(FieldKind::regular, state.forward(field.tensor, mode));
}

// ---------------------------------------------------------------------------
// LiftConv

template <typename T>
LiftConv<T>::LiftConv(std::size_t in_channels, std::size_t out_channels, std::size_t kernel)
    : weight_({out_channels, in_channels, kernel, kernel}),
      bias_({out_channels}),
      grad_weight_({out_channels, in_channels, kernel, kernel}),
      grad_bias_({out_channels}) {
  if (kernel % 2 == 0) throw GeometryError("lift kernel extent must be odd");
}

template <typename T>
Tensor<T> LiftConv<T>::forward(const Tensor<T>& x, Mode) {
  auto ops = lift_operands(x, weight_, bias_);
  Tensor<T> out = eq_conv(ops, bias_, false);
  io_.kernel = bank_from_perms(ops.weight, rotation_perms(weight_.dim(1), weight_.dim(2), false));
  io_.input = std::move(ops.input);
  io_.geometry = ConvGeometry{weight_.dim(2) / 2, 1};
  io_.ready = true;
  return out;
}

template <typename T>
Tensor<T> LiftConv<T>::backward(const Tensor<T>& grad_out) {
  if (!io_.ready) throw StateError("lift conv backward before forward");
  require_regular(grad_out.shape(), "lift conv gradient");
  auto g = conv2d_backward(from_regular(grad_out), io_, this->input_grad_);
  fold_bank_grad(g.kernel, rotation_perms(weight_.dim(1), weight_.dim(2), false), grad_weight_);
  accumulate_bias_grad(grad_out, grad_bias_);
  return std::move(g.input);
}

template <typename T>
Shape LiftConv<T>::output_shape(const Shape& input) const {
  if (input.size() != 4 || input[1] != weight_.dim(1)) {
    throw DimensionError("lift conv got input " + shape_str(input));
  }
  return {input[0], weight_.dim(0), kGroupOrder, input[2], input[3]};
}

template <typename T>
std::vector<ParamRef<T>> LiftConv<T>::params() {
  return {{"weight", &weight_, &grad_weight_}, {"bias", &bias_, &grad_bias_}};
}

// ---------------------------------------------------------------------------
// GroupConv

template <typename T>
GroupConv<T>::GroupConv(std::size_t in_channels, std::size_t out_channels, std::size_t kernel)
    : weight_({out_channels, in_channels, kGroupOrder, kernel, kernel}),
      bias_({out_channels}),
      grad_weight_({out_channels, in_channels, kGroupOrder, kernel, kernel}),
      grad_bias_({out_channels}) {
  if (kernel % 2 == 0) throw GeometryError("group conv kernel extent must be odd");
}

template <typename T>
Tensor<T> GroupConv<T>::forward(const Tensor<T>& x, Mode) {
  auto ops = gconv_operands(x, weight_, bias_);
  Tensor<T> out = eq_conv(ops, bias_, true);
  io_.kernel = bank_from_perms(ops.weight, rotation_perms(weight_.dim(1), weight_.dim(3), true));
  io_.input = std::move(ops.input);
  io_.geometry = ConvGeometry{weight_.dim(3) / 2, 1};
  io_.ready = true;
  return out;
}

template <typename T>
Tensor<T> GroupConv<T>::backward(const Tensor<T>& grad_out) {
  if (!io_.ready) throw StateError("group conv backward before forward");
  require_regular(grad_out.shape(), "group conv gradient");
  auto g = conv2d_backward(from_regular(grad_out), io_, this->input_grad_);
  fold_bank_grad(g.kernel, rotation_perms(weight_.dim(1), weight_.dim(3), true), grad_weight_);
  accumulate_bias_grad(grad_out, grad_bias_);
  if (!this->input_grad_) return Tensor<T>();
  const Shape& s = io_.input.shape();
  return std::move(g.input).reshaped({s[0], s[1] / kGroupOrder, kGroupOrder, s[2], s[3]});
}

template <typename T>
Shape GroupConv<T>::output_shape(const Shape& input) const {
  require_regular(input, "group conv");
  if (input[1] != weight_.dim(1)) throw DimensionError("group conv got input " + shape_str(input));
  return {input[0], weight_.dim(0), kGroupOrder, input[3], input[4]};
}

template <typename T>
std::vector<ParamRef<T>> GroupConv<T>::params() {
  return {{"weight", &weight_, &grad_weight_}, {"bias", &bias_, &grad_bias_}};
}

// ---------------------------------------------------------------------------
// GroupPool

template <typename T>
Tensor<T> GroupPool<T>::forward(const Tensor<T>& x, Mode) {
  input_shape_ = x.shape();
  return group_pool_impl(x, &argmax_);
}

template <typename T>
Tensor<T> GroupPool<T>::backward(const Tensor<T>& grad_out) {
  if (input_shape_.empty()) throw StateError("group pool backward before forward");
  Tensor<T> gin(input_shape_);
  const std::size_t planes = input_shape_[0] * input_shape_[1];
  const std::size_t hw = input_shape_[3] * input_shape_[4];
  for (std::size_t pl = 0; pl < planes; ++pl) {
    for (std::size_t i = 0; i < hw; ++i) {
      const std::size_t o = pl * hw + i;
      gin[(pl * kGroupOrder + argmax_[o]) * hw + i] = grad_out[o];
    }
  }
  return gin;
}

template <typename T>
Shape GroupPool<T>::output_shape(const Shape& input) const {
  require_regular(input, "group pooling");
  return {input[0], input[1], input[3], input[4]};
}

// ---------------------------------------------------------------------------
// SpatialPool

template <typename T>
Shape SpatialPool<T>::output_shape(const Shape& input) const {
  if (input.size() != 4) {
    throw DimensionError("spatial pool expects a trivial field [B,C,H,W], got " + shape_str(input));
  }
  if (input[2] != input[3] || input[2] % 4 != 0) {
    throw GeometryError("spatial pool needs a square grid with extent divisible by 4, got " +
                        shape_str(input));
  }
  return {input[0], input[1], input[2] / 4, input[3] / 4};
}

template <typename T>
Tensor<T> SpatialPool<T>::forward(const Tensor<T>& x, Mode) {
  const Shape os = output_shape(x.shape());
  input_shape_ = x.shape();
  const std::size_t batch = x.dim(0), channels = x.dim(1), w = x.dim(3), plane = w * w;
  const std::size_t n = w / 2, m = os[2];
  Tensor<T> out(os);
  argmax_.assign(out.size(), 0);

  // 2x2 max pool, remembering the winning input index of every cell.
  std::vector<std::uint32_t> cell(channels * n * n);
  std::vector<std::size_t> src(n * n);
  for (std::size_t b = 0; b < batch; ++b) {
    const T* in = x.data() + b * channels * plane;
    for (std::size_t c = 0; c < channels; ++c) {
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
          auto best = static_cast<std::uint32_t>(2 * i * w + 2 * j);
          for (std::size_t dy = 0; dy < 2; ++dy) {
            for (std::size_t dx = 0; dx < 2; ++dx) {
              const auto idx = static_cast<std::uint32_t>((2 * i + dy) * w + 2 * j + dx);
              if (in[c * plane + idx] > in[c * plane + best]) best = idx;
            }
          }
          cell[(c * n + i) * n + j] = best;
        }
      }
    }

    // Canonical orientation: the quarter turn whose top-left quadrant holds
    // the most activation (first on ties). Rotating the input cyclically
    // shifts these scores, so the choice follows the input exactly.
    const auto value = [&](std::size_t c, std::size_t k) { return in[c * plane + cell[c * n * n + k]]; };
    const auto rotated_source = [&](std::size_t r) {
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
          std::size_t si = i, sj = j;
          for (std::size_t t = 0; t < r; ++t) {
            const std::size_t ni = sj, nj = n - 1 - si;
            si = ni;
            sj = nj;
          }
          src[i * n + j] = si * n + sj;
        }
      }
    };
    std::size_t turn = 0;
    double best_score = 0;
    for (std::size_t r = 0; r < kGroupOrder; ++r) {
      rotated_source(r);
      double score = 0;
      for (std::size_t c = 0; c < channels; ++c) {
        for (std::size_t i = 0; i < n / 2; ++i) {
          for (std::size_t j = 0; j < n / 2; ++j) score += static_cast<double>(value(c, src[i * n + j]));
        }
      }
      if (r == 0 || score > best_score) {
        best_score = score;
        turn = r;
      }
    }
    rotated_source(turn);

    // 2x2 max pool of the canonically oriented map.
    for (std::size_t c = 0; c < channels; ++c) {
      for (std::size_t y = 0; y < m; ++y) {
        for (std::size_t xo = 0; xo < m; ++xo) {
          std::size_t best = src[2 * y * n + 2 * xo];
          for (std::size_t dy = 0; dy < 2; ++dy) {
            for (std::size_t dx = 0; dx < 2; ++dx) {
              const std::size_t k = src[(2 * y + dy) * n + 2 * xo + dx];
              if (value(c, k) > value(c, best)) best = k;
            }
          }
          const std::size_t o = ((b * channels + c) * m + y) * m + xo;
          out[o] = value(c, best);
          argmax_[o] = cell[c * n * n + best];
        }
      }
    }
  }
  return out;
}

template <typename T>
Tensor<T> SpatialPool<T>::backward(const Tensor<T>& grad_out) {
  if (input_shape_.empty()) throw StateError("spatial pool backward before forward");
  Tensor<T> gin(input_shape_);
  const std::size_t planes = input_shape_[0] * input_shape_[1];
  const std::size_t plane_in = input_shape_[2] * input_shape_[3];
  const std::size_t plane_out = grad_out.size() / planes;
  for (std::size_t pl = 0; pl < planes; ++pl) {
    for (std::size_t i = 0; i < plane_out; ++i) {
      const std::size_t o = pl * plane_out + i;
      gin[pl * plane_in + argmax_[o]] += grad_out[o];
    }
  }
  return gin;
}

#define EQPRUNE_INSTANTIATE(T)                                                               \
  template struct FeatureField<T>;                                                           \
  template Tensor<T> rotate_spatial(const Tensor<T>&, C4Element);                            \
  template FeatureField<T> rot90_field(const FeatureField<T>&, C4Element);                   \
  template Tensor<T> rot90(const Tensor<T>&, C4Element);                                     \
  template Tensor<T> expand_lift_kernel(const Tensor<T>&);                                   \
  template Tensor<T> expand_group_kernel(const Tensor<T>&);                                  \
  template FeatureField<T> lift_conv_forward(const FeatureField<T>&, const Tensor<T>&,       \
                                             const Tensor<T>&);                              \
  template FeatureField<T> gconv_forward(const FeatureField<T>&, const Tensor<T>&,           \
                                         const Tensor<T>&);                                  \
  template FeatureField<T> group_pool(const FeatureField<T>&);                               \
  template FeatureField<T> eq_batchnorm(const FeatureField<T>&, BatchNorm<T>&, Mode);        \
  template class LiftConv<T>;                                                                \
  template class GroupConv<T>;                                                               \
  template class GroupPool<T>;                                                               \
  template class SpatialPool<T>;

EQPRUNE_INSTANTIATE(float)
EQPRUNE_INSTANTIATE(double)
#undef EQPRUNE_INSTANTIATE

}  // namespace eqprune
