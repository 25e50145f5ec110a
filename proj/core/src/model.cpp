#include "eqprune/model.hpp"

#include <algorithm>
#include <cmath>

#include "eqprune/error.hpp"

namespace eqprune {

std::string_view arch_name(Arch arch) {
  switch (arch) {
    case Arch::base_cnn: return "base_cnn";
    case Arch::efficient_eq: return "efficient_eq";
    case Arch::ultra_efficient_eq: return "ultra_efficient_eq";
  }
  return "unknown";
}

Arch parse_arch(std::string_view name) {
  for (Arch a : {Arch::base_cnn, Arch::efficient_eq, Arch::ultra_efficient_eq}) {
    if (arch_name(a) == name) return a;
  }
  throw ConfigError("unknown architecture '" + std::string(name) + "'");
}

bool is_equivariant_arch(Arch arch) { return arch != Arch::base_cnn; }

EqArchSpec eq_arch_spec(Arch arch) {
  EqArchSpec spec;
  if (arch == Arch::ultra_efficient_eq) spec.dropout = 0.2;
  return spec;
}

namespace {

constexpr std::size_t kBaseWidths[6] = {32, 32, 64, 64, 128, 128};
constexpr std::size_t kBaseHidden = 512;
constexpr double kBaseDropout = 0.3;

template <typename T>
void kaiming_uniform(Tensor<T>& w, std::size_t fan_in, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = static_cast<T>(rng.uniform(-bound, bound));
}

}  // namespace

template <typename T>
Model<T>::Model(Arch arch, Shape input_shape) : arch_(arch), input_shape_(std::move(input_shape)) {
  if (input_shape_.size() != 3) {
    throw DimensionError("model input shape must be [C,H,W], got " + shape_str(input_shape_));
  }
}

template <typename T>
Model<T>::Model(const Model& other) : arch_(other.arch_), input_shape_(other.input_shape_) {
  layers_.reserve(other.layers_.size());
  for (const auto& l : other.layers_) layers_.push_back(l->clone());
}

template <typename T>
Model<T>& Model<T>::operator=(const Model& other) {
  if (this != &other) {
    Model copy(other);
    *this = std::move(copy);
  }
  return *this;
}

template <typename T>
Tensor<T> Model<T>::forward(const Tensor<T>& x, Mode mode) {
  if (layers_.empty()) return x;
  Tensor<T> h = layers_.front()->forward(x, mode);
  for (std::size_t i = 1; i < layers_.size(); ++i) h = layers_[i]->forward(h, mode);
  return h;
}

template <typename T>
Tensor<T> Model<T>::backward(const Tensor<T>& grad_out, bool need_input) {
  if (!layers_.empty()) layers_.front()->set_input_grad(need_input);
  Tensor<T> g = grad_out;
  for (std::size_t i = layers_.size(); i-- > 0;) g = layers_[i]->backward(g);
  return g;
}

template <typename T>
void Model<T>::zero_grad() {
  for (auto& l : layers_) l->zero_grad();
}

template <typename T>
std::vector<ParamRef<T>> Model<T>::params() {
  std::vector<ParamRef<T>> out;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    for (auto p : layers_[i]->params()) {
      p.name = "l" + std::to_string(i) + "." + p.name;
      out.push_back(std::move(p));
    }
  }
  return out;
}

template <typename T>
std::vector<BufferRef<T>> Model<T>::buffers() {
  std::vector<BufferRef<T>> out;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    for (auto b : layers_[i]->buffers()) {
      b.name = "l" + std::to_string(i) + "." + b.name;
      out.push_back(std::move(b));
    }
  }
  return out;
}

template <typename T>
StateDict Model<T>::state() const {
  StateDict dict;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    layers_[i]->append_state("l" + std::to_string(i) + ".", dict);
  }
  return dict;
}

template <typename T>
void Model<T>::load_state(const StateDict& dict) {
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    layers_[i]->load_state("l" + std::to_string(i) + ".", dict);
  }
}

template <typename T>
void Model<T>::reseed_dropout(std::uint64_t seed) {
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    if (auto* d = dynamic_cast<Dropout<T>*>(layers_[i].get())) d->reseed(derive_seed(seed, i));
  }
}

template <typename T>
std::vector<Shape> Model<T>::trace_shapes() const {
  std::vector<Shape> shapes;
  Shape s{1};
  s.insert(s.end(), input_shape_.begin(), input_shape_.end());
  shapes.push_back(s);
  for (const auto& l : layers_) {
    s = l->output_shape(s);
    shapes.push_back(s);
  }
  return shapes;
}

template <typename T>
std::size_t Model<T>::flatten_extent() const {
  const auto shapes = trace_shapes();
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    if (layers_[i]->kind() == LayerKind::flatten) return shapes[i + 1][1];
  }
  throw KindError("model has no flatten layer");
}

template <typename T>
Model<T> build_model(Arch arch, std::uint64_t seed, std::size_t extent) {
  Model<T> m(arch, {1, extent, extent});
  Rng rng(seed);

  if (arch == Arch::base_cnn) {
    std::size_t in = 1, side = extent;
    for (std::size_t i = 0; i < 6; ++i) {
      auto conv = std::make_unique<Conv2d<T>>(in, kBaseWidths[i], 3);
      kaiming_uniform(conv->weight(), in * 9, rng);
      m.add(std::move(conv));
      m.add(std::make_unique<BatchNorm<T>>(kBaseWidths[i], false));
      m.add(std::make_unique<ReLU<T>>());
      if (i % 2 == 1) {
        m.add(std::make_unique<MaxPool2d<T>>());
        side /= 2;
      }
      in = kBaseWidths[i];
    }
    m.add(std::make_unique<Flatten<T>>());
    auto fc1 = std::make_unique<Linear<T>>(in * side * side, kBaseHidden);
    kaiming_uniform(fc1->weight(), in * side * side, rng);
    m.add(std::move(fc1));
    m.add(std::make_unique<ReLU<T>>());
    m.add(std::make_unique<Dropout<T>>(kBaseDropout));
    auto fc2 = std::make_unique<Linear<T>>(kBaseHidden, 10);
    kaiming_uniform(fc2->weight(), kBaseHidden, rng);
    m.add(std::move(fc2));
  } else {
    const EqArchSpec s = eq_arch_spec(arch);
    auto lift = std::make_unique<LiftConv<T>>(1, s.lift_channels, s.lift_kernel);
    kaiming_uniform(lift->weight(), s.lift_kernel * s.lift_kernel, rng);
    m.add(std::move(lift));
    m.add(std::make_unique<BatchNorm<T>>(s.lift_channels, true));
    m.add(std::make_unique<ReLU<T>>());
    auto gconv = std::make_unique<GroupConv<T>>(s.lift_channels, s.group_channels, s.group_kernel);
    kaiming_uniform(gconv->weight(), s.lift_channels * kGroupOrder * s.group_kernel * s.group_kernel,
                    rng);
    m.add(std::move(gconv));
    m.add(std::make_unique<BatchNorm<T>>(s.group_channels, true));
    m.add(std::make_unique<ReLU<T>>());
    m.add(std::make_unique<GroupPool<T>>());
    m.add(std::make_unique<SpatialPool<T>>());
    m.add(std::make_unique<Flatten<T>>());
    const std::size_t flat = s.group_channels * (extent / 4) * (extent / 4);
    auto fc1 = std::make_unique<Linear<T>>(flat, s.hidden);
    kaiming_uniform(fc1->weight(), flat, rng);
    m.add(std::move(fc1));
    m.add(std::make_unique<ReLU<T>>());
    m.add(std::make_unique<Dropout<T>>(s.dropout));
    auto fc2 = std::make_unique<Linear<T>>(s.hidden, s.classes);
    kaiming_uniform(fc2->weight(), s.hidden, rng);
    m.add(std::move(fc2));
  }
  m.reseed_dropout(derive_seed(seed, 0xd509));
  return m;
}

template <typename T>
std::size_t count_params(const Model<T>& model) {
  std::size_t n = 0;
  for (std::size_t i = 0; i < model.size(); ++i) n += model.layer(i).parameter_count();
  return n;
}

std::size_t analytic_param_count(Arch arch, std::size_t hidden, std::size_t extent) {
  if (arch == Arch::base_cnn) {
    std::size_t n = 0, in = 1;
    for (std::size_t w : kBaseWidths) {
      n += w * in * 9 + w + 2 * w;
      in = w;
    }
    const std::size_t side = extent / 8;
    return n + (in * side * side) * hidden + hidden + hidden * 10 + 10;
  }
  const EqArchSpec s = eq_arch_spec(arch);
  const std::size_t lift = s.lift_channels * s.lift_kernel * s.lift_kernel + s.lift_channels;
  const std::size_t gconv =
      s.group_channels * s.lift_channels * kGroupOrder * s.group_kernel * s.group_kernel +
      s.group_channels;
  const std::size_t bn = 2 * s.lift_channels + 2 * s.group_channels;
  const std::size_t flat = s.group_channels * (extent / 4) * (extent / 4);
  return lift + gconv + bn + flat * hidden + hidden + hidden * s.classes + s.classes;
}

template <typename T>
InvarianceReport check_invariance(Model<T>& model, const Tensor<T>& input, double tol) {
  InvarianceReport report;
  report.tol = tol;
  const Tensor<T> base = model.forward(input, Mode::eval);
  for (int r = 1; r < 4; ++r) {
    const Tensor<T> rotated = model.forward(rotate_spatial(input, C4Element(r)), Mode::eval);
    report.max_logit_diff[r] = max_abs_diff(base, rotated);
  }
  report.passed = std::all_of(report.max_logit_diff.begin(), report.max_logit_diff.end(),
                              [tol](double d) { return d <= tol; });
  return report;
}

namespace {

double weighted_sum(const Tensor<double>& out, const Tensor<double>& r) {
  double s = 0;
  for (std::size_t i = 0; i < out.size(); ++i) s += out[i] * r[i];
  return s;
}

// ||a - n|| / (||a|| + ||n||) over one tensor.
double rel_error(const std::vector<double>& a, const std::vector<double>& n) {
  double diff = 0, na = 0, nn = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - n[i]) * (a[i] - n[i]);
    na += a[i] * a[i];
    nn += n[i] * n[i];
  }
  const double denom = std::sqrt(na) + std::sqrt(nn);
  return denom == 0 ? 0.0 : std::sqrt(diff) / denom;
}

}  // namespace

double grad_check(Layer<double>& layer, const Tensor<double>& input, double eps, Mode mode,
                  std::uint64_t seed) {
  auto* dropout = dynamic_cast<Dropout<double>*>(&layer);
  if (dropout != nullptr) dropout->freeze_mask(false);
  Tensor<double> out = layer.forward(input, mode);
  if (dropout != nullptr) dropout->freeze_mask(true);

  Rng rng(seed);
  Tensor<double> r(out.shape());
  for (std::size_t i = 0; i < r.size(); ++i) r[i] = rng.normal();

  layer.zero_grad();
  layer.forward(input, mode);
  const Tensor<double> grad_input = layer.backward(r);
  std::vector<Tensor<double>> grads;
  for (const auto& p : layer.params()) grads.push_back(*p.grad);

  auto loss = [&](const Tensor<double>& x) { return weighted_sum(layer.forward(x, mode), r); };
  const auto central = [&](Tensor<double>& t, const Tensor<double>& x) {
    std::vector<double> n(t.size());
    for (std::size_t i = 0; i < t.size(); ++i) {
      const double keep = t[i];
      t[i] = keep + eps;
      const double up = loss(x);
      t[i] = keep - eps;
      const double down = loss(x);
      t[i] = keep;
      n[i] = (up - down) / (2 * eps);
    }
    return n;
  };

  Tensor<double> x = input;
  double worst = rel_error(grad_input.storage(), central(x, x));
  auto params = layer.params();
  for (std::size_t k = 0; k < params.size(); ++k) {
    worst = std::max(worst, rel_error(grads[k].storage(), central(*params[k].value, input)));
  }
  if (dropout != nullptr) dropout->freeze_mask(false);
  return worst;
}

template class Model<float>;
template class Model<double>;
template Model<float> build_model(Arch, std::uint64_t, std::size_t);
template Model<double> build_model(Arch, std::uint64_t, std::size_t);
template std::size_t count_params(const Model<float>&);
template std::size_t count_params(const Model<double>&);
template InvarianceReport check_invariance(Model<float>&, const Tensor<float>&, double);
template InvarianceReport check_invariance(Model<double>&, const Tensor<double>&, double);

}  // namespace eqprune
