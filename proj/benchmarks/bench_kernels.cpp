#include <benchmark/benchmark.h>

#include "eqprune/compression.hpp"
#include "eqprune/kernels.hpp"
#include "eqprune/model.hpp"
#include "eqprune/random.hpp"

namespace {

using namespace eqprune;

Tensor<float> gaussian(Shape shape, std::uint64_t seed) {
  Tensor<float> t(std::move(shape));
  Rng rng(seed);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<float>(rng.normal());
  return t;
}

void BM_Conv2d(benchmark::State& state) {
  const auto c = static_cast<std::size_t>(state.range(0));
  const auto x = gaussian({32, c, 28, 28}, 1);
  const auto w = gaussian({c, c, 3, 3}, 2);
  for (auto _ : state) benchmark::DoNotOptimize(conv2d(x, w, {1, 1}));
  state.SetItemsProcessed(state.iterations() * 32);
}
BENCHMARK(BM_Conv2d)->Arg(8)->Arg(32);

void BM_MatmulLinear(benchmark::State& state) {
  const auto out = static_cast<std::size_t>(state.range(0));
  const auto x = gaussian({128, 784}, 1);
  const auto w = gaussian({out, 784}, 2);
  const auto b = gaussian({out}, 3);
  for (auto _ : state) benchmark::DoNotOptimize(matmul_linear(x, w, b));
  state.SetItemsProcessed(state.iterations() * 128);
}
BENCHMARK(BM_MatmulLinear)->Arg(64)->Arg(128);

void BM_QuantizedLinear(benchmark::State& state) {
  const auto x = gaussian({128, 784}, 1);
  const Linear<float> layer(gaussian({128, 784}, 2), gaussian({128}, 3));
  const auto q = quantize_linear(layer);
  for (auto _ : state) benchmark::DoNotOptimize(quantized_linear_forward(q, x));
  state.SetItemsProcessed(state.iterations() * 128);
}
BENCHMARK(BM_QuantizedLinear);

void BM_ModelStep(benchmark::State& state) {
  const auto arch = static_cast<Arch>(state.range(0));
  Model<float> model = build_model<float>(arch, 7);
  const auto x = gaussian({64, 1, 28, 28}, 1);
  for (auto _ : state) {
    const auto logits = model.forward(x, Mode::train);
    benchmark::DoNotOptimize(model.backward(logits));
  }
  state.SetItemsProcessed(state.iterations() * 64);
  state.SetLabel(std::string(arch_name(arch)));
}
BENCHMARK(BM_ModelStep)
    ->Arg(static_cast<int>(Arch::efficient_eq))
    ->Arg(static_cast<int>(Arch::base_cnn))
    ->Unit(benchmark::kMillisecond);

void BM_Inference(benchmark::State& state) {
  Model<float> model = build_model<float>(Arch::efficient_eq, 7);
  if (state.range(0)) model = prune_model(model, 0.5).first;
  const auto x = gaussian({256, 1, 28, 28}, 1);
  for (auto _ : state) benchmark::DoNotOptimize(model.forward(x, Mode::eval));
  state.SetItemsProcessed(state.iterations() * 256);
  state.SetLabel(state.range(0) ? "pruned p50" : "dense");
}
BENCHMARK(BM_Inference)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
