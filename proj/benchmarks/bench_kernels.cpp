#include <benchmark/benchmark.h>

#include "s2fpn/attention.hpp"
#include "s2fpn/decoder.hpp"
#include "s2fpn/ops.hpp"
#include "s2fpn/random.hpp"

namespace {

using namespace s2fpn;

Tensor<float> random_input(const Shape& s, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<float> v(static_cast<std::size_t>(s.numel()));
  for (auto& x : v) x = static_cast<float>(normal01(rng));
  return Tensor<float>::from(s, std::move(v));
}

// 3x3 convolution, C -> C channels on a 64x128 map.
void BM_Conv3x3(benchmark::State& state) {
  const std::int64_t c = state.range(0);
  const auto x = random_input(Shape{1, c, 64, 128}, 1);
  const auto w = random_input(Shape{c, c, 3, 3}, 2);
  const auto b = Tensor<float>::zeros(Shape{c, 1, 1, 1});
  NoGradGuard no_grad;
  for (auto _ : state) benchmark::DoNotOptimize(ops::conv2d(x, w, b, 1, 1).data().data());
  state.SetItemsProcessed(state.iterations() * c * c * 9 * 64 * 128);
}
BENCHMARK(BM_Conv3x3)->Arg(32)->Arg(64)->Arg(128)->Unit(benchmark::kMillisecond);

void BM_DepthwiseConv3x3(benchmark::State& state) {
  const auto x = random_input(Shape{1, 256, 32, 64}, 3);
  const auto w = random_input(Shape{256, 1, 3, 3}, 4);
  NoGradGuard no_grad;
  for (auto _ : state)
    benchmark::DoNotOptimize(ops::conv2d(x, w, Tensor<float>{}, 1, 1, 256).data().data());
}
BENCHMARK(BM_DepthwiseConv3x3)->Unit(benchmark::kMillisecond);

void BM_SsamForward(benchmark::State& state) {
  std::mt19937_64 rng(5);
  Ssam<float> ssam(128, rng);
  ssam.alpha.data()[0] = 0.5f;
  const auto x = random_input(Shape{1, 128, state.range(0), 2 * state.range(0)}, 6);
  NoGradGuard no_grad;
  for (auto _ : state) benchmark::DoNotOptimize(ssam.forward(x).data().data());
}
BENCHMARK(BM_SsamForward)->Arg(16)->Arg(64)->Unit(benchmark::kMicrosecond);

void BM_SsamForwardBackward(benchmark::State& state) {
  std::mt19937_64 rng(7);
  Ssam<float> ssam(64, rng);
  ssam.alpha.data()[0] = 0.5f;
  const auto x = random_input(Shape{1, 64, 32, 64}, 8);
  for (auto _ : state) {
    ssam.zero_grad();
    backward(ops::sum(ssam.forward(x)));
  }
}
BENCHMARK(BM_SsamForwardBackward)->Unit(benchmark::kMicrosecond);

// Eval-mode forward of the full model at a reduced resolution.
void BM_ModelForward(benchmark::State& state) {
  ModelConfig cfg;
  cfg.backbone.variant = static_cast<BackboneVariant>(state.range(0));
  S2Fpn<float> model(cfg);
  model.eval();
  const auto x = random_input(Shape{1, 3, 128, 256}, 9);
  NoGradGuard no_grad;
  for (auto _ : state) benchmark::DoNotOptimize(model.forward(x).main.data().data());
  state.SetLabel(to_string(cfg.backbone.variant));
}
BENCHMARK(BM_ModelForward)
    ->Arg(static_cast<int>(BackboneVariant::kR18))
    ->Arg(static_cast<int>(BackboneVariant::kR34))
    ->Arg(static_cast<int>(BackboneVariant::kR34M))
    ->Unit(benchmark::kMillisecond);

}  // namespace

// The packaged benchmark_main archive carries LTO bytecode from another
// compiler release, so the entry point is defined here.
BENCHMARK_MAIN();
