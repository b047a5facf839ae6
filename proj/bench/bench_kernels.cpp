// Parallel kernels against the direct reference loops.
//   ./bench_kernels --benchmark_filter=Conv
// Set OMP_NUM_THREADS to compare thread counts.

#include <random>
#include <vector>

#include <benchmark/benchmark.h>

#include "city2scene/kernels.hpp"

using namespace city2scene;

namespace {

std::vector<float> random_vec(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> d(0.0f, 1.0f);
  std::vector<float> v(n);
  for (auto& x : v) x = d(rng);
  return v;
}

Tensor random_tensor(int n, int c, int h, int w, std::uint64_t seed) {
  Tensor t(n, c, h, w);
  t.data = random_vec(t.size(), seed);
  return t;
}

void BM_GemmReference(benchmark::State& state) {
  const int s = static_cast<int>(state.range(0));
  const auto a = random_vec(static_cast<std::size_t>(s) * s, 1);
  const auto b = random_vec(static_cast<std::size_t>(s) * s, 2);
  std::vector<float> c(static_cast<std::size_t>(s) * s);
  for (auto _ : state) {
    reference::gemm_nn(s, s, s, a.data(), b.data(), c.data());
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(state.iterations() * 2LL * s * s * s);
}

void BM_GemmParallel(benchmark::State& state) {
  const int s = static_cast<int>(state.range(0));
  const auto a = random_vec(static_cast<std::size_t>(s) * s, 1);
  const auto b = random_vec(static_cast<std::size_t>(s) * s, 2);
  std::vector<float> c(static_cast<std::size_t>(s) * s);
  for (auto _ : state) {
    kernels::gemm_nn(s, s, s, a.data(), b.data(), c.data(), false);
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(state.iterations() * 2LL * s * s * s);
}

// First residual block of the desk reference CNN: batch 32, 32 channels on a 16 x 16 map.
const kernels::ConvShape kShape{32, 32, 3, 1};

void BM_ConvForwardReference(benchmark::State& state) {
  const Tensor x = random_tensor(32, kShape.in_channels, 16, 16, 3);
  const auto w = random_vec(static_cast<std::size_t>(kShape.out_channels) * kShape.in_channels * 9, 4);
  for (auto _ : state) benchmark::DoNotOptimize(reference::conv2d_forward(x, w, kShape));
}

void BM_ConvForwardParallel(benchmark::State& state) {
  const Tensor x = random_tensor(32, kShape.in_channels, 16, 16, 3);
  const auto w = random_vec(static_cast<std::size_t>(kShape.out_channels) * kShape.in_channels * 9, 4);
  kernels::ConvWorkspace ws;
  for (auto _ : state) benchmark::DoNotOptimize(kernels::conv2d_forward(x, w, kShape, ws));
}

void BM_ConvBackwardReference(benchmark::State& state) {
  const Tensor x = random_tensor(32, kShape.in_channels, 16, 16, 3);
  const Tensor dy = random_tensor(32, kShape.out_channels, 16, 16, 5);
  const auto w = random_vec(static_cast<std::size_t>(kShape.out_channels) * kShape.in_channels * 9, 4);
  std::vector<float> dw(w.size());
  for (auto _ : state) benchmark::DoNotOptimize(reference::conv2d_backward(x, w, dy, kShape, dw));
}

void BM_ConvBackwardParallel(benchmark::State& state) {
  const Tensor x = random_tensor(32, kShape.in_channels, 16, 16, 3);
  const Tensor dy = random_tensor(32, kShape.out_channels, 16, 16, 5);
  const auto w = random_vec(static_cast<std::size_t>(kShape.out_channels) * kShape.in_channels * 9, 4);
  std::vector<float> dw(w.size());
  kernels::ConvWorkspace ws;
  for (auto _ : state) benchmark::DoNotOptimize(kernels::conv2d_backward(x, w, dy, kShape, dw, true, ws));
}

}  // namespace

BENCHMARK(BM_GemmReference)->Arg(64)->Arg(256);
BENCHMARK(BM_GemmParallel)->Arg(64)->Arg(256);
BENCHMARK(BM_ConvForwardReference)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_ConvForwardParallel)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_ConvBackwardReference)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_ConvBackwardParallel)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
