// SPDX-License-Identifier: Apache-2.0
#include <benchmark/benchmark.h>

#include <random>

#include "seqlidar/autograd.hpp"
#include "seqlidar/equirect.hpp"
#include "seqlidar/gemm.hpp"
#include "seqlidar/lidar4dnet.hpp"
#include "seqlidar/metrics.hpp"
#include "seqlidar/ops.hpp"
#include "seqlidar/scene.hpp"

using namespace seqlidar;

namespace {

Tensor<float> noise(const Shape& s, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return Tensor<float>::randn(s, rng);
}

void BM_GemmAcc(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const Tensor<float> a = noise({n, n}, 1), b = noise({n, n}, 2);
  Tensor<float> c({n, n});
  for (auto _ : state) {
    kernels::gemm_acc(n, n, n, a.ptr(), n, 1, b.ptr(), n, c.ptr(), n);
    benchmark::DoNotOptimize(c.ptr());
  }
  state.counters["GFLOPS"] = benchmark::Counter(2.0 * n * n * n, benchmark::Counter::kIsIterationInvariantRate,
                                                benchmark::Counter::kIs1000);
}
BENCHMARK(BM_GemmAcc)->Arg(64)->Arg(256);

// Weight-gradient shape: small M, N with a long reduction.
void BM_GemmDotAcc(benchmark::State& state) {
  const std::size_t M = 32, N = 288, K = static_cast<std::size_t>(state.range(0));
  const Tensor<float> a = noise({M, K}, 1), b = noise({N, K}, 2);
  Tensor<float> c({M, N});
  for (auto _ : state) {
    kernels::gemm_dot_acc(M, N, K, a.ptr(), K, b.ptr(), K, c.ptr(), N);
    benchmark::DoNotOptimize(c.ptr());
  }
  state.counters["GFLOPS"] = benchmark::Counter(2.0 * M * N * K, benchmark::Counter::kIsIterationInvariantRate,
                                                benchmark::Counter::kIs1000);
}
BENCHMARK(BM_GemmDotAcc)->Arg(4096)->Arg(16384);

void BM_ConvCircularForward(benchmark::State& state) {
  const auto C = static_cast<std::size_t>(state.range(0));
  const Var<float> x(noise({4, C, 32, 128}, 1)), w(noise({C, C, 3, 3}, 2)), b(Tensor<float>({C}));
  NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(ops::conv2d_circular(x, w, b).value().ptr());
}
BENCHMARK(BM_ConvCircularForward)->Arg(16)->Arg(32)->Unit(benchmark::kMillisecond);

void BM_ConvCircularBackward(benchmark::State& state) {
  const std::size_t C = 16;
  Var<float> x(noise({4, C, 32, 128}, 1), true), w(noise({C, C, 3, 3}, 2), true), b(Tensor<float>({C}), true);
  for (auto _ : state) {
    const Var<float> loss = ops::mean(ops::conv2d_circular(x, w, b));
    backward(loss);
    x.zero_grad();
    w.zero_grad();
    b.zero_grad();
  }
}
BENCHMARK(BM_ConvCircularBackward)->Unit(benchmark::kMillisecond);

ModelConfig toy_model() {
  ModelConfig m;
  m.scales = 4;
  m.channels = 16;
  m.blocks = 1;
  m.fourier_k = 2;
  return m;
}

ConditionBatch<float> toy_conditions() {
  return {noise({1, 4, 2, 32, 128}, 3), noise({1, 4, 2, 32, 128}, 4), {{0, 4, 7, 11}}};
}

void BM_ModelForward(benchmark::State& state) {
  const Lidar4DNet<float> net(toy_model());
  const ConditionBatch<float> cond = toy_conditions();
  const Var<float> x(noise({1, 4, 2, 32, 128}, 5));
  NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(net.forward(x, {0.5}, cond).value().ptr());
}
BENCHMARK(BM_ModelForward)->Unit(benchmark::kMillisecond);

void BM_ModelTrainStep(benchmark::State& state) {
  Lidar4DNet<float> net(toy_model());
  const ConditionBatch<float> cond = toy_conditions();
  const Tensor<float> x = noise({1, 4, 2, 32, 128}, 5);
  for (auto _ : state) {
    for (auto& p : net.params().vars()) p.zero_grad();
    const Var<float> loss = ops::mse(net.forward(Var<float>(x), {0.5}, cond), Var<float>(x));
    backward(loss);
  }
}
BENCHMARK(BM_ModelTrainStep)->Unit(benchmark::kMillisecond);

void BM_ProjectFrame(benchmark::State& state) {
  SensorConfig cfg;
  cfg.H = 32;
  const SceneWorld world = synth_world(1, WorldParams{});
  const PointCloud cloud = raycast_frame(world, 0, cfg);
  for (auto _ : state) benchmark::DoNotOptimize(project(cloud, cfg).channels.ptr());
}
BENCHMARK(BM_ProjectFrame);

void BM_Mmd(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  std::vector<Tensor<double>> a, b;
  std::mt19937_64 rng(1);
  for (std::size_t i = 0; i < n; ++i) {
    a.push_back(Tensor<double>::randn({64, 64}, rng));
    b.push_back(Tensor<double>::randn({64, 64}, rng));
  }
  for (auto _ : state) benchmark::DoNotOptimize(mmd(a, b));
}
BENCHMARK(BM_Mmd)->Arg(32)->Arg(128)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
