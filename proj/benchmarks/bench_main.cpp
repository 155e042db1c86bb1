#include <benchmark/benchmark.h>

#include "afan/afan.hpp"
#include "afan/eval.hpp"
#include "afan/rng.hpp"
#include "afan/trainer.hpp"

using namespace afan;

namespace {

Tensor random_tensor(Shape shape, uint64_t seed, bool rg = false) {
  Rng rng(seed);
  int64_t n = 1;
  for (auto d : shape) n *= d;
  std::vector<double> v(static_cast<size_t>(n));
  for (auto& x : v) x = rng.normal();
  return Tensor::from_values(std::move(shape), std::move(v), rg);
}

ModelSpec bench_resnet() {
  ModelSpec s;
  s.arch = "tiny-resnet";
  s.channels = {8, 16, 32};
  s.input_channels = 1;
  s.input_height = 16;
  s.input_width = 16;
  s.classes = 4;
  return s;
}

std::vector<int> bench_labels(int64_t n, int classes, uint64_t seed) {
  Rng rng(seed);
  std::vector<int> y(static_cast<size_t>(n));
  for (auto& l : y) l = static_cast<int>(rng.uniform_int(classes));
  return y;
}

void BM_Conv2dForward(benchmark::State& state) {
  Tensor x = random_tensor({16, 8, 16, 16}, 1);
  Tensor w = random_tensor({16, 8, 3, 3}, 2);
  for (auto _ : state) benchmark::DoNotOptimize(conv2d(x, w, 1, 1));
}
BENCHMARK(BM_Conv2dForward)->Unit(benchmark::kMillisecond);

void BM_Conv2dForwardBackward(benchmark::State& state) {
  Tensor x = random_tensor({16, 8, 16, 16}, 1);
  Tensor w = random_tensor({16, 8, 3, 3}, 2, true);
  for (auto _ : state) {
    Tensor loss = mean_all(conv2d(x, w, 1, 1));
    backward(loss);
    benchmark::DoNotOptimize(w.grad().data());
  }
}
BENCHMARK(BM_Conv2dForwardBackward)->Unit(benchmark::kMillisecond);

void BM_MatmulForward(benchmark::State& state) {
  const auto n = state.range(0);
  Tensor a = random_tensor({n, n}, 3);
  Tensor b = random_tensor({n, n}, 4);
  for (auto _ : state) benchmark::DoNotOptimize(matmul(a, b));
}
BENCHMARK(BM_MatmulForward)->Arg(64)->Arg(128)->Unit(benchmark::kMicrosecond);

// One-shot scaling versus an independent PGD run per strength. The split
// after block 1 leaves real work in the head, where the k runs differ.
void BM_SpectrumInterpolated(benchmark::State& state) {
  ModelSpec spec = bench_resnet();
  spec.split = "after-block-1";
  SplitModel model = SplitModel::build(spec, 5);
  Tensor x = random_tensor({16, 1, 16, 16}, 6);
  const auto y = bench_labels(16, 4, 7);
  PerturbConfig cfg;
  cfg.k = static_cast<int>(state.range(0));
  for (auto _ : state) benchmark::DoNotOptimize(build_spectrum(cfg, model, x, y));
}
BENCHMARK(BM_SpectrumInterpolated)->Arg(3)->Arg(5)->Unit(benchmark::kMillisecond);

void BM_SpectrumIndependent(benchmark::State& state) {
  ModelSpec spec = bench_resnet();
  spec.split = "after-block-1";
  SplitModel model = SplitModel::build(spec, 5);
  Tensor x = random_tensor({16, 1, 16, 16}, 6);
  const auto y = bench_labels(16, 4, 7);
  PerturbConfig cfg;
  cfg.k = static_cast<int>(state.range(0));
  cfg.interpolate = false;
  for (auto _ : state) benchmark::DoNotOptimize(build_spectrum(cfg, model, x, y));
}
BENCHMARK(BM_SpectrumIndependent)->Arg(3)->Arg(5)->Unit(benchmark::kMillisecond);

void BM_TrainStepBaseline(benchmark::State& state) {
  SplitModel model = SplitModel::build(bench_resnet(), 9);
  Tensor x = random_tensor({32, 1, 16, 16}, 10);
  const auto y = bench_labels(32, 4, 11);
  TrainConfig cfg;
  cfg.afa_on = false;
  SgdState sgd;
  for (auto _ : state) {
    LossParts parts = afan_loss(model, x, y, cfg);
    backward(parts.total);
    auto params = model.parameters();
    sgd_step(params, sgd, 0.01, cfg.momentum, cfg.weight_decay);
  }
}
BENCHMARK(BM_TrainStepBaseline)->Unit(benchmark::kMillisecond);

void BM_TrainStepAfan(benchmark::State& state) {
  SplitModel model = SplitModel::build(bench_resnet(), 9);
  Tensor x = random_tensor({32, 1, 16, 16}, 10);
  const auto y = bench_labels(32, 4, 11);
  TrainConfig cfg;  // k=3 spectrum with mixing
  SgdState sgd;
  for (auto _ : state) {
    LossParts parts = afan_loss(model, x, y, cfg);
    backward(parts.total);
    auto params = model.parameters();
    sgd_step(params, sgd, 0.01, cfg.momentum, cfg.weight_decay);
  }
}
BENCHMARK(BM_TrainStepAfan)->Unit(benchmark::kMillisecond);

void BM_Hvp(benchmark::State& state) {
  SplitModel model = SplitModel::build(bench_resnet(), 13);
  Tensor x = random_tensor({32, 1, 16, 16}, 14);
  const auto y = bench_labels(32, 4, 15);
  GradFn f = model_loss_gradfn(model, x, y);
  const std::vector<double> theta = model.flat_parameters();
  Rng rng(16);
  std::vector<double> v(theta.size());
  for (auto& e : v) e = rng.normal();
  for (auto _ : state) benchmark::DoNotOptimize(hvp(f, theta, v));
}
BENCHMARK(BM_Hvp)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
