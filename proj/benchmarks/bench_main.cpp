#include <benchmark/benchmark.h>

#include <random>

#include "seld/features.hpp"
#include "seld/model.hpp"
#include "seld/ops.hpp"
#include "seld/ssm.hpp"

namespace {

seld::Tensor random_tensor(std::mt19937_64& rng, seld::Shape shape, double lo, double hi) {
  std::uniform_real_distribution<double> u(lo, hi);
  seld::Tensor t(std::move(shape));
  for (auto& v : t.data()) v = u(rng);
  return t;
}

void BM_ScanForward(benchmark::State& state) {
  const auto len = static_cast<std::size_t>(state.range(0));
  const std::size_t e = 64, n = 16;
  std::mt19937_64 rng(1);
  const auto x = random_tensor(rng, {1, len, e}, -1, 1);
  const auto delta = random_tensor(rng, {1, len, e}, 0.01, 0.1);
  const auto a = random_tensor(rng, {e, n}, -2, -0.1);
  const auto b = random_tensor(rng, {1, len, n}, -1, 1);
  const auto c = random_tensor(rng, {1, len, n}, -1, 1);
  for (auto _ : state) {
    benchmark::DoNotOptimize(seld::scan_forward(x, delta, a, b, c, seld::Discretization::euler));
  }
  state.SetComplexityN(state.range(0));
}
BENCHMARK(BM_ScanForward)->RangeMultiplier(2)->Range(1024, 8192)->Complexity(benchmark::oN)->Unit(benchmark::kMillisecond);

void BM_ScanForwardBackward(benchmark::State& state) {
  const auto len = static_cast<std::size_t>(state.range(0));
  const std::size_t e = 16, n = 16;
  std::mt19937_64 rng(2);
  const auto x = random_tensor(rng, {1, len, e}, -1, 1);
  const auto delta = random_tensor(rng, {1, len, e}, 0.01, 0.1);
  const auto a = random_tensor(rng, {e, n}, -2, -0.1);
  const auto b = random_tensor(rng, {1, len, n}, -1, 1);
  const auto c = random_tensor(rng, {1, len, n}, -1, 1);
  for (auto _ : state) {
    seld::Graph g;
    auto y = seld::selective_scan(g.variable(x), g.variable(delta), g.variable(a), g.variable(b), g.variable(c),
                                  seld::Discretization::euler);
    auto loss = seld::sum(y);
    g.forward_eval();
    g.backward(loss);
    benchmark::DoNotOptimize(g.grad(loss));
  }
  state.SetComplexityN(state.range(0));
}
BENCHMARK(BM_ScanForwardBackward)->RangeMultiplier(2)->Range(1024, 8192)->Complexity(benchmark::oN)->Unit(benchmark::kMillisecond);

void BM_FeatureExtraction(benchmark::State& state) {
  std::mt19937_64 rng(3);
  seld::FoaClip clip{random_tensor(rng, {4, 120000}, -0.1, 0.1), 24000.0};
  seld::FeatureConfig cfg;
  for (auto _ : state) benchmark::DoNotOptimize(seld::assemble_branch_inputs(clip, cfg));
}
BENCHMARK(BM_FeatureExtraction)->Unit(benchmark::kMillisecond);

void BM_DeskModelStep(benchmark::State& state) {
  seld::ModelConfig cfg;
  cfg.n_classes = 4;
  cfg.conv_channels = {4, 8, 16, 16};
  cfg.d_model = 16;
  cfg.d_state = 4;
  cfg.n_mels = 16;
  seld::Model model(cfg, 1);
  std::mt19937_64 rng(4);
  std::array<seld::Tensor, 3> x;
  for (std::size_t b = 0; b < 3; ++b) x[b] = random_tensor(rng, {8, cfg.input_channels(b), 400, 16}, -1, 1);
  for (auto _ : state) {
    seld::Graph g;
    seld::Binder bind(g);
    auto out = model.forward(bind, {g.constant(x[0]), g.constant(x[1]), g.constant(x[2])},
                             seld::BatchNormMode::training);
    auto loss = seld::add(seld::add(seld::sum(out.sed), seld::sum(out.doa)), seld::sum(out.dist));
    g.forward_eval();
    g.backward(loss);
  }
}
BENCHMARK(BM_DeskModelStep)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
