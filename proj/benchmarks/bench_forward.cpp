#include <benchmark/benchmark.h>

#include "rt/rng.hpp"
#include "rt/tiling.hpp"

namespace {

using namespace rt;

struct ForwardFixture {
  LayerParams params;
  std::vector<Vec> xs;

  ForwardFixture(index_t n, index_t d, int heads) {
    Rng rng(12345);
    params = make_layer_params(d, heads, 4 * d, rng);
    params.bias = BiasSpec{BiasKind::alibi, 1.0, 0.0, 8.0};
    for (index_t i = 0; i < n; ++i) xs.push_back(rng.normal_vec(d));
  }
};

void BM_RtForwardNaive(benchmark::State& state) {
  const ForwardFixture f(state.range(0), 64, 4);
  for (auto _ : state) {
    benchmark::DoNotOptimize(rt_forward_naive(f.params, f.xs));
  }
  state.SetComplexityN(state.range(0));
}
BENCHMARK(BM_RtForwardNaive)->RangeMultiplier(2)->Range(32, 256)->Complexity();

void BM_RtForwardTiled(benchmark::State& state) {
  const ForwardFixture f(state.range(0), 64, 4);
  for (auto _ : state) {
    benchmark::DoNotOptimize(rt_forward_tiled(f.params, f.xs));
  }
  state.SetComplexityN(state.range(0));
}
BENCHMARK(BM_RtForwardTiled)->RangeMultiplier(2)->Range(32, 256)->Complexity();

void BM_TransformerForward(benchmark::State& state) {
  const ForwardFixture f(state.range(0), 64, 4);
  for (auto _ : state) {
    benchmark::DoNotOptimize(transformer_forward(f.params, f.xs));
  }
}
BENCHMARK(BM_TransformerForward)->RangeMultiplier(2)->Range(32, 256);

void BM_RecomputeIntermediates(benchmark::State& state) {
  const ForwardFixture f(state.range(0), 64, 4);
  const LayerIO io = rt_forward_naive(f.params, f.xs);
  for (auto _ : state) {
    benchmark::DoNotOptimize(rt_recompute_intermediates(f.params, f.xs, io.z));
  }
}
BENCHMARK(BM_RecomputeIntermediates)->RangeMultiplier(2)->Range(32, 256);

}  // namespace
