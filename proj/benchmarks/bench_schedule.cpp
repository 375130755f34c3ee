#include <benchmark/benchmark.h>

#include "rt/io_model.hpp"

namespace {

using namespace rt;

void BM_BuildSchedule(benchmark::State& state) {
  for (auto _ : state) {
    benchmark::DoNotOptimize(build_schedule(state.range(0)));
  }
  state.SetComplexityN(state.range(0));
}
BENCHMARK(BM_BuildSchedule)->RangeMultiplier(4)->Range(256, 16384)->Complexity();

void BM_ValidateSchedule(benchmark::State& state) {
  const Schedule s = build_schedule(state.range(0));
  for (auto _ : state) {
    benchmark::DoNotOptimize(validate_schedule(s));
  }
}
BENCHMARK(BM_ValidateSchedule)->RangeMultiplier(4)->Range(256, 4096);

void BM_CountTiled(benchmark::State& state) {
  for (auto _ : state) {
    benchmark::DoNotOptimize(count_tiled(state.range(0), 64));
  }
}
BENCHMARK(BM_CountTiled)->RangeMultiplier(4)->Range(256, 16384);

}  // namespace
