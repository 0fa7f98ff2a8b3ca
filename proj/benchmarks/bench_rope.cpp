#include <benchmark/benchmark.h>

#include <vector>

#include "longdiff/rope.hpp"

using namespace longdiff::rope;

namespace {

void BM_RopeReport(benchmark::State& state) {
  const RopeConfig config{500000.0, 128, 4096, 8192, ScalingMode::DiffusionNTK};
  for (auto _ : state) benchmark::DoNotOptimize(rope_report(config));
}
BENCHMARK(BM_RopeReport);

void BM_RotaryTable(benchmark::State& state) {
  for (auto _ : state) benchmark::DoNotOptimize(RotaryTable(106242.96, 32, state.range(0)));
}
BENCHMARK(BM_RotaryTable)->Arg(1024)->Arg(8192);

void BM_RotateInPlace(benchmark::State& state) {
  const RotaryTable table(500000.0, 128, 8192);
  std::vector<float> v(128, 0.5f);
  long pos = 0;
  for (auto _ : state) {
    rotate_in_place<float>(v, pos, table);
    pos = (pos + 1) % 8192;
    benchmark::DoNotOptimize(v.data());
  }
}
BENCHMARK(BM_RotateInPlace);

}  // namespace

BENCHMARK_MAIN();
