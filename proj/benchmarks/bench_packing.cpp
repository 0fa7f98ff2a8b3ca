#include <benchmark/benchmark.h>

#include <random>

#include "longdiff/packing.hpp"

using namespace longdiff;

namespace {

std::vector<Document> corpus(std::size_t docs) {
  std::mt19937_64 rng(7);
  std::uniform_int_distribution<std::size_t> len(50, 2000);
  std::vector<Document> out;
  for (std::size_t i = 0; i < docs; ++i) {
    Document d{"d" + std::to_string(i), std::vector<TokenId>(len(rng))};
    for (std::size_t j = 0; j < d.tokens.size(); ++j) d.tokens[j] = static_cast<TokenId>(j % 250);
    out.push_back(std::move(d));
  }
  return out;
}

void BM_Pack(benchmark::State& state) {
  const auto docs = corpus(2000);
  std::size_t tokens = 0;
  for (const auto& d : docs) tokens += d.tokens.size();
  const PackConfig config{4096, static_cast<PackStrategy>(state.range(0)), {257, 256}};
  for (auto _ : state) benchmark::DoNotOptimize(pack(docs, config));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(tokens));
}
BENCHMARK(BM_Pack)->Arg(0)->Arg(1)->Arg(2)->ArgName("strategy")->Unit(benchmark::kMillisecond);

void BM_BuildSegmentMask(benchmark::State& state) {
  const auto length = static_cast<std::size_t>(state.range(0));
  std::vector<std::uint32_t> ids(length);
  for (std::size_t i = 0; i < length; ++i) ids[i] = static_cast<std::uint32_t>(i / 300);
  const auto spec = MaskSpec::segments(ids);
  for (auto _ : state) benchmark::DoNotOptimize(build_mask(spec, length));
}
BENCHMARK(BM_BuildSegmentMask)->Arg(4096)->Arg(1 << 16);

void BM_MaskDensity(benchmark::State& state) {
  const std::size_t length = 1 << 16;
  std::vector<std::uint32_t> ids(length);
  for (std::size_t i = 0; i < length; ++i) ids[i] = static_cast<std::uint32_t>(i / 300);
  const auto spec = MaskSpec::segments(ids);
  for (auto _ : state) benchmark::DoNotOptimize(mask_density(spec, length));
}
BENCHMARK(BM_MaskDensity);

}  // namespace

BENCHMARK_MAIN();
