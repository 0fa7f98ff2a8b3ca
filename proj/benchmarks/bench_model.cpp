#include <benchmark/benchmark.h>

#include <random>

#include "longdiff/model.hpp"

using namespace longdiff;

namespace {

model::ModelConfig toy_config(long length) {
  model::ModelConfig c;
  c.max_positions = length;
  c.rope.train_context = length;
  c.rope.target_context = length;
  return c;
}

std::vector<TokenId> random_tokens(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<TokenId> d(0, 255);
  std::vector<TokenId> out(n);
  for (auto& t : out) t = d(rng);
  return out;
}

MaskSpec spec_for(int kind, std::size_t length) {
  if (kind == 0) return MaskSpec::full();
  if (kind == 1) return MaskSpec::causal();
  std::vector<std::uint32_t> ids(length);
  for (std::size_t i = 0; i < length; ++i) ids[i] = static_cast<std::uint32_t>(i / 64);
  return MaskSpec::segments(std::move(ids));
}

void BM_Forward(benchmark::State& state) {
  const auto length = static_cast<std::size_t>(state.range(0));
  const auto config = toy_config(static_cast<long>(length));
  const model::DiffusionTransformer<float> net(config);
  const auto params = model::init_parameters<float>(config, 1);
  const auto tokens = random_tokens(length, 2);
  const AttentionMask mask(spec_for(static_cast<int>(state.range(1)), length), length);
  for (auto _ : state) benchmark::DoNotOptimize(net.forward(params, tokens, mask));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(length));
}
BENCHMARK(BM_Forward)
    ->ArgsProduct({{256, 1024}, {0, 1, 2}})
    ->ArgNames({"len", "mask"})
    ->Unit(benchmark::kMillisecond);

void BM_LossAndGrad(benchmark::State& state) {
  const auto length = static_cast<std::size_t>(state.range(0));
  const auto config = toy_config(static_cast<long>(length));
  const model::DiffusionTransformer<float> net(config);
  const auto params = model::init_parameters<float>(config, 1);
  auto grad = params.zeros_like();
  const auto tokens = random_tokens(length, 3);
  std::mt19937_64 rng(4);
  const auto sample = model::corrupt(tokens, 0.5, rng, config.mask_id);
  const AttentionMask mask(MaskSpec::full(), length);
  for (auto _ : state) benchmark::DoNotOptimize(net.loss_and_grad(params, sample, mask, grad));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(length));
}
BENCHMARK(BM_LossAndGrad)->Arg(256)->Arg(1024)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
