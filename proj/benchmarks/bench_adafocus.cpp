#include <benchmark/benchmark.h>

#include "adafocus/pipeline.hpp"
#include "adafocus/rltrain.hpp"
#include "adafocus/synthdata.hpp"

using namespace adafocus;

namespace {

const DatasetSplit& split() {
  static const DatasetSplit s = generate_split(SynthConfig{}, 16, SplitRole::kTest, 1);
  return s;
}

ModelBundle bundle(bool plus) {
  BundleConfig cfg;
  cfg.adafocus_plus = plus;
  auto b = ModelBundle::create(cfg, 2);
  b.rho = 0.5;
  return b;
}

void BM_GlanceFrame(benchmark::State& state) {
  const auto b = bundle(false);
  const auto& s = split().samples[0];
  const std::span<const float> frame = s.frame(0);
  const auto x = nn::pack_images<float>(std::span(&frame, 1), 1, 64, 64);
  for (auto _ : state) benchmark::DoNotOptimize(b.glance.forward(x, 1, 64, 64, nullptr));
}
BENCHMARK(BM_GlanceFrame);

void BM_FocusPatches(benchmark::State& state) {
  const auto b = bundle(false);
  const auto& s = split().samples[0];
  std::vector<PatchRequest> req;
  for (int t = 0; t < s.frames; ++t) req.push_back({t, b.grid.offsets[t % b.grid.size()]});
  for (auto _ : state) benchmark::DoNotOptimize(focus_pooled(b, s, req));
  state.SetItemsProcessed(state.iterations() * static_cast<long>(req.size()));
}
BENCHMARK(BM_FocusPatches);

void BM_InferOnline(benchmark::State& state) {
  const auto b = bundle(state.range(0) != 0);
  InferenceOptions o;
  o.use_skip = state.range(0) != 0;
  std::size_t i = 0;
  for (auto _ : state) {
    benchmark::DoNotOptimize(infer_online(b, split().samples[i++ % split().samples.size()], o));
  }
}
BENCHMARK(BM_InferOnline)->Arg(0)->Arg(1);

void BM_InferOffline(benchmark::State& state) {
  const auto b = bundle(false);
  std::size_t i = 0;
  for (auto _ : state) {
    benchmark::DoNotOptimize(infer_offline(b, split().samples[i++ % split().samples.size()]));
  }
}
BENCHMARK(BM_InferOffline);

void BM_Rollout(benchmark::State& state) {
  const auto b = bundle(true);
  RolloutOptions o;
  o.use_skip = true;
  const auto& s = split().samples[0];
  const auto g = compute_glance(b, s);
  std::uint64_t seed = 0;
  for (auto _ : state) benchmark::DoNotOptimize(rollout_stage2(b, s, g, o, seed++));
}
BENCHMARK(BM_Rollout);

}  // namespace

BENCHMARK_MAIN();
