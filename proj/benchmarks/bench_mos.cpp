#include <benchmark/benchmark.h>

#include <vector>

#include "mos/metrics.hpp"
#include "mos/model.hpp"
#include "mos/router.hpp"

namespace {

using namespace mos;

std::vector<Vector> gaussian_sequence(RngStream& rng, std::size_t length, std::size_t dim) {
  std::vector<Vector> seq(length, Vector(dim));
  for (Vector& x : seq) {
    for (double& v : x) v = rng.normal();
  }
  return seq;
}

void BM_Gate(benchmark::State& state) {
  RngStream rng(1, 0);
  Vector scores(static_cast<std::size_t>(state.range(0)));
  for (double& v : scores) v = rng.uniform(-1.0, 1.0);
  for (auto _ : state) benchmark::DoNotOptimize(gate(scores, 2));
}
BENCHMARK(BM_Gate)->Arg(5)->Arg(16)->Arg(64);

void BM_Route(benchmark::State& state) {
  RngStream rng(2, 0);
  const ThemeRouter router = make_theme_router(16, 16, 32, 5, 1, 0.99, rng);
  const Vector x = gaussian_sequence(rng, 1, 16)[0];
  for (auto _ : state) benchmark::DoNotOptimize(route(router, x));
}
BENCHMARK(BM_Route);

void BM_ExpertBlock(benchmark::State& state) {
  RngStream rng(3, 0);
  const AttentionBlockParams block = make_attention_block(16, 32, rng);
  const auto seq = gaussian_sequence(rng, static_cast<std::size_t>(state.range(0)), 16);
  for (auto _ : state) benchmark::DoNotOptimize(expert_block_forward(block, seq));
  state.SetComplexityN(state.range(0));
}
BENCHMARK(BM_ExpertBlock)->RangeMultiplier(2)->Range(16, 512)->Complexity();

void BM_MosForward(benchmark::State& state) {
  RngStream rng(4, 0);
  ModelConfig c;
  c.vocab_size = 1000;
  const MosModel m = make_mos_model(c, rng);
  std::vector<ItemId> seq(static_cast<std::size_t>(state.range(0)));
  for (ItemId& id : seq) id = static_cast<ItemId>(rng.index(c.vocab_size));
  const auto stage = static_cast<TrainingStage>(state.range(1));
  for (auto _ : state) benchmark::DoNotOptimize(mos_forward(m, seq, 7, stage).logit);
}
BENCHMARK(BM_MosForward)
    ->ArgsProduct({{50, 200}, {static_cast<long>(TrainingStage::kBackboneWarmup),
                               static_cast<long>(TrainingStage::kJoint)}});

void BM_Auc(benchmark::State& state) {
  RngStream rng(5, 0);
  const auto n = static_cast<std::size_t>(state.range(0));
  std::vector<double> scores(n);
  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) {
    scores[i] = rng.uniform();
    labels[i] = rng.bernoulli(0.5) ? 1 : 0;
  }
  for (auto _ : state) benchmark::DoNotOptimize(auc(scores, labels));
}
BENCHMARK(BM_Auc)->Arg(1000)->Arg(100000);

}  // namespace

BENCHMARK_MAIN();
