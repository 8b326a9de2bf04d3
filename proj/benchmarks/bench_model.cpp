#include <benchmark/benchmark.h>

#include "atomicl/icl/detector.hpp"
#include "atomicl/icl/model.hpp"
#include "atomicl/icl/train.hpp"

using namespace atomicl;
using namespace atomicl::icl;

namespace {

ModelConfig bench_config() {
  ModelConfig cfg;
  cfg.users = 2;
  cfg.antennas = 8;
  return cfg;
}

struct Prompt {
  Task task;
  RMat z;
  CMat phi;
};

Prompt make_prompt(const ModelConfig& cfg, std::size_t pilots) {
  const TaskSampler sampler(cfg, TaskSpec{});
  Rng rng(11);
  Task task = sampler.sample(rng, pilots + 8);
  RMat z = task.block.linearized.leftCols(static_cast<Eigen::Index>(pilots));
  CMat phi = task.block.symbols.leftCols(static_cast<Eigen::Index>(pilots));
  return {std::move(task), std::move(z), std::move(phi)};
}

void BM_IclFullPrompt(benchmark::State& state) {
  const ModelConfig cfg = bench_config();
  Rng rng(1);
  const auto params = ModelParams<float>::init(cfg, rng);
  const Prompt p = make_prompt(cfg, static_cast<std::size_t>(state.range(0)));
  const Constellation c(4);
  const RVec y = p.task.block.linearized.rightCols(1);
  for (auto _ : state) benchmark::DoNotOptimize(detect(params, cfg, p.z, p.phi, y, c));
}
BENCHMARK(BM_IclFullPrompt)->Arg(4)->Arg(16)->Arg(32);

void BM_IclCachedQuery(benchmark::State& state) {
  const ModelConfig cfg = bench_config();
  Rng rng(1);
  const auto params = ModelParams<float>::init(cfg, rng);
  const Prompt p = make_prompt(cfg, static_cast<std::size_t>(state.range(0)));
  const Constellation c(4);
  auto cache = build_context_cache(params, cfg, p.z, p.phi);
  const RVec y = p.task.block.linearized.rightCols(1);
  for (auto _ : state) benchmark::DoNotOptimize(incremental_detect(params, cfg, cache, y, c));
}
BENCHMARK(BM_IclCachedQuery)->Arg(4)->Arg(16)->Arg(32);

void BM_IclContextCache(benchmark::State& state) {
  const ModelConfig cfg = bench_config();
  Rng rng(1);
  const auto params = ModelParams<float>::init(cfg, rng);
  const Prompt p = make_prompt(cfg, 16);
  for (auto _ : state) benchmark::DoNotOptimize(build_context_cache(params, cfg, p.z, p.phi));
}
BENCHMARK(BM_IclContextCache);

void BM_TrainStep(benchmark::State& state) {
  const ModelConfig cfg = bench_config();
  const TaskSampler sampler(cfg, TaskSpec{});
  TrainConfig train;
  train.steps = 1;
  train.batch = static_cast<std::size_t>(state.range(0));
  train.micro_batch = 8;
  train.log_interval = 0;
  Rng rng(1);
  auto params = ModelParams<float>::init(cfg, rng);
  for (auto _ : state) {
    auto result = pretrain<float>(cfg, train, sampler, params);
    benchmark::DoNotOptimize(result.losses);
  }
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_TrainStep)->Arg(16)->Arg(32)->Unit(benchmark::kMillisecond);

}  // namespace
