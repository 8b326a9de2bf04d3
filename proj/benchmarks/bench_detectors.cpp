#include <benchmark/benchmark.h>

#include "atomicl/detect/classical.hpp"
#include "atomicl/signal/channel.hpp"
#include "atomicl/signal/measurement.hpp"

using namespace atomicl;

namespace {

struct Setup {
  ChannelScene scene;
  PilotBlock pilots;
  DataFrame data;
};

Setup make_setup(std::size_t users, std::size_t order) {
  Rng rng(7);
  const Constellation c(order);
  ChannelScene scene{synthesize_channel_iid(rng, 8, users), make_reference(rng, 8, 30.0, users), 0.3};
  PilotBlock pilots = gen_pilot_block(scene, c, 16, rng);
  DataFrame data = gen_data_frame(scene, c, 64, rng);
  return {std::move(scene), std::move(pilots), std::move(data)};
}

void BM_MlDetect(benchmark::State& state) {
  const auto users = static_cast<std::size_t>(state.range(0));
  const auto order = static_cast<std::size_t>(state.range(1));
  const Setup s = make_setup(users, order);
  const Constellation c(order);
  Eigen::Index q = 0;
  for (auto _ : state) {
    benchmark::DoNotOptimize(ml_detect(s.data.raw.col(q), s.scene.h, s.scene.r, c));
    q = (q + 1) % s.data.raw.cols();
  }
}
BENCHMARK(BM_MlDetect)->Args({2, 4})->Args({2, 16})->Args({4, 4})->Args({3, 16});

void BM_PgdChannel(benchmark::State& state) {
  const Setup s = make_setup(2, 4);
  PgdConfig cfg;
  cfg.max_iterations = static_cast<std::size_t>(state.range(0));
  cfg.tolerance = 0.0;
  Rng rng(1);
  const CVec d = s.scene.d();
  for (auto _ : state) benchmark::DoNotOptimize(pgd_channel_estimate(s.pilots.linearized, s.pilots.symbols, d, cfg, rng));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_PgdChannel)->Arg(100)->Arg(1000);

void BM_BgsChannel(benchmark::State& state) {
  const Setup s = make_setup(2, 4);
  BgsConfig cfg = BgsConfig::channel_defaults();
  cfg.max_iterations = static_cast<std::size_t>(state.range(0));
  cfg.tolerance = 0.0;
  Rng rng(2);
  for (auto _ : state) benchmark::DoNotOptimize(bgs_channel_estimate(s.pilots.raw, s.pilots.symbols, s.scene.r, cfg, rng));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_BgsChannel)->Arg(100)->Arg(1000);

void BM_BgsEqualizeFrame(benchmark::State& state) {
  const Setup s = make_setup(2, 4);
  const Constellation c(4);
  BgsConfig cfg = BgsConfig::equalizer_defaults();
  cfg.tolerance = 0.0;
  const BgsEqualizer eq(s.scene.h, s.scene.r, cfg);
  Rng rng(3);
  for (auto _ : state)
    for (Eigen::Index q = 0; q < s.data.raw.cols(); ++q) benchmark::DoNotOptimize(eq.equalize(s.data.raw.col(q), c, rng));
  state.SetItemsProcessed(state.iterations() * s.data.raw.cols());
}
BENCHMARK(BM_BgsEqualizeFrame);

}  // namespace
