#include <benchmark/benchmark.h>

#include "atomicl/numerics/allocator.hpp"

int main(int argc, char** argv) {
  atomicl::retain_heap_memory();
  benchmark::Initialize(&argc, argv);
  if (benchmark::ReportUnrecognizedArguments(argc, argv)) return 1;
  benchmark::RunSpecifiedBenchmarks();
  benchmark::Shutdown();
  return 0;
}
