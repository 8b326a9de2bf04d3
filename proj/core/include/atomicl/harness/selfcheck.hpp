#pragma once

#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

namespace atomicl::harness {

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
};

/// Finite-difference certification of every differentiable primitive and of
/// the composed transformer + MSE loss at toy shapes, in double precision.
std::vector<CheckResult> gradcheck_suite(std::uint64_t seed);

/// Definitional cases and oracle comparisons that need no trained model.
std::vector<CheckResult> selftest_suite(std::uint64_t seed);

/// One "PASS name  detail" line per result; returns the number of failures.
std::size_t report_checks(std::ostream& out, const std::vector<CheckResult>& results);

}  // namespace atomicl::harness
