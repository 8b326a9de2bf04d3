#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string>

#include "atomicl/numerics/autodiff.hpp"

namespace atomicl::ad {

/// Records a scalar loss on the given tape, reading the parameters through
/// `Tape::parameter`. Called once for the analytic pass and twice per
/// coordinate for the central differences.
using LossBuilder = std::function<Var(Tape<double>&)>;

struct GradCheckReport {
  /// max over coordinates of |analytic - numeric| / (|analytic| + |numeric| + 1e-12)
  double max_rel_error = 0.0;
  std::size_t worst_param = 0;
  Eigen::Index worst_index = 0;
  std::size_t coordinates = 0;
  /// False when the loss evaluated to a non-finite value; `failure` then
  /// names the parameter and flat index being perturbed.
  bool finite = true;
  std::string failure;

  bool passed(double tol) const { return finite && max_rel_error < tol; }
};

/// Compares reverse-mode gradients against central differences
/// (f(x + h) - f(x - h)) / 2h for every coordinate of every parameter.
/// Throws std::invalid_argument if step <= 0.
GradCheckReport finite_diff_check(const LossBuilder& loss, std::span<DiffTensor<double>* const> params,
                                  double step);

}  // namespace atomicl::ad
