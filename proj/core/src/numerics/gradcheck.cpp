#include "atomicl/numerics/gradcheck.hpp"

#include <cmath>
#include <stdexcept>

namespace atomicl::ad {
namespace {

double evaluate(const LossBuilder& loss) {
  Tape<double> tape;
  const Var out = loss(tape);
  const auto& v = tape.value(out);
  if (v.rows() != 1 || v.cols() != 1) throw std::invalid_argument("finite_diff_check: loss is not scalar");
  return v(0, 0);
}

}  // namespace

GradCheckReport finite_diff_check(const LossBuilder& loss, std::span<DiffTensor<double>* const> params,
                                  double step) {
  if (!(step > 0.0)) throw std::invalid_argument("finite_diff_check: step must be > 0");

  GradCheckReport report;
  {
    Tape<double> tape;
    const Var out = loss(tape);
    backward(tape, out, params);
    if (!std::isfinite(tape.value(out)(0, 0))) {
      report.finite = false;
      report.failure = "loss is non-finite at the unperturbed point";
      return report;
    }
  }

  for (std::size_t p = 0; p < params.size(); ++p) {
    DiffTensor<double>& param = *params[p];
    const Matrix<double> analytic = *param.grad;
    for (Eigen::Index i = 0; i < param.value.size(); ++i) {
      double& x = param.value.data()[i];
      const double saved = x;
      x = saved + step;
      const double up = evaluate(loss);
      x = saved - step;
      const double down = evaluate(loss);
      x = saved;
      ++report.coordinates;
      if (!std::isfinite(up) || !std::isfinite(down)) {
        report.finite = false;
        report.failure = "non-finite loss perturbing param " + std::to_string(p) + " index " +
                         std::to_string(i);
        report.worst_param = p;
        report.worst_index = i;
        return report;
      }
      const double numeric = (up - down) / (2.0 * step);
      const double a = analytic.data()[i];
      const double rel = std::abs(a - numeric) / (std::abs(a) + std::abs(numeric) + 1e-12);
      if (rel > report.max_rel_error) {
        report.max_rel_error = rel;
        report.worst_param = p;
        report.worst_index = i;
      }
    }
  }
  return report;
}

}  // namespace atomicl::ad
