#include "atomicl/numerics/cmat.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace atomicl {

CMat complex_matmul(const CMat& a, const CMat& b) {
  if (a.cols() != b.rows()) {
    throw std::invalid_argument("complex_matmul: " + std::to_string(a.rows()) + "x" +
                                std::to_string(a.cols()) + " times " + std::to_string(b.rows()) +
                                "x" + std::to_string(b.cols()));
  }
  CMat out = a * b;
  return out;
}

CMat sample_complex_gaussian(Rng& rng, std::ptrdiff_t rows, std::ptrdiff_t cols, double variance) {
  if (!(variance >= 0.0) || !std::isfinite(variance)) {
    throw std::invalid_argument("sample_complex_gaussian: variance must be finite and >= 0");
  }
  if (rows < 0 || cols < 0) throw std::invalid_argument("sample_complex_gaussian: negative shape");
  CMat out(rows, cols);
  if (variance == 0.0) {
    out.setZero();
    return out;
  }
  const double sd = std::sqrt(variance / 2.0);
  for (Eigen::Index i = 0; i < out.size(); ++i) {
    const double re = rng.normal();
    const double im = rng.normal();
    out.data()[i] = cplx(sd * re, sd * im);
  }
  return out;
}

bool all_finite(const CMat& m) {
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    const cplx v = m.data()[i];
    if (!std::isfinite(v.real()) || !std::isfinite(v.imag())) return false;
  }
  return true;
}

}  // namespace atomicl
