#pragma once

#include <complex>
#include <cstddef>

#include <Eigen/Dense>

#include "atomicl/numerics/rng.hpp"

namespace atomicl {

using cplx = std::complex<double>;

/// Dense row-major complex matrix. Houses H, Phi, D, and the symbol vectors.
using CMat = Eigen::Matrix<cplx, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CVec = Eigen::Matrix<cplx, Eigen::Dynamic, 1>;
/// Real measurement matrices (Z, Z-tilde) and vectors.
using RMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RVec = Eigen::Matrix<double, Eigen::Dynamic, 1>;

/// Complex product A*B. Throws std::invalid_argument on shape mismatch.
CMat complex_matmul(const CMat& a, const CMat& b);

/// i.i.d. CN(0, variance) entries; real and imaginary parts each get variance/2.
/// Throws std::invalid_argument for negative or non-finite variance.
CMat sample_complex_gaussian(Rng& rng, std::ptrdiff_t rows, std::ptrdiff_t cols, double variance);

/// True when every entry has finite real and imaginary parts.
bool all_finite(const CMat& m);

}  // namespace atomicl
