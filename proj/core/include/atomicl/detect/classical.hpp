#pragma once

// Two-step baselines: estimate H from the pilot block, then equalise each
// data vector on the magnitude model and quantise to the constellation.

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "atomicl/numerics/cmat.hpp"
#include "atomicl/numerics/rng.hpp"
#include "atomicl/signal/constellation.hpp"

namespace atomicl {

/// Thrown when the objective grows to 10x its initial value.
class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(const std::string& what, std::vector<double> trace)
      : std::runtime_error(what), trace_(std::move(trace)) {}
  const std::vector<double>& trace() const noexcept { return trace_; }

 private:
  std::vector<double> trace_;
};

struct PgdConfig {
  /// <= 0 selects 0.5 / (||Phi||_2^2 + 1e-12).
  double step = 0.0;
  std::size_t max_iterations = 2000;
  /// Stop when |f_{t-1} - f_t| <= tolerance * f_{t-1}; 0 never stops early.
  double tolerance = 1e-8;

  void validate() const;
};

struct BgsConfig {
  std::size_t max_iterations = 1000;
  double tolerance = 1e-8;  ///< same rule as PgdConfig::tolerance
  std::size_t restarts = 1;

  void validate() const;
  static BgsConfig channel_defaults() { return {1000, 1e-8, 1}; }
  static BgsConfig equalizer_defaults() { return {200, 1e-8, 4}; }
};

struct EstimationResult {
  CMat h;                         ///< N x K
  std::vector<double> trace;      ///< objective before iterating, then after each iteration
  std::size_t iterations = 0;
};

struct EqualizationResult {
  CVec soft;                       ///< relaxed estimate s*, length K
  std::vector<std::size_t> hard;   ///< nearest constellation index per user
  std::vector<double> trace;
  std::size_t iterations = 0;
};

/// ||Z~ - Re{D H Phi}||_F^2
double linear_channel_objective(const RMat& z_lin, const CMat& phi, const CVec& d, const CMat& h);
/// The gradient step direction D^H (Z~ - Re{D H Phi}) Phi^H, which is minus
/// half the real-coordinate gradient of the linear channel objective.
CMat linear_channel_descent_direction(const RMat& z_lin, const CMat& phi, const CVec& d, const CMat& h);
/// ||abs(H Phi + r 1^T) - Z||_F^2
double magnitude_channel_objective(const RMat& z, const CMat& phi, const CVec& r, const CMat& h);
/// ||abs(H s + r) - y||_2^2
double magnitude_symbol_objective(const RVec& y, const CMat& h, const CVec& r, const CVec& s);

/// Gradient descent on the linearised least squares, started from a CN(0, 1)
/// draw: H <- H + eta D^H (Z~ - Re{D H Phi}) Phi^H.
EstimationResult pgd_channel_estimate(const RMat& z_lin, const CMat& phi, const CVec& d,
                                      const PgdConfig& cfg, Rng& rng);

/// Biased Gerchberg-Saxton on the magnitude model. Alternates
///   Psi <- Z .* exp(j angle(H Phi + r 1^T))
///   H   <- (Psi - r 1^T) Phi^+
/// from `restarts` CN(0, 1) starts and keeps the lowest final objective.
EstimationResult bgs_channel_estimate(const RMat& z, const CMat& phi, const CVec& r,
                                      const BgsConfig& cfg, Rng& rng);

/// Equaliser for one channel estimate; the pseudo-inverse of H is factored
/// once and reused for every data vector of the frame.
class BgsEqualizer {
 public:
  BgsEqualizer(CMat h, CVec r, BgsConfig cfg);

  /// Alternates psi <- y .* exp(j angle(H s + r)), s <- H^+ (psi - r), then
  /// quantises each entry of s with nearest_symbol.
  EqualizationResult equalize(const RVec& y, const Constellation& c, Rng& rng) const;

 private:
  CMat h_;
  CVec r_;
  CMat h_pinv_;
  BgsConfig cfg_;
};

EqualizationResult bgs_equalize(const RVec& y, const CMat& h, const CVec& r, const BgsConfig& cfg,
                                const Constellation& c, Rng& rng);

/// Largest candidate set ml_detect accepts.
inline constexpr std::size_t kMlCandidateLimit = std::size_t{1} << 20;

/// Exhaustive argmin over S^K of ||abs(H s + r) - y||^2. Candidates are
/// enumerated lexicographically with user 0 as the most significant digit;
/// the first minimiser wins. Throws std::invalid_argument if M^K exceeds
/// kMlCandidateLimit.
std::vector<std::size_t> ml_detect(const RVec& y, const CMat& h, const CVec& r, const Constellation& c);

}  // namespace atomicl
