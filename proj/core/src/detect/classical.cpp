#include "atomicl/detect/classical.hpp"

#include <cmath>
#include <limits>

namespace atomicl {
namespace {

constexpr double kDivergenceFactor = 10.0;

CMat pseudo_inverse(const CMat& m) {
  Eigen::CompleteOrthogonalDecomposition<Eigen::Matrix<cplx, Eigen::Dynamic, Eigen::Dynamic>> cod(m);
  return cod.pseudoInverse();
}

/// Unit phasor of z, with exp(j*0) for an exact zero.
inline cplx phasor(cplx z) {
  const double a = std::abs(z);
  return a > 0.0 ? z / a : cplx(1.0, 0.0);
}

// A zero tolerance runs the full iteration budget.
bool converged(double prev, double cur, double tol) {
  if (tol <= 0.0) return false;
  return std::abs(prev - cur) <= tol * prev || cur <= std::numeric_limits<double>::min();
}

void check_divergence(const std::vector<double>& trace, const char* who) {
  const double last = trace.back();
  if (!std::isfinite(last) || last > kDivergenceFactor * trace.front()) {
    throw DivergenceError(std::string(who) + ": objective diverged (" + std::to_string(last) +
                              " vs initial " + std::to_string(trace.front()) + ")",
                          trace);
  }
}

}  // namespace

void PgdConfig::validate() const {
  if (!std::isfinite(step)) throw std::invalid_argument("pgd: step must be finite");
  if (max_iterations < 1) throw std::invalid_argument("pgd: max_iterations must be >= 1");
  if (!(tolerance >= 0.0)) throw std::invalid_argument("pgd: tolerance must be >= 0");
}

void BgsConfig::validate() const {
  if (max_iterations < 1) throw std::invalid_argument("bgs: max_iterations must be >= 1");
  if (restarts < 1) throw std::invalid_argument("bgs: restarts must be >= 1");
  if (!(tolerance >= 0.0)) throw std::invalid_argument("bgs: tolerance must be >= 0");
}

double linear_channel_objective(const RMat& z_lin, const CMat& phi, const CVec& d, const CMat& h) {
  const CMat dhphi = d.asDiagonal() * (h * phi);
  return (z_lin - dhphi.real()).squaredNorm();
}

CMat linear_channel_descent_direction(const RMat& z_lin, const CMat& phi, const CVec& d, const CMat& h) {
  const CMat dhphi = d.asDiagonal() * (h * phi);
  const RMat residual = z_lin - dhphi.real();
  return d.conjugate().asDiagonal() * (residual.cast<cplx>() * phi.adjoint());
}

double magnitude_channel_objective(const RMat& z, const CMat& phi, const CVec& r, const CMat& h) {
  const CMat field = (h * phi).colwise() + r;
  return (field.cwiseAbs() - z).squaredNorm();
}

double magnitude_symbol_objective(const RVec& y, const CMat& h, const CVec& r, const CVec& s) {
  const CVec field = h * s + r;
  return (field.cwiseAbs() - y).squaredNorm();
}

EstimationResult pgd_channel_estimate(const RMat& z_lin, const CMat& phi, const CVec& d,
                                      const PgdConfig& cfg, Rng& rng) {
  cfg.validate();
  if (phi.cols() < 1) throw std::invalid_argument("pgd: need at least one pilot");
  if (z_lin.rows() != d.size() || z_lin.cols() != phi.cols())
    throw std::invalid_argument("pgd: Z~ must be N x P matching D and Phi");

  double eta = cfg.step;
  if (eta <= 0.0) {
    const double spectral = phi.rows() > 0 ? Eigen::JacobiSVD<CMat>(phi).singularValues()(0) : 0.0;
    eta = 0.5 / (spectral * spectral + 1e-12);
  }

  EstimationResult out;
  out.h = sample_complex_gaussian(rng, z_lin.rows(), phi.rows(), 1.0);
  out.trace.push_back(linear_channel_objective(z_lin, phi, d, out.h));
  for (std::size_t t = 0; t < cfg.max_iterations; ++t) {
    out.h += eta * linear_channel_descent_direction(z_lin, phi, d, out.h);
    out.trace.push_back(linear_channel_objective(z_lin, phi, d, out.h));
    ++out.iterations;
    check_divergence(out.trace, "pgd");
    if (converged(out.trace[out.trace.size() - 2], out.trace.back(), cfg.tolerance)) break;
  }
  return out;
}

EstimationResult bgs_channel_estimate(const RMat& z, const CMat& phi, const CVec& r,
                                      const BgsConfig& cfg, Rng& rng) {
  cfg.validate();
  if (phi.cols() < 1) throw std::invalid_argument("bgs: need at least one pilot");
  if (z.rows() != r.size() || z.cols() != phi.cols())
    throw std::invalid_argument("bgs: Z must be N x P matching r and Phi");

  const CMat phi_pinv = pseudo_inverse(phi);
  EstimationResult best;
  double best_obj = std::numeric_limits<double>::infinity();
  for (std::size_t start = 0; start < cfg.restarts; ++start) {
    EstimationResult run;
    run.h = sample_complex_gaussian(rng, z.rows(), phi.rows(), 1.0);
    CMat field = (run.h * phi).colwise() + r;
    run.trace.push_back((field.cwiseAbs() - z).squaredNorm());
    CMat psi(field.rows(), field.cols());
    for (std::size_t t = 0; t < cfg.max_iterations; ++t) {
      for (Eigen::Index i = 0; i < field.size(); ++i)
        psi.data()[i] = z.data()[i] * phasor(field.data()[i]);
      run.h = (psi.colwise() - r) * phi_pinv;
      field = (run.h * phi).colwise() + r;
      run.trace.push_back((field.cwiseAbs() - z).squaredNorm());
      ++run.iterations;
      check_divergence(run.trace, "bgs");
      if (converged(run.trace[run.trace.size() - 2], run.trace.back(), cfg.tolerance)) break;
    }
    if (run.trace.back() < best_obj) {
      best_obj = run.trace.back();
      best = std::move(run);
    }
  }
  return best;
}

BgsEqualizer::BgsEqualizer(CMat h, CVec r, BgsConfig cfg)
    : h_(std::move(h)), r_(std::move(r)), cfg_(cfg) {
  cfg_.validate();
  if (h_.rows() != r_.size()) throw std::invalid_argument("bgs_equalize: H rows must match r");
  h_pinv_ = pseudo_inverse(h_);
}

EqualizationResult BgsEqualizer::equalize(const RVec& y, const Constellation& c, Rng& rng) const {
  if (y.size() != h_.rows())
    throw std::invalid_argument("bgs_equalize: y has " + std::to_string(y.size()) + " entries, H has " +
                                std::to_string(h_.rows()) + " rows");
  EqualizationResult best;
  double best_obj = std::numeric_limits<double>::infinity();
  CVec psi(y.size());
  for (std::size_t start = 0; start < cfg_.restarts; ++start) {
    EqualizationResult run;
    CMat init = sample_complex_gaussian(rng, h_.cols(), 1, 1.0);
    run.soft = Eigen::Map<const CVec>(init.data(), init.rows());
    CVec field = h_ * run.soft + r_;
    run.trace.push_back((field.cwiseAbs() - y).squaredNorm());
    for (std::size_t t = 0; t < cfg_.max_iterations; ++t) {
      for (Eigen::Index n = 0; n < y.size(); ++n) psi(n) = y(n) * phasor(field(n));
      run.soft = h_pinv_ * (psi - r_);
      field = h_ * run.soft + r_;
      run.trace.push_back((field.cwiseAbs() - y).squaredNorm());
      ++run.iterations;
      check_divergence(run.trace, "bgs_equalize");
      if (converged(run.trace[run.trace.size() - 2], run.trace.back(), cfg_.tolerance)) break;
    }
    if (run.trace.back() < best_obj) {
      best_obj = run.trace.back();
      best = std::move(run);
    }
  }
  best.hard.resize(static_cast<std::size_t>(best.soft.size()));
  for (Eigen::Index k = 0; k < best.soft.size(); ++k)
    best.hard[static_cast<std::size_t>(k)] = nearest_symbol(best.soft(k), c);
  return best;
}

EqualizationResult bgs_equalize(const RVec& y, const CMat& h, const CVec& r, const BgsConfig& cfg,
                                const Constellation& c, Rng& rng) {
  return BgsEqualizer(h, r, cfg).equalize(y, c, rng);
}

std::vector<std::size_t> ml_detect(const RVec& y, const CMat& h, const CVec& r, const Constellation& c) {
  const auto users = static_cast<std::size_t>(h.cols());
  const std::size_t m = c.order();
  std::size_t candidates = 1;
  for (std::size_t k = 0; k < users; ++k) {
    if (candidates > kMlCandidateLimit / m)
      throw std::invalid_argument("ml_detect: M^K exceeds the candidate limit of 2^20");
    candidates *= m;
  }
  if (y.size() != h.rows() || r.size() != h.rows())
    throw std::invalid_argument("ml_detect: y, H and r disagree on antenna count");

  // contrib[k * m + i] = H(:, k) * point_i
  std::vector<CVec> contrib(users * m);
  for (std::size_t k = 0; k < users; ++k)
    for (std::size_t i = 0; i < m; ++i)
      contrib[k * m + i] = h.col(static_cast<Eigen::Index>(k)) * c.point(i);

  std::vector<std::size_t> digits(users, 0), best(users, 0);
  double best_obj = std::numeric_limits<double>::infinity();
  CVec field(h.rows());
  for (std::size_t cand = 0; cand < candidates; ++cand) {
    std::size_t rest = cand;
    for (std::size_t k = users; k-- > 0;) {
      digits[k] = rest % m;
      rest /= m;
    }
    field = r;
    for (std::size_t k = 0; k < users; ++k) field += contrib[k * m + digits[k]];
    const double obj = (field.cwiseAbs() - y).squaredNorm();
    if (obj < best_obj) {
      best_obj = obj;
      best = digits;
    }
  }
  return best;
}

}  // namespace atomicl
