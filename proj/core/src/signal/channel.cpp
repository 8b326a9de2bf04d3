#include "atomicl/signal/channel.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

namespace atomicl {
namespace {

template <typename V>
const typename V::value_type& broadcast(const V& v, std::size_t i) {
  return v.size() == 1 ? v[0] : v.at(i);
}

}  // namespace

double wrap_phase(double radians) noexcept {
  constexpr double two_pi = 2.0 * std::numbers::pi;
  double w = std::fmod(radians, two_pi);
  if (w < 0.0) w += two_pi;
  if (w >= two_pi) w = 0.0;
  return w;
}

void MultipathSpec::validate(std::size_t users) const {
  if (paths_per_user.empty()) throw std::invalid_argument("multipath: paths_per_user is empty");
  if (paths_per_user.size() != 1 && paths_per_user.size() != users) {
    throw std::invalid_argument("multipath: paths_per_user needs 1 or " + std::to_string(users) +
                                " entries");
  }
  std::size_t max_paths = 0;
  for (std::size_t l : paths_per_user) {
    if (l == 0) throw std::invalid_argument("multipath: every user needs at least one path");
    max_paths = std::max(max_paths, l);
  }
  if (gains.empty()) throw std::invalid_argument("multipath: gains is empty");
  if (gains.size() != 1 && gains.size() < max_paths)
    throw std::invalid_argument("multipath: fewer gains than paths");
  for (double g : gains)
    if (!(g >= 0.0) || !std::isfinite(g)) throw std::invalid_argument("multipath: gains must be >= 0");
  if (phase_law == PhaseLaw::fixed && phases.size() != 1 && phases.size() < max_paths)
    throw std::invalid_argument("multipath: fewer fixed phases than paths");
}

double MultipathSpec::mean_power(std::size_t user) const {
  const std::size_t paths = broadcast(paths_per_user, user);
  double total = 0.0;
  for (std::size_t l = 0; l < paths; ++l) {
    const double g = broadcast(gains, l);
    total += gain_law == GainLaw::fixed ? g * g : g;
  }
  return total;
}

CMat synthesize_channel_multipath(Rng& rng, std::size_t antennas, std::size_t users,
                                  const MultipathSpec& spec) {
  spec.validate(users);
  CMat h = CMat::Zero(static_cast<Eigen::Index>(antennas), static_cast<Eigen::Index>(users));
  for (std::size_t n = 0; n < antennas; ++n) {
    for (std::size_t k = 0; k < users; ++k) {
      const std::size_t paths = broadcast(spec.paths_per_user, k);
      cplx sum(0.0, 0.0);
      for (std::size_t l = 0; l < paths; ++l) {
        double rho = broadcast(spec.gains, l);
        if (spec.gain_law == MultipathSpec::GainLaw::rayleigh) {
          double u;
          do {
            u = rng.uniform();
          } while (u <= 0.0);
          rho = std::sqrt(-rho * std::log(u));
        }
        const double phi = spec.phase_law == MultipathSpec::PhaseLaw::uniform
                               ? 2.0 * std::numbers::pi * rng.uniform()
                               : wrap_phase(broadcast(spec.phases, l));
        sum += std::polar(rho, phi);
      }
      h(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(k)) = sum;
    }
  }
  return h;
}

CMat synthesize_channel_iid(Rng& rng, std::size_t antennas, std::size_t users, double variance) {
  return sample_complex_gaussian(rng, static_cast<std::ptrdiff_t>(antennas),
                                 static_cast<std::ptrdiff_t>(users), variance);
}

CVec make_reference(Rng& rng, std::size_t antennas, double lo_gain_db, std::size_t users) {
  if (antennas == 0) throw std::invalid_argument("make_reference: need at least one antenna");
  const double magnitude = std::sqrt(static_cast<double>(users)) * std::pow(10.0, lo_gain_db / 20.0);
  CVec r(static_cast<Eigen::Index>(antennas));
  for (Eigen::Index n = 0; n < r.size(); ++n)
    r(n) = std::polar(magnitude, 2.0 * std::numbers::pi * rng.uniform());
  return r;
}

CVec ChannelScene::d() const {
  CVec out(r.size());
  for (Eigen::Index n = 0; n < r.size(); ++n) out(n) = std::polar(1.0, -std::arg(r(n)));
  return out;
}

void ChannelScene::validate() const {
  if (h.rows() != r.size())
    throw std::invalid_argument("scene: H has " + std::to_string(h.rows()) + " rows but r has " +
                                std::to_string(r.size()) + " entries");
  if (!(noise_variance >= 0.0)) throw std::invalid_argument("scene: noise variance must be >= 0");
  if (!all_finite(h)) throw std::invalid_argument("scene: H has non-finite entries");
}

double noise_variance_from_snr_db(double snr_db) noexcept { return std::pow(10.0, -snr_db / 10.0); }

}  // namespace atomicl
