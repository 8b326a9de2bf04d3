#pragma once

#include <cstddef>
#include <vector>

#include "atomicl/numerics/cmat.hpp"
#include "atomicl/numerics/rng.hpp"

namespace atomicl {

/// Distribution of the multipath sum h_{n,k} = sum_l rho_{nkl} exp(j phi_{nkl}).
/// Polarisation and dipole projections are folded into the gains rho.
struct MultipathSpec {
  enum class GainLaw { fixed, rayleigh };
  enum class PhaseLaw { fixed, uniform };

  /// L_k; a single entry applies to every user.
  std::vector<std::size_t> paths_per_user{8};
  GainLaw gain_law = GainLaw::rayleigh;
  /// fixed: rho_l per path. rayleigh: E[rho_l^2] per path. A single entry
  /// applies to every path.
  std::vector<double> gains{1.0 / 8.0};
  PhaseLaw phase_law = PhaseLaw::uniform;
  /// fixed: phi_l per path, wrapped into [0, 2 pi).
  std::vector<double> phases{};

  /// Throws std::invalid_argument for empty path lists, zero paths or
  /// negative gains.
  void validate(std::size_t users) const;
  /// sum_l E[rho_l^2] for user k.
  double mean_power(std::size_t user) const;
};

/// Wraps an angle into [0, 2 pi).
double wrap_phase(double radians) noexcept;

CMat synthesize_channel_multipath(Rng& rng, std::size_t antennas, std::size_t users,
                                  const MultipathSpec& spec);

/// i.i.d. CN(0, variance) channel entries.
CMat synthesize_channel_iid(Rng& rng, std::size_t antennas, std::size_t users, double variance = 1.0);

/// LO contribution with |r_n| = sqrt(K) * 10^(lo_gain_db / 20) and i.i.d.
/// uniform phases.
CVec make_reference(Rng& rng, std::size_t antennas, double lo_gain_db, std::size_t users);

/// Ground truth of one coherence block.
struct ChannelScene {
  CMat h;                      ///< N x K effective channel
  CVec r;                      ///< LO contribution, length N
  double noise_variance = 0.0; ///< per-antenna complex noise variance

  std::size_t antennas() const noexcept { return static_cast<std::size_t>(h.rows()); }
  std::size_t users() const noexcept { return static_cast<std::size_t>(h.cols()); }
  /// Diagonal of D, exp(-j angle(r_n)).
  CVec d() const;
  RVec r_abs() const { return r.cwiseAbs(); }
  /// Throws std::invalid_argument if shapes disagree, sigma^2 < 0 or H is not finite.
  void validate() const;
};

/// SNR = 1 / sigma^2 for unit-power symbols and unit-variance channels.
double noise_variance_from_snr_db(double snr_db) noexcept;

}  // namespace atomicl
