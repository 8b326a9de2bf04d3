#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "atomicl/numerics/cmat.hpp"
#include "atomicl/numerics/rng.hpp"
#include "atomicl/signal/channel.hpp"
#include "atomicl/signal/constellation.hpp"

namespace atomicl {

struct Measurement {
  RVec y;      ///< |H s + r + w|, length N
  CVec noise;  ///< the w that was drawn
};

/// y = |H s + r + w| with w ~ CN(0, sigma^2 I) drawn from `rng`.
Measurement measure(const ChannelScene& scene, const CVec& s, Rng& rng);
/// Same model with a caller-supplied noise vector.
RVec measure_with_noise(const ChannelScene& scene, const CVec& s, const CVec& w);

/// y - |r|, the receiver-side linearisation.
RVec linearize(const RVec& y, const ChannelScene& scene);

/// Symbols sent under one channel plus their raw and linearised measurements.
/// Used both for the pilot block (Phi, Z, Z-tilde) and for data frames
/// (S, Y, Y-tilde).
struct SymbolBlock {
  CMat symbols;                       ///< K x count
  std::vector<std::uint32_t> indices; ///< K x count, row-major constellation indices
  RMat raw;                           ///< N x count, entrywise >= 0
  RMat linearized;                    ///< N x count, raw - |r| per column
  BitMatrix bits;                     ///< (K log2 M) x count

  std::size_t count() const noexcept { return static_cast<std::size_t>(symbols.cols()); }
};

using PilotBlock = SymbolBlock;
using DataFrame = SymbolBlock;

/// Draws `count` symbol vectors uniformly from the constellation (all of
/// Phi first, row by row), then measures each column with fresh noise in
/// column order.
SymbolBlock gen_symbol_block(const ChannelScene& scene, const Constellation& c, std::size_t count,
                             Rng& rng);

inline PilotBlock gen_pilot_block(const ChannelScene& scene, const Constellation& c, std::size_t pilots,
                                  Rng& rng) {
  return gen_symbol_block(scene, c, pilots, rng);
}

inline DataFrame gen_data_frame(const ChannelScene& scene, const Constellation& c, std::size_t count,
                                Rng& rng) {
  return gen_symbol_block(scene, c, count, rng);
}

}  // namespace atomicl
