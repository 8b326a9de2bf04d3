#include "atomicl/signal/measurement.hpp"

#include <stdexcept>
#include <string>

namespace atomicl {

RVec measure_with_noise(const ChannelScene& scene, const CVec& s, const CVec& w) {
  if (s.size() != scene.h.cols())
    throw std::invalid_argument("measure: symbol vector has " + std::to_string(s.size()) +
                                " entries, expected " + std::to_string(scene.h.cols()));
  if (w.size() != scene.h.rows()) throw std::invalid_argument("measure: noise length mismatch");
  const CVec field = scene.h * s + scene.r + w;
  return field.cwiseAbs();
}

Measurement measure(const ChannelScene& scene, const CVec& s, Rng& rng) {
  CMat w = sample_complex_gaussian(rng, scene.h.rows(), 1, scene.noise_variance);
  Measurement m;
  m.noise = Eigen::Map<const CVec>(w.data(), w.rows());
  m.y = measure_with_noise(scene, s, m.noise);
  return m;
}

RVec linearize(const RVec& y, const ChannelScene& scene) {
  if (y.size() != scene.r.size()) throw std::invalid_argument("linearize: length mismatch");
  return y - scene.r_abs();
}

SymbolBlock gen_symbol_block(const ChannelScene& scene, const Constellation& c, std::size_t count,
                             Rng& rng) {
  if (count == 0) throw std::invalid_argument("gen_symbol_block: need at least one symbol vector");
  const auto users = static_cast<Eigen::Index>(scene.users());
  const auto cols = static_cast<Eigen::Index>(count);
  SymbolBlock block;
  block.symbols.resize(users, cols);
  block.indices.resize(static_cast<std::size_t>(users) * count);
  for (Eigen::Index k = 0; k < users; ++k) {
    for (Eigen::Index q = 0; q < cols; ++q) {
      const auto idx = static_cast<std::uint32_t>(rng.uniform_index(c.order()));
      block.indices[static_cast<std::size_t>(k * cols + q)] = idx;
      block.symbols(k, q) = c.point(idx);
    }
  }
  const RVec r_abs = scene.r_abs();
  block.raw.resize(scene.h.rows(), cols);
  block.linearized.resize(scene.h.rows(), cols);
  for (Eigen::Index q = 0; q < cols; ++q) {
    const CVec s = block.symbols.col(q);
    const RVec y = measure(scene, s, rng).y;
    block.raw.col(q) = y;
    block.linearized.col(q) = y - r_abs;
  }
  block.bits = symbols_to_bits(block.indices, static_cast<std::size_t>(users), c);
  return block;
}

}  // namespace atomicl
