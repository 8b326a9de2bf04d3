#include "atomicl/signal/constellation.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

namespace atomicl {
namespace {

unsigned gray_inverse(unsigned g) {
  unsigned b = 0;
  for (; g != 0; g >>= 1) b ^= g;
  return b;
}

}  // namespace

Constellation::Constellation(std::size_t order) {
  if (order != 4 && order != 16 && order != 64) {
    throw std::invalid_argument("qam_constellation: unsupported order " + std::to_string(order) +
                                " (expected 4, 16 or 64)");
  }
  bits_ = static_cast<unsigned>(std::lround(std::log2(static_cast<double>(order))));
  const unsigned axis_bits = bits_ / 2;
  const unsigned side = 1u << axis_bits;
  const double scale = 1.0 / std::sqrt(2.0 * static_cast<double>(order - 1) / 3.0);
  points_.resize(order);
  for (unsigned label = 0; label < order; ++label) {
    const unsigned i_level = gray_inverse(label >> axis_bits);
    const unsigned q_level = gray_inverse(label & (side - 1));
    const double re = 2.0 * i_level - (side - 1.0);
    const double im = 2.0 * q_level - (side - 1.0);
    points_[label] = cplx(re * scale, im * scale);
  }
}

Constellation qam_constellation(std::size_t order) { return Constellation(order); }

std::size_t nearest_symbol(cplx x, const Constellation& c) noexcept {
  std::size_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  const auto& pts = c.points();
  for (std::size_t i = 0; i < pts.size(); ++i) {
    const double d = std::norm(x - pts[i]);
    if (d < best_d) {
      best_d = d;
      best = i;
    }
  }
  return best;
}

BitMatrix symbols_to_bits(std::span<const std::uint32_t> indices, std::size_t users,
                          const Constellation& c) {
  if (users == 0 || indices.size() % users != 0) {
    throw std::invalid_argument("symbols_to_bits: index count not a multiple of user count");
  }
  const std::size_t count = indices.size() / users;
  const unsigned b = c.bits_per_symbol();
  BitMatrix out(users * b, count);
  for (std::size_t k = 0; k < users; ++k)
    for (std::size_t q = 0; q < count; ++q)
      for (unsigned j = 0; j < b; ++j) out.at(k * b + j, q) = c.bit(indices[k * count + q], j);
  return out;
}

std::size_t bit_errors(const BitMatrix& truth, const BitMatrix& estimate) {
  if (truth.rows != estimate.rows || truth.cols != estimate.cols) {
    throw std::invalid_argument("bit_error_rate: shape mismatch " + std::to_string(truth.rows) + "x" +
                                std::to_string(truth.cols) + " vs " + std::to_string(estimate.rows) +
                                "x" + std::to_string(estimate.cols));
  }
  std::size_t errors = 0;
  for (std::size_t i = 0; i < truth.bits.size(); ++i) errors += (truth.bits[i] != estimate.bits[i]);
  return errors;
}

double bit_error_rate(const BitMatrix& truth, const BitMatrix& estimate) {
  const std::size_t errors = bit_errors(truth, estimate);
  if (truth.bits.empty()) return 0.0;
  return static_cast<double>(errors) / static_cast<double>(truth.bits.size());
}

}  // namespace atomicl
