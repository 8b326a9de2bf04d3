#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "atomicl/numerics/cmat.hpp"

namespace atomicl {

/// Unit-average-power square M-QAM with Gray labelling.
///
/// Point i carries the bit label i: the high log2(M)/2 bits are the Gray
/// code of the in-phase level, the low bits the Gray code of the quadrature
/// level. Level j on an axis has amplitude (2j - (sqrt(M) - 1)) * scale.
class Constellation {
 public:
  /// M must be 4, 16 or 64; throws std::invalid_argument otherwise.
  explicit Constellation(std::size_t order);

  std::size_t order() const noexcept { return points_.size(); }
  unsigned bits_per_symbol() const noexcept { return bits_; }
  const std::vector<cplx>& points() const noexcept { return points_; }
  cplx point(std::size_t index) const { return points_.at(index); }
  /// Bit b (0 = most significant) of the label of point `index`.
  std::uint8_t bit(std::size_t index, unsigned b) const noexcept {
    return static_cast<std::uint8_t>((index >> (bits_ - 1 - b)) & 1u);
  }

 private:
  unsigned bits_;
  std::vector<cplx> points_;
};

Constellation qam_constellation(std::size_t order);

/// argmin_i |x - point_i|, lowest index on ties.
std::size_t nearest_symbol(cplx x, const Constellation& c) noexcept;

/// Row-major matrix of hard bits.
struct BitMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint8_t> bits;

  BitMatrix() = default;
  BitMatrix(std::size_t r, std::size_t c) : rows(r), cols(c), bits(r * c, 0) {}
  std::uint8_t& at(std::size_t r, std::size_t c) { return bits[r * cols + c]; }
  std::uint8_t at(std::size_t r, std::size_t c) const { return bits[r * cols + c]; }
};

/// Expands a K x count matrix of symbol indices (row-major) into a
/// (K * bits_per_symbol) x count bit matrix.
BitMatrix symbols_to_bits(std::span<const std::uint32_t> indices, std::size_t users,
                          const Constellation& c);

/// Number of differing bits. Throws std::invalid_argument on shape mismatch.
std::size_t bit_errors(const BitMatrix& truth, const BitMatrix& estimate);

/// Hamming distance over total bits, in [0, 1].
double bit_error_rate(const BitMatrix& truth, const BitMatrix& estimate);

}  // namespace atomicl
