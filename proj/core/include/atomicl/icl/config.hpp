#pragma once

#include <cstddef>
#include <string>

namespace atomicl::icl {

/// Shape of the decoder-only transformer and of the system it was trained for.
struct ModelConfig {
  std::size_t layers = 4;        ///< N_L
  std::size_t embed_dim = 64;    ///< D_E
  std::size_t heads = 4;         ///< N_H
  std::size_t ffn_dim = 128;     ///< D_F
  std::size_t max_pairs = 32;    ///< L, the training prompt length in pairs
  bool positional = true;        ///< learned absolute position table
  std::size_t users = 2;         ///< K
  std::size_t antennas = 8;      ///< N

  /// D_T = max(N, 2K)
  std::size_t token_dim() const noexcept { return antennas > 2 * users ? antennas : 2 * users; }
  std::size_t head_dim() const noexcept { return embed_dim / heads; }
  /// Longest token sequence the position table covers: L pairs plus one query.
  std::size_t max_tokens() const noexcept { return 2 * max_pairs + 1; }

  /// Throws std::invalid_argument naming the offending field.
  void validate() const;

  bool operator==(const ModelConfig&) const = default;
};

std::string describe(const ModelConfig& cfg);

}  // namespace atomicl::icl
