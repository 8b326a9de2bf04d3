#pragma once

#include <cstddef>
#include <optional>
#include <vector>

#include "atomicl/icl/config.hpp"
#include "atomicl/numerics/cmat.hpp"

namespace atomicl::icl {

enum class TokenRole { measurement, symbol, query };

/// Prompt flattened into real tokens, one row per token.
struct TokenSeq {
  RMat tokens;                   ///< tokens x D_T
  std::vector<TokenRole> roles;

  std::size_t size() const noexcept { return roles.size(); }
};

/// Interleaves context pairs and an optional query into tokens:
///   measurement  [z~_p, 0...]
///   symbol       [Re phi_p, Im phi_p, 0...]
///   query        [y~, 0...]            (last, when present)
/// `z_lin` is N x P and `phi` is K x P. Throws std::invalid_argument on
/// length mismatches or when P exceeds cfg.max_pairs.
TokenSeq tokenize(const RMat& z_lin, const CMat& phi, const std::optional<RVec>& query,
                  const ModelConfig& cfg);

}  // namespace atomicl::icl
