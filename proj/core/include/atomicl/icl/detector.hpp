#pragma once

#include <cstddef>
#include <vector>

#include "atomicl/icl/model.hpp"
#include "atomicl/signal/constellation.hpp"

namespace atomicl::icl {

struct IclDetection {
  CVec soft;                      ///< o_{2P+1}
  std::vector<std::size_t> hard;  ///< nearest constellation index per user
};

/// Full-prompt detection: tokenize the P pilot pairs and the query, run the
/// whole sequence, read the last output.
template <typename T>
IclDetection detect(const ModelParams<T>& params, const ModelConfig& cfg, const RMat& z_lin,
                    const CMat& phi, const RVec& y_lin, const Constellation& c);

/// Processes the 2P context tokens of one coherence block once.
template <typename T>
KvCache<T> build_context_cache(const ModelParams<T>& params, const ModelConfig& cfg, const RMat& z_lin,
                               const CMat& phi);

/// Runs a single query token against the cached context. The query's own
/// keys and values are not kept, so later queries see the same context.
/// Throws std::invalid_argument if the cache is not a whole number of
/// context pairs for this model.
template <typename T>
IclDetection incremental_detect(const ModelParams<T>& params, const ModelConfig& cfg, KvCache<T>& cache,
                                const RVec& y_lin, const Constellation& c);

}  // namespace atomicl::icl
