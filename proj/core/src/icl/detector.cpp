#include "atomicl/icl/detector.hpp"

#include <stdexcept>
#include <string>

namespace atomicl::icl {
namespace {

IclDetection quantize(CVec soft, const Constellation& c) {
  IclDetection d;
  d.hard.resize(static_cast<std::size_t>(soft.size()));
  for (Eigen::Index k = 0; k < soft.size(); ++k) d.hard[static_cast<std::size_t>(k)] = nearest_symbol(soft(k), c);
  d.soft = std::move(soft);
  return d;
}

}  // namespace

template <typename T>
IclDetection detect(const ModelParams<T>& params, const ModelConfig& cfg, const RMat& z_lin,
                    const CMat& phi, const RVec& y_lin, const Constellation& c) {
  const TokenSeq seq = tokenize(z_lin, phi, y_lin, cfg);
  const Matrix<T> out = forward(params, cfg, seq);
  return quantize(output_symbols(out, out.rows() - 1), c);
}

template <typename T>
KvCache<T> build_context_cache(const ModelParams<T>& params, const ModelConfig& cfg, const RMat& z_lin,
                               const CMat& phi) {
  KvCache<T> cache = KvCache<T>::empty(cfg);
  const TokenSeq seq = tokenize(z_lin, phi, std::nullopt, cfg);
  if (seq.size() > 0) forward_cached(params, cfg, cache, Matrix<T>(seq.tokens.cast<T>()), true);
  return cache;
}

template <typename T>
IclDetection incremental_detect(const ModelParams<T>& params, const ModelConfig& cfg, KvCache<T>& cache,
                                const RVec& y_lin, const Constellation& c) {
  if (cache.tokens % 2 != 0 || cache.tokens > 2 * cfg.max_pairs)
    throw std::invalid_argument("incremental_detect: cache holds " + std::to_string(cache.tokens) +
                                " tokens, not a context of at most " + std::to_string(cfg.max_pairs) + " pairs");
  if (y_lin.size() != static_cast<Eigen::Index>(cfg.antennas))
    throw std::invalid_argument("incremental_detect: query length must be N=" + std::to_string(cfg.antennas));
  Matrix<T> token = Matrix<T>::Zero(1, static_cast<Eigen::Index>(cfg.token_dim()));
  token.row(0).head(y_lin.size()) = y_lin.transpose().cast<T>();
  const Matrix<T> out = forward_cached(params, cfg, cache, token, false);
  return quantize(output_symbols(out, 0), c);
}

#define ATOMICL_INSTANTIATE(T)                                                                         \
  template IclDetection detect<T>(const ModelParams<T>&, const ModelConfig&, const RMat&, const CMat&,  \
                                  const RVec&, const Constellation&);                                  \
  template KvCache<T> build_context_cache<T>(const ModelParams<T>&, const ModelConfig&, const RMat&,    \
                                             const CMat&);                                             \
  template IclDetection incremental_detect<T>(const ModelParams<T>&, const ModelConfig&, KvCache<T>&,   \
                                              const RVec&, const Constellation&);

ATOMICL_INSTANTIATE(float)
ATOMICL_INSTANTIATE(double)

#undef ATOMICL_INSTANTIATE

}  // namespace atomicl::icl
