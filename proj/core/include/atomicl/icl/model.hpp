#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "atomicl/icl/config.hpp"
#include "atomicl/icl/tokenizer.hpp"
#include "atomicl/numerics/autodiff.hpp"
#include "atomicl/numerics/cmat.hpp"
#include "atomicl/numerics/rng.hpp"

namespace atomicl::icl {

template <typename T>
using Matrix = ad::Matrix<T>;

/// One decoder block. Per-head projections are stacked row-wise: rows
/// [h*D_H, (h+1)*D_H) of wq/wk/wv are W^Q_h, W^K_h, W^V_h (each D_H x D_E).
template <typename T>
struct LayerParams {
  ad::DiffTensor<T> wq, wk, wv;   ///< D_E x D_E
  ad::DiffTensor<T> w_mhsa;       ///< D_E x D_E
  ad::DiffTensor<T> ln1_gain, ln1_offset;  ///< 1 x D_E
  ad::DiffTensor<T> w1;           ///< D_F x D_E
  ad::DiffTensor<T> b1;           ///< 1 x D_F
  ad::DiffTensor<T> w2;           ///< D_E x D_F
  ad::DiffTensor<T> b2;           ///< 1 x D_E
  ad::DiffTensor<T> ln2_gain, ln2_offset;  ///< 1 x D_E
};

/// All trainable weights. The complex output layer W_out (K x D_E) is held as
/// a real 2K x D_E map: rows [0, K) give Re o, rows [K, 2K) give Im o.
template <typename T>
struct ModelParams {
  ad::DiffTensor<T> embedding;    ///< D_E x D_T
  ad::DiffTensor<T> positional;   ///< (2L + 1) x D_E; empty when disabled
  std::vector<LayerParams<T>> layers;
  ad::DiffTensor<T> output;       ///< 2K x D_E

  /// Stable name -> tensor list, in checkpoint order.
  std::vector<std::pair<std::string, ad::DiffTensor<T>*>> named();
  std::vector<std::pair<std::string, const ad::DiffTensor<T>*>> named() const;
  std::vector<ad::DiffTensor<T>*> tensors();
  std::size_t parameter_count() const;

  /// Gaussian projections with variance 2 / (fan_in + fan_out), unit
  /// layer-norm gains, zero offsets and biases.
  static ModelParams init(const ModelConfig& cfg, Rng& rng);
  /// Throws std::invalid_argument if any tensor shape disagrees with cfg.
  void check_shapes(const ModelConfig& cfg) const;
  bool all_finite() const;
};

/// Raised when an activation stops being finite; names the stage.
class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Records the full model on `tape` for `batch` sequences of `seq` tokens
/// stacked row-wise in `tokens` ((batch*seq) x D_T). Returns the
/// (batch*seq) x 2K output node.
template <typename T>
ad::Var forward_tape(ad::Tape<T>& tape, ModelParams<T>& params, const ModelConfig& cfg,
                     const Matrix<T>& tokens, Eigen::Index batch, Eigen::Index seq);

/// Outputs o_1 .. o_{2P+1} as a tokens x 2K real matrix ([Re o, Im o] per
/// row). Row i is a function of tokens 0..i alone, bit for bit: appending
/// tokens never changes earlier outputs. Throws NonFiniteError naming the
/// layer if an activation is not finite.
template <typename T>
Matrix<T> forward(const ModelParams<T>& params, const ModelConfig& cfg, const TokenSeq& seq);

/// Inference over `batch` equal-length sequences stacked row-wise, without
/// recording gradients. Same finiteness checks as forward().
template <typename T>
Matrix<T> forward_batch(const ModelParams<T>& params, const ModelConfig& cfg, const Matrix<T>& tokens,
                        Eigen::Index batch, Eigen::Index seq);

/// Row `row` of a forward output as a complex K-vector.
template <typename T>
CVec output_symbols(const Matrix<T>& outputs, Eigen::Index row);

/// (1/L') sum_i ||o_{2i-1} - s_i||^2 over the measurement-token outputs;
/// `symbols` is K x L'.
template <typename T>
double mse_loss(const Matrix<T>& outputs, const CMat& symbols);

/// Keys and values of every processed context token, per layer. Head h owns
/// columns [h*D_H, (h+1)*D_H).
template <typename T>
struct KvCache {
  struct Layer {
    Matrix<T> keys;
    Matrix<T> values;
  };
  std::vector<Layer> layers;
  std::size_t tokens = 0;

  /// Empty cache shaped for `cfg`.
  static KvCache empty(const ModelConfig& cfg);
  /// Throws std::invalid_argument if the per-layer row counts disagree with
  /// `tokens` or the layer/width layout does not match cfg.
  void check(const ModelConfig& cfg) const;
};

/// Runs `tokens` (rows) through the model attending to everything already in
/// `cache` plus causally to each other. With `retain`, their keys and values
/// are appended to the cache; otherwise the cache is left untouched. Returns
/// the rows x 2K outputs.
template <typename T>
Matrix<T> forward_cached(const ModelParams<T>& params, const ModelConfig& cfg, KvCache<T>& cache,
                         const Matrix<T>& tokens, bool retain);

}  // namespace atomicl::icl
