#include "atomicl/icl/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace atomicl::icl {
namespace {

constexpr double kLayerNormEps = 1e-5;
constexpr double kPositionalStd = 0.02;

template <typename T>
ad::DiffTensor<T> gaussian(Rng& rng, std::size_t rows, std::size_t cols, double sd) {
  Matrix<T> m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(sd * rng.normal());
  return ad::DiffTensor<T>(std::move(m));
}

template <typename T>
ad::DiffTensor<T> xavier(Rng& rng, std::size_t out, std::size_t in) {
  return gaussian<T>(rng, out, in, std::sqrt(2.0 / static_cast<double>(in + out)));
}

template <typename T>
ad::DiffTensor<T> filled(std::size_t rows, std::size_t cols, T v) {
  return ad::DiffTensor<T>(
      Matrix<T>::Constant(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols), v));
}

template <typename T, typename Self, typename Out>
void collect(Self& self, Out& out) {
  out.emplace_back("embedding", &self.embedding);
  if (self.positional.value.size() != 0) out.emplace_back("positional", &self.positional);
  for (std::size_t l = 0; l < self.layers.size(); ++l) {
    auto& L = self.layers[l];
    const std::string p = "layer" + std::to_string(l) + ".";
    out.emplace_back(p + "wq", &L.wq);
    out.emplace_back(p + "wk", &L.wk);
    out.emplace_back(p + "wv", &L.wv);
    out.emplace_back(p + "w_mhsa", &L.w_mhsa);
    out.emplace_back(p + "ln1_gain", &L.ln1_gain);
    out.emplace_back(p + "ln1_offset", &L.ln1_offset);
    out.emplace_back(p + "w1", &L.w1);
    out.emplace_back(p + "b1", &L.b1);
    out.emplace_back(p + "w2", &L.w2);
    out.emplace_back(p + "b2", &L.b2);
    out.emplace_back(p + "ln2_gain", &L.ln2_gain);
    out.emplace_back(p + "ln2_offset", &L.ln2_offset);
  }
  out.emplace_back("output", &self.output);
}

/// Shared graph for training (leaves are parameters) and inference (leaves
/// are constants).
template <typename T, typename Leaf>
ad::Var build_graph(ad::Tape<T>& tape, const ModelParams<T>& params, const ModelConfig& cfg,
                    const Matrix<T>& tokens, Eigen::Index batch, Eigen::Index seq, Leaf&& leaf,
                    bool check_finite) {
  if (tokens.rows() != batch * seq || tokens.cols() != static_cast<Eigen::Index>(cfg.token_dim()))
    throw std::invalid_argument("forward: tokens must be (batch*seq) x D_T=" +
                                std::to_string(cfg.token_dim()));
  if (seq > static_cast<Eigen::Index>(cfg.max_tokens()))
    throw std::invalid_argument("forward: " + std::to_string(seq) + " tokens exceed the model's " +
                                std::to_string(cfg.max_tokens()));
  auto finite = [&](ad::Var v, const std::string& where) {
    if (check_finite && !tape.value(v).allFinite()) throw NonFiniteError("non-finite activation at " + where);
  };

  const T eps = static_cast<T>(kLayerNormEps);
  ad::Var x = ad::matmul_nt(tape, tape.constant(tokens), leaf(params.embedding));
  if (cfg.positional) {
    std::vector<Eigen::Index> pos(static_cast<std::size_t>(batch * seq));
    for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = static_cast<Eigen::Index>(i) % seq;
    x = ad::add(tape, x, ad::gather_rows(tape, leaf(params.positional), std::move(pos)));
  }
  finite(x, "embedding");
  const auto heads = static_cast<Eigen::Index>(cfg.heads);
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    const auto& L = params.layers[l];
    const ad::Var q = ad::matmul_nt(tape, x, leaf(L.wq));
    const ad::Var k = ad::matmul_nt(tape, x, leaf(L.wk));
    const ad::Var v = ad::matmul_nt(tape, x, leaf(L.wv));
    const ad::Var attn = ad::matmul_nt(tape, ad::causal_attention(tape, q, k, v, batch, seq, heads),
                                       leaf(L.w_mhsa));
    const ad::Var mid = ad::layer_norm(tape, ad::add(tape, attn, x), leaf(L.ln1_gain), leaf(L.ln1_offset), eps);
    finite(mid, "layer " + std::to_string(l) + " attention");
    const ad::Var hidden = ad::gelu(tape, ad::add_row(tape, ad::matmul_nt(tape, mid, leaf(L.w1)), leaf(L.b1)));
    const ad::Var ffn = ad::add_row(tape, ad::matmul_nt(tape, hidden, leaf(L.w2)), leaf(L.b2));
    x = ad::layer_norm(tape, ad::add(tape, ffn, mid), leaf(L.ln2_gain), leaf(L.ln2_offset), eps);
    finite(x, "layer " + std::to_string(l) + " feed-forward");
  }
  const ad::Var out = ad::matmul_nt(tape, x, leaf(params.output));
  finite(out, "output head");
  return out;
}

template <typename T>
void layer_norm_rows(Matrix<T>& x, const Matrix<T>& gain, const Matrix<T>& offset) {
  const T eps = static_cast<T>(kLayerNormEps);
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const T mean = x.row(r).mean();
    const T var = (x.row(r).array() - mean).square().mean();
    const T inv = T(1) / std::sqrt(var + eps);
    x.row(r) = (((x.row(r).array() - mean) * inv) * gain.row(0).array() + offset.row(0).array()).matrix();
  }
}

// Row by row, so the vectorised and scalar-tail elements of a row do not
// depend on how many rows are stacked.
template <typename T>
void gelu_inplace(Matrix<T>& x) {
  const T inv_sqrt2 = T(0.70710678118654752440);
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    auto a = x.row(r).array();
    a = T(0.5) * a * (T(1) + (a * inv_sqrt2).erf());
  }
}

// x W^T with every output entry computed by the same kernel whatever the row
// count, so a row's result never depends on the rows stacked below it.
template <typename T>
Matrix<T> linear(const Matrix<T>& x, const Matrix<T>& w) {
  Matrix<T> out(x.rows(), w.rows());
  out.noalias() = x.lazyProduct(w.transpose());
  return out;
}

}  // namespace

template <typename T>
std::vector<std::pair<std::string, ad::DiffTensor<T>*>> ModelParams<T>::named() {
  std::vector<std::pair<std::string, ad::DiffTensor<T>*>> out;
  collect<T>(*this, out);
  return out;
}

template <typename T>
std::vector<std::pair<std::string, const ad::DiffTensor<T>*>> ModelParams<T>::named() const {
  std::vector<std::pair<std::string, const ad::DiffTensor<T>*>> out;
  collect<T>(*this, out);
  return out;
}

template <typename T>
std::vector<ad::DiffTensor<T>*> ModelParams<T>::tensors() {
  std::vector<ad::DiffTensor<T>*> out;
  for (auto& [name, t] : named()) out.push_back(t);
  return out;
}

template <typename T>
std::size_t ModelParams<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : named()) n += static_cast<std::size_t>(t->value.size());
  return n;
}

template <typename T>
ModelParams<T> ModelParams<T>::init(const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  const std::size_t de = cfg.embed_dim, df = cfg.ffn_dim;
  ModelParams p;
  p.embedding = xavier<T>(rng, de, cfg.token_dim());
  if (cfg.positional) p.positional = gaussian<T>(rng, cfg.max_tokens(), de, kPositionalStd);
  p.layers.resize(cfg.layers);
  for (auto& L : p.layers) {
    L.wq = xavier<T>(rng, de, de);
    L.wk = xavier<T>(rng, de, de);
    L.wv = xavier<T>(rng, de, de);
    L.w_mhsa = xavier<T>(rng, de, de);
    L.ln1_gain = filled<T>(1, de, T(1));
    L.ln1_offset = filled<T>(1, de, T(0));
    L.w1 = xavier<T>(rng, df, de);
    L.b1 = filled<T>(1, df, T(0));
    L.w2 = xavier<T>(rng, de, df);
    L.b2 = filled<T>(1, de, T(0));
    L.ln2_gain = filled<T>(1, de, T(1));
    L.ln2_offset = filled<T>(1, de, T(0));
  }
  p.output = xavier<T>(rng, 2 * cfg.users, de);
  return p;
}

template <typename T>
void ModelParams<T>::check_shapes(const ModelConfig& cfg) const {
  const auto de = static_cast<Eigen::Index>(cfg.embed_dim);
  const auto df = static_cast<Eigen::Index>(cfg.ffn_dim);
  auto expect = [](const ad::DiffTensor<T>& t, Eigen::Index r, Eigen::Index c, const std::string& name) {
    if (t.value.rows() != r || t.value.cols() != c)
      throw std::invalid_argument("model tensor " + name + " is " + std::to_string(t.value.rows()) + "x" +
                                  std::to_string(t.value.cols()) + ", expected " + std::to_string(r) +
                                  "x" + std::to_string(c));
  };
  expect(embedding, de, static_cast<Eigen::Index>(cfg.token_dim()), "embedding");
  if (cfg.positional) expect(positional, static_cast<Eigen::Index>(cfg.max_tokens()), de, "positional");
  if (layers.size() != cfg.layers)
    throw std::invalid_argument("model has " + std::to_string(layers.size()) + " layers, config says " +
                                std::to_string(cfg.layers));
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& L = layers[l];
    const std::string p = "layer" + std::to_string(l) + ".";
    expect(L.wq, de, de, p + "wq");
    expect(L.wk, de, de, p + "wk");
    expect(L.wv, de, de, p + "wv");
    expect(L.w_mhsa, de, de, p + "w_mhsa");
    expect(L.ln1_gain, 1, de, p + "ln1_gain");
    expect(L.ln1_offset, 1, de, p + "ln1_offset");
    expect(L.w1, df, de, p + "w1");
    expect(L.b1, 1, df, p + "b1");
    expect(L.w2, de, df, p + "w2");
    expect(L.b2, 1, de, p + "b2");
    expect(L.ln2_gain, 1, de, p + "ln2_gain");
    expect(L.ln2_offset, 1, de, p + "ln2_offset");
  }
  expect(output, static_cast<Eigen::Index>(2 * cfg.users), de, "output");
}

template <typename T>
bool ModelParams<T>::all_finite() const {
  for (const auto& [name, t] : named())
    if (!t->value.allFinite()) return false;
  return true;
}

template <typename T>
ad::Var forward_tape(ad::Tape<T>& tape, ModelParams<T>& params, const ModelConfig& cfg,
                     const Matrix<T>& tokens, Eigen::Index batch, Eigen::Index seq) {
  return build_graph(tape, params, cfg, tokens, batch, seq,
                     [&tape](const ad::DiffTensor<T>& p) {
                       return tape.parameter(const_cast<ad::DiffTensor<T>&>(p));
                     },
                     false);
}

template <typename T>
Matrix<T> forward(const ModelParams<T>& params, const ModelConfig& cfg, const TokenSeq& seq) {
  if (seq.tokens.cols() != static_cast<Eigen::Index>(cfg.token_dim()))
    throw std::invalid_argument("forward: token width must be D_T=" + std::to_string(cfg.token_dim()));
  if (seq.size() > cfg.max_tokens())
    throw std::invalid_argument("forward: " + std::to_string(seq.size()) + " tokens exceed the model's " +
                                std::to_string(cfg.max_tokens()));
  KvCache<T> cache = KvCache<T>::empty(cfg);
  return forward_cached(params, cfg, cache, Matrix<T>(seq.tokens.cast<T>()), false);
}

template <typename T>
Matrix<T> forward_batch(const ModelParams<T>& params, const ModelConfig& cfg, const Matrix<T>& tokens,
                        Eigen::Index batch, Eigen::Index seq) {
  ad::Tape<T> tape;
  const ad::Var out = build_graph(
      tape, params, cfg, tokens, batch, seq, [&tape](const ad::DiffTensor<T>& p) { return tape.constant(p.value); },
      true);
  return tape.value(out);
}

template <typename T>
CVec output_symbols(const Matrix<T>& outputs, Eigen::Index row) {
  const Eigen::Index k = outputs.cols() / 2;
  CVec s(k);
  for (Eigen::Index i = 0; i < k; ++i)
    s(i) = cplx(static_cast<double>(outputs(row, i)), static_cast<double>(outputs(row, k + i)));
  return s;
}

template <typename T>
double mse_loss(const Matrix<T>& outputs, const CMat& symbols) {
  const Eigen::Index count = symbols.cols();
  if (count == 0) throw std::invalid_argument("mse_loss: no target symbols");
  if (outputs.cols() != 2 * symbols.rows() || outputs.rows() < 2 * count - 1)
    throw std::invalid_argument("mse_loss: outputs do not cover the requested targets");
  double total = 0.0;
  for (Eigen::Index i = 0; i < count; ++i)
    total += (output_symbols(outputs, 2 * i) - symbols.col(i)).squaredNorm();
  return total / static_cast<double>(count);
}

template <typename T>
KvCache<T> KvCache<T>::empty(const ModelConfig& cfg) {
  KvCache c;
  c.layers.resize(cfg.layers);
  for (auto& l : c.layers) {
    l.keys.resize(0, static_cast<Eigen::Index>(cfg.embed_dim));
    l.values.resize(0, static_cast<Eigen::Index>(cfg.embed_dim));
  }
  return c;
}

template <typename T>
void KvCache<T>::check(const ModelConfig& cfg) const {
  if (layers.size() != cfg.layers)
    throw std::invalid_argument("kv cache has " + std::to_string(layers.size()) + " layers, model has " +
                                std::to_string(cfg.layers));
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& L = layers[l];
    if (L.keys.rows() != static_cast<Eigen::Index>(tokens) || L.values.rows() != L.keys.rows() ||
        L.keys.cols() != static_cast<Eigen::Index>(cfg.embed_dim) || L.values.cols() != L.keys.cols())
      throw std::invalid_argument("kv cache layer " + std::to_string(l) + " does not hold " +
                                  std::to_string(tokens) + " rows of width " + std::to_string(cfg.embed_dim));
  }
}

template <typename T>
Matrix<T> forward_cached(const ModelParams<T>& params, const ModelConfig& cfg, KvCache<T>& cache,
                         const Matrix<T>& tokens, bool retain) {
  cache.check(cfg);
  if (tokens.cols() != static_cast<Eigen::Index>(cfg.token_dim()))
    throw std::invalid_argument("forward_cached: token width must be D_T=" + std::to_string(cfg.token_dim()));
  const Eigen::Index fresh = tokens.rows();
  const auto past = static_cast<Eigen::Index>(cache.tokens);
  if (static_cast<std::size_t>(past + fresh) > cfg.max_tokens())
    throw std::invalid_argument("forward_cached: sequence would exceed " + std::to_string(cfg.max_tokens()) +
                                " tokens");

  Matrix<T> x = linear(tokens, params.embedding.value);
  if (cfg.positional) x += params.positional.value.middleRows(past, fresh);

  const auto heads = static_cast<Eigen::Index>(cfg.heads);
  const Eigen::Index dh = static_cast<Eigen::Index>(cfg.head_dim());
  const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dh));
  Matrix<T> attn(fresh, x.cols());
  Eigen::Matrix<T, 1, Eigen::Dynamic> scores(past + fresh);
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    const auto& L = params.layers[l];
    auto& C = cache.layers[l];
    const Matrix<T> q = linear(x, L.wq.value);
    const Matrix<T> k = linear(x, L.wk.value);
    const Matrix<T> v = linear(x, L.wv.value);
    const Matrix<T>& ck = C.keys;
    const Matrix<T>& cv = C.values;
    // Token i attends to the cached tokens and fresh tokens 0..i. Scores and
    // the weighted value sum are accumulated key by key so row i sees exactly
    // the same operations however many tokens follow it.
    for (Eigen::Index i = 0; i < fresh; ++i) {
      const Eigen::Index len = past + i + 1;
      for (Eigen::Index h = 0; h < heads; ++h) {
        const auto qh = q.row(i).segment(h * dh, dh);
        auto key = [&](Eigen::Index j) {
          return j < past ? ck.row(j).segment(h * dh, dh) : k.row(j - past).segment(h * dh, dh);
        };
        auto value = [&](Eigen::Index j) {
          return j < past ? cv.row(j).segment(h * dh, dh) : v.row(j - past).segment(h * dh, dh);
        };
        T mx = -std::numeric_limits<T>::infinity();
        for (Eigen::Index j = 0; j < len; ++j) {
          scores(j) = qh.dot(key(j)) * inv_sqrt;
          mx = std::max(mx, scores(j));
        }
        T z = 0;
        for (Eigen::Index j = 0; j < len; ++j) {
          scores(j) = std::exp(scores(j) - mx);
          z += scores(j);
        }
        auto out = attn.row(i).segment(h * dh, dh);
        out.setZero();
        for (Eigen::Index j = 0; j < len; ++j) out += (scores(j) / z) * value(j);
      }
    }
    Matrix<T> mid = linear(attn, L.w_mhsa.value) + x;
    layer_norm_rows(mid, L.ln1_gain.value, L.ln1_offset.value);
    Matrix<T> hidden = linear(mid, L.w1.value).rowwise() + L.b1.value.row(0);
    gelu_inplace(hidden);
    x = (linear(hidden, L.w2.value).rowwise() + L.b2.value.row(0)) + mid;
    layer_norm_rows(x, L.ln2_gain.value, L.ln2_offset.value);
    if (!x.allFinite()) throw NonFiniteError("non-finite activation at layer " + std::to_string(l));
    if (retain) {
      C.keys.conservativeResize(past + fresh, Eigen::NoChange);
      C.values.conservativeResize(past + fresh, Eigen::NoChange);
      C.keys.bottomRows(fresh) = k;
      C.values.bottomRows(fresh) = v;
    }
  }
  if (retain) cache.tokens += static_cast<std::size_t>(fresh);
  Matrix<T> out = linear(x, params.output.value);
  if (!out.allFinite()) throw NonFiniteError("non-finite activation at output head");
  return out;
}

#define ATOMICL_INSTANTIATE(T)                                                                     \
  template struct ModelParams<T>;                                                                  \
  template struct KvCache<T>;                                                                      \
  template ad::Var forward_tape<T>(ad::Tape<T>&, ModelParams<T>&, const ModelConfig&,              \
                                   const Matrix<T>&, Eigen::Index, Eigen::Index);                  \
  template Matrix<T> forward<T>(const ModelParams<T>&, const ModelConfig&, const TokenSeq&);      \
  template Matrix<T> forward_batch<T>(const ModelParams<T>&, const ModelConfig&, const Matrix<T>&, \
                                      Eigen::Index, Eigen::Index);                                 \
  template CVec output_symbols<T>(const Matrix<T>&, Eigen::Index);                                 \
  template double mse_loss<T>(const Matrix<T>&, const CMat&);                                      \
  template Matrix<T> forward_cached<T>(const ModelParams<T>&, const ModelConfig&, KvCache<T>&,     \
                                       const Matrix<T>&, bool);

ATOMICL_INSTANTIATE(float)
ATOMICL_INSTANTIATE(double)

#undef ATOMICL_INSTANTIATE

}  // namespace atomicl::icl
