#pragma once

// Independent reference implementations used by the unit and acceptance
// tests. Nothing here calls into the library's numerics beyond reading
// parameter values.

#include <cmath>
#include <complex>
#include <cstddef>
#include <limits>
#include <vector>

#include "atomicl/icl/model.hpp"
#include "atomicl/signal/constellation.hpp"

namespace oracle {

using Vec = std::vector<double>;
using Grid = std::vector<Vec>;  // Grid[i][j]

inline Grid zeros(std::size_t r, std::size_t c) { return Grid(r, Vec(c, 0.0)); }

template <typename Mat>
Grid to_grid(const Mat& m) {
  Grid g = zeros(static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols()));
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) g[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] = static_cast<double>(m(i, j));
  return g;
}

// W (a x b) times X (b x c), triple loop.
inline Grid mat(const Grid& w, const Grid& x) {
  const std::size_t a = w.size(), b = x.size(), c = x.empty() ? 0 : x[0].size();
  Grid out = zeros(a, c);
  for (std::size_t i = 0; i < a; ++i)
    for (std::size_t k = 0; k < c; ++k) {
      double acc = 0.0;
      for (std::size_t j = 0; j < b; ++j) acc += w[i][j] * x[j][k];
      out[i][k] = acc;
    }
  return out;
}

// Column-wise layer normalisation of a D x T embedding matrix.
inline Grid layer_norm_cols(const Grid& e, const Grid& gain, const Grid& offset) {
  const std::size_t d = e.size(), t = e[0].size();
  Grid out = zeros(d, t);
  for (std::size_t c = 0; c < t; ++c) {
    double mean = 0.0;
    for (std::size_t i = 0; i < d; ++i) mean += e[i][c];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t i = 0; i < d; ++i) var += (e[i][c] - mean) * (e[i][c] - mean);
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + 1e-5);
    for (std::size_t i = 0; i < d; ++i) out[i][c] = (e[i][c] - mean) * inv * gain[0][i] + offset[0][i];
  }
  return out;
}

// Decoder stack in the column convention: E is D_E x T, one column per
// token. Returns T x 2K outputs ([Re o, Im o] per row).
inline Grid transformer(const atomicl::icl::ModelParams<double>& p, const atomicl::icl::ModelConfig& cfg,
                        const Grid& tokens) {
  const std::size_t t_count = tokens.size();
  const std::size_t de = cfg.embed_dim, nh = cfg.heads, dh = de / nh;
  Grid t_cols = zeros(tokens[0].size(), t_count);
  for (std::size_t l = 0; l < t_count; ++l)
    for (std::size_t i = 0; i < tokens[0].size(); ++i) t_cols[i][l] = tokens[l][i];

  Grid e = mat(to_grid(p.embedding.value), t_cols);
  if (cfg.positional) {
    const Grid pos = to_grid(p.positional.value);
    for (std::size_t l = 0; l < t_count; ++l)
      for (std::size_t i = 0; i < de; ++i) e[i][l] += pos[l][i];
  }
  for (const auto& L : p.layers) {
    const Grid wq = to_grid(L.wq.value), wk = to_grid(L.wk.value), wv = to_grid(L.wv.value);
    Grid stacked = zeros(de, t_count);  // [A_1; ...; A_NH] with A_h^T as D_H x T blocks
    for (std::size_t h = 0; h < nh; ++h) {
      Grid wqh(wq.begin() + static_cast<long>(h * dh), wq.begin() + static_cast<long>((h + 1) * dh));
      Grid wkh(wk.begin() + static_cast<long>(h * dh), wk.begin() + static_cast<long>((h + 1) * dh));
      Grid wvh(wv.begin() + static_cast<long>(h * dh), wv.begin() + static_cast<long>((h + 1) * dh));
      const Grid q = mat(wqh, e), k = mat(wkh, e), v = mat(wvh, e);
      for (std::size_t i = 0; i < t_count; ++i) {
        Vec logits(t_count, -std::numeric_limits<double>::infinity());
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j <= i; ++j) {
          double dot = 0.0;
          for (std::size_t c = 0; c < dh; ++c) dot += q[c][i] * k[c][j];
          logits[j] = dot / std::sqrt(static_cast<double>(dh));
          mx = std::max(mx, logits[j]);
        }
        double z = 0.0;
        for (std::size_t j = 0; j <= i; ++j) z += std::exp(logits[j] - mx);
        for (std::size_t c = 0; c < dh; ++c) {
          double acc = 0.0;
          for (std::size_t j = 0; j <= i; ++j) acc += std::exp(logits[j] - mx) / z * v[c][j];
          stacked[h * dh + c][i] = acc;
        }
      }
    }
    Grid a = mat(to_grid(L.w_mhsa.value), stacked);
    for (std::size_t i = 0; i < de; ++i)
      for (std::size_t l = 0; l < t_count; ++l) a[i][l] += e[i][l];
    const Grid ep = layer_norm_cols(a, to_grid(L.ln1_gain.value), to_grid(L.ln1_offset.value));
    Grid hid = mat(to_grid(L.w1.value), ep);
    const Grid b1 = to_grid(L.b1.value), b2 = to_grid(L.b2.value);
    for (std::size_t i = 0; i < hid.size(); ++i)
      for (std::size_t l = 0; l < t_count; ++l) {
        const double x = hid[i][l] + b1[0][i];
        hid[i][l] = 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0)));
      }
    Grid f = mat(to_grid(L.w2.value), hid);
    for (std::size_t i = 0; i < de; ++i)
      for (std::size_t l = 0; l < t_count; ++l) f[i][l] += b2[0][i] + ep[i][l];
    e = layer_norm_cols(f, to_grid(L.ln2_gain.value), to_grid(L.ln2_offset.value));
  }
  const Grid o = mat(to_grid(p.output.value), e);  // 2K x T
  Grid out = zeros(t_count, o.size());
  for (std::size_t l = 0; l < t_count; ++l)
    for (std::size_t i = 0; i < o.size(); ++i) out[l][i] = o[i][l];
  return out;
}

// argmin over S^K of || |H s + r| - y ||^2 by nested enumeration, first
// minimiser in lexicographic order with user 0 most significant.
inline std::vector<std::size_t> exhaustive_ml(const atomicl::RVec& y, const atomicl::CMat& h, const atomicl::CVec& r,
                                              const atomicl::Constellation& c) {
  const std::size_t k = static_cast<std::size_t>(h.cols()), m = c.order();
  std::size_t total = 1;
  for (std::size_t u = 0; u < k; ++u) total *= m;
  std::vector<std::size_t> best(k, 0), digits(k, 0);
  double best_v = std::numeric_limits<double>::infinity();
  for (std::size_t idx = 0; idx < total; ++idx) {
    std::size_t rem = idx;
    for (std::size_t u = k; u-- > 0;) {
      digits[u] = rem % m;
      rem /= m;
    }
    double v = 0.0;
    for (Eigen::Index n = 0; n < h.rows(); ++n) {
      std::complex<double> acc = r(n);
      for (std::size_t u = 0; u < k; ++u) acc += h(n, static_cast<Eigen::Index>(u)) * c.point(digits[u]);
      const double d = std::abs(acc) - y(n);
      v += d * d;
    }
    if (v < best_v) {
      best_v = v;
      best = digits;
    }
  }
  return best;
}

}  // namespace oracle
