#pragma once

// Tape-based reverse-mode differentiation over a fixed set of matrix
// primitives. Values are 2-D row-major matrices; a 1x1 matrix is a scalar.
// One Tape belongs to one thread for the duration of one training step.

#include <cmath>
#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <unsupported/Eigen/SpecialFunctions>

namespace atomicl::ad {

template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Trainable real tensor. `grad`, when present, has the shape of `value`.
template <typename T>
struct DiffTensor {
  Matrix<T> value;
  std::optional<Matrix<T>> grad;

  DiffTensor() = default;
  explicit DiffTensor(Matrix<T> v) : value(std::move(v)) {}

  std::vector<Eigen::Index> shape() const { return {value.rows(), value.cols()}; }
  void zero_grad() { grad = Matrix<T>::Zero(value.rows(), value.cols()); }
};

struct Var {
  std::size_t id = 0;
};

template <typename T>
class Tape {
 public:
  using Mat = Matrix<T>;
  using BackFn = std::function<void(Tape&, std::size_t self)>;

  Var constant(Mat value) { return push(std::move(value), false, nullptr, {}); }

  Var parameter(DiffTensor<T>& p) { return push(p.value, true, &p, {}); }

  const Mat& value(Var v) const { return nodes_.at(v.id).value; }
  bool needs_grad(Var v) const { return nodes_[v.id].needs_grad; }
  std::size_t size() const { return nodes_.size(); }

  /// Records an op node. `back` is called only if some input needs a gradient.
  Var record(Mat value, std::initializer_list<Var> inputs, BackFn back) {
    bool any = false;
    for (Var in : inputs) any = any || nodes_[in.id].needs_grad;
    return push(std::move(value), any, nullptr, any ? std::move(back) : BackFn{});
  }

  /// Gradient accumulator of node `v` (allocated zero on first use).
  Mat& grad(Var v) { return grad_of(v.id); }
  Mat& grad_of(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.size() == 0) n.grad = Mat::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }
  bool has_grad(std::size_t id) const { return nodes_[id].grad.size() != 0; }

  /// grad(v) += expr, assigning directly on first use instead of zero-filling.
  template <typename Expr>
  void accumulate(Var v, const Expr& expr) {
    Node& n = nodes_[v.id];
    if (n.grad.size() == 0)
      n.grad.noalias() = expr;
    else
      n.grad.noalias() += expr;
  }

  /// Propagates d(loss)/d(node) back to every parameter on the tape and
  /// accumulates into DiffTensor::grad.
  void backward(Var loss) {
    const Node& l = nodes_.at(loss.id);
    if (l.value.rows() != 1 || l.value.cols() != 1) {
      throw std::invalid_argument("backward: loss must be a 1x1 scalar, got " +
                                  std::to_string(l.value.rows()) + "x" +
                                  std::to_string(l.value.cols()));
    }
    if (!l.needs_grad) return;
    grad_of(loss.id)(0, 0) = T(1);
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.needs_grad || n.grad.size() == 0) continue;
      if (n.back) n.back(*this, i);
      if (n.param != nullptr) {
        if (!n.param->grad) n.param->zero_grad();
        *n.param->grad += n.grad;
      }
    }
  }

 private:
  struct Node {
    Mat value;
    Mat grad;
    bool needs_grad = false;
    DiffTensor<T>* param = nullptr;
    BackFn back;
  };

  Var push(Mat value, bool needs, DiffTensor<T>* param, BackFn back) {
    nodes_.push_back(Node{std::move(value), Mat(), needs, param, std::move(back)});
    return Var{nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
};

/// Zeroes the gradient slot of every tensor in `params`, then runs the tape
/// backwards from `loss`. Parameters not reachable from `loss` keep a zero
/// gradient.
template <typename T>
void backward(Tape<T>& tape, Var loss, std::span<DiffTensor<T>* const> params) {
  for (DiffTensor<T>* p : params) p->zero_grad();
  tape.backward(loss);
}

namespace detail {
inline void require(bool ok, const char* op, const std::string& what) {
  if (!ok) throw std::invalid_argument(std::string(op) + ": " + what);
}
template <typename T>
std::string shape_str(const Matrix<T>& m) {
  return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}
}  // namespace detail

// ---------------------------------------------------------------------------
// Primitives

/// a * b
template <typename T>
Var matmul(Tape<T>& t, Var a, Var b) {
  const auto& av = t.value(a);
  const auto& bv = t.value(b);
  detail::require(av.cols() == bv.rows(), "matmul",
                  detail::shape_str(av) + " * " + detail::shape_str(bv));
  Matrix<T> out = av * bv;
  return t.record(std::move(out), {a, b}, [a, b](Tape<T>& tp, std::size_t self) {
    const Matrix<T>& g = tp.grad_of(self);
    if (tp.needs_grad(a)) tp.accumulate(a, g * tp.value(b).transpose());
    if (tp.needs_grad(b)) tp.accumulate(b, tp.value(a).transpose() * g);
  });
}

/// x * w^T, the row-per-token convention for a dense layer with weight (out x in).
template <typename T>
Var matmul_nt(Tape<T>& t, Var x, Var w) {
  const auto& xv = t.value(x);
  const auto& wv = t.value(w);
  detail::require(xv.cols() == wv.cols(), "matmul_nt",
                  detail::shape_str(xv) + " * (" + detail::shape_str(wv) + ")^T");
  Matrix<T> out = xv * wv.transpose();
  return t.record(std::move(out), {x, w}, [x, w](Tape<T>& tp, std::size_t self) {
    const Matrix<T>& g = tp.grad_of(self);
    if (tp.needs_grad(x)) tp.accumulate(x, g * tp.value(w));
    if (tp.needs_grad(w)) tp.accumulate(w, g.transpose() * tp.value(x));
  });
}

template <typename T>
Var add(Tape<T>& t, Var a, Var b) {
  const auto& av = t.value(a);
  const auto& bv = t.value(b);
  detail::require(av.rows() == bv.rows() && av.cols() == bv.cols(), "add",
                  detail::shape_str(av) + " + " + detail::shape_str(bv));
  Matrix<T> out = av + bv;
  return t.record(std::move(out), {a, b}, [a, b](Tape<T>& tp, std::size_t self) {
    const Matrix<T>& g = tp.grad_of(self);
    if (tp.needs_grad(a)) tp.accumulate(a, g);
    if (tp.needs_grad(b)) tp.accumulate(b, g);
  });
}

/// x + 1 * bias, bias is 1 x cols.
template <typename T>
Var add_row(Tape<T>& t, Var x, Var bias) {
  const auto& xv = t.value(x);
  const auto& bv = t.value(bias);
  detail::require(bv.rows() == 1 && bv.cols() == xv.cols(), "add_row",
                  detail::shape_str(xv) + " + row " + detail::shape_str(bv));
  Matrix<T> out = xv.rowwise() + bv.row(0);
  return t.record(std::move(out), {x, bias}, [x, bias](Tape<T>& tp, std::size_t self) {
    const Matrix<T>& g = tp.grad_of(self);
    if (tp.needs_grad(x)) tp.accumulate(x, g);
    if (tp.needs_grad(bias)) tp.accumulate(bias, g.colwise().sum());
  });
}

/// Elementwise product.
template <typename T>
Var mul(Tape<T>& t, Var a, Var b) {
  const auto& av = t.value(a);
  const auto& bv = t.value(b);
  detail::require(av.rows() == bv.rows() && av.cols() == bv.cols(), "mul",
                  detail::shape_str(av) + " .* " + detail::shape_str(bv));
  Matrix<T> out = av.cwiseProduct(bv);
  return t.record(std::move(out), {a, b}, [a, b](Tape<T>& tp, std::size_t self) {
    const Matrix<T>& g = tp.grad_of(self);
    if (tp.needs_grad(a)) tp.grad(a) += g.cwiseProduct(tp.value(b));
    if (tp.needs_grad(b)) tp.grad(b) += g.cwiseProduct(tp.value(a));
  });
}

template <typename T>
Var scale(Tape<T>& t, Var x, T s) {
  Matrix<T> out = t.value(x) * s;
  return t.record(std::move(out), {x}, [x, s](Tape<T>& tp, std::size_t self) {
    tp.grad(x) += tp.grad_of(self) * s;
  });
}

/// Sum of all entries, as a 1x1 scalar.
template <typename T>
Var sum(Tape<T>& t, Var x) {
  Matrix<T> out(1, 1);
  out(0, 0) = t.value(x).sum();
  return t.record(std::move(out), {x}, [x](Tape<T>& tp, std::size_t self) {
    tp.grad(x).array() += tp.grad_of(self)(0, 0);
  });
}

/// Row-wise layer normalisation with per-column gain and offset (both 1 x cols).
template <typename T>
Var layer_norm(Tape<T>& t, Var x, Var gain, Var offset, T eps = T(1e-5)) {
  const auto& xv = t.value(x);
  const auto& gv = t.value(gain);
  const auto& ov = t.value(offset);
  detail::require(gv.rows() == 1 && gv.cols() == xv.cols() && ov.rows() == 1 &&
                      ov.cols() == xv.cols(),
                  "layer_norm", "gain/offset must be 1x" + std::to_string(xv.cols()));
  const Eigen::Index n = xv.cols();
  Matrix<T> xhat(xv.rows(), n);
  Eigen::Matrix<T, Eigen::Dynamic, 1> inv_sd(xv.rows());
  for (Eigen::Index r = 0; r < xv.rows(); ++r) {
    const T mean = xv.row(r).mean();
    const T var = (xv.row(r).array() - mean).square().mean();
    inv_sd(r) = T(1) / std::sqrt(var + eps);
    xhat.row(r) = (xv.row(r).array() - mean) * inv_sd(r);
  }
  Matrix<T> out = (xhat.array().rowwise() * gv.row(0).array()).rowwise() + ov.row(0).array();
  return t.record(std::move(out), {x, gain, offset},
                  [x, gain, offset, xhat = std::move(xhat), inv_sd = std::move(inv_sd), n](
                      Tape<T>& tp, std::size_t self) {
                    const Matrix<T>& g = tp.grad_of(self);
                    if (tp.needs_grad(gain)) tp.grad(gain) += g.cwiseProduct(xhat).colwise().sum();
                    if (tp.needs_grad(offset)) tp.grad(offset) += g.colwise().sum();
                    if (!tp.needs_grad(x)) return;
                    const auto gv = tp.value(gain).row(0).array();
                    Matrix<T>& gx = tp.grad(x);
                    for (Eigen::Index r = 0; r < g.rows(); ++r) {
                      const Eigen::Array<T, 1, Eigen::Dynamic> dxhat = g.row(r).array() * gv;
                      const T m1 = dxhat.mean();
                      const T m2 = (dxhat * xhat.row(r).array()).mean();
                      gx.row(r).array() +=
                          inv_sd(r) * (dxhat - m1 - xhat.row(r).array() * m2);
                    }
                    (void)n;
                  });
}

/// Exact (erf) GeLU.
template <typename T>
Var gelu(Tape<T>& t, Var x) {
  const auto xa = t.value(x).array();
  const T inv_sqrt2 = T(0.70710678118654752440);
  Matrix<T> out = (T(0.5) * xa * (T(1) + (xa * inv_sqrt2).erf())).matrix();
  return t.record(std::move(out), {x}, [x, inv_sqrt2](Tape<T>& tp, std::size_t self) {
    const T inv_sqrt2pi = T(0.39894228040143267794);
    const auto v = tp.value(x).array();
    tp.accumulate(x, (tp.grad_of(self).array() * (T(0.5) * (T(1) + (v * inv_sqrt2).erf()) +
                                                   v * inv_sqrt2pi * (T(-0.5) * v.square()).exp()))
                         .matrix());
  });
}

namespace detail {
/// In-place softmax of each row of `s`; with `causal`, row i keeps columns
/// j <= i + shift and masked entries are written as exact zeros.
template <typename Derived>
void softmax_rows_inplace(Eigen::MatrixBase<Derived>& s, bool causal, Eigen::Index shift = 0) {
  using T = typename Derived::Scalar;
  for (Eigen::Index i = 0; i < s.rows(); ++i) {
    const Eigen::Index len = causal ? std::min<Eigen::Index>(s.cols(), i + shift + 1) : s.cols();
    auto row = s.row(i).head(len);
    const T mx = row.maxCoeff();
    row = (row.array() - mx).exp();
    const T z = row.sum();
    row /= z;
    if (len < s.cols()) s.row(i).tail(s.cols() - len).setZero();
  }
}

template <typename DerivedP, typename DerivedG>
Matrix<typename DerivedP::Scalar> softmax_rows_backward(const Eigen::MatrixBase<DerivedP>& p,
                                                        const Eigen::MatrixBase<DerivedG>& g) {
  using T = typename DerivedP::Scalar;
  Matrix<T> pg = p.cwiseProduct(g);
  Eigen::Matrix<T, Eigen::Dynamic, 1> dot = pg.rowwise().sum();
  return pg - (p.array().colwise() * dot.array()).matrix();
}
}  // namespace detail

/// Row-wise softmax. With `causal`, entry (i, j) for j > i is masked to an
/// exact zero (the pre-softmax mask of -infinity).
template <typename T>
Var softmax(Tape<T>& t, Var x, bool causal = false) {
  Matrix<T> out = t.value(x);
  detail::softmax_rows_inplace(out, causal);
  return t.record(out, {x}, [x, p = out](Tape<T>& tp, std::size_t self) {
    tp.grad(x) += detail::softmax_rows_backward(p, tp.grad_of(self));
  });
}

/// Causally masked multi-head attention core over `batch` sequences of
/// `seq` tokens stacked row-wise. q, k, v are (batch*seq) x (heads*dh);
/// head h owns columns [h*dh, (h+1)*dh). Returns the concatenated per-head
/// outputs softmax(q k^T / sqrt(dh) + mask) v, same shape as q.
template <typename T>
Var causal_attention(Tape<T>& t, Var q, Var k, Var v, Eigen::Index batch, Eigen::Index seq,
                     Eigen::Index heads) {
  const auto& qv = t.value(q);
  const auto& kv = t.value(k);
  const auto& vv = t.value(v);
  detail::require(qv.rows() == batch * seq && kv.rows() == qv.rows() && vv.rows() == qv.rows() &&
                      kv.cols() == qv.cols() && vv.cols() == qv.cols(),
                  "causal_attention", "q/k/v must all be (batch*seq) x d");
  detail::require(heads > 0 && qv.cols() % heads == 0, "causal_attention",
                  "model width not divisible by head count");
  const Eigen::Index dh = qv.cols() / heads;
  const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dh));

  Matrix<T> out(qv.rows(), qv.cols());
  // probs[b*heads + h] is a seq x seq lower-triangular matrix.
  std::vector<Matrix<T>> probs(static_cast<std::size_t>(batch * heads));
  for (Eigen::Index b = 0; b < batch; ++b) {
    for (Eigen::Index h = 0; h < heads; ++h) {
      const auto qb = qv.block(b * seq, h * dh, seq, dh);
      const auto kb = kv.block(b * seq, h * dh, seq, dh);
      const auto vb = vv.block(b * seq, h * dh, seq, dh);
      Matrix<T>& p = probs[static_cast<std::size_t>(b * heads + h)];
      p.noalias() = (qb * kb.transpose()) * inv_sqrt;
      detail::softmax_rows_inplace(p, true);
      out.block(b * seq, h * dh, seq, dh).noalias() = p * vb;
    }
  }
  return t.record(
      std::move(out), {q, k, v},
      [q, k, v, batch, seq, heads, dh, inv_sqrt, probs = std::move(probs)](Tape<T>& tp,
                                                                           std::size_t self) {
        const Matrix<T>& g = tp.grad_of(self);
        const auto& qv = tp.value(q);
        const auto& kv = tp.value(k);
        const auto& vv = tp.value(v);
        Matrix<T>* gq = tp.needs_grad(q) ? &tp.grad(q) : nullptr;
        Matrix<T>* gk = tp.needs_grad(k) ? &tp.grad(k) : nullptr;
        Matrix<T>* gv = tp.needs_grad(v) ? &tp.grad(v) : nullptr;
        Matrix<T> dp, ds;
        for (Eigen::Index b = 0; b < batch; ++b) {
          for (Eigen::Index h = 0; h < heads; ++h) {
            const Matrix<T>& p = probs[static_cast<std::size_t>(b * heads + h)];
            const auto gb = g.block(b * seq, h * dh, seq, dh);
            if (gv) gv->block(b * seq, h * dh, seq, dh).noalias() += p.transpose() * gb;
            if (!gq && !gk) continue;
            dp.noalias() = gb * vv.block(b * seq, h * dh, seq, dh).transpose();
            ds = detail::softmax_rows_backward(p, dp) * inv_sqrt;
            if (gq) gq->block(b * seq, h * dh, seq, dh).noalias() += ds * kv.block(b * seq, h * dh, seq, dh);
            if (gk) gk->block(b * seq, h * dh, seq, dh).noalias() += ds.transpose() * qv.block(b * seq, h * dh, seq, dh);
          }
        }
      });
}

/// out.row(i) = table.row(index[i]); the embedding lookup.
template <typename T>
Var gather_rows(Tape<T>& t, Var table, std::vector<Eigen::Index> index) {
  const auto& tv = t.value(table);
  Matrix<T> out(static_cast<Eigen::Index>(index.size()), tv.cols());
  for (std::size_t i = 0; i < index.size(); ++i) {
    detail::require(index[i] >= 0 && index[i] < tv.rows(), "gather_rows",
                    "index " + std::to_string(index[i]) + " outside table of " +
                        std::to_string(tv.rows()) + " rows");
    out.row(static_cast<Eigen::Index>(i)) = tv.row(index[i]);
  }
  return t.record(std::move(out), {table},
                  [table, index = std::move(index)](Tape<T>& tp, std::size_t self) {
                    const Matrix<T>& g = tp.grad_of(self);
                    Matrix<T>& gt = tp.grad(table);
                    for (std::size_t i = 0; i < index.size(); ++i)
                      gt.row(index[i]) += g.row(static_cast<Eigen::Index>(i));
                  });
}

/// (1 / rows.size()) * sum over listed rows r of ||x.row(r) - target.row(i)||^2,
/// where target row i pairs with rows[i].
template <typename T>
Var row_mse(Tape<T>& t, Var x, const Matrix<T>& target, std::vector<Eigen::Index> rows) {
  const auto& xv = t.value(x);
  detail::require(target.rows() == static_cast<Eigen::Index>(rows.size()) &&
                      target.cols() == xv.cols(),
                  "row_mse", "target must be " + std::to_string(rows.size()) + "x" +
                                 std::to_string(xv.cols()));
  detail::require(!rows.empty(), "row_mse", "no rows selected");
  Matrix<T> diff(target.rows(), target.cols());
  for (std::size_t i = 0; i < rows.size(); ++i)
    diff.row(static_cast<Eigen::Index>(i)) = xv.row(rows[i]) - target.row(static_cast<Eigen::Index>(i));
  const T inv = T(1) / static_cast<T>(rows.size());
  Matrix<T> out(1, 1);
  out(0, 0) = diff.squaredNorm() * inv;
  return t.record(std::move(out), {x},
                  [x, inv, rows = std::move(rows), diff = std::move(diff)](Tape<T>& tp,
                                                                         std::size_t self) {
                    const T g = tp.grad_of(self)(0, 0) * T(2) * inv;
                    Matrix<T>& gx = tp.grad(x);
                    for (std::size_t i = 0; i < rows.size(); ++i)
                      gx.row(rows[i]) += g * diff.row(static_cast<Eigen::Index>(i));
                  });
}

}  // namespace atomicl::ad
