#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <set>

#include "atomicl/numerics/autodiff.hpp"
#include "atomicl/numerics/cmat.hpp"
#include "atomicl/numerics/gradcheck.hpp"
#include "atomicl/numerics/rng.hpp"

using namespace atomicl;
using M = ad::Matrix<double>;

namespace {

M random_matrix(Rng& rng, Eigen::Index r, Eigen::Index c) {
  M m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
  return m;
}

}  // namespace

TEST_CASE("philox known answers") {
  using A4 = std::array<std::uint32_t, 4>;
  using A2 = std::array<std::uint32_t, 2>;
  CHECK(Rng::philox(A4{0, 0, 0, 0}, A2{0, 0}) == A4{0x6627e8d5, 0xe169c58d, 0xbc57ac4c, 0x9b00dbd8});
  CHECK(Rng::philox(A4{0xffffffff, 0xffffffff, 0xffffffff, 0xffffffff}, A2{0xffffffff, 0xffffffff}) ==
        A4{0x408f276d, 0x41c83b0e, 0xa20bc7c6, 0x6d5451fd});
  CHECK(Rng::philox(A4{0x243f6a88, 0x85a308d3, 0x13198a2e, 0x03707344}, A2{0xa4093822, 0x299f31d0}) ==
        A4{0xd16cfe09, 0x94fdcceb, 0x5001e420, 0x24126ea1});
}

TEST_CASE("rng is a pure function of seed, stream and position") {
  Rng a(42, 3), b(42, 3), c(42, 4), d(43, 3);
  std::vector<std::uint64_t> va, vb, vc, vd;
  for (int i = 0; i < 16; ++i) {
    va.push_back(a.next_u64());
    vb.push_back(b.next_u64());
    vc.push_back(c.next_u64());
    vd.push_back(d.next_u64());
  }
  CHECK(va == vb);
  CHECK(va != vc);
  CHECK(va != vd);
  CHECK(a.position() == b.position());
}

TEST_CASE("split children are independent of parent use and of each other") {
  Rng parent(7);
  const Rng before = parent.split(5);
  for (int i = 0; i < 10; ++i) parent.next_u32();
  Rng after = parent.split(5);
  Rng b2 = before;
  CHECK(after.next_u64() == b2.next_u64());

  std::set<std::uint64_t> firsts;
  for (std::uint64_t id = 0; id < 1000; ++id) firsts.insert(parent.split(id).next_u64());
  CHECK(firsts.size() == 1000);
}

TEST_CASE("uniform and normal draws have the expected moments") {
  Rng rng(11);
  const int n = 200000;
  double su = 0, su2 = 0, sn = 0, sn2 = 0;
  for (int i = 0; i < n; ++i) {
    const double u = rng.uniform();
    REQUIRE(u >= 0.0);
    REQUIRE(u < 1.0);
    su += u;
    su2 += u * u;
    const double g = rng.normal();
    sn += g;
    sn2 += g * g;
  }
  CHECK(su / n == doctest::Approx(0.5).epsilon(0.01));
  CHECK(su2 / n - (su / n) * (su / n) == doctest::Approx(1.0 / 12).epsilon(0.02));
  CHECK(std::abs(sn / n) < 0.01);
  CHECK(sn2 / n == doctest::Approx(1.0).epsilon(0.01));

  std::vector<int> counts(7, 0);
  for (int i = 0; i < 70000; ++i) ++counts[rng.uniform_index(7)];
  for (int c : counts) CHECK(std::abs(c - 10000) < 500);
}

TEST_CASE("complex gaussian sampling") {
  Rng rng(3);
  SUBCASE("zero variance gives zeros") {
    for (auto [r, c] : {std::pair{1, 1}, std::pair{4, 7}, std::pair{0, 3}})
      CHECK(sample_complex_gaussian(rng, r, c, 0.0).cwiseAbs().sum() == 0.0);
  }
  SUBCASE("second moment matches the variance") {
    const CMat w = sample_complex_gaussian(rng, 1, 100000, 2.0);
    double power = 0.0;
    for (Eigen::Index i = 0; i < w.size(); ++i) power += std::norm(w(0, i));
    power /= static_cast<double>(w.size());
    CHECK(power >= 1.96);
    CHECK(power <= 2.04);
  }
  SUBCASE("real and imaginary parts are uncorrelated") {
    const CMat w = sample_complex_gaussian(rng, 1, 100000, 1.0);
    double sr = 0, si = 0, srr = 0, sii = 0, sri = 0;
    const double n = static_cast<double>(w.size());
    for (Eigen::Index i = 0; i < w.size(); ++i) {
      const double a = w(0, i).real(), b = w(0, i).imag();
      sr += a, si += b, srr += a * a, sii += b * b, sri += a * b;
    }
    const double cov = sri / n - (sr / n) * (si / n);
    const double corr = cov / std::sqrt((srr / n - sr * sr / n / n) * (sii / n - si * si / n / n));
    CHECK(std::abs(corr) < 0.02);
  }
  SUBCASE("the same draws at N=8, K=2") {
    double power = 0.0;
    int count = 0;
    for (int t = 0; t < 6250; ++t) {
      const CMat h = sample_complex_gaussian(rng, 8, 2, 1.0);
      power += h.cwiseAbs2().sum();
      count += 16;
    }
    CHECK(power / count == doctest::Approx(1.0).epsilon(0.02));
  }
  SUBCASE("invalid variance") {
    CHECK_THROWS_AS(sample_complex_gaussian(rng, 2, 2, -1.0), std::invalid_argument);
    CHECK_THROWS_AS(sample_complex_gaussian(rng, 2, 2, std::nan("")), std::invalid_argument);
  }
}

TEST_CASE("complex matmul") {
  Rng rng(5);
  SUBCASE("identity") {
    const CMat b = sample_complex_gaussian(rng, 3, 2, 1.0);
    CHECK(complex_matmul(CMat::Identity(3, 3), b) == b);
  }
  SUBCASE("scalar by hand") {
    CMat a(1, 1), b(1, 1);
    a(0, 0) = {2, 1};
    b(0, 0) = {1, -1};
    CHECK(complex_matmul(a, b)(0, 0) == cplx(3, -1));
  }
  SUBCASE("matches a triple loop") {
    const CMat a = sample_complex_gaussian(rng, 5, 4, 1.0), b = sample_complex_gaussian(rng, 4, 3, 1.0);
    const CMat c = complex_matmul(a, b);
    for (int i = 0; i < 5; ++i)
      for (int k = 0; k < 3; ++k) {
        cplx acc = 0;
        for (int j = 0; j < 4; ++j) acc += a(i, j) * b(j, k);
        CHECK(std::abs(c(i, k) - acc) <= 1e-6 * std::abs(acc));
      }
  }
  SUBCASE("shape mismatch") {
    CHECK_THROWS_AS(complex_matmul(CMat::Zero(2, 3), CMat::Zero(2, 3)), std::invalid_argument);
  }
  SUBCASE("finiteness") {
    CMat a = CMat::Ones(2, 2);
    CHECK(all_finite(a));
    a(1, 0) = cplx(0, std::numeric_limits<double>::infinity());
    CHECK_FALSE(all_finite(a));
  }
}

TEST_CASE("reverse mode on simple losses") {
  SUBCASE("sum gives all-ones gradient") {
    ad::DiffTensor<double> p(M::Constant(3, 2, -1.5));
    ad::Tape<double> t;
    const ad::Var loss = ad::sum(t, t.parameter(p));
    std::vector<ad::DiffTensor<double>*> ps{&p};
    ad::backward(t, loss, std::span<ad::DiffTensor<double>* const>(ps));
    CHECK(*p.grad == M::Ones(3, 2));
  }
  SUBCASE("sum of squares") {
    M v(1, 3);
    v << 1, 2, 3;
    ad::DiffTensor<double> p(v);
    ad::Tape<double> t;
    const ad::Var x = t.parameter(p);
    std::vector<ad::DiffTensor<double>*> ps{&p};
    ad::backward(t, ad::sum(t, ad::mul(t, x, x)), std::span<ad::DiffTensor<double>* const>(ps));
    CHECK(*p.grad == 2.0 * v);
  }
  SUBCASE("parameter used twice accumulates") {
    ad::DiffTensor<double> p(M::Constant(2, 2, 0.5));
    ad::Tape<double> t;
    const ad::Var x = t.parameter(p);
    std::vector<ad::DiffTensor<double>*> ps{&p};
    ad::backward(t, ad::sum(t, ad::add(t, x, ad::scale(t, x, 3.0))), std::span<ad::DiffTensor<double>* const>(ps));
    CHECK(*p.grad == M::Constant(2, 2, 4.0));
  }
  SUBCASE("unreachable parameter keeps a zero gradient") {
    ad::DiffTensor<double> used(M::Ones(1, 1)), unused(M::Ones(2, 2));
    ad::Tape<double> t;
    const ad::Var loss = ad::sum(t, t.parameter(used));
    std::vector<ad::DiffTensor<double>*> ps{&used, &unused};
    ad::backward(t, loss, std::span<ad::DiffTensor<double>* const>(ps));
    CHECK(*unused.grad == M::Zero(2, 2));
  }
  SUBCASE("non-scalar loss is rejected") {
    ad::DiffTensor<double> p(M::Ones(2, 2));
    ad::Tape<double> t;
    const ad::Var x = t.parameter(p);
    CHECK_THROWS_AS(t.backward(x), std::invalid_argument);
  }
}

TEST_CASE("op shape validation") {
  ad::Tape<double> t;
  const ad::Var a = t.constant(M::Ones(2, 3));
  const ad::Var b = t.constant(M::Ones(2, 3));
  CHECK_THROWS_AS(ad::matmul(t, a, b), std::invalid_argument);
  CHECK_THROWS_AS(ad::add(t, a, t.constant(M::Ones(3, 2))), std::invalid_argument);
  CHECK_THROWS_AS(ad::add_row(t, a, t.constant(M::Ones(2, 3))), std::invalid_argument);
  CHECK_THROWS_AS(ad::row_mse(t, a, M(M::Ones(1, 2)), {0}), std::invalid_argument);
  CHECK_THROWS_AS(ad::causal_attention(t, a, a, a, 1, 2, 2), std::invalid_argument);
  CHECK_THROWS_AS(ad::gather_rows(t, a, {5}), std::invalid_argument);
}

TEST_CASE("causal softmax masks exactly") {
  ad::Tape<double> t;
  Rng rng(2);
  const ad::Var s = ad::softmax(t, t.constant(random_matrix(rng, 4, 4)), true);
  const M& p = t.value(s);
  for (int i = 0; i < 4; ++i) {
    CHECK(p.row(i).sum() == doctest::Approx(1.0).epsilon(1e-14));
    for (int j = i + 1; j < 4; ++j) CHECK(p(i, j) == 0.0);
  }
}

TEST_CASE("finite-difference checker") {
  Rng rng(9);
  SUBCASE("quadratic is exact to rounding") {
    ad::DiffTensor<double> p(random_matrix(rng, 3, 3));
    std::vector<ad::DiffTensor<double>*> ps{&p};
    const auto rep = ad::finite_diff_check(
        [&](ad::Tape<double>& t) {
          const ad::Var x = t.parameter(p);
          return ad::sum(t, ad::mul(t, x, x));
        },
        ps, 1e-4);
    CHECK(rep.passed(1e-8));
    CHECK(rep.coordinates == 9);
  }
  SUBCASE("layer norm block") {
    ad::DiffTensor<double> x(random_matrix(rng, 3, 5)), g(random_matrix(rng, 1, 5)), o(random_matrix(rng, 1, 5));
    const M w = random_matrix(rng, 3, 5);
    std::vector<ad::DiffTensor<double>*> ps{&x, &g, &o};
    const auto rep = ad::finite_diff_check(
        [&](ad::Tape<double>& t) {
          const ad::Var y = ad::layer_norm(t, t.parameter(x), t.parameter(g), t.parameter(o));
          return ad::sum(t, ad::mul(t, y, t.constant(w)));
        },
        ps, 1e-4);
    CHECK(rep.max_rel_error < 1e-5);
  }
  SUBCASE("attention block") {
    ad::DiffTensor<double> q(random_matrix(rng, 8, 4)), k(random_matrix(rng, 8, 4)), v(random_matrix(rng, 8, 4));
    const M w = random_matrix(rng, 8, 4);
    std::vector<ad::DiffTensor<double>*> ps{&q, &k, &v};
    const auto rep = ad::finite_diff_check(
        [&](ad::Tape<double>& t) {
          const ad::Var y = ad::causal_attention(t, t.parameter(q), t.parameter(k), t.parameter(v), 2, 4, 2);
          return ad::sum(t, ad::mul(t, y, t.constant(w)));
        },
        ps, 1e-4);
    CHECK(rep.max_rel_error < 1e-5);
  }
  SUBCASE("a wrong gradient is caught") {
    ad::DiffTensor<double> p(random_matrix(rng, 2, 2));
    std::vector<ad::DiffTensor<double>*> ps{&p};
    const auto rep = ad::finite_diff_check(
        [&](ad::Tape<double>& t) {
          const ad::Var x = t.parameter(p);
          // Forward is x^2 but the recorded backward claims 3x.
          M val = t.value(x).cwiseProduct(t.value(x));
          const ad::Var y = t.record(val, {x}, [x](ad::Tape<double>& tp, std::size_t self) {
            tp.grad(x) += 3.0 * tp.value(x).cwiseProduct(tp.grad_of(self));
          });
          return ad::sum(t, y);
        },
        ps, 1e-4);
    CHECK_FALSE(rep.passed(1e-4));
  }
  SUBCASE("non-finite loss is reported") {
    ad::DiffTensor<double> p(M::Constant(1, 1, 0.0));
    std::vector<ad::DiffTensor<double>*> ps{&p};
    const auto rep = ad::finite_diff_check(
        [&](ad::Tape<double>& t) {
          const ad::Var x = t.parameter(p);
          M val(1, 1);
          val(0, 0) = 1.0 / t.value(x)(0, 0);
          return t.record(val, {x}, [](ad::Tape<double>&, std::size_t) {});
        },
        ps, 1e-4);
    CHECK_FALSE(rep.finite);
    CHECK_FALSE(rep.failure.empty());
  }
  SUBCASE("step must be positive") {
    ad::DiffTensor<double> p(M::Ones(1, 1));
    std::vector<ad::DiffTensor<double>*> ps{&p};
    CHECK_THROWS_AS(ad::finite_diff_check([&](ad::Tape<double>& t) { return ad::sum(t, t.parameter(p)); }, ps, 0.0),
                    std::invalid_argument);
  }
}
