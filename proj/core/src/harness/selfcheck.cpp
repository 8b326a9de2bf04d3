#include "atomicl/harness/selfcheck.hpp"

#include <bit>
#include <cmath>
#include <filesystem>
#include <functional>
#include <limits>
#include <numbers>
#include <sstream>

#include <unistd.h>

#include "atomicl/detect/classical.hpp"
#include "atomicl/icl/checkpoint.hpp"
#include "atomicl/icl/detector.hpp"
#include "atomicl/icl/model.hpp"
#include "atomicl/icl/tokenizer.hpp"
#include "atomicl/icl/train.hpp"
#include "atomicl/numerics/gradcheck.hpp"
#include "atomicl/signal/channel.hpp"
#include "atomicl/signal/constellation.hpp"
#include "atomicl/signal/measurement.hpp"

namespace atomicl::harness {
namespace {

using M = ad::Matrix<double>;
using ad::DiffTensor;
using ad::Tape;
using ad::Var;

M random_matrix(Rng& rng, Eigen::Index rows, Eigen::Index cols, double scale = 1.0) {
  M m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = scale * rng.normal();
  return m;
}

std::string sci(double v) {
  std::ostringstream s;
  s.precision(3);
  s << std::scientific << v;
  return s.str();
}

CheckResult grad_case(std::string name, const ad::LossBuilder& loss, std::vector<DiffTensor<double>*> params,
                      double tol) {
  CheckResult r{std::move(name), false, {}};
  try {
    const auto rep = ad::finite_diff_check(loss, params, 1e-4);
    r.passed = rep.passed(tol);
    r.detail = rep.finite ? "max rel err " + sci(rep.max_rel_error) + " over " + std::to_string(rep.coordinates) +
                                " coords (tol " + sci(tol) + ")"
                          : rep.failure;
  } catch (const std::exception& e) {
    r.detail = e.what();
  }
  return r;
}

// sum(out .* w) with a fixed random w, so every output entry reaches the loss
// with a distinct weight.
Var project(Tape<double>& t, Var out, const M& w) { return ad::sum(t, ad::mul(t, out, t.constant(w))); }

}  // namespace

std::vector<CheckResult> gradcheck_suite(std::uint64_t seed) {
  Rng rng(seed, 40);
  std::vector<CheckResult> out;
  constexpr double tol = 1e-5;

  {
    DiffTensor<double> p(random_matrix(rng, 3, 4));
    out.push_back(grad_case("quadratic", [&](Tape<double>& t) {
      const Var x = t.parameter(p);
      return ad::sum(t, ad::mul(t, x, x));
    }, {&p}, 1e-8));
  }
  {
    DiffTensor<double> a(random_matrix(rng, 3, 4)), b(random_matrix(rng, 4, 5));
    const M w = random_matrix(rng, 3, 5);
    out.push_back(grad_case("matmul", [&](Tape<double>& t) {
      return project(t, ad::matmul(t, t.parameter(a), t.parameter(b)), w);
    }, {&a, &b}, tol));
  }
  {
    DiffTensor<double> x(random_matrix(rng, 3, 4)), wt(random_matrix(rng, 5, 4));
    const M w = random_matrix(rng, 3, 5);
    out.push_back(grad_case("matmul_nt", [&](Tape<double>& t) {
      return project(t, ad::matmul_nt(t, t.parameter(x), t.parameter(wt)), w);
    }, {&x, &wt}, tol));
  }
  {
    DiffTensor<double> a(random_matrix(rng, 3, 4)), b(random_matrix(rng, 3, 4));
    const M w = random_matrix(rng, 3, 4);
    out.push_back(grad_case("add", [&](Tape<double>& t) {
      return project(t, ad::add(t, t.parameter(a), t.parameter(b)), w);
    }, {&a, &b}, tol));
  }
  {
    DiffTensor<double> x(random_matrix(rng, 3, 4)), bias(random_matrix(rng, 1, 4));
    const M w = random_matrix(rng, 3, 4);
    out.push_back(grad_case("add_row", [&](Tape<double>& t) {
      return project(t, ad::add_row(t, t.parameter(x), t.parameter(bias)), w);
    }, {&x, &bias}, tol));
  }
  {
    DiffTensor<double> a(random_matrix(rng, 3, 4)), b(random_matrix(rng, 3, 4));
    const M w = random_matrix(rng, 3, 4);
    out.push_back(grad_case("mul", [&](Tape<double>& t) {
      return project(t, ad::mul(t, t.parameter(a), t.parameter(b)), w);
    }, {&a, &b}, tol));
  }
  {
    DiffTensor<double> x(random_matrix(rng, 2, 3));
    const M w = random_matrix(rng, 2, 3);
    out.push_back(grad_case("scale", [&](Tape<double>& t) {
      return project(t, ad::scale(t, t.parameter(x), -0.7), w);
    }, {&x}, tol));
  }
  {
    DiffTensor<double> x(random_matrix(rng, 4, 6)), g(random_matrix(rng, 1, 6)), o(random_matrix(rng, 1, 6));
    const M w = random_matrix(rng, 4, 6);
    out.push_back(grad_case("layer_norm", [&](Tape<double>& t) {
      return project(t, ad::layer_norm(t, t.parameter(x), t.parameter(g), t.parameter(o)), w);
    }, {&x, &g, &o}, tol));
  }
  {
    DiffTensor<double> x(random_matrix(rng, 4, 5, 1.5));
    const M w = random_matrix(rng, 4, 5);
    out.push_back(grad_case("gelu", [&](Tape<double>& t) {
      return project(t, ad::gelu(t, t.parameter(x)), w);
    }, {&x}, tol));
  }
  for (const bool causal : {false, true}) {
    DiffTensor<double> x(random_matrix(rng, 4, 4));
    const M w = random_matrix(rng, 4, 4);
    out.push_back(grad_case(causal ? "softmax_causal" : "softmax", [&](Tape<double>& t) {
      return project(t, ad::softmax(t, t.parameter(x), causal), w);
    }, {&x}, tol));
  }
  {
    const Eigen::Index batch = 2, seq = 3, heads = 2, d = 4;
    DiffTensor<double> q(random_matrix(rng, batch * seq, d)), k(random_matrix(rng, batch * seq, d)),
        v(random_matrix(rng, batch * seq, d));
    const M w = random_matrix(rng, batch * seq, d);
    out.push_back(grad_case("causal_attention", [&](Tape<double>& t) {
      return project(t, ad::causal_attention(t, t.parameter(q), t.parameter(k), t.parameter(v), batch, seq, heads),
                     w);
    }, {&q, &k, &v}, tol));
  }
  {
    DiffTensor<double> table(random_matrix(rng, 5, 3));
    const M w = random_matrix(rng, 4, 3);
    out.push_back(grad_case("gather_rows", [&](Tape<double>& t) {
      return project(t, ad::gather_rows(t, t.parameter(table), {4, 0, 4, 2}), w);
    }, {&table}, tol));
  }
  {
    DiffTensor<double> x(random_matrix(rng, 5, 3));
    const M target = random_matrix(rng, 2, 3);
    out.push_back(grad_case("row_mse", [&](Tape<double>& t) {
      return ad::row_mse(t, t.parameter(x), target, {0, 3});
    }, {&x}, tol));
  }
  {
    icl::ModelConfig cfg;
    cfg.layers = 2;
    cfg.embed_dim = 8;
    cfg.heads = 2;
    cfg.ffn_dim = 12;
    cfg.max_pairs = 3;
    cfg.users = 2;
    cfg.antennas = 4;
    Rng init = rng.split(1);
    auto params = icl::ModelParams<double>::init(cfg, init);
    // Non-zero biases and offsets so their gradients are exercised away from
    // the symmetric starting point.
    for (auto& [name, tensor] : params.named())
      if (name.find("b1") != std::string::npos || name.find("b2") != std::string::npos ||
          name.find("offset") != std::string::npos)
        tensor->value = random_matrix(rng, tensor->value.rows(), tensor->value.cols(), 0.1);
    const Eigen::Index batch = 2, seq = 6;
    const M tokens = random_matrix(rng, batch * seq, static_cast<Eigen::Index>(cfg.token_dim()));
    std::vector<Eigen::Index> rows;
    for (Eigen::Index b = 0; b < batch; ++b)
      for (Eigen::Index p = 0; p < seq / 2; ++p) rows.push_back(b * seq + 2 * p);
    const M targets = random_matrix(rng, static_cast<Eigen::Index>(rows.size()), 4, 0.7);
    out.push_back(grad_case("transformer_mse", [&](Tape<double>& t) {
      const Var o = icl::forward_tape(t, params, cfg, tokens, batch, seq);
      return ad::row_mse(t, o, targets, rows);
    }, params.tensors(), 1e-4));
  }
  return out;
}

namespace {

struct Suite {
  std::vector<CheckResult> results;

  void check(std::string name, const std::function<bool(std::string&)>& body) {
    CheckResult r{std::move(name), false, {}};
    try {
      r.passed = body(r.detail);
    } catch (const std::exception& e) {
      r.detail = std::string("exception: ") + e.what();
    }
    results.push_back(std::move(r));
  }
};

icl::ModelConfig toy_model(std::size_t users, std::size_t antennas) {
  icl::ModelConfig cfg;
  cfg.layers = 2;
  cfg.embed_dim = 16;
  cfg.heads = 2;
  cfg.ffn_dim = 32;
  cfg.max_pairs = 8;
  cfg.users = users;
  cfg.antennas = antennas;
  return cfg;
}

}  // namespace

std::vector<CheckResult> selftest_suite(std::uint64_t seed) {
  const Rng root(seed, 41);
  Suite s;
  const cplx j(0.0, 1.0);

  s.check("gaussian_zero_variance", [&](std::string&) {
    Rng r = root.split(0);
    return sample_complex_gaussian(r, 3, 5, 0.0).cwiseAbs().maxCoeff() == 0.0;
  });
  s.check("matmul_identity", [&](std::string&) {
    Rng r = root.split(1);
    const CMat b = sample_complex_gaussian(r, 3, 2, 1.0);
    return complex_matmul(CMat::Identity(3, 3), b) == b;
  });
  s.check("matmul_scalar", [&](std::string& d) {
    CMat a(1, 1), b(1, 1);
    a(0, 0) = cplx(2, 1);
    b(0, 0) = cplx(1, -1);
    const cplx v = complex_matmul(a, b)(0, 0);
    d = "got " + std::to_string(v.real()) + "+" + std::to_string(v.imag()) + "j";
    return v == cplx(3, -1);
  });
  s.check("matmul_loop_oracle", [&](std::string& d) {
    Rng r = root.split(2);
    const CMat a = sample_complex_gaussian(r, 5, 4, 1.0), b = sample_complex_gaussian(r, 4, 3, 1.0);
    const CMat c = complex_matmul(a, b);
    double worst = 0.0;
    for (int i = 0; i < 5; ++i)
      for (int k = 0; k < 3; ++k) {
        cplx acc = 0.0;
        for (int m = 0; m < 4; ++m) acc += a(i, m) * b(m, k);
        worst = std::max(worst, std::abs(c(i, k) - acc) / std::abs(acc));
      }
    d = "max rel err " + sci(worst);
    return worst < 1e-6;
  });

  s.check("grad_sum_ones", [&](std::string&) {
    DiffTensor<double> p(M::Constant(2, 3, 0.3));
    Tape<double> t;
    const Var l = ad::sum(t, t.parameter(p));
    std::vector<DiffTensor<double>*> ps{&p};
    ad::backward(t, l, std::span<DiffTensor<double>* const>(ps));
    return *p.grad == M::Ones(2, 3);
  });
  s.check("grad_sum_squares", [&](std::string&) {
    M v(1, 3);
    v << 1, 2, 3;
    DiffTensor<double> p(v);
    Tape<double> t;
    const Var x = t.parameter(p);
    const Var l = ad::sum(t, ad::mul(t, x, x));
    std::vector<DiffTensor<double>*> ps{&p};
    ad::backward(t, l, std::span<DiffTensor<double>* const>(ps));
    M want(1, 3);
    want << 2, 4, 6;
    return *p.grad == want;
  });

  s.check("qam4_points", [&](std::string&) {
    const Constellation c(4);
    const double a = 1.0 / std::sqrt(2.0);
    double power = 0.0;
    bool all_corners = true;
    for (const cplx& p : c.points()) {
      power += std::norm(p);
      all_corners = all_corners && std::abs(std::abs(p.real()) - a) < 1e-15 && std::abs(std::abs(p.imag()) - a) < 1e-15;
    }
    return all_corners && std::abs(power / 4.0 - 1.0) < 1e-15;
  });
  s.check("qam_gray_adjacency", [&](std::string& d) {
    for (std::size_t order : {4u, 16u, 64u}) {
      const Constellation c(order);
      double spacing = std::numeric_limits<double>::infinity();
      for (std::size_t a = 0; a < order; ++a)
        for (std::size_t b = a + 1; b < order; ++b) spacing = std::min(spacing, std::abs(c.point(a) - c.point(b)));
      for (std::size_t a = 0; a < order; ++a)
        for (std::size_t b = a + 1; b < order; ++b)
          if (std::abs(std::abs(c.point(a) - c.point(b)) - spacing) < 1e-9 &&
              std::popcount(static_cast<unsigned>(a ^ b)) != 1) {
            d = "M=" + std::to_string(order) + " neighbours " + std::to_string(a) + "," + std::to_string(b);
            return false;
          }
    }
    return true;
  });
  s.check("qam16_power", [&](std::string& d) {
    const Constellation c(16);
    double power = 0.0;
    for (const cplx& p : c.points()) power += std::norm(p);
    d = "mean power " + std::to_string(power / 16.0);
    return std::abs(power / 16.0 - 1.0) < 1e-7;
  });
  s.check("nearest_exact_point", [&](std::string&) {
    const Constellation c(16);
    for (std::size_t i = 0; i < c.order(); ++i)
      if (nearest_symbol(c.point(i), c) != i) return false;
    return true;
  });
  s.check("nearest_tie_origin", [&](std::string&) { return nearest_symbol(0.0, Constellation(4)) == 0; });
  s.check("nearest_brute_force", [&](std::string&) {
    Rng r = root.split(3);
    const Constellation c(16);
    for (int t = 0; t < 1000; ++t) {
      const cplx x(1.5 * r.normal(), 1.5 * r.normal());
      std::size_t best = 0;
      for (std::size_t i = 1; i < c.order(); ++i)
        if (std::abs(x - c.point(i)) < std::abs(x - c.point(best))) best = i;
      if (nearest_symbol(x, c) != best) return false;
    }
    return true;
  });

  s.check("multipath_single_unit_path", [&](std::string&) {
    MultipathSpec spec;
    spec.paths_per_user = {1};
    spec.gain_law = MultipathSpec::GainLaw::fixed;
    spec.gains = {1.0};
    spec.phase_law = MultipathSpec::PhaseLaw::fixed;
    spec.phases = {0.0};
    Rng r = root.split(4);
    const CMat h = synthesize_channel_multipath(r, 4, 2, spec);
    return (h - CMat::Ones(4, 2)).cwiseAbs().maxCoeff() == 0.0;
  });
  s.check("multipath_destructive", [&](std::string& d) {
    MultipathSpec spec;
    spec.paths_per_user = {2};
    spec.gain_law = MultipathSpec::GainLaw::fixed;
    spec.gains = {1.0, 1.0};
    spec.phase_law = MultipathSpec::PhaseLaw::fixed;
    spec.phases = {0.0, std::numbers::pi};
    Rng r = root.split(5);
    const double m = synthesize_channel_multipath(r, 3, 2, spec).cwiseAbs().maxCoeff();
    d = "max |h| " + sci(m);
    return m < 1e-15;
  });
  s.check("reference_unit_gain", [&](std::string&) {
    Rng r = root.split(6);
    const CVec ref = make_reference(r, 8, 0.0, 1);
    return (ref.cwiseAbs().array() - 1.0).abs().maxCoeff() < 1e-14;
  });
  s.check("reference_20db_four_users", [&](std::string&) {
    Rng r = root.split(7);
    const CVec ref = make_reference(r, 8, 20.0, 4);
    return (ref.cwiseAbs().array() - 20.0).abs().maxCoeff() < 1e-12;
  });

  s.check("measure_lo_only", [&](std::string&) {
    Rng r = root.split(8);
    ChannelScene scene{synthesize_channel_iid(r, 6, 2), make_reference(r, 6, 30.0, 2), 0.0};
    const RVec y = measure(scene, CVec::Zero(2), r).y;
    return y == scene.r_abs();
  });
  s.check("measure_unit_symbol", [&](std::string& d) {
    ChannelScene scene{CMat::Ones(1, 1), CVec::Zero(1), 0.0};
    Rng r = root.split(9);
    CVec sv(1);
    sv(0) = (1.0 + j) / std::sqrt(2.0);
    const double y = measure(scene, sv, r).y(0);
    d = "y = " + std::to_string(y);
    return std::abs(y - 1.0) < 1e-15;
  });
  s.check("linearize_lo_only", [&](std::string&) {
    Rng r = root.split(10);
    ChannelScene scene{synthesize_channel_iid(r, 4, 1), make_reference(r, 4, 30.0, 1), 0.0};
    return linearize(scene.r_abs(), scene).cwiseAbs().maxCoeff() == 0.0;
  });
  s.check("symbol_block_single_column", [&](std::string&) {
    Rng r = root.split(11);
    ChannelScene scene{synthesize_channel_iid(r, 8, 2), make_reference(r, 8, 30.0, 2), 0.1};
    const Constellation c(4);
    Rng a = root.split(12), b = root.split(12);
    const SymbolBlock block = gen_symbol_block(scene, c, 1, a);
    CVec sv(2);
    for (int k = 0; k < 2; ++k) sv(k) = c.point(b.uniform_index(4));
    return block.raw.col(0) == measure(scene, sv, b).y;
  });
  s.check("symbol_block_identities", [&](std::string&) {
    Rng r = root.split(13);
    const Constellation c(4);
    for (int t = 0; t < 1000; ++t) {
      ChannelScene scene{synthesize_channel_iid(r, 8, 2), make_reference(r, 8, 30.0, 2), 1.0};
      const SymbolBlock block = gen_symbol_block(scene, c, 4, r);
      if (block.raw.minCoeff() < 0.0) return false;
      const RMat rebuilt = block.linearized.colwise() + scene.r_abs();
      if (rebuilt != block.raw) return false;
    }
    return true;
  });
  s.check("ber_counting", [&](std::string& d) {
    BitMatrix a(4, 4), b(4, 4), comp(4, 4), flip(4, 4);
    Rng r = root.split(14);
    for (std::size_t i = 0; i < 16; ++i) {
      a.bits[i] = static_cast<std::uint8_t>(r.uniform_index(2));
      b.bits[i] = a.bits[i];
      comp.bits[i] = static_cast<std::uint8_t>(1 - a.bits[i]);
      flip.bits[i] = a.bits[i];
    }
    for (std::size_t i : {1u, 7u, 12u}) flip.bits[i] ^= 1;
    const double e0 = bit_error_rate(a, b), e1 = bit_error_rate(a, comp), e3 = bit_error_rate(a, flip);
    d = std::to_string(e0) + " " + std::to_string(e1) + " " + std::to_string(e3);
    return e0 == 0.0 && e1 == 1.0 && e3 == 0.1875;
  });

  s.check("pgd_zero_pilots", [&](std::string&) {
    Rng r = root.split(15);
    const CMat phi = CMat::Zero(2, 4);
    const RMat z = RMat::Zero(8, 4);
    const CVec dvec = make_reference(r, 8, 30.0, 2).cwiseAbs().cast<cplx>();
    Rng a = root.split(16), b = root.split(16);
    const EstimationResult est = pgd_channel_estimate(z, phi, dvec, PgdConfig{}, a);
    const CMat h0 = sample_complex_gaussian(b, 8, 2, 1.0);
    return est.h == h0 && linear_channel_descent_direction(z, phi, dvec, h0).cwiseAbs().maxCoeff() == 0.0;
  });
  s.check("bgs_scalar_phase_retrieval", [&](std::string& d) {
    RMat z(1, 1);
    z(0, 0) = 1.7;
    const CMat phi = CMat::Ones(1, 1);
    Rng r = root.split(17);
    const EstimationResult est = bgs_channel_estimate(z, phi, CVec::Zero(1), BgsConfig::channel_defaults(), r);
    d = "objective " + sci(est.trace.back()) + " |h| " + std::to_string(std::abs(est.h(0, 0)));
    return est.trace.back() < 1e-24 && std::abs(std::abs(est.h(0, 0)) - 1.7) < 1e-12;
  });
  s.check("ml_single_user_scan", [&](std::string&) {
    Rng r = root.split(18);
    const Constellation c(4);
    for (int t = 0; t < 50; ++t) {
      const CMat h = synthesize_channel_iid(r, 4, 1);
      const CVec ref = make_reference(r, 4, 10.0, 1);
      RVec y(4);
      for (int n = 0; n < 4; ++n) y(n) = std::abs(r.normal()) * 3.0;
      std::size_t best = 0;
      double best_v = std::numeric_limits<double>::infinity();
      for (std::size_t i = 0; i < 4; ++i) {
        const double v = ((h.col(0) * c.point(i) + ref).cwiseAbs() - y).squaredNorm();
        if (v < best_v) best_v = v, best = i;
      }
      if (ml_detect(y, h, ref, c) != std::vector<std::size_t>{best}) return false;
    }
    return true;
  });
  s.check("ml_noiseless_truth", [&](std::string&) {
    Rng r = root.split(19);
    const Constellation c(4);
    for (int t = 0; t < 100; ++t) {
      ChannelScene scene{synthesize_channel_iid(r, 8, 2), make_reference(r, 8, 30.0, 2), 0.0};
      std::vector<std::size_t> truth(2);
      CVec sv(2);
      for (int k = 0; k < 2; ++k) {
        truth[static_cast<std::size_t>(k)] = r.uniform_index(4);
        sv(k) = c.point(truth[static_cast<std::size_t>(k)]);
      }
      if (ml_detect(measure(scene, sv, r).y, scene.h, scene.r, c) != truth) return false;
    }
    return true;
  });
  s.check("ml_brute_force_k3", [&](std::string&) {
    Rng r = root.split(20);
    const Constellation c(4);
    for (int t = 0; t < 20; ++t) {
      ChannelScene scene{synthesize_channel_iid(r, 8, 3), make_reference(r, 8, 30.0, 3), 0.5};
      CVec sv(3);
      for (int k = 0; k < 3; ++k) sv(k) = c.point(r.uniform_index(4));
      const RVec y = measure(scene, sv, r).y;
      std::vector<std::size_t> best;
      double best_v = std::numeric_limits<double>::infinity();
      for (std::size_t a = 0; a < 4; ++a)
        for (std::size_t b = 0; b < 4; ++b)
          for (std::size_t e = 0; e < 4; ++e) {
            CVec cand(3);
            cand << c.point(a), c.point(b), c.point(e);
            const double v = ((scene.h * cand + scene.r).cwiseAbs() - y).squaredNorm();
            if (v < best_v) best_v = v, best = {a, b, e};
          }
      if (ml_detect(y, scene.h, scene.r, c) != best) return false;
    }
    return true;
  });

  s.check("token_dim_formula", [&](std::string&) {
    const icl::ModelConfig cfg = toy_model(8, 8);
    Rng r = root.split(21);
    const Constellation c(4);
    ChannelScene scene{synthesize_channel_iid(r, 8, 8), make_reference(r, 8, 30.0, 8), 0.0};
    const SymbolBlock block = gen_symbol_block(scene, c, 2, r);
    const icl::TokenSeq seq = icl::tokenize(block.linearized, block.symbols, std::nullopt, cfg);
    return cfg.token_dim() == 16 && seq.tokens.cols() == 16 && seq.tokens.row(0).tail(8).isZero(0.0) &&
           seq.tokens.row(0).head(8) == block.linearized.col(0).transpose();
  });
  s.check("tokenize_empty_context", [&](std::string&) {
    const icl::ModelConfig cfg = toy_model(2, 8);
    const RVec q = RVec::Ones(8);
    const icl::TokenSeq seq = icl::tokenize(RMat(8, 0), CMat(2, 0), q, cfg);
    return seq.size() == 1 && seq.roles[0] == icl::TokenRole::query;
  });

  const icl::ModelConfig cfg = toy_model(2, 8);
  Rng init = root.split(22);
  const auto params = icl::ModelParams<double>::init(cfg, init);
  const auto params_f = icl::ModelParams<float>::init(cfg, init);
  const Constellation c4(4);
  Rng prompt_rng = root.split(23);
  ChannelScene scene{synthesize_channel_iid(prompt_rng, 8, 2), make_reference(prompt_rng, 8, 30.0, 2), 0.2};
  const SymbolBlock ctx = gen_symbol_block(scene, c4, 6, prompt_rng);
  const SymbolBlock queries = gen_symbol_block(scene, c4, 10, prompt_rng);

  s.check("causal_query_invariance", [&](std::string&) {
    const RMat z = ctx.linearized.leftCols(5);
    const CMat phi = ctx.symbols.leftCols(5);
    const auto a = icl::forward(params_f, cfg, icl::tokenize(z, phi, RVec(queries.linearized.col(0)), cfg));
    const auto b = icl::forward(params_f, cfg, icl::tokenize(z, phi, RVec(queries.linearized.col(1)), cfg));
    return a.topRows(10) == b.topRows(10);
  });
  s.check("prefix_property", [&](std::string&) {
    const auto a = icl::forward(params_f, cfg,
                                icl::tokenize(ctx.linearized.leftCols(5), ctx.symbols.leftCols(5),
                                              RVec(ctx.linearized.col(5)), cfg));
    const auto b = icl::forward(params_f, cfg, icl::tokenize(ctx.linearized, ctx.symbols, std::nullopt, cfg));
    return a == b.topRows(11);
  });
  s.check("mse_perfect_prediction", [&](std::string&) {
    M out = M::Zero(3, 4);
    CMat sym(2, 2);
    sym << cplx(1, 2), cplx(3, 4), cplx(-1, 0.5), cplx(0, -2);
    for (int i = 0; i < 2; ++i)
      for (int k = 0; k < 2; ++k) {
        out(2 * i, k) = sym(k, i).real();
        out(2 * i, 2 + k) = sym(k, i).imag();
      }
    return icl::mse_loss(out, sym) == 0.0;
  });
  s.check("mse_hand_value", [&](std::string&) {
    M out(1, 2);
    out << 1.0, 0.0;
    CMat sym(1, 1);
    sym(0, 0) = j;
    return icl::mse_loss(out, sym) == 2.0;
  });
  s.check("cosine_schedule_points", [&](std::string&) {
    return icl::cosine_learning_rate(0.1, 0, 100) == 0.1 && std::abs(icl::cosine_learning_rate(0.1, 50, 100) - 0.05) < 1e-15 &&
           icl::cosine_learning_rate(0.1, 100, 100) == 0.0;
  });
  s.check("adamw_zero_learning_rate", [&](std::string&) {
    auto p = params;
    const auto before = params;
    Rng r = root.split(24);
    for (auto* t : p.tensors()) t->grad = random_matrix(r, t->value.rows(), t->value.cols());
    icl::AdamW<double> opt(0.9, 0.999, 1e-8, 0.01);
    opt.step(p.tensors(), 0.0);
    const auto after = p.named();
    const auto ref = before.named();
    for (std::size_t i = 0; i < after.size(); ++i)
      if (after[i].second->value != ref[i].second->value) return false;
    return true;
  });
  s.check("detect_empty_context", [&](std::string&) {
    const RVec y = queries.linearized.col(0);
    const auto det = icl::detect(params, cfg, RMat(8, 0), CMat(2, 0), y, c4);
    const auto direct = icl::forward(params, cfg, icl::tokenize(RMat(8, 0), CMat(2, 0), y, cfg));
    bool ok = det.hard.size() == 2 && det.soft == icl::output_symbols(direct, 0);
    for (std::size_t h : det.hard) ok = ok && h < 4;
    return ok;
  });
  s.check("incremental_matches_full", [&](std::string& d) {
    auto cache = icl::build_context_cache(params, cfg, ctx.linearized, ctx.symbols);
    double worst = 0.0;
    for (Eigen::Index q = 0; q < 10; ++q) {
      const RVec y = queries.linearized.col(q);
      const auto inc = icl::incremental_detect(params, cfg, cache, y, c4);
      const auto full = icl::detect(params, cfg, ctx.linearized, ctx.symbols, y, c4);
      worst = std::max(worst, (inc.soft - full.soft).cwiseAbs().maxCoeff());
    }
    d = "max abs diff " + sci(worst);
    return worst < 1e-5;
  });

  const auto tmp = std::filesystem::temp_directory_path() /
                   ("atomicl-selftest-" + std::to_string(seed) + "-" + std::to_string(::getpid()) + ".ckpt");
  s.check("checkpoint_round_trip", [&](std::string&) {
    const auto bytes = icl::serialize_checkpoint(params, cfg);
    icl::save_checkpoint(params, cfg, tmp);
    const auto loaded = icl::load_checkpoint<double>(tmp);
    return loaded.config == cfg && icl::serialize_checkpoint(loaded.params, loaded.config) == bytes;
  });
  s.check("checkpoint_truncated", [&](std::string& d) {
    auto bytes = icl::serialize_checkpoint(params, cfg);
    bytes.resize(bytes.size() / 2);
    try {
      (void)icl::deserialize_checkpoint<double>(bytes);
    } catch (const icl::CheckpointError& e) {
      d = e.what();
      return true;
    }
    return false;
  });
  s.check("checkpoint_cross_precision", [&](std::string& d) {
    try {
      (void)icl::deserialize_checkpoint<float>(icl::serialize_checkpoint(params, cfg));
    } catch (const icl::CheckpointError& e) {
      d = e.what();
      return d.find("cross-precision") != std::string::npos;
    }
    return false;
  });
  std::error_code ec;
  std::filesystem::remove(tmp, ec);
  return s.results;
}

std::size_t report_checks(std::ostream& out, const std::vector<CheckResult>& results) {
  std::size_t failures = 0;
  std::size_t width = 0;
  for (const auto& r : results) width = std::max(width, r.name.size());
  for (const auto& r : results) {
    if (!r.passed) ++failures;
    out << (r.passed ? "PASS " : "FAIL ") << r.name << std::string(width - r.name.size() + 2, ' ') << r.detail
        << '\n';
  }
  out << results.size() - failures << "/" << results.size() << " passed\n";
  return failures;
}

}  // namespace atomicl::harness
