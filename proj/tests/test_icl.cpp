#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <numbers>

#include <unistd.h>

#include "atomicl/icl/checkpoint.hpp"
#include "atomicl/icl/detector.hpp"
#include "atomicl/icl/model.hpp"
#include "atomicl/icl/tokenizer.hpp"
#include "atomicl/icl/train.hpp"
#include "oracles.hpp"

using namespace atomicl;
using namespace atomicl::icl;

namespace {

ModelConfig small_config(bool positional = true) {
  ModelConfig cfg;
  cfg.layers = 2;
  cfg.embed_dim = 8;
  cfg.heads = 2;
  cfg.ffn_dim = 12;
  cfg.max_pairs = 6;
  cfg.users = 2;
  cfg.antennas = 4;
  cfg.positional = positional;
  return cfg;
}

// Random biases and layer-norm parameters so the oracle comparison covers
// every tensor, not just the projections.
template <typename T>
ModelParams<T> perturbed(const ModelConfig& cfg, std::uint64_t seed) {
  Rng rng(seed);
  auto p = ModelParams<T>::init(cfg, rng);
  for (auto& l : p.layers)
    for (auto* t : {&l.ln1_gain, &l.ln1_offset, &l.b1, &l.b2, &l.ln2_gain, &l.ln2_offset})
      for (Eigen::Index i = 0; i < t->value.size(); ++i) t->value(i) += static_cast<T>(0.3 * rng.normal());
  return p;
}

Task sample_task(const ModelConfig& cfg, std::uint64_t seed, std::size_t pairs) {
  TaskSampler sampler(cfg, TaskSpec{});
  Rng rng(seed);
  return sampler.sample(rng, pairs);
}

std::filesystem::path temp_path(const std::string& stem) {
  return std::filesystem::temp_directory_path() / (stem + "_" + std::to_string(::getpid()) + ".ckpt");
}

}  // namespace

TEST_CASE("tokenizer layout") {
  ModelConfig cfg = small_config();
  cfg.antennas = 3;  // D_T = max(3, 4) = 4
  const RMat z = (RMat(3, 2) << 1, 2, 3, 4, 5, 6).finished();
  const CMat phi = (CMat(2, 2) << cplx(1, -1), cplx(2, -2), cplx(3, -3), cplx(4, -4)).finished();
  const RVec y = (RVec(3) << 7, 8, 9).finished();
  const TokenSeq seq = tokenize(z, phi, y, cfg);
  REQUIRE(seq.size() == 5);
  REQUIRE(seq.tokens.cols() == 4);
  CHECK(seq.roles == std::vector<TokenRole>{TokenRole::measurement, TokenRole::symbol, TokenRole::measurement,
                                            TokenRole::symbol, TokenRole::query});
  CHECK(seq.tokens.row(0) == (RVec(4) << 1, 3, 5, 0).finished().transpose());
  CHECK(seq.tokens.row(1) == (RVec(4) << 1, 3, -1, -3).finished().transpose());
  CHECK(seq.tokens.row(2) == (RVec(4) << 2, 4, 6, 0).finished().transpose());
  CHECK(seq.tokens.row(3) == (RVec(4) << 2, 4, -2, -4).finished().transpose());
  CHECK(seq.tokens.row(4) == (RVec(4) << 7, 8, 9, 0).finished().transpose());

  CHECK(tokenize(z, phi, std::nullopt, cfg).size() == 4);
  CHECK(tokenize(RMat(3, 0), CMat(2, 0), y, cfg).size() == 1);

  CHECK_THROWS_AS(tokenize(z, CMat::Zero(2, 3), y, cfg), std::invalid_argument);
  CHECK_THROWS_AS(tokenize(z, CMat::Zero(3, 2), y, cfg), std::invalid_argument);
  CHECK_THROWS_AS(tokenize(RMat::Zero(2, 2), phi, std::nullopt, cfg), std::invalid_argument);
  CHECK_THROWS_AS(tokenize(z, phi, RVec::Zero(2), cfg), std::invalid_argument);
  CHECK_THROWS_AS(tokenize(RMat::Zero(3, 7), CMat::Zero(2, 7), std::nullopt, cfg), std::invalid_argument);
}

TEST_CASE("model configuration") {
  ModelConfig cfg = small_config();
  CHECK(cfg.token_dim() == 4);
  cfg.antennas = 8;
  CHECK(cfg.token_dim() == 8);
  CHECK(cfg.max_tokens() == 13);
  CHECK_NOTHROW(cfg.validate());
  cfg.heads = 3;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = small_config();
  cfg.layers = 0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}

TEST_CASE("initialisation") {
  ModelConfig cfg = small_config();
  cfg.embed_dim = 64;
  cfg.ffn_dim = 256;
  cfg.heads = 4;
  Rng rng(3);
  const auto p = ModelParams<double>::init(cfg, rng);
  CHECK_NOTHROW(p.check_shapes(cfg));
  CHECK(p.positional.value.rows() == 13);
  const auto& w1 = p.layers[0].w1.value;
  const double var = w1.squaredNorm() / static_cast<double>(w1.size());
  CHECK(var == doctest::Approx(2.0 / (64 + 256)).epsilon(0.05));
  CHECK(p.layers[0].ln1_gain.value.isOnes());
  CHECK(p.layers[0].b1.value.isZero());

  std::size_t count = 0;
  for (const auto& [name, t] : p.named()) count += static_cast<std::size_t>(t->value.size());
  CHECK(count == p.parameter_count());

  const auto off = ModelParams<double>::init(small_config(false), rng);
  CHECK(off.positional.value.size() == 0);
  CHECK_THROWS_AS(off.check_shapes(small_config(true)), std::invalid_argument);
}

TEST_CASE("forward pass matches the straight-line oracle") {
  for (bool positional : {true, false}) {
    const ModelConfig cfg = small_config(positional);
    const auto params = perturbed<double>(cfg, positional ? 11 : 12);
    const Task task = sample_task(cfg, 13, 5);
    const TokenSeq seq = tokenize(task.block.linearized.leftCols(5), task.block.symbols.leftCols(5),
                                  RVec(task.block.linearized.col(4)), cfg);
    const auto out = forward(params, cfg, seq);
    const auto ref = oracle::transformer(params, cfg, oracle::to_grid(seq.tokens));
    double worst = 0.0;
    for (Eigen::Index i = 0; i < out.rows(); ++i)
      for (Eigen::Index j = 0; j < out.cols(); ++j)
        worst = std::max(worst, std::abs(out(i, j) - ref[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)]));
    CHECK(worst < 1e-10);

    // The batched and taped paths agree with the single-sequence path.
    Matrix<double> stacked(2 * seq.size(), cfg.token_dim());
    stacked << seq.tokens, seq.tokens;
    const auto batched = forward_batch(params, cfg, stacked, 2, static_cast<Eigen::Index>(seq.size()));
    CHECK((batched.topRows(out.rows()) - out).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((batched.bottomRows(out.rows()) - out).cwiseAbs().maxCoeff() < 1e-12);
    ad::Tape<double> tape;
    auto mutable_params = params;
    const ad::Var v = forward_tape(tape, mutable_params, cfg, stacked, 2, static_cast<Eigen::Index>(seq.size()));
    CHECK((tape.value(v) - batched).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("outputs depend only on earlier tokens") {
  const ModelConfig cfg = small_config();
  const auto params = perturbed<float>(cfg, 21);
  Rng rng(22);
  for (int t = 0; t < 20; ++t) {
    const std::size_t len = 2 + rng.uniform_index(cfg.max_tokens() - 1);
    Matrix<float> tokens(static_cast<Eigen::Index>(len), cfg.token_dim());
    for (Eigen::Index i = 0; i < tokens.size(); ++i) tokens(i) = static_cast<float>(rng.normal());
    const auto full = forward(params, cfg, TokenSeq{tokens.cast<double>(), std::vector<TokenRole>(len)});

    const Eigen::Index cut = static_cast<Eigen::Index>(rng.uniform_index(len - 1));
    Matrix<float> changed = tokens;
    for (Eigen::Index i = cut + 1; i < changed.rows(); ++i)
      for (Eigen::Index j = 0; j < changed.cols(); ++j) changed(i, j) = static_cast<float>(rng.normal());
    const auto other = forward(params, cfg, TokenSeq{changed.cast<double>(), std::vector<TokenRole>(len)});
    REQUIRE(full.topRows(cut + 1) == other.topRows(cut + 1));

    const auto prefix = forward(params, cfg,
                                TokenSeq{tokens.topRows(cut + 1).cast<double>(), std::vector<TokenRole>(static_cast<std::size_t>(cut + 1))});
    REQUIRE(prefix == full.topRows(cut + 1));
  }
}

TEST_CASE("forward validation") {
  const ModelConfig cfg = small_config();
  Rng rng(23);
  const auto params = ModelParams<double>::init(cfg, rng);
  CHECK_THROWS_AS(forward(params, cfg, TokenSeq{RMat::Zero(3, 5), std::vector<TokenRole>(3)}), std::invalid_argument);
  CHECK_THROWS_AS(forward(params, cfg, TokenSeq{RMat::Zero(14, 4), std::vector<TokenRole>(14)}), std::invalid_argument);
  auto broken = params;
  broken.layers[1].w1.value(0, 0) = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(forward(broken, cfg, TokenSeq{RMat::Ones(3, 4), std::vector<TokenRole>(3)}), NonFiniteError);
}

TEST_CASE("detection paths") {
  const ModelConfig cfg = small_config();
  const auto params = perturbed<double>(cfg, 31);
  const Constellation c(4);
  const Task task = sample_task(cfg, 32, 6);
  const RMat z = task.block.linearized.leftCols(5);
  const CMat phi = task.block.symbols.leftCols(5);
  const RVec y = task.block.linearized.col(5);

  SUBCASE("full detection reads the last output") {
    const auto det = detect(params, cfg, z, phi, y, c);
    const auto out = forward(params, cfg, tokenize(z, phi, y, cfg));
    const CVec last = output_symbols(out, out.rows() - 1);
    CHECK((det.soft - last).cwiseAbs().maxCoeff() == 0.0);
    for (std::size_t k = 0; k < 2; ++k) CHECK(det.hard[k] == nearest_symbol(last(static_cast<Eigen::Index>(k)), c));
  }
  SUBCASE("cached context gives the same answer for repeated queries") {
    auto cache = build_context_cache(params, cfg, z, phi);
    CHECK(cache.tokens == 10);
    for (int q = 0; q < 3; ++q) {
      const RVec yq = task.block.linearized.col(q);
      const auto inc = incremental_detect(params, cfg, cache, yq, c);
      const auto full = detect(params, cfg, z, phi, yq, c);
      CHECK((inc.soft - full.soft).cwiseAbs().maxCoeff() < 1e-12);
      CHECK(inc.hard == full.hard);
      CHECK(cache.tokens == 10);
    }
  }
  SUBCASE("no context") {
    const auto det = detect(params, cfg, RMat(4, 0), CMat(2, 0), y, c);
    auto cache = build_context_cache(params, cfg, RMat(4, 0), CMat(2, 0));
    CHECK(cache.tokens == 0);
    CHECK((incremental_detect(params, cfg, cache, y, c).soft - det.soft).cwiseAbs().maxCoeff() < 1e-12);
  }
  SUBCASE("bad inputs") {
    auto cache = build_context_cache(params, cfg, z, phi);
    CHECK_THROWS_AS(incremental_detect(params, cfg, cache, RVec::Zero(3), c), std::invalid_argument);
    auto odd = KvCache<double>::empty(cfg);
    forward_cached(params, cfg, odd, Matrix<double>(Matrix<double>::Ones(1, 4)), true);
    CHECK_THROWS_AS(incremental_detect(params, cfg, odd, y, c), std::invalid_argument);
  }
}

TEST_CASE("prompt MSE") {
  Matrix<double> out(5, 4);
  for (Eigen::Index i = 0; i < out.size(); ++i) out(i) = 0.1 * static_cast<double>(i);
  CMat s(2, 3);
  s << cplx(1, 0), cplx(0, 1), cplx(-1, 1), cplx(0.5, 0.5), cplx(2, 0), cplx(0, 0);
  double expect = 0.0;
  for (Eigen::Index i = 0; i < 3; ++i)
    for (Eigen::Index k = 0; k < 2; ++k) expect += std::norm(cplx(out(2 * i, k), out(2 * i, k + 2)) - s(k, i));
  CHECK(mse_loss(out, s) == doctest::Approx(expect / 3.0).epsilon(1e-14));
}

TEST_CASE("task sampling") {
  const ModelConfig cfg = small_config();
  TaskSpec spec;
  spec.snr_min_db = 2.0;
  spec.snr_max_db = 5.0;
  const TaskSampler sampler(cfg, spec);
  Rng rng(41);
  double lo = 1e9, hi = -1e9;
  for (int t = 0; t < 500; ++t) {
    const Task task = sampler.sample(rng, 4);
    lo = std::min(lo, task.snr_db);
    hi = std::max(hi, task.snr_db);
    REQUIRE(task.scene.noise_variance == doctest::Approx(std::pow(10.0, -task.snr_db / 10.0)));
    REQUIRE(task.block.count() == 4);
  }
  CHECK(lo >= 2.0);
  CHECK(hi <= 5.0);
  CHECK(lo < 2.1);
  CHECK(hi > 4.9);

  const Task task = sampler.sample(rng, 3);
  Matrix<double> tokens = Matrix<double>::Zero(8, cfg.token_dim()), targets = Matrix<double>::Zero(4, 4);
  sampler.fill(task, tokens, 1, targets, 1);
  const TokenSeq seq = tokenize(task.block.linearized, task.block.symbols, std::nullopt, cfg);
  CHECK(tokens.middleRows(1, 6) == seq.tokens);
  CHECK(tokens.row(0).isZero());
  for (Eigen::Index i = 0; i < 3; ++i)
    for (Eigen::Index k = 0; k < 2; ++k) {
      CHECK(targets(1 + i, k) == task.block.symbols(k, i).real());
      CHECK(targets(1 + i, 2 + k) == task.block.symbols(k, i).imag());
    }
}

TEST_CASE("learning-rate schedule") {
  CHECK(cosine_learning_rate(1e-3, 0, 100) == doctest::Approx(1e-3));
  CHECK(cosine_learning_rate(1e-3, 50, 100) == doctest::Approx(5e-4));
  CHECK(cosine_learning_rate(1e-3, 25, 100) == doctest::Approx(5e-4 * (1 + std::cos(std::numbers::pi / 4))));
  CHECK(cosine_learning_rate(1e-3, 100, 100) == doctest::Approx(0.0));
  CHECK(cosine_learning_rate(1e-3, 150, 100) == 0.0);
}

TEST_CASE("AdamW against a hand-rolled update") {
  const double b1 = 0.9, b2 = 0.999, eps = 1e-8, wd = 0.01, lr = 1e-2;
  ad::DiffTensor<double> p(Matrix<double>::Constant(1, 3, 1.0));
  AdamW<double> opt(b1, b2, eps, wd);
  double m[3] = {0, 0, 0}, v[3] = {0, 0, 0}, w[3] = {1, 1, 1};
  const double grads[2][3] = {{0.5, -2.0, 0.0}, {1.0, 1.0, -1.0}};
  for (int t = 1; t <= 2; ++t) {
    p.grad = Matrix<double>(1, 3);
    for (int i = 0; i < 3; ++i) (*p.grad)(i) = grads[t - 1][i];
    opt.step({&p}, lr);
    for (int i = 0; i < 3; ++i) {
      const double g = grads[t - 1][i];
      m[i] = b1 * m[i] + (1 - b1) * g;
      v[i] = b2 * v[i] + (1 - b2) * g * g;
      const double mh = m[i] / (1 - std::pow(b1, t)), vh = v[i] / (1 - std::pow(b2, t));
      w[i] = w[i] * (1 - lr * wd) - lr * mh / (std::sqrt(vh) + eps);
    }
    for (int i = 0; i < 3; ++i) CHECK(p.value(i) == doctest::Approx(w[i]).epsilon(1e-12));
  }
  CHECK(opt.steps_taken() == 2);
}

TEST_CASE("checkpoints") {
  const ModelConfig cfg = small_config();
  const auto params = perturbed<double>(cfg, 51);

  SUBCASE("round trip is exact and deterministic") {
    const auto bytes = serialize_checkpoint(params, cfg);
    CHECK(bytes == serialize_checkpoint(params, cfg));
    const auto back = deserialize_checkpoint<double>(bytes);
    CHECK(back.config == cfg);
    for (std::size_t i = 0; i < params.named().size(); ++i)
      CHECK(back.params.named()[i].second->value == params.named()[i].second->value);
  }
  SUBCASE("file round trip") {
    const auto path = temp_path("atomicl_test_icl");
    save_checkpoint(params, cfg, path);
    CHECK(checkpoint_dtype(path) == "f64");
    CHECK(load_checkpoint<double>(path).params.output.value == params.output.value);
    CHECK_THROWS_AS(load_checkpoint<float>(path), CheckpointError);
    std::filesystem::remove(path);
    CHECK_THROWS_AS(load_checkpoint<double>(path), CheckpointError);
  }
  SUBCASE("damaged input") {
    auto bytes = serialize_checkpoint(params, cfg);
    auto cut = bytes;
    cut.resize(bytes.size() - 1);
    CHECK_THROWS_AS(deserialize_checkpoint<double>(cut), CheckpointError);
    cut.resize(4);
    CHECK_THROWS_AS(deserialize_checkpoint<double>(cut), CheckpointError);
    auto foreign = bytes;
    foreign[10] ^= 0x20;
    CHECK_THROWS_AS(deserialize_checkpoint<double>(foreign), CheckpointError);
  }
}

TEST_CASE("pre-training") {
  ModelConfig cfg = small_config();
  cfg.max_pairs = 4;
  const TaskSampler sampler(cfg, TaskSpec{});
  TrainConfig train;
  train.steps = 150;
  train.batch = 16;
  train.micro_batch = 4;
  train.learning_rate = 3e-3;
  train.log_interval = 50;
  train.seed = 61;

  std::vector<TrainProgress> log;
  const auto a = pretrain<double>(cfg, train, sampler, std::nullopt, [&](const TrainProgress& p) { log.push_back(p); });
  CHECK(a.status == TrainStatus::completed);
  CHECK(a.steps_completed == 150);
  REQUIRE(a.losses.size() == 150);
  double head = 0.0, tail = 0.0;
  for (int i = 0; i < 20; ++i) {
    head += a.losses[static_cast<std::size_t>(i)];
    tail += a.losses[a.losses.size() - 1 - static_cast<std::size_t>(i)];
  }
  CHECK(tail < 0.8 * head);
  CHECK(log.size() >= 3);

  SUBCASE("same seed, same parameters") {
    const auto b = pretrain<double>(cfg, train, sampler);
    CHECK(b.losses == a.losses);
    CHECK(b.params.output.value == a.params.output.value);
  }
  SUBCASE("micro-batching does not change the step") {
    TrainConfig whole = train;
    whole.micro_batch = 0;
    whole.steps = 3;
    TrainConfig split = whole;
    split.micro_batch = 4;
    const auto x = pretrain<double>(cfg, whole, sampler), y = pretrain<double>(cfg, split, sampler);
    CHECK((x.params.output.value - y.params.output.value).cwiseAbs().maxCoeff() < 1e-10);
  }
  SUBCASE("validation report") {
    const auto report = validate_model(a.params, cfg, sampler, 32, 62, 8);
    CHECK(report.tasks == 32);
    REQUIRE(report.mse_by_position.size() == 4);
    double mean = 0.0;
    for (double v : report.mse_by_position) mean += v;
    CHECK(report.mean_mse == doctest::Approx(mean / 4.0));
    CHECK(report.no_context_mse == doctest::Approx(report.mse_by_position[0]).epsilon(1e-9));
  }
  SUBCASE("invalid settings") {
    TrainConfig bad = train;
    bad.batch = 0;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = train;
    bad.learning_rate = -1.0;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  }
}
