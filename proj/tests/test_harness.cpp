#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <unistd.h>

#include "atomicl/harness/config.hpp"
#include "atomicl/harness/experiments.hpp"
#include "atomicl/harness/stats.hpp"
#include "atomicl/icl/checkpoint.hpp"
#include "atomicl/icl/train.hpp"

using namespace atomicl;
using namespace atomicl::harness;

namespace {

struct TempDir {
  std::filesystem::path path =
      std::filesystem::temp_directory_path() / ("atomicl_harness_" + std::to_string(::getpid()));
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
};

std::filesystem::path temp_dir() {
  static const TempDir dir;
  std::filesystem::create_directories(dir.path);
  return dir.path;
}

ExperimentConfig quick_config() {
  ExperimentConfig cfg;
  cfg.snr_grid_db = {0, 8};
  cfg.user_grid = {1, 2};
  cfg.detectors = {Detector::ml, Detector::pgd_bgs, Detector::bgs_bgs};
  cfg.trials = 3;
  cfg.system.data_symbols = 8;
  cfg.classical.pgd_iterations = 50;
  cfg.classical.bgs_channel_iterations = 30;
  cfg.classical.bgs_equalizer_iterations = 20;
  cfg.runtime.warmup = 0;
  cfg.runtime.frames = 2;
  return cfg;
}

// A barely trained model is enough to exercise the ICL plumbing.
std::string tiny_checkpoint(std::size_t users) {
  icl::ModelConfig m;
  m.layers = 1;
  m.embed_dim = 8;
  m.heads = 2;
  m.ffn_dim = 16;
  m.max_pairs = 16;
  m.users = users;
  m.antennas = 8;
  Rng rng(users);
  const auto params = icl::ModelParams<float>::init(m, rng);
  const auto path = temp_dir() / ("tiny_k" + std::to_string(users) + ".ckpt");
  icl::save_checkpoint(params, m, path);
  return path.string();
}

std::string csv(const std::vector<ResultRow>& rows) {
  std::ostringstream out;
  write_ber_csv(out, rows);
  return out.str();
}

}  // namespace

TEST_CASE("Wilson interval") {
  for (auto [e, n] : {std::pair<std::size_t, std::size_t>{0, 100}, {5, 100}, {50, 100}, {100, 100}, {37, 51200}}) {
    const double z = 1.96, nn = static_cast<double>(n), p = static_cast<double>(e) / nn;
    const double centre = (p + z * z / (2 * nn)) / (1 + z * z / nn);
    const double half = z / (1 + z * z / nn) * std::sqrt(p * (1 - p) / nn + z * z / (4 * nn * nn));
    const Interval ci = wilson_interval(e, n);
    CHECK(ci.low == doctest::Approx(std::max(0.0, centre - half)).epsilon(1e-12));
    CHECK(ci.high == doctest::Approx(std::min(1.0, centre + half)).epsilon(1e-12));
    CHECK(ci.low <= p);
    CHECK(ci.high >= p);
  }
  const Interval empty = wilson_interval(0, 0);
  CHECK(empty.low == 0.0);
  CHECK(empty.high == 1.0);
  CHECK(wilson_interval(0, 1000).low == 0.0);

  CHECK(overlaps({0.1, 0.2}, {0.2, 0.3}));
  CHECK(overlaps({0.1, 0.5}, {0.2, 0.3}));
  CHECK_FALSE(overlaps({0.1, 0.2}, {0.21, 0.3}));
}

TEST_CASE("number formatting round-trips") {
  Rng rng(1);
  for (int i = 0; i < 2000; ++i) {
    const double v = std::ldexp(rng.normal(), static_cast<int>(rng.uniform_index(80)) - 40);
    REQUIRE(std::strtod(format_number(v).c_str(), nullptr) == v);
  }
  CHECK(format_number(0.5) == "0.5");
  CHECK(format_number(0.0) == "0");
}

TEST_CASE("BER tables") {
  std::vector<ResultRow> rows{make_row("snr_db", 2.0, "ml", 12, 51200), make_row("snr_db", 2.0, "icl", 0, 512, 1.25)};
  CHECK(rows[0].ber == 12.0 / 51200.0);
  CHECK_FALSE(rows[0].low_bits());
  CHECK(rows[1].low_bits());
  const std::string text = csv(rows);
  CHECK(text.rfind(std::string(kBerSchema) + "\n" + kBerHeader + "\n", 0) == 0);

  std::istringstream in(text);
  const auto back = read_ber_csv(in);
  REQUIRE(back.size() == 2);
  CHECK(back[0].errors == 12);
  CHECK(back[0].bits == 51200);
  CHECK(back[0].ci.low == rows[0].ci.low);
  CHECK_FALSE(back[0].ms_per_frame);
  CHECK(back[1].ms_per_frame == 1.25);
  CHECK(csv(back) == text);

  std::istringstream foreign("# something-else v9\n" + std::string(kBerHeader) + "\n");
  CHECK_THROWS_AS(read_ber_csv(foreign), std::runtime_error);
}

TEST_CASE("configuration") {
  SUBCASE("defaults validate and survive an INI round trip") {
    const ExperimentConfig def;
    CHECK_NOTHROW(def.validate());
    const auto path = temp_dir() / "roundtrip.ini";
    std::ofstream(path) << to_ini(def);
    CHECK(to_ini(load_config(path, {})) == to_ini(def));
  }
  SUBCASE("files and overrides") {
    const auto path = temp_dir() / "custom.ini";
    std::ofstream(path) << "; comment\n[system]\nusers = 3\norder = 16\n\n[sweep]\nsnr_db = 1, 3\n[run]\ndetectors = ml,icl\n";
    const auto cfg = load_config(path, {{"system.pilots", "8"}, {"run.seed", "77"}});
    CHECK(cfg.system.users == 3);
    CHECK(cfg.system.order == 16);
    CHECK(cfg.system.pilots == 8);
    CHECK(cfg.seed == 77);
    CHECK(cfg.snr_grid_db == std::vector<double>{1, 3});
    CHECK(cfg.detectors == std::vector<Detector>{Detector::ml, Detector::icl});
  }
  SUBCASE("errors name the field") {
    ExperimentConfig cfg;
    auto field_of = [&](const std::string& key, const std::string& value) {
      try {
        apply_setting(cfg, key, value);
      } catch (const ConfigError& e) {
        return e.field();
      }
      return std::string("<none>");
    };
    CHECK(field_of("system.users", "-1") == "system.users");
    CHECK(field_of("system.bogus", "1") == "system.bogus");
    CHECK(field_of("run.detectors", "ml,magic") == "run.detectors");
    CHECK(field_of("run.timing", "maybe") == "run.timing");
    CHECK(field_of("train.learning_rate", "nan") == "train.learning_rate");

    cfg = ExperimentConfig{};
    cfg.snr_grid_db = {4, 2};
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = ExperimentConfig{};
    cfg.system.pilots = 64;
    try {
      cfg.validate();
      FAIL("expected a ConfigError");
    } catch (const ConfigError& e) {
      CHECK(e.field() == "system.pilots");
    }
  }
  SUBCASE("checkpoint paths and model shapes") {
    ExperimentConfig cfg;
    cfg.checkpoint = "ck/k{K}_{K}.ckpt";
    CHECK(cfg.checkpoint_for(3) == "ck/k3_3.ckpt");
    const auto m = cfg.model_for(4);
    CHECK(m.users == 4);
    CHECK(m.antennas == cfg.system.antennas);
    CHECK(m.layers == cfg.model.layers);
    CHECK(parse_detector("pgd-bgs") == Detector::pgd_bgs);
    CHECK_FALSE(parse_detector("PGD"));
    CHECK(detector_name(Detector::bgs_bgs) == "bgs-bgs");
  }
}

TEST_CASE("coherence blocks share randomness across SNR") {
  const SystemConfig sys;
  const Rng base(5);
  const auto lo = draw_block(sys, 2, 0.0, base), hi = draw_block(sys, 2, 10.0, base);
  CHECK(lo.scene.h == hi.scene.h);
  CHECK(lo.scene.r == hi.scene.r);
  CHECK(lo.pilots.symbols == hi.pilots.symbols);
  CHECK(lo.data.indices == hi.data.indices);
  CHECK(lo.scene.noise_variance == doctest::Approx(10.0 * hi.scene.noise_variance));
  CHECK(lo.pilots.count() == sys.pilots);
  CHECK(lo.data.count() == sys.data_symbols);
  const auto other = draw_block(sys, 2, 0.0, Rng(6));
  CHECK(other.scene.h != lo.scene.h);
}

TEST_CASE("BER sweeps") {
  const ExperimentConfig cfg = quick_config();
  const auto rows = run_ber_vs_snr(cfg);
  REQUIRE(rows.size() == 6);
  for (const auto& r : rows) {
    CHECK(r.axis == "snr_db");
    CHECK(r.bits == cfg.trials * cfg.system.data_symbols * 2 * 2);
    CHECK(r.errors <= r.bits);
    CHECK_FALSE(r.ms_per_frame);
  }
  CHECK(csv(run_ber_vs_snr(cfg)) == csv(rows));

  ExperimentConfig timed = cfg;
  timed.timing = true;
  for (const auto& r : run_ber_vs_snr(timed)) CHECK(r.ms_per_frame.value_or(-1.0) >= 0.0);

  const auto users = run_ber_vs_users(cfg);
  REQUIRE(users.size() == 6);
  CHECK(users[0].axis == "users");
  CHECK(users[0].bits == cfg.trials * cfg.system.data_symbols * 1 * 2);
  CHECK(users[3].bits == cfg.trials * cfg.system.data_symbols * 2 * 2);
}

TEST_CASE("ICL in the harness") {
  ExperimentConfig cfg = quick_config();
  cfg.detectors = {Detector::icl};
  cfg.checkpoint = (temp_dir() / "missing_k{K}.ckpt").string();
  CHECK_THROWS_AS(run_ber_vs_snr(cfg), CheckpointMissing);

  tiny_checkpoint(1);
  tiny_checkpoint(2);
  cfg.checkpoint = (temp_dir() / "tiny_k{K}.ckpt").string();
  const auto rows = run_ber_vs_users(cfg);
  REQUIRE(rows.size() == 2);
  CHECK(rows[1].detector == "icl");
  CHECK(csv(run_ber_vs_users(cfg)) == csv(rows));

  ExperimentConfig wrong = cfg;
  wrong.system.users = 2;
  wrong.checkpoint = (temp_dir() / "tiny_k1.ckpt").string();
  CHECK_THROWS_AS(run_ber_vs_snr(wrong), CheckpointMissing);

  const auto runtime = run_runtime(cfg);
  REQUIRE(runtime.rows.size() == 1);
  CHECK(runtime.rows[0].detector == "icl");
  CHECK(runtime.rows[0].frames == 2);
  CHECK(runtime.rows[0].query_ms > 0.0);
  CHECK(runtime.rows[0].first_query_ms > runtime.rows[0].query_ms);
}

TEST_CASE("runtime report") {
  ExperimentConfig cfg = quick_config();
  cfg.detectors = {Detector::pgd_bgs, Detector::bgs_bgs};
  const auto report = run_runtime(cfg);
  REQUIRE(report.rows.size() == 2);
  CHECK(report.pilots == cfg.system.pilots);
  for (const auto& r : report.rows) {
    CHECK(r.frames == 2);
    CHECK(r.frame_mean_ms > 0.0);
    CHECK(r.mean_iterations > 0.0);
  }
  std::ostringstream out;
  write_runtime_csv(out, report);
  CHECK(out.str().rfind(kRuntimeSchema, 0) == 0);

  ExperimentConfig doubled = cfg;
  doubled.runtime.iteration_scale = 2.0;
  const auto twice = run_runtime(doubled);
  for (std::size_t i = 0; i < 2; ++i)
    CHECK(twice.rows[i].mean_iterations == doctest::Approx(2.0 * report.rows[i].mean_iterations));
}

TEST_CASE("calibration") {
  ExperimentConfig cfg = quick_config();
  cfg.calibration.budgets = {5, 20};
  cfg.calibration.trials = 2;
  const auto rows = run_calibration(cfg);
  REQUIRE(rows.size() == 6);
  for (const std::string stage : {"pgd", "bgs-channel", "bgs-equalizer"}) {
    int recommended = 0;
    for (const auto& r : rows)
      if (r.stage == stage) recommended += r.recommended;
    CHECK(recommended == 1);
  }
  std::ostringstream out;
  write_calibration_csv(out, rows);
  CHECK(out.str().rfind(kCalibrationSchema, 0) == 0);
}
