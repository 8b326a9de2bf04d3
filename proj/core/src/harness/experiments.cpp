#include "atomicl/harness/experiments.hpp"

#include <sys/utsname.h>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <thread>

#include "atomicl/detect/classical.hpp"
#include "atomicl/icl/checkpoint.hpp"
#include "atomicl/icl/detector.hpp"

namespace atomicl::harness {
namespace {

// Philox stream ids; blocks and solver starts never share a stream.
constexpr std::uint64_t kBlockStream = 10;
constexpr std::uint64_t kSolverStream = 20;

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

void parallel_for(std::size_t count, std::size_t threads, const std::function<void(std::size_t)>& body) {
  threads = std::min(threads, count);
  if (threads <= 1) {
    for (std::size_t i = 0; i < count; ++i) body(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(threads);
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < threads; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = next++; i < count; i = next++) body(i);
      } catch (...) {
        errors[w] = std::current_exception();
        next = count;
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

PgdConfig pgd_config(const ClassicalConfig& c) {
  PgdConfig p;
  p.max_iterations = c.pgd_iterations;
  p.tolerance = c.pgd_tolerance;
  return p;
}

BgsConfig bgs_channel_config(const ClassicalConfig& c) {
  return {c.bgs_channel_iterations, c.bgs_tolerance, c.bgs_channel_restarts};
}

BgsConfig bgs_equalizer_config(const ClassicalConfig& c) {
  return {c.bgs_equalizer_iterations, c.bgs_tolerance, c.bgs_equalizer_restarts};
}

/// Channel estimate of a two-step detector. A diverged solver yields H = 0,
/// which the equaliser turns into a fixed (usually wrong) decision.
EstimationResult estimate_channel(Detector det, const CoherenceBlock& b, const ClassicalConfig& cc, Rng& rng) {
  try {
    if (det == Detector::pgd_bgs)
      return pgd_channel_estimate(b.pilots.linearized, b.pilots.symbols, b.scene.d(), pgd_config(cc), rng);
    return bgs_channel_estimate(b.pilots.raw, b.pilots.symbols, b.scene.r, bgs_channel_config(cc), rng);
  } catch (const DivergenceError& e) {
    EstimationResult r;
    r.h = CMat::Zero(b.scene.h.rows(), b.scene.h.cols());
    r.iterations = e.trace().empty() ? 0 : e.trace().size() - 1;
    return r;
  }
}

std::vector<std::size_t> equalize_one(const BgsEqualizer& eq, const RVec& y, const Constellation& c, Rng& rng,
                                      std::size_t users, std::size_t& iterations) {
  try {
    EqualizationResult r = eq.equalize(y, c, rng);
    iterations += r.iterations;
    return std::move(r.hard);
  } catch (const DivergenceError& e) {
    iterations += e.trace().empty() ? 0 : e.trace().size() - 1;
    return std::vector<std::size_t>(users, nearest_symbol(cplx(0.0, 0.0), c));
  }
}

template <typename T>
class IclModelImpl final : public IclModel {
 public:
  explicit IclModelImpl(icl::Checkpoint<T> ck) : ck_(std::move(ck)) {}
  const icl::ModelConfig& config() const override { return ck_.config; }

  std::vector<std::uint32_t> detect_frame(const CoherenceBlock& block, const Constellation& c) const override {
    const auto q_count = static_cast<std::size_t>(block.data.count());
    const std::size_t users = ck_.config.users;
    icl::KvCache<T> cache =
        icl::build_context_cache(ck_.params, ck_.config, block.pilots.linearized, block.pilots.symbols);
    std::vector<std::uint32_t> out(users * q_count);
    for (std::size_t q = 0; q < q_count; ++q) {
      const RVec y = block.data.linearized.col(static_cast<Eigen::Index>(q));
      const icl::IclDetection d = icl::incremental_detect(ck_.params, ck_.config, cache, y, c);
      for (std::size_t k = 0; k < users; ++k) out[k * q_count + q] = static_cast<std::uint32_t>(d.hard[k]);
    }
    return out;
  }

  FrameTiming time_frame(const CoherenceBlock& block, const Constellation& c) const override {
    FrameTiming t;
    auto t0 = Clock::now();
    icl::KvCache<T> cache =
        icl::build_context_cache(ck_.params, ck_.config, block.pilots.linearized, block.pilots.symbols);
    t.cache_ms = ms_since(t0);
    t0 = Clock::now();
    for (Eigen::Index q = 0; q < block.data.linearized.cols(); ++q)
      (void)icl::incremental_detect(ck_.params, ck_.config, cache, RVec(block.data.linearized.col(q)), c);
    t.queries_ms = ms_since(t0);
    return t;
  }

  std::vector<std::size_t> detect_full(const CoherenceBlock& block, std::size_t q,
                                       const Constellation& c) const override {
    const RVec y = block.data.linearized.col(static_cast<Eigen::Index>(q));
    return icl::detect(ck_.params, ck_.config, block.pilots.linearized, block.pilots.symbols, y, c).hard;
  }

 private:
  icl::Checkpoint<T> ck_;
};

std::vector<std::uint32_t> hard_from_columns(const std::vector<std::vector<std::size_t>>& cols, std::size_t users) {
  const std::size_t q_count = cols.size();
  std::vector<std::uint32_t> out(users * q_count);
  for (std::size_t q = 0; q < q_count; ++q)
    for (std::size_t k = 0; k < users; ++k) out[k * q_count + q] = static_cast<std::uint32_t>(cols[q][k]);
  return out;
}

struct Tally {
  std::size_t errors = 0;
  std::size_t bits = 0;
  double ms = 0.0;
};

/// Simulates `trials` blocks at one sweep point for every listed detector.
std::vector<Tally> simulate_point(const ExperimentConfig& cfg, const DetectorSuite& suite, std::size_t users,
                                  double snr_db, const Rng& block_root, const Rng& solver_root) {
  const Constellation c(cfg.system.order);
  const std::size_t n_det = cfg.detectors.size();
  std::vector<std::vector<Tally>> per_trial(cfg.trials, std::vector<Tally>(n_det));
  parallel_for(cfg.trials, cfg.resolved_threads(), [&](std::size_t t) {
    const CoherenceBlock block = draw_block(cfg.system, users, snr_db, block_root.split(t));
    const Rng trial_solver = solver_root.split(t);
    for (std::size_t d = 0; d < n_det; ++d) {
      Rng rng = trial_solver.split(static_cast<std::uint64_t>(cfg.detectors[d]));
      const auto t0 = Clock::now();
      const DetectorSuite::Outcome out = suite.run(cfg.detectors[d], block, c, rng);
      const double ms = ms_since(t0);
      const BitMatrix est = symbols_to_bits(out.indices, users, c);
      per_trial[t][d] = {bit_errors(block.data.bits, est), block.data.bits.bits.size(), ms};
    }
  });
  std::vector<Tally> total(n_det);
  for (const auto& trial : per_trial)
    for (std::size_t d = 0; d < n_det; ++d) {
      total[d].errors += trial[d].errors;
      total[d].bits += trial[d].bits;
      total[d].ms += trial[d].ms;
    }
  return total;
}

void append_rows(std::vector<ResultRow>& rows, const ExperimentConfig& cfg, const std::string& axis, double value,
                 const std::vector<Tally>& tallies) {
  for (std::size_t d = 0; d < cfg.detectors.size(); ++d) {
    std::optional<double> ms;
    if (cfg.timing) ms = tallies[d].ms / static_cast<double>(cfg.trials);
    rows.push_back(make_row(axis, value, detector_name(cfg.detectors[d]), tallies[d].errors, tallies[d].bits, ms));
  }
}

bool uses_icl(const ExperimentConfig& cfg) {
  return std::find(cfg.detectors.begin(), cfg.detectors.end(), Detector::icl) != cfg.detectors.end();
}

double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

double mean(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

std::size_t scaled(std::size_t budget, double scale) {
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(static_cast<double>(budget) * scale)));
}

}  // namespace

CoherenceBlock draw_block(const SystemConfig& sys, std::size_t users, double snr_db, Rng rng) {
  const Constellation c(sys.order);
  CoherenceBlock b;
  b.scene.h = sys.channel == icl::TaskSpec::ChannelLaw::iid
                  ? synthesize_channel_iid(rng, sys.antennas, users)
                  : synthesize_channel_multipath(rng, sys.antennas, users, MultipathSpec{});
  b.scene.r = make_reference(rng, sys.antennas, sys.lo_gain_db, users);
  b.scene.noise_variance = noise_variance_from_snr_db(snr_db);
  b.pilots = gen_pilot_block(b.scene, c, sys.pilots, rng);
  b.data = gen_data_frame(b.scene, c, sys.data_symbols, rng);
  return b;
}

std::shared_ptr<const IclModel> IclModel::load(const std::string& path) {
  if (!std::filesystem::exists(path)) throw CheckpointMissing(path, "file not found (run `atomicl train` first)");
  try {
    const std::string dtype = icl::checkpoint_dtype(path);
    if (dtype == "f32") return std::make_shared<IclModelImpl<float>>(icl::load_checkpoint<float>(path));
    if (dtype == "f64") return std::make_shared<IclModelImpl<double>>(icl::load_checkpoint<double>(path));
    throw CheckpointMissing(path, "unsupported dtype '" + dtype + "'");
  } catch (const icl::CheckpointError& e) {
    throw CheckpointMissing(path, e.what());
  }
}

DetectorSuite DetectorSuite::prepare(const ExperimentConfig& cfg, const std::vector<std::size_t>& user_counts) {
  DetectorSuite s;
  s.cfg = &cfg;
  if (!uses_icl(cfg)) return s;
  for (std::size_t k : user_counts) {
    const std::string path = cfg.checkpoint_for(k);
    auto model = IclModel::load(path);
    const auto& m = model->config();
    if (m.users != k || m.antennas != cfg.system.antennas)
      throw CheckpointMissing(path, "trained for K=" + std::to_string(m.users) + ", N=" + std::to_string(m.antennas) +
                                        " but the run needs K=" + std::to_string(k) +
                                        ", N=" + std::to_string(cfg.system.antennas));
    if (m.max_pairs < cfg.system.pilots)
      throw CheckpointMissing(path, "model context L=" + std::to_string(m.max_pairs) + " is shorter than P=" +
                                        std::to_string(cfg.system.pilots));
    if (s.icl_by_users.size() <= k) s.icl_by_users.resize(k + 1);
    s.icl_by_users[k] = std::move(model);
  }
  return s;
}

DetectorSuite::Outcome DetectorSuite::run(Detector det, const CoherenceBlock& block, const Constellation& c,
                                          Rng& rng) const {
  const std::size_t users = block.scene.users();
  const auto q_count = static_cast<Eigen::Index>(block.data.count());
  Outcome out;
  switch (det) {
    case Detector::ml: {
      std::vector<std::vector<std::size_t>> cols;
      for (Eigen::Index q = 0; q < q_count; ++q)
        cols.push_back(ml_detect(block.data.raw.col(q), block.scene.h, block.scene.r, c));
      out.indices = hard_from_columns(cols, users);
      break;
    }
    case Detector::pgd_bgs:
    case Detector::bgs_bgs: {
      const EstimationResult est = estimate_channel(det, block, cfg->classical, rng);
      out.iterations = est.iterations;
      const BgsEqualizer eq(est.h, block.scene.r, bgs_equalizer_config(cfg->classical));
      std::vector<std::vector<std::size_t>> cols;
      for (Eigen::Index q = 0; q < q_count; ++q)
        cols.push_back(equalize_one(eq, block.data.raw.col(q), c, rng, users, out.iterations));
      out.indices = hard_from_columns(cols, users);
      break;
    }
    case Detector::icl: {
      if (users >= icl_by_users.size() || !icl_by_users[users])
        throw std::logic_error("no ICL model prepared for K=" + std::to_string(users));
      out.indices = icl_by_users[users]->detect_frame(block, c);
      break;
    }
  }
  return out;
}

std::vector<ResultRow> run_ber_vs_snr(const ExperimentConfig& cfg, const ProgressFn& progress) {
  cfg.validate();
  const DetectorSuite suite = DetectorSuite::prepare(cfg, {cfg.system.users});
  const Rng block_root(cfg.seed, kBlockStream);
  const Rng solver_root(cfg.seed, kSolverStream);
  std::vector<ResultRow> rows;
  for (std::size_t i = 0; i < cfg.snr_grid_db.size(); ++i) {
    const double snr = cfg.snr_grid_db[i];
    // Every SNR point reuses the same channels and symbols (common random
    // numbers), so only the noise level differs between points.
    const auto tallies = simulate_point(cfg, suite, cfg.system.users, snr, block_root, solver_root);
    append_rows(rows, cfg, "snr_db", snr, tallies);
    if (progress) progress("snr " + format_number(snr) + " dB done");
  }
  return rows;
}

std::vector<ResultRow> run_ber_vs_users(const ExperimentConfig& cfg, const ProgressFn& progress) {
  cfg.validate();
  const DetectorSuite suite = DetectorSuite::prepare(cfg, cfg.user_grid);
  std::vector<ResultRow> rows;
  for (std::size_t k : cfg.user_grid) {
    const Rng block_root = Rng(cfg.seed, kBlockStream).split(1000 + k);
    const Rng solver_root = Rng(cfg.seed, kSolverStream).split(1000 + k);
    const auto tallies = simulate_point(cfg, suite, k, cfg.users_snr_db, block_root, solver_root);
    append_rows(rows, cfg, "users", static_cast<double>(k), tallies);
    if (progress) progress("K=" + std::to_string(k) + " done");
  }
  return rows;
}

std::string platform_string() {
  std::ostringstream os;
#if defined(__clang__)
  os << "clang " << __clang_major__ << "." << __clang_minor__;
#elif defined(__GNUC__)
  os << "gcc " << __GNUC__ << "." << __GNUC_MINOR__;
#else
  os << "unknown-compiler";
#endif
#ifdef NDEBUG
  os << " release";
#else
  os << " debug";
#endif
  utsname u{};
  if (uname(&u) == 0) os << "; " << u.sysname << " " << u.release << " " << u.machine;
  std::ifstream cpu("/proc/cpuinfo");
  for (std::string line; std::getline(cpu, line);) {
    if (line.rfind("model name", 0) == 0) {
      const auto colon = line.find(':');
      if (colon != std::string::npos) os << "; " << line.substr(colon + 2);
      break;
    }
  }
  os << "; " << std::thread::hardware_concurrency() << " hw threads";
  return os.str();
}

RuntimeReport run_runtime(const ExperimentConfig& cfg_in, const ProgressFn& progress) {
  ExperimentConfig cfg = cfg_in;
  cfg.validate();
  ClassicalConfig& cc = cfg.classical;
  cc.pgd_iterations = scaled(cc.pgd_iterations, cfg.runtime.iteration_scale);
  cc.bgs_channel_iterations = scaled(cc.bgs_channel_iterations, cfg.runtime.iteration_scale);
  cc.bgs_equalizer_iterations = scaled(cc.bgs_equalizer_iterations, cfg.runtime.iteration_scale);
  if (cfg.runtime.fixed_iterations) {
    cc.pgd_tolerance = 0.0;
    cc.bgs_tolerance = 0.0;
  }
  const DetectorSuite suite = DetectorSuite::prepare(cfg, {cfg.system.users});
  const Constellation c(cfg.system.order);
  const Rng block_root = Rng(cfg.seed, kBlockStream).split(2000);
  const Rng solver_root = Rng(cfg.seed, kSolverStream).split(2000);
  const std::size_t users = cfg.system.users;
  const auto q_count = static_cast<Eigen::Index>(cfg.system.data_symbols);

  RuntimeReport report;
  report.platform = platform_string();
  report.seed = cfg.seed;
  report.pilots = cfg.system.pilots;
  report.data_symbols = cfg.system.data_symbols;

  for (Detector det : cfg.detectors) {
    RuntimeRow row;
    row.detector = detector_name(det);
    switch (det) {
      case Detector::ml: row.budget = "exhaustive"; break;
      case Detector::pgd_bgs:
        row.budget = std::to_string(cc.pgd_iterations) + "/" + std::to_string(cc.bgs_equalizer_iterations) + "x" +
                     std::to_string(cc.bgs_equalizer_restarts);
        break;
      case Detector::bgs_bgs:
        row.budget = std::to_string(cc.bgs_channel_iterations) + "x" + std::to_string(cc.bgs_channel_restarts) + "/" +
                     std::to_string(cc.bgs_equalizer_iterations) + "x" + std::to_string(cc.bgs_equalizer_restarts);
        break;
      case Detector::icl: row.budget = "single pass"; break;
    }
    std::vector<double> frame_ms, first_ms, query_ms, iterations;
    const std::size_t total = cfg.runtime.warmup + cfg.runtime.frames;
    for (std::size_t f = 0; f < total; ++f) {
      const CoherenceBlock block = draw_block(cfg.system, users, cfg.runtime.snr_db, block_root.split(f));
      Rng rng = solver_root.split(f).split(static_cast<std::uint64_t>(det));
      double frame = 0.0, first = 0.0, later = 0.0;
      std::size_t iters = 0;
      if (det == Detector::ml) {
        auto t0 = Clock::now();
        (void)ml_detect(block.data.raw.col(0), block.scene.h, block.scene.r, c);
        first = ms_since(t0);
        t0 = Clock::now();
        for (Eigen::Index q = 1; q < q_count; ++q)
          (void)ml_detect(block.data.raw.col(q), block.scene.h, block.scene.r, c);
        later = ms_since(t0);
        frame = first + later;
      } else if (det == Detector::icl) {
        const auto& model = *suite.icl_by_users[users];
        auto t0 = Clock::now();
        (void)model.detect_full(block, 0, c);
        first = ms_since(t0);
        const IclModel::FrameTiming ft = model.time_frame(block, c);
        frame = ft.cache_ms + ft.queries_ms;
        later = ft.queries_ms * (static_cast<double>(q_count - 1) / static_cast<double>(q_count));
      } else {
        const auto t0 = Clock::now();
        const EstimationResult est = estimate_channel(det, block, cc, rng);
        iters += est.iterations;
        const BgsEqualizer eq(est.h, block.scene.r, bgs_equalizer_config(cc));
        (void)equalize_one(eq, block.data.raw.col(0), c, rng, users, iters);
        first = ms_since(t0);
        const auto t1 = Clock::now();
        for (Eigen::Index q = 1; q < q_count; ++q) (void)equalize_one(eq, block.data.raw.col(q), c, rng, users, iters);
        later = ms_since(t1);
        frame = first + later;
      }
      if (f < cfg.runtime.warmup) continue;
      frame_ms.push_back(frame);
      first_ms.push_back(first);
      query_ms.push_back(q_count > 1 ? later / static_cast<double>(q_count - 1) : first);
      iterations.push_back(static_cast<double>(iters));
    }
    row.frames = frame_ms.size();
    row.frame_mean_ms = mean(frame_ms);
    row.frame_median_ms = median(frame_ms);
    row.first_query_ms = mean(first_ms);
    row.query_ms = mean(query_ms);
    row.mean_iterations = mean(iterations);
    report.rows.push_back(row);
    if (progress) progress(row.detector + " timed");
  }
  return report;
}

void write_runtime_csv(std::ostream& out, const RuntimeReport& report) {
  out << kRuntimeSchema << '\n';
  out << "# platform: " << report.platform << '\n';
  out << "# seed: " << report.seed << ", pilots: " << report.pilots << ", data_symbols: " << report.data_symbols
      << '\n';
  out << "detector,budget,mean_iterations,frames,frame_mean_ms,frame_median_ms,first_query_ms,query_ms\n";
  for (const auto& r : report.rows)
    out << r.detector << ',' << r.budget << ',' << format_number(r.mean_iterations) << ',' << r.frames << ','
        << format_number(r.frame_mean_ms) << ',' << format_number(r.frame_median_ms) << ','
        << format_number(r.first_query_ms) << ',' << format_number(r.query_ms) << '\n';
}

void write_runtime_table(std::ostream& out, const RuntimeReport& report) {
  out << "platform: " << report.platform << "\nseed: " << report.seed << "  P=" << report.pilots
      << "  Q=" << report.data_symbols << "\n\n";
  out << std::left << std::setw(10) << "detector" << std::setw(18) << "budget" << std::right << std::setw(12)
      << "iters/frame" << std::setw(14) << "frame mean" << std::setw(14) << "frame median" << std::setw(14)
      << "first query" << std::setw(14) << "per query" << '\n';
  out << std::fixed << std::setprecision(4);
  for (const auto& r : report.rows)
    out << std::left << std::setw(10) << r.detector << std::setw(18) << r.budget << std::right << std::setw(12)
        << std::setprecision(1) << r.mean_iterations << std::setprecision(4) << std::setw(11) << r.frame_mean_ms
        << " ms" << std::setw(11) << r.frame_median_ms << " ms" << std::setw(11) << r.first_query_ms << " ms"
        << std::setw(11) << r.query_ms << " ms\n";
  out.unsetf(std::ios::floatfield);
}

std::vector<CalibrationRow> run_calibration(const ExperimentConfig& cfg_in, const ProgressFn& progress) {
  cfg_in.validate();
  struct Stage {
    const char* name;
    Detector det;
    std::size_t ClassicalConfig::*budget;
  };
  const Stage stages[] = {
      {"pgd", Detector::pgd_bgs, &ClassicalConfig::pgd_iterations},
      {"bgs-channel", Detector::bgs_bgs, &ClassicalConfig::bgs_channel_iterations},
      {"bgs-equalizer", Detector::bgs_bgs, &ClassicalConfig::bgs_equalizer_iterations},
  };
  std::vector<CalibrationRow> rows;
  for (const Stage& st : stages) {
    std::vector<CalibrationRow> stage_rows;
    for (std::size_t budget : cfg_in.calibration.budgets) {
      ExperimentConfig cfg = cfg_in;
      cfg.detectors = {st.det};
      cfg.trials = cfg_in.calibration.trials;
      cfg.classical.*st.budget = budget;
      const DetectorSuite suite = DetectorSuite::prepare(cfg, {});
      const Rng block_root = Rng(cfg.seed, kBlockStream).split(3000);
      const Rng solver_root = Rng(cfg.seed, kSolverStream).split(3000);
      const auto tallies =
          simulate_point(cfg, suite, cfg.system.users, cfg.calibration.snr_db, block_root, solver_root);
      CalibrationRow r;
      r.stage = st.name;
      r.budget = budget;
      r.result = make_row("budget", static_cast<double>(budget), detector_name(st.det), tallies[0].errors,
                          tallies[0].bits);
      stage_rows.push_back(r);
      if (progress) progress(std::string(st.name) + " budget " + std::to_string(budget) + " done");
    }
    const Interval reference = stage_rows.back().result.ci;
    for (auto& r : stage_rows) {
      if (overlaps(r.result.ci, reference)) {
        r.recommended = true;
        break;
      }
    }
    rows.insert(rows.end(), stage_rows.begin(), stage_rows.end());
  }
  return rows;
}

void write_calibration_csv(std::ostream& out, const std::vector<CalibrationRow>& rows) {
  out << kCalibrationSchema << '\n';
  out << "stage,budget,ber,errors,bits,ci_low,ci_high,recommended\n";
  for (const auto& r : rows)
    out << r.stage << ',' << r.budget << ',' << format_number(r.result.ber) << ',' << r.result.errors << ','
        << r.result.bits << ',' << format_number(r.result.ci.low) << ',' << format_number(r.result.ci.high) << ','
        << (r.recommended ? 1 : 0) << '\n';
}

}  // namespace atomicl::harness
