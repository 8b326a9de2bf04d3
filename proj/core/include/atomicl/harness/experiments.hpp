#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "atomicl/harness/config.hpp"
#include "atomicl/harness/stats.hpp"
#include "atomicl/icl/config.hpp"
#include "atomicl/signal/channel.hpp"
#include "atomicl/signal/measurement.hpp"

namespace atomicl::harness {

/// Raised before any simulation when a listed ICL checkpoint cannot be used.
class CheckpointMissing : public std::runtime_error {
 public:
  CheckpointMissing(std::string path, const std::string& why)
      : std::runtime_error("checkpoint " + path + ": " + why), path_(std::move(path)) {}
  const std::string& path() const noexcept { return path_; }

 private:
  std::string path_;
};

/// One coherence block: P pilots and Q data vectors under a single H.
struct CoherenceBlock {
  ChannelScene scene;
  PilotBlock pilots;
  DataFrame data;
};

/// Draws H, the LO phases, the pilots and the data from `rng`. The noise
/// variance only scales the noise draws, so the same generator state at two
/// SNRs yields the same channel, symbols and unit noise directions.
CoherenceBlock draw_block(const SystemConfig& sys, std::size_t users, double snr_db, Rng rng);

/// Loaded ICL model of either precision.
class IclModel {
 public:
  static std::shared_ptr<const IclModel> load(const std::string& path);
  virtual ~IclModel() = default;
  virtual const icl::ModelConfig& config() const = 0;
  /// Caches the pilot context once and detects every data vector against
  /// it; returns K x Q row-major constellation indices.
  virtual std::vector<std::uint32_t> detect_frame(const CoherenceBlock& block, const Constellation& c) const = 0;
  /// Full-prompt detection of data vector `q` (no cache), for timing.
  virtual std::vector<std::size_t> detect_full(const CoherenceBlock& block, std::size_t q,
                                               const Constellation& c) const = 0;
  struct FrameTiming {
    double cache_ms = 0.0;    ///< building the context cache
    double queries_ms = 0.0;  ///< all Q incremental queries
  };
  /// detect_frame with the cache build and the queries timed separately.
  virtual FrameTiming time_frame(const CoherenceBlock& block, const Constellation& c) const = 0;
};

/// Shared resources of one experiment run.
struct DetectorSuite {
  const ExperimentConfig* cfg = nullptr;
  std::vector<std::shared_ptr<const IclModel>> icl_by_users;  ///< index K, empty when unused

  /// Loads every checkpoint the listed detectors need for `user_counts`.
  static DetectorSuite prepare(const ExperimentConfig& cfg, const std::vector<std::size_t>& user_counts);

  struct Outcome {
    std::vector<std::uint32_t> indices;  ///< K x Q row-major
    std::size_t iterations = 0;          ///< solver iterations spent (classical)
  };
  /// Runs `det` on one block. `rng` drives the random starts of the
  /// classical solvers.
  Outcome run(Detector det, const CoherenceBlock& block, const Constellation& c, Rng& rng) const;
};

using ProgressFn = std::function<void(const std::string&)>;

std::vector<ResultRow> run_ber_vs_snr(const ExperimentConfig& cfg, const ProgressFn& progress = {});
std::vector<ResultRow> run_ber_vs_users(const ExperimentConfig& cfg, const ProgressFn& progress = {});

struct RuntimeRow {
  std::string detector;
  std::string budget;            ///< iteration budgets, e.g. "2000/200x4"
  double mean_iterations = 0.0;  ///< solver iterations actually run per frame
  std::size_t frames = 0;
  double frame_mean_ms = 0.0;    ///< pilots plus all Q data vectors
  double frame_median_ms = 0.0;
  double first_query_ms = 0.0;   ///< pilot processing plus the first detection
  double query_ms = 0.0;         ///< each later detection, pilot work amortised
};

struct RuntimeReport {
  std::string platform;
  std::uint64_t seed = 0;
  std::size_t pilots = 0;
  std::size_t data_symbols = 0;
  std::vector<RuntimeRow> rows;
};

inline constexpr const char* kRuntimeSchema = "# atomicl-runtime-csv v1";

RuntimeReport run_runtime(const ExperimentConfig& cfg, const ProgressFn& progress = {});
void write_runtime_csv(std::ostream& out, const RuntimeReport& report);
void write_runtime_table(std::ostream& out, const RuntimeReport& report);
/// Compiler, build type, OS and CPU description.
std::string platform_string();

struct CalibrationRow {
  std::string stage;             ///< "pgd", "bgs-channel", "bgs-equalizer"
  std::size_t budget = 0;
  ResultRow result;
  bool recommended = false;
};

inline constexpr const char* kCalibrationSchema = "# atomicl-calibration-csv v1";

/// Sweeps each classical stage's iteration budget with the other stages at
/// their configured budgets and marks the smallest budget whose BER interval
/// overlaps the interval of the largest budget.
std::vector<CalibrationRow> run_calibration(const ExperimentConfig& cfg, const ProgressFn& progress = {});
void write_calibration_csv(std::ostream& out, const std::vector<CalibrationRow>& rows);

}  // namespace atomicl::harness
