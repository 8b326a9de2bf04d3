#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "atomicl/icl/config.hpp"
#include "atomicl/icl/train.hpp"

namespace atomicl::harness {

/// Invalid or unknown configuration entry. `field()` is the dotted key.
class ConfigError : public std::invalid_argument {
 public:
  ConfigError(std::string field, const std::string& why)
      : std::invalid_argument(field + ": " + why), field_(std::move(field)) {}
  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

enum class Detector { ml, pgd_bgs, bgs_bgs, icl };

std::string detector_name(Detector d);
/// Accepts "ml", "pgd-bgs", "bgs-bgs", "icl".
std::optional<Detector> parse_detector(const std::string& name);

struct SystemConfig {
  std::size_t antennas = 8;     ///< N
  std::size_t users = 2;        ///< K
  std::size_t order = 4;        ///< M
  std::size_t pilots = 16;      ///< P
  std::size_t data_symbols = 64;  ///< Q data vectors per coherence block
  double lo_gain_db = 30.0;
  icl::TaskSpec::ChannelLaw channel = icl::TaskSpec::ChannelLaw::iid;
};

struct ClassicalConfig {
  std::size_t pgd_iterations = 2000;
  double pgd_tolerance = 1e-8;
  std::size_t bgs_channel_iterations = 1000;
  std::size_t bgs_channel_restarts = 1;
  std::size_t bgs_equalizer_iterations = 200;
  std::size_t bgs_equalizer_restarts = 4;
  double bgs_tolerance = 1e-8;
};

struct RuntimeConfig {
  std::size_t warmup = 2;       ///< untimed blocks per detector
  std::size_t frames = 20;      ///< timed blocks per detector
  double snr_db = 5.0;
  /// Run every classical solver for exactly its budget (tolerance 0).
  bool fixed_iterations = true;
  /// Multiplies every classical iteration budget.
  double iteration_scale = 1.0;
};

struct CalibrationConfig {
  std::vector<std::size_t> budgets{5, 10, 20, 50, 100, 200, 500, 1000, 2000};
  double snr_db = 8.0;
  std::size_t trials = 100;
};

struct ExperimentConfig {
  SystemConfig system;
  std::vector<double> snr_grid_db{0, 2, 4, 6, 8};
  std::vector<std::size_t> user_grid{2, 3, 4};
  double users_snr_db = 5.0;
  std::vector<Detector> detectors{Detector::ml, Detector::pgd_bgs, Detector::bgs_bgs, Detector::icl};
  std::size_t trials = 400;
  std::uint64_t seed = 1;
  /// May contain "{K}", replaced by the user count of each sweep point.
  std::string checkpoint = "checkpoints/desk_k{K}.ckpt";
  std::string output;           ///< empty writes to stdout
  bool timing = false;          ///< fill the per-frame wall-time column
  std::size_t threads = 0;      ///< 0 reads ATOMICL_THREADS, default 1

  ClassicalConfig classical;
  RuntimeConfig runtime;
  CalibrationConfig calibration;

  icl::ModelConfig model;       ///< users/antennas are taken from `system`
  icl::TrainConfig train;
  double train_snr_min_db = 0.0;
  double train_snr_max_db = 8.0;
  std::size_t validation_tasks = 1000;

  /// Throws ConfigError naming the first inconsistent field.
  void validate() const;
  /// Model shape for `users` users on this system.
  icl::ModelConfig model_for(std::size_t users) const;
  icl::TaskSpec task_spec() const;
  std::string checkpoint_for(std::size_t users) const;
  std::size_t resolved_threads() const;
};

/// Sets one dotted key ("section.name") from its text form.
void apply_setting(ExperimentConfig& cfg, const std::string& key, const std::string& value);

/// Reads an INI-style file ("[section]" headers, "key = value" lines, ';' or
/// '#' comments) on top of the defaults, then applies `overrides` in order.
ExperimentConfig load_config(const std::optional<std::filesystem::path>& file,
                             const std::vector<std::pair<std::string, std::string>>& overrides);

/// Every key with its current value, in a stable order, as INI text.
std::string to_ini(const ExperimentConfig& cfg);

}  // namespace atomicl::harness
