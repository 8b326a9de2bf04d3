#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "atomicl/icl/config.hpp"
#include "atomicl/icl/model.hpp"
#include "atomicl/signal/channel.hpp"
#include "atomicl/signal/measurement.hpp"

namespace atomicl::icl {

/// Distribution of pre-training and validation tasks.
struct TaskSpec {
  enum class ChannelLaw { iid, multipath };

  std::size_t order = 4;        ///< M
  double lo_gain_db = 30.0;
  double snr_min_db = 0.0;      ///< per-task SNR is uniform in dB over [min, max]
  double snr_max_db = 8.0;
  ChannelLaw channel = ChannelLaw::iid;
  MultipathSpec multipath{};

  void validate() const;
};

/// One sampled coherence block: the scene and `pairs` pilot pairs under it.
struct Task {
  ChannelScene scene;
  SymbolBlock block;
  double snr_db = 0.0;
};

class TaskSampler {
 public:
  TaskSampler(const ModelConfig& model, TaskSpec spec);

  /// Fresh channel, LO phases, SNR and `pairs` symbol/measurement pairs.
  Task sample(Rng& rng, std::size_t pairs) const;
  /// Writes the 2*pairs prompt tokens of `task` into rows [row, row + 2P) of
  /// `tokens` and its symbols as [Re, Im] rows into `targets` starting at
  /// `target_row`.
  template <typename T>
  void fill(const Task& task, Matrix<T>& tokens, Eigen::Index row, Matrix<T>& targets,
            Eigen::Index target_row) const;

  const ModelConfig& model() const noexcept { return model_; }
  const TaskSpec& spec() const noexcept { return spec_; }
  const Constellation& constellation() const noexcept { return constellation_; }

 private:
  ModelConfig model_;
  TaskSpec spec_;
  Constellation constellation_;
};

struct TrainConfig {
  enum class Refresh { fresh, fixed_pool };

  double learning_rate = 1e-3;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::size_t steps = 16000;
  std::size_t horizon = 0;            ///< cosine period T; 0 means `steps`
  std::size_t batch = 32;
  std::size_t micro_batch = 8;        ///< prompts per forward/backward pass; 0 means `batch`
  Refresh refresh = Refresh::fresh;
  std::size_t pool_size = 256;        ///< tasks in the fixed pool
  std::size_t checkpoint_interval = 0;  ///< 0 disables periodic checkpoints
  std::filesystem::path checkpoint_path{};
  std::uint64_t seed = 1;
  double grad_clip = 1.0;             ///< global gradient-norm clip; 0 disables
  std::size_t log_interval = 100;

  std::size_t effective_horizon() const noexcept { return horizon == 0 ? steps : horizon; }
  /// Throws std::invalid_argument naming the offending field.
  void validate() const;
};

/// base * 0.5 * (1 + cos(pi * t / T)), clamped to 0 past the horizon.
double cosine_learning_rate(double base, std::size_t step, std::size_t horizon) noexcept;

/// AdamW with decoupled weight decay.
template <typename T>
class AdamW {
 public:
  AdamW(double beta1, double beta2, double epsilon, double weight_decay);
  /// Applies one update using the gradients stored in each tensor.
  void step(const std::vector<ad::DiffTensor<T>*>& params, double learning_rate);
  std::size_t steps_taken() const noexcept { return t_; }

 private:
  double beta1_, beta2_, eps_, wd_;
  std::size_t t_ = 0;
  std::vector<Matrix<T>> m_, v_;
};

enum class TrainStatus { completed, non_finite };

template <typename T>
struct TrainResult {
  ModelParams<T> params;        ///< last parameters with a finite loss
  std::vector<double> losses;   ///< batch loss per completed step
  TrainStatus status = TrainStatus::completed;
  std::size_t steps_completed = 0;
  std::string message;
};

struct TrainProgress {
  std::size_t step;
  double loss;
  double learning_rate;
};

/// Minimises the prompt MSE over batches of 2L-token prompts. Starting
/// parameters come from `init` when given, otherwise from the seed. On a
/// non-finite loss the run stops, the last good parameters are returned and,
/// if a checkpoint path is set, written there.
template <typename T>
TrainResult<T> pretrain(const ModelConfig& model, const TrainConfig& train, const TaskSampler& sampler,
                        std::optional<ModelParams<T>> init = std::nullopt,
                        const std::function<void(const TrainProgress&)>& on_log = {});

/// Per-position validation MSE (index i-1 holds position i, i = 1..L) and
/// the mean over positions.
struct ValidationReport {
  std::vector<double> mse_by_position;
  double mean_mse = 0.0;
  double no_context_mse = 0.0;  ///< MSE of the P = 0 prediction on the same tasks
  std::size_t tasks = 0;
};

template <typename T>
ValidationReport validate_model(const ModelParams<T>& params, const ModelConfig& model, const TaskSampler& sampler,
                                std::size_t tasks, std::uint64_t seed, std::size_t batch = 64);

}  // namespace atomicl::icl
