#include "atomicl/icl/train.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

#include "atomicl/icl/checkpoint.hpp"
#include "atomicl/icl/tokenizer.hpp"

namespace atomicl::icl {
namespace {

// Stream ids keep parameter init, fresh tasks and the fixed pool on
// independent Philox streams of the same seed.
constexpr std::uint64_t kInitStream = 0;
constexpr std::uint64_t kTaskStream = 1;
constexpr std::uint64_t kPoolStream = 2;
constexpr std::uint64_t kValidationStream = 3;

void require(bool ok, const std::string& field, const std::string& why) {
  if (!ok) throw std::invalid_argument(field + ": " + why);
}

template <typename T>
double global_grad_norm(const std::vector<ad::DiffTensor<T>*>& params) {
  double sq = 0.0;
  for (const auto* p : params)
    if (p->grad) sq += static_cast<double>(p->grad->squaredNorm());
  return std::sqrt(sq);
}

}  // namespace

void TaskSpec::validate() const {
  require(order == 4 || order == 16 || order == 64, "task.order", "must be 4, 16 or 64");
  require(std::isfinite(lo_gain_db), "task.lo_gain_db", "must be finite");
  require(std::isfinite(snr_min_db) && std::isfinite(snr_max_db), "task.snr_min_db", "must be finite");
  require(snr_min_db <= snr_max_db, "task.snr_max_db", "must be >= snr_min_db");
}

TaskSampler::TaskSampler(const ModelConfig& model, TaskSpec spec)
    : model_(model), spec_(std::move(spec)), constellation_(spec_.order) {
  model_.validate();
  spec_.validate();
  if (spec_.channel == TaskSpec::ChannelLaw::multipath) spec_.multipath.validate(model_.users);
}

Task TaskSampler::sample(Rng& rng, std::size_t pairs) const {
  Task task;
  const std::size_t n = model_.antennas, k = model_.users;
  task.scene.h = spec_.channel == TaskSpec::ChannelLaw::iid ? synthesize_channel_iid(rng, n, k)
                                                            : synthesize_channel_multipath(rng, n, k, spec_.multipath);
  task.scene.r = make_reference(rng, n, spec_.lo_gain_db, k);
  task.snr_db = spec_.snr_min_db + (spec_.snr_max_db - spec_.snr_min_db) * rng.uniform();
  task.scene.noise_variance = noise_variance_from_snr_db(task.snr_db);
  task.block = gen_symbol_block(task.scene, constellation_, pairs, rng);
  return task;
}

template <typename T>
void TaskSampler::fill(const Task& task, Matrix<T>& tokens, Eigen::Index row, Matrix<T>& targets,
                       Eigen::Index target_row) const {
  const TokenSeq seq = tokenize(task.block.linearized, task.block.symbols, std::nullopt, model_);
  tokens.middleRows(row, static_cast<Eigen::Index>(seq.size())) = seq.tokens.cast<T>();
  const auto k = static_cast<Eigen::Index>(model_.users);
  for (Eigen::Index p = 0; p < task.block.symbols.cols(); ++p) {
    targets.row(target_row + p).head(k) = task.block.symbols.col(p).real().transpose().cast<T>();
    targets.row(target_row + p).segment(k, k) = task.block.symbols.col(p).imag().transpose().cast<T>();
  }
}

template void TaskSampler::fill<float>(const Task&, Matrix<float>&, Eigen::Index, Matrix<float>&, Eigen::Index) const;
template void TaskSampler::fill<double>(const Task&, Matrix<double>&, Eigen::Index, Matrix<double>&,
                                        Eigen::Index) const;

void TrainConfig::validate() const {
  require(std::isfinite(learning_rate) && learning_rate > 0.0, "train.learning_rate", "must be > 0");
  require(std::isfinite(weight_decay) && weight_decay >= 0.0, "train.weight_decay", "must be >= 0");
  require(beta1 >= 0.0 && beta1 < 1.0, "train.beta1", "must be in [0, 1)");
  require(beta2 >= 0.0 && beta2 < 1.0, "train.beta2", "must be in [0, 1)");
  require(epsilon > 0.0, "train.epsilon", "must be > 0");
  require(steps >= 1, "train.steps", "must be >= 1");
  require(batch >= 1, "train.batch", "must be >= 1");
  require(micro_batch <= batch, "train.micro_batch", "must not exceed batch");
  require(refresh == Refresh::fresh || pool_size >= 1, "train.pool_size", "must be >= 1");
  require(std::isfinite(grad_clip) && grad_clip >= 0.0, "train.grad_clip", "must be >= 0");
  require(checkpoint_interval == 0 || !checkpoint_path.empty(), "train.checkpoint_path",
          "required when checkpoint_interval > 0");
}

double cosine_learning_rate(double base, std::size_t step, std::size_t horizon) noexcept {
  if (horizon == 0 || step >= horizon) return 0.0;
  return base * 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / static_cast<double>(horizon)));
}

template <typename T>
AdamW<T>::AdamW(double beta1, double beta2, double epsilon, double weight_decay)
    : beta1_(beta1), beta2_(beta2), eps_(epsilon), wd_(weight_decay) {}

template <typename T>
void AdamW<T>::step(const std::vector<ad::DiffTensor<T>*>& params, double learning_rate) {
  if (m_.empty()) {
    for (const auto* p : params) {
      m_.push_back(Matrix<T>::Zero(p->value.rows(), p->value.cols()));
      v_.push_back(Matrix<T>::Zero(p->value.rows(), p->value.cols()));
    }
  }
  if (m_.size() != params.size()) throw std::invalid_argument("AdamW: parameter list changed between steps");
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  const T b1 = static_cast<T>(beta1_), b2 = static_cast<T>(beta2_);
  const T lr = static_cast<T>(learning_rate);
  const T step_size = static_cast<T>(learning_rate / c1);
  const T inv_c2 = static_cast<T>(1.0 / c2);
  const T eps = static_cast<T>(eps_);
  const T decay = static_cast<T>(1.0 - learning_rate * wd_);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = *params[i];
    if (!p.grad) continue;
    const Matrix<T>& g = *p.grad;
    m_[i] = b1 * m_[i] + (T(1) - b1) * g;
    v_[i] = b2 * v_[i] + (T(1) - b2) * g.cwiseAbs2();
    if (lr == T(0)) continue;
    p.value *= decay;
    p.value.array() -= step_size * m_[i].array() / ((v_[i].array() * inv_c2).sqrt() + eps);
  }
}

template class AdamW<float>;
template class AdamW<double>;

template <typename T>
TrainResult<T> pretrain(const ModelConfig& model, const TrainConfig& train, const TaskSampler& sampler,
                        std::optional<ModelParams<T>> init, const std::function<void(const TrainProgress&)>& on_log) {
  model.validate();
  train.validate();
  if (!(sampler.model() == model)) throw std::invalid_argument("pretrain: task sampler built for a different model");

  TrainResult<T> result;
  if (init) {
    init->check_shapes(model);
    result.params = std::move(*init);
  } else {
    Rng init_rng(train.seed, kInitStream);
    result.params = ModelParams<T>::init(model, init_rng);
  }
  ModelParams<T>& params = result.params;
  const std::vector<ad::DiffTensor<T>*> tensors = params.tensors();

  const std::size_t pairs = model.max_pairs;
  const auto seq = static_cast<Eigen::Index>(2 * pairs);
  const auto batch = static_cast<Eigen::Index>(train.batch);
  const auto dt = static_cast<Eigen::Index>(model.token_dim());
  const auto k2 = static_cast<Eigen::Index>(2 * model.users);

  std::vector<Task> pool;
  if (train.refresh == TrainConfig::Refresh::fixed_pool) {
    const Rng pool_root(train.seed, kPoolStream);
    for (std::size_t i = 0; i < train.pool_size; ++i) {
      Rng r = pool_root.split(i);
      pool.push_back(sampler.sample(r, pairs));
    }
  }

  std::vector<Eigen::Index> rows;
  rows.reserve(static_cast<std::size_t>(batch) * pairs);
  for (Eigen::Index b = 0; b < batch; ++b)
    for (Eigen::Index p = 0; p < static_cast<Eigen::Index>(pairs); ++p) rows.push_back(b * seq + 2 * p);

  AdamW<T> opt(train.beta1, train.beta2, train.epsilon, train.weight_decay);
  const Rng task_root(train.seed, kTaskStream);
  const std::size_t horizon = train.effective_horizon();
  Matrix<T> tokens(batch * seq, dt);
  Matrix<T> targets(batch * static_cast<Eigen::Index>(pairs), k2);
  ModelParams<T> last_good = params;
  const auto chunk = static_cast<Eigen::Index>(train.micro_batch == 0 ? train.batch : train.micro_batch);

  for (std::size_t step = 0; step < train.steps; ++step) {
    tokens.setZero();
    Rng step_rng = task_root.split(step);
    for (Eigen::Index b = 0; b < batch; ++b) {
      if (pool.empty()) {
        Rng r = step_rng.split(static_cast<std::uint64_t>(b));
        sampler.fill(sampler.sample(r, pairs), tokens, b * seq, targets, b * static_cast<Eigen::Index>(pairs));
      } else {
        const Task& t = pool[static_cast<std::size_t>(step_rng.uniform_index(pool.size()))];
        sampler.fill(t, tokens, b * seq, targets, b * static_cast<Eigen::Index>(pairs));
      }
    }

    // Gradients of the batch mean are accumulated chunk by chunk so the
    // activations of one chunk stay cache-resident.
    for (auto* p : tensors) p->zero_grad();
    double loss_value = 0.0;
    for (Eigen::Index c0 = 0; c0 < batch && std::isfinite(loss_value); c0 += chunk) {
      const Eigen::Index cb = std::min(chunk, batch - c0);
      const auto pairs_i = static_cast<Eigen::Index>(pairs);
      const Matrix<T> chunk_targets = targets.middleRows(c0 * pairs_i, cb * pairs_i);
      std::vector<Eigen::Index> chunk_rows(rows.begin(), rows.begin() + cb * pairs_i);
      ad::Tape<T> tape;
      const ad::Var out = forward_tape(tape, params, model, Matrix<T>(tokens.middleRows(c0 * seq, cb * seq)), cb, seq);
      const ad::Var mse = ad::row_mse(tape, out, chunk_targets, std::move(chunk_rows));
      const ad::Var loss = ad::scale(tape, mse, static_cast<T>(cb) / static_cast<T>(batch));
      loss_value += static_cast<double>(tape.value(loss)(0, 0));
      if (std::isfinite(loss_value)) tape.backward(loss);
    }
    if (!std::isfinite(loss_value)) {
      result.status = TrainStatus::non_finite;
      result.message = "non-finite loss at step " + std::to_string(step);
      params = last_good;
      break;
    }
    const double gnorm = global_grad_norm(tensors);
    if (!std::isfinite(gnorm)) {
      result.status = TrainStatus::non_finite;
      result.message = "non-finite gradient at step " + std::to_string(step);
      break;
    }
    if (train.grad_clip > 0.0 && gnorm > train.grad_clip) {
      const T s = static_cast<T>(train.grad_clip / gnorm);
      for (auto* p : tensors) *p->grad *= s;
    }
    last_good = params;
    const double lr = cosine_learning_rate(train.learning_rate, step, horizon);
    opt.step(tensors, lr);
    result.losses.push_back(loss_value);
    result.steps_completed = step + 1;

    if (on_log && train.log_interval > 0 && (step % train.log_interval == 0 || step + 1 == train.steps))
      on_log(TrainProgress{step, loss_value, lr});
    if (train.checkpoint_interval > 0 && (step + 1) % train.checkpoint_interval == 0)
      save_checkpoint(params, model, train.checkpoint_path);
  }

  for (auto* p : tensors) p->grad.reset();
  if (!train.checkpoint_path.empty()) save_checkpoint(params, model, train.checkpoint_path);
  return result;
}

template <typename T>
ValidationReport validate_model(const ModelParams<T>& params, const ModelConfig& model, const TaskSampler& sampler,
                                std::size_t tasks, std::uint64_t seed, std::size_t batch) {
  if (tasks == 0) throw std::invalid_argument("validate_model: tasks must be >= 1");
  if (batch == 0) throw std::invalid_argument("validate_model: batch must be >= 1");
  const std::size_t pairs = model.max_pairs;
  const auto seq = static_cast<Eigen::Index>(2 * pairs);
  const auto dt = static_cast<Eigen::Index>(model.token_dim());
  const auto k2 = static_cast<Eigen::Index>(2 * model.users);
  const Rng root(seed, kValidationStream);

  ValidationReport report;
  report.mse_by_position.assign(pairs, 0.0);
  for (std::size_t start = 0; start < tasks; start += batch) {
    const auto b_count = static_cast<Eigen::Index>(std::min(batch, tasks - start));
    Matrix<T> tokens = Matrix<T>::Zero(b_count * seq, dt);
    Matrix<T> targets(b_count * static_cast<Eigen::Index>(pairs), k2);
    for (Eigen::Index b = 0; b < b_count; ++b) {
      Rng r = root.split(start + static_cast<std::size_t>(b));
      sampler.fill(sampler.sample(r, pairs), tokens, b * seq, targets, b * static_cast<Eigen::Index>(pairs));
    }
    const Matrix<T> out = forward_batch(params, model, tokens, b_count, seq);
    for (Eigen::Index b = 0; b < b_count; ++b)
      for (std::size_t p = 0; p < pairs; ++p) {
        const auto pi = static_cast<Eigen::Index>(p);
        const auto diff = (out.row(b * seq + 2 * pi) - targets.row(b * static_cast<Eigen::Index>(pairs) + pi))
                              .template cast<double>();
        report.mse_by_position[p] += diff.squaredNorm();
      }
  }
  double total = 0.0;
  for (double& m : report.mse_by_position) {
    m /= static_cast<double>(tasks);
    total += m;
  }
  report.mean_mse = total / static_cast<double>(pairs);
  report.no_context_mse = report.mse_by_position.front();
  report.tasks = tasks;
  return report;
}

#define ATOMICL_INSTANTIATE(T)                                                                                   \
  template TrainResult<T> pretrain<T>(const ModelConfig&, const TrainConfig&, const TaskSampler&,                \
                                      std::optional<ModelParams<T>>,                                             \
                                      const std::function<void(const TrainProgress&)>&);                         \
  template ValidationReport validate_model<T>(const ModelParams<T>&, const ModelConfig&, const TaskSampler&,     \
                                              std::size_t, std::uint64_t, std::size_t);

ATOMICL_INSTANTIATE(float)
ATOMICL_INSTANTIATE(double)

#undef ATOMICL_INSTANTIATE

}  // namespace atomicl::icl
