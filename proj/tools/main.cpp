#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <CLI11.hpp>

#include "atomicl/harness/config.hpp"
#include "atomicl/harness/experiments.hpp"
#include "atomicl/harness/selfcheck.hpp"
#include "atomicl/harness/stats.hpp"
#include "atomicl/icl/checkpoint.hpp"
#include "atomicl/icl/train.hpp"
#include "atomicl/numerics/allocator.hpp"

namespace {

namespace h = atomicl::harness;
namespace icl = atomicl::icl;

constexpr int kExitFailure = 1;
constexpr int kExitUsage = 2;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Common {
  std::string config_file;
  std::optional<std::uint64_t> seed;
  std::string output;
  std::string checkpoint;
  std::vector<std::string> sets;
  bool quiet = false;
};

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("--config", c.config_file, "INI configuration file")->check(CLI::ExistingFile);
  sub->add_option("--seed", c.seed, "Master seed (run.seed)");
  sub->add_option("--output,-o", c.output, "Output file (default stdout)");
  sub->add_option("--checkpoint", c.checkpoint, "Checkpoint path; {K} expands to the user count");
  sub->add_option("--set", c.sets, "Override a setting, section.key=value (repeatable)");
  sub->add_flag("--quiet,-q", c.quiet, "No progress messages on stderr");
  sub->allow_extras();
}

std::pair<std::string, std::string> split_setting(const std::string& text) {
  const auto eq = text.find('=');
  if (eq == std::string::npos || eq == 0) throw UsageError("expected section.key=value, got '" + text + "'");
  return {text.substr(0, eq), text.substr(eq + 1)};
}

// Remaining arguments must be --section.key=value or --section.key value.
std::vector<std::pair<std::string, std::string>> dotted_overrides(const std::vector<std::string>& extras) {
  std::vector<std::pair<std::string, std::string>> out;
  for (std::size_t i = 0; i < extras.size(); ++i) {
    const std::string& arg = extras[i];
    if (arg.rfind("--", 0) != 0 || arg.find('.') == std::string::npos)
      throw UsageError("unrecognised argument '" + arg + "'");
    std::string body = arg.substr(2);
    if (body.find('=') == std::string::npos) {
      if (i + 1 >= extras.size()) throw UsageError("missing value for '" + arg + "'");
      body += "=" + extras[++i];
    }
    out.push_back(split_setting(body));
  }
  return out;
}

h::ExperimentConfig resolve(const Common& c, const CLI::App* sub) {
  std::vector<std::pair<std::string, std::string>> overrides;
  for (const auto& s : c.sets) overrides.push_back(split_setting(s));
  for (auto& o : dotted_overrides(sub->remaining())) overrides.push_back(std::move(o));
  if (c.seed) overrides.emplace_back("run.seed", std::to_string(*c.seed));
  if (!c.output.empty()) overrides.emplace_back("run.output", c.output);
  if (!c.checkpoint.empty()) overrides.emplace_back("model.checkpoint", c.checkpoint);
  std::optional<std::filesystem::path> file;
  if (!c.config_file.empty()) file = c.config_file;
  h::ExperimentConfig cfg = h::load_config(file, overrides);
  cfg.validate();
  return cfg;
}

h::ProgressFn progress_for(const Common& c) {
  if (c.quiet) return {};
  return [](const std::string& msg) { std::cerr << msg << '\n'; };
}

// Writes to `path` via a temporary file, or to stdout when empty.
template <typename Fn>
void emit(const std::string& path, Fn&& write) {
  if (path.empty()) {
    write(std::cout);
    std::cout.flush();
    return;
  }
  const std::filesystem::path target(path);
  if (target.has_parent_path()) std::filesystem::create_directories(target.parent_path());
  const std::filesystem::path tmp = target.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open " + tmp.string() + " for writing");
    write(out);
    out.flush();
    if (!out) throw std::runtime_error("write to " + tmp.string() + " failed");
  }
  std::filesystem::rename(tmp, target);
}

int run_train(const h::ExperimentConfig& cfg, std::optional<std::size_t> users_opt, const Common& c) {
  const std::size_t users = users_opt.value_or(cfg.system.users);
  const icl::ModelConfig model = cfg.model_for(users);
  model.validate();
  icl::TrainConfig train = cfg.train;
  train.seed = cfg.seed;
  train.checkpoint_path = cfg.checkpoint_for(users);
  if (train.checkpoint_path.has_parent_path()) std::filesystem::create_directories(train.checkpoint_path.parent_path());
  const icl::TaskSampler sampler(model, cfg.task_spec());

  const auto progress = progress_for(c);
  if (progress) progress("training " + icl::describe(model) + " -> " + train.checkpoint_path.string());
  std::vector<icl::TrainProgress> log;
  const auto result = icl::pretrain<float>(model, train, sampler, std::nullopt, [&](const icl::TrainProgress& p) {
    log.push_back(p);
    if (progress) {
      std::ostringstream s;
      s << "step " << p.step << " loss " << p.loss << " lr " << p.learning_rate;
      progress(s.str());
    }
  });
  const auto report = icl::validate_model(result.params, model, sampler, cfg.validation_tasks, cfg.seed);

  emit(cfg.output, [&](std::ostream& out) {
    out << "# atomicl-train-csv v1\n";
    out << "# checkpoint " << train.checkpoint_path.string() << '\n';
    out << "# status " << (result.status == icl::TrainStatus::completed ? "completed" : "non_finite")
        << " steps " << result.steps_completed << '\n';
    out << "# validation tasks " << report.tasks << " mean_mse " << h::format_number(report.mean_mse)
        << " no_context_mse " << h::format_number(report.no_context_mse) << '\n';
    out << "kind,index,value\n";
    for (const auto& p : log) out << "loss," << p.step << ',' << h::format_number(p.loss) << '\n';
    for (std::size_t i = 0; i < report.mse_by_position.size(); ++i)
      out << "validation_mse," << i + 1 << ',' << h::format_number(report.mse_by_position[i]) << '\n';
  });
  if (result.status != icl::TrainStatus::completed) {
    std::cerr << "atomicl: error[train] " << result.message << '\n';
    return kExitFailure;
  }
  return 0;
}

int run_checks(const std::vector<h::CheckResult>& results, const std::string& output) {
  std::size_t failures = 0;
  emit(output, [&](std::ostream& out) { failures = h::report_checks(out, results); });
  return failures == 0 ? 0 : kExitFailure;
}

}  // namespace

int main(int argc, char** argv) {
  atomicl::retain_heap_memory();
  CLI::App app{"Phase-retrieval MIMO detection: classical baselines and an in-context transformer"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "atomicl 0.1.0");

  Common c;
  std::optional<std::size_t> train_users;
  bool as_table = false;

  auto* ber_snr = app.add_subcommand("ber-snr", "BER against SNR for every listed detector");
  auto* ber_users = app.add_subcommand("ber-users", "BER against the number of users");
  auto* runtime = app.add_subcommand("runtime", "Per-frame and per-query detection time");
  auto* train = app.add_subcommand("train", "Pre-train an ICL checkpoint");
  auto* calibrate = app.add_subcommand("calibrate", "Iteration budgets at which the classical BER converges");
  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference check of every differentiable op");
  auto* selftest = app.add_subcommand("selftest", "Definitional cases and oracle comparisons");
  auto* show = app.add_subcommand("config", "Print the resolved configuration");
  for (auto* sub : {ber_snr, ber_users, runtime, train, calibrate, gradcheck, selftest, show}) add_common(sub, c);
  train->add_option("--users,-K", train_users, "User count to train for (default system.users)");
  runtime->add_flag("--table", as_table, "Print an aligned table instead of CSV");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }

  CLI::App* sub = app.get_subcommands().front();
  try {
    const h::ExperimentConfig cfg = resolve(c, sub);
    const auto progress = progress_for(c);
    if (sub == ber_snr) {
      const auto rows = h::run_ber_vs_snr(cfg, progress);
      emit(cfg.output, [&](std::ostream& out) { h::write_ber_csv(out, rows); });
    } else if (sub == ber_users) {
      const auto rows = h::run_ber_vs_users(cfg, progress);
      emit(cfg.output, [&](std::ostream& out) { h::write_ber_csv(out, rows); });
    } else if (sub == runtime) {
      const auto report = h::run_runtime(cfg, progress);
      emit(cfg.output, [&](std::ostream& out) {
        if (as_table)
          h::write_runtime_table(out, report);
        else
          h::write_runtime_csv(out, report);
      });
    } else if (sub == calibrate) {
      const auto rows = h::run_calibration(cfg, progress);
      emit(cfg.output, [&](std::ostream& out) { h::write_calibration_csv(out, rows); });
    } else if (sub == train) {
      return run_train(cfg, train_users, c);
    } else if (sub == gradcheck) {
      return run_checks(h::gradcheck_suite(cfg.seed), cfg.output);
    } else if (sub == selftest) {
      return run_checks(h::selftest_suite(cfg.seed), cfg.output);
    } else if (sub == show) {
      emit(cfg.output, [&](std::ostream& out) { out << h::to_ini(cfg); });
    }
  } catch (const UsageError& e) {
    std::cerr << "atomicl: error[usage] " << e.what() << "\n" << sub->help();
    return kExitUsage;
  } catch (const h::ConfigError& e) {
    std::cerr << "atomicl: error[config] field=" << e.field() << ": " << e.what() << '\n';
    return kExitUsage;
  } catch (const h::CheckpointMissing& e) {
    std::cerr << "atomicl: error[checkpoint] path=" << e.path() << ": " << e.what()
              << "\n  train one with: atomicl train --checkpoint " << e.path() << '\n';
    return kExitFailure;
  } catch (const icl::CheckpointError& e) {
    std::cerr << "atomicl: error[checkpoint] " << e.what() << '\n';
    return kExitFailure;
  } catch (const std::exception& e) {
    std::cerr << "atomicl: error[runtime] " << e.what() << '\n';
    return kExitFailure;
  }
  return 0;
}
