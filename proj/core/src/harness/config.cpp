#include "atomicl/harness/config.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdlib>
#include <functional>
#include <sstream>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

namespace atomicl::harness {
namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(text);
  while (std::getline(in, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::size_t to_size(const std::string& key, const std::string& text) {
  const std::string t = trim(text);
  std::size_t v = 0;
  const auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
  if (t.empty() || ec != std::errc() || ptr != t.data() + t.size())
    throw ConfigError(key, "expected a non-negative integer, got '" + text + "'");
  return v;
}

std::uint64_t to_u64(const std::string& key, const std::string& text) {
  const std::string t = trim(text);
  std::uint64_t v = 0;
  const auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
  if (t.empty() || ec != std::errc() || ptr != t.data() + t.size())
    throw ConfigError(key, "expected an unsigned integer, got '" + text + "'");
  return v;
}

double to_double(const std::string& key, const std::string& text) {
  const std::string t = trim(text);
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
  if (t.empty() || ec != std::errc() || ptr != t.data() + t.size() || !std::isfinite(v))
    throw ConfigError(key, "expected a finite number, got '" + text + "'");
  return v;
}

bool to_bool(const std::string& key, const std::string& text) {
  const std::string t = trim(text);
  if (t == "true" || t == "1" || t == "on" || t == "yes") return true;
  if (t == "false" || t == "0" || t == "off" || t == "no") return false;
  throw ConfigError(key, "expected true or false, got '" + text + "'");
}

std::string fmt(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

template <typename T, typename F>
std::string join(const std::vector<T>& items, F&& f) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (i) out += ",";
    out += f(items[i]);
  }
  return out;
}

struct Field {
  const char* key;
  std::function<void(ExperimentConfig&, const std::string& key, const std::string&)> set;
  std::function<std::string(const ExperimentConfig&)> get;
};

#define SIZE_FIELD(KEY, MEMBER)                                                                  \
  Field {                                                                                        \
    KEY, [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.MEMBER = to_size(k, v); }, \
        [](const ExperimentConfig& c) { return std::to_string(c.MEMBER); }                       \
  }
#define DOUBLE_FIELD(KEY, MEMBER)                                                                \
  Field {                                                                                        \
    KEY, [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.MEMBER = to_double(k, v); }, \
        [](const ExperimentConfig& c) { return fmt(c.MEMBER); }                                  \
  }
#define BOOL_FIELD(KEY, MEMBER)                                                                  \
  Field {                                                                                        \
    KEY, [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.MEMBER = to_bool(k, v); }, \
        [](const ExperimentConfig& c) { return std::string(c.MEMBER ? "true" : "false"); }       \
  }
#define STRING_FIELD(KEY, MEMBER)                                                                \
  Field {                                                                                        \
    KEY, [](ExperimentConfig& c, const std::string&, const std::string& v) { c.MEMBER = trim(v); }, \
        [](const ExperimentConfig& c) { return std::string(c.MEMBER); }                          \
  }

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      SIZE_FIELD("system.antennas", system.antennas),
      SIZE_FIELD("system.users", system.users),
      SIZE_FIELD("system.order", system.order),
      SIZE_FIELD("system.pilots", system.pilots),
      SIZE_FIELD("system.data_symbols", system.data_symbols),
      DOUBLE_FIELD("system.lo_gain_db", system.lo_gain_db),
      Field{"system.channel",
            [](ExperimentConfig& c, const std::string& k, const std::string& v) {
              const std::string t = trim(v);
              if (t == "iid")
                c.system.channel = icl::TaskSpec::ChannelLaw::iid;
              else if (t == "multipath")
                c.system.channel = icl::TaskSpec::ChannelLaw::multipath;
              else
                throw ConfigError(k, "expected iid or multipath, got '" + v + "'");
            },
            [](const ExperimentConfig& c) {
              return std::string(c.system.channel == icl::TaskSpec::ChannelLaw::iid ? "iid" : "multipath");
            }},
      Field{"sweep.snr_db",
            [](ExperimentConfig& c, const std::string& k, const std::string& v) {
              c.snr_grid_db.clear();
              for (const auto& item : split_list(v)) c.snr_grid_db.push_back(to_double(k, item));
            },
            [](const ExperimentConfig& c) { return join(c.snr_grid_db, fmt); }},
      Field{"sweep.users",
            [](ExperimentConfig& c, const std::string& k, const std::string& v) {
              c.user_grid.clear();
              for (const auto& item : split_list(v)) c.user_grid.push_back(to_size(k, item));
            },
            [](const ExperimentConfig& c) {
              return join(c.user_grid, [](std::size_t x) { return std::to_string(x); });
            }},
      DOUBLE_FIELD("sweep.users_snr_db", users_snr_db),
      Field{"run.detectors",
            [](ExperimentConfig& c, const std::string& k, const std::string& v) {
              c.detectors.clear();
              for (const auto& item : split_list(v)) {
                const auto d = parse_detector(item);
                if (!d) throw ConfigError(k, "unknown detector '" + item + "' (expected ml, pgd-bgs, bgs-bgs, icl)");
                c.detectors.push_back(*d);
              }
            },
            [](const ExperimentConfig& c) { return join(c.detectors, detector_name); }},
      SIZE_FIELD("run.trials", trials),
      Field{"run.seed", [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.seed = to_u64(k, v); },
            [](const ExperimentConfig& c) { return std::to_string(c.seed); }},
      STRING_FIELD("run.output", output),
      BOOL_FIELD("run.timing", timing),
      SIZE_FIELD("run.threads", threads),
      STRING_FIELD("model.checkpoint", checkpoint),
      SIZE_FIELD("model.layers", model.layers),
      SIZE_FIELD("model.embed_dim", model.embed_dim),
      SIZE_FIELD("model.heads", model.heads),
      SIZE_FIELD("model.ffn_dim", model.ffn_dim),
      SIZE_FIELD("model.max_pairs", model.max_pairs),
      BOOL_FIELD("model.positional", model.positional),
      DOUBLE_FIELD("train.learning_rate", train.learning_rate),
      DOUBLE_FIELD("train.weight_decay", train.weight_decay),
      DOUBLE_FIELD("train.beta1", train.beta1),
      DOUBLE_FIELD("train.beta2", train.beta2),
      DOUBLE_FIELD("train.epsilon", train.epsilon),
      SIZE_FIELD("train.steps", train.steps),
      SIZE_FIELD("train.horizon", train.horizon),
      SIZE_FIELD("train.batch", train.batch),
      SIZE_FIELD("train.micro_batch", train.micro_batch),
      Field{"train.refresh",
            [](ExperimentConfig& c, const std::string& k, const std::string& v) {
              const std::string t = trim(v);
              if (t == "fresh")
                c.train.refresh = icl::TrainConfig::Refresh::fresh;
              else if (t == "fixed_pool")
                c.train.refresh = icl::TrainConfig::Refresh::fixed_pool;
              else
                throw ConfigError(k, "expected fresh or fixed_pool, got '" + v + "'");
            },
            [](const ExperimentConfig& c) {
              return std::string(c.train.refresh == icl::TrainConfig::Refresh::fresh ? "fresh" : "fixed_pool");
            }},
      SIZE_FIELD("train.pool_size", train.pool_size),
      SIZE_FIELD("train.checkpoint_interval", train.checkpoint_interval),
      DOUBLE_FIELD("train.grad_clip", train.grad_clip),
      SIZE_FIELD("train.log_interval", train.log_interval),
      DOUBLE_FIELD("train.snr_min_db", train_snr_min_db),
      DOUBLE_FIELD("train.snr_max_db", train_snr_max_db),
      SIZE_FIELD("train.validation_tasks", validation_tasks),
      SIZE_FIELD("classical.pgd_iterations", classical.pgd_iterations),
      DOUBLE_FIELD("classical.pgd_tolerance", classical.pgd_tolerance),
      SIZE_FIELD("classical.bgs_channel_iterations", classical.bgs_channel_iterations),
      SIZE_FIELD("classical.bgs_channel_restarts", classical.bgs_channel_restarts),
      SIZE_FIELD("classical.bgs_equalizer_iterations", classical.bgs_equalizer_iterations),
      SIZE_FIELD("classical.bgs_equalizer_restarts", classical.bgs_equalizer_restarts),
      DOUBLE_FIELD("classical.bgs_tolerance", classical.bgs_tolerance),
      SIZE_FIELD("runtime.warmup", runtime.warmup),
      SIZE_FIELD("runtime.frames", runtime.frames),
      DOUBLE_FIELD("runtime.snr_db", runtime.snr_db),
      BOOL_FIELD("runtime.fixed_iterations", runtime.fixed_iterations),
      DOUBLE_FIELD("runtime.iteration_scale", runtime.iteration_scale),
      Field{"calibrate.budgets",
            [](ExperimentConfig& c, const std::string& k, const std::string& v) {
              c.calibration.budgets.clear();
              for (const auto& item : split_list(v)) c.calibration.budgets.push_back(to_size(k, item));
            },
            [](const ExperimentConfig& c) {
              return join(c.calibration.budgets, [](std::size_t x) { return std::to_string(x); });
            }},
      DOUBLE_FIELD("calibrate.snr_db", calibration.snr_db),
      SIZE_FIELD("calibrate.trials", calibration.trials),
  };
  return table;
}

#undef SIZE_FIELD
#undef DOUBLE_FIELD
#undef BOOL_FIELD
#undef STRING_FIELD

template <typename T>
bool strictly_increasing(const std::vector<T>& v) {
  return std::adjacent_find(v.begin(), v.end(), [](const T& a, const T& b) { return !(a < b); }) == v.end();
}

}  // namespace

std::string detector_name(Detector d) {
  switch (d) {
    case Detector::ml: return "ml";
    case Detector::pgd_bgs: return "pgd-bgs";
    case Detector::bgs_bgs: return "bgs-bgs";
    case Detector::icl: return "icl";
  }
  return "?";
}

std::optional<Detector> parse_detector(const std::string& name) {
  for (Detector d : {Detector::ml, Detector::pgd_bgs, Detector::bgs_bgs, Detector::icl})
    if (detector_name(d) == name) return d;
  return std::nullopt;
}

void ExperimentConfig::validate() const {
  if (system.antennas < 1) throw ConfigError("system.antennas", "must be >= 1");
  if (system.users < 1) throw ConfigError("system.users", "must be >= 1");
  if (system.order != 4 && system.order != 16 && system.order != 64)
    throw ConfigError("system.order", "must be 4, 16 or 64");
  if (system.pilots < 1) throw ConfigError("system.pilots", "must be >= 1");
  if (system.data_symbols < 1) throw ConfigError("system.data_symbols", "must be >= 1");
  if (snr_grid_db.empty()) throw ConfigError("sweep.snr_db", "grid is empty");
  if (!strictly_increasing(snr_grid_db)) throw ConfigError("sweep.snr_db", "grid must be sorted ascending without repeats");
  if (user_grid.empty()) throw ConfigError("sweep.users", "grid is empty");
  if (!strictly_increasing(user_grid)) throw ConfigError("sweep.users", "grid must be sorted ascending without repeats");
  if (user_grid.front() < 1) throw ConfigError("sweep.users", "user counts must be >= 1");
  if (detectors.empty()) throw ConfigError("run.detectors", "no detectors listed");
  if (trials < 1) throw ConfigError("run.trials", "must be >= 1");
  if (classical.pgd_iterations < 1) throw ConfigError("classical.pgd_iterations", "must be >= 1");
  if (classical.bgs_channel_iterations < 1) throw ConfigError("classical.bgs_channel_iterations", "must be >= 1");
  if (classical.bgs_equalizer_iterations < 1) throw ConfigError("classical.bgs_equalizer_iterations", "must be >= 1");
  if (classical.bgs_channel_restarts < 1) throw ConfigError("classical.bgs_channel_restarts", "must be >= 1");
  if (classical.bgs_equalizer_restarts < 1) throw ConfigError("classical.bgs_equalizer_restarts", "must be >= 1");
  if (classical.pgd_tolerance < 0) throw ConfigError("classical.pgd_tolerance", "must be >= 0");
  if (classical.bgs_tolerance < 0) throw ConfigError("classical.bgs_tolerance", "must be >= 0");
  if (runtime.frames < 1) throw ConfigError("runtime.frames", "must be >= 1");
  if (!(runtime.iteration_scale > 0)) throw ConfigError("runtime.iteration_scale", "must be > 0");
  if (calibration.budgets.empty() || !strictly_increasing(calibration.budgets) || calibration.budgets.front() < 1)
    throw ConfigError("calibrate.budgets", "must be a non-empty ascending list of positive counts");
  if (calibration.trials < 1) throw ConfigError("calibrate.trials", "must be >= 1");
  if (train_snr_min_db > train_snr_max_db) throw ConfigError("train.snr_max_db", "must be >= train.snr_min_db");
  if (validation_tasks < 1) throw ConfigError("train.validation_tasks", "must be >= 1");
  try {
    model_for(system.users).validate();
  } catch (const std::invalid_argument& e) {
    const std::string what = e.what();
    throw ConfigError(what.substr(0, what.find(':')), what.substr(what.find(':') + 2));
  }
  if (system.pilots > model.max_pairs)
    throw ConfigError("system.pilots", "exceeds model.max_pairs=" + std::to_string(model.max_pairs));
  try {
    train.validate();
  } catch (const std::invalid_argument& e) {
    const std::string what = e.what();
    throw ConfigError(what.substr(0, what.find(':')), what.substr(what.find(':') + 2));
  }
}

icl::ModelConfig ExperimentConfig::model_for(std::size_t users) const {
  icl::ModelConfig m = model;
  m.users = users;
  m.antennas = system.antennas;
  return m;
}

icl::TaskSpec ExperimentConfig::task_spec() const {
  icl::TaskSpec t;
  t.order = system.order;
  t.lo_gain_db = system.lo_gain_db;
  t.snr_min_db = train_snr_min_db;
  t.snr_max_db = train_snr_max_db;
  t.channel = system.channel;
  return t;
}

std::string ExperimentConfig::checkpoint_for(std::size_t users) const {
  std::string path = checkpoint;
  const std::string token = "{K}";
  for (auto pos = path.find(token); pos != std::string::npos; pos = path.find(token))
    path.replace(pos, token.size(), std::to_string(users));
  return path;
}

std::size_t ExperimentConfig::resolved_threads() const {
  if (threads > 0) return threads;
  if (const char* env = std::getenv("ATOMICL_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && v > 0) return static_cast<std::size_t>(v);
  }
  return 1;
}

void apply_setting(ExperimentConfig& cfg, const std::string& key, const std::string& value) {
  for (const auto& f : fields()) {
    if (key == f.key) {
      f.set(cfg, key, value);
      return;
    }
  }
  throw ConfigError(key, "unknown setting");
}

ExperimentConfig load_config(const std::optional<std::filesystem::path>& file,
                             const std::vector<std::pair<std::string, std::string>>& overrides) {
  ExperimentConfig cfg;
  if (file) {
    boost::property_tree::ptree tree;
    try {
      boost::property_tree::ini_parser::read_ini(file->string(), tree);
    } catch (const boost::property_tree::ini_parser_error& e) {
      throw ConfigError("config", e.message() + " (" + e.filename() + " line " + std::to_string(e.line()) + ")");
    }
    for (const auto& [section, body] : tree) {
      if (body.empty()) {
        if (!body.data().empty()) throw ConfigError(section, "setting outside a [section]");
        continue;
      }
      for (const auto& [name, leaf] : body) {
        std::string value = leaf.get_value<std::string>();
        // Trailing comments on a value line.
        for (char c : {';', '#'})
          if (const auto pos = value.find(c); pos != std::string::npos) value.erase(pos);
        apply_setting(cfg, section + "." + name, value);
      }
    }
  }
  for (const auto& [key, value] : overrides) apply_setting(cfg, key, value);
  cfg.validate();
  return cfg;
}

std::string to_ini(const ExperimentConfig& cfg) {
  std::string out;
  std::string section;
  for (const auto& f : fields()) {
    const std::string key = f.key;
    const auto dot = key.find('.');
    const std::string sec = key.substr(0, dot);
    if (sec != section) {
      if (!section.empty()) out += "\n";
      out += "[" + sec + "]\n";
      section = sec;
    }
    out += key.substr(dot + 1) + " = " + f.get(cfg) + "\n";
  }
  return out;
}

}  // namespace atomicl::harness
