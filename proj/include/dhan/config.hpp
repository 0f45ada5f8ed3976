#pragma once

// Flat key=value run configuration. Lines are `key = value`; `#` starts a
// comment. Unknown keys and ill-typed values are rejected.

#include <charconv>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "dhan/controller.hpp"
#include "dhan/data.hpp"
#include "dhan/trainer.hpp"

namespace dhan {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Profile { breakhis, synthetic };

struct RunConfig {
  std::uint64_t seed = 0;
  ModelConfig model;
  TrainerConfig trainer;
  SyntheticConfig synthetic;
  std::vector<Transform> transforms = default_transforms();
  double split_ratio = 0.7;
  int magnification = 0;  // 0 keeps every magnification
  std::size_t checkpoint_every = 10;

  static RunConfig defaults(Profile profile = Profile::breakhis) {
    RunConfig c;
    if (profile == Profile::synthetic) {
      c.model.glimpse = 20;
      c.model.sanet.channels = 4;
      c.model.fusion_width = 32;
      c.model.hidden = 32;
      c.trainer.epochs = 50;
      c.transforms.clear();
    }
    return c;
  }

  // The seed drives both parameter initialization and episode sampling.
  TrainerConfig trainer_config() const {
    TrainerConfig t = trainer;
    t.seed = seed;
    return t;
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

template <class I>
I parse_integer(const std::string& key, const std::string& v) {
  I out{};
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) throw ConfigError("config key '" + key + "': expected an integer, got '" + v + "'");
  return out;
}

inline double parse_double(const std::string& key, const std::string& v) {
  char* end = nullptr;
  const double out = std::strtod(v.c_str(), &end);
  if (v.empty() || end != v.c_str() + v.size()) throw ConfigError("config key '" + key + "': expected a number, got '" + v + "'");
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("config key '" + key + "': expected true or false, got '" + v + "'");
}

struct ConfigField {
  std::string key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

#define DHAN_INT_FIELD(KEY, EXPR)                                                               \
  ConfigField {                                                                                 \
    KEY, [](const RunConfig& c) { return std::to_string(c.EXPR); },                             \
        [](RunConfig& c, const std::string& v) { c.EXPR = parse_integer<decltype(c.EXPR)>(KEY, v); } \
  }
#define DHAN_DOUBLE_FIELD(KEY, EXPR)                                       \
  ConfigField {                                                            \
    KEY, [](const RunConfig& c) { return format_double(c.EXPR); },         \
        [](RunConfig& c, const std::string& v) { c.EXPR = parse_double(KEY, v); } \
  }
#define DHAN_BOOL_FIELD(KEY, EXPR)                                                     \
  ConfigField {                                                                        \
    KEY, [](const RunConfig& c) { return std::string(c.EXPR ? "true" : "false"); },    \
        [](RunConfig& c, const std::string& v) { c.EXPR = parse_bool(KEY, v); }         \
  }

inline const std::vector<ConfigField>& config_fields() {
  static const std::vector<ConfigField> fields{
      DHAN_INT_FIELD("seed", seed),
      DHAN_INT_FIELD("episode.steps", model.steps),
      DHAN_INT_FIELD("glimpse.size", model.glimpse),
      DHAN_DOUBLE_FIELD("location.sigma", model.sigma),
      DHAN_BOOL_FIELD("sa_net.enabled", model.sanet.enabled),
      DHAN_INT_FIELD("sa_net.channels", model.sanet.channels),
      DHAN_INT_FIELD("sa_net.trunk_depth", model.sanet.trunk_depth),
      DHAN_INT_FIELD("sa_net.mask_depth", model.sanet.mask_depth),
      DHAN_DOUBLE_FIELD("bn.momentum", model.sanet.bn_momentum),
      DHAN_DOUBLE_FIELD("bn.eps", model.sanet.bn_eps),
      DHAN_INT_FIELD("fusion.width", model.fusion_width),
      DHAN_INT_FIELD("lstm.hidden", model.hidden),
      DHAN_INT_FIELD("classes", model.classes),
      DHAN_BOOL_FIELD("per_step_action_logprob", model.per_step_action_logprob),
      ConfigField{"optimizer.kind",
                  [](const RunConfig& c) { return std::string(c.trainer.optimizer == OptimizerKind::adam ? "adam" : "plain"); },
                  [](RunConfig& c, const std::string& v) {
                    if (v == "adam") c.trainer.optimizer = OptimizerKind::adam;
                    else if (v == "plain") c.trainer.optimizer = OptimizerKind::plain;
                    else throw ConfigError("config key 'optimizer.kind': expected adam or plain, got '" + v + "'");
                  }},
      DHAN_DOUBLE_FIELD("optimizer.lr", trainer.lr),
      DHAN_DOUBLE_FIELD("optimizer.decay", trainer.decay),
      DHAN_INT_FIELD("optimizer.batch", trainer.batch),
      DHAN_DOUBLE_FIELD("optimizer.clip_norm", trainer.clip_norm),
      DHAN_INT_FIELD("train.epochs", trainer.epochs),
      ConfigField{"baseline.mode",
                  [](const RunConfig& c) { return std::string(c.trainer.baseline == BaselineMode::ema ? "ema" : "off"); },
                  [](RunConfig& c, const std::string& v) {
                    if (v == "ema") c.trainer.baseline = BaselineMode::ema;
                    else if (v == "off") c.trainer.baseline = BaselineMode::off;
                    else throw ConfigError("config key 'baseline.mode': expected ema or off, got '" + v + "'");
                  }},
      DHAN_DOUBLE_FIELD("baseline.ema", trainer.ema),
      DHAN_INT_FIELD("checkpoint.every", checkpoint_every),
      ConfigField{"augment.transforms",
                  [](const RunConfig& c) {
                    if (c.transforms.empty()) return std::string("none");
                    std::string s;
                    for (auto t : c.transforms) s += (s.empty() ? "" : ",") + to_string(t);
                    return s;
                  },
                  [](RunConfig& c, const std::string& v) {
                    c.transforms.clear();
                    if (v == "none") return;
                    std::stringstream ss(v);
                    std::string item;
                    while (std::getline(ss, item, ',')) {
                      auto t = parse_transform(trim(item));
                      if (!t) throw ConfigError("config key 'augment.transforms': unknown transform '" + trim(item) + "'");
                      c.transforms.push_back(*t);
                    }
                  }},
      DHAN_DOUBLE_FIELD("data.split_ratio", split_ratio),
      DHAN_INT_FIELD("data.magnification", magnification),
      DHAN_INT_FIELD("synthetic.canvas", synthetic.canvas),
      DHAN_INT_FIELD("synthetic.pattern", synthetic.pattern),
      DHAN_INT_FIELD("synthetic.distractors", synthetic.distractors),
      DHAN_INT_FIELD("synthetic.distractor_size", synthetic.distractor_size),
      DHAN_DOUBLE_FIELD("synthetic.noise", synthetic.noise),
      DHAN_INT_FIELD("synthetic.train_count", synthetic.train_count),
      DHAN_INT_FIELD("synthetic.test_count", synthetic.test_count),
      DHAN_INT_FIELD("synthetic.seed", synthetic.seed),
  };
  return fields;
}

#undef DHAN_INT_FIELD
#undef DHAN_DOUBLE_FIELD
#undef DHAN_BOOL_FIELD

}  // namespace detail

inline void validate(const RunConfig& c) {
  try {
    c.trainer_config().validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  if (c.model.steps == 0) throw ConfigError("config key 'episode.steps': must be at least 1");
  if (c.model.glimpse == 0) throw ConfigError("config key 'glimpse.size': must be at least 1");
  if (c.model.sanet.enabled && c.model.glimpse % 4 != 0) throw ConfigError("config key 'glimpse.size': must be a multiple of 4");
  if (!(c.model.sigma >= 0.0)) throw ConfigError("config key 'location.sigma': must be non-negative");
  if (c.model.classes < 2) throw ConfigError("config key 'classes': must be at least 2");
  if (c.model.sanet.channels == 0 || c.model.fusion_width == 0 || c.model.hidden == 0) {
    throw ConfigError("config: widths must be positive");
  }
  if (!(c.split_ratio > 0.0 && c.split_ratio < 1.0)) throw ConfigError("config key 'data.split_ratio': must lie in (0, 1)");
  if (c.magnification != 0 && !valid_magnification(c.magnification)) {
    throw ConfigError("config key 'data.magnification': must be 0, 40, 100, 200 or 400");
  }
  if (c.checkpoint_every == 0) throw ConfigError("config key 'checkpoint.every': must be at least 1");
}

// Applies the assignments in `text` on top of `base`.
inline RunConfig parse_config(const std::string& text, RunConfig base = RunConfig::defaults()) {
  const auto& fields = detail::config_fields();
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = detail::trim(line.substr(0, eq)), value = detail::trim(line.substr(eq + 1));
    auto it = std::find_if(fields.begin(), fields.end(), [&](const auto& f) { return f.key == key; });
    if (it == fields.end()) throw ConfigError("unknown config key '" + key + "' on line " + std::to_string(lineno));
    it->set(base, value);
  }
  validate(base);
  return base;
}

inline RunConfig load_config(const std::string& path, RunConfig base = RunConfig::defaults()) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot read config file " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_config(ss.str(), std::move(base));
}

// Every key, in a fixed order; parse_config(to_text(c)) reproduces c.
inline std::string to_text(const RunConfig& c) {
  std::string out;
  for (const auto& f : detail::config_fields()) out += f.key + " = " + f.get(c) + "\n";
  return out;
}

// GLIMPSE_SEED, when set, replaces the configured seed.
inline void apply_env_overrides(RunConfig& c) {
  if (const char* s = std::getenv("GLIMPSE_SEED")) {
    c.seed = detail::parse_integer<std::uint64_t>("GLIMPSE_SEED", detail::trim(s));
  }
}

}  // namespace dhan
