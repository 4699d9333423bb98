#pragma once

// Flat dotted key=value run configuration. Lines are `key = value`, `#`
// starts a comment, blank lines are ignored. Every key has a default; unknown
// keys and malformed values are rejected with the key named in the error.

#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "xagent/attention.hpp"
#include "xagent/pooling.hpp"
#include "xagent/selection.hpp"
#include "xagent/transport.hpp"

namespace xagent::cli {

class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::string key, const std::string& msg)
      : std::runtime_error(key.empty() ? msg : key + ": " + msg), key_(std::move(key)) {}
  const std::string& key() const { return key_; }

 private:
  std::string key_;
};

struct RunConfig {
  struct {
    Index n = 64;
    Index d = 16;
    Index d_prime = 24;
    Index nc = 12;
    Index layers = 2;
    Index grid_w = 0;  // 0: widest divisor of n not above sqrt(n)
  } dims;
  struct {
    SelectionStrategy strategy = SelectionStrategy::Combined;
    Index k = 10;
    Index q = 4;
    bool largest = false;
  } selection;
  struct {
    double epsilon = 0.05;
    Index max_iter = 200;
    double tol = 1e-6;
    CostVariant cost = CostVariant::Dot;
  } transport;
  struct {
    PoolingMode mode = PoolingMode::Dual;
    double gamma_init = 0.1;
    bool shared_proj = false;
  } pooling;
  struct {
    double lambda_init = 0.5;
    Index heads = 1;
    bool pre_norm = false;
    Wiring wiring;
  } attention;
  struct {
    bool shared_across_layers = true;
    bool projector_attention = true;
    double seg_temperature = 0.07;
  } model;
  struct {
    double token_noise = 0.3;
    double text_noise = 0.05;
    double mix = 0.3;
  } data;
  struct {
    Index steps = 100;
    std::uint64_t seed = 0;
    double lr_decoder = 0.05;
    double lr_backbone = 0.0005;
    Index batch = 1;
  } training;
  struct {
    Index seen = 6;
    Index unseen = 3;
    Index steps = 100;
    Index seeds = 5;
    double token_noise = 1.5;
    Index agent_steps = 150;
  } probe;
  struct {
    Index steps = 5;  // training steps per variant
  } ablate;
  struct {
    std::string dir = "xagent-out";
    bool heatmaps = true;
  } output;
};

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

template <class T>
T parse_unsigned(const std::string& key, const std::string& v) {
  T out{};
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) {
    throw ConfigError(key, "expected a non-negative integer, got '" + v + "'");
  }
  return out;
}

inline double parse_double(const std::string& key, const std::string& v) {
  double out = 0.0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size() || !std::isfinite(out)) {
    throw ConfigError(key, "expected a finite number, got '" + v + "'");
  }
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError(key, "expected true or false, got '" + v + "'");
}

template <class F>
auto parse_enum(const std::string& key, const std::string& v, F&& parse) {
  try {
    return parse(v);
  } catch (const ArgumentError& e) {
    throw ConfigError(key, e.what());
  }
}

struct KeyDef {
  std::string name;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <class Access>
KeyDef index_key(std::string name, Access a) {
  return {name,
          [a, name](RunConfig& c, const std::string& v) { a(c) = parse_unsigned<Index>(name, v); },
          [a](const RunConfig& c) { return std::to_string(a(c)); }};
}

template <class Access>
KeyDef u64_key(std::string name, Access a) {
  return {name,
          [a, name](RunConfig& c, const std::string& v) {
            a(c) = parse_unsigned<std::uint64_t>(name, v);
          },
          [a](const RunConfig& c) { return std::to_string(a(c)); }};
}

template <class Access>
KeyDef double_key(std::string name, Access a) {
  return {name, [a, name](RunConfig& c, const std::string& v) { a(c) = parse_double(name, v); },
          [a](const RunConfig& c) { return format_double(a(c)); }};
}

template <class Access>
KeyDef bool_key(std::string name, Access a) {
  return {name, [a, name](RunConfig& c, const std::string& v) { a(c) = parse_bool(name, v); },
          [a](const RunConfig& c) {
            return std::string(a(c) ? "true" : "false");
          }};
}

template <class Access, class Parse>
KeyDef enum_key(std::string name, Access a, Parse parse) {
  return {name,
          [a, name, parse](RunConfig& c, const std::string& v) {
            a(c) = parse_enum(name, v, parse);
          },
          [a](const RunConfig& c) {
            return std::string(to_string(a(c)));
          }};
}

}  // namespace detail

/// Every accepted key, in documentation order.
inline const std::vector<detail::KeyDef>& config_keys() {
  using namespace detail;
  using C = RunConfig;
  static const std::vector<KeyDef> keys = {
      index_key("dims.n", [](auto& c) -> auto& { return c.dims.n; }),
      index_key("dims.d", [](auto& c) -> auto& { return c.dims.d; }),
      index_key("dims.d_prime", [](auto& c) -> auto& { return c.dims.d_prime; }),
      index_key("dims.nc", [](auto& c) -> auto& { return c.dims.nc; }),
      index_key("dims.layers", [](auto& c) -> auto& { return c.dims.layers; }),
      index_key("dims.grid_w", [](auto& c) -> auto& { return c.dims.grid_w; }),
      enum_key("selection.strategy", [](auto& c) -> auto& { return c.selection.strategy; },
               parse_selection_strategy),
      index_key("selection.k", [](auto& c) -> auto& { return c.selection.k; }),
      index_key("selection.q", [](auto& c) -> auto& { return c.selection.q; }),
      bool_key("selection.largest", [](auto& c) -> auto& { return c.selection.largest; }),
      double_key("transport.epsilon", [](auto& c) -> auto& { return c.transport.epsilon; }),
      index_key("transport.max_iter", [](auto& c) -> auto& { return c.transport.max_iter; }),
      double_key("transport.tol", [](auto& c) -> auto& { return c.transport.tol; }),
      enum_key("transport.cost", [](auto& c) -> auto& { return c.transport.cost; },
               parse_cost_variant),
      enum_key("pooling.mode", [](auto& c) -> auto& { return c.pooling.mode; }, parse_pooling_mode),
      double_key("pooling.gamma_init", [](auto& c) -> auto& { return c.pooling.gamma_init; }),
      bool_key("pooling.shared_proj", [](auto& c) -> auto& { return c.pooling.shared_proj; }),
      double_key("attention.lambda_init", [](auto& c) -> auto& { return c.attention.lambda_init; }),
      index_key("attention.heads", [](auto& c) -> auto& { return c.attention.heads; }),
      bool_key("attention.pre_norm", [](auto& c) -> auto& { return c.attention.pre_norm; }),
      enum_key("attention.wiring", [](auto& c) -> auto& { return c.attention.wiring; },
               parse_wiring),
      bool_key("model.shared_across_layers",
               [](auto& c) -> auto& { return c.model.shared_across_layers; }),
      bool_key("model.projector_attention",
               [](auto& c) -> auto& { return c.model.projector_attention; }),
      double_key("model.seg_temperature", [](auto& c) -> auto& { return c.model.seg_temperature; }),
      double_key("data.token_noise", [](auto& c) -> auto& { return c.data.token_noise; }),
      double_key("data.text_noise", [](auto& c) -> auto& { return c.data.text_noise; }),
      double_key("data.mix", [](auto& c) -> auto& { return c.data.mix; }),
      index_key("training.steps", [](auto& c) -> auto& { return c.training.steps; }),
      u64_key("training.seed", [](auto& c) -> auto& { return c.training.seed; }),
      double_key("training.lr_decoder", [](auto& c) -> auto& { return c.training.lr_decoder; }),
      double_key("training.lr_backbone", [](auto& c) -> auto& { return c.training.lr_backbone; }),
      index_key("training.batch", [](auto& c) -> auto& { return c.training.batch; }),
      index_key("probe.seen", [](auto& c) -> auto& { return c.probe.seen; }),
      index_key("probe.unseen", [](auto& c) -> auto& { return c.probe.unseen; }),
      index_key("probe.steps", [](auto& c) -> auto& { return c.probe.steps; }),
      index_key("probe.seeds", [](auto& c) -> auto& { return c.probe.seeds; }),
      double_key("probe.token_noise", [](auto& c) -> auto& { return c.probe.token_noise; }),
      index_key("probe.agent_steps", [](auto& c) -> auto& { return c.probe.agent_steps; }),
      index_key("ablate.steps", [](auto& c) -> auto& { return c.ablate.steps; }),
      {"output.dir", [](C& c, const std::string& v) { c.output.dir = v; },
       [](const C& c) { return c.output.dir; }},
      bool_key("output.heatmaps", [](auto& c) -> auto& { return c.output.heatmaps; }),
  };
  return keys;
}

inline void set_key(RunConfig& cfg, const std::string& key, const std::string& value) {
  for (const auto& k : config_keys()) {
    if (k.name == key) {
      k.set(cfg, value);
      return;
    }
  }
  throw ConfigError(key, "unknown key");
}

/// Flat key -> value echo with lossless number formatting.
inline std::map<std::string, std::string> echo(const RunConfig& cfg) {
  std::map<std::string, std::string> out;
  for (const auto& k : config_keys()) out[k.name] = k.get(cfg);
  return out;
}

/// Token grid width used by MAD; the grid is width x (n / width).
inline Index grid_width(const RunConfig& cfg) {
  if (cfg.dims.grid_w != 0) return cfg.dims.grid_w;
  Index w = 1;
  for (Index c = 1; c * c <= cfg.dims.n; ++c)
    if (cfg.dims.n % c == 0) w = c;
  return w;
}

inline void validate(const RunConfig& c) {
  auto positive = [](const char* key, Index v) {
    if (v == 0) throw ConfigError(key, "must be >= 1");
  };
  positive("dims.n", c.dims.n);
  positive("dims.d", c.dims.d);
  positive("dims.d_prime", c.dims.d_prime);
  positive("dims.nc", c.dims.nc);
  positive("dims.layers", c.dims.layers);
  positive("selection.k", c.selection.k);
  positive("selection.q", c.selection.q);
  positive("transport.max_iter", c.transport.max_iter);
  positive("attention.heads", c.attention.heads);
  positive("training.steps", c.training.steps);
  positive("training.batch", c.training.batch);
  positive("probe.seen", c.probe.seen);
  positive("probe.unseen", c.probe.unseen);
  positive("probe.steps", c.probe.steps);
  positive("probe.seeds", c.probe.seeds);
  positive("ablate.steps", c.ablate.steps);
  if (c.dims.nc < 2) throw ConfigError("dims.nc", "alignment needs at least 2 categories");
  if (c.selection.k > c.dims.nc) {
    throw ConfigError("selection.k", "k=" + std::to_string(c.selection.k) + " exceeds dims.nc=" +
                                         std::to_string(c.dims.nc));
  }
  if (c.selection.q > c.dims.n) {
    throw ConfigError("selection.q", "q=" + std::to_string(c.selection.q) + " exceeds dims.n=" +
                                         std::to_string(c.dims.n));
  }
  if (c.selection.strategy == SelectionStrategy::Random &&
      c.selection.k * c.selection.q > c.dims.n) {
    throw ConfigError("selection.q", "random selection needs k*q <= dims.n");
  }
  if (!(c.transport.epsilon > 0.0)) throw ConfigError("transport.epsilon", "must be > 0");
  if (!(c.transport.tol > 0.0)) throw ConfigError("transport.tol", "must be > 0");
  if (!(c.pooling.gamma_init > 0.0 && c.pooling.gamma_init < 1.0)) {
    throw ConfigError("pooling.gamma_init", "must lie in (0, 1)");
  }
  if (c.dims.d % c.attention.heads != 0) {
    throw ConfigError("attention.heads", "must divide dims.d");
  }
  if (!(c.model.seg_temperature > 0.0)) throw ConfigError("model.seg_temperature", "must be > 0");
  if (!(c.data.mix >= 0.0 && c.data.mix <= 1.0)) throw ConfigError("data.mix", "must lie in [0, 1]");
  if (c.data.token_noise < 0.0) throw ConfigError("data.token_noise", "must be >= 0");
  if (c.data.text_noise < 0.0) throw ConfigError("data.text_noise", "must be >= 0");
  if (c.probe.token_noise < 0.0) throw ConfigError("probe.token_noise", "must be >= 0");
  if (c.training.lr_decoder < 0.0) throw ConfigError("training.lr_decoder", "must be >= 0");
  if (c.training.lr_backbone < 0.0) throw ConfigError("training.lr_backbone", "must be >= 0");
  if (c.dims.grid_w != 0 && c.dims.n % c.dims.grid_w != 0) {
    throw ConfigError("dims.grid_w", "must divide dims.n");
  }
  if (c.output.dir.empty()) throw ConfigError("output.dir", "must not be empty");
}

/// Split "key=value"; whitespace around either side is dropped.
inline std::pair<std::string, std::string> split_assignment(std::string_view line,
                                                            const std::string& where) {
  const auto eq = line.find('=');
  if (eq == std::string_view::npos) {
    throw ConfigError("", where + ": expected key=value, got '" + std::string(line) + "'");
  }
  std::string key = detail::trim(line.substr(0, eq));
  if (key.empty()) throw ConfigError("", where + ": empty key");
  return {key, detail::trim(line.substr(eq + 1))};
}

inline void apply_text(RunConfig& cfg, std::istream& in, const std::string& source) {
  std::string line;
  for (int lineno = 1; std::getline(in, line); ++lineno) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    if (detail::trim(line).empty()) continue;
    const auto [k, v] = split_assignment(line, source + ":" + std::to_string(lineno));
    set_key(cfg, k, v);
  }
}

/// Defaults, then the file (if any), then overrides in order; then validation.
inline RunConfig parse_config(const std::string& path,
                              const std::vector<std::string>& overrides = {}) {
  RunConfig cfg;
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw ConfigError("", "cannot read config file '" + path + "'");
    apply_text(cfg, in, path);
  }
  for (const auto& o : overrides) {
    const auto [k, v] = split_assignment(o, "--set");
    set_key(cfg, k, v);
  }
  validate(cfg);
  return cfg;
}

inline RunConfig parse_config_text(const std::string& text,
                                   const std::vector<std::string>& overrides = {}) {
  RunConfig cfg;
  std::istringstream in(text);
  apply_text(cfg, in, "<text>");
  for (const auto& o : overrides) {
    const auto [k, v] = split_assignment(o, "--set");
    set_key(cfg, k, v);
  }
  validate(cfg);
  return cfg;
}

}  // namespace xagent::cli
