#pragma once

// RunReport: the single JSON document each run produces. Wall-clock timings
// live in their own object so reports can be compared with them stripped.

#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "xagent/cli/heatmap.hpp"

namespace xagent::cli {

using nlohmann::json;

struct InvariantResult {
  std::string name;
  bool passed = false;
  double value = 0.0;
  double tolerance = 0.0;

  bool operator==(const InvariantResult&) const = default;
};

struct LossRecord {
  Index step = 0;
  double seg = 0.0;
  double align = 0.0;
  double total = 0.0;

  bool operator==(const LossRecord&) const = default;
};

struct ProbeRecord {
  std::uint64_t seed = 0;
  std::vector<double> baseline;  // mean unseen activation per step
  std::vector<double> agent;

  bool operator==(const ProbeRecord&) const = default;
};

struct VariantRecord {
  std::string axis;  // selection | cost | pooling | wiring
  std::string name;
  double initial_loss = 0.0;
  double final_loss = 0.0;
  std::vector<InvariantResult> invariants;

  bool operator==(const VariantRecord&) const = default;
};

struct ErrorRecord {
  std::string stage;
  std::string message;

  bool operator==(const ErrorRecord&) const = default;
};

struct RunReport {
  std::string subcommand;
  std::uint64_t seed = 0;
  std::map<std::string, std::string> config;
  std::vector<LossRecord> losses;
  std::vector<InvariantResult> invariants;
  std::vector<double> mad_start;  // per layer
  std::vector<double> mad_end;
  std::vector<ProbeRecord> probe;
  std::vector<VariantRecord> variants;
  std::vector<std::string> artifacts;
  std::optional<ErrorRecord> error;
  std::map<std::string, double> timings;  // seconds

  bool passed() const {
    if (error) return false;
    for (const auto& i : invariants)
      if (!i.passed) return false;
    for (const auto& v : variants)
      for (const auto& i : v.invariants)
        if (!i.passed) return false;
    return true;
  }

  bool operator==(const RunReport&) const = default;
};

inline void to_json(json& j, const InvariantResult& r) {
  j = json{{"name", r.name}, {"passed", r.passed}, {"value", r.value}, {"tolerance", r.tolerance}};
}
inline void from_json(const json& j, InvariantResult& r) {
  j.at("name").get_to(r.name);
  j.at("passed").get_to(r.passed);
  j.at("value").get_to(r.value);
  j.at("tolerance").get_to(r.tolerance);
}

inline void to_json(json& j, const LossRecord& r) {
  j = json{{"step", r.step}, {"seg", r.seg}, {"align", r.align}, {"total", r.total}};
}
inline void from_json(const json& j, LossRecord& r) {
  j.at("step").get_to(r.step);
  j.at("seg").get_to(r.seg);
  j.at("align").get_to(r.align);
  j.at("total").get_to(r.total);
}

inline void to_json(json& j, const ProbeRecord& r) {
  j = json{{"seed", r.seed}, {"baseline", r.baseline}, {"agent", r.agent}};
}
inline void from_json(const json& j, ProbeRecord& r) {
  j.at("seed").get_to(r.seed);
  j.at("baseline").get_to(r.baseline);
  j.at("agent").get_to(r.agent);
}

inline void to_json(json& j, const VariantRecord& r) {
  j = json{{"axis", r.axis},
           {"name", r.name},
           {"initial_loss", r.initial_loss},
           {"final_loss", r.final_loss},
           {"invariants", r.invariants}};
}
inline void from_json(const json& j, VariantRecord& r) {
  j.at("axis").get_to(r.axis);
  j.at("name").get_to(r.name);
  j.at("initial_loss").get_to(r.initial_loss);
  j.at("final_loss").get_to(r.final_loss);
  j.at("invariants").get_to(r.invariants);
}

inline json report_json(const RunReport& r, bool with_timings = true) {
  json j{{"subcommand", r.subcommand},
         {"seed", r.seed},
         {"passed", r.passed()},
         {"config", r.config},
         {"losses", r.losses},
         {"invariants", r.invariants},
         {"mad", {{"start", r.mad_start}, {"end", r.mad_end}}},
         {"probe", r.probe},
         {"variants", r.variants},
         {"artifacts", r.artifacts},
         {"error", nullptr}};
  if (r.error) j["error"] = json{{"stage", r.error->stage}, {"message", r.error->message}};
  if (with_timings) j["timings"] = r.timings;
  return j;
}

inline RunReport report_from_json(const json& j) {
  RunReport r;
  j.at("subcommand").get_to(r.subcommand);
  j.at("seed").get_to(r.seed);
  j.at("config").get_to(r.config);
  j.at("losses").get_to(r.losses);
  j.at("invariants").get_to(r.invariants);
  j.at("mad").at("start").get_to(r.mad_start);
  j.at("mad").at("end").get_to(r.mad_end);
  j.at("probe").get_to(r.probe);
  j.at("variants").get_to(r.variants);
  j.at("artifacts").get_to(r.artifacts);
  if (!j.at("error").is_null()) {
    r.error = ErrorRecord{j["error"].at("stage").get<std::string>(),
                          j["error"].at("message").get<std::string>()};
  }
  if (j.contains("timings")) j.at("timings").get_to(r.timings);
  return r;
}

inline std::string serialize(const RunReport& r, bool with_timings = true) {
  return report_json(r, with_timings).dump(2) + "\n";
}

inline RunReport deserialize(const std::string& text) { return report_from_json(json::parse(text)); }

inline void write_report(const RunReport& r, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("write_report: cannot open '" + path + "'");
  f << serialize(r);
  if (!f) throw IoError("write_report: write to '" + path + "' failed");
}

}  // namespace xagent::cli
