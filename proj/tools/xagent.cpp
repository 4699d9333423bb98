// xagent <subcommand> --config <path> [--set key=value ...] --out <dir> --seed <n>
//
// Exit status is 0 iff every invariant check passed; the report is written to
// <out>/report.json either way. XAGENT_OUT, when set, replaces --out.

#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "xagent/cli/runner.hpp"

int main(int argc, char** argv) {
  namespace xc = xagent::cli;
  CLI::App app{"Agent-mediated cross-modal attention harness"};
  app.require_subcommand(1);

  std::string config_path;
  std::vector<std::string> overrides;
  std::string out_dir;
  std::optional<std::uint64_t> seed;
  for (const auto& name : xc::subcommands()) {
    CLI::App* sub = app.add_subcommand(name, "run the " + name + " stage");
    sub->add_option("--config", config_path, "flat key=value config file");
    sub->add_option("--set", overrides, "override key=value (repeatable)")->take_all();
    sub->add_option("--out", out_dir, "output directory");
    sub->add_option("--seed", seed, "seed (overrides training.seed)");
  }
  CLI11_PARSE(app, argc, argv);
  const std::string subcommand = app.get_subcommands().front()->get_name();

  xc::RunConfig cfg;
  try {
    cfg = xc::parse_config(config_path, overrides);
  } catch (const xc::ConfigError& e) {
    std::cerr << "xagent: config error: " << e.what() << "\n";
    return 2;
  }
  if (seed) cfg.training.seed = *seed;
  if (!out_dir.empty()) cfg.output.dir = out_dir;
  if (const char* env = std::getenv("XAGENT_OUT"); env != nullptr && *env != '\0') {
    cfg.output.dir = env;
  }

  xc::RunReport report;
  try {
    report = xc::run(subcommand, cfg, cfg.training.seed, cfg.output.dir);
  } catch (const std::exception& e) {
    std::cerr << "xagent: " << e.what() << "\n";
    return 2;
  }
  for (const auto& inv : report.invariants) {
    std::cout << (inv.passed ? "PASS " : "FAIL ") << inv.name << " value=" << inv.value
              << " tol=" << inv.tolerance << "\n";
  }
  for (const auto& v : report.variants) {
    bool ok = true;
    for (const auto& inv : v.invariants) ok = ok && inv.passed;
    std::cout << (ok ? "PASS " : "FAIL ") << "variant " << v.axis << "=" << v.name
              << " loss " << v.initial_loss << " -> " << v.final_loss << "\n";
  }
  if (report.error) {
    std::cerr << "xagent: failed during " << report.error->stage << ": " << report.error->message
              << "\n";
  }
  std::cout << "report: " << cfg.output.dir << "/report.json\n";
  return report.passed() ? 0 : 1;
}
