#pragma once

// Subcommand orchestration: builds the synthetic instance and model from a
// RunConfig, runs the requested stage, evaluates the invariant suite and
// writes the report plus sidecar files into the output directory.

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <set>
#include <string>
#include <vector>

#include "xagent/cli/config.hpp"
#include "xagent/cli/heatmap.hpp"
#include "xagent/cli/report.hpp"
#include "xagent/training/probe.hpp"
#include "xagent/training/synthetic.hpp"
#include "xagent/training/trainer.hpp"

namespace xagent::cli {

inline const std::vector<std::string>& subcommands() {
  static const std::vector<std::string> s{"forward", "train", "ablate", "probe", "mad"};
  return s;
}

/// Invariants checked after every forward pass, in report order.
inline const std::vector<std::string>& forward_invariant_names() {
  static const std::vector<std::string> names{
      "transport.plan_valid",        "transport.marginals",       "affinity.open_unit_interval",
      "selection.agent_count",       "selection.unique_sources",  "pooling.mask_columns",
      "pooling.gamma_consistent",    "attention.branch_row_sums", "attention.finite",
      "loss.total_is_sum",           "loss.align_nonnegative",    "mad.within_grid",
  };
  return names;
}

/// The pinned invariant list of each subcommand's report.
inline std::vector<std::string> declared_invariants(const std::string& subcommand) {
  std::vector<std::string> names;
  if (subcommand == "forward") return forward_invariant_names();
  if (subcommand == "train" || subcommand == "mad") {
    names = forward_invariant_names();
    names.insert(names.end(), {"train.history_finite", "train.steps_recorded"});
    return names;
  }
  if (subcommand == "ablate") return {"ablate.variant_count", "ablate.all_variants_pass"};
  if (subcommand == "probe") {
    return {"probe.activation_range", "probe.baseline_decay", "probe.agent_preserves"};
  }
  throw ArgumentError("unknown subcommand '" + subcommand + "'");
}

// ---------------------------------------------------------------------------
// Building blocks from the configuration

inline PipelineConfig pipeline_config(const RunConfig& c, std::uint64_t seed) {
  PipelineConfig p;
  p.strategy = c.selection.strategy;
  p.k = c.selection.k;
  p.q = c.selection.q;
  p.largest = c.selection.largest;
  p.cost = c.transport.cost;
  p.epsilon = c.transport.epsilon;
  p.max_iter = c.transport.max_iter;
  p.tol = c.transport.tol;
  p.pooling = c.pooling.mode;
  p.attn = AttnOptions{c.attention.heads, c.attention.pre_norm};
  p.wiring = c.attention.wiring;
  p.seg_temperature = c.model.seg_temperature;
  p.selection_seed = seed;
  return p;
}

inline ModelSpec model_spec(const RunConfig& c) {
  ModelSpec s;
  s.d = c.dims.d;
  s.d_prime = c.dims.d_prime;
  s.layers = c.dims.layers;
  s.k = c.selection.k;
  s.q = c.selection.q;
  s.gamma_init = c.pooling.gamma_init;
  s.lambda_init = c.attention.lambda_init;
  s.shared_proj = c.pooling.shared_proj;
  s.shared_across_layers = c.model.shared_across_layers;
  s.projector_attention = c.model.projector_attention;
  s.learnable_agents = c.selection.strategy == SelectionStrategy::LearnableInit;
  return s;
}

/// Category space, model and data stream share one seeded generator, each
/// drawn from its own derived stream.
struct Setup {
  CategorySpace categories;
  Model model;
  PipelineConfig pipeline;
  Instance instance;  // the evaluation instance
  BatchStream stream;
};

inline Setup make_setup(const RunConfig& c, std::uint64_t seed) {
  Setup s;
  SyntheticSpec spec;
  spec.d = c.dims.d;
  spec.d_prime = c.dims.d_prime;
  spec.seen = c.dims.nc;
  spec.mix = c.data.mix;
  spec.token_noise = c.data.token_noise;
  spec.text_noise = c.data.text_noise;
  Rng cat_rng(seed * 4 + 1);
  s.categories = make_categories(spec, cat_rng);
  Rng model_rng(seed * 4 + 2);
  s.model = init_model(model_spec(c), model_rng);
  s.pipeline = pipeline_config(c, seed);
  Rng eval_rng(seed * 4 + 3);
  s.instance = make_instance(s.categories, c.dims.n, c.dims.nc, c.data.token_noise, eval_rng);
  const CategorySpace cats = s.categories;
  const Index n = c.dims.n, nc = c.dims.nc, batch = c.training.batch;
  const double noise = c.data.token_noise;
  s.stream = [cats, n, nc, batch, noise, seed](Index step) {
    Rng rng((seed * 4 + 4) * 0x9E3779B97F4A7C15ULL + step);
    std::vector<Instance> out;
    for (Index b = 0; b < batch; ++b) out.push_back(make_instance(cats, n, nc, noise, rng));
    return out;
  };
  return s;
}

// ---------------------------------------------------------------------------
// Invariants

inline InvariantResult check(std::string name, bool passed, double value, double tolerance) {
  return {std::move(name), passed && std::isfinite(value), value, tolerance};
}

inline double max_marginal_violation(const TransportPlan& p) {
  const Index nc = p.plan.rows(), n = p.plan.cols();
  double err = 0.0;
  for (double s : row_sums(p.plan)) err = std::max(err, std::abs(s - 1.0 / static_cast<double>(nc)));
  for (double s : col_sums(p.plan)) err = std::max(err, std::abs(s - 1.0 / static_cast<double>(n)));
  return err;
}

inline Vector mad_profile(const ForwardTrace& t, Index grid_w) {
  Vector out;
  for (const auto& l : t.layers) {
    const Index n = l.self_attn.weights.rows();
    out.push_back(mean_attention_distance(l.self_attn.weights, grid_w, n / grid_w));
  }
  return out;
}

inline std::vector<InvariantResult> forward_invariants(const Model& model, const PipelineConfig& pc,
                                                       const ForwardTrace& t, Index grid_w) {
  std::vector<InvariantResult> out;
  const Matrix& f_t = t.projector.f_t;

  double plan_err = 0.0, marg = 0.0;
  bool plan_ok = true;
  for (const auto& l : t.layers) {
    if (!l.plan) continue;
    const TransportPlan& p = *l.plan;
    for (double v : p.plan.data()) plan_ok = plan_ok && std::isfinite(v) && v >= 0.0;
    const double measured = max_marginal_violation(p);
    plan_err = std::max(plan_err, std::abs(measured - p.marginal_error));
    if (p.converged) marg = std::max(marg, measured);
  }
  out.push_back(check("transport.plan_valid", plan_ok && plan_err <= 1e-12, plan_err, 1e-12));
  out.push_back(check("transport.marginals", marg <= pc.tol, marg, pc.tol));

  Index outside = 0;
  for (const auto& l : t.layers) {
    Matrix a;
    const Matrix& key = xagent::detail::pick(l, pc.wiring.affinity_source);
    if (pc.strategy == SelectionStrategy::Combined) a = affinity(f_t, key, *l.plan).values;
    if (pc.strategy == SelectionStrategy::OtOnly) a = sigmoid(l.plan->plan);
    if (pc.strategy == SelectionStrategy::CosineOnly) a = sigmoid(cosine_similarity(f_t, key));
    for (double v : a.data()) outside += !(v > 0.0 && v < 1.0);
  }
  out.push_back(check("affinity.open_unit_interval", outside == 0, static_cast<double>(outside), 0));

  double count_gap = 0.0, dups = 0.0;
  for (const auto& l : t.layers) {
    count_gap = std::max(count_gap, std::abs(static_cast<double>(l.selection.count()) -
                                             static_cast<double>(pc.k * pc.q)));
    std::set<Index> seen;
    for (Index s : l.selection.source)
      if (s != kNoSource && !seen.insert(s).second) dups += 1.0;
  }
  out.push_back(check("selection.agent_count", count_gap == 0.0, count_gap, 0));
  out.push_back(check("selection.unique_sources", dups == 0.0, dups, 0));

  double mask_err = 0.0, gamma_err = 0.0;
  for (const auto& l : t.layers) {
    for (const Matrix* m : {&l.pooling.mask_v, &l.pooling.mask_t})
      for (double s : col_sums(*m)) mask_err = std::max(mask_err, std::abs(s - 1.0));
    const PoolingParams& pp = model.blocks[l.block].pooling;
    double expected = 0.0;
    if (pc.pooling == PoolingMode::Dual) expected = pp.gamma();
    if (pc.pooling == PoolingMode::SingleGamma) expected = pp.gamma_single;
    gamma_err = std::max(gamma_err, std::abs(l.pooling.gamma - expected));
  }
  out.push_back(check("pooling.mask_columns", mask_err <= 1e-9, mask_err, 1e-9));
  out.push_back(check("pooling.gamma_consistent", gamma_err == 0.0, gamma_err, 0));

  double row_err = 0.0, nonfinite = 0.0;
  for (const auto& l : t.layers) {
    for (const DiffAttnCache* c : {&l.agent.block1, &l.agent.block2}) {
      for (const auto* branch : {&c->s1, &c->s2})
        for (const auto& s : *branch)
          for (double r : row_sums(s.weights)) row_err = std::max(row_err, std::abs(r - 1.0));
    }
    for (double v : l.agent.out.data()) nonfinite += !std::isfinite(v);
  }
  out.push_back(check("attention.branch_row_sums", row_err <= 1e-9, row_err, 1e-9));
  out.push_back(check("attention.finite", nonfinite == 0.0, nonfinite, 0));

  const double sum_gap = std::abs(t.total - (t.seg + t.align));
  out.push_back(check("loss.total_is_sum", sum_gap <= 1e-12, sum_gap, 1e-12));
  out.push_back(check("loss.align_nonnegative", t.align >= 0.0, t.align, 0));

  const Index n = t.layers.front().self_attn.weights.rows();
  const double gw = static_cast<double>(grid_w), gh = static_cast<double>(n / grid_w);
  const double diag = std::sqrt((gw - 1) * (gw - 1) + (gh - 1) * (gh - 1));
  double worst = 0.0;
  bool in_range = true;
  for (double m : mad_profile(t, grid_w)) {
    worst = std::max(worst, m);
    in_range = in_range && m >= 0.0 && m <= diag + 1e-12;
  }
  out.push_back(check("mad.within_grid", in_range, worst, diag));
  return out;
}

inline std::vector<InvariantResult> train_invariants(const TrainState& s, Index steps) {
  double bad = 0.0;
  for (double v : s.history) bad += !std::isfinite(v);
  const double gap = std::abs(static_cast<double>(s.history.size()) - static_cast<double>(steps));
  return {check("train.history_finite", bad == 0.0, bad, 0),
          check("train.steps_recorded", gap == 0.0, gap, 0)};
}

// ---------------------------------------------------------------------------
// Output helpers

class OutputDir {
 public:
  explicit OutputDir(std::filesystem::path root) : root_(std::move(root)) {
    std::filesystem::create_directories(root_);
  }
  const std::filesystem::path& root() const { return root_; }

  /// Writes `text` to a path relative to the root and records it.
  void write(RunReport& r, const std::string& rel, const std::string& text) const {
    const auto p = root_ / rel;
    std::filesystem::create_directories(p.parent_path());
    std::ofstream f(p, std::ios::binary);
    if (!f || !(f << text)) throw IoError("cannot write '" + p.string() + "'");
    r.artifacts.push_back(rel);
  }

 private:
  std::filesystem::path root_;
};

inline void emit_heatmaps(RunReport& r, const OutputDir& out, const ForwardTrace& t,
                          const std::string& tag) {
  for (Index l = 0; l < t.layers.size(); ++l) {
    const auto& lt = t.layers[l];
    const AgentAttnRecord rec{lt.agent.block1.record(), lt.agent.block2.record()};
    const std::string base = "heatmaps/" + tag + "_layer" + std::to_string(l);
    out.write(r, base + "_cross_attn.txt", heatmap_text(cross_attn_weights(lt.x_mid, t.projector.f_t)));
    out.write(r, base + "_agent_attn.txt", heatmap_text(effective_routing(rec)));
  }
}

inline LossRecord loss_record(Index step, const ForwardTrace& t) {
  return {step, t.seg, t.align, t.total};
}

inline std::string curve_text(const std::vector<double>& values) {
  std::string s;
  for (Index i = 0; i < values.size(); ++i) s += std::to_string(i) + " " + format_g9(values[i]) + "\n";
  return s;
}

// ---------------------------------------------------------------------------
// Subcommands

namespace stages {

inline void forward(RunReport& r, const RunConfig& c, std::uint64_t seed, const OutputDir& out,
                    std::string& stage) {
  stage = "setup";
  Setup s = make_setup(c, seed);
  stage = "forward";
  const ForwardTrace t = xagent::forward(s.model, s.pipeline, s.instance);
  r.losses.push_back(loss_record(0, t));
  stage = "invariants";
  r.invariants = forward_invariants(s.model, s.pipeline, t, grid_width(c));
  const Vector mad = mad_profile(t, grid_width(c));
  r.mad_start = mad;
  r.mad_end = mad;
  if (c.output.heatmaps) {
    stage = "heatmaps";
    emit_heatmaps(r, out, t, "forward");
  }
}

inline void train(RunReport& r, const RunConfig& c, std::uint64_t seed, const OutputDir& out,
                  std::string& stage) {
  stage = "setup";
  Setup s = make_setup(c, seed);
  const ForwardTrace t0 = xagent::forward(s.model, s.pipeline, s.instance);
  r.mad_start = mad_profile(t0, grid_width(c));
  r.losses.push_back(loss_record(0, t0));
  stage = "train";
  TrainState st;
  st.model = s.model;
  st.lr.lr_decoder = c.training.lr_decoder;
  st.lr.lr_backbone = c.training.lr_backbone;
  try {
    st = xagent::train(c.training.steps, std::move(st), s.pipeline, s.stream);
  } catch (const TrainingAborted& e) {
    out.write(r, "loss_curve.txt", curve_text(e.state().history));
    throw;
  }
  out.write(r, "loss_curve.txt", curve_text(st.history));
  stage = "final forward";
  const ForwardTrace t1 = xagent::forward(st.model, s.pipeline, s.instance);
  r.losses.push_back(loss_record(st.step, t1));
  r.mad_end = mad_profile(t1, grid_width(c));
  stage = "invariants";
  r.invariants = forward_invariants(st.model, s.pipeline, t1, grid_width(c));
  for (auto& i : train_invariants(st, c.training.steps)) r.invariants.push_back(i);
  if (c.output.heatmaps) {
    stage = "heatmaps";
    emit_heatmaps(r, out, t1, "final");
  }
}

/// Only the MAD profile before and after training; no heatmaps.
inline void mad(RunReport& r, RunConfig c, std::uint64_t seed, const OutputDir& out,
                std::string& stage) {
  c.output.heatmaps = false;
  train(r, c, seed, out, stage);
  std::string text;
  for (Index l = 0; l < r.mad_start.size(); ++l)
    text += std::to_string(l) + " " + format_g9(r.mad_start[l]) + " " + format_g9(r.mad_end[l]) + "\n";
  out.write(r, "mad_profile.txt", text);
}

struct Variant {
  std::string axis;
  std::string name;
  std::function<void(RunConfig&)> apply;
};

/// Selection strategies, cost matrices, pooling scalars, then every wiring.
inline std::vector<Variant> ablation_variants() {
  std::vector<Variant> v;
  for (auto s : {SelectionStrategy::Random, SelectionStrategy::LearnableInit,
                 SelectionStrategy::CosineOnly, SelectionStrategy::OtOnly,
                 SelectionStrategy::Combined})
    v.push_back({"selection", std::string(to_string(s)), [s](RunConfig& c) { c.selection.strategy = s; }});
  for (auto cv : {CostVariant::Dot, CostVariant::Mae, CostVariant::Mse})
    v.push_back({"cost", std::string(to_string(cv)), [cv](RunConfig& c) { c.transport.cost = cv; }});
  for (auto m : {PoolingMode::Dual, PoolingMode::SingleGamma})
    v.push_back({"pooling", std::string(to_string(m)), [m](RunConfig& c) { c.pooling.mode = m; }});
  for (const Wiring& w : all_wirings())
    v.push_back({"wiring", to_string(w), [w](RunConfig& c) { c.attention.wiring = w; }});
  return v;
}

inline void ablate(RunReport& r, const RunConfig& base, std::uint64_t seed, const OutputDir& out,
                   std::string& stage) {
  const auto variants = ablation_variants();
  std::string table = "axis name initial_loss final_loss passed\n";
  for (const auto& v : variants) {
    stage = "variant " + v.axis + "=" + v.name;
    RunConfig c = base;
    v.apply(c);
    validate(c);
    Setup s = make_setup(c, seed);
    const ForwardTrace t0 = xagent::forward(s.model, s.pipeline, s.instance);
    TrainState st;
    st.model = s.model;
    st.lr.lr_decoder = c.training.lr_decoder;
    st.lr.lr_backbone = c.training.lr_backbone;
    st = xagent::train(c.ablate.steps, std::move(st), s.pipeline, s.stream);
    const ForwardTrace t1 = xagent::forward(st.model, s.pipeline, s.instance);
    VariantRecord rec{v.axis, v.name, t0.total, t1.total,
                      forward_invariants(st.model, s.pipeline, t1, grid_width(c))};
    for (auto& i : train_invariants(st, c.ablate.steps)) rec.invariants.push_back(i);
    bool ok = true;
    for (const auto& i : rec.invariants) ok = ok && i.passed;
    table += v.axis + " " + v.name + " " + format_g9(rec.initial_loss) + " " +
             format_g9(rec.final_loss) + " " + (ok ? "1" : "0") + "\n";
    r.variants.push_back(std::move(rec));
  }
  stage = "invariants";
  const double expected = 5 + 3 + 2 + static_cast<double>(all_wirings().size());
  const double count = static_cast<double>(r.variants.size());
  r.invariants.push_back(check("ablate.variant_count", count == expected, count, expected));
  double failing = 0.0;
  for (const auto& v : r.variants)
    for (const auto& i : v.invariants) failing += !i.passed;
  r.invariants.push_back(check("ablate.all_variants_pass", failing == 0.0, failing, 0));
  out.write(r, "ablation.txt", table);
}

inline ProbeConfig probe_config(const RunConfig& c) {
  ProbeConfig p;
  p.data.d = c.dims.d;
  p.data.d_prime = c.dims.d;
  p.data.mix = c.data.mix;
  p.data.token_noise = c.probe.token_noise;
  p.data.text_noise = c.data.text_noise;
  p.agent_steps = c.probe.agent_steps;
  return p;
}

/// Paired baseline / agent runs over probe.seeds consecutive seeds.
inline void probe(RunReport& r, const RunConfig& c, std::uint64_t seed, const OutputDir& out,
                  std::string& stage) {
  const ProbeConfig pc = probe_config(c);
  IndexList seen, unseen;
  for (Index i = 0; i < c.probe.seen; ++i) seen.push_back(i);
  for (Index i = 0; i < c.probe.unseen; ++i) unseen.push_back(c.probe.seen + i);
  Index decays = 0, preserved = 0;
  double out_of_range = 0.0;
  std::string text = "seed step baseline agent\n";
  for (Index k = 0; k < c.probe.seeds; ++k) {
    const std::uint64_t s = seed + k;
    stage = "probe seed " + std::to_string(s);
    const ProbeTrajectory b = probe_simulation(seen, unseen, c.probe.steps, false, pc, s);
    const ProbeTrajectory a = probe_simulation(seen, unseen, c.probe.steps, true, pc, s);
    decays += b.mean_unseen.back() < b.mean_unseen.front();
    preserved += a.mean_unseen.back() >= b.mean_unseen.back();
    for (const auto* t : {&a, &b})
      for (const auto& row : t->unseen_activation)
        for (double v : row) out_of_range += !(v >= 0.0 && v <= 1.0);
    for (Index i = 0; i < b.mean_unseen.size(); ++i)
      text += std::to_string(s) + " " + std::to_string(i) + " " + format_g9(b.mean_unseen[i]) +
              " " + format_g9(a.mean_unseen[i]) + "\n";
    r.probe.push_back({s, b.mean_unseen, a.mean_unseen});
  }
  stage = "invariants";
  const double n = static_cast<double>(c.probe.seeds);
  const double dec = static_cast<double>(decays) / n, pre = static_cast<double>(preserved) / n;
  r.invariants.push_back(check("probe.activation_range", out_of_range == 0.0, out_of_range, 0));
  r.invariants.push_back(check("probe.baseline_decay", dec >= 0.8, dec, 0.8));
  r.invariants.push_back(check("probe.agent_preserves", pre >= 0.8, pre, 0.8));
  out.write(r, "probe_trajectories.txt", text);
}

}  // namespace stages

/// Runs one subcommand. Module errors are caught and recorded with the
/// failing stage; the report (possibly partial) is always written.
inline RunReport run(const std::string& subcommand, const RunConfig& cfg, std::uint64_t seed,
                     const std::filesystem::path& out_dir) {
  RunReport r;
  r.subcommand = subcommand;
  r.seed = seed;
  r.config = echo(cfg);
  const auto t0 = std::chrono::steady_clock::now();
  const OutputDir out(out_dir);
  std::string stage = "dispatch";
  try {
    if (subcommand == "forward") {
      stages::forward(r, cfg, seed, out, stage);
    } else if (subcommand == "train") {
      stages::train(r, cfg, seed, out, stage);
    } else if (subcommand == "ablate") {
      stages::ablate(r, cfg, seed, out, stage);
    } else if (subcommand == "probe") {
      stages::probe(r, cfg, seed, out, stage);
    } else if (subcommand == "mad") {
      stages::mad(r, cfg, seed, out, stage);
    } else {
      throw ArgumentError("unknown subcommand '" + subcommand + "'");
    }
  } catch (const std::exception& e) {
    r.error = ErrorRecord{stage, e.what()};
  }
  r.timings["total"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  write_report(r, (out.root() / "report.json").string());
  return r;
}

}  // namespace xagent::cli
