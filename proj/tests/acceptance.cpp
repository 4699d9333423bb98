// Acceptance gate: one PASS/FAIL line per criterion, exit 0 iff all pass.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <numeric>
#include <set>
#include <string>

#include "xagent/cli/runner.hpp"
#include "xagent/training/trainer.hpp"
#include "xagent/training/probe.hpp"

namespace {

using namespace xagent;

constexpr double kMarginalTol = 1e-6;
constexpr double kSinkhornSeconds = 10.0;
constexpr double kOracleTol = 1e-8;
constexpr double kCancelTol = 1e-12;
constexpr double kStochasticTol = 1e-9;
constexpr double kGradTol = 1e-4;
constexpr double kGradSeconds = 60.0;
constexpr double kProbabilityTol = 1e-9;
constexpr double kAlignTol = 1e-9;
constexpr int kProbeMinSeeds = 4;
constexpr double kProbeSeconds = 120.0;
constexpr double kLossReduction = 0.5;
constexpr double kMadTol = 1e-9;

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Outcome {
  bool pass = true;
  std::string detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      if (!detail.empty()) detail += "; ";
      detail += what;
    }
  }
};

// Multiplicative iteration in plain loops: a = mu / (K b), b = nu / (K^T a).
Matrix scalar_sinkhorn(const Matrix& c, const Vector& mu, const Vector& nu, double eps, int iters) {
  const Index n = c.rows(), m = c.cols();
  Vector a(n, 1.0), b(m, 1.0);
  for (int it = 0; it < iters; ++it) {
    for (Index i = 0; i < n; ++i) {
      double s = 0.0;
      for (Index j = 0; j < m; ++j) s += std::exp(-c(i, j) / eps) * b[j];
      a[i] = mu[i] / s;
    }
    for (Index j = 0; j < m; ++j) {
      double s = 0.0;
      for (Index i = 0; i < n; ++i) s += std::exp(-c(i, j) / eps) * a[i];
      b[j] = nu[j] / s;
    }
  }
  Matrix p(n, m);
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j < m; ++j) p(i, j) = a[i] * std::exp(-c(i, j) / eps) * b[j];
  return p;
}

Outcome sinkhorn_feasibility() {
  Outcome o;
  const auto t0 = Clock::now();
  Rng rng(1001);
  int converged = 0;
  const double eps_grid[] = {0.01, 0.05, 0.5};
  for (int s = 0; s < 100; ++s) {
    const Index nc = 1 + rng.below(8), n = 1 + rng.below(32), d = 2 + rng.below(7);
    const Matrix cost =
        cost_matrix(rng.normal_matrix(nc, d), rng.normal_matrix(n, d), CostVariant::Dot);
    TransportProblem p = TransportProblem::uniform(cost, eps_grid[s % 3]);
    const TransportPlan plan = sinkhorn(p, 20000, 1e-9);
    if (!plan.converged) continue;
    ++converged;
    double err = 0.0;
    const Vector rs = row_sums(plan.plan), cs = col_sums(plan.plan);
    for (Index i = 0; i < nc; ++i) err = std::max(err, std::abs(rs[i] - p.mu[i]));
    for (Index j = 0; j < n; ++j) err = std::max(err, std::abs(cs[j] - p.nu[j]));
    o.require(err <= kMarginalTol, "problem " + std::to_string(s) + " marginal error " +
                                       std::to_string(err));
    o.require(*std::min_element(plan.plan.data().begin(), plan.plan.data().end()) >= 0.0,
              "negative plan entry");
  }
  const double secs = seconds_since(t0);
  o.require(converged > 0, "no problem converged");
  o.require(secs < kSinkhornSeconds, "took " + std::to_string(secs) + " s");
  o.detail = std::to_string(converged) + "/100 converged, " + std::to_string(secs) + " s" +
             (o.detail.empty() ? "" : "; " + o.detail);
  return o;
}

Outcome sinkhorn_oracle() {
  Outcome o;
  const Matrix c{{0, 1}, {1, 0}};
  const Vector half{0.5, 0.5};
  const TransportPlan plan = sinkhorn(TransportProblem::uniform(c, 0.05), 200, 1e-12);
  const Matrix ref = scalar_sinkhorn(c, half, half, 0.05, 200);
  const double diff = max_abs(plan.plan - ref);
  o.require(diff <= kOracleTol, "max diff " + std::to_string(diff));
  if (o.pass) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "max diff %.2e", diff);
    o.detail = buf;
  }
  return o;
}

Outcome diff_attn_degeneracies() {
  Outcome o;
  Rng rng(2002);
  const Index d = 6;
  const Matrix q = rng.normal_matrix(7, d), k = rng.normal_matrix(5, d);

  DiffAttnParams p = DiffAttnParams::init(d, rng, 0.0, false);
  const auto [out0, rec0] = diff_attn(q, k, k, p);
  o.require(out0 == matmul(matmul(rec0.branch1[0], matmul(k, p.w_v)), p.w_o),
            "lambda=0 differs from single branch");
  const Matrix a1 = softmax_rows((1.0 / std::sqrt(double(d))) *
                                 matmul_nt(matmul(q, slice_cols(p.w_q, 0, d)),
                                           matmul(k, slice_cols(p.w_k, 0, d))));
  o.require(max_abs(a1 - rec0.branch1[0]) <= 1e-12, "branch weights differ from definition");

  const Matrix hq = rng.normal_matrix(d, d), hk = rng.normal_matrix(d, d);
  for (Index i = 0; i < d; ++i)
    for (Index j = 0; j < d; ++j) {
      p.w_q(i, j) = p.w_q(i, d + j) = hq(i, j);
      p.w_k(i, j) = p.w_k(i, d + j) = hk(i, j);
    }
  p.lambda = 1.0;
  const double cancel = max_abs(diff_attn(q, k, k, p).first);
  o.require(cancel <= kCancelTol, "cancellation residue " + std::to_string(cancel));

  const DiffAttnParams r = DiffAttnParams::init(d, rng, 0.0, false);
  const auto rec = diff_attn(q, k, rng.normal_matrix(5, d), r).second;
  double worst = 0.0;
  for (const auto* branch : {&rec.branch1, &rec.branch2})
    for (const Matrix& w : *branch) {
      for (double s : row_sums(w)) worst = std::max(worst, std::abs(s - 1.0));
      for (double v : w.data()) o.require(v >= 0.0, "negative branch weight");
    }
  o.require(worst <= kStochasticTol, "row sum error " + std::to_string(worst));
  return o;
}

Outcome residual_identity() {
  Outcome o;
  Rng rng(3003);
  for (Index d : {4, 8, 16}) {
    const AgentAttnParams p = AgentAttnParams::init(d, rng);
    const Matrix f_v = rng.normal_matrix(12, d);
    const Matrix out = agent_attention(f_v, rng.normal_matrix(4, d), rng.normal_matrix(3, d), p).first;
    o.require(out == f_v, "agent block not identity at d=" + std::to_string(d));
  }
  // Same property through the whole decoder on a default model.
  const cli::RunConfig cfg;
  const cli::Setup s = cli::make_setup(cfg, 3);
  const ForwardTrace t = forward(s.model, s.pipeline, s.instance);
  for (const auto& l : t.layers) o.require(l.agent.out == l.x_mid, "pipeline layer not identity");
  return o;
}

Outcome gradient_check() {
  Outcome o;
  const auto t0 = Clock::now();
  Rng rng(4004);
  ModelSpec spec;
  spec.d = 6;
  spec.d_prime = 5;
  spec.layers = 1;
  spec.k = 2;
  spec.q = 2;
  Model m = init_model(spec, rng);
  // Move every parameter off its special initial value so no term vanishes.
  for (auto& blk : m.blocks) {
    blk.attn.block2.w_o = rng.normal_matrix(12, 6, 0.3);
    blk.attn.block1.lambda = 0.4;
    blk.attn.block2.lambda = 0.7;
    blk.pooling.gamma_v = 0.2;
    blk.pooling.gamma_t = -0.3;
    for (double& v : blk.mask_token) v = rng.normal();
  }
  m.loss.log_tau1 = std::log(0.5);
  m.loss.log_tau2 = std::log(0.8);
  PipelineConfig cfg;
  cfg.k = 2;
  cfg.q = 2;
  cfg.epsilon = 0.1;
  cfg.max_iter = 2000;
  cfg.tol = 1e-10;
  Instance inst;
  inst.tokens = rng.normal_matrix(8, 6);
  inst.text = rng.normal_matrix(4, 5);
  for (Index i = 0; i < 8; ++i) inst.labels.push_back(i % 4);

  const ForwardTrace t = forward(m, cfg, inst);
  const DiscreteState state = discrete_state(t);
  const Model g = backward(m, cfg, t, inst);
  const Vector fd = fd_gradient(
      [&](std::span<const double> x) { return loss_at(m, x, cfg, inst, &state); }, flatten(m),
      1e-5);
  double worst = 0.0;
  std::string worst_name;
  Index pos = 0, tensors = 0;
  for_each_param(g, [&](const std::string& name, std::span<const double> v, ParamGroup) {
    const Vector num(fd.begin() + static_cast<std::ptrdiff_t>(pos),
                     fd.begin() + static_cast<std::ptrdiff_t>(pos + v.size()));
    const double err = relative_error(v, num);
    if (!(err < kGradTol)) o.require(false, name + " rel err " + std::to_string(err));
    if (err > worst) worst = err, worst_name = name;
    pos += v.size();
    ++tensors;
  });
  const double secs = seconds_since(t0);
  o.require(secs < kGradSeconds, "took " + std::to_string(secs) + " s");
  if (o.pass) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "%u tensors, worst %.2e (%s), %.2f s", unsigned(tensors), worst,
                  worst_name.c_str(), secs);
    o.detail = buf;
  }
  return o;
}

Outcome selection_contracts() {
  Outcome o;
  const cli::RunConfig cfg;
  const cli::Setup s = cli::make_setup(cfg, 5);
  const ForwardTrace t = forward(s.model, s.pipeline, s.instance);
  for (const auto& l : t.layers)
    o.require(l.selection.count() == 40, "agent count " + std::to_string(l.selection.count()));

  Rng rng(6006);
  const Vector mask_token(4, 9.0);
  for (int seed = 0; seed < 100; ++seed) {
    const Matrix text = rng.normal_matrix(6, 4), key = rng.normal_matrix(10, 4);
    const TransportPlan plan =
        sinkhorn(TransportProblem::uniform(cost_matrix(text, key, CostVariant::Dot), 0.5), 2000, 1e-9);
    const ChannelSelection ch = select_channels(affinity(text, key, plan), 5);
    const AgentSelection sel = select_tokens(ch, key, 3, mask_token);
    std::set<Index> live;
    for (Index src : sel.source)
      if (src != kNoSource && !live.insert(src).second) {
        o.require(false, "duplicate source in instance " + std::to_string(seed));
      }
    // Exhaustive-sort oracle for the smallest-first token order.
    for (Index c = 0; c < ch.channels.size(); ++c) {
      const auto row = ch.rows.row(c);
      IndexList idx(row.size());
      std::iota(idx.begin(), idx.end(), Index{0});
      std::stable_sort(idx.begin(), idx.end(), [&](Index a, Index b) { return row[a] < row[b]; });
      idx.resize(3);
      o.require(sel.token_idx[c] == idx, "order mismatch in instance " + std::to_string(seed));
    }
  }
  return o;
}

Outcome pooling_contracts() {
  Outcome o;
  Rng rng(7007);
  double worst = 0.0;
  for (int s = 0; s < 50; ++s) {
    const Index n = 2 + rng.below(20), a = 1 + rng.below(10), d = 2 + rng.below(6);
    const Matrix mask = mask_tokens(rng.normal_matrix(n, d), rng.normal_matrix(a, d));
    for (double v : mask.data()) o.require(v >= 0.0, "negative mask entry");
    for (double c : col_sums(mask)) worst = std::max(worst, std::abs(c - 1.0));
  }
  o.require(worst <= kProbabilityTol, "column sum error " + std::to_string(worst));
  PoolingParams p = PoolingParams::init(4, rng);
  p.gamma_v = 0.0;
  p.gamma_t = 0.0;
  o.require(p.gamma() == 0.1, "gamma at zero logits is not exactly 0.1");
  return o;
}

Outcome align_contracts() {
  Outcome o;
  LossParams unit;
  unit.log_tau1 = unit.log_tau2 = 0.0;
  const Matrix e = Matrix::identity(2);
  const double expected = -std::log(std::exp(1.0) / (std::exp(1.0) + 1.0));
  const double got = align_loss(e, e, unit);
  o.require(std::abs(got - expected) <= kAlignTol, "orthonormal loss " + std::to_string(got));

  Rng rng(8008);
  for (int trial = 0; trial < 5; ++trial) {
    const Matrix ft = rng.normal_matrix(5, 4);
    const Matrix fp = ft + 0.05 * rng.normal_matrix(5, 4);
    const LossParams p;
    const double base = align_loss(ft, fp, p);
    IndexList perm(5);
    std::iota(perm.begin(), perm.end(), Index{0});
    while (std::next_permutation(perm.begin(), perm.end()))
      if (!(align_loss(ft, gather_rows(fp, perm), p) > base)) {
        o.require(false, "a shuffle did not increase the loss");
      }
  }
  return o;
}

Outcome probe_phenomenon() {
  Outcome o;
  const auto t0 = Clock::now();
  const ProbeConfig cfg;
  const IndexList seen{0, 1, 2, 3, 4, 5}, unseen{6, 7, 8};
  int decays = 0, preserved = 0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const ProbeTrajectory base = probe_simulation(seen, unseen, 100, false, cfg, seed);
    const ProbeTrajectory agent = probe_simulation(seen, unseen, 100, true, cfg, seed);
    decays += base.mean_unseen.back() < base.mean_unseen.front();
    preserved += agent.mean_unseen.back() >= base.mean_unseen.back();
  }
  const double secs = seconds_since(t0);
  o.require(decays >= kProbeMinSeeds, "baseline decayed in " + std::to_string(decays) + "/5");
  o.require(preserved >= kProbeMinSeeds, "agent preserved in " + std::to_string(preserved) + "/5");
  o.require(secs < kProbeSeconds, "took " + std::to_string(secs) + " s");
  if (o.pass) {
    o.detail = "decay " + std::to_string(decays) + "/5, preserved " + std::to_string(preserved) +
               "/5, " + std::to_string(secs) + " s";
  }
  return o;
}

Outcome trainer_sanity() {
  Outcome o;
  auto run = [](std::uint64_t seed) {
    ToyProblem t = separable_toy(seed);
    const Instance inst = t.inst;
    return train(200, t.state, t.cfg, [inst](Index) { return std::vector<Instance>{inst}; });
  };
  const TrainState a = run(11), b = run(11);
  const double ratio = a.history.back() / a.history.front();
  o.require(ratio <= 1.0 - kLossReduction, "final/initial loss " + std::to_string(ratio));
  o.require(a.history == b.history, "histories differ for the same seed");
  o.require(flatten(a.model) == flatten(b.model), "parameters differ for the same seed");
  if (o.pass) o.detail = "final/initial loss " + std::to_string(ratio);
  return o;
}

Outcome ablation_harness() {
  Outcome o;
  cli::RunConfig cfg = cli::parse_config_text(
      "dims.n=16\ndims.d=8\ndims.nc=6\ndims.layers=2\nselection.k=3\n");
  const auto dir = std::filesystem::temp_directory_path() / "xagent_acceptance_ablate";
  std::filesystem::remove_all(dir);
  const cli::RunReport r = cli::run("ablate", cfg, 0, dir);
  if (r.error) o.require(false, r.error->stage + ": " + r.error->message);
  o.require(r.variants.size() == 19, "variant rows " + std::to_string(r.variants.size()));
  for (const auto& v : r.variants) {
    bool ok = std::isfinite(v.final_loss);
    for (const auto& inv : v.invariants) ok = ok && inv.passed;
    if (!ok) o.require(false, v.axis + "=" + v.name + " failed");
  }
  o.require(r.passed(), "report did not pass");
  if (o.pass) o.detail = std::to_string(r.variants.size()) + " variants";
  return o;
}

Outcome mad_metric() {
  Outcome o;
  o.require(mean_attention_distance(Matrix::identity(16), 4, 4) == 0.0, "identity MAD not 0");
  // Enumerated: from every cell the four distances are 0, 1, 1 and sqrt 2.
  double sum = 0.0;
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j) sum += std::hypot(i % 2 - j % 2, i / 2 - j / 2) / 4.0;
  const double expected = sum / 4.0;
  const double got = mean_attention_distance(Matrix(4, 4, 0.25), 2, 2);
  o.require(std::abs(got - expected) <= kMadTol, "uniform 2x2 MAD " + std::to_string(got));
  return o;
}

}  // namespace

int main() {
  const std::pair<const char*, std::function<Outcome()>> criteria[] = {
      {"sinkhorn feasibility", sinkhorn_feasibility},
      {"sinkhorn oracle equivalence", sinkhorn_oracle},
      {"differential-attention degeneracies", diff_attn_degeneracies},
      {"residual identity", residual_identity},
      {"full-pipeline gradient check", gradient_check},
      {"selection contracts", selection_contracts},
      {"pooling contracts", pooling_contracts},
      {"alignment loss", align_contracts},
      {"probe phenomenon", probe_phenomenon},
      {"trainer sanity", trainer_sanity},
      {"ablation harness", ablation_harness},
      {"mad metric", mad_metric},
  };
  int failed = 0, id = 0;
  for (const auto& [name, check] : criteria) {
    ++id;
    Outcome o;
    try {
      o = check();
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail = std::string("exception: ") + e.what();
    }
    failed += !o.pass;
    std::printf("%s %2d %s%s%s\n", o.pass ? "PASS" : "FAIL", id, name, o.detail.empty() ? "" : ": ",
                o.detail.c_str());
    std::fflush(stdout);
  }
  std::printf("%d/%d criteria passed\n", id - failed, id);
  return failed == 0 ? 0 : 1;
}
