#pragma once

// The toy visual encoder with one agent block per layer, its learnable
// parameters, and the forward/backward pass of the total loss.
//
// Layer l:   q, k, v   = x W_q, x W_k, x W_v
//            x_mid     = x + softmax(q k^T / sqrt(d)) v W_o
//            agents    = select(affinity source, selection target)
//            f_x       = pool(x_mid, f_t, agents)
//            x_out     = x_mid + DiffAttn(x_mid, f_x, DiffAttn(f_x, f_t, f_t))
// Loss:      seg(x_L, f_t) + align(f_t, f_t')
//
// Selection indices and pooling masks are constants for differentiation.

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "xagent/attention.hpp"
#include "xagent/numerics.hpp"
#include "xagent/pooling.hpp"
#include "xagent/selection.hpp"
#include "xagent/training/losses.hpp"
#include "xagent/training/projector.hpp"
#include "xagent/transport.hpp"

namespace xagent {

enum class ParamGroup { Backbone, Decoder, Frozen };

struct BackboneLayer {
  Matrix w_q, w_k, w_v, w_o;  // d x d

  static BackboneLayer init(Index d, Rng& rng) {
    const double s = 1.0 / std::sqrt(static_cast<double>(d));
    return {rng.normal_matrix(d, d, s), rng.normal_matrix(d, d, s), rng.normal_matrix(d, d, s),
            rng.normal_matrix(d, d, 0.5 * s)};
  }
};

struct AgentBlock {
  PoolingParams pooling;
  AgentAttnParams attn;
  Vector mask_token;        // d, starts at zero
  Matrix learnable_agents;  // (k*q) x d for the learnable-init strategy, else empty
};

struct Model {
  TextProjector projector;
  LossParams loss;
  std::vector<BackboneLayer> backbone;
  std::vector<AgentBlock> blocks;  // one when shared across layers
  bool shared_across_layers = true;

  Index layers() const { return backbone.size(); }
  Index block_index(Index layer) const { return shared_across_layers ? 0 : layer; }
};

struct ModelSpec {
  Index d = 16;
  Index d_prime = 24;
  Index layers = 2;
  Index k = 10;
  Index q = 4;
  double gamma_init = 0.1;
  double lambda_init = 0.5;
  double tau_init = 0.07;
  bool shared_proj = false;
  bool shared_across_layers = true;
  bool projector_attention = true;
  bool learnable_agents = false;
};

inline Model init_model(const ModelSpec& spec, Rng& rng) {
  if (spec.d == 0 || spec.d_prime == 0 || spec.layers == 0) {
    throw ArgumentError("init_model: dimensions must be >= 1");
  }
  Model m;
  m.projector = TextProjector::init(spec.d_prime, spec.d, rng, spec.projector_attention);
  m.loss.log_tau1 = std::log(spec.tau_init);
  m.loss.log_tau2 = std::log(spec.tau_init);
  for (Index l = 0; l < spec.layers; ++l) m.backbone.push_back(BackboneLayer::init(spec.d, rng));
  m.shared_across_layers = spec.shared_across_layers;
  const Index nblocks = spec.shared_across_layers ? 1 : spec.layers;
  for (Index b = 0; b < nblocks; ++b) {
    AgentBlock blk;
    blk.pooling = PoolingParams::init(spec.d, rng, spec.gamma_init, spec.shared_proj);
    blk.attn = AgentAttnParams::init(spec.d, rng, spec.lambda_init);
    blk.mask_token.assign(spec.d, 0.0);
    if (spec.learnable_agents) blk.learnable_agents = init_learnable_agents(spec.k * spec.q, spec.d, rng);
    m.blocks.push_back(std::move(blk));
  }
  return m;
}

// ---------------------------------------------------------------------------
// Parameter traversal. The callback receives (name, values, group); values is
// span<double> for a mutable model and span<const double> otherwise.

namespace detail {

template <class D>
auto scalar_span(D& v) {
  return std::span<D>(&v, 1);
}

template <class P, class F>
void visit_diff_attn(P& p, const std::string& prefix, F& f) {
  f(prefix + ".w_q", p.w_q.data(), ParamGroup::Decoder);
  f(prefix + ".w_k", p.w_k.data(), ParamGroup::Decoder);
  f(prefix + ".w_v", p.w_v.data(), ParamGroup::Decoder);
  f(prefix + ".w_o", p.w_o.data(), ParamGroup::Decoder);
  f(prefix + ".lambda", scalar_span(p.lambda), ParamGroup::Decoder);
}

}  // namespace detail

template <class M, class F>
void for_each_param(M& m, F&& f) {
  if (m.projector.use_attention) {
    f(std::string("projector.w_q"), m.projector.w_q.data(), ParamGroup::Decoder);
    f(std::string("projector.w_k"), m.projector.w_k.data(), ParamGroup::Decoder);
    f(std::string("projector.w_v"), m.projector.w_v.data(), ParamGroup::Decoder);
  }
  f(std::string("projector.out_map"), m.projector.out_map.data(), ParamGroup::Decoder);
  f(std::string("projector.phi"), m.projector.phi.data(), ParamGroup::Decoder);
  f(std::string("loss.log_tau1"), detail::scalar_span(m.loss.log_tau1), ParamGroup::Decoder);
  f(std::string("loss.log_tau2"), detail::scalar_span(m.loss.log_tau2), ParamGroup::Decoder);
  for (Index l = 0; l < m.backbone.size(); ++l) {
    const std::string p = "backbone[" + std::to_string(l) + "]";
    f(p + ".w_q", m.backbone[l].w_q.data(), ParamGroup::Backbone);
    f(p + ".w_k", m.backbone[l].w_k.data(), ParamGroup::Frozen);
    f(p + ".w_v", m.backbone[l].w_v.data(), ParamGroup::Backbone);
    f(p + ".w_o", m.backbone[l].w_o.data(), ParamGroup::Frozen);
  }
  for (Index b = 0; b < m.blocks.size(); ++b) {
    auto& blk = m.blocks[b];
    const std::string p = "agent[" + std::to_string(b) + "]";
    f(p + ".pooling.proj_v", blk.pooling.proj_v.data(), ParamGroup::Decoder);
    if (!blk.pooling.shared_proj) {
      f(p + ".pooling.proj_t", blk.pooling.proj_t.data(), ParamGroup::Decoder);
    }
    f(p + ".pooling.gamma_v", detail::scalar_span(blk.pooling.gamma_v), ParamGroup::Decoder);
    f(p + ".pooling.gamma_t", detail::scalar_span(blk.pooling.gamma_t), ParamGroup::Decoder);
    f(p + ".pooling.gamma_single", detail::scalar_span(blk.pooling.gamma_single),
      ParamGroup::Decoder);
    f(p + ".mask_token", std::span(blk.mask_token), ParamGroup::Decoder);
    if (!blk.learnable_agents.empty()) {
      f(p + ".learnable_agents", blk.learnable_agents.data(), ParamGroup::Decoder);
    }
    detail::visit_diff_attn(blk.attn.block1, p + ".block1", f);
    detail::visit_diff_attn(blk.attn.block2, p + ".block2", f);
  }
}

/// Number of scalar parameters, frozen ones included.
inline Index parameter_count(const Model& m) {
  Index n = 0;
  for_each_param(m, [&](const std::string&, std::span<const double> v, ParamGroup) { n += v.size(); });
  return n;
}

/// Same structure, every parameter zero. Used as the gradient container.
inline Model zeros_like(const Model& m) {
  Model g = m;
  for_each_param(g, [](const std::string&, std::span<double> v, ParamGroup) {
    std::fill(v.begin(), v.end(), 0.0);
  });
  return g;
}

/// Flattened parameter vector in traversal order.
inline Vector flatten(const Model& m, bool include_frozen = true) {
  Vector out;
  for_each_param(m, [&](const std::string&, std::span<const double> v, ParamGroup g) {
    if (include_frozen || g != ParamGroup::Frozen) out.insert(out.end(), v.begin(), v.end());
  });
  return out;
}

inline void unflatten(Model& m, std::span<const double> values, bool include_frozen = true) {
  Index pos = 0;
  for_each_param(m, [&](const std::string&, std::span<double> v, ParamGroup g) {
    if (!include_frozen && g == ParamGroup::Frozen) return;
    if (pos + v.size() > values.size()) throw ShapeError("unflatten: vector too short");
    std::copy(values.begin() + static_cast<std::ptrdiff_t>(pos),
              values.begin() + static_cast<std::ptrdiff_t>(pos + v.size()), v.begin());
    pos += v.size();
  });
  if (pos != values.size()) throw ShapeError("unflatten: vector too long");
}

// ---------------------------------------------------------------------------
// Forward pass

struct PipelineConfig {
  SelectionStrategy strategy = SelectionStrategy::Combined;
  Index k = 10;
  Index q = 4;
  bool largest = false;
  CostVariant cost = CostVariant::Dot;
  double epsilon = 0.05;
  Index max_iter = 200;
  double tol = 1e-6;
  PoolingMode pooling = PoolingMode::Dual;
  AttnOptions attn;
  Wiring wiring;
  double seg_temperature = kSegTemperature;
  std::uint64_t selection_seed = 0;
};

struct Instance {
  Matrix tokens;              // N x d visual tokens entering layer 0
  Matrix text;                // Nc x d' category embeddings
  std::vector<Index> labels;  // N, per-token category
};

struct LayerTrace {
  Index block = 0;
  Matrix x_in;
  Matrix q, k, v;
  SoftmaxAttnCache self_attn;
  Matrix x_mid;
  std::optional<TransportPlan> plan;
  AgentSelection selection;
  PoolingResult pooling;
  AgentAttnCache agent;
};

struct ForwardTrace {
  ProjectorCache projector;
  std::vector<LayerTrace> layers;
  double seg = 0.0;
  double align = 0.0;
  double total = 0.0;

  const Matrix& output() const { return layers.back().agent.out; }
};

/// Discrete decisions of a forward pass, replayable to hold them fixed.
struct DiscreteState {
  std::vector<AgentSelection> selections;
  std::vector<Matrix> mask_v;
  std::vector<Matrix> mask_t;
};

inline DiscreteState discrete_state(const ForwardTrace& t) {
  DiscreteState s;
  for (const auto& l : t.layers) {
    s.selections.push_back(l.selection);
    s.mask_v.push_back(l.pooling.mask_v);
    s.mask_t.push_back(l.pooling.mask_t);
  }
  return s;
}

namespace detail {

inline const Matrix& pick(const LayerTrace& l, AttnSource s) {
  switch (s) {
    case AttnSource::Q: return l.q;
    case AttnSource::K: return l.k;
    case AttnSource::V: return l.v;
  }
  return l.k;
}

}  // namespace detail

inline ForwardTrace forward(const Model& model, const PipelineConfig& cfg, const Instance& inst,
                            const DiscreteState* frozen = nullptr) {
  if (inst.tokens.rows() != inst.labels.size()) {
    throw ShapeError("forward: " + std::to_string(inst.labels.size()) + " labels for " +
                     std::to_string(inst.tokens.rows()) + " tokens");
  }
  ForwardTrace t;
  t.projector = project_text_forward(inst.text, model.projector);
  const Matrix& f_t = t.projector.f_t;
  const Index d = f_t.cols();
  if (inst.tokens.cols() != d) {
    throw ShapeError("forward: tokens " + shape_str(inst.tokens) + " vs width " + std::to_string(d));
  }
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));

  Matrix x = inst.tokens;
  for (Index l = 0; l < model.layers(); ++l) {
    const BackboneLayer& bb = model.backbone[l];
    LayerTrace lt;
    lt.block = model.block_index(l);
    const AgentBlock& blk = model.blocks.at(lt.block);
    lt.x_in = x;
    lt.q = matmul(x, bb.w_q);
    lt.k = matmul(x, bb.w_k);
    lt.v = matmul(x, bb.w_v);
    lt.self_attn = softmax_attention(lt.q, lt.k, lt.v, scale);
    lt.x_mid = x + matmul(lt.self_attn.out, bb.w_o);

    const Matrix& affinity_src = detail::pick(lt, cfg.wiring.affinity_source);
    const Matrix& target = detail::pick(lt, cfg.wiring.selection_target);
    if (frozen != nullptr) {
      lt.selection = frozen->selections.at(l);
      lt.selection.agents = regather_agents(lt.selection, target, blk.mask_token,
                                            blk.learnable_agents.empty() ? nullptr
                                                                         : &blk.learnable_agents);
    } else {
      if (cfg.strategy == SelectionStrategy::OtOnly || cfg.strategy == SelectionStrategy::Combined) {
        lt.plan = sinkhorn(TransportProblem::uniform(cost_matrix(f_t, affinity_src, cfg.cost),
                                                     cfg.epsilon),
                           cfg.max_iter, cfg.tol);
      }
      Rng rng(cfg.selection_seed * 0x9E3779B97F4A7C15ULL + l + 1);
      SelectionInputs in;
      in.text = &f_t;
      in.key = &affinity_src;
      in.value = &target;
      in.plan = lt.plan ? &*lt.plan : nullptr;
      in.learnable = blk.learnable_agents.empty() ? nullptr : &blk.learnable_agents;
      in.rng = &rng;
      in.mask_token = blk.mask_token;
      in.k = cfg.k;
      in.q = cfg.q;
      in.largest = cfg.largest;
      lt.selection = select_agents_baseline(cfg.strategy, in);
    }

    lt.pooling = pool_variant(cfg.pooling, lt.x_mid, f_t, lt.selection.agents, blk.pooling,
                              frozen ? &frozen->mask_v.at(l) : nullptr,
                              frozen ? &frozen->mask_t.at(l) : nullptr);
    lt.agent = agent_attention_forward(lt.x_mid, lt.pooling.agents, f_t, blk.attn, cfg.attn);
    x = lt.agent.out;
    t.layers.push_back(std::move(lt));
  }

  t.seg = seg_loss(x, f_t, inst.labels, cfg.seg_temperature);
  t.align = align_loss(f_t, t.projector.f_t_prime, model.loss);
  t.total = total_loss(t.seg, t.align);
  return t;
}

// ---------------------------------------------------------------------------
// Backward pass

namespace detail {

inline void accumulate(DiffAttnParams& acc, const DiffAttnParams& g) {
  acc.w_q += g.w_q;
  acc.w_k += g.w_k;
  acc.w_v += g.w_v;
  acc.w_o += g.w_o;
  acc.lambda += g.lambda;
}

inline void accumulate(PoolingParams& acc, const PoolingParams& g) {
  acc.proj_v += g.proj_v;
  acc.proj_t += g.proj_t;
  acc.gamma_v += g.gamma_v;
  acc.gamma_t += g.gamma_t;
  acc.gamma_single += g.gamma_single;
}

}  // namespace detail

/// Gradient of trace.total with respect to every parameter of the model.
inline Model backward(const Model& model, const PipelineConfig& cfg, const ForwardTrace& t,
                      const Instance& inst) {
  Model g = zeros_like(model);
  const Matrix& f_t = t.projector.f_t;
  const SegResult seg = seg_loss_with_grad(t.output(), f_t, inst.labels, cfg.seg_temperature);
  const AlignResult al = align_loss_with_grad(f_t, t.projector.f_t_prime, model.loss);
  g.loss.log_tau1 = al.d_log_tau1;
  g.loss.log_tau2 = al.d_log_tau2;

  Matrix d_ft = seg.d_ft + al.d_ft;
  Matrix d_x = seg.d_fv;
  for (Index l = model.layers(); l-- > 0;) {
    const LayerTrace& lt = t.layers[l];
    const BackboneLayer& bb = model.backbone[l];
    const AgentBlock& blk = model.blocks[lt.block];
    AgentBlock& gblk = g.blocks[lt.block];

    AgentAttnGrads ag = agent_attention_backward(lt.agent, blk.attn, d_x);
    detail::accumulate(gblk.attn.block1, ag.params.block1);
    detail::accumulate(gblk.attn.block2, ag.params.block2);
    d_ft += ag.d_ft;

    PoolingGrads pg = pool_variant_backward(cfg.pooling, lt.pooling, blk.pooling, ag.d_fx);
    detail::accumulate(gblk.pooling, pg.params);
    d_ft += pg.d_text;

    Matrix d_mid = ag.d_fv + pg.d_visual;

    // x_mid = x + A v W_o
    BackboneLayer& gb = g.backbone[l];
    gb.w_o += matmul_tn(lt.self_attn.out, d_mid);
    const SoftmaxAttnGrads sg = softmax_attention_backward(lt.self_attn, matmul_nt(d_mid, bb.w_o));
    gb.w_q += matmul_tn(lt.x_in, sg.dq);
    gb.w_k += matmul_tn(lt.x_in, sg.dk);
    gb.w_v += matmul_tn(lt.x_in, sg.dv);
    d_x = d_mid;
    d_x += matmul_nt(sg.dq, bb.w_q);
    d_x += matmul_nt(sg.dk, bb.w_k);
    d_x += matmul_nt(sg.dv, bb.w_v);
  }

  TextProjector pg = project_text_backward(t.projector, model.projector, d_ft, al.d_ft_prime);
  g.projector.w_q = std::move(pg.w_q);
  g.projector.w_k = std::move(pg.w_k);
  g.projector.w_v = std::move(pg.w_v);
  g.projector.out_map = std::move(pg.out_map);
  g.projector.phi = std::move(pg.phi);
  return g;
}

/// Total loss as a function of the flattened parameters (frozen included).
/// With `frozen` set, selections and masks are replayed instead of recomputed.
inline double loss_at(const Model& base, std::span<const double> params, const PipelineConfig& cfg,
                      const Instance& inst, const DiscreteState* frozen = nullptr) {
  Model m = base;
  unflatten(m, params);
  return forward(m, cfg, inst, frozen).total;
}

}  // namespace xagent
