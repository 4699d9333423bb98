#pragma once

// Linear probing of unseen-category channels under seen-only training.
//
// The probe starts as the zero-shot text classifier (cosine logits against
// category text embeddings) and is trained by gradient descent on seen
// tokens only. Unseen channels are tracked on held-out unseen tokens. With
// the agent variant, all embeddings first pass through an agent block that
// was itself trained on seen categories only; at inference the block attends
// over every category's text.

#include <algorithm>
#include <cmath>
#include <set>
#include <vector>

#include "xagent/training/losses.hpp"
#include "xagent/training/synthetic.hpp"
#include "xagent/training/trainer.hpp"

namespace xagent {

struct ProbeConfig {
  SyntheticSpec data{.d = 16, .d_prime = 16, .seen = 6, .unseen = 3, .mix = 0.3,
                     .token_noise = 1.5};
  Index tokens_per_category = 24;
  double probe_lr = 0.5;
  double probe_temperature = 0.1;
  // Agent block pre-training.
  Index agent_steps = 150;
  double agent_lr = 0.05;
  Index k = 2;
  Index q = 4;
  bool train_projector = false;
  bool similarity_init = true;
  double agent_output_scale = 0.5;  // second block's output map starts at this multiple of [I; 0]
};

struct ProbeTrajectory {
  IndexList seen;
  IndexList unseen;
  bool with_agent = false;
  std::vector<Vector> unseen_activation;  // [step][unseen channel], steps + 1 rows
  Vector mean_unseen;                     // per step
  Vector seen_accuracy;                   // per step, on the training tokens
  Vector agent_loss;                      // agent pre-training history (with_agent only)
};

namespace detail {

inline void check_partition(const IndexList& seen, const IndexList& unseen) {
  if (seen.empty() || unseen.empty()) {
    throw ArgumentError("probe_simulation: seen and unseen sets must be non-empty");
  }
  std::set<Index> all(seen.begin(), seen.end());
  if (all.size() != seen.size()) throw ArgumentError("probe_simulation: duplicate seen category");
  for (Index u : unseen) {
    if (!all.insert(u).second) {
      throw ArgumentError("probe_simulation: category " + std::to_string(u) +
                          " is both seen and unseen");
    }
  }
  if (*all.rbegin() + 1 != all.size()) {
    throw ArgumentError("probe_simulation: categories must cover 0..C-1");
  }
}

/// Model whose backbone is a pass-through (W_o = 0) and whose text projector
/// starts at the identity, so the agent block is the only transformation.
inline Model probe_agent_model(Index d, Index k, Index q, bool similarity_init, double output_scale,
                               Rng& rng) {
  ModelSpec spec;
  spec.d = d;
  spec.d_prime = d;
  spec.layers = 1;
  spec.k = k;
  spec.q = q;
  spec.projector_attention = false;
  Model m = init_model(spec, rng);
  m.projector.out_map = Matrix::identity(d);
  m.projector.phi = Matrix::identity(d);
  m.backbone[0].w_o = Matrix(d, d);
  if (similarity_init) {
    // Branch 1 scores by similarity at temperature attention_temperature;
    // branch 2 starts uniform, so the differential map is similarity minus
    // lambda times the common mode. Pooling projections start at identity.
    auto half = [d](double s) {
      Matrix w(d, 2 * d);
      for (Index i = 0; i < d; ++i) w(i, i) = s;
      return w;
    };
    constexpr double attention_temperature = 0.25;
    const double sharp = std::sqrt(static_cast<double>(d)) / attention_temperature;
    for (DiffAttnParams* p : {&m.blocks[0].attn.block1, &m.blocks[0].attn.block2}) {
      p->w_q = half(std::sqrt(sharp));
      p->w_k = half(std::sqrt(sharp));
      p->w_v = half(1.0);
    }
    Matrix out(2 * d, d);
    for (Index i = 0; i < d; ++i) out(i, i) = 1.0;
    m.blocks[0].attn.block1.w_o = out;
    m.blocks[0].pooling.proj_v = Matrix::identity(d);
    m.blocks[0].pooling.proj_t = Matrix::identity(d);
    m.blocks[0].attn.block2.w_o = output_scale * out;
  }
  return m;
}

}  // namespace detail

inline ProbeTrajectory probe_simulation(const IndexList& seen, const IndexList& unseen, Index steps,
                                        bool with_agent, const ProbeConfig& cfg,
                                        std::uint64_t seed) {
  detail::check_partition(seen, unseen);
  if (steps == 0) throw ArgumentError("probe_simulation: steps must be >= 1");
  const Index n_cat = seen.size() + unseen.size();
  const Index d = cfg.data.d;

  // Category space generated seen-first, then rows placed at their ids.
  Rng rng(seed);
  SyntheticSpec spec = cfg.data;
  spec.d_prime = d;
  spec.seen = seen.size();
  spec.unseen = unseen.size();
  const CategorySpace raw = make_categories(spec, rng);
  IndexList order(seen);
  order.insert(order.end(), unseen.begin(), unseen.end());
  CategorySpace cs = raw;
  for (Index r = 0; r < n_cat; ++r) {
    std::copy(raw.directions.row(r).begin(), raw.directions.row(r).end(),
              cs.directions.row(order[r]).begin());
    std::copy(raw.text.row(r).begin(), raw.text.row(r).end(), cs.text.row(order[r]).begin());
  }

  std::vector<Index> train_labels, eval_labels;
  for (Index c : seen)
    for (Index i = 0; i < cfg.tokens_per_category; ++i) train_labels.push_back(c);
  for (Index c : unseen)
    for (Index i = 0; i < cfg.tokens_per_category; ++i) eval_labels.push_back(c);
  Matrix train_x = sample_tokens(cs, train_labels, spec.token_noise, rng);
  Matrix eval_x = sample_tokens(cs, eval_labels, spec.token_noise, rng);
  Matrix classifier = cs.text;

  ProbeTrajectory out;
  out.seen = seen;
  out.unseen = unseen;
  out.with_agent = with_agent;

  if (with_agent) {
    Model model = detail::probe_agent_model(d, cfg.k, cfg.q, cfg.similarity_init,
                                             cfg.agent_output_scale, rng);
    PipelineConfig pc;
    pc.k = cfg.k;
    pc.q = cfg.q;
    // Seen-only supervision: labels are re-indexed into the seen text rows.
    Instance seen_inst;
    seen_inst.tokens = train_x;
    seen_inst.text = gather_rows(cs.text, seen);
    for (Index l : train_labels)
      seen_inst.labels.push_back(std::find(seen.begin(), seen.end(), l) - seen.begin());
    TrainState st;
    st.model = std::move(model);
    st.lr.lr_decoder = cfg.agent_lr;
    st.lr.lr_backbone = cfg.agent_lr / 100.0;
    if (!cfg.train_projector) st.lr.frozen_prefixes = {"projector.", "loss."};
    if (cfg.agent_steps > 0) st = train(cfg.agent_steps, std::move(st), pc,
               [&](Index) { return std::vector<Instance>{seen_inst}; });
    out.agent_loss = st.history;

    // Inference sees every category's text.
    auto refine = [&](const Matrix& x, const std::vector<Index>& labels) {
      Instance inst{x, cs.text, labels};
      return forward(st.model, pc, inst).output();
    };
    train_x = refine(train_x, train_labels);
    eval_x = refine(eval_x, eval_labels);
    classifier = project_text(cs.text, st.model.projector).first;
  }

  // Probe on normalized embeddings; the classifier rows are free weights.
  const Matrix xn = l2_normalize_rows(train_x);
  const Matrix en = l2_normalize_rows(eval_x);
  Matrix w = l2_normalize_rows(classifier);
  const double inv_t = 1.0 / cfg.probe_temperature;

  auto record = [&] {
    const Matrix pe = softmax_rows(inv_t * matmul_nt(en, w));
    Vector act(unseen.size(), 0.0);
    for (Index i = 0; i < eval_labels.size(); ++i) {
      const Index slot = std::find(unseen.begin(), unseen.end(), eval_labels[i]) - unseen.begin();
      act[slot] += pe(i, eval_labels[i]);
    }
    double mean = 0.0;
    for (double& a : act) mean += (a /= static_cast<double>(cfg.tokens_per_category));
    out.unseen_activation.push_back(act);
    out.mean_unseen.push_back(mean / static_cast<double>(unseen.size()));

    const Matrix pt = matmul_nt(xn, w);
    Index correct = 0;
    for (Index i = 0; i < train_labels.size(); ++i) {
      auto r = pt.row(i);
      if (static_cast<Index>(std::max_element(r.begin(), r.end()) - r.begin()) == train_labels[i]) ++correct;
    }
    out.seen_accuracy.push_back(static_cast<double>(correct) / static_cast<double>(train_labels.size()));
  };

  record();
  for (Index s = 0; s < steps; ++s) {
    Matrix dz;
    detail::softmax_cross_entropy(inv_t * matmul_nt(xn, w), train_labels, &dz);
    axpy(w, -cfg.probe_lr * inv_t, matmul_tn(dz, xn));
    record();
  }
  return out;
}

}  // namespace xagent
