#pragma once

// Cross-attention baseline, differential attention, the cascaded
// (query, agent, key/value) agent attention, and the mean attention distance
// diagnostic. Every forward op has an analytic backward.

#include <cmath>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "xagent/numerics.hpp"

namespace xagent {

// ---------------------------------------------------------------------------
// Plain softmax attention on already-projected Q, K, V.

struct SoftmaxAttnCache {
  Matrix q, k, v;
  Matrix weights;  // softmax(q k^T * scale)
  Matrix out;      // weights * v
  double scale = 1.0;
};

inline SoftmaxAttnCache softmax_attention(const Matrix& q, const Matrix& k, const Matrix& v,
                                          double scale) {
  if (q.cols() != k.cols()) {
    throw ShapeError("softmax_attention: q " + shape_str(q) + " vs k " + shape_str(k));
  }
  if (k.rows() != v.rows()) {
    throw ShapeError("softmax_attention: k " + shape_str(k) + " vs v " + shape_str(v));
  }
  SoftmaxAttnCache c{q, k, v, {}, {}, scale};
  c.weights = softmax_rows(scale * matmul_nt(q, k));
  c.out = matmul(c.weights, v);
  return c;
}

struct SoftmaxAttnGrads {
  Matrix dq, dk, dv;
};

/// Backward given dL/dweights (from anything downstream of the weights).
inline void softmax_weights_backward(const SoftmaxAttnCache& c, const Matrix& d_weights,
                                     Matrix& dq, Matrix& dk) {
  const Matrix d_logits = c.scale * softmax_rows_backward(c.weights, d_weights);
  dq = matmul(d_logits, c.k);
  dk = matmul_tn(d_logits, c.q);
}

inline SoftmaxAttnGrads softmax_attention_backward(const SoftmaxAttnCache& c, const Matrix& d_out) {
  SoftmaxAttnGrads g;
  g.dv = matmul_tn(c.weights, d_out);
  softmax_weights_backward(c, matmul_nt(d_out, c.v), g.dq, g.dk);
  return g;
}

/// softmax(q_src kv_src^T / sqrt(d)) kv_src
inline Matrix cross_attn(const Matrix& q_src, const Matrix& kv_src) {
  if (q_src.cols() != kv_src.cols()) {
    throw ShapeError("cross_attn: q " + shape_str(q_src) + " vs kv " + shape_str(kv_src));
  }
  const double scale = 1.0 / std::sqrt(static_cast<double>(q_src.cols()));
  return softmax_attention(q_src, kv_src, kv_src, scale).out;
}

inline Matrix cross_attn_weights(const Matrix& q_src, const Matrix& kv_src) {
  if (q_src.cols() != kv_src.cols()) {
    throw ShapeError("cross_attn_weights: q " + shape_str(q_src) + " vs kv " + shape_str(kv_src));
  }
  const double scale = 1.0 / std::sqrt(static_cast<double>(q_src.cols()));
  return softmax_rows(scale * matmul_nt(q_src, kv_src));
}

// ---------------------------------------------------------------------------
// Differential attention

struct DiffAttnParams {
  Matrix w_q;  // d x 2d, [Q1 | Q2]
  Matrix w_k;  // d x 2d, [K1 | K2]
  Matrix w_v;  // d x 2d
  Matrix w_o;  // 2d x d, restores width d
  double lambda = 0.5;

  Index width() const { return w_q.rows(); }

  static DiffAttnParams init(Index d, Rng& rng, double lambda_init = 0.5,
                             bool zero_output = true) {
    DiffAttnParams p;
    const double s = 1.0 / std::sqrt(static_cast<double>(d));
    p.w_q = rng.normal_matrix(d, 2 * d, s);
    p.w_k = rng.normal_matrix(d, 2 * d, s);
    p.w_v = rng.normal_matrix(d, 2 * d, s);
    p.w_o = zero_output ? Matrix(2 * d, d)
                        : rng.normal_matrix(2 * d, d, 1.0 / std::sqrt(2.0 * static_cast<double>(d)));
    p.lambda = lambda_init;
    return p;
  }

  static DiffAttnParams zeros_like(const DiffAttnParams& o) {
    DiffAttnParams p;
    p.w_q = Matrix(o.w_q.rows(), o.w_q.cols());
    p.w_k = Matrix(o.w_k.rows(), o.w_k.cols());
    p.w_v = Matrix(o.w_v.rows(), o.w_v.cols());
    p.w_o = Matrix(o.w_o.rows(), o.w_o.cols());
    p.lambda = 0.0;
    return p;
  }
};

struct AttnOptions {
  Index heads = 1;
  bool pre_norm = false;
};

/// Softmax branch weights of one differential attention call, per head.
struct AttnRecord {
  std::vector<Matrix> branch1;
  std::vector<Matrix> branch2;
  double lambda = 0.0;

  /// branch1 - lambda * branch2 for one head.
  Matrix differential(Index head = 0) const {
    Matrix d = branch1.at(head);
    axpy(d, -lambda, branch2.at(head));
    return d;
  }
};

struct DiffAttnCache {
  Matrix q_src, k_src, v_src;  // inputs as given
  Matrix q_in, k_in, v_in;     // after optional pre-norm
  Matrix qp, kp, vp;           // projections (2d wide)
  std::vector<SoftmaxAttnCache> s1, s2;
  Matrix mixed;                // concat over heads of (S1 - lambda S2) V'_h
  Matrix out;
  AttnOptions opts;
  double lambda = 0.0;

  AttnRecord record() const {
    AttnRecord r;
    r.lambda = lambda;
    for (const auto& c : s1) r.branch1.push_back(c.weights);
    for (const auto& c : s2) r.branch2.push_back(c.weights);
    return r;
  }
};

inline DiffAttnCache diff_attn_forward(const Matrix& q_src, const Matrix& k_src,
                                       const Matrix& v_src, const DiffAttnParams& p,
                                       const AttnOptions& opts = {}) {
  const Index d = p.width();
  if (q_src.cols() != d || k_src.cols() != d || v_src.cols() != d) {
    throw ShapeError("diff_attn: inputs q " + shape_str(q_src) + ", k " + shape_str(k_src) +
                     ", v " + shape_str(v_src) + " vs width " + std::to_string(d));
  }
  if (k_src.rows() != v_src.rows()) {
    throw ShapeError("diff_attn: k " + shape_str(k_src) + " vs v " + shape_str(v_src));
  }
  if (opts.heads == 0 || d % opts.heads != 0) {
    throw ArgumentError("diff_attn: heads=" + std::to_string(opts.heads) + " must divide d=" +
                        std::to_string(d));
  }
  DiffAttnCache c;
  c.opts = opts;
  c.lambda = p.lambda;
  c.q_src = q_src;
  c.k_src = k_src;
  c.v_src = v_src;
  c.q_in = opts.pre_norm ? layer_norm_rows(q_src) : q_src;
  c.k_in = opts.pre_norm ? layer_norm_rows(k_src) : k_src;
  c.v_in = opts.pre_norm ? layer_norm_rows(v_src) : v_src;
  c.qp = matmul(c.q_in, p.w_q);
  c.kp = matmul(c.k_in, p.w_k);
  c.vp = matmul(c.v_in, p.w_v);

  const Index dh = d / opts.heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  c.mixed = Matrix(q_src.rows(), 2 * d);
  for (Index h = 0; h < opts.heads; ++h) {
    const Matrix vh = slice_cols(c.vp, 2 * h * dh, 2 * (h + 1) * dh);
    c.s1.push_back(softmax_attention(slice_cols(c.qp, h * dh, (h + 1) * dh),
                                     slice_cols(c.kp, h * dh, (h + 1) * dh), vh, scale));
    c.s2.push_back(softmax_attention(slice_cols(c.qp, d + h * dh, d + (h + 1) * dh),
                                     slice_cols(c.kp, d + h * dh, d + (h + 1) * dh), vh, scale));
    Matrix head_out = c.s1.back().out;
    axpy(head_out, -p.lambda, c.s2.back().out);
    add_cols(c.mixed, 2 * h * dh, head_out);
  }
  c.out = matmul(c.mixed, p.w_o);
  return c;
}

/// (softmax(Q1 K1^T/sqrt(d)) - lambda softmax(Q2 K2^T/sqrt(d))) V' W_o
inline std::pair<Matrix, AttnRecord> diff_attn(const Matrix& q_src, const Matrix& k_src,
                                               const Matrix& v_src, const DiffAttnParams& p,
                                               const AttnOptions& opts = {}) {
  DiffAttnCache c = diff_attn_forward(q_src, k_src, v_src, p, opts);
  AttnRecord r = c.record();
  return {std::move(c.out), std::move(r)};
}

struct DiffAttnGrads {
  Matrix dq, dk, dv;
  DiffAttnParams params;
};

inline DiffAttnGrads diff_attn_backward(const DiffAttnCache& c, const DiffAttnParams& p,
                                        const Matrix& d_out) {
  const Index d = p.width();
  const Index dh = d / c.opts.heads;
  DiffAttnGrads g;
  g.params = DiffAttnParams::zeros_like(p);
  g.params.w_o = matmul_tn(c.mixed, d_out);
  const Matrix d_mixed = matmul_nt(d_out, p.w_o);

  Matrix dqp(c.qp.rows(), c.qp.cols());
  Matrix dkp(c.kp.rows(), c.kp.cols());
  Matrix dvp(c.vp.rows(), c.vp.cols());
  for (Index h = 0; h < c.opts.heads; ++h) {
    const Matrix d_head = slice_cols(d_mixed, 2 * h * dh, 2 * (h + 1) * dh);
    const SoftmaxAttnCache& a1 = c.s1[h];
    const SoftmaxAttnCache& a2 = c.s2[h];
    // Both branches share V'_h.
    const Matrix d_w = matmul_nt(d_head, a1.v);
    Matrix dv_h = matmul_tn(a1.weights, d_head);
    axpy(dv_h, -c.lambda, matmul_tn(a2.weights, d_head));
    g.params.lambda -= dot(d_w, a2.weights);

    Matrix dq1, dk1, dq2, dk2;
    softmax_weights_backward(a1, d_w, dq1, dk1);
    softmax_weights_backward(a2, -c.lambda * d_w, dq2, dk2);
    add_cols(dqp, h * dh, dq1);
    add_cols(dqp, d + h * dh, dq2);
    add_cols(dkp, h * dh, dk1);
    add_cols(dkp, d + h * dh, dk2);
    add_cols(dvp, 2 * h * dh, dv_h);
  }
  g.params.w_q = matmul_tn(c.q_in, dqp);
  g.params.w_k = matmul_tn(c.k_in, dkp);
  g.params.w_v = matmul_tn(c.v_in, dvp);
  g.dq = matmul_nt(dqp, p.w_q);
  g.dk = matmul_nt(dkp, p.w_k);
  g.dv = matmul_nt(dvp, p.w_v);
  if (c.opts.pre_norm) {
    g.dq = layer_norm_rows_backward(c.q_src, g.dq);
    g.dk = layer_norm_rows_backward(c.k_src, g.dk);
    g.dv = layer_norm_rows_backward(c.v_src, g.dv);
  }
  return g;
}

// ---------------------------------------------------------------------------
// Agent attention: agents query the text, then visual tokens query the agents.

struct AgentAttnParams {
  DiffAttnParams block1;  // agent -> text
  DiffAttnParams block2;  // visual -> agent

  static AgentAttnParams init(Index d, Rng& rng, double lambda_init = 0.5) {
    AgentAttnParams p;
    p.block1 = DiffAttnParams::init(d, rng, lambda_init, /*zero_output=*/false);
    p.block2 = DiffAttnParams::init(d, rng, lambda_init, /*zero_output=*/true);
    return p;
  }

  static AgentAttnParams zeros_like(const AgentAttnParams& o) {
    return {DiffAttnParams::zeros_like(o.block1), DiffAttnParams::zeros_like(o.block2)};
  }
};

struct AgentAttnCache {
  DiffAttnCache block1;  // V_x = DiffAttn(f_x, f_t, f_t)
  DiffAttnCache block2;  // delta = DiffAttn(f_v, f_x, V_x)
  Matrix out;            // f_v + delta
};

struct AgentAttnRecord {
  AttnRecord block1;
  AttnRecord block2;
};

inline AgentAttnCache agent_attention_forward(const Matrix& f_v, const Matrix& f_x,
                                              const Matrix& f_t, const AgentAttnParams& p,
                                              const AttnOptions& opts = {}) {
  AgentAttnCache c;
  c.block1 = diff_attn_forward(f_x, f_t, f_t, p.block1, opts);
  c.block2 = diff_attn_forward(f_v, f_x, c.block1.out, p.block2, opts);
  c.out = f_v + c.block2.out;
  return c;
}

/// f_v' = f_v + DiffAttn(f_v, f_x, DiffAttn(f_x, f_t, f_t))
inline std::pair<Matrix, AgentAttnRecord> agent_attention(const Matrix& f_v, const Matrix& f_x,
                                                          const Matrix& f_t,
                                                          const AgentAttnParams& p,
                                                          const AttnOptions& opts = {}) {
  AgentAttnCache c = agent_attention_forward(f_v, f_x, f_t, p, opts);
  AgentAttnRecord r{c.block1.record(), c.block2.record()};
  return {std::move(c.out), std::move(r)};
}

struct AgentAttnGrads {
  Matrix d_fv, d_fx, d_ft;
  AgentAttnParams params;
};

inline AgentAttnGrads agent_attention_backward(const AgentAttnCache& c, const AgentAttnParams& p,
                                               const Matrix& d_out) {
  AgentAttnGrads g;
  DiffAttnGrads g2 = diff_attn_backward(c.block2, p.block2, d_out);
  DiffAttnGrads g1 = diff_attn_backward(c.block1, p.block1, g2.dv);
  g.d_fv = d_out + g2.dq;
  g.d_fx = g2.dk + g1.dq;
  g.d_ft = g1.dk + g1.dv;
  g.params.block1 = std::move(g1.params);
  g.params.block2 = std::move(g2.params);
  return g;
}

/// Effective visual -> text routing of one agent-attention call (head 0):
/// (block2 differential) * (block1 differential), N x Nc. Comparable to the
/// cross-attention weights of the same instance.
inline Matrix effective_routing(const AgentAttnRecord& r) {
  return matmul(r.block2.differential(0), r.block1.differential(0));
}

// ---------------------------------------------------------------------------
// Which attention matrix feeds the affinity and which one the agents come from.

enum class AttnSource { Q, K, V };

struct Wiring {
  AttnSource affinity_source = AttnSource::K;
  AttnSource selection_target = AttnSource::V;

  bool operator==(const Wiring&) const = default;
};

inline char to_char(AttnSource s) {
  switch (s) {
    case AttnSource::Q: return 'Q';
    case AttnSource::K: return 'K';
    case AttnSource::V: return 'V';
  }
  return '?';
}

inline std::string to_string(const Wiring& w) {
  return {to_char(w.affinity_source), to_char(w.selection_target)};
}

inline Wiring ablation_wiring(AttnSource affinity_source, AttnSource selection_target) {
  return {affinity_source, selection_target};
}

inline Wiring parse_wiring(std::string_view code) {
  auto one = [&](char ch) {
    switch (ch) {
      case 'Q': return AttnSource::Q;
      case 'K': return AttnSource::K;
      case 'V': return AttnSource::V;
      default:
        throw ArgumentError("invalid wiring code '" + std::string(code) + "'");
    }
  };
  if (code.size() != 2) throw ArgumentError("invalid wiring code '" + std::string(code) + "'");
  return ablation_wiring(one(code[0]), one(code[1]));
}

inline std::vector<Wiring> all_wirings() {
  std::vector<Wiring> out;
  for (AttnSource a : {AttnSource::Q, AttnSource::K, AttnSource::V})
    for (AttnSource b : {AttnSource::Q, AttnSource::K, AttnSource::V}) out.push_back({a, b});
  return out;
}

// ---------------------------------------------------------------------------
// Mean attention distance

/// Attention-weighted mean distance between query and key positions, tokens
/// laid out row-major on a grid_w x grid_h lattice with unit spacing.
inline double mean_attention_distance(const Matrix& weights, Index grid_w, Index grid_h,
                                      double row_tol = 1e-6) {
  const Index n = grid_w * grid_h;
  if (weights.rows() != n || weights.cols() != n) {
    throw ArgumentError("mean_attention_distance: weights " + shape_str(weights) +
                        " do not match grid " + std::to_string(grid_w) + "x" +
                        std::to_string(grid_h));
  }
  const Vector sums = row_sums(weights);
  for (Index i = 0; i < n; ++i) {
    if (std::abs(sums[i] - 1.0) > row_tol) {
      throw ArgumentError("mean_attention_distance: row " + std::to_string(i) +
                          " is not normalized");
    }
  }
  double total = 0.0;
  for (Index i = 0; i < n; ++i) {
    const double xi = static_cast<double>(i % grid_w);
    const double yi = static_cast<double>(i / grid_w);
    double acc = 0.0;
    for (Index j = 0; j < n; ++j) {
      const double dx = xi - static_cast<double>(j % grid_w);
      const double dy = yi - static_cast<double>(j / grid_w);
      acc += weights(i, j) * std::sqrt(dx * dx + dy * dy);
    }
    total += acc;
  }
  return total / static_cast<double>(n);
}

}  // namespace xagent
