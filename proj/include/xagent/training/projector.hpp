#pragma once

// Text projector: one optional self-attention layer over the category
// embeddings followed by a linear map d' -> d, plus the separate linear layer
// phi used by the alignment branch.

#include <cmath>
#include <utility>

#include "xagent/attention.hpp"
#include "xagent/numerics.hpp"

namespace xagent {

struct TextProjector {
  bool use_attention = true;
  Matrix w_q, w_k, w_v;  // d' x d', only used with attention
  Matrix out_map;        // d' x d
  Matrix phi;            // d' x d

  Index in_width() const { return out_map.rows(); }
  Index out_width() const { return out_map.cols(); }

  static TextProjector init(Index d_prime, Index d, Rng& rng, bool use_attention = true) {
    TextProjector p;
    p.use_attention = use_attention;
    const double s = 1.0 / std::sqrt(static_cast<double>(d_prime));
    p.w_q = rng.normal_matrix(d_prime, d_prime, s);
    p.w_k = rng.normal_matrix(d_prime, d_prime, s);
    p.w_v = rng.normal_matrix(d_prime, d_prime, 0.5 * s);
    p.out_map = rng.normal_matrix(d_prime, d, s);
    p.phi = rng.normal_matrix(d_prime, d, s);
    return p;
  }
};

struct ProjectorCache {
  Matrix input;
  SoftmaxAttnCache attn;
  Matrix hidden;  // input (+ self-attention when enabled)
  Matrix f_t;
  Matrix f_t_prime;
};

inline ProjectorCache project_text_forward(const Matrix& f_t_init, const TextProjector& p) {
  if (f_t_init.cols() != p.in_width()) {
    throw ShapeError("project_text: input " + shape_str(f_t_init) + " vs projector width " +
                     std::to_string(p.in_width()));
  }
  ProjectorCache c;
  c.input = f_t_init;
  c.hidden = f_t_init;
  if (p.use_attention) {
    const double scale = 1.0 / std::sqrt(static_cast<double>(p.in_width()));
    c.attn = softmax_attention(matmul(f_t_init, p.w_q), matmul(f_t_init, p.w_k),
                               matmul(f_t_init, p.w_v), scale);
    c.hidden += c.attn.out;
  }
  c.f_t = matmul(c.hidden, p.out_map);
  c.f_t_prime = matmul(f_t_init, p.phi);
  return c;
}

/// (f_t, f_t') for the category embeddings.
inline std::pair<Matrix, Matrix> project_text(const Matrix& f_t_init, const TextProjector& p) {
  ProjectorCache c = project_text_forward(f_t_init, p);
  return {std::move(c.f_t), std::move(c.f_t_prime)};
}

/// Parameter gradients; the input embeddings are frozen.
inline TextProjector project_text_backward(const ProjectorCache& c, const TextProjector& p,
                                           const Matrix& d_ft, const Matrix& d_ft_prime) {
  TextProjector g;
  g.use_attention = p.use_attention;
  g.w_q = Matrix(p.w_q.rows(), p.w_q.cols());
  g.w_k = Matrix(p.w_k.rows(), p.w_k.cols());
  g.w_v = Matrix(p.w_v.rows(), p.w_v.cols());
  g.out_map = matmul_tn(c.hidden, d_ft);
  g.phi = matmul_tn(c.input, d_ft_prime);
  if (p.use_attention) {
    const Matrix d_hidden = matmul_nt(d_ft, p.out_map);
    const SoftmaxAttnGrads ag = softmax_attention_backward(c.attn, d_hidden);
    g.w_q = matmul_tn(c.input, ag.dq);
    g.w_k = matmul_tn(c.input, ag.dk);
    g.w_v = matmul_tn(c.input, ag.dv);
  }
  return g;
}

}  // namespace xagent
