#pragma once

// Mask-guided dual-branch pooling of agent tokens over visual and textual
// tokens, fused by a re-parameterized scalar.

#include <cmath>
#include <string>
#include <string_view>

#include "xagent/numerics.hpp"

namespace xagent {

/// M x (k*q) column-stochastic mask: column j is the indicator
/// (src * agents^T > 0) divided by its count of positives. A column with no
/// positive entry becomes uniform 1/M.
inline Matrix mask_tokens(const Matrix& src, const Matrix& agents) {
  const Matrix scores = matmul_nt(src, agents);
  const Index m = scores.rows();
  Matrix mask(m, scores.cols());
  for (Index j = 0; j < scores.cols(); ++j) {
    Index positives = 0;
    for (Index i = 0; i < m; ++i)
      if (scores(i, j) > 0.0) ++positives;
    if (positives == 0) {
      for (Index i = 0; i < m; ++i) mask(i, j) = 1.0 / static_cast<double>(m);
      continue;
    }
    const double w = 1.0 / static_cast<double>(positives);
    for (Index i = 0; i < m; ++i) mask(i, j) = scores(i, j) > 0.0 ? w : 0.0;
  }
  return mask;
}

/// proj(mask^T * src): one convex combination of src rows per agent, then the
/// linear map.
inline Matrix pool(const Matrix& src, const Matrix& mask, const Matrix& proj) {
  if (mask.rows() != src.rows()) {
    throw ShapeError("pool: mask " + shape_str(mask) + " vs src " + shape_str(src));
  }
  if (proj.rows() != src.cols()) {
    throw ShapeError("pool: proj " + shape_str(proj) + " vs src " + shape_str(src));
  }
  return matmul(matmul_tn(mask, src), proj);
}

struct PoolingParams {
  Matrix proj_v;  // d x d
  Matrix proj_t;  // d x d, unused when shared_proj
  double gamma_v = 0.0;
  double gamma_t = 0.0;
  double gamma_single = 0.1;  // the plain scalar of the single-gamma variant
  double gamma_init = 0.1;
  bool shared_proj = false;

  /// gamma = (exp(gamma_v) - exp(gamma_t)) + gamma_init
  double gamma() const { return (std::exp(gamma_v) - std::exp(gamma_t)) + gamma_init; }

  const Matrix& text_proj() const { return shared_proj ? proj_v : proj_t; }

  static PoolingParams init(Index d, Rng& rng, double gamma_init = 0.1, bool shared = false) {
    if (!(gamma_init > 0.0 && gamma_init < 1.0)) {
      throw ArgumentError("PoolingParams: gamma_init must lie in (0, 1)");
    }
    PoolingParams p;
    const double scale = 1.0 / std::sqrt(static_cast<double>(d));
    p.proj_v = rng.normal_matrix(d, d, scale);
    p.proj_t = rng.normal_matrix(d, d, scale);
    p.gamma_init = gamma_init;
    p.gamma_single = gamma_init;
    p.shared_proj = shared;
    return p;
  }
};

inline Matrix fuse(const Matrix& f_vp, const Matrix& f_tp, const PoolingParams& params) {
  require_same_shape(f_vp, f_tp, "fuse");
  const double g = params.gamma();
  if (!std::isfinite(g)) throw NumericError("fuse: gamma is not finite");
  Matrix out = f_vp;
  axpy(out, g, f_tp);
  return out;
}

enum class PoolingMode { VisualOnly, TextualOnly, Dual, SingleGamma };

inline std::string_view to_string(PoolingMode m) {
  switch (m) {
    case PoolingMode::VisualOnly: return "visual-only";
    case PoolingMode::TextualOnly: return "textual-only";
    case PoolingMode::Dual: return "dual";
    case PoolingMode::SingleGamma: return "single-gamma";
  }
  return "?";
}

inline PoolingMode parse_pooling_mode(std::string_view s) {
  if (s == "visual-only") return PoolingMode::VisualOnly;
  if (s == "textual-only") return PoolingMode::TextualOnly;
  if (s == "dual") return PoolingMode::Dual;
  if (s == "single-gamma") return PoolingMode::SingleGamma;
  throw ArgumentError("unknown pooling mode '" + std::string(s) + "'");
}

/// Forward record of one pooling call; also the cache for the backward pass.
struct PoolingResult {
  Matrix agents;    // (k*q) x d, the refined agent tokens
  Matrix mask_v;    // N x (k*q)
  Matrix mask_t;    // Nc x (k*q)
  Matrix pooled_v;  // mask_v^T * visual
  Matrix pooled_t;  // mask_t^T * text
  Matrix f_vp;
  Matrix f_tp;
  double gamma = 0.0;
};

inline PoolingResult pool_variant(PoolingMode mode, const Matrix& visual, const Matrix& text,
                                  const Matrix& raw_agents, const PoolingParams& params,
                                  const Matrix* frozen_mask_v = nullptr,
                                  const Matrix* frozen_mask_t = nullptr) {
  if (visual.cols() != raw_agents.cols() || text.cols() != raw_agents.cols()) {
    throw ShapeError("pool_variant: widths visual " + shape_str(visual) + ", text " +
                     shape_str(text) + ", agents " + shape_str(raw_agents));
  }
  PoolingResult r;
  r.mask_v = frozen_mask_v ? *frozen_mask_v : mask_tokens(visual, raw_agents);
  r.mask_t = frozen_mask_t ? *frozen_mask_t : mask_tokens(text, raw_agents);
  r.pooled_v = matmul_tn(r.mask_v, visual);
  r.pooled_t = matmul_tn(r.mask_t, text);
  r.f_vp = matmul(r.pooled_v, params.proj_v);
  r.f_tp = matmul(r.pooled_t, params.text_proj());
  switch (mode) {
    case PoolingMode::VisualOnly:
      r.agents = r.f_vp;
      break;
    case PoolingMode::TextualOnly:
      r.agents = r.f_tp;
      break;
    case PoolingMode::Dual:
      r.gamma = params.gamma();
      r.agents = fuse(r.f_vp, r.f_tp, params);
      break;
    case PoolingMode::SingleGamma:
      r.gamma = params.gamma_single;
      r.agents = r.f_vp;
      axpy(r.agents, r.gamma, r.f_tp);
      break;
  }
  require_finite(r.agents, "pool_variant");
  return r;
}

struct PoolingGrads {
  Matrix d_visual;
  Matrix d_text;
  PoolingParams params;  // gradients in the same layout
};

/// Masks are constants here: no gradient reaches the raw agents.
inline PoolingGrads pool_variant_backward(PoolingMode mode, const PoolingResult& fwd,
                                          const PoolingParams& params, const Matrix& d_agents) {
  PoolingGrads g;
  g.params.proj_v = Matrix(params.proj_v.rows(), params.proj_v.cols());
  g.params.proj_t = Matrix(params.proj_t.rows(), params.proj_t.cols());
  g.params.shared_proj = params.shared_proj;
  g.params.gamma_init = 0.0;
  g.params.gamma_single = 0.0;

  Matrix d_fvp(fwd.f_vp.rows(), fwd.f_vp.cols());
  Matrix d_ftp(fwd.f_tp.rows(), fwd.f_tp.cols());
  switch (mode) {
    case PoolingMode::VisualOnly:
      d_fvp = d_agents;
      break;
    case PoolingMode::TextualOnly:
      d_ftp = d_agents;
      break;
    case PoolingMode::Dual: {
      d_fvp = d_agents;
      d_ftp = fwd.gamma * d_agents;
      const double dgamma = dot(d_agents, fwd.f_tp);
      g.params.gamma_v = dgamma * std::exp(params.gamma_v);
      g.params.gamma_t = -dgamma * std::exp(params.gamma_t);
      break;
    }
    case PoolingMode::SingleGamma:
      d_fvp = d_agents;
      d_ftp = fwd.gamma * d_agents;
      g.params.gamma_single = dot(d_agents, fwd.f_tp);
      break;
  }

  g.params.proj_v += matmul_tn(fwd.pooled_v, d_fvp);
  Matrix& proj_t_grad = params.shared_proj ? g.params.proj_v : g.params.proj_t;
  proj_t_grad += matmul_tn(fwd.pooled_t, d_ftp);

  g.d_visual = matmul(fwd.mask_v, matmul_nt(d_fvp, params.proj_v));
  g.d_text = matmul(fwd.mask_t, matmul_nt(d_ftp, params.text_proj()));
  return g;
}

}  // namespace xagent
