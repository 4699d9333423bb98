#pragma once

// Contrastive text alignment loss and the per-token segmentation loss.

#include <cmath>
#include <string>
#include <vector>

#include "xagent/numerics.hpp"

namespace xagent {

/// Logit scale of the per-token similarity classifier.
inline constexpr double kSegTemperature = 0.07;

struct LossParams {
  double log_tau1 = std::log(0.07);
  double log_tau2 = std::log(0.07);

  double tau1() const { return std::exp(log_tau1); }
  double tau2() const { return std::exp(log_tau2); }
};

namespace detail {

/// Mean over rows of -log softmax(logits)[i, target[i]], plus dL/dlogits.
inline double softmax_cross_entropy(const Matrix& logits, const std::vector<Index>& target,
                                    Matrix* d_logits) {
  const Matrix p = softmax_rows(logits);
  const double n = static_cast<double>(logits.rows());
  double loss = 0.0;
  for (Index i = 0; i < logits.rows(); ++i) {
    auto r = logits.row(i);
    double mx = r[0];
    for (double v : r) mx = std::max(mx, v);
    double s = 0.0;
    for (double v : r) s += std::exp(v - mx);
    loss += (mx + std::log(s)) - r[target[i]];
  }
  if (d_logits != nullptr) {
    *d_logits = p;
    for (Index i = 0; i < logits.rows(); ++i) (*d_logits)(i, target[i]) -= 1.0;
    for (double& v : d_logits->data()) v /= n;
  }
  return loss / n;
}

inline std::vector<Index> diagonal_targets(Index n) {
  std::vector<Index> t(n);
  for (Index i = 0; i < n; ++i) t[i] = i;
  return t;
}

}  // namespace detail

struct AlignResult {
  double loss = 0.0;
  Matrix d_ft;
  Matrix d_ft_prime;
  double d_log_tau1 = 0.0;
  double d_log_tau2 = 0.0;
};

/// 0.5 * (CE(S1, I) + CE(S2, I)) with S1 = n(f_t) n(f_t')^T / tau1 and
/// S2 = n(f_t') n(f_t)^T / tau2, n = row L2 normalization.
inline AlignResult align_loss_with_grad(const Matrix& f_t, const Matrix& f_t_prime,
                                        const LossParams& p) {
  require_same_shape(f_t, f_t_prime, "align_loss");
  if (f_t.rows() < 2) throw ArgumentError("align_loss: needs at least 2 categories");
  const Matrix a = l2_normalize_rows(f_t);
  const Matrix b = l2_normalize_rows(f_t_prime);
  const double t1 = p.tau1();
  const double t2 = p.tau2();
  const Matrix s1 = (1.0 / t1) * matmul_nt(a, b);
  const Matrix s2 = (1.0 / t2) * matmul_nt(b, a);
  const auto target = detail::diagonal_targets(f_t.rows());

  Matrix ds1, ds2;
  AlignResult r;
  r.loss = 0.5 * (detail::softmax_cross_entropy(s1, target, &ds1) +
                  detail::softmax_cross_entropy(s2, target, &ds2));
  ds1 = 0.5 * ds1;
  ds2 = 0.5 * ds2;
  r.d_log_tau1 = -dot(ds1, s1);
  r.d_log_tau2 = -dot(ds2, s2);
  Matrix da = (1.0 / t1) * matmul(ds1, b);
  axpy(da, 1.0 / t2, matmul_tn(ds2, b));
  Matrix db = (1.0 / t1) * matmul_tn(ds1, a);
  axpy(db, 1.0 / t2, matmul(ds2, a));
  r.d_ft = l2_normalize_rows_backward(f_t, da);
  r.d_ft_prime = l2_normalize_rows_backward(f_t_prime, db);
  return r;
}

inline double align_loss(const Matrix& f_t, const Matrix& f_t_prime, const LossParams& p) {
  return align_loss_with_grad(f_t, f_t_prime, p).loss;
}

struct SegResult {
  double loss = 0.0;
  Matrix d_fv;
  Matrix d_ft;
};

/// Mean cross-entropy of cosine-similarity logits n(f_v) n(f_t)^T / tau_seg.
inline SegResult seg_loss_with_grad(const Matrix& f_v, const Matrix& f_t,
                                    const std::vector<Index>& labels,
                                    double tau_seg = kSegTemperature) {
  if (f_v.cols() != f_t.cols()) {
    throw ShapeError("seg_loss: f_v " + shape_str(f_v) + " vs f_t " + shape_str(f_t));
  }
  if (labels.size() != f_v.rows()) {
    throw ShapeError("seg_loss: " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(f_v.rows()) + " tokens");
  }
  for (Index l : labels) {
    if (l >= f_t.rows()) {
      throw ArgumentError("seg_loss: label " + std::to_string(l) + " outside [0, " +
                          std::to_string(f_t.rows()) + ")");
    }
  }
  const Matrix xv = l2_normalize_rows(f_v);
  const Matrix xt = l2_normalize_rows(f_t);
  const Matrix logits = (1.0 / tau_seg) * matmul_nt(xv, xt);
  Matrix dz;
  SegResult r;
  r.loss = detail::softmax_cross_entropy(logits, labels, &dz);
  r.d_fv = l2_normalize_rows_backward(f_v, (1.0 / tau_seg) * matmul(dz, xt));
  r.d_ft = l2_normalize_rows_backward(f_t, (1.0 / tau_seg) * matmul_tn(dz, xv));
  return r;
}

inline double seg_loss(const Matrix& f_v, const Matrix& f_t, const std::vector<Index>& labels,
                       double tau_seg = kSegTemperature) {
  return seg_loss_with_grad(f_v, f_t, labels, tau_seg).loss;
}

inline double total_loss(double seg, double align) { return seg + align; }

}  // namespace xagent
