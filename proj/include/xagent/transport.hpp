#pragma once

// Entropy-regularized optimal transport between textual tokens and a visual
// key matrix.

#include <cmath>
#include <limits>
#include <string>
#include <string_view>

#include "xagent/numerics.hpp"

namespace xagent {

enum class CostVariant { Dot, Mae, Mse };

inline std::string_view to_string(CostVariant v) {
  switch (v) {
    case CostVariant::Dot: return "dot";
    case CostVariant::Mae: return "mae";
    case CostVariant::Mse: return "mse";
  }
  return "?";
}

inline CostVariant parse_cost_variant(std::string_view s) {
  if (s == "dot") return CostVariant::Dot;
  if (s == "mae") return CostVariant::Mae;
  if (s == "mse") return CostVariant::Mse;
  throw ArgumentError("unknown cost variant '" + std::string(s) + "'");
}

inline double max_row_norm(const Matrix& m) {
  double mx = 0.0;
  for (Index i = 0; i < m.rows(); ++i) mx = std::max(mx, row_norm(m.row(i)));
  return mx;
}

/// Nc x N transport cost between text rows and key rows.
///
/// The dot variant scales both sides by their largest row norm, so entries
/// fall in [0, 2]; mae and mse are per-dimension means of the row difference.
inline Matrix cost_matrix(const Matrix& text, const Matrix& key, CostVariant variant) {
  if (text.cols() != key.cols()) {
    throw ShapeError("cost_matrix: text " + shape_str(text) + " vs key " + shape_str(key));
  }
  const double tmax = max_row_norm(text);
  const double kmax = max_row_norm(key);
  if (tmax == 0.0 || key.rows() == 0 || kmax == 0.0) {
    throw ArgumentError("cost_matrix: degenerate input (all-zero text or key rows)");
  }
  const Index d = text.cols();
  Matrix c(text.rows(), key.rows());
  for (Index i = 0; i < text.rows(); ++i) {
    auto t = text.row(i);
    for (Index j = 0; j < key.rows(); ++j) {
      auto k = key.row(j);
      double acc = 0.0;
      switch (variant) {
        case CostVariant::Dot:
          for (Index p = 0; p < d; ++p) acc += t[p] * k[p];
          c(i, j) = 1.0 - acc / (tmax * kmax);
          break;
        case CostVariant::Mae:
          for (Index p = 0; p < d; ++p) acc += std::abs(t[p] - k[p]);
          c(i, j) = acc / static_cast<double>(d);
          break;
        case CostVariant::Mse:
          for (Index p = 0; p < d; ++p) acc += (t[p] - k[p]) * (t[p] - k[p]);
          c(i, j) = acc / static_cast<double>(d);
          break;
      }
    }
  }
  require_finite(c, "cost_matrix");
  return c;
}

struct TransportProblem {
  Matrix cost;
  Vector mu;
  Vector nu;
  double epsilon = 0.05;

  static TransportProblem uniform(Matrix cost, double epsilon) {
    TransportProblem p;
    p.mu.assign(cost.rows(), 1.0 / static_cast<double>(cost.rows()));
    p.nu.assign(cost.cols(), 1.0 / static_cast<double>(cost.cols()));
    p.cost = std::move(cost);
    p.epsilon = epsilon;
    return p;
  }

  void validate() const {
    if (cost.rows() == 0 || cost.cols() == 0) throw ShapeError("TransportProblem: empty cost");
    if (mu.size() != cost.rows() || nu.size() != cost.cols()) {
      throw ShapeError("TransportProblem: marginals do not match cost " + shape_str(cost));
    }
    if (!(epsilon > 0) || !std::isfinite(epsilon)) {
      throw ArgumentError("TransportProblem: epsilon must be finite and > 0");
    }
    require_finite(cost, "TransportProblem cost");
    auto check = [](const Vector& v, const char* name) {
      double s = 0.0;
      for (double x : v) {
        if (!(x > 0) || !std::isfinite(x)) {
          throw ArgumentError(std::string("TransportProblem: ") + name + " must be positive");
        }
        s += x;
      }
      if (std::abs(s - 1.0) > 1e-9) {
        throw ArgumentError(std::string("TransportProblem: ") + name + " must sum to 1");
      }
    };
    check(mu, "mu");
    check(nu, "nu");
  }
};

struct TransportPlan {
  Matrix plan;
  Index iterations = 0;
  double marginal_error = std::numeric_limits<double>::infinity();
  bool converged = false;
};

struct SinkhornOptions {
  Index max_iter = 200;
  double tol = 1e-6;
};

namespace detail {

inline double log_sum_exp(std::span<const double> v) {
  double mx = -std::numeric_limits<double>::infinity();
  for (double x : v) mx = std::max(mx, x);
  if (!std::isfinite(mx)) return mx;
  double s = 0.0;
  for (double x : v) s += std::exp(x - mx);
  return mx + std::log(s);
}

inline double marginal_violation(const Matrix& plan, const Vector& mu, const Vector& nu) {
  const Vector rs = row_sums(plan);
  const Vector cs = col_sums(plan);
  double err = 0.0;
  for (Index i = 0; i < rs.size(); ++i) err = std::max(err, std::abs(rs[i] - mu[i]));
  for (Index j = 0; j < cs.size(); ++j) err = std::max(err, std::abs(cs[j] - nu[j]));
  return err;
}

}  // namespace detail

/// Sinkhorn scaling in the log domain. Each iteration updates the row
/// scaling a from b (starting at b = 1) and then b from a, and stops once the
/// largest marginal violation drops below tol.
inline TransportPlan sinkhorn(const TransportProblem& problem, Index max_iter = 200,
                              double tol = 1e-6) {
  problem.validate();
  if (max_iter < 1) throw ArgumentError("sinkhorn: max_iter must be >= 1");
  if (!(tol > 0)) throw ArgumentError("sinkhorn: tol must be > 0");

  const Index nc = problem.cost.rows();
  const Index n = problem.cost.cols();
  Matrix log_kernel(nc, n);
  for (Index i = 0; i < nc; ++i)
    for (Index j = 0; j < n; ++j) log_kernel(i, j) = -problem.cost(i, j) / problem.epsilon;
  if (!log_kernel.all_finite()) {
    throw NumericError("sinkhorn: exp(-C/epsilon) underflows for epsilon=" +
                       std::to_string(problem.epsilon));
  }

  Vector log_a(nc, 0.0);
  Vector log_b(n, 0.0);
  Vector scratch(std::max(nc, n));
  Matrix plan(nc, n);

  auto build_plan = [&] {
    for (Index i = 0; i < nc; ++i)
      for (Index j = 0; j < n; ++j) plan(i, j) = std::exp(log_a[i] + log_kernel(i, j) + log_b[j]);
  };

  TransportPlan out;
  for (Index it = 1; it <= max_iter; ++it) {
    for (Index i = 0; i < nc; ++i) {
      for (Index j = 0; j < n; ++j) scratch[j] = log_kernel(i, j) + log_b[j];
      log_a[i] = std::log(problem.mu[i]) - detail::log_sum_exp({scratch.data(), n});
    }
    for (Index j = 0; j < n; ++j) {
      for (Index i = 0; i < nc; ++i) scratch[i] = log_kernel(i, j) + log_a[i];
      log_b[j] = std::log(problem.nu[j]) - detail::log_sum_exp({scratch.data(), nc});
    }
    for (Index i = 0; i < nc; ++i) {
      if (!std::isfinite(log_a[i])) {
        throw NumericError("sinkhorn: row scaling diverged at iteration " + std::to_string(it) +
                           " (epsilon=" + std::to_string(problem.epsilon) + ")");
      }
    }
    build_plan();
    out.iterations = it;
    out.marginal_error = detail::marginal_violation(plan, problem.mu, problem.nu);
    if (out.marginal_error < tol) {
      out.converged = true;
      break;
    }
  }

  const Vector rs = row_sums(plan);
  const Vector cs = col_sums(plan);
  for (double v : rs) {
    if (!(v > 0) || !std::isfinite(v)) {
      throw NumericError("sinkhorn: transport plan row underflowed to zero (epsilon=" +
                         std::to_string(problem.epsilon) + ")");
    }
  }
  for (double v : cs) {
    if (!(v > 0) || !std::isfinite(v)) {
      throw NumericError("sinkhorn: transport plan column underflowed to zero (epsilon=" +
                         std::to_string(problem.epsilon) + ")");
    }
  }
  out.plan = std::move(plan);
  return out;
}

inline TransportPlan sinkhorn(const TransportProblem& problem, const SinkhornOptions& opts) {
  return sinkhorn(problem, opts.max_iter, opts.tol);
}

/// Shannon entropy -sum P log P (0 log 0 = 0).
inline double plan_entropy(const Matrix& plan) {
  double h = 0.0;
  for (double p : plan.data())
    if (p > 0) h -= p * std::log(p);
  return h;
}

}  // namespace xagent
