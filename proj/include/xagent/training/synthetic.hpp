#pragma once

// Seeded synthetic embeddings. Seen categories are random unit directions;
// each unseen category mixes a seen direction (weight `mix`) with a fresh
// random direction, so latent unseen structure is partly visible through the
// seen categories. Tokens are noisy copies of their label direction.

#include <cmath>
#include <vector>

#include "xagent/numerics.hpp"
#include "xagent/training/pipeline.hpp"

namespace xagent {

struct SyntheticSpec {
  Index d = 16;
  Index d_prime = 24;
  Index seen = 12;
  Index unseen = 0;
  double mix = 0.3;
  double token_noise = 0.3;
  double text_noise = 0.05;
};

struct CategorySpace {
  Matrix directions;   // (seen + unseen) x d, unit rows; seen first
  Matrix text;         // (seen + unseen) x d', category embeddings
  Matrix text_map;     // d x d', fixed map from direction to text space
  Index seen = 0;

  Index count() const { return directions.rows(); }
  bool is_seen(Index c) const { return c < seen; }
};

inline Vector random_unit(Index d, Rng& rng) {
  Vector v(d);
  double n = 0.0;
  while (n < 1e-6) {
    n = 0.0;
    for (double& x : v) {
      x = rng.normal();
      n += x * x;
    }
    n = std::sqrt(n);
  }
  for (double& x : v) x /= n;
  return v;
}

inline CategorySpace make_categories(const SyntheticSpec& s, Rng& rng) {
  if (s.d == 0 || s.d_prime == 0 || s.seen == 0) {
    throw ArgumentError("make_categories: d, d_prime and seen must be >= 1");
  }
  if (!(s.mix >= 0.0 && s.mix <= 1.0)) throw ArgumentError("make_categories: mix outside [0, 1]");
  CategorySpace cs;
  cs.seen = s.seen;
  const Index total = s.seen + s.unseen;
  cs.directions = Matrix(total, s.d);
  for (Index c = 0; c < total; ++c) {
    Vector v = random_unit(s.d, rng);
    if (c >= s.seen) {
      const auto anchor = cs.directions.row((c - s.seen) % s.seen);
      const double w = std::sqrt(1.0 - s.mix * s.mix);
      double n = 0.0;
      for (Index j = 0; j < s.d; ++j) {
        v[j] = s.mix * anchor[j] + w * v[j];
        n += v[j] * v[j];
      }
      for (double& x : v) x /= std::sqrt(n);
    }
    std::copy(v.begin(), v.end(), cs.directions.row(c).begin());
  }
  cs.text_map = s.d == s.d_prime ? Matrix::identity(s.d) : rng.normal_matrix(s.d, s.d_prime, 1.0 / std::sqrt(static_cast<double>(s.d)));
  cs.text = matmul(cs.directions, cs.text_map);
  axpy(cs.text, s.text_noise, rng.normal_matrix(total, s.d_prime, 1.0 / std::sqrt(static_cast<double>(s.d_prime))));
  return cs;
}

/// Tokens for the given labels: direction of the label plus isotropic noise
/// of total expected norm `token_noise`.
inline Matrix sample_tokens(const CategorySpace& cs, const std::vector<Index>& labels, double noise,
                            Rng& rng) {
  const Index d = cs.directions.cols();
  Matrix x = rng.normal_matrix(labels.size(), d, noise / std::sqrt(static_cast<double>(d)));
  for (Index i = 0; i < labels.size(); ++i) {
    if (labels[i] >= cs.count()) throw ArgumentError("sample_tokens: label out of range");
    auto dst = x.row(i);
    auto dir = cs.directions.row(labels[i]);
    for (Index j = 0; j < d; ++j) dst[j] += dir[j];
  }
  return x;
}

/// N tokens with labels cycling over the first `categories` rows (a seeded
/// shuffle keeps every category present when N >= categories).
inline Instance make_instance(const CategorySpace& cs, Index n, Index categories, double noise,
                              Rng& rng) {
  if (categories == 0 || categories > cs.count()) {
    throw ArgumentError("make_instance: categories must lie in [1, " + std::to_string(cs.count()) + "]");
  }
  Instance inst;
  inst.labels.resize(n);
  for (Index i = 0; i < n; ++i) inst.labels[i] = i % categories;
  for (Index i = n; i > 1; --i) std::swap(inst.labels[i - 1], inst.labels[rng.below(i)]);
  inst.tokens = sample_tokens(cs, inst.labels, noise, rng);
  inst.text = gather_rows(cs.text, [&] {
    IndexList idx(categories);
    for (Index c = 0; c < categories; ++c) idx[c] = c;
    return idx;
  }());
  return inst;
}

}  // namespace xagent
