#include <gtest/gtest.h>

#include <cmath>

#include "test_support.hpp"
#include "xagent/pooling.hpp"

namespace xagent {
namespace {

using testing::expect_near;
using testing::random_matrix;

TEST(MaskTokens, ColumnsAreProbabilityVectors) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const Matrix mask = mask_tokens(random_matrix(12, 5, seed), random_matrix(6, 5, seed + 50));
    for (double s : col_sums(mask)) EXPECT_NEAR(s, 1.0, 1e-9);
    for (double v : mask.data()) EXPECT_GE(v, 0.0);
  }
}

TEST(MaskTokens, HandComputedAndFallback) {
  const Matrix src{{1, 0}, {0, 1}, {1, 1}, {-1, 0}};
  const Matrix agents{{1, 0}, {0, 0}};
  const Matrix mask = mask_tokens(src, agents);
  // Agent 0 hits rows 0 and 2; agent 1 hits nothing, so the column is uniform.
  expect_near(mask, Matrix{{0.5, 0.25}, {0.0, 0.25}, {0.5, 0.25}, {0.0, 0.25}}, 0.0);
}

TEST(Pool, MatchesTwoStepOracle) {
  const Matrix src = random_matrix(7, 4, 1), agents = random_matrix(3, 4, 2),
               proj = random_matrix(4, 4, 3);
  const Matrix mask = mask_tokens(src, agents);
  Matrix averaged(3, 4);
  for (Index j = 0; j < 3; ++j)
    for (Index i = 0; i < 7; ++i)
      for (Index c = 0; c < 4; ++c) averaged(j, c) += mask(i, j) * src(i, c);
  expect_near(pool(src, mask, proj), matmul(averaged, proj), 1e-12);
  EXPECT_THROW(pool(src, Matrix(6, 3), proj), ShapeError);
}

TEST(Pool, IdentityProjectionStaysInConvexHull) {
  const Matrix src = random_matrix(9, 3, 4);
  const Matrix out = pool(src, mask_tokens(src, random_matrix(5, 3, 5)), Matrix::identity(3));
  for (Index c = 0; c < 3; ++c) {
    double lo = 1e300, hi = -1e300;
    for (Index i = 0; i < 9; ++i) lo = std::min(lo, src(i, c)), hi = std::max(hi, src(i, c));
    for (Index j = 0; j < 5; ++j) {
      EXPECT_GE(out(j, c), lo - 1e-12);
      EXPECT_LE(out(j, c), hi + 1e-12);
    }
  }
}

TEST(Gamma, ZeroLogitsGiveInitExactly) {
  Rng rng(6);
  const PoolingParams p = PoolingParams::init(4, rng);
  EXPECT_EQ(p.gamma_v, 0.0);
  EXPECT_EQ(p.gamma_t, 0.0);
  EXPECT_EQ(p.gamma(), 0.1);
}

TEST(Gamma, EqualLogitsCancel) {
  PoolingParams p;
  for (double c : {-3.0, -0.5, 0.7, 2.0}) {
    p.gamma_v = p.gamma_t = c;
    EXPECT_EQ(p.gamma(), p.gamma_init);
  }
  Rng rng(7);
  EXPECT_THROW(PoolingParams::init(4, rng, 1.5), ArgumentError);
  EXPECT_THROW(PoolingParams::init(4, rng, 0.0), ArgumentError);
}

TEST(Fuse, SingleGammaZeroIsVisualOnly) {
  Rng rng(8);
  PoolingParams p = PoolingParams::init(3, rng);
  p.gamma_single = 0.0;
  const Matrix v = random_matrix(10, 3, 9), t = random_matrix(4, 3, 10), a = random_matrix(5, 3, 11);
  const PoolingResult single = pool_variant(PoolingMode::SingleGamma, v, t, a, p);
  const PoolingResult visual = pool_variant(PoolingMode::VisualOnly, v, t, a, p);
  EXPECT_EQ(single.agents, visual.agents);
}

TEST(Fuse, ModesAndNames) {
  for (auto m : {PoolingMode::VisualOnly, PoolingMode::TextualOnly, PoolingMode::Dual,
                 PoolingMode::SingleGamma})
    EXPECT_EQ(parse_pooling_mode(to_string(m)), m);
  EXPECT_THROW(parse_pooling_mode("triple"), ArgumentError);
}

TEST(PoolVariant, MaskIsInvariantToPositiveScaling) {
  const Matrix v = random_matrix(10, 3, 12), a = random_matrix(4, 3, 13);
  EXPECT_EQ(mask_tokens(v, a), mask_tokens(3.5 * v, 0.25 * a));
}

class PoolGrad : public ::testing::TestWithParam<PoolingMode> {};

TEST_P(PoolGrad, BackwardMatchesFiniteDifferences) {
  const PoolingMode mode = GetParam();
  Rng rng(14);
  PoolingParams p0 = PoolingParams::init(3, rng);
  p0.gamma_v = 0.3;
  p0.gamma_t = -0.2;
  p0.gamma_single = 0.4;
  const Matrix v = random_matrix(8, 3, 15), t = random_matrix(4, 3, 16), a = random_matrix(5, 3, 17);
  const Matrix w = random_matrix(5, 3, 18);
  const PoolingResult fwd = pool_variant(mode, v, t, a, p0);
  const PoolingGrads g = pool_variant_backward(mode, fwd, p0, w);
  // Masks stay fixed while perturbing, as in the analytic pass.
  auto loss = [&](const PoolingParams& p, const Matrix& vv, const Matrix& tt) {
    return dot(w, pool_variant(mode, vv, tt, a, p, &fwd.mask_v, &fwd.mask_t).agents);
  };
  auto scalar = [&](double PoolingParams::*m) {
    return fd_gradient(
        [&](std::span<const double> x) {
          PoolingParams p = p0;
          p.*m = x[0];
          return loss(p, v, t);
        },
        Vector{p0.*m}, 1e-6)[0];
  };
  EXPECT_NEAR(g.params.gamma_v, scalar(&PoolingParams::gamma_v), 1e-5);
  EXPECT_NEAR(g.params.gamma_t, scalar(&PoolingParams::gamma_t), 1e-5);
  EXPECT_NEAR(g.params.gamma_single, scalar(&PoolingParams::gamma_single), 1e-5);
  auto mat = [&](const Matrix& base, auto&& rebuild) {
    return fd_gradient(
        [&](std::span<const double> x) {
          return rebuild(Matrix(base.rows(), base.cols(), Vector(x.begin(), x.end())));
        },
        base.data(), 1e-6);
  };
  const Vector d_pv = mat(p0.proj_v, [&](const Matrix& m) {
    PoolingParams p = p0;
    p.proj_v = m;
    return loss(p, v, t);
  });
  const Vector d_pt = mat(p0.proj_t, [&](const Matrix& m) {
    PoolingParams p = p0;
    p.proj_t = m;
    return loss(p, v, t);
  });
  EXPECT_LT(relative_error(g.params.proj_v.data(), d_pv), 1e-6);
  EXPECT_LT(relative_error(g.params.proj_t.data(), d_pt), 1e-6);
  EXPECT_LT(relative_error(g.d_visual.data(),
                           mat(v, [&](const Matrix& m) { return loss(p0, m, t); })),
            1e-6);
  EXPECT_LT(relative_error(g.d_text.data(),
                           mat(t, [&](const Matrix& m) { return loss(p0, v, m); })),
            1e-6);
}

INSTANTIATE_TEST_SUITE_P(Modes, PoolGrad,
                         ::testing::Values(PoolingMode::VisualOnly, PoolingMode::TextualOnly,
                                           PoolingMode::Dual, PoolingMode::SingleGamma));

TEST(PoolGradShared, SharedProjectionAccumulatesBothBranches) {
  Rng rng(19);
  PoolingParams p0 = PoolingParams::init(3, rng, 0.1, /*shared=*/true);
  const Matrix v = random_matrix(6, 3, 20), t = random_matrix(3, 3, 21), a = random_matrix(4, 3, 22);
  const Matrix w = random_matrix(4, 3, 23);
  const PoolingResult fwd = pool_variant(PoolingMode::Dual, v, t, a, p0);
  const PoolingGrads g = pool_variant_backward(PoolingMode::Dual, fwd, p0, w);
  const Vector fd = fd_gradient(
      [&](std::span<const double> x) {
        PoolingParams p = p0;
        p.proj_v = Matrix(3, 3, Vector(x.begin(), x.end()));
        return dot(w, pool_variant(PoolingMode::Dual, v, t, a, p, &fwd.mask_v, &fwd.mask_t).agents);
      },
      p0.proj_v.data(), 1e-6);
  EXPECT_LT(relative_error(g.params.proj_v.data(), fd), 1e-6);
  EXPECT_EQ(max_abs(g.params.proj_t), 0.0);
}

}  // namespace
}  // namespace xagent
