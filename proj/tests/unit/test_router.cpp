#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "mos/errors.hpp"
#include "mos/router.hpp"
#include "router_fixtures.hpp"
#include "test_support.hpp"

namespace mos {
namespace {

using testing::random_unit;
using testing::random_vector;
using testing::identity_router;

TEST(ThemeScores, AxisCodebook) {
  const ThemeRouter r = identity_router({{1, 0}, {0, 1}}, 1);
  EXPECT_EQ(theme_scores(r, Vector{1, 0}), (Vector{1, 0}));
  const Vector diag = theme_scores(r, Vector{1 / std::sqrt(2.0), 1 / std::sqrt(2.0)});
  EXPECT_NEAR(diag[0], 0.70710678118654752, 1e-15);
  EXPECT_NEAR(diag[1], 0.70710678118654752, 1e-15);
  EXPECT_EQ(theme_scores(r, Vector{-1, 0}), (Vector{-1, 0}));
}

TEST(ThemeScores, ZeroProjectionIsRoutingError) {
  const ThemeRouter r = identity_router({{1, 0}, {0, 1}}, 1);
  EXPECT_THROW(theme_scores(r, Vector{0, 0}), RoutingError);
}

TEST(ThemeScores, InvariantToPositiveRescaling) {
  RngStream rng(1, 0);
  ThemeRouter r = make_theme_router(4, 6, 6, 5, 2, 0.9, rng);
  for (int trial = 0; trial < 100; ++trial) {
    const Vector x = random_vector(rng, 4);
    const Vector h = mlp_forward(r.projection, x);
    const Vector base = codebook_scores(r.codebook, h);
    const Vector scaled_h = codebook_scores(r.codebook, scaled(h, 3.7));
    Codebook rescaled = r.codebook;
    for (double& v : rescaled.rows.row(trial % 5)) v *= 0.01;
    const Vector scaled_row = codebook_scores(rescaled, h);
    for (std::size_t i = 0; i < base.size(); ++i) {
      EXPECT_NEAR(base[i], scaled_h[i], 1e-12);
      EXPECT_NEAR(base[i], scaled_row[i], 1e-12);
      EXPECT_LE(std::abs(base[i]), 1.0);
    }
  }
}

TEST(Gate, TopOne) {
  const GateVector g = gate(Vector{0.9, 0.1}, 1);
  EXPECT_EQ(g.weights, (Vector{1.0, 0.0}));
  EXPECT_EQ(g.support, (std::vector<std::size_t>{0}));
}

TEST(Gate, TopTwoOfThree) {
  const GateVector g = gate(Vector{1, 0, -1}, 2);
  const double e = std::exp(1.0);
  EXPECT_NEAR(g.weights[0], e / (e + 1), 1e-15);
  EXPECT_NEAR(g.weights[1], 1 / (e + 1), 1e-15);
  EXPECT_EQ(g.weights[2], 0.0);
  EXPECT_NEAR(g.weights[0], 0.73106, 1e-5);
}

TEST(Gate, AllEqualTiesToLowerIndices) {
  const GateVector g = gate(Vector{0.3, 0.3, 0.3}, 2);
  EXPECT_EQ(g.weights, (Vector{0.5, 0.5, 0.0}));
  EXPECT_EQ(g.support, (std::vector<std::size_t>{0, 1}));
}

TEST(EmaUpdate, ConvexMidpoint) {
  Codebook cb;
  cb.rows = Matrix(2, 2, {1, 0, 0, 1});
  cb.decay = 0.5;
  cb.usage.assign(2, 0);
  GateVector g{{1.0, 0.0}, {0}};
  const std::vector<RoutedSample> batch{{{0, 1}, g}};
  ema_update(cb, batch);
  EXPECT_EQ(cb.rows.row_vector(0), (Vector{0.5, 0.5}));
  EXPECT_EQ(cb.rows.row_vector(1), (Vector{0, 1}));
  EXPECT_EQ(cb.usage, (std::vector<std::uint64_t>{1, 0}));
}

TEST(EmaUpdate, EmptyBatchIsNoOp) {
  RngStream rng(2, 0);
  Codebook cb = make_random_codebook(3, 4, 0.9, rng);
  const Codebook before = cb;
  ema_update(cb, std::vector<RoutedSample>{});
  EXPECT_EQ(cb.rows, before.rows);
}

TEST(EmaUpdate, UpdatedRowsLieBetweenOldRowAndCentroid) {
  RngStream rng(3, 0);
  for (int trial = 0; trial < 100; ++trial) {
    Codebook cb = make_random_codebook(4, 3, 0.8, rng);
    const Codebook before = cb;
    std::vector<RoutedSample> batch;
    const std::size_t m = 1 + rng.index(10);
    for (std::size_t i = 0; i < m; ++i) {
      const Vector h = random_vector(rng, 3);
      batch.push_back({h, gate(codebook_scores(cb, h), 1 + rng.index(2))});
    }
    ema_update(cb, batch);
    for (std::size_t e = 0; e < 4; ++e) {
      Vector centroid(3, 0.0);
      std::size_t count = 0;
      for (const auto& s : batch) {
        if (s.gate.selects(e)) {
          axpy(1.0, s.projected, centroid);
          ++count;
        }
      }
      if (count == 0) {
        EXPECT_EQ(cb.rows.row_vector(e), before.rows.row_vector(e));
        continue;
      }
      for (double& v : centroid) v /= static_cast<double>(count);
      for (std::size_t j = 0; j < 3; ++j) {
        EXPECT_NEAR(cb.rows(e, j), 0.8 * before.rows(e, j) + 0.2 * centroid[j], 1e-12);
      }
      EXPECT_EQ(cb.usage[e], count);
    }
  }
}

TEST(EmaAccumulator, MergeEqualsSingleAccumulator) {
  RngStream rng(4, 0);
  EmaAccumulator all(3, 2), a(3, 2), b(3, 2);
  for (int i = 0; i < 20; ++i) {
    const Vector h = random_vector(rng, 2);
    const GateVector g = gate(random_vector(rng, 3), 2);
    all.add(h, g);
    (i < 10 ? a : b).add(h, g);
  }
  a.merge(b);
  EXPECT_EQ(a.counts(), all.counts());
  for (std::size_t i = 0; i < 6; ++i) EXPECT_NEAR(a.sums().data()[i], all.sums().data()[i], 1e-12);
}

TEST(KMeansInit, TwoTightClustersGiveClusterMeans) {
  ThemeRouter r = identity_router({{1, 0}, {0, 1}}, 1);
  std::vector<Vector> sample;
  RngStream rng(5, 0);
  Vector m1(2, 0.0), m2(2, 0.0);
  for (int i = 0; i < 20; ++i) {
    Vector a{5 + 0.01 * rng.normal(), 0.01 * rng.normal()};
    Vector b{0.01 * rng.normal(), -5 + 0.01 * rng.normal()};
    axpy(0.05, a, m1);
    axpy(0.05, b, m2);
    sample.push_back(a);
    sample.push_back(b);
  }
  Codebook cb = init_codebook_kmeans(sample, r, rng);
  std::vector<Vector> rows{cb.rows.row_vector(0), cb.rows.row_vector(1)};
  std::sort(rows.begin(), rows.end());
  std::vector<Vector> means{m1, m2};
  std::sort(means.begin(), means.end());
  for (int c = 0; c < 2; ++c) {
    for (int j = 0; j < 2; ++j) EXPECT_NEAR(rows[c][j], means[c][j], 1e-12);
  }
}

TEST(KMeansInit, SampleSizeEqualToExpertsReproducesPoints) {
  ThemeRouter r = identity_router({{1, 0}, {0, 1}, {1, 1}}, 1);
  const std::vector<Vector> sample{{1, 2}, {-3, 1}, {0.5, -0.5}};
  RngStream rng(6, 0);
  Codebook cb = init_codebook_kmeans(sample, r, rng);
  std::vector<Vector> rows;
  for (std::size_t i = 0; i < 3; ++i) rows.push_back(cb.rows.row_vector(i));
  std::sort(rows.begin(), rows.end());
  std::vector<Vector> sorted = sample;
  std::sort(sorted.begin(), sorted.end());
  EXPECT_EQ(rows, sorted);
}

TEST(KMeansInit, DeterministicAndRejectsDegenerateSamples) {
  RngStream build(7, 0);
  ThemeRouter r = make_theme_router(3, 4, 4, 3, 1, 0.99, build);
  std::vector<Vector> sample;
  for (int i = 0; i < 30; ++i) sample.push_back(random_vector(build, 3));
  RngStream a(8, 1), b(8, 1);
  EXPECT_EQ(init_codebook_kmeans(sample, r, a).rows, init_codebook_kmeans(sample, r, b).rows);
  const std::vector<Vector> degenerate(10, Vector{1, 1, 1});
  EXPECT_THROW(init_codebook_kmeans(degenerate, r, a), InitializationError);
}

TEST(Collapse, Examples) {
  Codebook cb;
  cb.rows = Matrix(2, 2, {1, 0, 0, 1});
  EXPECT_EQ(collapse_metric(cb), 0.0);
  cb.rows = Matrix(2, 2, {0.3, 0.4, 0.3, 0.4});
  EXPECT_NEAR(collapse_metric(cb), 1.0, 1e-15);
  cb.rows = Matrix(2, 2, {1, 0, 1 / std::sqrt(2.0), 1 / std::sqrt(2.0)});
  EXPECT_NEAR(collapse_metric(cb), 0.70710678118654752, 1e-15);
  cb.rows = Matrix(1, 2, {1, 0});
  EXPECT_THROW(collapse_metric(cb), ArgumentError);
}

TEST(StabilityMargin, Examples) {
  EXPECT_EQ(stability_margin(Vector{1, 0, -1}, 1), 1.0);
  EXPECT_EQ(stability_margin(Vector{0.5, 0.5, 0}, 1), 0.0);
  EXPECT_NEAR(stability_margin(Vector{0.9, 0.4, 0.1}, 2), 0.3, 1e-15);
  EXPECT_THROW(stability_margin(Vector{1, 0}, 2), ArgumentError);
}

TEST(VerifyStability, Examples) {
  const ThemeRouter r = identity_router({{1, 0}, {0, 1}}, 1);
  const Vector u1{1, 0};
  const Vector u2{0.99, std::sqrt(1 - 0.99 * 0.99)};
  StabilityCheck c = verify_stability(r, u1, u2, 1);
  EXPECT_NEAR(c.delta, 0.01, 1e-15);
  EXPECT_EQ(c.margin, 1.0);
  EXPECT_TRUE(c.applicable);
  EXPECT_TRUE(c.same_support);
  c = verify_stability(r, u1, u1, 1);
  EXPECT_EQ(c.delta, 0.0);
  EXPECT_TRUE(c.same_support);
  const Vector diag{1 / std::sqrt(2.0), 1 / std::sqrt(2.0)};
  c = verify_stability(r, diag, diag, 1);
  EXPECT_FALSE(c.applicable);
  EXPECT_THROW(verify_stability(r, Vector{2, 0}, u1, 1), ArgumentError);
}

TEST(VerifyStability, NoCounterexamplesOnRandomTrials) {
  RngStream rng(9, 0);
  std::size_t applicable = 0;
  for (int trial = 0; trial < 2000; ++trial) {
    const std::size_t n = 2 + rng.index(7);
    const std::size_t dim = 2 + rng.index(15);
    const std::size_t k = std::min<std::size_t>(1 + rng.index(2), n - 1);
    std::vector<Vector> rows;
    for (std::size_t i = 0; i < n; ++i) rows.push_back(random_unit(rng, dim));
    const ThemeRouter r = identity_router(rows, k);
    const Vector u1 = random_unit(rng, dim);
    Vector u2 = u1;
    axpy(std::pow(10.0, rng.uniform(-4, 0)), random_unit(rng, dim), u2);
    const double len = norm(u2);
    for (double& v : u2) v /= len;
    const StabilityCheck c = verify_stability(r, u1, u2, k);
    if (c.applicable) {
      ++applicable;
      EXPECT_TRUE(c.same_support);
    }
  }
  EXPECT_GT(applicable, 100u);
}

TEST(DenseBaseline, Examples) {
  EXPECT_EQ(dense_baseline_scores(Matrix(3, 2), Vector{1, 2}), (Vector{0, 0, 0}));
  EXPECT_EQ(gate(dense_baseline_scores(Matrix(3, 2), Vector{1, 2}), 3).weights[1], 1.0 / 3.0);
  EXPECT_EQ(dense_baseline_scores(Matrix(2, 3, {0, 1, 0, 0, 0, 1}), Vector{4, 5, 6}), (Vector{5, 6}));
  EXPECT_EQ(dense_baseline_scores(Matrix(2, 2, {1, 2, 3, 4}), Vector{1, -1}), (Vector{-1, -1}));
  EXPECT_THROW(dense_baseline_scores(Matrix(2, 2), Vector{1, 2, 3}), ArgumentError);
}

TEST(RouteBackward, MatchesFiniteDifferencesWithPositiveMargin) {
  RngStream rng(10, 0);
  int checked = 0;
  while (checked < 20) {
    ThemeRouter r = make_theme_router(3, 4, 4, 4, 2, 0.99, rng);
    const Vector x = random_vector(rng, 3);
    Route base = route(r, x, true);
    if (stability_margin(base.scores, 2) < 1e-3) continue;
    const Vector dg = random_vector(rng, 4);
    MlpParams grad = zeros_like(r.projection);
    const Vector dx = route_backward(r, base, dg, grad);
    const auto loss_of = [&](const ThemeRouter& rr, const Vector& v) {
      // Fixed support: weights of the original support only.
      const Vector s = theme_scores(rr, v);
      Vector kept(s.size(), kMasked);
      for (std::size_t i : base.gate.support) kept[i] = s[i];
      return dot(dg, softmax(kept));
    };
    std::vector<TensorView> pv, gv;
    r.projection.collect("proj", pv);
    grad.collect("proj", gv);
    const auto check = testing::check_gradients(pv, gv, [&] { return loss_of(r, x); });
    EXPECT_LT(check.max_error, 1e-4) << check.worst;
    const Vector ndx = finite_diff_gradient([&](const Vector& v) { return loss_of(r, v); }, x, 1e-5);
    EXPECT_LT(testing::max_relative_error(dx, ndx), 1e-4);
    ++checked;
  }
}

TEST(RouteBackward, TopOneGivesNoGradient) {
  RngStream rng(11, 0);
  ThemeRouter r = make_theme_router(3, 4, 4, 4, 1, 0.99, rng);
  Route base = route(r, random_vector(rng, 3), true);
  MlpParams grad = zeros_like(r.projection);
  const Vector dx = route_backward(r, base, random_vector(rng, 4), grad);
  for (double v : dx) EXPECT_EQ(v, 0.0);
}

TEST(Diagnostics, CsvRow) {
  EXPECT_EQ(router_diagnostics_header(2), "batch,router,count_0,count_1,collapse");
  const std::vector<std::uint64_t> counts{3, 4};
  EXPECT_EQ(router_diagnostics_row(7, "item", counts, 0.5), "7,item,3,4,0.5");
}

}  // namespace
}  // namespace mos
