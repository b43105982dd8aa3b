#include <cmath>
#include <cstring>
#include <ctime>
#include <random>

#include <gtest/gtest.h>

#include "salutary/influence.hpp"
#include "test_util.hpp"

namespace salutary {
namespace {

using testing::finite_difference_gradient;
using testing::iota_set;
using testing::random_dataset;
using testing::random_vector;
using testing::relative_error;

// Rows 0..N-1 train, the next 150 validate, the rest form the pool.
struct Fixture {
  Dataset ds;
  TrainingSpec train;
  IndexSet val;
  IndexSet pool;
  FittedModel model;
  InfluenceContext ctx;

  Fixture(Index n_train, Index d, int classes, std::uint64_t seed, Index n_pool = 50,
          double lambda = 1e-2) {
    ds = random_dataset(n_train + 150 + n_pool, d, classes, seed);
    train.indices = iota_set(n_train);
    val = iota_set(150, n_train);
    pool = iota_set(n_pool, n_train + 150);
    TrainConfig cfg;
    cfg.lambda = lambda;
    model = salutary::train(ds, train.indices, {}, cfg);
    ctx = build_context(model, ds, train, val);
  }
};

TEST(ValidationGradient, MatchesFiniteDifferences) {
  const Fixture f(120, 4, 3, 1);
  const Vector g = validation_gradient(f.model, f.ds, f.val);
  FittedModel probe = f.model;
  const Vector fd = finite_difference_gradient(
      [&](const Vector& t) {
        probe.theta = t;
        return validation_loss(probe, f.ds, f.val);
      },
      f.model.theta);
  EXPECT_LE(relative_error(g, fd), 1e-6);
}

TEST(BuildContext, ZeroRightHandSide) {
  // Validation gradient of a single point at a zero-gradient configuration:
  // balanced symmetric data gives grad L_v = 0 at theta = 0.
  FeatureMatrix x(4, 1);
  x << 1, -1, 1, -1;
  const Dataset ds(x, {0, 0, 1, 1}, 2);
  FittedModel m;
  m.class_count = 2;
  m.feature_count = 1;
  m.theta = Vector::Zero(4);
  m.converged = true;
  const auto ctx = build_context(m, ds, {{0, 1, 2, 3}, {}}, {0, 1, 2, 3});
  EXPECT_TRUE(ctx.ihvp.isZero(0.0));
  EXPECT_EQ(ctx.diagnostics.iterations, 0);
}

TEST(BuildContext, AgreesWithDenseSolve) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const Fixture f(200, 6, 3, 10 + seed);
    ASSERT_TRUE(f.ctx.diagnostics.dense_relative_error.has_value());
    EXPECT_LE(*f.ctx.diagnostics.dense_relative_error, 1e-6);
    // Independent dense oracle.
    const Matrix h = dense_hessian(f.model.theta, f.ds, f.train.indices, f.model.config.lambda);
    const Vector s = h.ldlt().solve(f.ctx.val_gradient);
    EXPECT_LE(relative_error(f.ctx.ihvp, s), 1e-6);
    const Vector r = h * f.ctx.ihvp - f.ctx.val_gradient;
    EXPECT_LE(r.norm() / f.ctx.val_gradient.norm(), 1e-8);
  }
}

TEST(BuildContext, RejectsUnconvergedModel) {
  Fixture f(100, 3, 2, 3);
  f.model.converged = false;
  EXPECT_THROW(build_context(f.model, f.ds, f.train, f.val), NumericalError);
  CgConfig bad;
  bad.residual_tol = 0.0;
  f.model.converged = true;
  EXPECT_THROW(build_context(f.model, f.ds, f.train, f.val, bad), ConfigError);
}

TEST(BuildContext, CgBudgetExhaustionIsSolverError) {
  const Fixture f(200, 8, 4, 4, 10, 1e-4);
  CgConfig cg;
  cg.max_iterations = 1;
  try {
    build_context(f.model, f.ds, f.train, f.val, cg);
    FAIL() << "expected SolverError";
  } catch (const SolverError& e) {
    EXPECT_GT(e.best_residual(), 1e-8);
    EXPECT_EQ(e.iterations(), 1);
  }
}

TEST(InfluenceScore, MatchesExplicitFormula) {
  const Fixture f(150, 4, 3, 5);
  const Index n = f.ctx.training_size();
  for (Index i : f.pool) {
    for (int c = 0; c < 3; ++c) {
      // Oracle: (1/N) s . grad l(x, c), gradient by finite differences.
      const Dataset one = f.ds.subset({i}).with_labels({c});
      const Vector gl = finite_difference_gradient(
          [&](const Vector& t) { return loss(t, one, {0}, {}, 0.0); }, f.model.theta, 1e-6);
      const double want = f.ctx.ihvp.dot(gl) / static_cast<double>(n);
      EXPECT_NEAR(influence_score(f.ctx, f.ds.row(i), c, n), want,
                  1e-6 * (std::abs(want) + 1e-8));
    }
  }
}

TEST(InfluenceScore, LabelScoresSumIsZeroWeightedByProbabilities) {
  // p . (p.u - u) = 0, so the probability-weighted average score vanishes.
  const Fixture f(150, 5, 4, 6);
  for (Index i : f.pool) {
    const Vector s = label_scores(f.ctx, f.ds.row(i), f.ctx.training_size());
    const Vector p = predict_proba(f.model, f.ds.row(i));
    EXPECT_NEAR(p.dot(s), 0.0, 1e-15 + 1e-12 * s.cwiseAbs().maxCoeff());
  }
}

TEST(InfluenceScore, BilinearInGradientAndIhvp) {
  const Fixture f(100, 3, 3, 7);
  std::mt19937_64 rng(1);
  InfluenceContext a = f.ctx, b = f.ctx, sum = f.ctx;
  a.ihvp = random_vector(f.ctx.ihvp.size(), rng);
  b.ihvp = random_vector(f.ctx.ihvp.size(), rng);
  sum.ihvp = 2.0 * a.ihvp - 3.0 * b.ihvp;
  for (Index i : f.pool) {
    const Vector lhs = label_scores(sum, f.ds.row(i), 100);
    const Vector rhs = 2.0 * label_scores(a, f.ds.row(i), 100) - 3.0 * label_scores(b, f.ds.row(i), 100);
    EXPECT_LE((lhs - rhs).cwiseAbs().maxCoeff(), 1e-14 * (1.0 + rhs.cwiseAbs().maxCoeff()));
  }
  // Scaling with 1/N.
  const Index i = f.pool.front();
  EXPECT_DOUBLE_EQ(influence_score(f.ctx, f.ds.row(i), 1, 50),
                   2.0 * influence_score(f.ctx, f.ds.row(i), 1, 100));
  EXPECT_THROW(influence_score(f.ctx, f.ds.row(i), 3, 100), ConfigError);
  EXPECT_THROW(influence_score(f.ctx, f.ds.row(i), 0, 0), ConfigError);
}

TEST(InfluenceMatrix, EntriesEqualPointwiseScores) {
  const Fixture f(150, 4, 3, 8);
  const RowMatrix m = influence_matrix(f.ctx, f.ds, f.pool, 150);
  ASSERT_EQ(m.rows(), static_cast<Eigen::Index>(f.pool.size()));
  for (std::size_t k = 0; k < f.pool.size(); ++k) {
    for (int c = 0; c < 3; ++c) {
      const double pointwise = influence_score(f.ctx, f.ds.row(f.pool[k]), c, 150);
      EXPECT_EQ(std::memcmp(&pointwise, &m(static_cast<Eigen::Index>(k), c), sizeof(double)), 0);
    }
  }
}

TEST(InfluenceMatrix, LinearInPoolSize) {
  const Fixture f(100, 20, 5, 9, 20000);
  volatile double sink = 0.0;
  // CPU time, so other processes sharing the core do not count.
  auto time_once = [&](Index size) {
    const IndexSet pool(f.pool.begin(), f.pool.begin() + static_cast<std::ptrdiff_t>(size));
    const std::clock_t t0 = std::clock();
    const RowMatrix m = influence_matrix(f.ctx, f.ds, pool, 100);
    const std::clock_t t1 = std::clock();
    sink = sink + m(0, 0);
    return static_cast<double>(t1 - t0) / CLOCKS_PER_SEC;
  };
  // Quadratic cost would give a ratio near 4.
  double small = 1e300, large = 1e300;
  for (int rep = 0; rep < 7; ++rep) {
    small = std::min(small, time_once(10000));
    large = std::min(large, time_once(20000));
  }
  EXPECT_LE(large, 3.0 * small) << small << " s vs " << large << " s";
}

TEST(SalutaryLabel, PicksHighestScore) {
  // theta = 0 gives p = (1/2, 1/2), so scores are (p.u - u) / N; with
  // u = (0.3, -0.1), p.u = 0.1 and the scores are (-0.2, 0.2).
  FittedModel m;
  m.class_count = 2;
  m.feature_count = 1;
  m.theta = Vector::Zero(4);
  m.converged = true;
  InfluenceContext ctx;
  ctx.model = m;
  ctx.ihvp = Vector(4);
  ctx.ihvp << 0.0, 0.3, 0.0, -0.1;  // rows (w, b) per class, x = 0 keeps the bias only
  const Eigen::Matrix<double, 1, 1> x(0.0);
  const Vector s = label_scores(ctx, x, 1);
  EXPECT_NEAR(s[0], -0.2, 1e-15);
  EXPECT_NEAR(s[1], 0.2, 1e-15);
  const auto best = salutary_label(ctx, x, 1);
  EXPECT_EQ(best.label, 1);
  EXPECT_DOUBLE_EQ(best.score, s[1]);

  ctx.ihvp.setZero();
  EXPECT_EQ(salutary_label(ctx, x, 1).label, 0);  // ties resolve to the lowest label
}

TEST(SalutaryLabel, DominatesEveryOtherLabel) {
  const Fixture f(150, 4, 4, 11);
  for (Index i : f.pool) {
    const auto best = salutary_label(f.ctx, f.ds.row(i), 150);
    for (int c = 0; c < 4; ++c) {
      EXPECT_GE(best.score, influence_score(f.ctx, f.ds.row(i), c, 150));
    }
    EXPECT_GE(best.score, influence_score(f.ctx, f.ds.row(i), f.ds.label(i), 150));
  }
}

TEST(SalutaryLabel, AgreesWithBruteForceRetraining) {
  const Fixture f(120, 3, 3, 12, 10);
  TrainConfig cfg;
  cfg.lambda = f.model.config.lambda;
  int agree = 0;
  for (Index i : f.pool) {
    int best = -1;
    double best_decrease = -1e300;
    for (int c = 0; c < 3; ++c) {
      const double dec = add_one_in_actual(f.ds, f.train, f.val, Candidate{i, c}, cfg, f.model);
      if (dec > best_decrease) {
        best_decrease = dec;
        best = c;
      }
    }
    agree += salutary_label(f.ctx, f.ds.row(i), 120).label == best ? 1 : 0;
  }
  EXPECT_GE(agree, 8);
}

TEST(AddOneIn, EmptyCandidateIsZero) {
  const Fixture f(100, 3, 2, 13);
  EXPECT_NEAR(add_one_in_actual(f.ds, f.train, f.val, std::nullopt, f.model.config), 0.0, 1e-10);
}

TEST(AddOneIn, PredictedAndActualRankingsAgree) {
  const Fixture f(150, 4, 3, 14, 40);
  std::vector<double> predicted, actual;
  int sign_agree = 0;
  for (Index i : f.pool) {
    const int c = f.ds.label(i);
    predicted.push_back(influence_score(f.ctx, f.ds.row(i), c, 150));
    actual.push_back(add_one_in_actual(f.ds, f.train, f.val, Candidate{i, c}, f.model.config,
                                       f.model));
    sign_agree += (predicted.back() > 0) == (actual.back() > 0) ? 1 : 0;
  }
  EXPECT_GE(spearman(predicted, actual), 0.8);
  EXPECT_GE(sign_agree, 30);

  // The most beneficial predicted point does reduce validation loss.
  const auto top = std::max_element(predicted.begin(), predicted.end()) - predicted.begin();
  EXPECT_GT(actual[static_cast<std::size_t>(top)], 0.0);
}

TEST(Upweight, FirstOrderErrorShrinksWithEpsilon) {
  const Fixture f(150, 4, 3, 15, 5);
  const Index n = 150;
  for (Index i : f.pool) {
    const Candidate cand{i, f.ds.label(i)};
    const double score = influence_score(f.ctx, f.ds.row(i), cand.label, n);
    double previous = 1e300;
    for (double eps : {1e-2, 1e-3, 1e-4}) {
      const double actual = upweight_actual(f.ds, f.train, f.val, cand, eps, f.model.config, f.model);
      const double predicted = eps * static_cast<double>(n) * score;
      const double rel = std::abs(actual - predicted) / std::abs(predicted);
      EXPECT_LE(rel, previous * 1.1 + 1e-9) << "eps " << eps;
      previous = rel;
    }
    EXPECT_LE(previous, 0.05);
  }
}

TEST(Spearman, KnownValues) {
  EXPECT_DOUBLE_EQ(spearman({1, 2, 3, 4}, {10, 20, 30, 40}), 1.0);
  EXPECT_DOUBLE_EQ(spearman({1, 2, 3, 4}, {4, 3, 2, 1}), -1.0);
  EXPECT_NEAR(spearman({1, 2, 3}, {1, 3, 2}), 0.5, 1e-15);
  // Ties share ranks: a -> (1.5, 1.5, 3), b -> (1, 2, 3); Pearson by hand = sqrt(3)/2.
  EXPECT_NEAR(spearman({5, 5, 7}, {1, 2, 3}), std::sqrt(3.0) / 2.0, 1e-15);
  EXPECT_EQ(fractional_ranks({3, 1, 3, 2}), (std::vector<double>{3.5, 1, 3.5, 2}));
}

TEST(Spearman, Errors) {
  EXPECT_THROW(spearman({1, 2}, {1, 2, 3}), ConfigError);
  EXPECT_THROW(spearman({1}, {1}), ConfigError);
  EXPECT_THROW(spearman({2, 2, 2}, {1, 2, 3}), NumericalError);
}

TEST(Spearman, InvariantUnderMonotoneTransforms) {
  std::mt19937_64 rng(3);
  const Vector a = random_vector(50, rng), b = random_vector(50, rng);
  std::vector<double> va(a.data(), a.data() + 50), vb(b.data(), b.data() + 50);
  std::vector<double> ta = va;
  for (double& v : ta) v = std::exp(3.0 * v) + 7.0;
  EXPECT_DOUBLE_EQ(spearman(va, vb), spearman(ta, vb));
  EXPECT_DOUBLE_EQ(spearman(va, vb), spearman(vb, va));
}

TEST(InfluenceScore, RankingInvariantUnderPositiveScaling) {
  const Fixture f(100, 3, 3, 16);
  InfluenceContext scaled = f.ctx;
  scaled.ihvp *= 4.0;
  const RowMatrix a = influence_matrix(f.ctx, f.ds, f.pool, 100);
  const RowMatrix b = influence_matrix(scaled, f.ds, f.pool, 100);
  for (Eigen::Index k = 0; k < a.rows(); ++k) {
    EXPECT_EQ(argmax(Vector(a.row(k).transpose())), argmax(Vector(b.row(k).transpose())));
  }
  std::vector<double> ca, cb;
  for (Eigen::Index k = 0; k < a.rows(); ++k) {
    ca.push_back(a(k, 0));
    cb.push_back(b(k, 0));
  }
  EXPECT_DOUBLE_EQ(spearman(ca, cb), 1.0);
}

}  // namespace
}  // namespace salutary
