#include <cmath>
#include <limits>
#include <stdexcept>

#include <gtest/gtest.h>

#include "sharedrep/policy_table.hpp"
#include "sharedrep/projections.hpp"
#include "sharedrep/rng.hpp"
#include "sharedrep/tabular_world.hpp"

using namespace sharedrep;

namespace {

FeatureMap scalar_map(std::initializer_list<double> values) {
  Eigen::MatrixXd t(static_cast<Eigen::Index>(values.size()), 1);
  Eigen::Index i = 0;
  for (double v : values) t(i++, 0) = v;
  return FeatureMap(t, 1, t.rows(), t.cwiseAbs().maxCoeff());
}

}  // namespace

TEST(Rng, SameKeyGivesSameSequence) {
  CounterRng a(42, Stream::data, 3);
  CounterRng b(42, Stream::data, 3);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(a(), b());
}

TEST(Rng, StreamsDiffer) {
  CounterRng a(42, Stream::data);
  CounterRng b(42, Stream::world);
  EXPECT_NE(a(), b());
}

TEST(Rng, UniformMomentsAndRange) {
  CounterRng rng(1, Stream::data);
  double sum = 0.0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double u = rng.uniform();
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
    sum += u;
  }
  EXPECT_NEAR(sum / n, 0.5, 0.005);
}

TEST(Rng, NormalMoments) {
  CounterRng rng(2, Stream::data);
  double s1 = 0.0, s2 = 0.0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double z = rng.normal();
    s1 += z;
    s2 += z * z;
  }
  EXPECT_NEAR(s1 / n, 0.0, 0.01);
  EXPECT_NEAR(s2 / n, 1.0, 0.02);
}

TEST(Rng, UniformSimplexIsOnSimplex) {
  CounterRng rng(3, Stream::world);
  for (int i = 0; i < 100; ++i) EXPECT_TRUE(on_simplex(uniform_simplex(rng, 4), 1e-12));
}

TEST(PolicyTable, UniformAndDeterministicAreStochastic) {
  EXPECT_TRUE(PolicyTable::uniform(3, 4).is_row_stochastic());
  Eigen::VectorXi c(2);
  c << 1, 0;
  const auto p = PolicyTable::deterministic(c, 3);
  EXPECT_TRUE(p.is_row_stochastic());
  EXPECT_EQ(p(0, 1), 1.0);
  EXPECT_EQ(p(1, 0), 1.0);
  EXPECT_FALSE(p.strictly_positive());
}

TEST(PolicyTable, ValidateRejectsBadRows) {
  Eigen::MatrixXd m(1, 2);
  m << 0.7, 0.7;
  EXPECT_THROW(PolicyTable(m).validate("p"), std::invalid_argument);
}

TEST(WorldConfig, ValidateNamesOffendingField) {
  WorldConfig c;
  c.shared_dim = 20;
  try {
    c.validate();
    FAIL();
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("shared_dim"), std::string::npos);
  }
  c = WorldConfig{};
  c.group_proportions = {0.5, 0.6};
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = WorldConfig{};
  c.b_max = -1.0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(BuildWorld, SingleGroupFullRank) {
  WorldConfig c;
  c.num_groups = 1;
  c.group_proportions = {1.0};
  c.shared_dim = c.feature_dim;
  const World w = build_world(c);
  EXPECT_EQ(w.truth.theta_star.cols(), 1);
  EXPECT_NEAR(w.truth.w_star.col(0).sum(), 1.0, 1e-12);
}

TEST(BuildWorld, AssumptionsHoldAsPredicates) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    WorldConfig c;
    c.rng_seed = seed;
    c.b_max = 2.5;
    const World w = build_world(c);
    EXPECT_NO_THROW(w.validate());
    EXPECT_LE(w.features.table().rowwise().norm().maxCoeff(), c.l_max + 1e-12);
    EXPECT_NEAR(w.features.table().rowwise().norm().maxCoeff(), c.l_max, 1e-12);
    for (Eigen::Index k = 0; k < w.truth.b_star.cols(); ++k) {
      EXPECT_NEAR(w.truth.b_star.col(k).norm(), c.b_max, 1e-12);
    }
    for (Eigen::Index u = 0; u < w.num_groups(); ++u) EXPECT_TRUE(on_simplex(w.truth.w_star.col(u), 1e-12));
    EXPECT_GT(w.prompts.rho_min, 0.0);
    EXPECT_EQ(w.prompts.rho_min, w.prompts.rho.minCoeff());
    EXPECT_NEAR(w.prompts.rho.sum(), 1.0, 1e-12);
    EXPECT_TRUE(w.truth.ref_policy.is_row_stochastic());
  }
}

TEST(BuildWorld, DeterministicInSeed) {
  WorldConfig c;
  c.rng_seed = 7;
  const World a = build_world(c);
  const World b = build_world(c);
  EXPECT_EQ(a.features.table(), b.features.table());
  EXPECT_EQ(a.truth.theta_star, b.truth.theta_star);
  EXPECT_EQ(a.prompts.rho, b.prompts.rho);
  c.rng_seed = 8;
  EXPECT_NE(build_world(c).features.table(), a.features.table());
}

TEST(RewardOf, ZeroThetaGivesZero) {
  const World w = build_world(WorldConfig{});
  const Eigen::VectorXd zero = Eigen::VectorXd::Zero(w.dim());
  for (Eigen::Index x = 0; x < w.num_prompts(); ++x) {
    for (Eigen::Index y = 0; y < w.num_responses(); ++y) EXPECT_EQ(reward_of(zero, w.features, x, y), 0.0);
  }
}

TEST(RewardOf, AlignedThetaGivesFeatureNorm) {
  const World w = build_world(WorldConfig{});
  const Eigen::VectorXd f = w.features(2, 3).transpose();
  EXPECT_NEAR(reward_of(f / f.norm(), w.features, 2, 3), f.norm(), 1e-12);
}

TEST(RewardOf, MatchesLoopOracleAndIsBilinear) {
  const World w = build_world(WorldConfig{});
  CounterRng rng(9, Stream::data);
  const Eigen::VectorXd t1 = rng.normal_vector(w.dim());
  const Eigen::VectorXd t2 = rng.normal_vector(w.dim());
  const Eigen::MatrixXd table = reward_table(t1, w.features);
  for (Eigen::Index x = 0; x < w.num_prompts(); ++x) {
    for (Eigen::Index y = 0; y < w.num_responses(); ++y) {
      double s = 0.0;
      for (Eigen::Index i = 0; i < w.dim(); ++i) s += w.features(x, y)(i) * t1(i);
      EXPECT_NEAR(reward_of(t1, w.features, x, y), s, 1e-12);
      EXPECT_NEAR(table(x, y), s, 1e-12);
      const double lhs = reward_of(2.0 * t1 - 0.5 * t2, w.features, x, y);
      const double rhs = 2.0 * reward_of(t1, w.features, x, y) - 0.5 * reward_of(t2, w.features, x, y);
      EXPECT_NEAR(lhs, rhs, 1e-10);
    }
  }
}

TEST(RewardOf, DimensionMismatchThrows) {
  const World w = build_world(WorldConfig{});
  EXPECT_THROW(reward_of(Eigen::VectorXd::Zero(3), w.features, 0, 0), std::invalid_argument);
}

TEST(RewardGapXi, IdenticalFeaturesGiveZero) {
  const FeatureMap phi = scalar_map({1.0, 1.0, 1.0});
  EXPECT_EQ(reward_gap_xi(phi, Eigen::MatrixXd::Ones(1, 1), Eigen::VectorXd::Ones(1)), 0.0);
}

TEST(RewardGapXi, SinglePairExample) {
  const FeatureMap phi = scalar_map({1.0, 3.0});
  Eigen::MatrixXd b(1, 1);
  b << 2.0;
  EXPECT_DOUBLE_EQ(reward_gap_xi(phi, b, Eigen::VectorXd::Ones(1)), 4.0);
}

TEST(RewardGapXi, InvariantToPerPromptShift) {
  const World w = build_world(WorldConfig{});
  Eigen::MatrixXd shifted = w.features.table();
  CounterRng rng(4, Stream::data);
  for (Eigen::Index x = 0; x < w.num_prompts(); ++x) {
    const Eigen::RowVectorXd c = 0.01 * rng.normal_vector(w.dim()).transpose();
    for (Eigen::Index y = 0; y < w.num_responses(); ++y) shifted.row(x * w.num_responses() + y) += c;
  }
  const FeatureMap phi2(shifted, w.num_prompts(), w.num_responses(), shifted.rowwise().norm().maxCoeff());
  const Eigen::VectorXd wu = w.truth.w_star.col(0);
  EXPECT_NEAR(reward_gap_xi(w.features, w.truth.b_star, wu), reward_gap_xi(phi2, w.truth.b_star, wu), 1e-12);
}

TEST(Projections, SimplexExamples) {
  Eigen::VectorXd v(2);
  v << 2.0, 0.0;
  EXPECT_TRUE(project_simplex(v).isApprox(Eigen::Vector2d(1.0, 0.0)));
  Eigen::VectorXd v3(3);
  v3 << 0.5, 0.5, -1.0;
  EXPECT_LE((project_simplex(v3) - Eigen::Vector3d(0.5, 0.5, 0.0)).norm(), 1e-12);
  Eigen::VectorXd on(3);
  on << 0.2, 0.3, 0.5;
  EXPECT_LE((project_simplex(on) - on).norm(), 1e-12);
}

TEST(Projections, SimplexMatchesBruteForceOracle) {
  CounterRng rng(5, Stream::data);
  for (int trial = 0; trial < 50; ++trial) {
    const Eigen::VectorXd v = rng.normal_vector(3);
    const Eigen::VectorXd p = project_simplex(v);
    ASSERT_TRUE(on_simplex(p, 1e-12));
    double best = std::numeric_limits<double>::infinity();
    const int steps = 200;
    for (int i = 0; i <= steps; ++i) {
      for (int j = 0; i + j <= steps; ++j) {
        const Eigen::Vector3d q(double(i) / steps, double(j) / steps, double(steps - i - j) / steps);
        best = std::min(best, (q - v).norm());
      }
    }
    EXPECT_LE((p - v).norm(), best + 1e-12);
  }
}

TEST(Projections, ColumnBall) {
  Eigen::MatrixXd b(2, 2);
  b << 0.3, 4.0, 0.4, 0.0;
  const Eigen::MatrixXd p = project_column_ball(b, 2.0);
  EXPECT_EQ(p.col(0), b.col(0));
  EXPECT_NEAR(p.col(1).norm(), 2.0, 1e-12);
  EXPECT_NEAR(p.col(1).normalized().dot(b.col(1).normalized()), 1.0, 1e-12);
  EXPECT_EQ(project_column_ball(p, 2.0), p);
}
