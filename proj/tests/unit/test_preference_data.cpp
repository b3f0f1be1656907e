#include <cmath>
#include <map>
#include <tuple>

#include <gtest/gtest.h>

#include "sharedrep/preference_data.hpp"

using namespace sharedrep;

namespace {

World zero_reward_world() {
  WorldConfig c;
  World w = build_world(c);
  w.truth.theta_star.setZero();
  return w;
}

}  // namespace

TEST(Sigmoid, Examples) {
  EXPECT_EQ(bt_preference_prob(1.3, 1.3), 0.5);
  EXPECT_NEAR(bt_preference_prob(std::log(3.0), 0.0), 0.75, 1e-15);
  const double p = bt_preference_prob(50.0, 0.0);
  EXPECT_GE(p, 1.0 - 1e-20);
  EXPECT_TRUE(std::isfinite(p));
  EXPECT_TRUE(std::isfinite(log_sigmoid(-1000.0)));
  EXPECT_NEAR(sigmoid(-800.0), 0.0, 1e-300);
}

TEST(SampleDataset, FairCoinWhenRewardsVanish) {
  const World w = zero_reward_world();
  const auto data = sample_dataset(w, 100000, {0.5, 0.5}, {}, 11);
  double mean = 0.0;
  for (const auto& r : data.records()) mean += r.label;
  mean /= static_cast<double>(data.size());
  EXPECT_GE(mean, 0.494);
  EXPECT_LE(mean, 0.506);
}

TEST(SampleDataset, MinorityCountInBinomialBand) {
  const World w = build_world(WorldConfig{});
  const auto data = sample_dataset(w, 10000, {0.99, 0.01}, {}, 3);
  EXPECT_GE(data.n_group(1), 40u);
  EXPECT_LE(data.n_group(1), 160u);
}

TEST(SampleDataset, FixedQuotaIsExact) {
  const World w = build_world(WorldConfig{});
  SamplingOptions o;
  o.groups = GroupAssignment::fixed_quota;
  const auto data = sample_dataset(w, 1000, {0.9, 0.1}, o, 3);
  EXPECT_EQ(data.n_group(0), 900u);
  EXPECT_EQ(data.n_group(1), 100u);
}

TEST(SampleDataset, DeterministicAndWellFormed) {
  const World w = build_world(WorldConfig{});
  const auto a = sample_dataset(w, 500, {0.3, 0.7}, {}, 5);
  const auto b = sample_dataset(w, 500, {0.3, 0.7}, {}, 5);
  EXPECT_EQ(a.records(), b.records());
  for (const auto& r : a.records()) {
    EXPECT_NE(r.first, r.second);
    EXPECT_GE(r.prompt, 0);
    EXPECT_LT(r.prompt, w.num_prompts());
  }
  const auto c = sample_dataset(w, 500, {0.3, 0.7}, {}, 6);
  EXPECT_NE(a.records(), c.records());
}

TEST(SampleDataset, RefPolicyPairsAreDistinct) {
  const World w = build_world(WorldConfig{});
  SamplingOptions o;
  o.pairs = PairSampling::from_ref_policy;
  o.prompts = PromptSampling::uniform;
  for (const auto& r : sample_dataset(w, 300, {0.5, 0.5}, o, 1).records()) EXPECT_NE(r.first, r.second);
}

TEST(SampleDataset, LabelFrequencyMatchesBradleyTerry) {
  // One prompt, two responses: every record is the same comparison up to order.
  WorldConfig c;
  c.num_prompts = 1;
  c.num_responses = 2;
  c.num_groups = 1;
  c.group_proportions = {1.0};
  c.b_max = 2.0;
  const World w = build_world(c);
  const auto data = sample_dataset(w, 100000, {1.0}, {}, 8);
  const auto& th = w.truth.theta_star.col(0);
  const double p01 = bt_preference_prob(reward_of(th, w.features, 0, 0), reward_of(th, w.features, 0, 1));
  double hits = 0.0, count = 0.0;
  for (const auto& r : data.records()) {
    if (r.first == 0) {
      hits += r.label;
      count += 1.0;
    }
  }
  EXPECT_NEAR(hits / count, p01, 0.01);
}

TEST(SampleDataset, RejectsBadInputs) {
  const World w = build_world(WorldConfig{});
  EXPECT_THROW(sample_dataset(w, 0, {0.5, 0.5}, {}, 0), std::invalid_argument);
  EXPECT_THROW(sample_dataset(w, 10, {0.5, 0.6}, {}, 0), std::invalid_argument);
  EXPECT_THROW(sample_dataset(w, 10, {1.0}, {}, 0), std::invalid_argument);
}

TEST(Covariance, RankOneExample) {
  Eigen::MatrixXd t = Eigen::MatrixXd::Zero(2, 3);
  t(0, 0) = 1.0;
  const FeatureMap phi(t, 1, 2, 1.0);
  const PreferenceDataset data({{0, 0, 1, 1, 0}}, 1, phi);
  const auto s = compute_covariances(data, 0.5);
  Eigen::MatrixXd expected = Eigen::MatrixXd::Zero(3, 3);
  expected(0, 0) = 1.0;
  EXPECT_EQ(s.sigma, expected);
  EXPECT_EQ(s.lambda, 0.5);
}

TEST(Covariance, MatchesLoopOracleAndPooledIdentity) {
  const World w = build_world(WorldConfig{});
  const auto data = sample_dataset(w, 700, {0.2, 0.8}, {}, 2);
  const auto s = compute_covariances(data, 0.1);
  const Eigen::Index d = w.dim();
  Eigen::MatrixXd oracle = Eigen::MatrixXd::Zero(d, d);
  std::vector<Eigen::MatrixXd> per(2, Eigen::MatrixXd::Zero(d, d));
  for (const auto& r : data.records()) {
    for (Eigen::Index i = 0; i < d; ++i) {
      for (Eigen::Index j = 0; j < d; ++j) {
        const double di = w.features(r.prompt, r.first)(i) - w.features(r.prompt, r.second)(i);
        const double dj = w.features(r.prompt, r.first)(j) - w.features(r.prompt, r.second)(j);
        oracle(i, j) += di * dj;
        per[static_cast<std::size_t>(r.group)](i, j) += di * dj;
      }
    }
  }
  oracle /= static_cast<double>(data.size());
  EXPECT_LE((s.sigma - oracle).cwiseAbs().maxCoeff(), 1e-10);
  Eigen::MatrixXd mix = Eigen::MatrixXd::Zero(d, d);
  for (Eigen::Index u = 0; u < 2; ++u) {
    const auto& su = s.sigma_per_group[static_cast<std::size_t>(u)];
    EXPECT_LE((su - per[static_cast<std::size_t>(u)] / double(data.n_group(u))).cwiseAbs().maxCoeff(), 1e-10);
    mix += double(data.n_group(u)) / double(data.size()) * su;
  }
  EXPECT_LE((mix - s.sigma).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(Covariance, DuplicatedDatasetIsUnchanged) {
  const World w = build_world(WorldConfig{});
  const auto data = sample_dataset(w, 300, {0.5, 0.5}, {}, 2);
  auto recs = data.records();
  recs.insert(recs.end(), data.records().begin(), data.records().end());
  const PreferenceDataset twice(recs, 2, w.features);
  EXPECT_LE((compute_covariances(twice, 1.0).sigma - compute_covariances(data, 1.0).sigma).norm(), 1e-12);
}

TEST(Covariance, EmptyGroupIsFlagged) {
  const World w = build_world(WorldConfig{});
  const auto data = sample_dataset(w, 50, {1.0, 0.0}, {}, 2);
  EXPECT_TRUE(data.group_empty(1));
  const auto s = compute_covariances(data, 1.0);
  EXPECT_TRUE(s.empty_group[1]);
  EXPECT_TRUE(s.has_empty_group());
  EXPECT_EQ(s.sigma_per_group[1].norm(), 0.0);
}

TEST(WeightedNorm, Examples) {
  Eigen::VectorXd v(3);
  v << 1.0, -2.0, 0.5;
  EXPECT_NEAR(weighted_norm(v, Eigen::MatrixXd::Zero(3, 3), 1.0), v.norm(), 1e-15);
  EXPECT_NEAR(weighted_inv_norm(v, Eigen::MatrixXd::Zero(3, 3), 1.0), v.norm(), 1e-15);
  const Eigen::MatrixXd m = Eigen::MatrixXd::Constant(1, 1, 3.0);
  const Eigen::VectorXd two = Eigen::VectorXd::Constant(1, 2.0);
  EXPECT_NEAR(weighted_norm(two, m, 1.0), 4.0, 1e-15);
  EXPECT_NEAR(weighted_inv_norm(two, m, 1.0), 1.0, 1e-15);
}

TEST(WeightedNorm, CauchySchwarzAndLambdaMonotone) {
  CounterRng rng(10, Stream::data);
  for (int t = 0; t < 50; ++t) {
    const Eigen::MatrixXd g = Eigen::MatrixXd::NullaryExpr(4, 6, [&] { return rng.normal(); });
    const Eigen::MatrixXd m = g * g.transpose() / 6.0;
    const Eigen::VectorXd v = rng.normal_vector(4);
    EXPECT_GE(weighted_norm(v, m, 0.1) * weighted_inv_norm(v, m, 0.1), v.squaredNorm() - 1e-9);
    double prev = std::numeric_limits<double>::infinity();
    for (double lam : {1e-3, 1e-2, 0.1, 1.0, 10.0}) {
      const double cur = weighted_inv_norm(v, m, lam);
      EXPECT_LE(cur, prev + 1e-12);
      prev = cur;
    }
  }
}

TEST(ConfidenceMetric, SolveAndWhitenAgree) {
  CounterRng rng(12, Stream::data);
  const Eigen::MatrixXd g = Eigen::MatrixXd::NullaryExpr(5, 5, [&] { return rng.normal(); });
  const ConfidenceMetric a(g * g.transpose(), 0.3);
  const Eigen::VectorXd v = rng.normal_vector(5);
  EXPECT_NEAR(a.inv_norm(v), std::sqrt(v.dot(a.solve(v))), 1e-12);
  EXPECT_LE((a.matrix() * a.solve(v) - v).norm(), 1e-10);
  EXPECT_THROW(ConfidenceMetric(Eigen::MatrixXd::Zero(2, 2), 0.0), std::invalid_argument);
}

TEST(PreferenceDataset, RejectsMalformedRecords) {
  const World w = build_world(WorldConfig{});
  EXPECT_THROW(PreferenceDataset({{0, 1, 1, 0, 0}}, 2, w.features), std::invalid_argument);
  EXPECT_THROW(PreferenceDataset({{0, 1, 2, 0, 5}}, 2, w.features), std::invalid_argument);
  EXPECT_THROW(PreferenceDataset({{0, 1, 2, 3, 0}}, 2, w.features), std::invalid_argument);
}
