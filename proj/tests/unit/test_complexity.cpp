#include <cmath>
#include <limits>
#include <numbers>

#include <gtest/gtest.h>

#include "sharedrep/complexity.hpp"

using namespace sharedrep;

namespace {

Eigen::VectorXd random_dist(CounterRng& rng, Eigen::Index k) { return uniform_simplex(rng, k); }

// Root of w e^w = x on (-inf, -1] by plain bisection.
double w_minus1_bisection(double x) {
  double lo = -800.0, hi = -1.0;
  for (int i = 0; i < 400; ++i) {
    const double mid = 0.5 * (lo + hi);
    (mid * std::exp(mid) > x ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

PromptDistribution uniform_rho(Eigen::Index nx) {
  return PromptDistribution::from(Eigen::VectorXd::Constant(nx, 1.0 / static_cast<double>(nx)));
}

}  // namespace

TEST(BinaryEntropy, ExamplesAndUpperBound) {
  EXPECT_NEAR(binary_entropy(0.5), std::numbers::ln2, 1e-15);
  EXPECT_EQ(binary_entropy(0.0), 0.0);
  EXPECT_EQ(binary_entropy(1.0), 0.0);
  EXPECT_THROW(binary_entropy(1.5), std::domain_error);
  for (double p = 1e-6; p < 0.9995; p += 0.001) EXPECT_LT(binary_entropy(p), p * (1.0 - std::log(p)));
}

TEST(Divergences, Examples) {
  const Eigen::Vector2d p(1.0, 0.0);
  const Eigen::Vector2d q(0.5, 0.5);
  EXPECT_NEAR(tv_distance(p, q), 0.5, 1e-15);
  EXPECT_NEAR(kl_divergence(p, q), std::numbers::ln2, 1e-15);
  EXPECT_EQ(tv_distance(q, q), 0.0);
  EXPECT_EQ(kl_divergence(q, q), 0.0);
  EXPECT_TRUE(std::isinf(kl_divergence(q, p)));
  EXPECT_NEAR(fannes_bound(p, q, 2), 1.5 * std::numbers::ln2, 1e-15);
  EXPECT_EQ(fannes_bound(q, q, 2), 0.0);
}

TEST(Divergences, PinskerAndFannesOnRandomPairs) {
  CounterRng rng(1, Stream::data);
  for (int i = 0; i < 1000; ++i) {
    const Eigen::Index k = 2 + static_cast<Eigen::Index>(rng.below(63));
    const Eigen::VectorXd p = random_dist(rng, k);
    const Eigen::VectorXd q = random_dist(rng, k);
    EXPECT_LE(tv_distance(p, q), std::sqrt(kl_divergence(p, q) / 2.0) + 1e-12);
    EXPECT_LE(std::abs(entropy(p) - entropy(q)), fannes_bound(p, q, k) + 1e-12);
  }
}

TEST(FunctionF, BreakpointAndExamples) {
  const Eigen::Index ny = 6;
  const double c = entropy_slack_constant(ny);
  const double x = kFBreakpoint;
  const double branch1 = c * std::sqrt(2.0 * x);
  const double branch2 = -c * std::sqrt(2.0 * x) * std::log(std::sqrt(2.0 * x));
  EXPECT_LE(std::abs(branch1 - branch2), 1e-12);
  EXPECT_NEAR(f_of(x, ny), c / std::numbers::e, 1e-14);
  EXPECT_NEAR(f_of(std::nextafter(x, 0.0), ny), c / std::numbers::e, 1e-12);
  EXPECT_EQ(f_of(0.0, ny), 0.0);
  EXPECT_NEAR(f_of(0.5, ny), c, 1e-15);
  EXPECT_THROW(f_of(-1.0, ny), std::domain_error);
  double prev = 0.0;
  for (double t = 1e-12; t < 10.0; t *= 1.5) {
    const double v = f_of(t, ny);
    EXPECT_GT(v, 0.0);
    EXPECT_GT(v, prev);
    prev = v;
  }
}

TEST(LambertW, BranchPointAndResiduals) {
  EXPECT_EQ(lambert_w_minus1(-1.0 / std::numbers::e), -1.0);
  const double w = lambert_w_minus1(-0.1);
  EXPECT_LE(std::abs(w * std::exp(w) + 0.1), 1e-12 * 0.1);
  EXPECT_NEAR(w, w_minus1_bisection(-0.1), 1e-10);
  for (int i = 0; i <= 100; ++i) {
    const double x = -std::exp(-1.0 - i * 6.9);  // log-spaced down to about -1e-300
    const double v = lambert_w_minus1(x);
    EXPECT_LE(v, -1.0);
    EXPECT_LE(std::abs(v * std::exp(v) - x), 1e-12 * std::abs(x));
  }
  EXPECT_THROW(lambert_w_minus1(0.0), std::domain_error);
  EXPECT_THROW(lambert_w_minus1(-0.5), std::domain_error);
}

TEST(FInverse, RoundTripAcrossRegimes) {
  for (Eigen::Index ny : {2, 6, 50}) {
    const double thr = regime_threshold(ny);
    for (int i = 0; i < 50; ++i) {
      const double delta = thr * std::pow(10.0, -4.0 + 5.0 * i / 49.0);
      const double x = f_inverse_half_delta(delta, ny);
      EXPECT_NEAR(f_of(x, ny), delta / 2.0, 1e-9) << "delta=" << delta;
    }
  }
}

TEST(FInverse, BoundaryAndLimit) {
  const Eigen::Index ny = 6;
  const double c = entropy_slack_constant(ny);
  EXPECT_NEAR(f_inverse_half_delta(2.0 / std::numbers::e * c, ny), kFBreakpoint, 1e-15);
  EXPECT_EQ(regime_of(2.0 / std::numbers::e * c, ny), GapRegime::small_gap);
  EXPECT_LT(f_inverse_half_delta(1e-12, ny), 1e-20);
  EXPECT_GT(f_inverse_half_delta(1e-12, ny), 0.0);
  EXPECT_THROW(f_inverse_half_delta(0.0, ny), std::domain_error);
  const double big = 3.0 * c;
  EXPECT_NEAR(f_inverse_half_delta(big, ny), big * big / (8.0 * c * c), 1e-15);
}

TEST(GapProfile, TwoGroupExample) {
  std::vector<PolicyTable> tables = {PolicyTable::uniform(1, 4), PolicyTable::uniform(1, 2)};
  const auto g = gap_profile(tables, uniform_rho(1));
  EXPECT_EQ(g.u_star, 0);
  EXPECT_NEAR(g.delta_min, std::numbers::ln2, 1e-15);
  EXPECT_EQ(g.delta_u(0), 0.0);
}

TEST(GapProfile, PermutationAndSingleGroup) {
  const World w = [] {
    WorldConfig c;
    c.num_groups = 3;
    c.group_proportions = {0.2, 0.3, 0.5};
    c.b_max = 3.0;
    return build_world(c);
  }();
  std::vector<PolicyTable> gibbs;
  for (const auto& r : reward_tables(w.truth.theta_star, w.features)) gibbs.push_back(gibbs_policy(r, w.truth.ref_policy, 1.0));
  const auto g = gap_profile(gibbs, w.prompts);
  const std::vector<PolicyTable> perm = {gibbs[2], gibbs[0], gibbs[1]};
  const auto gp = gap_profile(perm, w.prompts);
  EXPECT_NEAR(g.delta_min, gp.delta_min, 1e-15);
  EXPECT_NEAR(g.delta_u(2), gp.delta_u(0), 1e-15);
  EXPECT_NEAR(g.delta_u(0), gp.delta_u(1), 1e-15);
  double m = std::numeric_limits<double>::infinity();
  for (Eigen::Index u = 0; u < 3; ++u) {
    EXPECT_GE(g.delta_u(u), 0.0);
    if (u != g.u_star) m = std::min(m, g.delta_u(u));
  }
  EXPECT_NEAR(g.delta_min, m, 1e-12);
  EXPECT_TRUE(std::isinf(gap_profile({gibbs[0]}, w.prompts).delta_min));
  EXPECT_THROW(gap_profile({gibbs[0], gibbs[0]}, w.prompts), std::invalid_argument);
}

TEST(Psi, ScalingZeroFeaturesAndHandValue) {
  // theta* = 0 keeps the Gibbs policy fixed as beta changes.
  World w = build_world(WorldConfig{});
  w.truth.theta_star.setZero();
  const auto spec = ConfidenceSpec::make(w.dim(), 0.1, 0.1, 1.0, 1.0);
  const ConfidenceMetric a(Eigen::MatrixXd::Identity(w.dim(), w.dim()), 0.1);
  EXPECT_NEAR(psi_u(w, a, spec, 2.0, 0) * 4.0, psi_u(w, a, spec, 1.0, 0), 1e-12 * psi_u(w, a, spec, 1.0, 0));

  World zero = w;
  zero.features = FeatureMap(Eigen::MatrixXd::Zero(w.features.table().rows(), w.dim()), w.num_prompts(),
                             w.num_responses(), 1.0);
  EXPECT_EQ(psi_u(zero, a, spec, 1.0, 0), 0.0);

  // d = 1, one prompt, features (0.5, 1), theta* = 0 so the Gibbs policy is uniform.
  WorldConfig c;
  c.num_prompts = 1;
  c.num_responses = 2;
  c.feature_dim = 1;
  c.shared_dim = 1;
  World s = build_world(c);
  Eigen::MatrixXd t(2, 1);
  t << 0.5, 1.0;
  s.features = FeatureMap(t, 1, 2, 1.0);
  s.truth.theta_star.setZero();
  const ConfidenceMetric a1(Eigen::MatrixXd::Constant(1, 1, 3.0), 1.0);
  const auto spec1 = ConfidenceSpec::make(1, 1.0, 0.1, 1.0, 1.0);
  const double e_norm = 0.5 * (0.5 / 2.0) + 0.5 * (1.0 / 2.0);
  EXPECT_NEAR(psi_u(s, a1, spec1, 0.5, 0), (spec1.c_delta + 1.0) * e_norm * e_norm / 0.25, 1e-10);
}

TEST(SampleSize, ScalingLaws) {
  ComplexityInputs in;
  in.y_size = 6;
  in.spec = ConfidenceSpec::make(16, 0.01, 0.1, 1.0, 3.0);
  in.psi_u = Eigen::Vector2d(3.0, 7.0);
  const double thr = regime_threshold(6);
  GapProfile g;
  g.delta_min = 4.0 * thr;
  GapProfile h = g;
  h.delta_min = 2.0 * thr;
  const double r = n_maxmin(in, h) / n_maxmin(in, g);
  EXPECT_NEAR(r, 16.0, 16.0 * 1e-9);
  const double c = entropy_slack_constant(6);
  EXPECT_NEAR(n_maxmin(in, g), 7.0 * std::pow(c / g.delta_min, 4), 1e-9 * n_maxmin(in, g));

  const double e1 = n_sr_estimation_term(in, 0.3, 0.1);
  const double e2 = n_sr_estimation_term(in, 0.3, 0.05);
  EXPECT_NEAR(e2 / e1, 4.0, 4.0 * 1e-9);
  EXPECT_EQ(n_sr(in, g, 0.3, 0.1), std::max(n_maxmin(in, g), e1));

  ComplexityInputs doubled = in;
  doubled.constant_multiplier = 2.0;
  EXPECT_NEAR(n_maxmin(doubled, g), 2.0 * n_maxmin(in, g), 1e-9 * n_maxmin(in, g));

  GapProfile small;
  small.delta_min = 0.1;
  EXPECT_EQ(in.regime(0.1), GapRegime::small_gap);
  const double w = lambert_w_minus1(-0.1 / (2.0 * c));
  EXPECT_NEAR(n_maxmin(in, small), 7.0 * std::exp(-4.0 * w), 1e-9 * n_maxmin(in, small));

  GapProfile zero;
  zero.delta_min = 0.0;
  EXPECT_THROW(n_maxmin(in, zero), std::domain_error);
  EXPECT_THROW(n_sr_estimation_term(in, 0.3, 0.0), std::domain_error);
}

TEST(KlBound, TruthHasZeroKlAndBoundScalesLikeRootN) {
  const World w = build_world(WorldConfig{});
  const auto spec = ConfidenceSpec::make(w.dim(), 1.0, 0.1, 1.0, 1.0);
  const ConfidenceMetric a(Eigen::MatrixXd::Identity(w.dim(), w.dim()), 1e-3);
  const auto chk = kl_gibbs_bound_check(w, w.truth.theta_star, a, spec, 1.0, 0, 1000);
  EXPECT_EQ(chk.measured_kl, 0.0);
  EXPECT_GT(chk.bound_leading_term, 0.0);
  // With b_max small the lambda b_max^2 term is negligible next to C_delta / N.
  ConfidenceSpec tiny = spec;
  tiny.b_max = 1e-9;
  const double b1 = kl_gibbs_bound_check(w, w.truth.theta_star, a, tiny, 1.0, 0, 1000).bound_leading_term;
  const double b4 = kl_gibbs_bound_check(w, w.truth.theta_star, a, tiny, 1.0, 0, 4000).bound_leading_term;
  EXPECT_NEAR(b1 / b4, 2.0, 1e-9);
}

TEST(Misidentification, SmallEntropyErrorsPreserveWorstGroup) {
  int tested = 0;
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    WorldConfig c;
    c.rng_seed = seed;
    c.num_groups = 3;
    c.group_proportions = {0.3, 0.3, 0.4};
    c.b_max = 3.0;
    const World w = build_world(c);
    std::vector<PolicyTable> truth;
    for (const auto& r : reward_tables(w.truth.theta_star, w.features)) truth.push_back(gibbs_policy(r, w.truth.ref_policy, 1.0));
    const auto g = gap_profile(truth, w.prompts);
    CounterRng rng(seed, Stream::data);
    const Eigen::MatrixXd noisy = w.truth.theta_star + 0.05 * Eigen::MatrixXd::NullaryExpr(w.dim(), 3, [&] { return rng.normal(); });
    std::vector<PolicyTable> fitted;
    for (const auto& r : reward_tables(noisy, w.features)) fitted.push_back(gibbs_policy(r, w.truth.ref_policy, 1.0));
    bool close = true;
    for (std::size_t u = 0; u < 3; ++u) {
      close = close && std::abs(conditional_entropy(truth[u], w.prompts) - conditional_entropy(fitted[u], w.prompts)) <
                           g.delta_min / 2.0;
    }
    if (!close) continue;
    ++tested;
    EXPECT_EQ(worst_group_by_entropy(fitted, w.prompts).chosen, g.u_star);
  }
  EXPECT_GT(tested, 5);
}
