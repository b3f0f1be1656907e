#pragma once

// Closed-form objects behind the sample-complexity analysis: binary entropy,
// total variation / KL, the Fannes bound, the piecewise function f and its
// inverse at Delta_min / 2, the W_{-1} Lambert branch, entropy gap profiles,
// psi_u, and the N_MaxMin / N_SR evaluators.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <optional>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>

#include "sharedrep/policy_engine.hpp"
#include "sharedrep/preference_data.hpp"
#include "sharedrep/reward_estimation.hpp"
#include "sharedrep/tabular_world.hpp"

namespace sharedrep {

/// -p ln p - (1-p) ln(1-p), with h(0) = h(1) = 0.
inline double binary_entropy(double p) {
  if (!(p >= 0.0 && p <= 1.0)) throw std::domain_error("binary_entropy: p must lie in [0, 1]");
  double h = 0.0;
  if (p > 0.0) h -= p * std::log(p);
  if (p < 1.0) h -= (1.0 - p) * std::log1p(-p);
  return h;
}

inline double tv_distance(const Eigen::Ref<const Eigen::VectorXd>& p,
                          const Eigen::Ref<const Eigen::VectorXd>& q) {
  if (p.size() != q.size()) throw std::invalid_argument("tv_distance: size mismatch");
  return 0.5 * (p - q).cwiseAbs().sum();
}

/// KL(p || q) in nats; +inf when p has mass where q has none.
inline double kl_divergence(const Eigen::Ref<const Eigen::VectorXd>& p,
                            const Eigen::Ref<const Eigen::VectorXd>& q) {
  if (p.size() != q.size()) throw std::invalid_argument("kl_divergence: size mismatch");
  double kl = 0.0;
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    if (p(i) <= 0.0) continue;
    if (q(i) <= 0.0) return std::numeric_limits<double>::infinity();
    kl += p(i) * std::log(p(i) / q(i));
  }
  return std::max(kl, 0.0);
}

/// TV(p, q) ln|Omega| + h(TV(p, q)); bounds |H(p) - H(q)|.
inline double fannes_bound(const Eigen::Ref<const Eigen::VectorXd>& p,
                           const Eigen::Ref<const Eigen::VectorXd>& q, Eigen::Index y_size) {
  const double tv = std::clamp(tv_distance(p, q), 0.0, 1.0);
  return tv * std::log(static_cast<double>(y_size)) + binary_entropy(tv);
}

/// ln|Y| + 2.
inline double entropy_slack_constant(Eigen::Index y_size) {
  return std::log(static_cast<double>(y_size)) + 2.0;
}

inline constexpr double kFBreakpoint = 1.0 / (2.0 * std::numbers::e * std::numbers::e);

/// f(x) = c sqrt(2x) for x >= 1/(2e^2), and -c sqrt(2x) ln sqrt(2x) below,
/// where c = ln|Y| + 2.
inline double f_of(double x, Eigen::Index y_size) {
  if (!(x >= 0.0)) throw std::domain_error("f_of: x must be >= 0");
  const double c = entropy_slack_constant(y_size);
  const double r = std::sqrt(2.0 * x);
  if (x >= kFBreakpoint) return c * r;
  if (r == 0.0) return 0.0;
  return -c * r * std::log(r);
}

/// Non-principal real branch W_{-1}: the solution w <= -1 of w e^w = x for
/// x in [-1/e, 0).
inline double lambert_w_minus1(double x) {
  constexpr double kInvE = 1.0 / std::numbers::e;
  if (!(x >= -kInvE - 1e-16 && x < 0.0)) {
    throw std::domain_error("lambert_w_minus1: x must lie in [-1/e, 0)");
  }
  const double p2 = 2.0 * (1.0 + std::numbers::e * x);
  if (p2 <= 0.0) return -1.0;

  // Branch-point series near -1/e, asymptotic seed elsewhere.
  double w;
  if (p2 < 0.25) {
    const double p = std::sqrt(p2);
    w = -1.0 - p - p * p / 3.0 - 11.0 / 72.0 * p * p * p;
  } else {
    const double l1 = std::log(-x);
    w = l1 - std::log(-l1);
  }
  w = std::min(w, -1.0);

  auto residual = [x](double v) { return v * std::exp(v) - x; };
  for (int it = 0; it < 64; ++it) {
    const double ew = std::exp(w);
    const double f = w * ew - x;
    const double fp = ew * (w + 1.0);
    if (fp == 0.0) break;
    const double fpp = ew * (w + 2.0);
    const double step = f / (fp - 0.5 * fpp * f / fp);
    double next = w - step;
    if (!std::isfinite(next) || next > -1.0) next = 0.5 * (w - 1.0);
    if (next == w) break;
    w = next;
    if (std::abs(step) <= 4.0 * std::numeric_limits<double>::epsilon() * std::abs(w)) break;
  }
  if (std::abs(residual(w)) <= 1e-13 * std::abs(x)) return w;

  // Bisection fallback: w e^w is decreasing on (-inf, -1].
  double lo = -745.0;
  double hi = -1.0;
  for (int it = 0; it < 200 && hi - lo > 0.0; ++it) {
    const double mid = 0.5 * (lo + hi);
    if (mid == lo || mid == hi) break;
    if (residual(mid) > 0.0) {
      lo = mid;  // mid e^mid above x: the root lies closer to -1
    } else {
      hi = mid;
    }
  }
  const double a = std::abs(residual(lo));
  const double b = std::abs(residual(hi));
  return a < b ? lo : hi;
}

/// Threshold (2/e)(ln|Y| + 2) separating the large- and small-gap regimes.
inline double regime_threshold(Eigen::Index y_size) {
  return 2.0 / std::numbers::e * entropy_slack_constant(y_size);
}

enum class GapRegime { large_gap, small_gap };

inline GapRegime regime_of(double delta_min, Eigen::Index y_size) {
  return delta_min > regime_threshold(y_size) ? GapRegime::large_gap : GapRegime::small_gap;
}

/// f^{-1}(Delta / 2). Large gap: Delta^2 / (8 c^2). Small gap:
/// exp(2 W_{-1}(-Delta / (2c))) / 2.
inline double f_inverse_half_delta(double delta_min, Eigen::Index y_size) {
  if (!(delta_min > 0.0)) throw std::domain_error("f_inverse_half_delta: delta_min must be > 0");
  const double c = entropy_slack_constant(y_size);
  if (regime_of(delta_min, y_size) == GapRegime::large_gap) {
    return delta_min * delta_min / (8.0 * c * c);
  }
  return 0.5 * std::exp(2.0 * lambert_w_minus1(-delta_min / (2.0 * c)));
}

struct GapProfile {
  Eigen::VectorXd delta_u;  // |H(nu_{u*}) - H(nu_u)|, zero at u*
  Eigen::VectorXd entropies;
  double delta_min = std::numeric_limits<double>::infinity();
  Eigen::Index u_star = 0;
};

/// Entropy gaps of the groups' Gibbs policies relative to the maximum-entropy
/// group. U = 1 yields delta_min = +inf.
inline GapProfile gap_profile(const std::vector<PolicyTable>& gibbs_tables,
                              const PromptDistribution& rho) {
  if (gibbs_tables.empty()) throw std::invalid_argument("gap_profile: need U >= 1");
  const GroupSelection sel = worst_group_by_entropy(gibbs_tables, rho);
  GapProfile g;
  g.entropies = sel.scores;
  g.u_star = sel.chosen;
  g.delta_u = (g.entropies.array() - g.entropies(g.u_star)).abs().matrix();
  g.delta_u(g.u_star) = 0.0;
  for (Eigen::Index u = 0; u < g.delta_u.size(); ++u) {
    if (u != g.u_star) g.delta_min = std::min(g.delta_min, g.delta_u(u));
  }
  if (g.delta_u.size() > 1 && !(g.delta_min > 0.0)) {
    throw std::invalid_argument("gap_profile: maximum entropy is tied; delta_min = 0");
  }
  return g;
}

/// E_{y ~ policy(.|x)} ||phi(x, y)||_{A^-1} for every prompt x.
inline Eigen::VectorXd expected_inv_feature_norm(const PolicyTable& policy, const FeatureMap& phi,
                                                 const ConfidenceMetric& metric) {
  const Eigen::MatrixXd white = metric.whiten_rows(phi.table());
  Eigen::VectorXd out(phi.num_prompts());
  for (Eigen::Index x = 0; x < phi.num_prompts(); ++x) {
    double acc = 0.0;
    for (Eigen::Index y = 0; y < phi.num_responses(); ++y) {
      acc += policy(x, y) * white.row(x * phi.num_responses() + y).norm();
    }
    out(x) = acc;
  }
  return out;
}

/// (1/beta^2)(C_delta + b_max^2) (max_x E_{y ~ nu*_u} ||phi||_{A^-1})^2.
inline double psi_u(const World& world, const ConfidenceMetric& metric, const ConfidenceSpec& spec,
                    double beta, Eigen::Index group) {
  if (!(beta > 0.0)) throw std::invalid_argument("psi_u: beta must be > 0");
  const PolicyTable nu = gibbs_policy(reward_table(world.truth.theta_star.col(group), world.features),
                                      world.truth.ref_policy, beta);
  const double worst = expected_inv_feature_norm(nu, world.features, metric).maxCoeff();
  return (spec.c_delta + spec.b_max * spec.b_max) * worst * worst / (beta * beta);
}

struct ComplexityInputs {
  Eigen::Index y_size = 2;
  double beta = 1.0;
  ConfidenceSpec spec;
  Eigen::VectorXd psi_u;
  std::optional<GapRegime> regime_override;
  double constant_multiplier = 1.0;

  GapRegime regime(double delta_min) const {
    return regime_override.value_or(regime_of(delta_min, y_size));
  }
};

/// max_u psi_u * (c / Delta_min)^4 (large gap) or
/// max_u psi_u * exp(-4 W_{-1}(-Delta_min / (2c))) (small gap), times the
/// constant multiplier.
inline double n_maxmin(const ComplexityInputs& in, const GapProfile& gap) {
  if (!(gap.delta_min > 0.0) || !std::isfinite(gap.delta_min)) {
    throw std::domain_error("n_maxmin: delta_min must be finite and > 0");
  }
  if (in.psi_u.size() == 0) throw std::invalid_argument("n_maxmin: psi_u is empty");
  const double c = entropy_slack_constant(in.y_size);
  const double psi = in.psi_u.maxCoeff();
  double factor;
  if (in.regime(gap.delta_min) == GapRegime::large_gap) {
    factor = std::pow(c / gap.delta_min, 4);
  } else {
    factor = std::exp(-4.0 * lambert_w_minus1(-gap.delta_min / (2.0 * c)));
  }
  return in.constant_multiplier * psi * factor;
}

/// The estimation term C_delta / eps^2 * ||E_{pi*} phi||^2_{A^-1}.
inline double n_sr_estimation_term(const ComplexityInputs& in, double pistar_feature_norm,
                                   double epsilon) {
  if (!(epsilon > 0.0)) throw std::domain_error("n_sr: epsilon must be > 0");
  return in.constant_multiplier * in.spec.c_delta / (epsilon * epsilon) * pistar_feature_norm *
         pistar_feature_norm;
}

inline double n_sr(const ComplexityInputs& in, const GapProfile& gap, double pistar_feature_norm,
                   double epsilon) {
  return std::max(n_maxmin(in, gap), n_sr_estimation_term(in, pistar_feature_norm, epsilon));
}

struct KlBoundCheck {
  double measured_kl = 0.0;         // E_rho KL(nu*_u || nu~_u)
  double bound_leading_term = 0.0;  // (2/beta) eta_sr(N, 1/N) E_rho E_{nu*_u} ||phi||_{A^-1}
  double max_prompt_kl = 0.0;
  double max_prompt_bound = 0.0;
};

/// Measured KL between the true and fitted Gibbs policies of one group next
/// to the leading term of its upper bound, at lambda = 1/N.
inline KlBoundCheck kl_gibbs_bound_check(const World& world, const Eigen::MatrixXd& fitted_theta,
                                         const ConfidenceMetric& metric, const ConfidenceSpec& spec,
                                         double beta, Eigen::Index group, std::size_t n) {
  const PolicyTable nu_star = gibbs_policy(
      reward_table(world.truth.theta_star.col(group), world.features), world.truth.ref_policy, beta);
  const PolicyTable nu_fit = gibbs_policy(reward_table(fitted_theta.col(group), world.features),
                                          world.truth.ref_policy, beta);
  const double eta = eta_sr(spec.with_lambda(1.0 / static_cast<double>(n)), n);
  const Eigen::VectorXd norms = expected_inv_feature_norm(nu_star, world.features, metric);
  KlBoundCheck out;
  for (Eigen::Index x = 0; x < world.num_prompts(); ++x) {
    const double kl = kl_divergence(nu_star.row(x).transpose(), nu_fit.row(x).transpose());
    const double bound = 2.0 / beta * eta * norms(x);
    out.measured_kl += world.prompts.rho(x) * kl;
    out.bound_leading_term += world.prompts.rho(x) * bound;
    out.max_prompt_kl = std::max(out.max_prompt_kl, kl);
    out.max_prompt_bound = std::max(out.max_prompt_bound, bound);
  }
  return out;
}

}  // namespace sharedrep
