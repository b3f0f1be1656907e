#pragma once

// Tabular policies downstream of reward estimates: Gibbs policies, value
// functions, pessimistic values and best responses, the max-min policy
// solver, and worst-group selection.

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>

#include "sharedrep/policy_table.hpp"
#include "sharedrep/preference_data.hpp"
#include "sharedrep/projections.hpp"
#include "sharedrep/tabular_world.hpp"

namespace sharedrep {

inline constexpr double kTieTolerance = 1e-9;

/// nu_r(y|x) proportional to ref(y|x) exp(r(x,y) / beta).
inline PolicyTable gibbs_policy(const Eigen::MatrixXd& reward_table, const PolicyTable& ref,
                                double beta) {
  if (!(beta > 0.0)) throw std::invalid_argument("gibbs_policy: beta must be > 0");
  if (reward_table.rows() != ref.num_prompts() || reward_table.cols() != ref.num_responses()) {
    throw std::invalid_argument("gibbs_policy: reward table and reference policy shapes differ");
  }
  if (!ref.strictly_positive()) {
    throw std::invalid_argument("gibbs_policy: reference policy must be strictly positive");
  }
  Eigen::MatrixXd logits = ref.probs().array().log() + reward_table.array() / beta;
  Eigen::MatrixXd p(logits.rows(), logits.cols());
  for (Eigen::Index x = 0; x < logits.rows(); ++x) {
    const double mx = logits.row(x).maxCoeff();
    p.row(x) = (logits.row(x).array() - mx).exp();
    p.row(x) /= p.row(x).sum();
  }
  return PolicyTable(std::move(p));
}

/// beta * log sum_y ref(y|x) exp(r(x,y)/beta) for every prompt.
inline Eigen::VectorXd log_partition(const Eigen::MatrixXd& reward_table, const PolicyTable& ref,
                                     double beta) {
  Eigen::VectorXd out(reward_table.rows());
  for (Eigen::Index x = 0; x < reward_table.rows(); ++x) {
    const Eigen::ArrayXd a =
        ref.row(x).transpose().array().log() + reward_table.row(x).transpose().array() / beta;
    const double mx = a.maxCoeff();
    out(x) = beta * (mx + std::log((a - mx).exp().sum()));
  }
  return out;
}

/// Shannon entropy (nats) of one distribution, with 0 log 0 = 0.
inline double entropy(const Eigen::Ref<const Eigen::VectorXd>& p) {
  double h = 0.0;
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    if (p(i) > 0.0) h -= p(i) * std::log(p(i));
  }
  return h;
}

/// E_{x ~ rho} H(policy(.|x)).
inline double conditional_entropy(const PolicyTable& policy, const PromptDistribution& rho) {
  double h = 0.0;
  for (Eigen::Index x = 0; x < policy.num_prompts(); ++x) {
    h += rho.rho(x) * entropy(policy.row(x).transpose());
  }
  return h;
}

/// E_{x~rho, y~pi}[r].
inline double unregularized_value(const PolicyTable& policy, const Eigen::MatrixXd& reward_table,
                                  const PromptDistribution& rho) {
  return rho.rho.dot((policy.probs().array() * reward_table.array()).rowwise().sum().matrix());
}

/// Value of E[r - beta log(pi / ref)]; `finite` is false (value = +inf) when
/// pi puts mass where ref has none.
struct KlValue {
  double value = 0.0;
  bool finite = true;
};

/// rho-averaged KL(pi(.|x) || ref(.|x)), +inf when not absolutely continuous.
inline double mean_kl(const PolicyTable& policy, const PolicyTable& ref, const PromptDistribution& rho) {
  double kl = 0.0;
  for (Eigen::Index x = 0; x < policy.num_prompts(); ++x) {
    double row = 0.0;
    for (Eigen::Index y = 0; y < policy.num_responses(); ++y) {
      const double p = policy(x, y);
      if (p <= 0.0) continue;
      if (ref(x, y) <= 0.0) return std::numeric_limits<double>::infinity();
      row += p * std::log(p / ref(x, y));
    }
    kl += rho.rho(x) * row;
  }
  return kl;
}

inline KlValue kl_value(const PolicyTable& policy, const Eigen::MatrixXd& reward_table,
                        const PolicyTable& ref, const PromptDistribution& rho, double beta) {
  const double kl = mean_kl(policy, ref, rho);
  if (!std::isfinite(kl)) return {std::numeric_limits<double>::infinity(), false};
  return {unregularized_value(policy, reward_table, rho) - beta * kl, true};
}

/// m = E_{x~rho, y~pi}[phi(x, y)].
inline Eigen::VectorXd expected_features(const PolicyTable& policy, const FeatureMap& phi,
                                         const PromptDistribution& rho) {
  Eigen::VectorXd m = Eigen::VectorXd::Zero(phi.dim());
  for (Eigen::Index x = 0; x < phi.num_prompts(); ++x) {
    m.noalias() += rho.rho(x) * (phi.prompt_block(x).transpose() * policy.row(x).transpose());
  }
  return m;
}

struct PessimisticValueResult {
  double value = 0.0;
  Eigen::VectorXd minimizing_direction;
};

/// Minimum of <m, theta> over the ellipsoid ||theta - theta_hat||_A <= eta,
/// in closed form <m, theta_hat> - eta ||m||_{A^-1}.
inline PessimisticValueResult pessimistic_value(const PolicyTable& policy,
                                                const Eigen::Ref<const Eigen::VectorXd>& theta_hat,
                                                const ConfidenceMetric& metric, double eta,
                                                const FeatureMap& phi, const PromptDistribution& rho) {
  const Eigen::VectorXd m = expected_features(policy, phi, rho);
  const double plug_in = m.dot(theta_hat);
  const double mnorm = metric.inv_norm(m);
  if (!(mnorm > 0.0)) return {plug_in, theta_hat};
  return {plug_in - eta * mnorm, theta_hat - eta * metric.solve(m) / mnorm};
}

/// Per prompt, argmax_y <phi, theta_hat> - eta ||phi(x, y)||_{A^-1};
/// ties go to the smallest response index.
inline PolicyTable pessimistic_best_response(const Eigen::Ref<const Eigen::VectorXd>& theta_hat,
                                             const ConfidenceMetric& metric, double eta,
                                             const FeatureMap& phi) {
  const Eigen::MatrixXd white = metric.whiten_rows(phi.table());
  Eigen::VectorXi choice(phi.num_prompts());
  for (Eigen::Index x = 0; x < phi.num_prompts(); ++x) {
    double best = -std::numeric_limits<double>::infinity();
    for (Eigen::Index y = 0; y < phi.num_responses(); ++y) {
      const Eigen::Index r = x * phi.num_responses() + y;
      const double score = phi.table().row(r).dot(theta_hat) - eta * white.row(r).norm();
      if (score > best) {
        best = score;
        choice(x) = static_cast<int>(y);
      }
    }
  }
  return PolicyTable::deterministic(choice, phi.num_responses());
}

/// Pessimism term eta * ||E_pi phi||_{A^-1} applied once, group-independently,
/// inside the max-min objective.
struct PessimismPenalty {
  double eta = 0.0;
  const FeatureMap* phi = nullptr;
  const ConfidenceMetric* metric = nullptr;
};

/// Group-specific pessimism: group u pays eta[u] * ||E_pi phi||_{A_u^-1}.
struct GroupPessimism {
  std::vector<double> eta;
  const FeatureMap* phi = nullptr;
  std::vector<const ConfidenceMetric*> metrics;
};

struct MaxMinOptions {
  int rounds = 5000;
  double gap_tol = -1.0;  // negative: 1e-3 * beta
};

struct MaxMinSolution {
  PolicyTable policy;
  double duality_gap = std::numeric_limits<double>::infinity();
  bool converged = false;
  int rounds = 0;
  double primal_value = 0.0;      // min_u L_u(policy)
  double dual_value = 0.0;        // certificate upper bound
  Eigen::VectorXd group_values;   // L_u(policy)
  Eigen::VectorXd group_weights;  // adversary mixture over groups
};

namespace detail {

/// Dual of the max-min problem. Variables are z = (q, s): q on the simplex
/// over groups, and s either one vector in the unit ball (shared penalty) or
/// one vector per group with ||s_u|| <= q_u (group penalties).
class MaxMinProblem {
 public:
  MaxMinProblem(const std::vector<Eigen::MatrixXd>& rewards, const PolicyTable& ref,
                const PromptDistribution& rho, double beta)
      : rewards_(rewards), ref_(ref), rho_(rho), beta_(beta) {
    log_ref_ = ref.probs().array().log();
    nx_ = ref.num_prompts();
    ny_ = ref.num_responses();
  }

  void set_shared(const PessimismPenalty& pen) {
    if (pen.eta <= 0.0) return;
    etas_ = {pen.eta};
    white_ = {pen.metric->whiten_rows(pen.phi->table())};
    per_group_ = false;
  }

  void set_per_group(const GroupPessimism& pen) {
    per_group_ = true;
    etas_ = pen.eta;
    white_.clear();
    for (const auto* m : pen.metrics) white_.push_back(m->whiten_rows(pen.phi->table()));
  }

  Eigen::Index num_groups() const { return static_cast<Eigen::Index>(rewards_.size()); }
  Eigen::Index dim() const { return white_.empty() ? 0 : white_.front().cols(); }
  Eigen::Index num_blocks() const { return static_cast<Eigen::Index>(white_.size()); }
  Eigen::Index num_vars() const { return num_groups() + num_blocks() * dim(); }
  bool per_group() const { return per_group_; }

  Eigen::VectorXd initial_point() const {
    Eigen::VectorXd z = Eigen::VectorXd::Zero(num_vars());
    z.head(num_groups()).setConstant(1.0 / static_cast<double>(num_groups()));
    return z;
  }

  Eigen::VectorXd project(const Eigen::VectorXd& z) const {
    const Eigen::Index nu = num_groups();
    const Eigen::Index d = dim();
    Eigen::VectorXd out(z.size());
    if (!per_group_) {
      out.head(nu) = project_simplex(z.head(nu));
      if (d > 0) {
        const Eigen::VectorXd s = z.tail(d);
        const double n = s.norm();
        out.tail(d) = n > 1.0 ? Eigen::VectorXd(s / n) : s;
      }
      return out;
    }
    // {q in simplex, ||s_u|| <= q_u}: shift q by a common multiplier mu and
    // project each (q_u - mu, s_u) onto the second-order cone; mu is found by
    // bisection on sum_u q_u(mu) = 1, which is nonincreasing in mu.
    std::vector<double> norms(static_cast<std::size_t>(nu));
    for (Eigen::Index u = 0; u < nu; ++u) {
      norms[static_cast<std::size_t>(u)] = z.segment(nu + u * d, d).norm();
    }
    auto cone_q = [](double a, double nb) {
      if (nb <= a) return a;
      if (nb <= -a) return 0.0;
      return 0.5 * (a + nb);
    };
    auto total = [&](double mu) {
      double s = 0.0;
      for (Eigen::Index u = 0; u < nu; ++u) s += cone_q(z(u) - mu, norms[static_cast<std::size_t>(u)]);
      return s;
    };
    double lo = z.head(nu).minCoeff() - 1.0;
    double hi = z.head(nu).maxCoeff() + *std::max_element(norms.begin(), norms.end());
    while (total(lo) < 1.0) lo -= (hi - lo);
    for (int it = 0; it < 200; ++it) {
      const double mid = 0.5 * (lo + hi);
      if (mid == lo || mid == hi) break;
      (total(mid) > 1.0 ? lo : hi) = mid;
    }
    const double mu = 0.5 * (lo + hi);
    double sum = 0.0;
    for (Eigen::Index u = 0; u < nu; ++u) {
      const double a = z(u) - mu;
      const double nb = norms[static_cast<std::size_t>(u)];
      const double q = cone_q(a, nb);
      out(u) = q;
      auto seg = out.segment(nu + u * d, d);
      if (nb <= a) {
        seg = z.segment(nu + u * d, d);
      } else if (nb <= -a || nb == 0.0) {
        seg.setZero();
      } else {
        seg = z.segment(nu + u * d, d) * (q / nb);
      }
      sum += q;
    }
    // Scaling keeps every cone constraint and makes the simplex sum exact.
    out /= sum;
    return out;
  }

  /// Dual objective beta E_rho log Z(x) and its gradient; fills the Gibbs policy.
  double dual(const Eigen::VectorXd& z, Eigen::VectorXd* grad, Eigen::MatrixXd* policy) const {
    const Eigen::MatrixXd r = effective_reward(z);
    Eigen::MatrixXd p(r.rows(), r.cols());
    double value = 0.0;
    for (Eigen::Index x = 0; x < r.rows(); ++x) {
      const Eigen::ArrayXd a = log_ref_.row(x).transpose().array() + r.row(x).transpose().array() / beta_;
      const double mx = a.maxCoeff();
      const Eigen::ArrayXd e = (a - mx).exp();
      const double zx = e.sum();
      value += rho_.rho(x) * beta_ * (mx + std::log(zx));
      p.row(x) = (e / zx).matrix().transpose();
    }
    if (grad != nullptr) {
      const Eigen::Index nu = num_groups();
      grad->resize(num_vars());
      for (Eigen::Index u = 0; u < nu; ++u) {
        (*grad)(u) = expectation(p, rewards_[static_cast<std::size_t>(u)]);
      }
      for (Eigen::Index b = 0; b < num_blocks(); ++b) {
        grad->segment(nu + b * dim(), dim()) = -eta(b) * whitened_mean(p, b);
      }
    }
    if (policy != nullptr) *policy = std::move(p);
    return value;
  }

  /// Per-group primal values L_u(pi).
  Eigen::VectorXd group_values(const Eigen::MatrixXd& p) const {
    const PolicyTable pt(p);
    const double kl = mean_kl(pt, ref_, rho_);
    Eigen::VectorXd v(num_groups());
    for (Eigen::Index u = 0; u < num_groups(); ++u) {
      double pen = 0.0;
      if (per_group_) {
        pen = eta(u) * whitened_mean(p, u).norm();
      } else if (num_blocks() > 0) {
        pen = eta(0) * whitened_mean(p, 0).norm();
      }
      v(u) = expectation(p, rewards_[static_cast<std::size_t>(u)]) - pen - beta_ * kl;
    }
    return v;
  }

 private:
  double eta(Eigen::Index b) const { return etas_[static_cast<std::size_t>(b)]; }

  Eigen::MatrixXd effective_reward(const Eigen::VectorXd& z) const {
    const Eigen::Index nu = num_groups();
    Eigen::MatrixXd r = Eigen::MatrixXd::Zero(nx_, ny_);
    for (Eigen::Index u = 0; u < nu; ++u) r += z(u) * rewards_[static_cast<std::size_t>(u)];
    for (Eigen::Index b = 0; b < num_blocks(); ++b) {
      if (eta(b) == 0.0) continue;
      const Eigen::VectorXd cs = white_[static_cast<std::size_t>(b)] * z.segment(nu + b * dim(), dim());
      r -= eta(b) * Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
                        cs.data(), nx_, ny_);
    }
    return r;
  }

  double expectation(const Eigen::MatrixXd& p, const Eigen::MatrixXd& r) const {
    return rho_.rho.dot((p.array() * r.array()).rowwise().sum().matrix());
  }

  /// E_{rho, pi}[L_b^{-1} phi] = L_b^{-1} m(pi).
  Eigen::VectorXd whitened_mean(const Eigen::MatrixXd& p, Eigen::Index b) const {
    const Eigen::MatrixXd& w = white_[static_cast<std::size_t>(b)];
    Eigen::VectorXd m = Eigen::VectorXd::Zero(w.cols());
    for (Eigen::Index x = 0; x < nx_; ++x) {
      m.noalias() += rho_.rho(x) * (w.middleRows(x * ny_, ny_).transpose() * p.row(x).transpose());
    }
    return m;
  }

  const std::vector<Eigen::MatrixXd>& rewards_;
  const PolicyTable& ref_;
  const PromptDistribution& rho_;
  double beta_;
  bool per_group_ = false;
  std::vector<double> etas_;
  std::vector<Eigen::MatrixXd> white_;
  Eigen::MatrixXd log_ref_;
  Eigen::Index nx_ = 0;
  Eigen::Index ny_ = 0;
};

inline void check_maxmin_inputs(const std::vector<Eigen::MatrixXd>& reward_tables,
                                const PolicyTable& ref, double beta) {
  if (!(beta > 0.0)) throw std::invalid_argument("solve_maxmin_policy: beta must be > 0");
  if (reward_tables.empty()) throw std::invalid_argument("solve_maxmin_policy: need U >= 1");
  if (!ref.strictly_positive()) {
    throw std::invalid_argument("solve_maxmin_policy: reference policy must be strictly positive");
  }
  for (const auto& r : reward_tables) {
    if (r.rows() != ref.num_prompts() || r.cols() != ref.num_responses()) {
      throw std::invalid_argument("solve_maxmin_policy: reward table shape mismatch");
    }
  }
}

/// Accelerated projected gradient on the dual with backtracking and adaptive
/// restart. Keeps the iterate whose policy has the smallest certified gap.
inline MaxMinSolution minimize_dual(const MaxMinProblem& prob, double beta, const MaxMinOptions& opts) {
  const double gap_tol = opts.gap_tol >= 0.0 ? opts.gap_tol : 1e-3 * beta;
  const Eigen::Index nu = prob.num_groups();

  MaxMinSolution best;
  auto certify = [&](const Eigen::VectorXd& z, double dual_value, const Eigen::MatrixXd& pol, int round) {
    const Eigen::VectorXd values = prob.group_values(pol);
    const double primal = values.minCoeff();
    const double gap = std::max(0.0, dual_value - primal);
    if (gap < best.duality_gap) {
      best.policy = PolicyTable(pol);
      best.duality_gap = gap;
      best.primal_value = primal;
      best.dual_value = dual_value;
      best.group_values = values;
      best.group_weights = z.head(nu);
      best.rounds = round;
    }
  };

  Eigen::VectorXd x = prob.project(prob.initial_point());
  Eigen::VectorXd y = x;
  double t = 1.0;
  double lip = 1.0 / beta;
  Eigen::MatrixXd pol;
  double fx = prob.dual(x, nullptr, &pol);
  certify(x, fx, pol, 0);

  for (int k = 1; k <= opts.rounds && best.duality_gap > gap_tol; ++k) {
    Eigen::VectorXd gy;
    const double fy = prob.dual(y, &gy, nullptr);
    Eigen::VectorXd xn;
    double fxn = 0.0;
    for (int bt = 0; bt < 80; ++bt) {
      xn = prob.project(y - gy / lip);
      const Eigen::VectorXd dz = xn - y;
      fxn = prob.dual(xn, nullptr, nullptr);
      if (fxn <= fy + gy.dot(dz) + 0.5 * lip * dz.squaredNorm() + 1e-15 * std::abs(fy)) break;
      lip *= 2.0;
    }
    const double tn = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * t * t));
    // Adaptive restart when the momentum direction stops descending.
    if ((y - xn).dot(xn - x) > 0.0 || fxn > fx) {
      y = xn;
      t = 1.0;
    } else {
      y = xn + ((t - 1.0) / tn) * (xn - x);
      t = tn;
    }
    x = xn;
    fx = prob.dual(x, nullptr, &pol);
    certify(x, fx, pol, k);
    lip = std::max(lip * 0.9, 1e-12);
  }
  best.converged = best.duality_gap <= gap_tol;
  return best;
}

}  // namespace detail

/// Solves max_pi min_u { E[r_u] - eta ||E phi||_{A^-1} - beta KL(pi || ref) }.
///
/// The objective is concave in pi, so by minimax it equals the convex dual
///   min_{q in simplex, ||s|| <= 1} beta E_rho log sum_y ref exp((r_q - eta <L^{-1} phi, s>) / beta),
/// whose inner maximizer is the Gibbs policy of the mixed, tilted reward.
/// The reported duality gap (dual value minus the exact primal value of the
/// returned policy) certifies optimality.
inline MaxMinSolution solve_maxmin_policy(const std::vector<Eigen::MatrixXd>& reward_tables,
                                          const PolicyTable& ref, const PromptDistribution& rho,
                                          double beta, const PessimismPenalty& penalty = {},
                                          const MaxMinOptions& opts = {}) {
  detail::check_maxmin_inputs(reward_tables, ref, beta);
  if (penalty.eta < 0.0) throw std::invalid_argument("solve_maxmin_policy: eta must be >= 0");
  if (penalty.eta > 0.0 && (penalty.phi == nullptr || penalty.metric == nullptr)) {
    throw std::invalid_argument("solve_maxmin_policy: eta > 0 needs features and a metric");
  }
  detail::MaxMinProblem prob(reward_tables, ref, rho, beta);
  prob.set_shared(penalty);
  return detail::minimize_dual(prob, beta, opts);
}

/// Variant where each group carries its own confidence width and metric:
/// max_pi min_u { E[r_u] - eta_u ||E phi||_{A_u^-1} - beta KL(pi || ref) }.
/// The dual couples each group's ball variable to its weight, ||s_u|| <= q_u.
inline MaxMinSolution solve_maxmin_policy(const std::vector<Eigen::MatrixXd>& reward_tables,
                                          const PolicyTable& ref, const PromptDistribution& rho,
                                          double beta, const GroupPessimism& penalty,
                                          const MaxMinOptions& opts = {}) {
  detail::check_maxmin_inputs(reward_tables, ref, beta);
  if (penalty.eta.size() != reward_tables.size() || penalty.metrics.size() != reward_tables.size()) {
    throw std::invalid_argument("solve_maxmin_policy: need one width and metric per group");
  }
  if (penalty.phi == nullptr) throw std::invalid_argument("solve_maxmin_policy: missing features");
  for (std::size_t u = 0; u < penalty.eta.size(); ++u) {
    if (!(penalty.eta[u] >= 0.0)) throw std::invalid_argument("solve_maxmin_policy: eta must be >= 0");
    if (penalty.metrics[u] == nullptr) throw std::invalid_argument("solve_maxmin_policy: missing metric");
  }
  detail::MaxMinProblem prob(reward_tables, ref, rho, beta);
  prob.set_per_group(penalty);
  return detail::minimize_dual(prob, beta, opts);
}

struct GroupSelection {
  Eigen::Index chosen = 0;
  Eigen::VectorXd scores;
  bool tie = false;
};

namespace detail {

inline GroupSelection select_extremum(Eigen::VectorXd scores, bool minimize) {
  GroupSelection sel;
  sel.chosen = 0;
  for (Eigen::Index u = 1; u < scores.size(); ++u) {
    if (minimize ? scores(u) < scores(sel.chosen) : scores(u) > scores(sel.chosen)) sel.chosen = u;
  }
  for (Eigen::Index u = 0; u < scores.size(); ++u) {
    if (u != sel.chosen && std::abs(scores(u) - scores(sel.chosen)) <= kTieTolerance) sel.tie = true;
  }
  sel.scores = std::move(scores);
  return sel;
}

}  // namespace detail

/// argmin_u E_{rho, pi}[r_u]; ties resolve to the smallest index.
inline GroupSelection worst_group_by_reward(const PolicyTable& policy,
                                            const std::vector<Eigen::MatrixXd>& reward_tables,
                                            const PromptDistribution& rho) {
  if (reward_tables.empty()) throw std::invalid_argument("worst_group_by_reward: need U >= 1");
  Eigen::VectorXd scores(static_cast<Eigen::Index>(reward_tables.size()));
  for (std::size_t u = 0; u < reward_tables.size(); ++u) {
    scores(static_cast<Eigen::Index>(u)) = unregularized_value(policy, reward_tables[u], rho);
  }
  return detail::select_extremum(std::move(scores), true);
}

/// argmax_u of the conditional entropy of each group's Gibbs policy.
inline GroupSelection worst_group_by_entropy(const std::vector<PolicyTable>& gibbs_tables,
                                             const PromptDistribution& rho) {
  if (gibbs_tables.empty()) throw std::invalid_argument("worst_group_by_entropy: need U >= 1");
  Eigen::VectorXd scores(static_cast<Eigen::Index>(gibbs_tables.size()));
  for (std::size_t u = 0; u < gibbs_tables.size(); ++u) {
    scores(static_cast<Eigen::Index>(u)) = conditional_entropy(gibbs_tables[u], rho);
  }
  return detail::select_extremum(std::move(scores), false);
}

/// E_rho max_y r(x, y) - E_{rho, pi}[r]: the optimum is the per-prompt argmax.
inline double suboptimality(const PolicyTable& policy, const Eigen::MatrixXd& reward_table,
                            const PromptDistribution& rho) {
  const double best = rho.rho.dot(reward_table.rowwise().maxCoeff());
  return best - unregularized_value(policy, reward_table, rho);
}

inline double suboptimality(const PolicyTable& policy, Eigen::Index group, const World& world) {
  if (group < 0 || group >= world.num_groups()) {
    throw std::out_of_range("suboptimality: group index out of range");
  }
  return suboptimality(policy, reward_table(world.truth.theta_star.col(group), world.features),
                       world.prompts);
}

struct Theorem1Bound {
  double rhs = 0.0;
  double expected_kappa = 0.0;  // E_rho ||E_{y ~ pi(.|x)} phi||_{A^-1}
  bool vacuous = false;         // rhs <= 0
};

/// rho_min * xi - 2 eta E_rho[kappa(x)] for a deterministic baseline policy,
/// with kappa(x) = ||E_{y ~ pi(.|x)} phi(x, y)||_{A^-1}.
inline Theorem1Bound theorem1_rhs(const World& world, const ConfidenceMetric& metric,
                                  double eta_sr_value, const PolicyTable& mm_policy, double xi_hat) {
  for (Eigen::Index x = 0; x < mm_policy.num_prompts(); ++x) {
    if (std::abs(mm_policy.row(x).maxCoeff() - 1.0) > 1e-12) {
      throw std::invalid_argument("theorem1_rhs: baseline policy rows must be deterministic");
    }
  }
  Theorem1Bound b;
  for (Eigen::Index x = 0; x < world.num_prompts(); ++x) {
    const Eigen::VectorXd mean =
        world.features.prompt_block(x).transpose() * mm_policy.row(x).transpose();
    b.expected_kappa += world.prompts.rho(x) * metric.inv_norm(mean);
  }
  b.rhs = world.prompts.rho_min * xi_hat - 2.0 * eta_sr_value * b.expected_kappa;
  b.vacuous = b.rhs <= 0.0;
  return b;
}

}  // namespace sharedrep
