#pragma once

// Maximum-likelihood reward fitting under the Bradley-Terry model:
//   * shared representation: theta_u = B w_u, ||B(:,k)|| <= b_max, w_u on the simplex;
//   * per-group baseline: independent theta_u in the b_max ball.
// Both minimize the mean binary cross-entropy with projected gradient steps
// and Armijo backtracking.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

#include <Eigen/Dense>

#include "sharedrep/preference_data.hpp"
#include "sharedrep/projections.hpp"
#include "sharedrep/rng.hpp"
#include "sharedrep/tabular_world.hpp"

namespace sharedrep {

struct SharedRepParams {
  Eigen::MatrixXd b;  // d x K
  Eigen::MatrixXd w;  // K x U

  Eigen::MatrixXd theta() const { return b * w; }

  bool feasible(double b_max, double tol = 1e-9) const {
    for (Eigen::Index k = 0; k < b.cols(); ++k) {
      if (b.col(k).norm() > b_max + tol) return false;
    }
    for (Eigen::Index u = 0; u < w.cols(); ++u) {
      if (!on_simplex(w.col(u), tol)) return false;
    }
    return true;
  }
};

struct MaxMinParams {
  Eigen::MatrixXd theta;  // d x U

  bool feasible(double b_max, double tol = 1e-9) const {
    for (Eigen::Index u = 0; u < theta.cols(); ++u) {
      if (theta.col(u).norm() > b_max + tol) return false;
    }
    return true;
  }
};

struct FitOptions {
  double tol = 1e-7;
  int max_iters = 20000;
  int restarts = 5;
  double lr0 = 1.0;
  std::uint64_t seed = 0;
  double armijo = 1e-4;
};

struct FitReport {
  double final_loss = 0.0;
  int iterations = 0;
  double grad_norm = 0.0;
  bool converged = false;
  double wall_time = 0.0;
};

/// Confidence-width constants. gamma and c_delta are derived from
/// (d, delta, l_max, b_max) by make().
struct ConfidenceSpec {
  double lambda = 1.0;
  double delta = 0.1;
  double c_sr = 1.0;
  double c_mm = 1.0;
  double gamma = 0.0;
  double c_delta = 0.0;
  double b_max = 1.0;
  double l_max = 1.0;

  static double gamma_of(double l_max, double b_max) {
    const double t = l_max * b_max;
    return 1.0 / (2.0 + std::exp(-t) + std::exp(t));
  }

  static ConfidenceSpec make(Eigen::Index d, double lambda, double delta, double l_max, double b_max,
                             double c_sr = 1.0, double c_mm = 1.0) {
    if (!(delta > 0.0 && delta < 1.0)) throw std::invalid_argument("ConfidenceSpec: delta in (0,1)");
    if (!(lambda >= 0.0)) throw std::invalid_argument("ConfidenceSpec: lambda must be >= 0");
    ConfidenceSpec s;
    s.lambda = lambda;
    s.delta = delta;
    s.c_sr = c_sr;
    s.c_mm = c_mm;
    s.b_max = b_max;
    s.l_max = l_max;
    s.gamma = gamma_of(l_max, b_max);
    s.c_delta = (static_cast<double>(d) + std::log(1.0 / delta)) / (s.gamma * s.gamma);
    return s;
  }

  ConfidenceSpec with_lambda(double l) const {
    ConfidenceSpec s = *this;
    s.lambda = l;
    return s;
  }
};

/// C_SR sqrt(C_delta / N + lambda b_max^2).
inline double eta_sr(const ConfidenceSpec& spec, std::size_t n) {
  if (n == 0) throw std::invalid_argument("eta_sr: n must be >= 1");
  return spec.c_sr *
         std::sqrt(spec.c_delta / static_cast<double>(n) + spec.lambda * spec.b_max * spec.b_max);
}

/// C_MM sqrt(C_delta / N_u + lambda b_max^2).
inline double eta_mm(const ConfidenceSpec& spec, std::size_t n_u) {
  if (n_u == 0) throw std::invalid_argument("eta_mm: n_u must be >= 1");
  return spec.c_mm *
         std::sqrt(spec.c_delta / static_cast<double>(n_u) + spec.lambda * spec.b_max * spec.b_max);
}

/// Mean binary cross-entropy over a dataset, with identical comparisons
/// (same prompt, response pair and group) merged into weighted terms.
class PreferenceObjective {
 public:
  PreferenceObjective(const PreferenceDataset& data, const FeatureMap& phi)
      : num_groups_(data.num_groups()), n_total_(static_cast<double>(data.size())) {
    if (data.empty()) throw std::invalid_argument("PreferenceObjective: empty dataset");
    // Canonical key: (group, prompt, lo, hi); label counted as "lo preferred".
    std::map<std::tuple<Eigen::Index, Eigen::Index, Eigen::Index, Eigen::Index>, std::pair<double, double>> agg;
    for (const auto& r : data.records()) {
      const bool swap = r.first > r.second;
      const Eigen::Index lo = swap ? r.second : r.first;
      const Eigen::Index hi = swap ? r.first : r.second;
      const bool lo_won = (r.label == 1) != swap;
      auto& c = agg[{r.group, r.prompt, lo, hi}];
      (lo_won ? c.first : c.second) += 1.0;
    }
    const auto m = static_cast<Eigen::Index>(agg.size());
    deltas_.resize(m, phi.dim());
    wins_.resize(m);
    losses_.resize(m);
    group_begin_.assign(static_cast<std::size_t>(num_groups_) + 1, 0);
    Eigen::Index i = 0;
    for (const auto& [key, counts] : agg) {
      const auto& [g, x, lo, hi] = key;
      deltas_.row(i) = phi(x, lo) - phi(x, hi);
      wins_(i) = counts.first;
      losses_(i) = counts.second;
      ++group_begin_[static_cast<std::size_t>(g) + 1];
      ++i;
    }
    for (std::size_t g = 1; g < group_begin_.size(); ++g) group_begin_[g] += group_begin_[g - 1];
    group_count_.resize(static_cast<std::size_t>(num_groups_));
    for (Eigen::Index g = 0; g < num_groups_; ++g) {
      group_count_[static_cast<std::size_t>(g)] = static_cast<double>(data.n_group(g));
    }
  }

  Eigen::Index num_groups() const noexcept { return num_groups_; }
  Eigen::Index dim() const noexcept { return deltas_.cols(); }
  double n_total() const noexcept { return n_total_; }
  double n_group(Eigen::Index u) const { return group_count_.at(static_cast<std::size_t>(u)); }
  Eigen::Index distinct_terms() const noexcept { return deltas_.rows(); }

  /// Unnormalized negative log-likelihood of group u at theta_u, and its
  /// gradient if `grad` is non-null.
  double group_nll(Eigen::Index u, const Eigen::Ref<const Eigen::VectorXd>& theta_u,
                   Eigen::VectorXd* grad) const {
    const Eigen::Index begin = group_begin_[static_cast<std::size_t>(u)];
    const Eigen::Index len = group_begin_[static_cast<std::size_t>(u) + 1] - begin;
    if (grad != nullptr) grad->setZero(dim());
    if (len == 0) return 0.0;
    const auto block = deltas_.middleRows(begin, len);
    const Eigen::VectorXd s = block * theta_u;
    static const double kLogFloor = std::log(1e-300);
    double nll = 0.0;
    Eigen::VectorXd dlds(len);
    for (Eigen::Index j = 0; j < len; ++j) {
      const double n1 = wins_(begin + j);
      const double n0 = losses_(begin + j);
      const double lp = log_sigmoid(s(j));
      const double lq = log_sigmoid(-s(j));
      double d = 0.0;
      if (lp > kLogFloor) {
        nll -= n1 * lp;
        d -= n1 * sigmoid(-s(j));
      } else {
        nll -= n1 * kLogFloor;
      }
      if (lq > kLogFloor) {
        nll -= n0 * lq;
        d += n0 * sigmoid(s(j));
      } else {
        nll -= n0 * kLogFloor;
      }
      dlds(j) = d;
    }
    if (grad != nullptr) grad->noalias() = block.transpose() * dlds;
    return nll;
  }

  /// Mean loss over all N records for the d x U matrix theta.
  double loss(const Eigen::MatrixXd& theta, Eigen::MatrixXd* grad = nullptr) const {
    double total = 0.0;
    if (grad != nullptr) grad->resize(dim(), num_groups_);
    Eigen::VectorXd g;
    for (Eigen::Index u = 0; u < num_groups_; ++u) {
      total += group_nll(u, theta.col(u), grad != nullptr ? &g : nullptr);
      if (grad != nullptr) grad->col(u) = g / n_total_;
    }
    return total / n_total_;
  }

 private:
  Eigen::Index num_groups_;
  double n_total_;
  Eigen::MatrixXd deltas_;
  Eigen::VectorXd wins_;
  Eigen::VectorXd losses_;
  std::vector<Eigen::Index> group_begin_;
  std::vector<double> group_count_;
};

/// -(1/N) sum_i [z_i log sigma(<delta_i, B w_{u_i}>) + (1 - z_i) log(1 - sigma(...))].
inline double bce_loss(const SharedRepParams& params, const PreferenceDataset& data,
                       const FeatureMap& phi) {
  return PreferenceObjective(data, phi).loss(params.theta());
}

struct BceGradients {
  Eigen::MatrixXd grad_b;  // d x K
  Eigen::MatrixXd grad_w;  // K x U
};

inline BceGradients bce_gradients(const SharedRepParams& params, const PreferenceDataset& data,
                                  const FeatureMap& phi) {
  Eigen::MatrixXd g;
  PreferenceObjective(data, phi).loss(params.theta(), &g);
  return {g * params.w.transpose(), params.b.transpose() * g};
}

namespace detail {

/// One projected-gradient step with Armijo backtracking along the
/// projection arc. Returns false when no decrease is possible.
template <class Eval, class Project>
bool backtracking_step(Eigen::MatrixXd& x, double& fx, const Eigen::MatrixXd& grad, double& step,
                       double armijo, Eval&& eval, Project&& project) {
  double t = step;
  while (t > 1e-20) {
    Eigen::MatrixXd cand = project(x - t * grad);
    const double fc = eval(cand);
    if (fc <= fx + armijo * (grad.array() * (cand - x).array()).sum()) {
      x = std::move(cand);
      fx = fc;
      step = t;
      return true;
    }
    t *= 0.5;
  }
  step = t;
  return false;
}

inline double elapsed_seconds(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

struct SharedRepRun {
  SharedRepParams params;
  FitReport report;
};

inline SharedRepRun fit_sharedrep_from(const PreferenceObjective& obj, SharedRepParams init,
                                       double b_max, const FitOptions& opts) {
  auto project_b = [b_max](const Eigen::MatrixXd& b) { return project_column_ball(b, b_max); };
  auto project_w = [](const Eigen::MatrixXd& w) { return project_simplex_columns(w); };

  Eigen::MatrixXd b = project_b(init.b);
  Eigen::MatrixXd w = project_w(init.w);
  double step_b = opts.lr0;
  double step_w = opts.lr0;
  Eigen::MatrixXd g;
  double f = obj.loss(b * w, &g);

  FitReport rep;
  int it = 0;
  for (; it < opts.max_iters; ++it) {
    Eigen::MatrixXd gb = g * w.transpose();
    Eigen::MatrixXd gw = b.transpose() * g;
    const double pg = std::sqrt((b - project_b(b - gb)).squaredNorm() +
                                (w - project_w(w - gw)).squaredNorm());
    rep.grad_norm = pg;
    if (pg <= opts.tol) {
      rep.converged = true;
      break;
    }
    step_b = std::min(step_b * 2.0, 1e6);
    const bool moved_b = backtracking_step(
        b, f, gb, step_b, opts.armijo, [&](const Eigen::MatrixXd& cand) { return obj.loss(cand * w); },
        project_b);
    f = obj.loss(b * w, &g);
    gw = b.transpose() * g;
    step_w = std::min(step_w * 2.0, 1e6);
    const bool moved_w = backtracking_step(
        w, f, gw, step_w, opts.armijo, [&](const Eigen::MatrixXd& cand) { return obj.loss(b * cand); },
        project_w);
    f = obj.loss(b * w, &g);
    if (!moved_b && !moved_w) break;  // stalled at machine precision
  }
  rep.iterations = it;
  rep.final_loss = f;
  return {{std::move(b), std::move(w)}, rep};
}

}  // namespace detail

/// Shared-representation MLE by alternating projected gradient descent with
/// `opts.restarts` seeded starts; the lowest final loss wins (ties to the
/// earliest start). `warm_start`, when given, replaces the first start.
inline std::pair<SharedRepParams, FitReport> fit_sharedrep(
    const PreferenceDataset& data, const FeatureMap& phi, Eigen::Index k, double b_max,
    const FitOptions& opts = {}, const std::optional<SharedRepParams>& warm_start = std::nullopt) {
  if (data.empty()) throw std::invalid_argument("fit_sharedrep: empty dataset");
  if (k < 1 || k > phi.dim()) throw std::invalid_argument("fit_sharedrep: need 1 <= K <= d");
  const auto start = std::chrono::steady_clock::now();
  const PreferenceObjective obj(data, phi);
  const Eigen::Index d = phi.dim();
  const Eigen::Index u = data.num_groups();

  std::optional<detail::SharedRepRun> best;
  int total_iters = 0;
  const int restarts = std::max(1, opts.restarts);
  for (int r = 0; r < restarts; ++r) {
    SharedRepParams init;
    if (r == 0 && warm_start) {
      init = *warm_start;
    } else {
      CounterRng rng(opts.seed, Stream::optimizer, static_cast<std::uint64_t>(r));
      init.b.resize(d, k);
      for (Eigen::Index c = 0; c < k; ++c) {
        Eigen::VectorXd col = rng.normal_vector(d);
        init.b.col(c) = col * (0.5 * b_max / col.norm());
      }
      init.w.resize(k, u);
      for (Eigen::Index g = 0; g < u; ++g) {
        init.w.col(g) = r == 0 ? Eigen::VectorXd::Constant(k, 1.0 / static_cast<double>(k))
                               : uniform_simplex(rng, k);
      }
    }
    auto run = detail::fit_sharedrep_from(obj, std::move(init), b_max, opts);
    total_iters += run.report.iterations;
    if (!best || run.report.final_loss < best->report.final_loss) best = std::move(run);
  }
  best->report.iterations = total_iters;
  best->report.wall_time = detail::elapsed_seconds(start);
  return {std::move(best->params), best->report};
}

/// Per-group MLEs, each fit only on its own group's records.
inline std::pair<MaxMinParams, FitReport> fit_maxmin(const PreferenceDataset& data,
                                                     const FeatureMap& phi, double b_max,
                                                     const FitOptions& opts = {}) {
  if (data.empty()) throw std::invalid_argument("fit_maxmin: empty dataset");
  for (Eigen::Index g = 0; g < data.num_groups(); ++g) {
    if (data.group_empty(g)) {
      throw std::invalid_argument("fit_maxmin: group " + std::to_string(g) + " has no records");
    }
  }
  const auto start = std::chrono::steady_clock::now();
  const PreferenceObjective obj(data, phi);
  const Eigen::Index d = phi.dim();
  auto project = [b_max](const Eigen::MatrixXd& t) { return project_column_ball(t, b_max); };

  MaxMinParams out{Eigen::MatrixXd::Zero(d, data.num_groups())};
  FitReport rep;
  rep.converged = true;
  const int restarts = std::max(1, opts.restarts);
  for (Eigen::Index g = 0; g < data.num_groups(); ++g) {
    const double n_u = obj.n_group(g);
    auto eval = [&](const Eigen::MatrixXd& t, Eigen::VectorXd* grad) {
      const double v = obj.group_nll(g, t.col(0), grad) / n_u;
      if (grad != nullptr) *grad /= n_u;
      return v;
    };
    double best_f = std::numeric_limits<double>::infinity();
    Eigen::VectorXd best_theta;
    double best_pg = 0.0;
    bool best_conv = false;
    for (int r = 0; r < restarts; ++r) {
      Eigen::MatrixXd theta = Eigen::MatrixXd::Zero(d, 1);
      if (r > 0) {
        CounterRng rng(opts.seed, Stream::optimizer,
                       static_cast<std::uint64_t>(g) * 1000003ULL + static_cast<std::uint64_t>(r));
        Eigen::VectorXd v = rng.normal_vector(d);
        theta.col(0) = v * (0.5 * b_max / v.norm());
      }
      Eigen::VectorXd grad;
      double f = eval(theta, &grad);
      double step = opts.lr0;
      double pg = 0.0;
      bool conv = false;
      int it = 0;
      for (; it < opts.max_iters; ++it) {
        Eigen::MatrixXd gm = grad;
        pg = (theta - project(theta - gm)).norm();
        if (pg <= opts.tol) {
          conv = true;
          break;
        }
        step = std::min(step * 2.0, 1e6);
        const bool moved = detail::backtracking_step(
            theta, f, gm, step, opts.armijo,
            [&](const Eigen::MatrixXd& cand) { return eval(cand, nullptr); }, project);
        f = eval(theta, &grad);
        if (!moved) break;
      }
      rep.iterations += it;
      if (f < best_f) {
        best_f = f;
        best_theta = theta.col(0);
        best_pg = pg;
        best_conv = conv;
      }
    }
    out.theta.col(g) = best_theta;
    rep.grad_norm = std::max(rep.grad_norm, best_pg);
    rep.converged = rep.converged && best_conv;
  }
  rep.final_loss = obj.loss(out.theta);
  rep.wall_time = detail::elapsed_seconds(start);
  return {std::move(out), rep};
}

}  // namespace sharedrep
