#pragma once

// Finite synthetic worlds: prompts, responses, an explicit feature table,
// a prompt distribution and a ground-truth shared low-rank reward model.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "sharedrep/policy_table.hpp"
#include "sharedrep/rng.hpp"

namespace sharedrep {

inline constexpr double kRhoFloor = 1e-3;

struct WorldConfig {
  Eigen::Index num_prompts = 8;
  Eigen::Index num_responses = 6;
  Eigen::Index feature_dim = 16;
  Eigen::Index shared_dim = 3;
  Eigen::Index num_groups = 2;
  double l_max = 1.0;
  double b_max = 1.0;
  std::vector<double> group_proportions = {0.5, 0.5};
  std::uint64_t rng_seed = 0;

  /// Throws std::invalid_argument naming the first offending field.
  void validate() const {
    auto fail = [](const std::string& field, const std::string& why) {
      throw std::invalid_argument("WorldConfig." + field + ": " + why);
    };
    if (num_prompts < 1) fail("num_prompts", "must be >= 1");
    if (num_responses < 1) fail("num_responses", "must be >= 1");
    if (feature_dim < 1) fail("feature_dim", "must be >= 1");
    if (shared_dim < 1) fail("shared_dim", "must be >= 1");
    if (shared_dim > feature_dim) fail("shared_dim", "must not exceed feature_dim");
    if (num_groups < 1) fail("num_groups", "must be >= 1");
    if (!(l_max > 0.0) || !std::isfinite(l_max)) fail("l_max", "must be a positive real");
    if (!(b_max > 0.0) || !std::isfinite(b_max)) fail("b_max", "must be a positive real");
    if (static_cast<Eigen::Index>(group_proportions.size()) != num_groups) {
      fail("group_proportions", "must have num_groups entries");
    }
    double total = 0.0;
    for (double p : group_proportions) {
      if (!(p >= 0.0) || !std::isfinite(p)) fail("group_proportions", "entries must be >= 0");
      total += p;
    }
    if (std::abs(total - 1.0) > 1e-12) fail("group_proportions", "must sum to 1");
  }
};

/// phi(x, y) stored as row x * |Y| + y of a (|X||Y|) x d matrix.
class FeatureMap {
 public:
  FeatureMap() = default;
  FeatureMap(Eigen::MatrixXd table, Eigen::Index num_prompts, Eigen::Index num_responses,
             double l_max)
      : table_(std::move(table)), num_prompts_(num_prompts), num_responses_(num_responses),
        l_max_(l_max) {
    if (table_.rows() != num_prompts_ * num_responses_) {
      throw std::invalid_argument("FeatureMap: table must have |X|*|Y| rows");
    }
  }

  Eigen::Index num_prompts() const noexcept { return num_prompts_; }
  Eigen::Index num_responses() const noexcept { return num_responses_; }
  Eigen::Index dim() const noexcept { return table_.cols(); }
  double l_max() const noexcept { return l_max_; }
  const Eigen::MatrixXd& table() const noexcept { return table_; }

  auto operator()(Eigen::Index x, Eigen::Index y) const {
    check(x, y);
    return table_.row(x * num_responses_ + y);
  }

  /// The |Y| x d block of features for prompt x.
  auto prompt_block(Eigen::Index x) const {
    return table_.middleRows(x * num_responses_, num_responses_);
  }

  double max_norm() const { return table_.rowwise().norm().maxCoeff(); }

  bool within_bound(double slack = 1e-12) const { return max_norm() <= l_max_ + slack; }

  void check(Eigen::Index x, Eigen::Index y) const {
    if (x < 0 || x >= num_prompts_ || y < 0 || y >= num_responses_) {
      throw std::out_of_range("FeatureMap: prompt/response index out of range");
    }
  }

 private:
  Eigen::MatrixXd table_;
  Eigen::Index num_prompts_ = 0;
  Eigen::Index num_responses_ = 0;
  double l_max_ = 0.0;
};

struct PromptDistribution {
  Eigen::VectorXd rho;
  double rho_min = 0.0;

  static PromptDistribution from(Eigen::VectorXd rho) {
    if (rho.size() == 0 || (rho.array() < 0.0).any() || std::abs(rho.sum() - 1.0) > 1e-12) {
      throw std::invalid_argument("PromptDistribution: rho must be a probability vector");
    }
    const double m = rho.minCoeff();
    if (!(m > 0.0)) throw std::invalid_argument("PromptDistribution: rho_min must be > 0");
    return {std::move(rho), m};
  }
};

struct GroundTruth {
  Eigen::MatrixXd b_star;      // d x K
  Eigen::MatrixXd w_star;      // K x U, simplex columns
  Eigen::MatrixXd theta_star;  // d x U, theta_star.col(u) = b_star * w_star.col(u)
  PolicyTable ref_policy;

  Eigen::Index num_groups() const noexcept { return w_star.cols(); }
};

inline bool on_simplex(const Eigen::Ref<const Eigen::VectorXd>& w, double tol) {
  return (w.array() >= -tol).all() && std::abs(w.sum() - 1.0) <= tol;
}

struct World {
  WorldConfig config;
  FeatureMap features;
  PromptDistribution prompts;
  GroundTruth truth;

  Eigen::Index num_prompts() const noexcept { return features.num_prompts(); }
  Eigen::Index num_responses() const noexcept { return features.num_responses(); }
  Eigen::Index dim() const noexcept { return features.dim(); }
  Eigen::Index num_groups() const noexcept { return truth.num_groups(); }

  /// Checks the linear-reward, simplex and prompt-coverage assumptions.
  void validate() const {
    config.validate();
    if (!features.within_bound(1e-12)) throw std::invalid_argument("World: ||phi|| exceeds l_max");
    const auto& gt = truth;
    if (gt.b_star.rows() != dim() || gt.b_star.cols() != config.shared_dim) {
      throw std::invalid_argument("World: b_star must be d x K");
    }
    if (gt.w_star.rows() != config.shared_dim || gt.w_star.cols() != config.num_groups) {
      throw std::invalid_argument("World: w_star must be K x U");
    }
    for (Eigen::Index k = 0; k < gt.b_star.cols(); ++k) {
      if (gt.b_star.col(k).norm() > config.b_max * (1.0 + 1e-12)) {
        throw std::invalid_argument("World: b_star column exceeds b_max");
      }
    }
    for (Eigen::Index u = 0; u < gt.w_star.cols(); ++u) {
      if (!on_simplex(gt.w_star.col(u), 1e-12)) {
        throw std::invalid_argument("World: w_star column off the simplex");
      }
      if ((gt.theta_star.col(u) - gt.b_star * gt.w_star.col(u)).cwiseAbs().maxCoeff() > 1e-12) {
        throw std::invalid_argument("World: theta_star inconsistent with b_star * w_star");
      }
    }
    if (prompts.rho.size() != num_prompts() || !(prompts.rho_min > 0.0)) {
      throw std::invalid_argument("World: rho must cover every prompt with positive mass");
    }
    if (gt.ref_policy.num_prompts() != num_prompts() ||
        gt.ref_policy.num_responses() != num_responses() || !gt.ref_policy.is_row_stochastic() ||
        !gt.ref_policy.strictly_positive()) {
      throw std::invalid_argument("World: reference policy rows must be strictly positive");
    }
  }
};

/// Samples a world deterministically from config.rng_seed.
inline World build_world(const WorldConfig& config) {
  config.validate();
  CounterRng rng(config.rng_seed, Stream::world);
  const Eigen::Index nx = config.num_prompts;
  const Eigen::Index ny = config.num_responses;
  const Eigen::Index d = config.feature_dim;
  const Eigen::Index k = config.shared_dim;
  const Eigen::Index u = config.num_groups;

  Eigen::MatrixXd table(nx * ny, d);
  for (Eigen::Index r = 0; r < table.rows(); ++r) table.row(r) = rng.normal_vector(d).transpose();
  const double largest = table.rowwise().norm().maxCoeff();
  if (largest > 0.0) table *= config.l_max / largest;
  // Rounding can leave the maximum a hair above l_max.
  for (Eigen::Index r = 0; r < table.rows(); ++r) {
    const double n = table.row(r).norm();
    if (n > config.l_max) table.row(r) *= config.l_max / n;
  }

  Eigen::MatrixXd b(d, k);
  for (Eigen::Index c = 0; c < k; ++c) {
    Eigen::VectorXd col = rng.normal_vector(d);
    b.col(c) = col * (config.b_max / col.norm());
    const double n = b.col(c).norm();
    if (n > config.b_max) b.col(c) *= config.b_max / n;
  }
  Eigen::MatrixXd w(k, u);
  for (Eigen::Index g = 0; g < u; ++g) w.col(g) = uniform_simplex(rng, k);

  Eigen::VectorXd rho(nx);
  for (Eigen::Index x = 0; x < nx; ++x) rho(x) = -std::log(rng.uniform_open());
  rho /= rho.sum();
  rho = rho.cwiseMax(kRhoFloor);
  rho /= rho.sum();

  World world{config,
              FeatureMap(std::move(table), nx, ny, config.l_max),
              PromptDistribution{rho, rho.minCoeff()},
              GroundTruth{b, w, b * w, PolicyTable::uniform(nx, ny)}};
  return world;
}

inline double reward_of(const Eigen::Ref<const Eigen::VectorXd>& theta, const FeatureMap& phi,
                        Eigen::Index x, Eigen::Index y) {
  if (theta.size() != phi.dim()) throw std::invalid_argument("reward_of: dimension mismatch");
  return phi(x, y).dot(theta.transpose());
}

/// |X| x |Y| table of <phi(x, y), theta>.
inline Eigen::MatrixXd reward_table(const Eigen::Ref<const Eigen::VectorXd>& theta,
                                    const FeatureMap& phi) {
  if (theta.size() != phi.dim()) throw std::invalid_argument("reward_table: dimension mismatch");
  Eigen::VectorXd flat = phi.table() * theta;
  return Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
      flat.data(), phi.num_prompts(), phi.num_responses());
}

/// One reward table per column of theta (d x U).
inline std::vector<Eigen::MatrixXd> reward_tables(const Eigen::MatrixXd& theta,
                                                  const FeatureMap& phi) {
  std::vector<Eigen::MatrixXd> out;
  out.reserve(static_cast<std::size_t>(theta.cols()));
  for (Eigen::Index u = 0; u < theta.cols(); ++u) out.push_back(reward_table(theta.col(u), phi));
  return out;
}

/// max_x min_{y != y'} |<phi(x,y) - phi(x,y'), b w>| at a fixed (b, w).
inline double reward_gap_xi(const FeatureMap& phi, const Eigen::MatrixXd& b,
                            const Eigen::Ref<const Eigen::VectorXd>& w) {
  if (phi.num_responses() < 2) {
    throw std::invalid_argument("reward_gap_xi: needs at least two responses");
  }
  const Eigen::VectorXd theta = b * w;
  const Eigen::MatrixXd r = reward_table(theta, phi);
  double best = 0.0;
  std::vector<double> row(static_cast<std::size_t>(r.cols()));
  for (Eigen::Index x = 0; x < r.rows(); ++x) {
    for (Eigen::Index y = 0; y < r.cols(); ++y) row[static_cast<std::size_t>(y)] = r(x, y);
    std::sort(row.begin(), row.end());
    double gap = std::numeric_limits<double>::infinity();
    for (std::size_t i = 1; i < row.size(); ++i) gap = std::min(gap, row[i] - row[i - 1]);
    best = std::max(best, gap);
  }
  return best;
}

}  // namespace sharedrep
