#pragma once

// Bradley-Terry preference sampling with group labels, and the
// difference-feature covariance statistics used by both estimators.

#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Dense>

#include "sharedrep/rng.hpp"
#include "sharedrep/tabular_world.hpp"

namespace sharedrep {

/// Numerically stable logistic sigmoid.
inline double sigmoid(double t) noexcept {
  if (t >= 0.0) return 1.0 / (1.0 + std::exp(-t));
  const double e = std::exp(t);
  return e / (1.0 + e);
}

/// log(sigmoid(t)) without overflow: -log1p(exp(-t)).
inline double log_sigmoid(double t) noexcept {
  if (t >= 0.0) return -std::log1p(std::exp(-t));
  return t - std::log1p(std::exp(t));
}

/// P(first preferred) = sigma(r1 - r2).
inline double bt_preference_prob(double r1, double r2) noexcept { return sigmoid(r1 - r2); }

struct PreferenceRecord {
  Eigen::Index prompt = 0;
  Eigen::Index first = 0;
  Eigen::Index second = 0;
  int label = 0;  // 1 if `first` was preferred
  Eigen::Index group = 0;

  friend bool operator==(const PreferenceRecord&, const PreferenceRecord&) = default;
};

class PreferenceDataset {
 public:
  PreferenceDataset() = default;

  /// Builds the dataset and caches delta_i = phi(x_i, y_i) - phi(x_i, y'_i).
  PreferenceDataset(std::vector<PreferenceRecord> records, Eigen::Index num_groups,
                    const FeatureMap& phi)
      : records_(std::move(records)), num_groups_(num_groups),
        n_per_group_(static_cast<std::size_t>(num_groups), 0) {
    if (num_groups_ < 1) throw std::invalid_argument("PreferenceDataset: num_groups must be >= 1");
    diffs_.resize(static_cast<Eigen::Index>(records_.size()), phi.dim());
    for (std::size_t i = 0; i < records_.size(); ++i) {
      const auto& r = records_[i];
      if (r.first == r.second) throw std::invalid_argument("PreferenceDataset: first == second");
      if (r.group < 0 || r.group >= num_groups_) {
        throw std::invalid_argument("PreferenceDataset: group index out of range");
      }
      if (r.label != 0 && r.label != 1) throw std::invalid_argument("PreferenceDataset: label");
      diffs_.row(static_cast<Eigen::Index>(i)) = phi(r.prompt, r.first) - phi(r.prompt, r.second);
      ++n_per_group_[static_cast<std::size_t>(r.group)];
    }
  }

  const std::vector<PreferenceRecord>& records() const noexcept { return records_; }
  std::size_t size() const noexcept { return records_.size(); }
  bool empty() const noexcept { return records_.empty(); }
  Eigen::Index num_groups() const noexcept { return num_groups_; }
  const std::vector<std::size_t>& n_per_group() const noexcept { return n_per_group_; }
  std::size_t n_group(Eigen::Index u) const { return n_per_group_.at(static_cast<std::size_t>(u)); }
  bool group_empty(Eigen::Index u) const { return n_group(u) == 0; }
  bool any_group_empty() const {
    for (auto n : n_per_group_) {
      if (n == 0) return true;
    }
    return false;
  }
  /// N x d matrix of cached difference features.
  const Eigen::MatrixXd& diffs() const noexcept { return diffs_; }

 private:
  std::vector<PreferenceRecord> records_;
  Eigen::Index num_groups_ = 1;
  std::vector<std::size_t> n_per_group_;
  Eigen::MatrixXd diffs_;
};

enum class PromptSampling { from_rho, uniform };
enum class PairSampling { uniform_without_replacement, from_ref_policy };
enum class GroupAssignment { iid, fixed_quota };

struct SamplingOptions {
  PromptSampling prompts = PromptSampling::from_rho;
  PairSampling pairs = PairSampling::uniform_without_replacement;
  GroupAssignment groups = GroupAssignment::iid;
};

namespace detail {

inline std::size_t sample_categorical(CounterRng& rng, const Eigen::Ref<const Eigen::VectorXd>& p) {
  const double u = rng.uniform();
  double acc = 0.0;
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    acc += p(i);
    if (u < acc) return static_cast<std::size_t>(i);
  }
  // u landed in the rounding slack above the cumulative sum.
  for (Eigen::Index i = p.size() - 1; i >= 0; --i) {
    if (p(i) > 0.0) return static_cast<std::size_t>(i);
  }
  return 0;
}

/// Largest-remainder apportionment of n over proportions.
inline std::vector<std::size_t> quota_counts(std::size_t n, const std::vector<double>& props) {
  std::vector<std::size_t> counts(props.size());
  std::vector<double> rem(props.size());
  std::size_t assigned = 0;
  for (std::size_t u = 0; u < props.size(); ++u) {
    const double exact = props[u] * static_cast<double>(n);
    counts[u] = static_cast<std::size_t>(std::floor(exact));
    rem[u] = exact - static_cast<double>(counts[u]);
    assigned += counts[u];
  }
  std::vector<std::size_t> order(props.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return rem[a] > rem[b]; });
  for (std::size_t i = 0; assigned < n; ++i, ++assigned) ++counts[order[i % order.size()]];
  return counts;
}

}  // namespace detail

inline void check_proportions(const std::vector<double>& props, const std::string& where) {
  if (props.empty()) throw std::invalid_argument(where + ": empty proportion vector");
  double total = 0.0;
  for (double p : props) {
    if (!(p >= 0.0) || !std::isfinite(p)) throw std::invalid_argument(where + ": negative proportion");
    total += p;
  }
  if (std::abs(total - 1.0) > 1e-9) throw std::invalid_argument(where + ": proportions must sum to 1");
}

/// Samples n_total Bradley-Terry comparisons; each record's label follows
/// the ground-truth reward of its own group.
inline PreferenceDataset sample_dataset(const World& world, std::size_t n_total,
                                        const std::vector<double>& proportions,
                                        const SamplingOptions& opts, std::uint64_t seed) {
  if (n_total == 0) throw std::invalid_argument("sample_dataset: N must be >= 1");
  check_proportions(proportions, "sample_dataset");
  if (static_cast<Eigen::Index>(proportions.size()) != world.num_groups()) {
    throw std::invalid_argument("sample_dataset: need one proportion per group");
  }
  const Eigen::Index ny = world.num_responses();
  if (ny < 2) throw std::invalid_argument("sample_dataset: need at least two responses");

  CounterRng rng(seed, Stream::data);
  const Eigen::VectorXd group_p =
      Eigen::Map<const Eigen::VectorXd>(proportions.data(), static_cast<Eigen::Index>(proportions.size()));

  std::vector<Eigen::Index> groups(n_total);
  if (opts.groups == GroupAssignment::fixed_quota) {
    const auto counts = detail::quota_counts(n_total, proportions);
    std::size_t i = 0;
    for (std::size_t u = 0; u < counts.size(); ++u) {
      for (std::size_t c = 0; c < counts[u]; ++c) groups[i++] = static_cast<Eigen::Index>(u);
    }
    for (std::size_t j = n_total - 1; j > 0; --j) std::swap(groups[j], groups[rng.below(j + 1)]);
  } else {
    for (auto& g : groups) g = static_cast<Eigen::Index>(detail::sample_categorical(rng, group_p));
  }

  const Eigen::MatrixXd& ref = world.truth.ref_policy.probs();
  std::vector<PreferenceRecord> records;
  records.reserve(n_total);
  for (std::size_t i = 0; i < n_total; ++i) {
    PreferenceRecord r;
    r.group = groups[i];
    r.prompt = opts.prompts == PromptSampling::from_rho
                   ? static_cast<Eigen::Index>(detail::sample_categorical(rng, world.prompts.rho))
                   : static_cast<Eigen::Index>(rng.below(static_cast<std::size_t>(world.num_prompts())));
    if (opts.pairs == PairSampling::uniform_without_replacement) {
      r.first = static_cast<Eigen::Index>(rng.below(static_cast<std::size_t>(ny)));
      auto other = static_cast<Eigen::Index>(rng.below(static_cast<std::size_t>(ny - 1)));
      r.second = other >= r.first ? other + 1 : other;
    } else {
      const Eigen::VectorXd row = ref.row(r.prompt).transpose();
      r.first = static_cast<Eigen::Index>(detail::sample_categorical(rng, row));
      do {
        r.second = static_cast<Eigen::Index>(detail::sample_categorical(rng, row));
      } while (r.second == r.first);
    }
    const auto theta = world.truth.theta_star.col(r.group);
    const double p = bt_preference_prob(reward_of(theta, world.features, r.prompt, r.first),
                                        reward_of(theta, world.features, r.prompt, r.second));
    r.label = rng.uniform() < p ? 1 : 0;
    records.push_back(r);
  }
  return PreferenceDataset(std::move(records), world.num_groups(), world.features);
}

struct CovarianceStats {
  Eigen::MatrixXd sigma;                       // pooled, (1/N) sum delta delta^T
  std::vector<Eigen::MatrixXd> sigma_per_group;  // (1/N_u) sum over H_u
  double lambda = 0.0;
  std::vector<bool> empty_group;  // Sigma_u = 0 for these groups

  bool has_empty_group() const {
    for (bool e : empty_group) {
      if (e) return true;
    }
    return false;
  }
};

inline CovarianceStats compute_covariances(const PreferenceDataset& data, double lambda) {
  if (data.empty()) throw std::invalid_argument("compute_covariances: empty dataset");
  const Eigen::MatrixXd& diffs = data.diffs();
  const Eigen::Index d = diffs.cols();
  CovarianceStats s;
  s.lambda = lambda;
  s.sigma = diffs.transpose() * diffs / static_cast<double>(data.size());
  s.sigma_per_group.assign(static_cast<std::size_t>(data.num_groups()), Eigen::MatrixXd::Zero(d, d));
  s.empty_group.assign(static_cast<std::size_t>(data.num_groups()), false);
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto u = static_cast<std::size_t>(data.records()[i].group);
    const auto row = diffs.row(static_cast<Eigen::Index>(i));
    s.sigma_per_group[u].noalias() += row.transpose() * row;
  }
  for (Eigen::Index u = 0; u < data.num_groups(); ++u) {
    const auto ui = static_cast<std::size_t>(u);
    if (data.group_empty(u)) {
      s.empty_group[ui] = true;
    } else {
      s.sigma_per_group[ui] /= static_cast<double>(data.n_group(u));
    }
  }
  return s;
}

/// Factorized metric A = M + lambda I for ||.||_A and ||.||_{A^-1}.
/// The inverse norm goes through a Cholesky solve, never an explicit inverse.
class ConfidenceMetric {
 public:
  ConfidenceMetric() = default;
  ConfidenceMetric(const Eigen::MatrixXd& m, double lambda)
      : a_(m + lambda * Eigen::MatrixXd::Identity(m.rows(), m.cols())), lambda_(lambda) {
    if (m.rows() != m.cols()) throw std::invalid_argument("ConfidenceMetric: matrix must be square");
    llt_.compute(a_);
    if (llt_.info() != Eigen::Success) {
      throw std::invalid_argument("ConfidenceMetric: M + lambda I is not positive definite");
    }
  }

  static ConfidenceMetric pooled(const CovarianceStats& s) { return {s.sigma, s.lambda}; }
  static ConfidenceMetric group(const CovarianceStats& s, Eigen::Index u) {
    return {s.sigma_per_group.at(static_cast<std::size_t>(u)), s.lambda};
  }

  Eigen::Index dim() const noexcept { return a_.rows(); }
  double lambda() const noexcept { return lambda_; }
  const Eigen::MatrixXd& matrix() const noexcept { return a_; }

  double norm(const Eigen::Ref<const Eigen::VectorXd>& v) const {
    return std::sqrt(std::max(0.0, v.dot(a_ * v)));
  }
  double inv_norm(const Eigen::Ref<const Eigen::VectorXd>& v) const { return whiten(v).norm(); }
  /// A^{-1} v.
  Eigen::VectorXd solve(const Eigen::Ref<const Eigen::VectorXd>& v) const { return llt_.solve(v); }
  /// L^{-1} v where A = L L^T, so ||L^{-1} v|| = ||v||_{A^{-1}}.
  Eigen::VectorXd whiten(const Eigen::Ref<const Eigen::VectorXd>& v) const {
    return llt_.matrixL().solve(v);
  }
  /// Row-wise L^{-1} applied to every row of `rows`.
  Eigen::MatrixXd whiten_rows(const Eigen::MatrixXd& rows) const {
    return llt_.matrixL().solve(rows.transpose()).transpose();
  }

 private:
  Eigen::MatrixXd a_;
  Eigen::LLT<Eigen::MatrixXd> llt_;
  double lambda_ = 0.0;
};

/// sqrt(v^T (M + lambda I) v).
inline double weighted_norm(const Eigen::Ref<const Eigen::VectorXd>& v, const Eigen::MatrixXd& m,
                            double lambda) {
  const Eigen::MatrixXd a = m + lambda * Eigen::MatrixXd::Identity(m.rows(), m.cols());
  return std::sqrt(std::max(0.0, v.dot(a * v)));
}

/// sqrt(v^T (M + lambda I)^{-1} v); throws when M + lambda I is singular.
inline double weighted_inv_norm(const Eigen::Ref<const Eigen::VectorXd>& v, const Eigen::MatrixXd& m,
                                double lambda) {
  return ConfidenceMetric(m, lambda).inv_norm(v);
}

}  // namespace sharedrep
