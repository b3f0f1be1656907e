#pragma once

#include <cmath>
#include <stdexcept>
#include <string>

#include <Eigen/Dense>

namespace sharedrep {

/// Row-stochastic |X| x |Y| table: row x is the response distribution for
/// prompt x. Used for reference, Gibbs, pessimistic and max-min policies.
class PolicyTable {
 public:
  PolicyTable() = default;
  explicit PolicyTable(Eigen::MatrixXd probs) : probs_(std::move(probs)) {}

  static PolicyTable uniform(Eigen::Index num_prompts, Eigen::Index num_responses) {
    return PolicyTable(Eigen::MatrixXd::Constant(num_prompts, num_responses,
                                                 1.0 / static_cast<double>(num_responses)));
  }

  /// Point mass on `choice[x]` for every prompt x.
  static PolicyTable deterministic(const Eigen::VectorXi& choice, Eigen::Index num_responses) {
    Eigen::MatrixXd p = Eigen::MatrixXd::Zero(choice.size(), num_responses);
    for (Eigen::Index x = 0; x < choice.size(); ++x) p(x, choice(x)) = 1.0;
    return PolicyTable(std::move(p));
  }

  const Eigen::MatrixXd& probs() const noexcept { return probs_; }
  Eigen::Index num_prompts() const noexcept { return probs_.rows(); }
  Eigen::Index num_responses() const noexcept { return probs_.cols(); }
  double operator()(Eigen::Index x, Eigen::Index y) const { return probs_(x, y); }
  auto row(Eigen::Index x) const { return probs_.row(x); }

  bool is_row_stochastic(double tol = 1e-10) const {
    if (probs_.size() == 0) return false;
    if ((probs_.array() < 0.0).any() || !probs_.allFinite()) return false;
    return ((probs_.rowwise().sum().array() - 1.0).abs() <= tol).all();
  }

  bool strictly_positive() const { return (probs_.array() > 0.0).all(); }

  void validate(const std::string& what, double tol = 1e-10) const {
    if (!is_row_stochastic(tol)) {
      throw std::invalid_argument(what + ": policy rows must be probability vectors");
    }
  }

 private:
  Eigen::MatrixXd probs_;
};

/// Total-variation distance between row x of two policies.
inline double row_tv(const PolicyTable& a, const PolicyTable& b, Eigen::Index x) {
  return 0.5 * (a.row(x) - b.row(x)).cwiseAbs().sum();
}

inline double max_row_tv(const PolicyTable& a, const PolicyTable& b) {
  double worst = 0.0;
  for (Eigen::Index x = 0; x < a.num_prompts(); ++x) worst = std::max(worst, row_tv(a, b, x));
  return worst;
}

}  // namespace sharedrep
