#pragma once

#include <algorithm>
#include <functional>
#include <vector>

#include <Eigen/Dense>

namespace sharedrep {

/// Euclidean projection onto {w >= 0, sum w = 1} (sort-and-threshold,
/// stable descending sort).
inline Eigen::VectorXd project_simplex(const Eigen::Ref<const Eigen::VectorXd>& v) {
  const Eigen::Index k = v.size();
  std::vector<double> s(v.data(), v.data() + k);
  std::stable_sort(s.begin(), s.end(), std::greater<>());
  double cumsum = 0.0;
  double tau = 0.0;
  for (Eigen::Index j = 0; j < k; ++j) {
    cumsum += s[static_cast<std::size_t>(j)];
    const double t = (cumsum - 1.0) / static_cast<double>(j + 1);
    if (s[static_cast<std::size_t>(j)] - t > 0.0) tau = t;
  }
  return (v.array() - tau).cwiseMax(0.0).matrix();
}

inline Eigen::MatrixXd project_simplex_columns(const Eigen::MatrixXd& w) {
  Eigen::MatrixXd out(w.rows(), w.cols());
  for (Eigen::Index u = 0; u < w.cols(); ++u) out.col(u) = project_simplex(w.col(u));
  return out;
}

/// Rescales every column with norm > b_max onto the sphere of radius b_max.
inline Eigen::MatrixXd project_column_ball(const Eigen::MatrixXd& b, double b_max) {
  Eigen::MatrixXd out = b;
  for (Eigen::Index k = 0; k < out.cols(); ++k) {
    const double n = out.col(k).norm();
    if (n > b_max) out.col(k) *= b_max / n;
  }
  return out;
}

}  // namespace sharedrep
