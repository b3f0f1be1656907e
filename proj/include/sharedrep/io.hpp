#pragma once

// JSON documents for worlds, fitted parameters and group selections; CSV for
// preference datasets and policies.

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "sharedrep/harness.hpp"
#include "sharedrep/policy_engine.hpp"
#include "sharedrep/preference_data.hpp"
#include "sharedrep/reward_estimation.hpp"
#include "sharedrep/tabular_world.hpp"

namespace sharedrep {

/// Row-major nested arrays.
inline nlohmann::json matrix_to_json(const Eigen::MatrixXd& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    std::vector<double> row(static_cast<std::size_t>(m.cols()));
    for (Eigen::Index c = 0; c < m.cols(); ++c) row[static_cast<std::size_t>(c)] = m(r, c);
    rows.push_back(row);
  }
  return rows;
}

inline Eigen::MatrixXd matrix_from_json(const nlohmann::json& j, const std::string& what) {
  if (!j.is_array()) throw std::invalid_argument(what + ": expected an array of rows");
  const auto rows = static_cast<Eigen::Index>(j.size());
  const Eigen::Index cols = rows == 0 ? 0 : static_cast<Eigen::Index>(j.at(0).size());
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const auto& row = j.at(static_cast<std::size_t>(r));
    if (static_cast<Eigen::Index>(row.size()) != cols) throw std::invalid_argument(what + ": ragged rows");
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = row.at(static_cast<std::size_t>(c)).get<double>();
  }
  return m;
}

inline nlohmann::json vector_to_json(const Eigen::VectorXd& v) {
  return std::vector<double>(v.data(), v.data() + v.size());
}

inline Eigen::VectorXd vector_from_json(const nlohmann::json& j) {
  const auto v = j.get<std::vector<double>>();
  return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

/// {config, features (|X||Y| x d, row x*|Y|+y), rho, b_star, w_star, ref_policy}.
inline nlohmann::json world_to_json(const World& w) {
  return {{"config", to_json(w.config)},
          {"features", matrix_to_json(w.features.table())},
          {"rho", vector_to_json(w.prompts.rho)},
          {"b_star", matrix_to_json(w.truth.b_star)},
          {"w_star", matrix_to_json(w.truth.w_star)},
          {"ref_policy", matrix_to_json(w.truth.ref_policy.probs())}};
}

inline World world_from_json(const nlohmann::json& j) {
  World w;
  w.config = world_config_from_json(j.at("config"));
  w.features = FeatureMap(matrix_from_json(j.at("features"), "features"), w.config.num_prompts,
                          w.config.num_responses, w.config.l_max);
  Eigen::VectorXd rho = vector_from_json(j.at("rho"));
  w.prompts = PromptDistribution{rho, rho.minCoeff()};
  w.truth.b_star = matrix_from_json(j.at("b_star"), "b_star");
  w.truth.w_star = matrix_from_json(j.at("w_star"), "w_star");
  w.truth.theta_star = w.truth.b_star * w.truth.w_star;
  w.truth.ref_policy = PolicyTable(matrix_from_json(j.at("ref_policy"), "ref_policy"));
  w.validate();
  return w;
}

inline nlohmann::json to_json(const FitReport& r) {
  return {{"final_loss", r.final_loss},
          {"iterations", r.iterations},
          {"grad_norm", r.grad_norm},
          {"converged", r.converged},
          {"wall_time", r.wall_time}};
}

inline nlohmann::json params_to_json(const SharedRepParams& p, const FitReport& r) {
  return {{"method", "sharedrep"},
          {"b", matrix_to_json(p.b)},
          {"w", matrix_to_json(p.w)},
          {"theta", matrix_to_json(p.theta())},
          {"fit_report", to_json(r)}};
}

inline nlohmann::json params_to_json(const MaxMinParams& p, const FitReport& r) {
  return {{"method", "maxmin"}, {"theta", matrix_to_json(p.theta)}, {"fit_report", to_json(r)}};
}

/// The d x U reward parameters of any params document.
inline Eigen::MatrixXd theta_from_json(const nlohmann::json& j) {
  return matrix_from_json(j.at("theta"), "theta");
}

inline nlohmann::json to_json(const GroupSelection& s) {
  return {{"chosen", s.chosen}, {"scores", vector_to_json(s.scores)}, {"tie", s.tie}};
}

inline void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
  std::ofstream out(path);
  out << j.dump(2) << '\n';
  if (!out) throw std::runtime_error("cannot write " + path.string());
}

inline nlohmann::json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(path.string() + ": " + e.what());
  }
}

inline constexpr const char* kDatasetHeader = "prompt,first,second,label,group";

inline void write_dataset_csv(std::ostream& out, const PreferenceDataset& data) {
  out << kDatasetHeader << '\n';
  for (const auto& r : data.records()) {
    out << r.prompt << ',' << r.first << ',' << r.second << ',' << r.label << ',' << r.group << '\n';
  }
}

/// Covariances are not stored; they are recomputed from the records.
inline PreferenceDataset read_dataset_csv(std::istream& in, Eigen::Index num_groups, const FeatureMap& phi) {
  std::string line;
  if (!std::getline(in, line) || line != kDatasetHeader) {
    throw std::invalid_argument(std::string("dataset CSV: expected header ") + kDatasetHeader);
  }
  std::vector<PreferenceRecord> records;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ls(line);
    PreferenceRecord r;
    char c1 = 0, c2 = 0, c3 = 0, c4 = 0;
    if (!(ls >> r.prompt >> c1 >> r.first >> c2 >> r.second >> c3 >> r.label >> c4 >> r.group) ||
        c1 != ',' || c2 != ',' || c3 != ',' || c4 != ',') {
      throw std::invalid_argument("dataset CSV: malformed line " + std::to_string(lineno));
    }
    records.push_back(r);
  }
  return PreferenceDataset(std::move(records), num_groups, phi);
}

inline void write_policy_csv(std::ostream& out, const PolicyTable& p) {
  out << "prompt,response,probability\n" << std::setprecision(17);
  for (Eigen::Index x = 0; x < p.num_prompts(); ++x) {
    for (Eigen::Index y = 0; y < p.num_responses(); ++y) out << x << ',' << y << ',' << p(x, y) << '\n';
  }
}

}  // namespace sharedrep
