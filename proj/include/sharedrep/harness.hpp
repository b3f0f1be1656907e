#pragma once

// Seeded end-to-end trials: world -> preference data -> both estimators ->
// max-min policies (fitted and gold) -> metrics, plus grid sweeps and their
// on-disk results.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <mutex>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "sharedrep/complexity.hpp"
#include "sharedrep/policy_engine.hpp"
#include "sharedrep/preference_data.hpp"
#include "sharedrep/reward_estimation.hpp"
#include "sharedrep/rng.hpp"
#include "sharedrep/tabular_world.hpp"

namespace sharedrep {

inline constexpr const char* kVersion = "0.1.0";

enum class Method { sharedrep, maxmin, gold };

inline std::string to_string(Method m) {
  switch (m) {
    case Method::sharedrep: return "sharedrep";
    case Method::maxmin: return "maxmin";
    case Method::gold: return "gold";
  }
  return "?";
}

inline Method method_from_string(const std::string& s) {
  if (s == "sharedrep") return Method::sharedrep;
  if (s == "maxmin") return Method::maxmin;
  if (s == "gold") return Method::gold;
  throw std::invalid_argument("unknown method '" + s + "' (expected sharedrep, maxmin or gold)");
}

struct LambdaRule {
  enum class Kind { fixed, one_over_n } kind = Kind::one_over_n;
  double value = 0.0;

  double at(std::size_t n) const {
    return kind == Kind::fixed ? value : 1.0 / static_cast<double>(n);
  }
};

struct ScenarioConfig {
  WorldConfig world = [] {
    WorldConfig w;
    w.b_max = 3.0;
    return w;
  }();
  std::vector<std::size_t> n_grid = {256, 1024, 4096, 16384};
  std::vector<double> minority_grid = {0.05, 0.2};
  Eigen::Index minority_group = 0;
  double beta = 1.0;
  LambdaRule lambda_rule;
  double delta = 0.1;
  std::vector<std::uint64_t> seeds = {0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
  std::vector<Method> methods = {Method::sharedrep, Method::maxmin, Method::gold};
  double c_sr = 1.0;
  double c_mm = 1.0;
  bool pessimism = true;
  std::size_t xi_samples = 10000;
  FitOptions fit;
  MaxMinOptions solver;
  double lemma_gap_tol = 1e-6;
  SamplingOptions sampling;

  void validate() const {
    auto fail = [](const std::string& f, const std::string& why) {
      throw std::invalid_argument("ScenarioConfig." + f + ": " + why);
    };
    if (n_grid.empty()) fail("n_grid", "must be nonempty");
    for (auto n : n_grid) {
      if (n == 0) fail("n_grid", "entries must be >= 1");
    }
    if (minority_grid.empty()) fail("minority_grid", "must be nonempty");
    for (double p : minority_grid) {
      if (!(p >= 0.0 && p <= 1.0)) fail("minority_grid", "entries must lie in [0, 1]");
    }
    if (seeds.empty()) fail("seeds", "must be nonempty");
    if (std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() != seeds.size()) {
      fail("seeds", "must be distinct");
    }
    if (methods.empty()) fail("methods", "must name at least one method");
    if (!(beta > 0.0)) fail("beta", "must be > 0");
    if (!(delta > 0.0 && delta < 1.0)) fail("delta", "must lie in (0, 1)");
    if (lambda_rule.kind == LambdaRule::Kind::fixed && !(lambda_rule.value > 0.0)) {
      fail("lambda_rule", "fixed lambda must be > 0");
    }
    if (minority_group < 0 || minority_group >= world.num_groups) {
      fail("minority_group", "out of range");
    }
    if (xi_samples == 0) fail("xi_samples", "must be >= 1");
    WorldConfig w = world;
    w.group_proportions = group_proportions(minority_grid.front());
    w.validate();
  }

  /// Minority group gets `minority`, the others share the rest equally.
  std::vector<double> group_proportions(double minority) const {
    const auto u = static_cast<std::size_t>(world.num_groups);
    if (u == 1) return {1.0};
    std::vector<double> p(u, (1.0 - minority) / static_cast<double>(u - 1));
    p[static_cast<std::size_t>(minority_group)] = minority;
    // Put the rounding residue on the last majority group so the sum is 1.
    const std::size_t last = static_cast<std::size_t>(minority_group) == u - 1 ? u - 2 : u - 1;
    const double total = std::accumulate(p.begin(), p.end(), 0.0);
    p[last] += 1.0 - total;
    return p;
  }

  bool has(Method m) const { return std::find(methods.begin(), methods.end(), m) != methods.end(); }
};

// ---- JSON ------------------------------------------------------------------

inline nlohmann::json to_json(const WorldConfig& c) {
  return {{"num_prompts", c.num_prompts}, {"num_responses", c.num_responses},
          {"feature_dim", c.feature_dim}, {"shared_dim", c.shared_dim},
          {"num_groups", c.num_groups},   {"l_max", c.l_max},
          {"b_max", c.b_max},             {"group_proportions", c.group_proportions},
          {"rng_seed", c.rng_seed}};
}

inline WorldConfig world_config_from_json(const nlohmann::json& j, WorldConfig c = {}) {
  c.num_prompts = j.value("num_prompts", c.num_prompts);
  c.num_responses = j.value("num_responses", c.num_responses);
  c.feature_dim = j.value("feature_dim", c.feature_dim);
  c.shared_dim = j.value("shared_dim", c.shared_dim);
  c.num_groups = j.value("num_groups", c.num_groups);
  c.l_max = j.value("l_max", c.l_max);
  c.b_max = j.value("b_max", c.b_max);
  c.rng_seed = j.value("rng_seed", c.rng_seed);
  if (j.contains("group_proportions")) {
    c.group_proportions = j.at("group_proportions").get<std::vector<double>>();
  } else if (static_cast<Eigen::Index>(c.group_proportions.size()) != c.num_groups) {
    c.group_proportions.assign(static_cast<std::size_t>(c.num_groups),
                               1.0 / static_cast<double>(c.num_groups));
  }
  return c;
}

inline nlohmann::json to_json(const ScenarioConfig& s) {
  nlohmann::json methods = nlohmann::json::array();
  for (auto m : s.methods) methods.push_back(to_string(m));
  nlohmann::json lambda_rule =
      s.lambda_rule.kind == LambdaRule::Kind::fixed
          ? nlohmann::json{{"kind", "fixed"}, {"lambda", s.lambda_rule.value}}
          : nlohmann::json{{"kind", "one_over_n"}};
  nlohmann::json world = to_json(s.world);
  world.erase("group_proportions");
  return {{"world", world},
          {"n_grid", s.n_grid},
          {"minority_grid", s.minority_grid},
          {"minority_group", s.minority_group},
          {"beta", s.beta},
          {"lambda_rule", lambda_rule},
          {"delta", s.delta},
          {"seeds", s.seeds},
          {"methods", methods},
          {"c_sr", s.c_sr},
          {"c_mm", s.c_mm},
          {"pessimism", s.pessimism},
          {"xi_samples", s.xi_samples},
          {"fit",
           {{"tol", s.fit.tol},
            {"max_iters", s.fit.max_iters},
            {"restarts", s.fit.restarts},
            {"lr0", s.fit.lr0}}},
          {"solver", {{"rounds", s.solver.rounds}, {"gap_tol", s.solver.gap_tol}}},
          {"lemma_gap_tol", s.lemma_gap_tol},
          {"sampling",
           {{"prompts", s.sampling.prompts == PromptSampling::from_rho ? "from_rho" : "uniform"},
            {"pairs", s.sampling.pairs == PairSampling::uniform_without_replacement
                          ? "uniform_without_replacement"
                          : "from_ref_policy"},
            {"groups", s.sampling.groups == GroupAssignment::iid ? "iid" : "fixed_quota"}}}};
}

/// Missing keys keep their defaults.
inline ScenarioConfig scenario_from_json(const nlohmann::json& j) {
  ScenarioConfig s;
  if (j.contains("world")) {
    s.world = world_config_from_json(j.at("world"), s.world);
  }
  s.n_grid = j.value("n_grid", s.n_grid);
  s.minority_grid = j.value("minority_grid", s.minority_grid);
  s.minority_group = j.value("minority_group", s.minority_group);
  s.beta = j.value("beta", s.beta);
  if (j.contains("lambda_rule")) {
    const auto& lr = j.at("lambda_rule");
    const std::string kind = lr.is_string() ? lr.get<std::string>() : lr.value("kind", "one_over_n");
    if (kind == "fixed") {
      s.lambda_rule = {LambdaRule::Kind::fixed, lr.is_object() ? lr.value("lambda", 0.0) : 0.0};
    } else if (kind == "one_over_n") {
      s.lambda_rule = {LambdaRule::Kind::one_over_n, 0.0};
    } else {
      throw std::invalid_argument("ScenarioConfig.lambda_rule: unknown kind '" + kind + "'");
    }
  }
  s.delta = j.value("delta", s.delta);
  s.seeds = j.value("seeds", s.seeds);
  if (j.contains("methods")) {
    s.methods.clear();
    for (const auto& m : j.at("methods")) s.methods.push_back(method_from_string(m.get<std::string>()));
  }
  s.c_sr = j.value("c_sr", s.c_sr);
  s.c_mm = j.value("c_mm", s.c_mm);
  s.pessimism = j.value("pessimism", s.pessimism);
  s.xi_samples = j.value("xi_samples", s.xi_samples);
  if (j.contains("fit")) {
    const auto& f = j.at("fit");
    s.fit.tol = f.value("tol", s.fit.tol);
    s.fit.max_iters = f.value("max_iters", s.fit.max_iters);
    s.fit.restarts = f.value("restarts", s.fit.restarts);
    s.fit.lr0 = f.value("lr0", s.fit.lr0);
  }
  if (j.contains("solver")) {
    const auto& f = j.at("solver");
    s.solver.rounds = f.value("rounds", s.solver.rounds);
    s.solver.gap_tol = f.value("gap_tol", s.solver.gap_tol);
  }
  s.lemma_gap_tol = j.value("lemma_gap_tol", s.lemma_gap_tol);
  if (j.contains("sampling")) {
    const auto& f = j.at("sampling");
    const std::string prompts = f.value("prompts", "from_rho");
    const std::string pairs = f.value("pairs", "uniform_without_replacement");
    const std::string groups = f.value("groups", "iid");
    if (prompts != "from_rho" && prompts != "uniform") {
      throw std::invalid_argument("ScenarioConfig.sampling.prompts: unknown mode '" + prompts + "'");
    }
    if (pairs != "uniform_without_replacement" && pairs != "from_ref_policy") {
      throw std::invalid_argument("ScenarioConfig.sampling.pairs: unknown mode '" + pairs + "'");
    }
    if (groups != "iid" && groups != "fixed_quota") {
      throw std::invalid_argument("ScenarioConfig.sampling.groups: unknown mode '" + groups + "'");
    }
    s.sampling.prompts = prompts == "from_rho" ? PromptSampling::from_rho : PromptSampling::uniform;
    s.sampling.pairs = pairs == "from_ref_policy" ? PairSampling::from_ref_policy
                                                  : PairSampling::uniform_without_replacement;
    s.sampling.groups = groups == "fixed_quota" ? GroupAssignment::fixed_quota : GroupAssignment::iid;
  }
  s.world.group_proportions = s.group_proportions(s.minority_grid.empty() ? 0.5 : s.minority_grid.front());
  s.validate();
  return s;
}

inline ScenarioConfig load_scenario(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open scenario file " + path.string());
  try {
    return scenario_from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(path.string() + ": " + e.what());
  }
}

// ---- trials ----------------------------------------------------------------

/// Minimum of reward_gap_xi over `samples` draws of (B, w) from the
/// constraint sets: columns of B uniform in the b_max ball, w uniform on the
/// simplex. Sampling can only over-estimate the infimum.
inline double estimate_xi_inf(const World& world, std::size_t samples, std::uint64_t seed = 0) {
  if (samples == 0) throw std::invalid_argument("estimate_xi_inf: need at least one sample");
  CounterRng rng(seed, Stream::xi_sampling);
  const Eigen::Index d = world.dim();
  const Eigen::Index k = world.config.shared_dim;
  double best = std::numeric_limits<double>::infinity();
  Eigen::MatrixXd b(d, k);
  for (std::size_t m = 0; m < samples; ++m) {
    for (Eigen::Index c = 0; c < k; ++c) {
      Eigen::VectorXd dir = rng.normal_vector(d);
      const double radius = world.config.b_max * std::pow(rng.uniform(), 1.0 / static_cast<double>(d));
      b.col(c) = dir * (radius / dir.norm());
    }
    const Eigen::VectorXd w = uniform_simplex(rng, k);
    best = std::min(best, reward_gap_xi(world.features, b, w));
  }
  return best;
}

struct GroupMetrics {
  double subopt = 0.0;
  double unregularized_value = 0.0;
  double kl_value = 0.0;
  double param_error = 0.0;  // ||theta_hat_u - theta*_u||_{Sigma + lambda I}
  double eta = 0.0;
  double gibbs_kl = std::numeric_limits<double>::quiet_NaN();   // E_rho KL(nu*_u || nu_hat_u)
  double kl_bound = std::numeric_limits<double>::quiet_NaN();   // leading term of its bound
  double bound_lhs = std::numeric_limits<double>::quiet_NaN();  // best-response subopt difference
  double bound_rhs = std::numeric_limits<double>::quiet_NaN();
};

struct MethodResult {
  Method method = Method::gold;
  bool available = true;
  std::string note;
  bool fit_converged = true;
  bool policy_converged = false;
  double duality_gap = 0.0;
  std::vector<GroupMetrics> groups;
};

struct TrialResult {
  std::uint64_t seed = 0;
  std::size_t n = 0;
  double minority_prop = 0.0;
  std::vector<std::size_t> n_per_group;
  std::vector<MethodResult> methods;
  std::optional<bool> group_selection_agreement;  // set only when the gap is certified and untied
  double xi_hat = 0.0;
  double wall_time = 0.0;

  bool all_converged() const {
    for (const auto& m : methods) {
      if (m.available && !(m.fit_converged && m.policy_converged)) return false;
    }
    return true;
  }

  const MethodResult* find(Method m) const {
    for (const auto& r : methods) {
      if (r.method == m) return &r;
    }
    return nullptr;
  }
};

/// World for one trial: the scenario world with a seed derived from the trial seed.
inline World trial_world(const ScenarioConfig& sc, std::uint64_t seed, double minority_prop) {
  WorldConfig wc = sc.world;
  wc.rng_seed = mix_key(sc.world.rng_seed, seed);
  wc.group_proportions = sc.group_proportions(minority_prop);
  return build_world(wc);
}

namespace detail {

inline void fill_policy_metrics(MethodResult& out, const PolicyTable& policy, const World& world,
                                double beta) {
  const auto truth = reward_tables(world.truth.theta_star, world.features);
  for (Eigen::Index u = 0; u < world.num_groups(); ++u) {
    auto& g = out.groups[static_cast<std::size_t>(u)];
    const auto& r = truth[static_cast<std::size_t>(u)];
    g.subopt = suboptimality(policy, r, world.prompts);
    g.unregularized_value = unregularized_value(policy, r, world.prompts);
    g.kl_value = kl_value(policy, r, world.truth.ref_policy, world.prompts, beta).value;
  }
}

}  // namespace detail

inline TrialResult run_trial(const ScenarioConfig& sc, std::uint64_t seed, std::size_t n,
                             double minority_prop) {
  const auto start = std::chrono::steady_clock::now();
  auto context = [&](const std::string& what) {
    std::ostringstream os;
    os << "trial(seed=" << seed << ", n=" << n << ", minority=" << minority_prop << "): " << what;
    return os.str();
  };
  try {
    const World world = trial_world(sc, seed, minority_prop);
    const auto props = world.config.group_proportions;
    const Eigen::Index nu = world.num_groups();
    const auto nus = static_cast<std::size_t>(nu);
    const PreferenceDataset data = sample_dataset(world, n, props, sc.sampling, seed);
    const double lambda = sc.lambda_rule.at(n);
    const CovarianceStats stats = compute_covariances(data, lambda);
    const ConfidenceMetric pooled = ConfidenceMetric::pooled(stats);
    const ConfidenceSpec spec = ConfidenceSpec::make(world.dim(), lambda, sc.delta, world.config.l_max,
                                                     world.config.b_max, sc.c_sr, sc.c_mm);
    // The KL bound is stated at lambda = 1/N.
    const double lambda_n = 1.0 / static_cast<double>(n);
    const ConfidenceMetric pooled_n(stats.sigma, lambda_n);
    const ConfidenceSpec spec_n = spec.with_lambda(lambda_n);

    TrialResult tr;
    tr.seed = seed;
    tr.n = n;
    tr.minority_prop = minority_prop;
    tr.n_per_group = data.n_per_group();
    tr.xi_hat = estimate_xi_inf(world, sc.xi_samples, seed);

    const auto truth_tables = reward_tables(world.truth.theta_star, world.features);
    FitOptions fit = sc.fit;
    fit.seed = seed;

    // Per-group pessimistic best responses feed the pairwise performance bound.
    std::optional<Eigen::MatrixXd> sr_theta;
    std::optional<Eigen::MatrixXd> mm_theta;
    std::vector<ConfidenceMetric> group_metrics;
    std::vector<double> group_eta;

    for (Method m : sc.methods) {
      MethodResult mr;
      mr.method = m;
      mr.groups.assign(nus, GroupMetrics{});
      if (m == Method::gold) {
        const auto sol = solve_maxmin_policy(truth_tables, world.truth.ref_policy, world.prompts,
                                             sc.beta, PessimismPenalty{}, sc.solver);
        mr.policy_converged = sol.converged;
        mr.duality_gap = sol.duality_gap;
        detail::fill_policy_metrics(mr, sol.policy, world, sc.beta);
      } else if (m == Method::sharedrep) {
        auto [params, rep] = fit_sharedrep(data, world.features, world.config.shared_dim,
                                           world.config.b_max, fit);
        mr.fit_converged = rep.converged;
        const Eigen::MatrixXd theta = params.theta();
        const double eta = sc.pessimism ? eta_sr(spec, n) : 0.0;
        const auto sol =
            solve_maxmin_policy(reward_tables(theta, world.features), world.truth.ref_policy,
                                world.prompts, sc.beta, PessimismPenalty{eta, &world.features, &pooled},
                                sc.solver);
        mr.policy_converged = sol.converged;
        mr.duality_gap = sol.duality_gap;
        detail::fill_policy_metrics(mr, sol.policy, world, sc.beta);
        for (Eigen::Index u = 0; u < nu; ++u) {
          auto& g = mr.groups[static_cast<std::size_t>(u)];
          g.param_error = pooled.norm(theta.col(u) - world.truth.theta_star.col(u));
          g.eta = eta_sr(spec, n);
          const auto kl = kl_gibbs_bound_check(world, theta, pooled_n, spec_n, sc.beta, u, n);
          g.gibbs_kl = kl.measured_kl;
          g.kl_bound = kl.bound_leading_term;
        }
        if (data.any_group_empty()) mr.note = "empty_group_weights_unidentified";
        sr_theta = theta;
      } else {
        if (data.any_group_empty()) {
          mr.available = false;
          mr.note = "empty_group";
          for (auto& g : mr.groups) {
            g = GroupMetrics{};
            g.subopt = g.unregularized_value = g.kl_value = g.param_error = g.eta =
                std::numeric_limits<double>::quiet_NaN();
          }
          tr.methods.push_back(std::move(mr));
          continue;
        }
        auto [params, rep] = fit_maxmin(data, world.features, world.config.b_max, fit);
        mr.fit_converged = rep.converged;
        group_metrics.clear();
        group_eta.clear();
        for (Eigen::Index u = 0; u < nu; ++u) {
          group_metrics.push_back(ConfidenceMetric::group(stats, u));
          group_eta.push_back(eta_mm(spec, data.n_group(u)));
        }
        GroupPessimism pen;
        pen.phi = &world.features;
        for (Eigen::Index u = 0; u < nu; ++u) {
          pen.eta.push_back(sc.pessimism ? group_eta[static_cast<std::size_t>(u)] : 0.0);
          pen.metrics.push_back(&group_metrics[static_cast<std::size_t>(u)]);
        }
        const auto sol = solve_maxmin_policy(reward_tables(params.theta, world.features),
                                             world.truth.ref_policy, world.prompts, sc.beta, pen,
                                             sc.solver);
        mr.policy_converged = sol.converged;
        mr.duality_gap = sol.duality_gap;
        detail::fill_policy_metrics(mr, sol.policy, world, sc.beta);
        for (Eigen::Index u = 0; u < nu; ++u) {
          auto& g = mr.groups[static_cast<std::size_t>(u)];
          g.param_error = pooled.norm(params.theta.col(u) - world.truth.theta_star.col(u));
          g.eta = group_eta[static_cast<std::size_t>(u)];
        }
        mm_theta = params.theta;
      }
      tr.methods.push_back(std::move(mr));
    }

    // Pairwise bound: SubOpt_u(MM best response) - SubOpt_u(SR best response)
    // against rho_min xi - 2 eta_SR E_rho kappa.
    if (sr_theta && mm_theta) {
      for (auto& mr : tr.methods) {
        if (mr.method != Method::sharedrep) continue;
        for (Eigen::Index u = 0; u < nu; ++u) {
          const auto ui = static_cast<std::size_t>(u);
          const double eta = eta_sr(spec, n);
          const PolicyTable sr_br = pessimistic_best_response(sr_theta->col(u), pooled, eta, world.features);
          const PolicyTable mm_br = pessimistic_best_response(mm_theta->col(u), group_metrics[ui],
                                                              group_eta[ui], world.features);
          mr.groups[ui].bound_lhs = suboptimality(mm_br, truth_tables[ui], world.prompts) -
                                    suboptimality(sr_br, truth_tables[ui], world.prompts);
          mr.groups[ui].bound_rhs = theorem1_rhs(world, pooled, eta, mm_br, tr.xi_hat).rhs;
        }
      }
    }

    // Worst group by reward under the gold max-min policy versus by entropy.
    MaxMinOptions tight = sc.solver;
    tight.gap_tol = sc.lemma_gap_tol;
    tight.rounds = std::max(tight.rounds, 20000);
    const auto gold = solve_maxmin_policy(truth_tables, world.truth.ref_policy, world.prompts, sc.beta,
                                          PessimismPenalty{}, tight);
    std::vector<PolicyTable> gibbs;
    for (const auto& r : truth_tables) gibbs.push_back(gibbs_policy(r, world.truth.ref_policy, sc.beta));
    const auto by_reward = worst_group_by_reward(gold.policy, truth_tables, world.prompts);
    const auto by_entropy = worst_group_by_entropy(gibbs, world.prompts);
    if (gold.converged && !by_reward.tie && !by_entropy.tie) {
      tr.group_selection_agreement = by_reward.chosen == by_entropy.chosen;
    }
    tr.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return tr;
  } catch (const std::exception& e) {
    throw std::runtime_error(context(e.what()));
  }
}

// ---- sweeps ----------------------------------------------------------------

struct TrialKey {
  std::uint64_t seed;
  std::size_t n;
  double minority_prop;
};

/// Grid order: minority proportion, then n, then seed.
inline std::vector<TrialKey> sweep_keys(const ScenarioConfig& sc) {
  std::vector<TrialKey> keys;
  for (double p : sc.minority_grid) {
    for (auto n : sc.n_grid) {
      for (auto s : sc.seeds) keys.push_back({s, n, p});
    }
  }
  return keys;
}

/// Runs every grid point; results come back in grid order regardless of jobs.
inline std::vector<TrialResult> sweep(const ScenarioConfig& sc, unsigned jobs = 1) {
  sc.validate();
  const auto keys = sweep_keys(sc);
  std::vector<TrialResult> results(keys.size());
  std::vector<std::string> errors(keys.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < keys.size(); i = next++) {
      try {
        results[i] = run_trial(sc, keys[i].seed, keys[i].n, keys[i].minority_prop);
      } catch (const std::exception& e) {
        errors[i] = e.what();
      }
    }
  };
  jobs = std::max(1u, jobs);
  std::vector<std::thread> pool;
  for (unsigned j = 1; j < jobs; ++j) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  for (const auto& e : errors) {
    if (!e.empty()) throw std::runtime_error(e);
  }
  return results;
}

namespace detail {

inline std::string fmt(double v) {
  if (std::isnan(v)) return "";
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

inline double median(std::vector<double> v) {
  v.erase(std::remove_if(v.begin(), v.end(), [](double x) { return std::isnan(x); }), v.end());
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  return v.size() % 2 == 1 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

class CsvFile {
 public:
  CsvFile(const std::filesystem::path& path, const std::string& header) : path_(path), out_(path) {
    if (!out_) throw std::runtime_error("cannot write " + path.string());
    out_ << header << '\n';
  }
  void row(const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) out_ << (i ? "," : "") << cells[i];
    out_ << '\n';
    ++rows_;
  }
  std::size_t close() {
    out_.close();
    if (!out_) throw std::runtime_error("write failed for " + path_.string());
    return rows_;
  }

 private:
  std::filesystem::path path_;
  std::ofstream out_;
  std::size_t rows_ = 0;
};

inline std::string iso_timestamp() {
  const std::time_t t = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

}  // namespace detail

inline constexpr const char* kResultsHeader =
    "seed,n,minority_prop,method,group,n_group,subopt,unregularized_value,kl_value,param_error,eta,"
    "gibbs_kl,kl_bound,bound_lhs,bound_rhs,duality_gap,fit_converged,policy_converged,"
    "group_selection_agreement,xi_hat,note";

/// Writes results.csv, curves/*.csv and meta.json into out_dir. meta.json is
/// written first with complete=false and rewritten at the end, so an aborted
/// emit leaves an incomplete manifest next to whatever was written.
inline void emit(const ScenarioConfig& sc, const std::vector<TrialResult>& results,
                 const std::filesystem::path& out_dir) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir / "curves");
  nlohmann::json meta = {{"config", to_json(sc)},
                         {"version", kVersion},
                         {"timestamp", detail::iso_timestamp()},
                         {"complete", false},
                         {"trials", results.size()}};
  auto write_meta = [&] {
    std::ofstream m(out_dir / "meta.json");
    m << meta.dump(2) << '\n';
    if (!m) throw std::runtime_error("cannot write meta.json");
  };
  write_meta();

  nlohmann::json files = nlohmann::json::object();
  double wall = 0.0;
  bool converged = true;
  {
    detail::CsvFile csv(out_dir / "results.csv", kResultsHeader);
    for (const auto& tr : results) {
      wall += tr.wall_time;
      converged = converged && tr.all_converged();
      const std::string agree = tr.group_selection_agreement
                                    ? (*tr.group_selection_agreement ? "1" : "0")
                                    : "";
      for (const auto& mr : tr.methods) {
        for (std::size_t u = 0; u < mr.groups.size(); ++u) {
          const auto& g = mr.groups[u];
          csv.row({std::to_string(tr.seed), std::to_string(tr.n), detail::fmt(tr.minority_prop),
                   to_string(mr.method), std::to_string(u), std::to_string(tr.n_per_group[u]),
                   detail::fmt(g.subopt), detail::fmt(g.unregularized_value), detail::fmt(g.kl_value),
                   detail::fmt(g.param_error), detail::fmt(g.eta), detail::fmt(g.gibbs_kl),
                   detail::fmt(g.kl_bound), detail::fmt(g.bound_lhs), detail::fmt(g.bound_rhs),
                   mr.available ? detail::fmt(mr.duality_gap) : "",
                   mr.fit_converged ? "1" : "0", mr.policy_converged ? "1" : "0", agree,
                   detail::fmt(tr.xi_hat), mr.note});
        }
      }
    }
    files["results.csv"] = csv.close();
  }

  const auto mg = static_cast<std::size_t>(sc.minority_group);
  // Medians over seeds, keyed by (minority, n).
  std::map<std::pair<double, std::size_t>, std::vector<const TrialResult*>> cells;
  for (const auto& tr : results) cells[{tr.minority_prop, tr.n}].push_back(&tr);

  {
    detail::CsvFile csv(out_dir / "curves" / "minority_subopt_vs_proportion.csv",
                        "n,minority_prop,method,median_minority_subopt,seeds");
    for (const auto& [key, trs] : cells) {
      for (Method m : sc.methods) {
        std::vector<double> v;
        for (const auto* tr : trs) {
          if (const auto* r = tr->find(m)) v.push_back(r->groups[mg].subopt);
        }
        csv.row({std::to_string(key.second), detail::fmt(key.first), to_string(m),
                 detail::fmt(detail::median(v)), std::to_string(v.size())});
      }
    }
    files["curves/minority_subopt_vs_proportion.csv"] = csv.close();
  }
  {
    detail::CsvFile csv(out_dir / "curves" / "error_vs_n.csv",
                        "minority_prop,n,method,group,median_param_error");
    for (const auto& [key, trs] : cells) {
      for (Method m : sc.methods) {
        if (m == Method::gold) continue;
        for (Eigen::Index u = 0; u < sc.world.num_groups; ++u) {
          std::vector<double> v;
          for (const auto* tr : trs) {
            if (const auto* r = tr->find(m)) v.push_back(r->groups[static_cast<std::size_t>(u)].param_error);
          }
          csv.row({detail::fmt(key.first), std::to_string(key.second), to_string(m), std::to_string(u),
                   detail::fmt(detail::median(v))});
        }
      }
    }
    files["curves/error_vs_n.csv"] = csv.close();
  }
  {
    detail::CsvFile csv(out_dir / "curves" / "kl_vs_n.csv",
                        "minority_prop,n,group,median_gibbs_kl,median_kl_bound");
    for (const auto& [key, trs] : cells) {
      for (Eigen::Index u = 0; u < sc.world.num_groups; ++u) {
        std::vector<double> kl;
        std::vector<double> bound;
        for (const auto* tr : trs) {
          if (const auto* r = tr->find(Method::sharedrep)) {
            kl.push_back(r->groups[static_cast<std::size_t>(u)].gibbs_kl);
            bound.push_back(r->groups[static_cast<std::size_t>(u)].kl_bound);
          }
        }
        if (kl.empty()) continue;
        csv.row({detail::fmt(key.first), std::to_string(key.second), std::to_string(u),
                 detail::fmt(detail::median(kl)), detail::fmt(detail::median(bound))});
      }
    }
    files["curves/kl_vs_n.csv"] = csv.close();
  }
  {
    // Formula curves with psi normalized to 1.
    detail::CsvFile csv(out_dir / "curves" / "delta_min_vs_n_maxmin.csv",
                        "delta_min,regime,large_gap_formula,small_gap_formula,n_maxmin");
    ComplexityInputs in;
    in.y_size = sc.world.num_responses;
    in.beta = sc.beta;
    in.psi_u = Eigen::VectorXd::Ones(1);
    const double c = entropy_slack_constant(in.y_size);
    for (int i = 0; i <= 60; ++i) {
      const double delta = std::pow(10.0, -3.0 + 4.0 * i / 60.0);
      GapProfile gp;
      gp.delta_min = delta;
      ComplexityInputs large = in;
      large.regime_override = GapRegime::large_gap;
      const double lf = n_maxmin(large, gp);
      std::string sf;
      if (delta / (2.0 * c) <= 1.0 / std::numbers::e) {
        ComplexityInputs small = in;
        small.regime_override = GapRegime::small_gap;
        sf = detail::fmt(n_maxmin(small, gp));
      }
      csv.row({detail::fmt(delta),
               regime_of(delta, in.y_size) == GapRegime::large_gap ? "large_gap" : "small_gap",
               detail::fmt(lf), sf, detail::fmt(n_maxmin(in, gp))});
    }
    files["curves/delta_min_vs_n_maxmin.csv"] = csv.close();
  }

  meta["files"] = files;
  meta["wall_time_seconds"] = wall;
  meta["all_converged"] = converged;
  meta["complete"] = true;
  write_meta();
}

}  // namespace sharedrep
