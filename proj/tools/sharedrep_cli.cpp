// Command-line front end: world gen, data sample, fit, policy solve,
// complexity eval, sweep run.
//
// Exit status: 0 when every fit and solve converged, 1 when something did
// not converge, 2 on errors.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "sharedrep/complexity.hpp"
#include "sharedrep/harness.hpp"
#include "sharedrep/io.hpp"

namespace fs = std::filesystem;
using namespace sharedrep;

namespace {

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = "-";
  unsigned jobs = 1;
  std::optional<double> tol;
};

ScenarioConfig scenario(const Globals& g) {
  return g.config.empty() ? ScenarioConfig{} : load_scenario(g.config);
}

/// Runs `fn` with a stream bound to --out ("-" is stdout).
template <class Fn>
void with_output(const std::string& out, Fn&& fn) {
  if (out == "-") {
    fn(std::cout);
    return;
  }
  if (fs::path(out).has_parent_path()) fs::create_directories(fs::path(out).parent_path());
  std::ofstream f(out);
  if (!f) throw std::runtime_error("cannot write " + out);
  fn(f);
  if (!f) throw std::runtime_error("write failed for " + out);
}

PreferenceDataset load_dataset(const std::string& path, const World& w) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  return read_dataset_csv(in, w.num_groups(), w.features);
}

std::optional<GapRegime> parse_regime(const std::string& s) {
  if (s.empty() || s == "auto") return std::nullopt;
  if (s == "large_gap") return GapRegime::large_gap;
  if (s == "small_gap") return GapRegime::small_gap;
  throw std::invalid_argument("--regime-override must be auto, large_gap or small_gap");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Tabular group-fair preference learning laboratory"};
  app.require_subcommand(1);
  app.fallthrough();  // global flags may follow the subcommand
  Globals g;
  app.add_option("--config", g.config, "Scenario JSON file")->check(CLI::ExistingFile);
  app.add_option("--seed", g.seed, "Seed override");
  app.add_option("--out", g.out, "Output file or directory ('-' for stdout)");
  app.add_option("--jobs", g.jobs, "Parallel trials")->check(CLI::PositiveNumber);
  app.add_option("--tol", g.tol, "Optimizer tolerance");

  // world gen
  auto* world_cmd = app.add_subcommand("world", "World construction");
  world_cmd->require_subcommand(1);
  auto* world_gen = world_cmd->add_subcommand("gen", "Sample a world and write it as JSON");

  // data sample
  auto* data_cmd = app.add_subcommand("data", "Preference data");
  data_cmd->require_subcommand(1);
  auto* data_sample = data_cmd->add_subcommand("sample", "Sample a preference dataset as CSV");
  std::string world_path;
  std::size_t n_total = 1024;
  std::optional<double> minority;
  data_sample->add_option("--world", world_path, "World JSON")->required()->check(CLI::ExistingFile);
  data_sample->add_option("--n", n_total, "Number of comparisons")->required();
  data_sample->add_option("--minority", minority, "Minority proportion (scenario layout)");

  // fit
  auto* fit_cmd = app.add_subcommand("fit", "Fit reward parameters");
  std::string data_path;
  std::string method = "sharedrep";
  std::optional<Eigen::Index> k_opt;
  FitOptions fit_opts;
  fit_cmd->add_option("--world", world_path, "World JSON")->required()->check(CLI::ExistingFile);
  fit_cmd->add_option("--data", data_path, "Dataset CSV")->required()->check(CLI::ExistingFile);
  fit_cmd->add_option("--method", method, "sharedrep or maxmin")
      ->check(CLI::IsMember({"sharedrep", "maxmin"}));
  fit_cmd->add_option("--k", k_opt, "Shared dimension (default: world K)");
  fit_cmd->add_option("--tol", fit_opts.tol, "Projected-gradient tolerance");
  fit_cmd->add_option("--max-iters", fit_opts.max_iters, "Iteration cap per start");
  fit_cmd->add_option("--restarts", fit_opts.restarts, "Number of seeded starts");
  fit_cmd->add_option("--lr0", fit_opts.lr0, "Initial step size");

  // policy solve
  auto* policy_cmd = app.add_subcommand("policy", "Policies");
  policy_cmd->require_subcommand(1);
  auto* policy_solve = policy_cmd->add_subcommand("solve", "Solve the max-min policy");
  std::string params_path;
  double beta = 1.0;
  std::string pessimism = "none";
  double delta = 0.1;
  std::optional<double> lambda_opt;
  MaxMinOptions solver_opts;
  policy_solve->add_option("--world", world_path, "World JSON")->required()->check(CLI::ExistingFile);
  policy_solve->add_option("--params", params_path, "Fitted parameters JSON (default: true rewards)")
      ->check(CLI::ExistingFile);
  policy_solve->add_option("--data", data_path, "Dataset CSV (needed for pessimism)")
      ->check(CLI::ExistingFile);
  policy_solve->add_option("--beta", beta, "KL strength");
  policy_solve->add_option("--pessimism", pessimism, "none, shared or per_group")
      ->check(CLI::IsMember({"none", "shared", "per_group"}));
  policy_solve->add_option("--delta", delta, "Confidence level");
  policy_solve->add_option("--lambda", lambda_opt, "Ridge (default 1/N)");
  policy_solve->add_option("--rounds", solver_opts.rounds, "Iteration cap");
  policy_solve->add_option("--gap-tol", solver_opts.gap_tol, "Duality-gap tolerance (default 1e-3 beta)");

  // complexity eval
  auto* complexity_cmd = app.add_subcommand("complexity", "Sample-complexity formulas");
  complexity_cmd->require_subcommand(1);
  auto* complexity_eval = complexity_cmd->add_subcommand("eval", "Evaluate gaps, psi_u and N formulas");
  double multiplier = 1.0;
  std::string regime = "auto";
  double epsilon = 0.1;
  complexity_eval->add_option("--world", world_path, "World JSON")->required()->check(CLI::ExistingFile);
  complexity_eval->add_option("--data", data_path, "Dataset CSV (default: metric lambda I)")
      ->check(CLI::ExistingFile);
  complexity_eval->add_option("--beta", beta, "KL strength");
  complexity_eval->add_option("--delta", delta, "Confidence level");
  complexity_eval->add_option("--lambda", lambda_opt, "Ridge (default 1/N, or 1 without data)");
  complexity_eval->add_option("--epsilon", epsilon, "Target accuracy");
  complexity_eval->add_option("--constant-multiplier", multiplier, "Multiplier for all O(.) constants");
  complexity_eval->add_option("--regime-override", regime, "auto, large_gap or small_gap");

  // sweep run
  auto* sweep_cmd = app.add_subcommand("sweep", "Monte-Carlo sweeps");
  sweep_cmd->require_subcommand(1);
  auto* sweep_run = sweep_cmd->add_subcommand("run", "Run the scenario grid and write results");

  CLI11_PARSE(app, argc, argv);

  try {
    bool converged = true;

    if (world_gen->parsed()) {
      ScenarioConfig sc = scenario(g);
      WorldConfig wc = sc.world;
      if (g.seed) wc.rng_seed = *g.seed;
      const World w = build_world(wc);
      with_output(g.out, [&](std::ostream& o) { o << world_to_json(w).dump(2) << '\n'; });

    } else if (data_sample->parsed()) {
      const World w = world_from_json(read_json(world_path));
      std::vector<double> props = w.config.group_proportions;
      if (minority) {
        ScenarioConfig sc = scenario(g);
        sc.world.num_groups = w.num_groups();
        props = sc.group_proportions(*minority);
      }
      const auto data = sample_dataset(w, n_total, props, scenario(g).sampling, g.seed.value_or(0));
      with_output(g.out, [&](std::ostream& o) { write_dataset_csv(o, data); });

    } else if (fit_cmd->parsed()) {
      const World w = world_from_json(read_json(world_path));
      const auto data = load_dataset(data_path, w);
      if (g.tol) fit_opts.tol = *g.tol;
      fit_opts.seed = g.seed.value_or(0);
      nlohmann::json doc;
      if (method == "sharedrep") {
        auto [p, rep] = fit_sharedrep(data, w.features, k_opt.value_or(w.config.shared_dim), w.config.b_max,
                                      fit_opts);
        doc = params_to_json(p, rep);
        if (data.any_group_empty()) doc["warning"] = "empty group: its weights are unidentified";
        converged = rep.converged;
      } else {
        auto [p, rep] = fit_maxmin(data, w.features, w.config.b_max, fit_opts);
        doc = params_to_json(p, rep);
        converged = rep.converged;
      }
      with_output(g.out, [&](std::ostream& o) { o << doc.dump(2) << '\n'; });

    } else if (policy_solve->parsed()) {
      const World w = world_from_json(read_json(world_path));
      const Eigen::MatrixXd theta =
          params_path.empty() ? w.truth.theta_star : theta_from_json(read_json(params_path));
      const auto tables = reward_tables(theta, w.features);
      MaxMinSolution sol;
      if (pessimism == "none") {
        sol = solve_maxmin_policy(tables, w.truth.ref_policy, w.prompts, beta, PessimismPenalty{}, solver_opts);
      } else {
        if (data_path.empty()) throw std::invalid_argument("--pessimism needs --data");
        const auto data = load_dataset(data_path, w);
        const double lambda = lambda_opt.value_or(1.0 / static_cast<double>(data.size()));
        const auto stats = compute_covariances(data, lambda);
        const auto spec = ConfidenceSpec::make(w.dim(), lambda, delta, w.config.l_max, w.config.b_max);
        if (pessimism == "shared") {
          const auto metric = ConfidenceMetric::pooled(stats);
          sol = solve_maxmin_policy(tables, w.truth.ref_policy, w.prompts, beta,
                                    PessimismPenalty{eta_sr(spec, data.size()), &w.features, &metric},
                                    solver_opts);
        } else {
          std::vector<ConfidenceMetric> metrics;
          GroupPessimism pen;
          pen.phi = &w.features;
          for (Eigen::Index u = 0; u < w.num_groups(); ++u) metrics.push_back(ConfidenceMetric::group(stats, u));
          for (Eigen::Index u = 0; u < w.num_groups(); ++u) {
            pen.eta.push_back(eta_mm(spec, data.n_group(u)));
            pen.metrics.push_back(&metrics[static_cast<std::size_t>(u)]);
          }
          sol = solve_maxmin_policy(tables, w.truth.ref_policy, w.prompts, beta, pen, solver_opts);
        }
      }
      converged = sol.converged;
      std::vector<PolicyTable> gibbs;
      for (const auto& t : tables) gibbs.push_back(gibbs_policy(t, w.truth.ref_policy, beta));
      const nlohmann::json summary = {
          {"duality_gap", sol.duality_gap},
          {"converged", sol.converged},
          {"rounds", sol.rounds},
          {"primal_value", sol.primal_value},
          {"dual_value", sol.dual_value},
          {"group_values", vector_to_json(sol.group_values)},
          {"group_weights", vector_to_json(sol.group_weights)},
          {"worst_group_by_reward", to_json(worst_group_by_reward(sol.policy, tables, w.prompts))},
          {"worst_group_by_entropy", to_json(worst_group_by_entropy(gibbs, w.prompts))}};
      with_output(g.out, [&](std::ostream& o) { write_policy_csv(o, sol.policy); });
      std::cerr << summary.dump(2) << '\n';

    } else if (complexity_eval->parsed()) {
      const World w = world_from_json(read_json(world_path));
      std::optional<PreferenceDataset> data;
      if (!data_path.empty()) data = load_dataset(data_path, w);
      const double lambda =
          lambda_opt.value_or(data ? 1.0 / static_cast<double>(data->size()) : 1.0);
      const Eigen::MatrixXd sigma =
          data ? compute_covariances(*data, lambda).sigma : Eigen::MatrixXd::Zero(w.dim(), w.dim());
      const ConfidenceMetric metric(sigma, lambda);
      const auto spec = ConfidenceSpec::make(w.dim(), lambda, delta, w.config.l_max, w.config.b_max);

      const auto tables = reward_tables(w.truth.theta_star, w.features);
      std::vector<PolicyTable> gibbs;
      for (const auto& t : tables) gibbs.push_back(gibbs_policy(t, w.truth.ref_policy, beta));
      ComplexityInputs in;
      in.y_size = w.num_responses();
      in.beta = beta;
      in.spec = spec;
      in.constant_multiplier = multiplier;
      in.regime_override = parse_regime(regime);
      in.psi_u.resize(w.num_groups());
      for (Eigen::Index u = 0; u < w.num_groups(); ++u) in.psi_u(u) = psi_u(w, metric, spec, beta, u);

      nlohmann::json doc = {{"psi_u", vector_to_json(in.psi_u)},
                            {"c_delta", spec.c_delta},
                            {"gamma", spec.gamma},
                            {"lambda", lambda},
                            {"regime_threshold", regime_threshold(in.y_size)}};
      if (w.num_groups() >= 2) {
        const GapProfile gp = gap_profile(gibbs, w.prompts);
        const auto pistar = solve_maxmin_policy(tables, w.truth.ref_policy, w.prompts, beta,
                                                PessimismPenalty{}, solver_opts);
        converged = pistar.converged;
        const double pistar_norm = metric.inv_norm(expected_features(pistar.policy, w.features, w.prompts));
        doc["gap_profile"] = {{"delta_u", vector_to_json(gp.delta_u)},
                              {"entropies", vector_to_json(gp.entropies)},
                              {"delta_min", gp.delta_min},
                              {"u_star", gp.u_star}};
        doc["regime"] = in.regime(gp.delta_min) == GapRegime::large_gap ? "large_gap" : "small_gap";
        doc["f_inverse_half_delta"] = f_inverse_half_delta(gp.delta_min, in.y_size);
        doc["n_maxmin"] = n_maxmin(in, gp);
        doc["n_sr"] = n_sr(in, gp, pistar_norm, epsilon);
        doc["n_sr_estimation_term"] = n_sr_estimation_term(in, pistar_norm, epsilon);
        doc["pistar_feature_norm"] = pistar_norm;
        // Both regime formulas, for comparison near the threshold.
        ComplexityInputs large = in;
        large.regime_override = GapRegime::large_gap;
        doc["n_maxmin_large_gap_formula"] = n_maxmin(large, gp);
        if (gp.delta_min <= regime_threshold(in.y_size)) {
          ComplexityInputs small = in;
          small.regime_override = GapRegime::small_gap;
          doc["n_maxmin_small_gap_formula"] = n_maxmin(small, gp);
        }
      } else {
        doc["gap_profile"] = {{"delta_min", "inf"}, {"u_star", 0}};
      }
      with_output(g.out, [&](std::ostream& o) { o << doc.dump(2) << '\n'; });

    } else if (sweep_run->parsed()) {
      ScenarioConfig sc = scenario(g);
      if (g.seed) sc.world.rng_seed = *g.seed;
      if (g.tol) sc.fit.tol = *g.tol;
      if (g.out == "-") throw std::invalid_argument("sweep run needs --out <directory>");
      const auto results = sweep(sc, g.jobs);
      emit(sc, results, g.out);
      for (const auto& r : results) converged = converged && r.all_converged();
      std::cerr << "wrote " << results.size() << " trials to " << g.out << '\n';
    }
    return converged ? 0 : 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
}
