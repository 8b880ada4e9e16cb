// fedavot: solve and inspect masked transport problems, check feasibility,
// run federated experiment suites, and fit convergence rates.
//
// Exit codes: 0 success, 1 validation, 2 infeasibility, 3 I/O.

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "fedavot/errors.hpp"
#include "fedavot/experiments.hpp"
#include "fedavot/feasibility.hpp"
#include "fedavot/io.hpp"
#include "fedavot/mot.hpp"

namespace fs = std::filesystem;
using namespace fedavot;

namespace {

constexpr const char* kOutputDirEnv = "FEDAVOT_OUTPUT_DIR";

fs::path output_dir(const std::string& flag, const fs::path& fallback) {
  if (!flag.empty()) return flag;
  if (const char* env = std::getenv(kOutputDirEnv); env && *env) return env;
  return fallback;
}

int exit_code(ExitCode code) { return static_cast<int>(code); }

int cmd_solve(const std::string& problem_path, double epsilon, std::size_t max_iters,
              const std::string& out_flag) {
  const TransportProblem problem = problem_from_json(load_json_file(problem_path));
  const SinkhornResult result = solve_sinkhorn(problem, {epsilon, max_iters});
  const fs::path dir = output_dir(out_flag, ".");
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  write_text_file((dir / "plan.json").string(), matrix_to_json(result.plan).dump() + "\n");
  write_text_file((dir / "weights.json").string(), matrix_to_json(result.weights).dump() + "\n");

  Json report{{"converged", result.converged},
              {"iterations", result.iterations},
              {"row_residual_l1", result.row_residual_l1},
              {"col_residual_l1", result.col_residual_l1},
              {"unreachable_clients", result.unreachable_clients},
              {"dropped_events", problem.dropped_events()},
              {"plan", (dir / "plan.json").string()},
              {"weights", (dir / "weights.json").string()}};
  std::cout << report.dump(2) << "\n";
  return result.converged ? 0 : exit_code(ExitCode::kInfeasible);
}

int cmd_feascheck(const std::string& problem_path, bool oracle) {
  const TransportProblem problem = problem_from_json(load_json_file(problem_path));
  if (oracle && problem.n_clients() > kHallMaxClients) {
    throw ValidationError("--oracle supports at most " + std::to_string(kHallMaxClients) +
                          " clients (problem has " + std::to_string(problem.n_clients()) + ")");
  }
  const FeasibilityVerdict verdict = check_feasible_maxflow(problem);
  Json report = verdict_to_json(verdict);
  if (oracle) {
    const FeasibilityVerdict hall = check_feasible_hall(problem);
    report["oracle"] = verdict_to_json(hall);
    report["oracle_agrees"] = hall.feasible == verdict.feasible;
    if (hall.feasible != verdict.feasible) {
      std::cout << report.dump(2) << "\n";
      std::cerr << "error: max-flow and subset enumeration disagree\n";
      return exit_code(ExitCode::kValidation);
    }
  }
  std::cout << report.dump(2) << "\n";
  return verdict.feasible ? 0 : exit_code(ExitCode::kInfeasible);
}

std::vector<std::uint64_t> parse_seed_list(const std::string& text) {
  std::vector<std::uint64_t> seeds;
  std::stringstream ss(text);
  std::string cell;
  while (std::getline(ss, cell, ',')) {
    try {
      seeds.push_back(std::stoull(cell));
    } catch (const std::exception&) {
      throw ValidationError("bad seed '" + cell + "'");
    }
  }
  if (seeds.empty()) throw ValidationError("seed list is empty");
  return seeds;
}

struct SimulateArgs {
  std::string suite;
  std::string config;
  std::string seeds;
  std::size_t rounds = 0;
  std::size_t jobs = 1;
  std::string out;
  std::string mnist_images;
  std::string mnist_labels;
};

int cmd_simulate(const SimulateArgs& args) {
  ExperimentConfig cfg = args.config.empty() ? named_suite(args.suite)
                                             : config_from_json(load_json_file(args.config));
  if (!args.seeds.empty()) cfg.seeds = parse_seed_list(args.seeds);
  if (args.rounds > 0) cfg.rounds = args.rounds;
  if (!args.mnist_images.empty()) cfg.task.mnist_images = args.mnist_images;
  if (!args.mnist_labels.empty()) cfg.task.mnist_labels = args.mnist_labels;

  const ExperimentResult result = run_experiment(cfg, {args.jobs});
  const fs::path dir = output_dir(args.out, fs::path("results") / cfg.name);
  write_artifacts(result, dir);

  if (!result.feasibility.feasible) {
    std::cerr << "warning: (p, q) is infeasible; FedAVOT used the KL-projected plan ("
              << violation_to_string(*result.feasibility.violation) << ")\n";
  }
  for (const AlgorithmSummary& s : result.summaries) {
    std::cout << to_string(s.algorithm) << ": final loss " << s.final_mean << " +/- "
              << s.final_std << ", tail variance " << s.tail_variance;
    if (s.rate && std::isfinite(s.rate->slope)) std::cout << ", rate slope " << s.rate->slope;
    std::cout << "\n";
  }
  std::cout << "artifacts written to " << dir.string() << "\n";
  return 0;
}

int cmd_rate(const std::string& input, const std::string& algorithm) {
  const auto series = read_gap_series(read_text_file(input), algorithm);
  const RateFit fit = fit_rate(series);
  Json report{{"slope", std::isfinite(fit.slope) ? Json(fit.slope) : Json()},
              {"intercept", std::isfinite(fit.intercept) ? Json(fit.intercept) : Json()},
              {"checkpoints", fit.checkpoints},
              {"excluded", fit.excluded}};
  std::cout << report.dump(2) << "\n";
  if (!fit.excluded.empty()) {
    std::cerr << "note: " << fit.excluded.size() << " checkpoint(s) with nonpositive gap excluded\n";
  }
  if (!std::isfinite(fit.slope)) {
    std::cerr << "error: fewer than two usable checkpoints\n";
    return exit_code(ExitCode::kValidation);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated aggregation via masked optimal transport"};
  app.require_subcommand(1);

  std::string problem_path;
  double epsilon = SinkhornOptions{}.epsilon;
  std::size_t max_iters = SinkhornOptions{}.max_iterations;
  std::string solve_out;
  auto* solve = app.add_subcommand("solve", "Run Sinkhorn scaling on a problem JSON");
  solve->add_option("problem", problem_path, "Problem JSON {p, q, events}")->required();
  solve->add_option("--epsilon", epsilon, "L1 residual tolerance");
  solve->add_option("--max-iters", max_iters, "Iteration cap");
  solve->add_option("--out", solve_out, "Directory for plan.json and weights.json");

  bool oracle = false;
  auto* feas = app.add_subcommand("feascheck", "Decide feasibility by max-flow");
  feas->add_option("problem", problem_path, "Problem JSON {p, q, events}")->required();
  feas->add_flag("--oracle", oracle, "Also enumerate all client subsets (N <= 20)");

  SimulateArgs sim;
  auto* simulate = app.add_subcommand("simulate", "Run a multi-seed experiment suite");
  auto* suite_opt = simulate->add_option("--suite", sim.suite,
                                         "restricted_regression | coordinated_mnist");
  auto* config_opt = simulate->add_option("--config", sim.config, "Experiment config JSON");
  suite_opt->excludes(config_opt);
  simulate->add_option("--seeds", sim.seeds, "Comma-separated seed list");
  simulate->add_option("--rounds", sim.rounds, "Override the number of global rounds");
  simulate->add_option("--jobs", sim.jobs, "Parallel (seed, algorithm) runs");
  simulate->add_option("--out", sim.out, "Output directory");
  simulate->add_option("--mnist-images", sim.mnist_images, "IDX image file");
  simulate->add_option("--mnist-labels", sim.mnist_labels, "IDX label file");

  std::string rate_input;
  std::string rate_algorithm = "fedavot";
  auto* rate = app.add_subcommand("rate", "Fit the log-log slope of an averaged-model gap trace");
  rate->add_option("--input", rate_input, "gaps.csv from simulate")->required();
  rate->add_option("--algorithm", rate_algorithm, "Algorithm rows to use (empty for all)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return exit_code(ExitCode::kValidation);
  }

  try {
    if (*solve) return cmd_solve(problem_path, epsilon, max_iters, solve_out);
    if (*feas) return cmd_feascheck(problem_path, oracle);
    if (*simulate) {
      if (sim.suite.empty() && sim.config.empty()) {
        throw ValidationError("simulate needs --suite or --config");
      }
      return cmd_simulate(sim);
    }
    if (*rate) return cmd_rate(rate_input, rate_algorithm);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code(e.code());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code(ExitCode::kValidation);
  }
  return 0;
}
