// Acceptance checks. Prints one PASS/FAIL line per criterion; exits nonzero if
// any selected criterion fails.
//
//   acceptance                 run all criteria
//   acceptance --criterion N   run criterion N only

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "CLI11.hpp"
#include "fedavot/experiments.hpp"
#include "fedavot/feasibility.hpp"
#include "fedavot/fedsim.hpp"
#include "fedavot/mot.hpp"
#include "test_support.hpp"

using namespace fedavot;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

std::string fmt(const char* format, double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), format, v);
  return buf;
}

std::string g17(double v) { return fmt("%.17g", v); }

// Instances shared by criteria 2 and 3.
std::vector<testing::RawInstance> feasible_corpus() {
  Rng rng(20260401);
  std::vector<testing::RawInstance> out;
  for (int k = 0; k < 200; ++k) {
    const std::size_t n = 2 + rng.uniform_index(49);
    const std::size_t m = 1 + rng.uniform_index(500);
    out.push_back(testing::random_feasible_instance(rng, n, m, 6));
  }
  return out;
}

const SinkhornOptions kStrict{1e-10, 100000};

Outcome criterion_1() {
  Stopwatch clock;
  Rng rng(1);
  int agree = 0;
  int infeasible = 0;
  const int total = 1000;
  for (int k = 0; k < total; ++k) {
    const std::size_t n = 1 + rng.uniform_index(12);
    const std::size_t m = 1 + rng.uniform_index(30);
    const auto raw = k % 2 == 0 ? testing::random_instance(rng, n, m, 4)
                                : testing::random_feasible_instance(rng, n, m, 4);
    const auto problem = testing::to_problem(raw);
    const bool flow = check_feasible_maxflow(problem).feasible;
    const bool hall = check_feasible_hall(problem).feasible;
    agree += flow == hall;
    infeasible += !flow;
  }
  const double secs = clock.seconds();
  return {agree == total && secs < 30.0,
          std::to_string(agree) + "/" + std::to_string(total) + " agree (" +
              std::to_string(infeasible) + " infeasible), " + fmt("%.2f", secs) + " s (limit 30 s)"};
}

Outcome criterion_2() {
  int converged = 0;
  double worst_row = 0.0;
  double worst_col = 0.0;
  const auto corpus = feasible_corpus();
  for (const auto& raw : corpus) {
    const auto result = solve_sinkhorn(testing::to_problem(raw), kStrict);
    worst_row = std::max(worst_row, result.row_residual_l1);
    worst_col = std::max(worst_col, result.col_residual_l1);
    converged += result.converged && result.row_residual_l1 <= 1e-10 &&
                 result.col_residual_l1 <= 1e-10;
  }

  // 2x2 instance against the least-squares solution of its marginal equations.
  Eigen::Matrix<double, 4, 3> a;
  a << 1, 1, 0, 0, 0, 1, 1, 0, 0, 0, 1, 1;
  const Eigen::Vector3d exact = a.colPivHouseholderQr().solve(Eigen::Vector4d(0.5, 0.5, 0.3, 0.7));
  const auto small = build_problem({0.5, 0.5}, {0.3, 0.7}, {{0}, {0, 1}});
  const auto plan = solve_sinkhorn(small, kStrict).plan;
  const double err = std::max({std::abs(plan.at(0, 0) - exact[0]),
                               std::abs(plan.at(0, 1) - exact[1]),
                               std::abs(plan.at(1, 1) - exact[2]), std::abs(plan.at(1, 0))});
  const double spec_err = std::max({std::abs(exact[0] - 0.3), std::abs(exact[1] - 0.2),
                                    std::abs(exact[2] - 0.5)});

  const bool pass = converged == static_cast<int>(corpus.size()) && err <= 1e-9 && spec_err <= 1e-12;
  return {pass, std::to_string(converged) + "/" + std::to_string(corpus.size()) +
                    " converged, worst residuals row " + g17(worst_row) + " col " + g17(worst_col) +
                    "; 2x2 max error " + g17(err) + " (limit 1e-9)"};
}

Outcome criterion_3() {
  double worst_ot = 0.0;
  double worst_avg = 0.0;
  for (const auto& raw : feasible_corpus()) {
    const auto problem = testing::to_problem(raw);
    const auto result = solve_sinkhorn(problem, kStrict);
    const auto w = expected_aggregate_weight(result.weights, problem.events(), problem.availability());
    double l1 = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) l1 += std::abs(w[i] - problem.importance()[i]);
    worst_ot = std::max(worst_ot, l1);

    const auto fedavg = expected_aggregate_weight(uniform_weights(problem.mask()), problem.events(),
                                                  problem.availability());
    const auto implied = implied_importance(problem);
    for (std::size_t i = 0; i < w.size(); ++i) {
      worst_avg = std::max(worst_avg, std::abs(fedavg[i] - implied[i]));
    }
  }
  const double limit = 2 * kStrict.epsilon;
  return {worst_ot <= limit && worst_avg <= 1e-12,
          "max |E[w] - p|_1 = " + g17(worst_ot) + " (limit " + g17(limit) +
              "), max |w_fedavg - p~| = " + g17(worst_avg) + " (limit 1e-12)"};
}

Outcome criterion_4() {
  Rng rng(4);
  double worst = std::numeric_limits<double>::infinity();
  int unconverged = 0;
  for (int k = 0; k < 100; ++k) {
    const std::size_t n = 2 + rng.uniform_index(15);
    const std::size_t m = 1 + rng.uniform_index(50);
    const auto raw = k % 2 == 0 ? testing::random_feasible_instance(rng, n, m, 5)
                                : testing::random_instance(rng, n, m, 5);
    const auto problem = testing::to_problem(raw);
    const auto result = solve_sinkhorn(problem, {1e-10, 2000});
    unconverged += !result.converged;
    const auto dim = static_cast<Eigen::Index>(1 + rng.uniform_index(5));
    std::vector<Vector> thetas;
    for (std::size_t i = 0; i < n; ++i) {
      Vector t(dim);
      for (Eigen::Index c = 0; c < dim; ++c) t(c) = rng.normal(0.0, 3.0);
      thetas.push_back(t);
    }
    Vector ref(dim);
    for (Eigen::Index c = 0; c < dim; ++c) ref(c) = rng.normal();
    worst = std::min(worst, testing::sample_to_model_slack(problem, result.weights,
                                                           result.row_residual_l1, thetas, ref));
  }
  return {worst >= -1e-9, "min slack " + g17(worst) + " over 100 triples (" +
                              std::to_string(unconverged) + " with unconverged plans), limit -1e-9"};
}

const AlgorithmSummary& summary_of(const ExperimentResult& r, Algorithm a) {
  for (const auto& s : r.summaries) {
    if (s.algorithm == a) return s;
  }
  throw std::runtime_error("algorithm missing from result");
}

Outcome criterion_5() {
  Stopwatch clock;
  const auto result = run_experiment(restricted_regression_suite());
  const double secs = clock.seconds();
  const double full = summary_of(result, Algorithm::kFedAvgFull).final_mean;
  const double k = summary_of(result, Algorithm::kFedAvgK).final_mean;
  const double ot = summary_of(result, Algorithm::kFedavot).final_mean;
  return {ot <= 1.5 * full && k >= 10 * full && secs < 300.0,
          "final loss fedavg_full " + g17(full) + ", fedavg_k " + g17(k) + " (" +
              fmt("%.2f", k / full) + "x, need >= 10), fedavot " + g17(ot) + " (" +
              fmt("%.3f", ot / full) + "x, need <= 1.5); " + fmt("%.1f", secs) + " s (limit 300 s)"};
}

Outcome criterion_6() {
  Stopwatch clock;
  const auto result = run_experiment(coordinated_mnist_suite());
  const double secs = clock.seconds();
  const auto& full = summary_of(result, Algorithm::kFedAvgFull);
  const auto& k = summary_of(result, Algorithm::kFedAvgK);
  const auto& ot = summary_of(result, Algorithm::kFedavot);
  const double ratio = k.tail_variance / ot.tail_variance;
  const double rel = std::abs(ot.final_mean - full.final_mean) / full.final_mean;
  return {ratio >= 5.0 && rel <= 0.10 && secs < 600.0,
          "tail variance fedavg_k " + g17(k.tail_variance) + " vs fedavot " + g17(ot.tail_variance) +
              " (" + fmt("%.3g", ratio) + "x, need >= 5); fedavot final " + g17(ot.final_mean) +
              " vs fedavg_full " + g17(full.final_mean) + " (" + fmt("%.2f", 100 * rel) +
              "%, limit 10%); " + fmt("%.1f", secs) + " s (limit 600 s)"};
}

Outcome criterion_7() {
  const auto result = run_experiment(restricted_regression_suite());
  const auto& rate = summary_of(result, Algorithm::kFedavot).rate;
  if (!rate || !std::isfinite(rate->slope)) return {false, "no usable gap checkpoints"};
  return {rate->slope >= -0.8 && rate->slope <= -0.3,
          "fedavot log-log slope " + g17(rate->slope) + " over " +
              std::to_string(rate->checkpoints.size()) + " dyadic checkpoints (band [-0.8, -0.3])"};
}

Outcome criterion_8() {
  const ExperimentConfig cfg = coordinated_mnist_suite();
  const auto expanded = expand_availability(cfg.availability, cfg.n_clients);
  const double scale = fedavgk_expected_scale(cfg.importance, expanded.events, expanded.q, 2);
  return {std::abs(scale - 1.0) > 0.05,
          "E[(N/K) sum_S p_i] = " + g17(scale) + " over " + std::to_string(expanded.events.size()) +
              " pairs; |scale - 1| = " + g17(std::abs(scale - 1.0)) + " (need > 0.05)"};
}

Outcome criterion_9() {
  std::string detail;
  bool pass = true;
  for (const char* name : {"restricted_regression", "coordinated_mnist"}) {
    ExperimentConfig cfg = named_suite(name);
    cfg.seeds = {3};
    const auto a = run_experiment(cfg, {1});
    const auto b = run_experiment(cfg, {3});
    const bool same = trace_csv(a) == trace_csv(b) && plot_csv(a) == plot_csv(b) &&
                      gaps_csv(a) == gaps_csv(b);
    pass = pass && same;
    detail += std::string(name) + (same ? " identical" : " DIFFERS") + " (jobs 1 vs 3, " +
              std::to_string(trace_csv(a).size()) + " bytes); ";
  }
  return {pass, detail};
}

Outcome criterion_10() {
  Rng rng(10);
  RegressionOptions opts;
  opts.n_clients = 10;
  opts.samples_per_client = 20;
  Rng data_rng(100);
  const TaskSpec regression = gen_linear_regression(opts, data_rng);
  const TaskSpec logistic =
      gen_label_skew_classification(10, 2, SyntheticBlobs{10, 20, 10, 1.0, 1.0}, data_rng);
  const double reg = testing::worst_gradient_error(regression, rng, 100);
  const double log = testing::worst_gradient_error(logistic, rng, 100);
  return {reg <= 1e-6 && log <= 1e-6, "worst relative error squared loss " + g17(reg) +
                                          ", softmax cross-entropy " + g17(log) + " (limit 1e-6)"};
}

struct Criterion {
  const char* title;
  std::function<Outcome()> run;
};

const std::vector<Criterion>& criteria() {
  static const std::vector<Criterion> all{
      {"feasibility oracle equivalence", criterion_1},
      {"Sinkhorn correctness", criterion_2},
      {"unbiasedness", criterion_3},
      {"sample-to-model inequality", criterion_4},
      {"restricted availability regression", criterion_5},
      {"coordinated classification stability", criterion_6},
      {"convergence rate slope", criterion_7},
      {"FedAvg-K distortion diagnostic", criterion_8},
      {"determinism", criterion_9},
      {"gradient checks", criterion_10},
  };
  return all;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance checks"};
  int only = 0;
  app.add_option("--criterion", only, "Run a single criterion (1-10)")->check(CLI::Range(1, 10));
  CLI11_PARSE(app, argc, argv);

  bool all_pass = true;
  for (std::size_t k = 0; k < criteria().size(); ++k) {
    if (only != 0 && static_cast<std::size_t>(only) != k + 1) continue;
    Outcome outcome;
    try {
      outcome = criteria()[k].run();
    } catch (const std::exception& e) {
      outcome = {false, std::string("threw: ") + e.what()};
    }
    all_pass = all_pass && outcome.pass;
    std::cout << (outcome.pass ? "PASS" : "FAIL") << " criterion " << (k + 1) << " ("
              << criteria()[k].title << "): " << outcome.detail << std::endl;
  }
  return all_pass ? 0 : 1;
}
