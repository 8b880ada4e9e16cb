#pragma once

// Multi-seed experiment suites: configuration, execution over seeds and
// algorithms, summary statistics, CSV/JSON artifacts and rate fitting.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <thread>
#include <variant>
#include <vector>

#include "fedavot/errors.hpp"
#include "fedavot/fedsim.hpp"
#include "fedavot/feasibility.hpp"
#include "fedavot/io.hpp"
#include "fedavot/mnist_idx.hpp"
#include "fedavot/mot.hpp"
#include "fedavot/tasks.hpp"

namespace fedavot {

enum class Algorithm { kFedAvgFull, kFedAvgK, kFedavot };

inline const char* to_string(Algorithm algorithm) {
  switch (algorithm) {
    case Algorithm::kFedAvgFull: return "fedavg_full";
    case Algorithm::kFedAvgK: return "fedavg_k";
    default: return "fedavot";
  }
}

inline Algorithm algorithm_from_string(std::string_view name) {
  if (name == "fedavg_full") return Algorithm::kFedAvgFull;
  if (name == "fedavg_k") return Algorithm::kFedAvgK;
  if (name == "fedavot") return Algorithm::kFedavot;
  throw ValidationError("unknown algorithm '" + std::string(name) + "'");
}

inline const std::vector<Algorithm>& all_algorithms() {
  static const std::vector<Algorithm> kAll{Algorithm::kFedAvgFull, Algorithm::kFedAvgK,
                                           Algorithm::kFedavot};
  return kAll;
}

// Named client weighting profiles (1-based index i):
//   uniform, decreasing (N + 1 - i), increasing (i), exp_decay (exp(-i / 10)).
inline std::vector<double> weight_profile(std::string_view name, std::size_t n) {
  std::vector<double> w(n);
  for (std::size_t k = 0; k < n; ++k) {
    const double i = static_cast<double>(k + 1);
    if (name == "uniform") {
      w[k] = 1.0;
    } else if (name == "decreasing") {
      w[k] = static_cast<double>(n) + 1.0 - i;
    } else if (name == "increasing") {
      w[k] = i;
    } else if (name == "exp_decay") {
      w[k] = std::exp(-i / 10.0);
    } else {
      throw ValidationError("unknown weight profile '" + std::string(name) + "'");
    }
  }
  return normalized(std::move(w));
}

struct TaskConfig {
  TaskKind kind = TaskKind::kLinearRegression;
  RegressionOptions regression;
  SyntheticBlobs blobs;
  std::size_t classes_per_client = 2;
  std::optional<std::string> mnist_images;
  std::optional<std::string> mnist_labels;
  std::size_t mnist_samples_per_class = 100;
};

struct ExperimentConfig {
  std::string name = "custom";
  std::size_t n_clients = 100;
  TaskConfig task;
  std::vector<double> importance;
  AvailabilityModel availability;
  std::size_t local_steps = 5;
  std::size_t rounds = 200;
  double step_size_base = 0.1;
  std::size_t batch_size = 10;
  std::optional<double> projection_radius = 1e3;
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  std::vector<Algorithm> algorithms = all_algorithms();
  // Run FedAVOT on the KL-projected plan when (p, q) violates feasibility.
  bool allow_infeasible = false;
  SinkhornOptions sinkhorn;
  bool track_average_model = true;
};

// Restricted availability: p ~ (N + 1 - i), pairs drawn from r ~ i.
inline ExperimentConfig restricted_regression_suite() {
  ExperimentConfig cfg;
  cfg.name = "restricted_regression";
  cfg.n_clients = 100;
  cfg.task.kind = TaskKind::kLinearRegression;
  cfg.task.regression = {100, 50, 10, 0.1, true};
  cfg.importance = weight_profile("decreasing", 100);
  cfg.availability = PairPrior{weight_profile("increasing", 100), 2};
  cfg.local_steps = 5;
  cfg.rounds = 200;
  cfg.step_size_base = 0.1;
  cfg.batch_size = 10;
  cfg.allow_infeasible = true;
  return cfg;
}

// Coordinated sampling: p ~ exp(-i / 10), uniform pairs, label-skewed
// classification (synthetic blobs unless MNIST paths are given).
inline ExperimentConfig coordinated_mnist_suite() {
  ExperimentConfig cfg;
  cfg.name = "coordinated_mnist";
  cfg.n_clients = 100;
  cfg.task.kind = TaskKind::kMulticlassLogistic;
  cfg.task.blobs = SyntheticBlobs{10, 20, 25, 1.0, 1.0};
  cfg.task.classes_per_client = 2;
  cfg.importance = weight_profile("exp_decay", 100);
  cfg.availability = PairPrior{uniform_distribution(100), 2};
  cfg.local_steps = 5;
  cfg.rounds = 300;
  cfg.step_size_base = 0.5;
  cfg.batch_size = 10;
  cfg.allow_infeasible = true;
  return cfg;
}

inline ExperimentConfig named_suite(std::string_view name) {
  if (name == "restricted_regression") return restricted_regression_suite();
  if (name == "coordinated_mnist") return coordinated_mnist_suite();
  throw ValidationError("unknown suite '" + std::string(name) +
                        "' (expected restricted_regression or coordinated_mnist)");
}

namespace detail {

inline std::vector<double> distribution_from_json(const Json& value, std::size_t n,
                                                  const char* what) {
  if (value.is_string()) return weight_profile(value.get<std::string>(), n);
  auto out = value.get<std::vector<double>>();
  if (out.size() != n) {
    throw ValidationError(std::string(what) + " has " + std::to_string(out.size()) +
                          " entries for " + std::to_string(n) + " clients");
  }
  return out;
}

}  // namespace detail

// JSON document mirroring ExperimentConfig; see README for the schema.
inline ExperimentConfig config_from_json(const Json& doc) {
  try {
    ExperimentConfig cfg;
    cfg.name = doc.value("name", std::string("custom"));
    cfg.n_clients = doc.at("n_clients").get<std::size_t>();
    const Json& task = doc.at("task");
    const std::string kind = task.at("kind").get<std::string>();
    if (kind == "linear_regression") {
      cfg.task.kind = TaskKind::kLinearRegression;
      cfg.task.regression.n_clients = cfg.n_clients;
      cfg.task.regression.samples_per_client = task.value("samples_per_client", std::size_t{50});
      cfg.task.regression.dim = task.value("dim", std::size_t{10});
      cfg.task.regression.label_noise = task.value("label_noise", 0.1);
      cfg.task.regression.heterogeneous = task.value("heterogeneous", true);
    } else if (kind == "label_skew_classification") {
      cfg.task.kind = TaskKind::kMulticlassLogistic;
      cfg.task.blobs.n_classes = task.value("classes", std::size_t{10});
      cfg.task.blobs.dim = task.value("dim", std::size_t{20});
      cfg.task.blobs.samples_per_class = task.value("samples_per_class", std::size_t{25});
      cfg.task.blobs.center_scale = task.value("center_scale", 1.0);
      cfg.task.blobs.spread = task.value("spread", 1.0);
      cfg.task.classes_per_client = task.value("classes_per_client", std::size_t{2});
      if (task.contains("mnist_images")) cfg.task.mnist_images = task.at("mnist_images").get<std::string>();
      if (task.contains("mnist_labels")) cfg.task.mnist_labels = task.at("mnist_labels").get<std::string>();
      cfg.task.mnist_samples_per_class =
          task.value("mnist_samples_per_class", std::size_t{100});
    } else {
      throw ValidationError("unknown task kind '" + kind + "'");
    }
    cfg.importance = detail::distribution_from_json(doc.value("importance", Json("uniform")),
                                                    cfg.n_clients, "importance");
    const Json& avail = doc.at("availability");
    const std::string type = avail.at("type").get<std::string>();
    if (type == "subset_prior") {
      cfg.availability =
          PairPrior{detail::distribution_from_json(avail.value("prior", Json("uniform")),
                                                   cfg.n_clients, "availability prior"),
                    avail.value("subset_size", std::size_t{2})};
    } else if (type == "explicit") {
      cfg.availability = ExplicitAvailability{avail.at("events").get<std::vector<EventSet>>(),
                                              avail.at("q").get<std::vector<double>>()};
    } else {
      throw ValidationError("unknown availability type '" + type + "'");
    }
    cfg.local_steps = doc.value("local_steps", cfg.local_steps);
    cfg.rounds = doc.value("rounds", cfg.rounds);
    cfg.step_size_base = doc.value("step_size_base", cfg.step_size_base);
    cfg.batch_size = doc.value("batch_size", cfg.batch_size);
    if (doc.contains("projection_radius")) {
      const Json& r = doc.at("projection_radius");
      cfg.projection_radius = r.is_null() ? std::nullopt : std::optional<double>(r.get<double>());
    }
    if (doc.contains("seeds")) cfg.seeds = doc.at("seeds").get<std::vector<std::uint64_t>>();
    if (doc.contains("algorithms")) {
      cfg.algorithms.clear();
      for (const auto& a : doc.at("algorithms")) {
        cfg.algorithms.push_back(algorithm_from_string(a.get<std::string>()));
      }
    }
    cfg.allow_infeasible = doc.value("allow_infeasible", false);
    cfg.track_average_model = doc.value("track_average_model", true);
    if (doc.contains("sinkhorn")) {
      const Json& s = doc.at("sinkhorn");
      cfg.sinkhorn.epsilon = s.value("epsilon", cfg.sinkhorn.epsilon);
      cfg.sinkhorn.max_iterations = s.value("max_iterations", cfg.sinkhorn.max_iterations);
    }
    if (cfg.seeds.empty()) throw ValidationError("seed list is empty");
    if (cfg.algorithms.empty()) throw ValidationError("algorithm list is empty");
    return cfg;
  } catch (const Json::exception& e) {
    throw ValidationError(std::string("malformed experiment config: ") + e.what());
  }
}

inline Json config_to_json(const ExperimentConfig& cfg) {
  Json task;
  if (cfg.task.kind == TaskKind::kLinearRegression) {
    task = {{"kind", "linear_regression"},
            {"samples_per_client", cfg.task.regression.samples_per_client},
            {"dim", cfg.task.regression.dim},
            {"label_noise", cfg.task.regression.label_noise},
            {"heterogeneous", cfg.task.regression.heterogeneous}};
  } else {
    task = {{"kind", "label_skew_classification"},
            {"classes", cfg.task.blobs.n_classes},
            {"dim", cfg.task.blobs.dim},
            {"samples_per_class", cfg.task.blobs.samples_per_class},
            {"center_scale", cfg.task.blobs.center_scale},
            {"spread", cfg.task.blobs.spread},
            {"classes_per_client", cfg.task.classes_per_client},
            {"mnist_samples_per_class", cfg.task.mnist_samples_per_class}};
    if (cfg.task.mnist_images) task["mnist_images"] = *cfg.task.mnist_images;
    if (cfg.task.mnist_labels) task["mnist_labels"] = *cfg.task.mnist_labels;
  }
  Json avail;
  if (const auto* pp = std::get_if<PairPrior>(&cfg.availability)) {
    avail = {{"type", "subset_prior"}, {"prior", pp->prior}, {"subset_size", pp->subset_size}};
  } else {
    const auto& ex = std::get<ExplicitAvailability>(cfg.availability);
    avail = {{"type", "explicit"}, {"events", ex.events}, {"q", ex.q}};
  }
  Json algorithms = Json::array();
  for (Algorithm a : cfg.algorithms) algorithms.push_back(to_string(a));
  return Json{{"name", cfg.name},
              {"n_clients", cfg.n_clients},
              {"task", task},
              {"importance", cfg.importance},
              {"availability", avail},
              {"local_steps", cfg.local_steps},
              {"rounds", cfg.rounds},
              {"step_size_base", cfg.step_size_base},
              {"batch_size", cfg.batch_size},
              {"projection_radius", cfg.projection_radius ? Json(*cfg.projection_radius) : Json()},
              {"seeds", cfg.seeds},
              {"algorithms", algorithms},
              {"allow_infeasible", cfg.allow_infeasible},
              {"track_average_model", cfg.track_average_model},
              {"sinkhorn",
               {{"epsilon", cfg.sinkhorn.epsilon},
                {"max_iterations", cfg.sinkhorn.max_iterations}}}};
}

// Dataset for one seed. Generation uses stream kDataStream of the seed.
inline TaskSpec make_task(const ExperimentConfig& cfg, std::uint64_t seed,
                          const std::optional<IdxDataset>& mnist = std::nullopt) {
  Rng rng = make_stream(seed, kDataStream);
  TaskSpec task;
  if (cfg.task.kind == TaskKind::kLinearRegression) {
    RegressionOptions opts = cfg.task.regression;
    opts.n_clients = cfg.n_clients;
    task = gen_linear_regression(opts, rng);
  } else if (mnist) {
    LabeledPool pool{mnist->features, mnist->labels, cfg.task.blobs.n_classes,
                     cfg.task.mnist_samples_per_class};
    task = gen_label_skew_classification(cfg.n_clients, cfg.task.classes_per_client, pool, rng);
  } else {
    task = gen_label_skew_classification(cfg.n_clients, cfg.task.classes_per_client,
                                         cfg.task.blobs, rng);
  }
  task.importance = cfg.importance;
  return task;
}

// ---------------------------------------------------------------------------
// Rate fitting

struct RateFit {
  double slope = std::numeric_limits<double>::quiet_NaN();
  double intercept = std::numeric_limits<double>::quiet_NaN();
  std::vector<std::size_t> checkpoints;  // T values used
  std::vector<std::size_t> excluded;     // dyadic T with nonpositive gap
};

// Least-squares slope of log(gap_T) against log(T) over T = 1, 2, 4, ...
// gaps[t - 1] is the gap after t rounds. Nonpositive gaps are excluded.
inline RateFit fit_rate(std::span<const double> gaps) {
  RateFit fit;
  std::vector<double> xs;
  std::vector<double> ys;
  for (std::size_t t = 1; t <= gaps.size(); t *= 2) {
    const double gap = gaps[t - 1];
    if (gap > 0.0 && std::isfinite(gap)) {
      fit.checkpoints.push_back(t);
      xs.push_back(std::log(static_cast<double>(t)));
      ys.push_back(std::log(gap));
    } else {
      fit.excluded.push_back(t);
    }
  }
  if (xs.size() < 2) return fit;
  const double n = static_cast<double>(xs.size());
  double mx = 0.0;
  double my = 0.0;
  for (std::size_t k = 0; k < xs.size(); ++k) {
    mx += xs[k];
    my += ys[k];
  }
  mx /= n;
  my /= n;
  double sxy = 0.0;
  double sxx = 0.0;
  for (std::size_t k = 0; k < xs.size(); ++k) {
    sxy += (xs[k] - mx) * (ys[k] - my);
    sxx += (xs[k] - mx) * (xs[k] - mx);
  }
  fit.slope = sxy / sxx;
  fit.intercept = my - fit.slope * mx;
  return fit;
}

// ---------------------------------------------------------------------------
// Statistics

struct AlgorithmSummary {
  Algorithm algorithm;
  std::vector<double> mean;  // per round, across seeds
  std::vector<double> std;   // population standard deviation across seeds
  double final_mean = 0.0;
  double final_std = 0.0;
  double final_average_model_loss = std::numeric_limits<double>::quiet_NaN();
  // Per-seed variance of the loss over the last ceil(0.2 S) rounds, averaged.
  double tail_variance = 0.0;
  std::optional<RateFit> rate;
};

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;
};

inline MeanStd mean_std(std::span<const double> xs) {
  MeanStd out;
  if (xs.empty()) return out;
  for (double x : xs) out.mean += x;
  out.mean /= static_cast<double>(xs.size());
  double ss = 0.0;
  for (double x : xs) ss += (x - out.mean) * (x - out.mean);
  out.std = std::sqrt(ss / static_cast<double>(xs.size()));
  return out;
}

inline std::size_t tail_length(std::size_t rounds) {
  return std::max<std::size_t>(1, (rounds + 4) / 5);
}

// Variance (population) of the last ceil(0.2 n) entries.
inline double tail_variance(std::span<const double> series) {
  const std::size_t len = tail_length(series.size());
  const double s = mean_std(series.subspan(series.size() - len)).std;
  return s * s;
}

// ---------------------------------------------------------------------------
// Execution

struct ExperimentResult {
  ExperimentConfig config;
  // traces[s * n_algorithms + a] for seed index s and algorithm index a.
  std::vector<TrainingTrace> traces;
  std::vector<AlgorithmSummary> summaries;
  FeasibilityVerdict feasibility;
  std::optional<SinkhornResult> sinkhorn;
  std::optional<double> distortion;  // E[(N/K) sum_{S} p_i] when events share a size
  // Regression: F(theta*) per seed for the p-weighted least-squares optimum.
  std::vector<double> optimal_loss;
  // gaps[s * n_algorithms + a][t - 1] = F(avg of first t aggregates) - F(theta*).
  std::vector<std::vector<double>> gaps;

  const TrainingTrace& trace(std::size_t seed_index, std::size_t algorithm_index) const {
    return traces[seed_index * config.algorithms.size() + algorithm_index];
  }
};

struct RunOptions {
  std::size_t jobs = 1;
};

inline std::string violation_to_string(const HallViolation& v) {
  std::string out = "I = {";
  for (std::size_t k = 0; k < v.clients.size(); ++k) {
    if (k) out += ", ";
    out += std::to_string(v.clients[k]);
  }
  out += v.side == HallSide::kUpper ? "} violates p(I) <= q(N(I))" : "} violates q(S(I)) <= p(I)";
  out += " by " + std::to_string(v.margin);
  return out;
}

namespace detail {

// Runs job(0..count-1) on `jobs` threads; rethrows the lowest-index failure.
template <typename Job>
void parallel_for(std::size_t count, std::size_t jobs, Job&& job) {
  std::vector<std::exception_ptr> errors(count);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t k = next++; k < count; k = next++) {
      try {
        job(k);
      } catch (...) {
        errors[k] = std::current_exception();
      }
    }
  };
  const std::size_t n_threads = std::max<std::size_t>(1, std::min(jobs, count));
  if (n_threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < n_threads; ++t) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

}  // namespace detail

inline ExperimentResult run_experiment(const ExperimentConfig& cfg, RunOptions options = {}) {
  if (cfg.seeds.empty()) throw ValidationError("seed list is empty");
  ExperimentResult result;
  result.config = cfg;

  FederationConfig base;
  base.n_clients = cfg.n_clients;
  base.local_steps = cfg.local_steps;
  base.rounds = cfg.rounds;
  base.step_size_base = cfg.step_size_base;
  base.batch_size = cfg.batch_size;
  base.projection_radius = cfg.projection_radius;
  base.availability = cfg.availability;
  base.importance = cfg.importance;
  base.track_average_model = cfg.track_average_model;
  validate(base);

  const TransportProblem problem = availability_problem(base);
  result.feasibility = check_feasible_maxflow(problem);
  {
    const std::size_t k = problem.events().front().size();
    const bool uniform_size = std::all_of(problem.events().begin(), problem.events().end(),
                                          [k](const EventSet& e) { return e.size() == k; });
    if (uniform_size) {
      result.distortion =
          fedavgk_expected_scale(problem.importance(), problem.events(), problem.availability(), k);
    }
  }

  std::optional<Fedavot> fedavot_rule;
  const bool wants_fedavot = std::find(cfg.algorithms.begin(), cfg.algorithms.end(),
                                       Algorithm::kFedavot) != cfg.algorithms.end();
  if (wants_fedavot) {
    if (!result.feasibility.feasible && !cfg.allow_infeasible) {
      throw InfeasibleProblem("importance/availability pairing is infeasible: " +
                              violation_to_string(*result.feasibility.violation));
    }
    result.sinkhorn = solve_sinkhorn(problem, cfg.sinkhorn);
    fedavot_rule = Fedavot{result.sinkhorn->weights, result.sinkhorn->converged,
                           result.sinkhorn->row_residual_l1};
  }

  std::optional<IdxDataset> mnist;
  if (cfg.task.kind == TaskKind::kMulticlassLogistic && cfg.task.mnist_images) {
    if (!cfg.task.mnist_labels) throw ValidationError("mnist_images given without mnist_labels");
    mnist = load_mnist_idx(*cfg.task.mnist_images, *cfg.task.mnist_labels);
  }

  const std::size_t n_seeds = cfg.seeds.size();
  const std::size_t n_algs = cfg.algorithms.size();
  std::vector<TaskSpec> tasks(n_seeds);
  detail::parallel_for(n_seeds, options.jobs,
                       [&](std::size_t s) { tasks[s] = make_task(cfg, cfg.seeds[s], mnist); });

  result.traces.resize(n_seeds * n_algs);
  detail::parallel_for(n_seeds * n_algs, options.jobs, [&](std::size_t idx) {
    const std::size_t s = idx / n_algs;
    FederationConfig fc = base;
    fc.seed = cfg.seeds[s];
    switch (cfg.algorithms[idx % n_algs]) {
      case Algorithm::kFedAvgFull: fc.rule = FedAvgFull{}; break;
      case Algorithm::kFedAvgK: fc.rule = FedAvgK{}; break;
      case Algorithm::kFedavot:
        fc.rule = *fedavot_rule;
        fc.allow_unconverged = cfg.allow_infeasible;
        break;
    }
    result.traces[idx] = run_training(fc, tasks[s]);
  });

  const bool regression = cfg.task.kind == TaskKind::kLinearRegression;
  if (regression && cfg.track_average_model) {
    result.optimal_loss.resize(n_seeds);
    for (std::size_t s = 0; s < n_seeds; ++s) {
      const Vector opt = weighted_least_squares(tasks[s], cfg.importance);
      result.optimal_loss[s] = global_objective(opt, cfg.importance, tasks[s]);
    }
    result.gaps.resize(n_seeds * n_algs);
    for (std::size_t idx = 0; idx < result.traces.size(); ++idx) {
      for (const RoundRecord& r : result.traces[idx].rounds) {
        result.gaps[idx].push_back(r.average_model_loss - result.optimal_loss[idx / n_algs]);
      }
    }
  }

  for (std::size_t a = 0; a < n_algs; ++a) {
    AlgorithmSummary summary;
    summary.algorithm = cfg.algorithms[a];
    std::vector<double> column(n_seeds);
    for (std::size_t t = 0; t < cfg.rounds; ++t) {
      for (std::size_t s = 0; s < n_seeds; ++s) column[s] = result.trace(s, a).rounds[t].global_loss;
      const MeanStd ms = mean_std(column);
      summary.mean.push_back(ms.mean);
      summary.std.push_back(ms.std);
    }
    summary.final_mean = summary.mean.back();
    summary.final_std = summary.std.back();
    double tail = 0.0;
    double avg_loss = 0.0;
    std::vector<double> series(cfg.rounds);
    for (std::size_t s = 0; s < n_seeds; ++s) {
      const auto& rounds = result.trace(s, a).rounds;
      for (std::size_t t = 0; t < cfg.rounds; ++t) series[t] = rounds[t].global_loss;
      tail += tail_variance(series);
      avg_loss += rounds.back().average_model_loss;
    }
    summary.tail_variance = tail / static_cast<double>(n_seeds);
    summary.final_average_model_loss = avg_loss / static_cast<double>(n_seeds);
    if (!result.gaps.empty()) {
      std::vector<double> mean_gap(cfg.rounds, 0.0);
      for (std::size_t s = 0; s < n_seeds; ++s) {
        for (std::size_t t = 0; t < cfg.rounds; ++t) mean_gap[t] += result.gaps[s * n_algs + a][t];
      }
      for (double& g : mean_gap) g /= static_cast<double>(n_seeds);
      summary.rate = fit_rate(mean_gap);
    }
    result.summaries.push_back(std::move(summary));
  }
  return result;
}

// ---------------------------------------------------------------------------
// Artifacts

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

// round,seed,algorithm,global_loss; seeds outer, algorithms inner, rounds innermost.
inline std::string trace_csv(const ExperimentResult& result) {
  std::string out = "round,seed,algorithm,global_loss\n";
  for (const TrainingTrace& trace : result.traces) {
    for (const RoundRecord& r : trace.rounds) {
      out += std::to_string(r.round) + "," + std::to_string(trace.seed) + "," + trace.algorithm +
             "," + format_double(r.global_loss) + "\n";
    }
  }
  return out;
}

// round,seed,algorithm,gap with gap = F(running average model) - F(theta*).
inline std::string gaps_csv(const ExperimentResult& result) {
  std::string out = "round,seed,algorithm,gap\n";
  for (std::size_t idx = 0; idx < result.gaps.size(); ++idx) {
    const TrainingTrace& trace = result.traces[idx];
    for (std::size_t t = 0; t < result.gaps[idx].size(); ++t) {
      out += std::to_string(t + 1) + "," + std::to_string(trace.seed) + "," + trace.algorithm +
             "," + format_double(result.gaps[idx][t]) + "\n";
    }
  }
  return out;
}

// round,algorithm,mean,std.
inline std::string plot_csv(const ExperimentResult& result) {
  std::string out = "round,algorithm,mean,std\n";
  for (const AlgorithmSummary& s : result.summaries) {
    for (std::size_t t = 0; t < s.mean.size(); ++t) {
      out += std::to_string(t + 1) + "," + to_string(s.algorithm) + "," + format_double(s.mean[t]) +
             "," + format_double(s.std[t]) + "\n";
    }
  }
  return out;
}

inline Json verdict_to_json(const FeasibilityVerdict& v) {
  Json out{{"feasible", v.feasible}, {"max_flow_value", v.max_flow_value}};
  if (v.violation) {
    out["violation"] = {{"clients", v.violation->clients},
                        {"side", v.violation->side == HallSide::kUpper ? "upper" : "lower"},
                        {"margin", v.violation->margin}};
  } else {
    out["violation"] = nullptr;
  }
  return out;
}

inline Json summary_to_json(const ExperimentResult& result) {
  Json algs = Json::object();
  for (const AlgorithmSummary& s : result.summaries) {
    Json entry{{"final_loss_mean", s.final_mean},
               {"final_loss_std", s.final_std},
               {"final_average_model_loss", s.final_average_model_loss},
               {"tail_variance", s.tail_variance}};
    if (s.rate) {
      entry["rate_slope"] = std::isfinite(s.rate->slope) ? Json(s.rate->slope) : Json();
      entry["rate_checkpoints"] = s.rate->checkpoints;
    }
    algs[to_string(s.algorithm)] = entry;
  }
  Json out{{"suite", result.config.name},
           {"seeds", result.config.seeds},
           {"rounds", result.config.rounds},
           {"algorithms", algs},
           {"feasibility", verdict_to_json(result.feasibility)},
           {"fedavgk_expected_scale",
            result.distortion ? Json(*result.distortion) : Json()}};
  if (result.sinkhorn) {
    out["sinkhorn"] = {{"converged", result.sinkhorn->converged},
                       {"iterations", result.sinkhorn->iterations},
                       {"row_residual_l1", result.sinkhorn->row_residual_l1},
                       {"col_residual_l1", result.sinkhorn->col_residual_l1}};
  }
  if (!result.optimal_loss.empty()) out["optimal_loss"] = result.optimal_loss;
  out["config"] = config_to_json(result.config);
  return out;
}

inline void write_artifacts(const ExperimentResult& result, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  write_text_file((dir / "trace.csv").string(), trace_csv(result));
  write_text_file((dir / "plot_data.csv").string(), plot_csv(result));
  if (!result.gaps.empty()) write_text_file((dir / "gaps.csv").string(), gaps_csv(result));
  write_text_file((dir / "summary.json").string(), summary_to_json(result).dump(2) + "\n");
}

// Reads a gaps CSV (round,seed,algorithm,gap), keeps rows of `algorithm`
// (all rows when empty), and averages the gap across seeds per round.
inline std::vector<double> read_gap_series(const std::string& csv_text, const std::string& algorithm) {
  std::istringstream in(csv_text);
  std::string line;
  if (!std::getline(in, line)) throw ValidationError("rate input is empty");
  std::vector<std::string> header;
  {
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) header.push_back(cell);
  }
  auto column = [&](std::string_view name) -> std::optional<std::size_t> {
    for (std::size_t k = 0; k < header.size(); ++k) {
      if (header[k] == name) return k;
    }
    return std::nullopt;
  };
  const auto round_col = column("round");
  const auto gap_col = column("gap");
  const auto alg_col = column("algorithm");
  if (!round_col || !gap_col) throw ValidationError("rate input needs 'round' and 'gap' columns");

  std::map<std::size_t, std::pair<double, std::size_t>> sums;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (cells.size() != header.size()) {
      throw ValidationError("rate input line " + std::to_string(line_no) + " has " +
                            std::to_string(cells.size()) + " fields");
    }
    if (!algorithm.empty() && alg_col && cells[*alg_col] != algorithm) continue;
    try {
      const std::size_t round = std::stoul(cells[*round_col]);
      auto& entry = sums[round];
      entry.first += std::stod(cells[*gap_col]);
      entry.second += 1;
    } catch (const std::exception&) {
      throw ValidationError("rate input line " + std::to_string(line_no) + " is not numeric");
    }
  }
  if (sums.empty()) throw ValidationError("rate input has no rows for '" + algorithm + "'");
  std::vector<double> series;
  std::size_t expected = 1;
  for (const auto& [round, entry] : sums) {
    if (round != expected++) throw ValidationError("rate input rounds must be 1..T without gaps");
    series.push_back(entry.first / static_cast<double>(entry.second));
  }
  return series;
}

}  // namespace fedavot
