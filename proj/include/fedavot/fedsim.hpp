#pragma once

// Single-process federated simulator: projected local SGD on every client,
// aggregation over the observed active set with FedAvg (full / K) or
// transport-derived FedAVOT weights.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "fedavot/errors.hpp"
#include "fedavot/mot.hpp"
#include "fedavot/rng.hpp"
#include "fedavot/tasks.hpp"

namespace fedavot {

// ---------------------------------------------------------------------------
// Availability

struct ExplicitAvailability {
  std::vector<EventSet> events;
  std::vector<double> q;
};

// K clients drawn sequentially without replacement, each draw proportional to
// the prior r among the clients not yet drawn.
struct PairPrior {
  std::vector<double> prior;
  std::size_t subset_size = 2;
};

using AvailabilityModel = std::variant<ExplicitAvailability, PairPrior>;

inline constexpr std::size_t kDefaultEventCap = 1'000'000;

struct ExpandedAvailability {
  std::vector<EventSet> events;
  std::vector<double> q;
};

namespace detail {

// C(n, k), saturating at SIZE_MAX.
inline std::size_t binomial(std::size_t n, std::size_t k) {
  if (k > n) return 0;
  k = std::min(k, n - k);
  std::size_t out = 1;
  for (std::size_t r = 1; r <= k; ++r) {
    const std::size_t num = n - k + r;
    if (out > std::numeric_limits<std::size_t>::max() / num) {
      return std::numeric_limits<std::size_t>::max();
    }
    out = out * num / r;
  }
  return out;
}

// Probability that sequential proportional sampling without replacement
// draws exactly `members` in its first |members| draws, any order. Dynamic
// program over the sub-subsets of `members`.
inline double subset_draw_probability(std::span<const double> prior,
                                      std::span<const std::size_t> members) {
  const std::size_t k = members.size();
  const std::size_t states = std::size_t{1} << k;
  std::vector<double> prob(states, 0.0);
  std::vector<double> drawn_mass(states, 0.0);
  prob[0] = 1.0;
  for (std::size_t s = 1; s < states; ++s) {
    for (std::size_t b = 0; b < k; ++b) {
      if (s & (std::size_t{1} << b)) {
        drawn_mass[s] = drawn_mass[s & ~(std::size_t{1} << b)] + prior[members[b]];
        break;
      }
    }
  }
  for (std::size_t s = 1; s < states; ++s) {
    for (std::size_t b = 0; b < k; ++b) {
      const std::size_t bit = std::size_t{1} << b;
      if (!(s & bit)) continue;
      const std::size_t before = s & ~bit;
      const double remaining = 1.0 - drawn_mass[before];
      if (remaining > 0.0) prob[s] += prob[before] * prior[members[b]] / remaining;
    }
  }
  return prob[states - 1];
}

}  // namespace detail

// Explicit (events, q) with events in lexicographic order for PairPrior.
// For K = 2: q({a, b}) = r_a r_b (1 / (1 - r_a) + 1 / (1 - r_b)).
inline ExpandedAvailability expand_availability(const AvailabilityModel& model,
                                                std::size_t n_clients,
                                                std::size_t event_cap = kDefaultEventCap) {
  if (const auto* explicit_model = std::get_if<ExplicitAvailability>(&model)) {
    return {explicit_model->events, explicit_model->q};
  }
  const auto& prior_model = std::get<PairPrior>(model);
  const auto& r = prior_model.prior;
  const std::size_t k = prior_model.subset_size;
  if (r.size() != n_clients) {
    throw ValidationError("availability prior has " + std::to_string(r.size()) +
                          " entries for " + std::to_string(n_clients) + " clients");
  }
  detail::check_simplex(r, "availability prior r");
  const auto positive = static_cast<std::size_t>(
      std::count_if(r.begin(), r.end(), [](double v) { return v > 0.0; }));
  if (k == 0 || k > positive) {
    throw ValidationError("subset size " + std::to_string(k) + " needs at least that many " +
                          "clients with positive prior (have " + std::to_string(positive) + ")");
  }
  for (std::size_t i = 0; i < n_clients; ++i) {
    if (r[i] >= 1.0 && k > 1) {
      throw ValidationError("prior entry r[" + std::to_string(i) + "] must be below 1");
    }
  }
  const std::size_t count = detail::binomial(n_clients, k);
  if (count > event_cap) {
    throw ValidationError("C(" + std::to_string(n_clients) + ", " + std::to_string(k) +
                          ") events exceed the cap of " + std::to_string(event_cap));
  }
  if (k > 20) throw ValidationError("subset size above 20 is not supported");

  ExpandedAvailability out;
  out.events.reserve(count);
  out.q.reserve(count);
  EventSet members(k);
  std::iota(members.begin(), members.end(), std::size_t{0});
  while (true) {
    double prob;
    if (k == 1) {
      prob = r[members[0]];
    } else if (k == 2) {
      const double a = r[members[0]];
      const double b = r[members[1]];
      prob = a * b * (1.0 / (1.0 - a) + 1.0 / (1.0 - b));
    } else {
      prob = detail::subset_draw_probability(r, members);
    }
    out.events.push_back(members);
    out.q.push_back(prob);

    std::size_t pos = k;
    while (pos > 0 && members[pos - 1] == n_clients - (k - pos) - 1) --pos;
    if (pos == 0) break;
    ++members[pos - 1];
    for (std::size_t s = pos; s < k; ++s) members[s] = members[s - 1] + 1;
  }
  return out;
}

struct ActiveSet {
  EventSet clients;
  std::size_t event = 0;
};

// Draws event j with probability q_j.
class EventSampler {
 public:
  explicit EventSampler(std::span<const double> q) : cumulative_(q.size()) {
    double total = 0.0;
    for (std::size_t j = 0; j < q.size(); ++j) {
      total += q[j];
      cumulative_[j] = total;
    }
    for (std::size_t j = q.size(); j-- > 0;) {
      if (q[j] > 0.0) {
        last_positive_ = j;
        break;
      }
    }
  }

  std::size_t draw(Rng& rng) const {
    const double u = rng.uniform() * cumulative_.back();
    const auto it = std::upper_bound(cumulative_.begin(), cumulative_.end(), u);
    const auto j = static_cast<std::size_t>(it - cumulative_.begin());
    return std::min(j, last_positive_);
  }

 private:
  std::vector<double> cumulative_;
  std::size_t last_positive_ = 0;
};

inline ActiveSet sample_active_set(std::span<const EventSet> events, std::span<const double> q,
                                   Rng& rng) {
  const std::size_t j = EventSampler(q).draw(rng);
  return {events[j], j};
}

// ---------------------------------------------------------------------------
// Local updates

inline constexpr std::size_t kNoClient = std::numeric_limits<std::size_t>::max();

class NonFiniteGradient : public Error {
 public:
  explicit NonFiniteGradient(std::size_t client)
      : Error(ExitCode::kValidation,
              client == kNoClient ? std::string("non-finite gradient")
                                  : "non-finite gradient at client " + std::to_string(client)),
        client_(client) {}

  std::size_t client() const noexcept { return client_; }

 private:
  std::size_t client_;
};

// Euclidean projection onto the ball of the given radius (no-op when unset).
inline void project_to_ball(Vector& theta, std::optional<double> radius) {
  if (!radius) return;
  const double norm = theta.norm();
  if (norm > *radius) theta *= *radius / norm;
}

// Pi_C(theta - step * gradient) with C the L2 ball of `radius`.
inline Vector local_update(const Vector& theta, const Vector& gradient, double step,
                           std::optional<double> radius, std::size_t client = kNoClient) {
  if (!gradient.allFinite()) throw NonFiniteGradient(client);
  Vector out = theta - step * gradient;
  project_to_ball(out, radius);
  return out;
}

// Mini-batches drawn without replacement from a per-client permutation that
// is reshuffled once fewer than a full batch remains.
class BatchSampler {
 public:
  BatchSampler(std::size_t n_samples, std::size_t batch_size, Rng rng)
      : order_(n_samples), batch_(std::min(batch_size, n_samples)), rng_(std::move(rng)) {
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    rng_.shuffle(std::span<std::size_t>(order_));
  }

  std::span<const std::size_t> next() {
    if (cursor_ + batch_ > order_.size()) {
      rng_.shuffle(std::span<std::size_t>(order_));
      cursor_ = 0;
    }
    const auto out = std::span<const std::size_t>(order_).subspan(cursor_, batch_);
    cursor_ += batch_;
    return out;
  }

 private:
  std::vector<std::size_t> order_;
  std::size_t batch_;
  std::size_t cursor_ = 0;
  Rng rng_;
};

// ---------------------------------------------------------------------------
// Aggregation

struct FedAvgFull {};
struct FedAvgK {};
struct Fedavot {
  WeightMatrix weights;
  bool plan_converged = false;
  double row_residual_l1 = 0.0;
};

using AggregationRule = std::variant<FedAvgFull, FedAvgK, Fedavot>;

inline const char* rule_name(const AggregationRule& rule) {
  switch (rule.index()) {
    case 0: return "fedavg_full";
    case 1: return "fedavg_k";
    default: return "fedavot";
  }
}

inline Fedavot make_fedavot_rule(const TransportProblem& problem, SinkhornOptions options = {}) {
  SinkhornResult result = solve_sinkhorn(problem, options);
  return Fedavot{std::move(result.weights), result.converged, result.row_residual_l1};
}

// FedAvgFull: sum_i p_i theta_i (active is ignored).
// FedAvgK:    sum_{i in active} (N / |active|) p_i theta_i.
// Fedavot:    sum_{i in A_j} Y[i, j] theta_i; `active` must equal A_j.
inline Vector aggregate(const AggregationRule& rule, std::span<const Vector> states,
                        std::span<const std::size_t> active, std::size_t event,
                        std::span<const double> importance) {
  if (states.empty()) throw ValidationError("no client states to aggregate");
  if (importance.size() != states.size()) {
    throw ValidationError("importance and client states differ in length");
  }
  Vector out = Vector::Zero(states.front().size());
  if (std::holds_alternative<FedAvgFull>(rule)) {
    for (std::size_t i = 0; i < states.size(); ++i) out.noalias() += importance[i] * states[i];
    return out;
  }
  if (std::holds_alternative<FedAvgK>(rule)) {
    if (active.empty()) throw ValidationError("FedAvg-K needs a nonempty active set");
    const double factor =
        static_cast<double>(states.size()) / static_cast<double>(active.size());
    for (std::size_t i : active) out.noalias() += (factor * importance[i]) * states[i];
    return out;
  }
  const WeightMatrix& weights = std::get<Fedavot>(rule).weights;
  if (event >= weights.n_cols()) {
    throw ValidationError("event " + std::to_string(event) + " is outside the weight matrix");
  }
  const auto rows = weights.mask()->column_rows(event);
  const auto column = weights.column(event);
  if (!std::equal(rows.begin(), rows.end(), active.begin(), active.end())) {
    throw ValidationError("active set does not match weight column " + std::to_string(event));
  }
  double total = 0.0;
  for (std::size_t k = 0; k < rows.size(); ++k) {
    total += column[k];
    out.noalias() += column[k] * states[rows[k]];
  }
  if (!(total > 0.0)) {
    throw ValidationError("weight column " + std::to_string(event) +
                          " sums to zero; weights do not match the availability mask");
  }
  return out;
}

// w_i = sum_j q_j Y[i, j] 1[i in A_j]: the expected aggregation weight of
// client i under iid availability draws.
inline std::vector<double> expected_aggregate_weight(const WeightMatrix& weights,
                                                     std::span<const EventSet> events,
                                                     std::span<const double> q) {
  const Mask& mask = *weights.mask();
  if (!(mask == Mask(mask.n_rows(), events)) || q.size() != mask.n_cols()) {
    throw ValidationError("weights, events and q do not agree");
  }
  std::vector<double> w(mask.n_rows(), 0.0);
  for (std::size_t j = 0; j < mask.n_cols(); ++j) {
    for (std::size_t k = mask.col_begin(j); k < mask.col_end(j); ++k) {
      w[mask.row(k)] += q[j] * weights.values()[k];
    }
  }
  return w;
}

// E[(N/K) sum_{i in S} p_i]: total FedAvg-K weight in expectation.
inline double fedavgk_expected_scale(std::span<const double> importance,
                                     std::span<const EventSet> events, std::span<const double> q,
                                     std::size_t subset_size) {
  if (events.size() != q.size()) throw ValidationError("events and q differ in length");
  const double factor =
      static_cast<double>(importance.size()) / static_cast<double>(subset_size);
  double total = 0.0;
  for (std::size_t j = 0; j < events.size(); ++j) {
    if (events[j].size() != subset_size) {
      throw ValidationError("event " + std::to_string(j) + " has " +
                            std::to_string(events[j].size()) + " clients, expected " +
                            std::to_string(subset_size));
    }
    double mass = 0.0;
    for (std::size_t i : events[j]) {
      if (i >= importance.size()) throw ValidationError("event references unknown client");
      mass += importance[i];
    }
    total += q[j] * factor * mass;
  }
  return total;
}

// ---------------------------------------------------------------------------
// Training loop

struct FederationConfig {
  std::size_t n_clients = 0;
  std::size_t local_steps = 1;  // H
  std::size_t rounds = 1;       // S
  double step_size_base = 0.1;  // eta = step_size_base / sqrt(S * H)
  std::size_t batch_size = 1;
  std::optional<double> projection_radius = 1e3;
  std::uint64_t seed = 0;
  AggregationRule rule = FedAvgFull{};
  AvailabilityModel availability = ExplicitAvailability{};
  std::vector<double> importance;
  // Run Fedavot even when its Sinkhorn plan did not converge.
  bool allow_unconverged = false;
  // H = 1 only: skip gradient work for clients outside the active set. Their
  // batch streams still advance, so the trace is unchanged.
  bool skip_idle_clients = false;
  // Also evaluate F at the running average of aggregated models each round.
  bool track_average_model = true;

  double step_size() const {
    return step_size_base / std::sqrt(static_cast<double>(rounds * local_steps));
  }
};

struct RoundRecord {
  std::size_t round = 0;  // 1-based
  std::size_t event = 0;  // retained event index; kNoClient for FedAvgFull
  EventSet active;
  Vector aggregate;
  double global_loss = 0.0;
  double average_model_loss = std::numeric_limits<double>::quiet_NaN();
};

struct TrainingTrace {
  std::vector<RoundRecord> rounds;
  Vector final_average;  // (1/S) sum of aggregated models
  std::uint64_t seed = 0;
  std::string algorithm;
};

inline void validate(const FederationConfig& config) {
  if (config.local_steps < 1) throw ValidationError("local_steps (H) must be >= 1");
  if (config.rounds < 1) throw ValidationError("rounds (S) must be >= 1");
  if (!(config.step_size_base > 0.0)) throw ValidationError("step_size_base must be positive");
  if (config.batch_size < 1) throw ValidationError("batch_size must be >= 1");
  if (config.projection_radius && !(*config.projection_radius > 0.0)) {
    throw ValidationError("projection_radius must be positive");
  }
  if (config.skip_idle_clients && config.local_steps != 1) {
    throw ValidationError("skip_idle_clients is only equivalent for local_steps == 1");
  }
}

// Builds the transport problem for a configuration's importance and
// availability.
inline TransportProblem availability_problem(const FederationConfig& config) {
  ExpandedAvailability expanded = expand_availability(config.availability, config.n_clients);
  return build_problem(config.importance, std::move(expanded.q), std::move(expanded.events));
}

// Each round every client runs H projected SGD steps from the broadcast model;
// the server observes S^t ~ q, aggregates, and broadcasts. Client parameters
// start at zero. Client i draws mini-batches from stream kClientStreamBase + i
// of the seed; availability draws use kServerStream.
inline TrainingTrace run_training(const FederationConfig& config, const TaskSpec& task) {
  validate(config);
  if (task.n_clients() != config.n_clients || config.importance.size() != config.n_clients) {
    throw ValidationError("task has " + std::to_string(task.n_clients()) +
                          " clients, configuration expects " + std::to_string(config.n_clients));
  }
  const TransportProblem problem = availability_problem(config);
  const std::size_t n = config.n_clients;
  const bool full = std::holds_alternative<FedAvgFull>(config.rule);
  if (const auto* ot = std::get_if<Fedavot>(&config.rule)) {
    if (!(*ot->weights.mask() == *problem.mask())) {
      throw ValidationError("FedAVOT weights do not match the availability mask");
    }
    if (!ot->plan_converged && !config.allow_unconverged) {
      throw InfeasibleProblem(
          "Sinkhorn did not converge for this (p, q) pairing (row residual " +
          std::to_string(ot->row_residual_l1) + "); refusing to train");
    }
  }

  const auto dim = static_cast<Eigen::Index>(task.param_dim());
  std::vector<Vector> states(n, Vector::Zero(dim));
  std::vector<BatchSampler> batches;
  batches.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    batches.emplace_back(task.clients[i].size(), config.batch_size,
                         make_stream(config.seed, kClientStreamBase + i));
  }
  Rng server = make_stream(config.seed, kServerStream);
  const EventSampler sampler(problem.availability());
  EventSet everyone(n);
  std::iota(everyone.begin(), everyone.end(), std::size_t{0});

  const double step = config.step_size();
  TrainingTrace trace;
  trace.seed = config.seed;
  trace.algorithm = rule_name(config.rule);
  trace.rounds.reserve(config.rounds);
  Vector running_sum = Vector::Zero(dim);
  Vector gradient(dim);
  std::vector<bool> is_active(n, true);

  for (std::size_t round = 1; round <= config.rounds; ++round) {
    RoundRecord record;
    record.round = round;
    if (full) {
      record.event = kNoClient;
      record.active = everyone;
    } else {
      record.event = sampler.draw(server);
      record.active = problem.events()[record.event];
    }
    if (config.skip_idle_clients) {
      std::fill(is_active.begin(), is_active.end(), full);
      for (std::size_t i : record.active) is_active[i] = true;
    }

    for (std::size_t h = 0; h < config.local_steps; ++h) {
      for (std::size_t i = 0; i < n; ++i) {
        const auto batch = batches[i].next();
        if (!is_active[i]) continue;
        local_gradient(task, states[i], i, batch, gradient);
        states[i] = local_update(states[i], gradient, step, config.projection_radius, i);
      }
    }

    record.aggregate =
        aggregate(config.rule, states, record.active, record.event, config.importance);
    for (Vector& s : states) s = record.aggregate;
    running_sum += record.aggregate;
    record.global_loss = global_objective(record.aggregate, config.importance, task);
    if (config.track_average_model) {
      const Vector average = running_sum / static_cast<double>(round);
      record.average_model_loss = global_objective(average, config.importance, task);
    }
    trace.rounds.push_back(std::move(record));
  }
  trace.final_average = running_sum / static_cast<double>(config.rounds);
  return trace;
}

}  // namespace fedavot
