#pragma once

// Feasibility of a masked transport problem. A plan exists iff for every
// client subset I
//
//   sum_{j : A_j subset of I} q_j  <=  sum_{i in I} p_i  <=  sum_{j : A_j meets I} q_j.
//
// Decided by max-flow on s -> clients -> events -> t, and independently by
// enumerating all subsets for small N.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <optional>
#include <queue>
#include <string>
#include <vector>

#include "fedavot/errors.hpp"
#include "fedavot/mot.hpp"

namespace fedavot {

// Threshold on flow value / Hall margin separating feasible from infeasible.
inline constexpr double kFeasibilityTolerance = 1e-9;

// Largest client count accepted by the subset-enumeration checker.
inline constexpr std::size_t kHallMaxClients = 20;

struct FlowArc {
  std::size_t from;
  std::size_t to;
  double capacity;
};

// Node layout: 0 = source, 1..N = clients, N+1..N+M = events, N+M+1 = sink.
// Arc order: N source arcs, then |E| client->event arcs column by column, then
// M sink arcs. Client->event arcs carry the total mass 1 as their capacity.
class FlowNetwork {
 public:
  FlowNetwork(std::size_t n_clients, std::size_t n_events, std::vector<FlowArc> arcs)
      : n_clients_(n_clients), n_events_(n_events), arcs_(std::move(arcs)) {}

  std::size_t n_clients() const noexcept { return n_clients_; }
  std::size_t n_events() const noexcept { return n_events_; }
  std::size_t n_nodes() const noexcept { return n_clients_ + n_events_ + 2; }
  std::size_t source() const noexcept { return 0; }
  std::size_t sink() const noexcept { return n_clients_ + n_events_ + 1; }
  std::size_t client_node(std::size_t i) const noexcept { return 1 + i; }
  std::size_t event_node(std::size_t j) const noexcept { return 1 + n_clients_ + j; }

  const std::vector<FlowArc>& arcs() const noexcept { return arcs_; }

  FlowNetwork scaled(double factor) const {
    std::vector<FlowArc> arcs = arcs_;
    for (FlowArc& a : arcs) a.capacity *= factor;
    return FlowNetwork(n_clients_, n_events_, std::move(arcs));
  }

 private:
  std::size_t n_clients_;
  std::size_t n_events_;
  std::vector<FlowArc> arcs_;
};

inline FlowNetwork build_flow_network(const TransportProblem& problem) {
  const std::size_t n = problem.n_clients();
  const std::size_t m = problem.n_events();
  const Mask& mask = *problem.mask();
  std::vector<FlowArc> arcs;
  arcs.reserve(n + mask.nnz() + m);
  for (std::size_t i = 0; i < n; ++i) arcs.push_back({0, 1 + i, problem.importance()[i]});
  for (std::size_t j = 0; j < m; ++j) {
    for (std::size_t i : mask.column_rows(j)) arcs.push_back({1 + i, 1 + n + j, 1.0});
  }
  for (std::size_t j = 0; j < m; ++j) arcs.push_back({1 + n + j, n + m + 1, problem.availability()[j]});
  return FlowNetwork(n, m, std::move(arcs));
}

struct MaxFlowSolution {
  double value = 0.0;
  // Nodes reachable from the source in the final residual graph.
  std::vector<bool> source_side;
};

namespace detail {

// Dinic's algorithm on double capacities. Residual capacities at or below
// kResidualEpsilon count as saturated.
class Dinic {
 public:
  static constexpr double kResidualEpsilon = 1e-15;

  explicit Dinic(const FlowNetwork& network) : adjacency_(network.n_nodes()) {
    for (const FlowArc& a : network.arcs()) {
      adjacency_[a.from].push_back(edges_.size());
      edges_.push_back({a.to, a.capacity});
      adjacency_[a.to].push_back(edges_.size());
      edges_.push_back({a.from, 0.0});
    }
  }

  MaxFlowSolution run(std::size_t source, std::size_t sink) {
    MaxFlowSolution out;
    while (build_levels(source, sink)) {
      cursor_.assign(adjacency_.size(), 0);
      while (true) {
        const double pushed = augment(source, sink, std::numeric_limits<double>::infinity());
        if (pushed <= kResidualEpsilon) break;
        out.value += pushed;
      }
    }
    out.source_side.assign(adjacency_.size(), false);
    for (std::size_t v = 0; v < adjacency_.size(); ++v) out.source_side[v] = level_[v] >= 0;
    return out;
  }

 private:
  struct Edge {
    std::size_t to;
    double residual;
  };

  bool build_levels(std::size_t source, std::size_t sink) {
    level_.assign(adjacency_.size(), -1);
    std::queue<std::size_t> frontier;
    level_[source] = 0;
    frontier.push(source);
    while (!frontier.empty()) {
      const std::size_t v = frontier.front();
      frontier.pop();
      for (std::size_t e : adjacency_[v]) {
        const Edge& edge = edges_[e];
        if (edge.residual > kResidualEpsilon && level_[edge.to] < 0) {
          level_[edge.to] = level_[v] + 1;
          frontier.push(edge.to);
        }
      }
    }
    return level_[sink] >= 0;
  }

  double augment(std::size_t v, std::size_t sink, double limit) {
    if (v == sink) return limit;
    for (std::size_t& c = cursor_[v]; c < adjacency_[v].size(); ++c) {
      const std::size_t e = adjacency_[v][c];
      Edge& edge = edges_[e];
      if (edge.residual <= kResidualEpsilon || level_[edge.to] != level_[v] + 1) continue;
      const double pushed = augment(edge.to, sink, std::min(limit, edge.residual));
      if (pushed > kResidualEpsilon) {
        edge.residual -= pushed;
        edges_[e ^ 1].residual += pushed;
        return pushed;
      }
    }
    return 0.0;
  }

  std::vector<std::vector<std::size_t>> adjacency_;
  std::vector<Edge> edges_;
  std::vector<int> level_;
  std::vector<std::size_t> cursor_;
};

}  // namespace detail

inline MaxFlowSolution solve_max_flow(const FlowNetwork& network) {
  return detail::Dinic(network).run(network.source(), network.sink());
}

inline double max_flow(const FlowNetwork& network) { return solve_max_flow(network).value; }

enum class HallSide {
  kLower,  // sum over events inside I exceeds p(I)
  kUpper,  // p(I) exceeds the mass of events touching I
};

struct HallViolation {
  std::vector<std::size_t> clients;
  HallSide side;
  double margin;  // amount by which the inequality fails
};

struct FeasibilityVerdict {
  bool feasible = false;
  double max_flow_value = 0.0;
  std::optional<HallViolation> violation;
};

// Both sides of the subset inequality for I.
struct HallTerms {
  double inside = 0.0;      // q over events contained in I
  double importance = 0.0;  // p over I
  double touching = 0.0;    // q over events meeting I
};

inline HallTerms hall_terms(const TransportProblem& problem, std::span<const std::size_t> clients) {
  std::vector<bool> in_set(problem.n_clients(), false);
  for (std::size_t i : clients) in_set.at(i) = true;
  HallTerms terms;
  for (std::size_t i : clients) terms.importance += problem.importance()[i];
  for (std::size_t j = 0; j < problem.n_events(); ++j) {
    bool any = false;
    bool all = true;
    for (std::size_t i : problem.events()[j]) {
      any = any || in_set[i];
      all = all && in_set[i];
    }
    if (any) terms.touching += problem.availability()[j];
    if (all) terms.inside += problem.availability()[j];
  }
  return terms;
}

// Margin by which `violation` fails, recomputed from the problem.
inline double violation_margin(const TransportProblem& problem, const HallViolation& violation) {
  const HallTerms t = hall_terms(problem, violation.clients);
  return violation.side == HallSide::kLower ? t.inside - t.importance : t.importance - t.touching;
}

// The lower inequality for I is the upper inequality for the complement of I;
// this rewrites any violation in upper form.
inline HallViolation as_upper_violation(const HallViolation& violation, std::size_t n_clients) {
  if (violation.side == HallSide::kUpper) return violation;
  std::vector<bool> in_set(n_clients, false);
  for (std::size_t i : violation.clients) in_set[i] = true;
  HallViolation out{{}, HallSide::kUpper, violation.margin};
  for (std::size_t i = 0; i < n_clients; ++i) {
    if (!in_set[i]) out.clients.push_back(i);
  }
  return out;
}

// Max-flow verdict. When infeasible, the witness is the set of clients on the
// source side of the minimum cut; it violates the upper inequality.
inline FeasibilityVerdict check_feasible_maxflow(const TransportProblem& problem) {
  const FlowNetwork network = build_flow_network(problem);
  const MaxFlowSolution flow = solve_max_flow(network);
  FeasibilityVerdict verdict;
  verdict.max_flow_value = std::min(flow.value, 1.0);
  verdict.feasible = flow.value >= 1.0 - kFeasibilityTolerance;
  if (!verdict.feasible) {
    HallViolation witness{{}, HallSide::kUpper, 0.0};
    for (std::size_t i = 0; i < problem.n_clients(); ++i) {
      if (flow.source_side[network.client_node(i)]) witness.clients.push_back(i);
    }
    witness.margin = violation_margin(problem, witness);
    verdict.violation = std::move(witness);
  }
  return verdict;
}

// Subset enumeration over all 2^N client sets in increasing bitmask order
// (client i is bit i); for each set the lower inequality is tested before the
// upper one, and the first failure is reported. max_flow_value is recovered by
// min-cut duality as 1 - max_I (p(I) - q(N(I)))^+.
inline FeasibilityVerdict check_feasible_hall(const TransportProblem& problem) {
  const std::size_t n = problem.n_clients();
  if (n > kHallMaxClients) {
    throw ValidationError("subset enumeration supports at most " +
                          std::to_string(kHallMaxClients) + " clients (got " +
                          std::to_string(n) + "); use the max-flow checker");
  }
  const std::size_t m = problem.n_events();
  std::vector<std::uint32_t> event_bits(m, 0);
  for (std::size_t j = 0; j < m; ++j) {
    for (std::size_t i : problem.events()[j]) event_bits[j] |= (std::uint32_t{1} << i);
  }
  const auto& p = problem.importance();
  const auto& q = problem.availability();

  FeasibilityVerdict verdict;
  double worst_upper = 0.0;
  const std::uint32_t n_subsets = std::uint32_t{1} << n;
  for (std::uint32_t set = 0; set < n_subsets; ++set) {
    double importance = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      if (set & (std::uint32_t{1} << i)) importance += p[i];
    }
    double inside = 0.0;
    double touching = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
      if (event_bits[j] & set) touching += q[j];
      if ((event_bits[j] & ~set) == 0) inside += q[j];
    }
    worst_upper = std::max(worst_upper, importance - touching);
    if (verdict.violation) continue;
    std::optional<HallViolation> found;
    if (inside - importance > kFeasibilityTolerance) {
      found = HallViolation{{}, HallSide::kLower, inside - importance};
    } else if (importance - touching > kFeasibilityTolerance) {
      found = HallViolation{{}, HallSide::kUpper, importance - touching};
    }
    if (found) {
      for (std::size_t i = 0; i < n; ++i) {
        if (set & (std::uint32_t{1} << i)) found->clients.push_back(i);
      }
      verdict.violation = std::move(found);
    }
  }
  verdict.feasible = !verdict.violation.has_value();
  verdict.max_flow_value = 1.0 - worst_upper;
  return verdict;
}

}  // namespace fedavot
