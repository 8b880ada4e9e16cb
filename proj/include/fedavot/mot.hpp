#pragma once

// Masked optimal transport: problem instances, plans supported on the mask,
// and the Sinkhorn (iterative proportional fitting) solver.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fedavot/errors.hpp"

namespace fedavot {

using EventSet = std::vector<std::size_t>;

// Marginals must sum to one within this tolerance.
inline constexpr double kSimplexTolerance = 1e-9;

// Column-compressed support E = {(i, j) : i in A_j}. Rows within a column are
// sorted ascending.
class Mask {
 public:
  Mask(std::size_t n_rows, std::span<const EventSet> events) : n_rows_(n_rows) {
    col_offsets_.reserve(events.size() + 1);
    col_offsets_.push_back(0);
    row_degree_.assign(n_rows, 0);
    for (const EventSet& members : events) {
      for (std::size_t i : members) {
        rows_.push_back(i);
        ++row_degree_[i];
      }
      col_offsets_.push_back(rows_.size());
    }
  }

  std::size_t n_rows() const noexcept { return n_rows_; }
  std::size_t n_cols() const noexcept { return col_offsets_.size() - 1; }
  std::size_t nnz() const noexcept { return rows_.size(); }

  std::size_t col_begin(std::size_t j) const { return col_offsets_[j]; }
  std::size_t col_end(std::size_t j) const { return col_offsets_[j + 1]; }
  std::size_t col_size(std::size_t j) const { return col_end(j) - col_begin(j); }
  std::size_t row(std::size_t k) const { return rows_[k]; }

  std::span<const std::size_t> column_rows(std::size_t j) const {
    return std::span<const std::size_t>(rows_).subspan(col_begin(j), col_size(j));
  }

  // Number of events that contain client i.
  std::size_t row_degree(std::size_t i) const { return row_degree_[i]; }

  // Storage slot of (i, j), or nullopt when the coordinate is off the mask.
  std::optional<std::size_t> find(std::size_t i, std::size_t j) const {
    if (j >= n_cols()) return std::nullopt;
    for (std::size_t k = col_begin(j); k < col_end(j); ++k) {
      if (rows_[k] == i) return k;
      if (rows_[k] > i) break;
    }
    return std::nullopt;
  }

  bool operator==(const Mask& other) const {
    return n_rows_ == other.n_rows_ && col_offsets_ == other.col_offsets_ &&
           rows_ == other.rows_;
  }

 private:
  std::size_t n_rows_;
  std::vector<std::size_t> col_offsets_;
  std::vector<std::size_t> rows_;
  std::vector<std::size_t> row_degree_;
};

using MaskPtr = std::shared_ptr<const Mask>;

// Validated (MOT) instance. Events with zero availability are removed at
// construction; their original indices are kept in dropped_events().
class TransportProblem {
 public:
  std::size_t n_clients() const noexcept { return importance_.size(); }
  std::size_t n_events() const noexcept { return availability_.size(); }

  const std::vector<double>& importance() const noexcept { return importance_; }
  const std::vector<double>& availability() const noexcept { return availability_; }
  const std::vector<EventSet>& events() const noexcept { return events_; }
  const MaskPtr& mask() const noexcept { return mask_; }

  // Original index (as passed to build_problem) of retained event j.
  std::size_t original_event_index(std::size_t j) const { return event_origin_[j]; }
  const std::vector<std::size_t>& dropped_events() const noexcept { return dropped_; }

 private:
  friend TransportProblem build_problem(std::vector<double>, std::vector<double>,
                                        std::vector<EventSet>);
  TransportProblem() = default;

  std::vector<double> importance_;
  std::vector<double> availability_;
  std::vector<EventSet> events_;
  std::vector<std::size_t> event_origin_;
  std::vector<std::size_t> dropped_;
  MaskPtr mask_;
};

namespace detail {

inline void check_simplex(std::span<const double> v, const char* name) {
  if (v.empty()) throw ValidationError(std::string(name) + " is empty");
  double sum = 0.0;
  for (std::size_t k = 0; k < v.size(); ++k) {
    if (!std::isfinite(v[k])) {
      throw ValidationError(std::string(name) + "[" + std::to_string(k) +
                            "] is not finite");
    }
    if (v[k] < 0.0) {
      throw ValidationError(std::string(name) + "[" + std::to_string(k) +
                            "] is negative (" + std::to_string(v[k]) + ")");
    }
    sum += v[k];
  }
  if (std::abs(sum - 1.0) > kSimplexTolerance) {
    throw ValidationError(std::string(name) + " sums to " + std::to_string(sum) +
                          ", expected 1");
  }
}

inline void check_events(std::span<const EventSet> events, std::size_t n_clients) {
  for (std::size_t j = 0; j < events.size(); ++j) {
    if (events[j].empty()) {
      throw ValidationError("event " + std::to_string(j) + " is empty");
    }
    for (std::size_t k = 0; k < events[j].size(); ++k) {
      const std::size_t i = events[j][k];
      if (i >= n_clients) {
        throw ValidationError("event " + std::to_string(j) + " references client " +
                              std::to_string(i) + " outside [0, " +
                              std::to_string(n_clients) + ")");
      }
      if (k > 0 && events[j][k - 1] >= i) {
        throw ValidationError("event " + std::to_string(j) +
                              " must list distinct clients in increasing order");
      }
    }
  }
}

}  // namespace detail

// Validates marginals and events and builds the mask. Event member lists are
// sorted; duplicates are rejected.
inline TransportProblem build_problem(std::vector<double> importance,
                                      std::vector<double> availability,
                                      std::vector<EventSet> events) {
  detail::check_simplex(importance, "importance p");
  detail::check_simplex(availability, "availability q");
  if (events.size() != availability.size()) {
    throw ValidationError("availability q has " + std::to_string(availability.size()) +
                          " entries but there are " + std::to_string(events.size()) +
                          " events");
  }
  for (EventSet& members : events) std::sort(members.begin(), members.end());
  detail::check_events(events, importance.size());

  TransportProblem problem;
  problem.importance_ = std::move(importance);
  for (std::size_t j = 0; j < events.size(); ++j) {
    if (availability[j] == 0.0) {
      problem.dropped_.push_back(j);
      continue;
    }
    problem.availability_.push_back(availability[j]);
    problem.events_.push_back(std::move(events[j]));
    problem.event_origin_.push_back(j);
  }
  problem.mask_ = std::make_shared<const Mask>(problem.n_clients(), problem.events_);
  return problem;
}

// N x M nonnegative matrix stored only on mask coordinates.
class MaskedMatrix {
 public:
  explicit MaskedMatrix(MaskPtr mask)
      : mask_(std::move(mask)), values_(mask_->nnz(), 0.0) {}

  MaskedMatrix(MaskPtr mask, std::vector<double> values)
      : mask_(std::move(mask)), values_(std::move(values)) {
    if (values_.size() != mask_->nnz()) {
      throw ValidationError("expected " + std::to_string(mask_->nnz()) +
                            " mask values, got " + std::to_string(values_.size()));
    }
    for (double v : values_) {
      if (!(v >= 0.0) || !std::isfinite(v)) {
        throw ValidationError("masked matrix entries must be finite and nonnegative");
      }
    }
  }

  const MaskPtr& mask() const noexcept { return mask_; }
  std::size_t n_rows() const noexcept { return mask_->n_rows(); }
  std::size_t n_cols() const noexcept { return mask_->n_cols(); }
  std::span<const double> values() const noexcept { return values_; }

  // Entry (i, j); zero off the mask.
  double at(std::size_t i, std::size_t j) const {
    const auto slot = mask_->find(i, j);
    return slot ? values_[*slot] : 0.0;
  }

  std::vector<double> row_sums() const {
    std::vector<double> sums(n_rows(), 0.0);
    for (std::size_t k = 0; k < values_.size(); ++k) sums[mask_->row(k)] += values_[k];
    return sums;
  }

  std::vector<double> col_sums() const {
    std::vector<double> sums(n_cols(), 0.0);
    for (std::size_t j = 0; j < n_cols(); ++j) {
      for (std::size_t k = mask_->col_begin(j); k < mask_->col_end(j); ++k) {
        sums[j] += values_[k];
      }
    }
    return sums;
  }

 protected:
  std::vector<double>& mutable_values() noexcept { return values_; }

 private:
  MaskPtr mask_;
  std::vector<double> values_;
};

// Joint allocation T of event mass q_j to clients.
class TransportPlan : public MaskedMatrix {
 public:
  using MaskedMatrix::MaskedMatrix;

  friend class SinkhornScaler;
};

// Column-normalized plan Y = T Diag(q)^{-1}; column j holds the aggregation
// weights used when event j is observed.
class WeightMatrix : public MaskedMatrix {
 public:
  using MaskedMatrix::MaskedMatrix;

  WeightMatrix(MaskPtr mask, std::vector<double> values,
               std::vector<std::size_t> zero_columns)
      : MaskedMatrix(std::move(mask), std::move(values)),
        zero_columns_(std::move(zero_columns)) {}

  // Columns emitted as all-zero because their q_j was zero.
  const std::vector<std::size_t>& zero_columns() const noexcept { return zero_columns_; }

  std::span<const double> column(std::size_t j) const {
    return values().subspan(mask()->col_begin(j), mask()->col_size(j));
  }

 private:
  std::vector<std::size_t> zero_columns_;
};

// T^(0)[i, j] = q_j / |A_j| for i in A_j. Column sums equal q.
inline TransportPlan init_plan(const TransportProblem& problem) {
  const Mask& mask = *problem.mask();
  std::vector<double> values(mask.nnz());
  for (std::size_t j = 0; j < mask.n_cols(); ++j) {
    const double share =
        problem.availability()[j] / static_cast<double>(mask.col_size(j));
    for (std::size_t k = mask.col_begin(j); k < mask.col_end(j); ++k) values[k] = share;
  }
  return TransportPlan(problem.mask(), std::move(values));
}

struct Residuals {
  double row_l1 = 0.0;
  double col_l1 = 0.0;
};

// ||T 1 - p||_1 and ||1^T T - q^T||_1.
inline Residuals marginal_residuals(const MaskedMatrix& plan,
                                    const TransportProblem& problem) {
  if (plan.n_rows() != problem.n_clients() || plan.n_cols() != problem.n_events()) {
    throw ValidationError("plan shape does not match the problem");
  }
  Residuals res;
  const auto rows = plan.row_sums();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    res.row_l1 += std::abs(rows[i] - problem.importance()[i]);
  }
  const auto cols = plan.col_sums();
  for (std::size_t j = 0; j < cols.size(); ++j) {
    res.col_l1 += std::abs(cols[j] - problem.availability()[j]);
  }
  return res;
}

// One row-then-column scaling pass over a plan on the problem's mask.
class SinkhornScaler {
 public:
  // When tolerate_empty_rows is set, clients that appear in no event are left
  // alone instead of raising; they stay at zero mass.
  SinkhornScaler(const TransportProblem& problem, bool tolerate_empty_rows)
      : problem_(problem),
        tolerate_empty_rows_(tolerate_empty_rows),
        row_sums_(problem.n_clients()),
        row_scale_(problem.n_clients()) {}

  void step(TransportPlan& plan) {
    const Mask& mask = *problem_.mask();
    if (!(mask == *plan.mask())) {
      throw ValidationError("plan mask does not match the problem mask");
    }
    auto& values = plan.mutable_values();
    const auto& p = problem_.importance();
    const auto& q = problem_.availability();

    std::fill(row_sums_.begin(), row_sums_.end(), 0.0);
    for (std::size_t k = 0; k < values.size(); ++k) row_sums_[mask.row(k)] += values[k];
    for (std::size_t i = 0; i < row_sums_.size(); ++i) {
      if (row_sums_[i] > 0.0) {
        row_scale_[i] = p[i] / row_sums_[i];
      } else if (p[i] == 0.0 || (tolerate_empty_rows_ && mask.row_degree(i) == 0)) {
        row_scale_[i] = 0.0;
      } else {
        throw StructuralInfeasibility(
            StructuralInfeasibility::Side::kClient, i,
            "client " + std::to_string(i) + " has importance " + std::to_string(p[i]) +
                " but receives zero mass from its events");
      }
    }
    for (std::size_t k = 0; k < values.size(); ++k) values[k] *= row_scale_[mask.row(k)];

    for (std::size_t j = 0; j < mask.n_cols(); ++j) {
      double col = 0.0;
      for (std::size_t k = mask.col_begin(j); k < mask.col_end(j); ++k) col += values[k];
      if (!(col > 0.0)) {
        throw StructuralInfeasibility(
            StructuralInfeasibility::Side::kEvent, j,
            "event " + std::to_string(j) + " has availability " + std::to_string(q[j]) +
                " but all of its clients have zero importance");
      }
      const double scale = q[j] / col;
      for (std::size_t k = mask.col_begin(j); k < mask.col_end(j); ++k) values[k] *= scale;
    }
  }

 private:
  const TransportProblem& problem_;
  bool tolerate_empty_rows_;
  std::vector<double> row_sums_;
  std::vector<double> row_scale_;
};

// r <- p / (T 1), T <- Diag(r) T, then c <- q / (1^T T), T <- T Diag(c).
// Throws StructuralInfeasibility when a client with p_i > 0 has zero row mass.
inline TransportPlan sinkhorn_step(TransportPlan plan, const TransportProblem& problem) {
  SinkhornScaler(problem, /*tolerate_empty_rows=*/false).step(plan);
  return plan;
}

// Y[i, j] = T[i, j] / q_j. Columns with q_j == 0 come out as zero and are
// listed in zero_columns().
inline WeightMatrix normalize_weights(const MaskedMatrix& plan, std::span<const double> q) {
  const Mask& mask = *plan.mask();
  if (q.size() != mask.n_cols()) {
    throw ValidationError("q has " + std::to_string(q.size()) + " entries, plan has " +
                          std::to_string(mask.n_cols()) + " columns");
  }
  std::vector<double> values(plan.values().begin(), plan.values().end());
  std::vector<std::size_t> zero_columns;
  for (std::size_t j = 0; j < mask.n_cols(); ++j) {
    if (q[j] > 0.0) {
      for (std::size_t k = mask.col_begin(j); k < mask.col_end(j); ++k) values[k] /= q[j];
    } else {
      zero_columns.push_back(j);
      for (std::size_t k = mask.col_begin(j); k < mask.col_end(j); ++k) values[k] = 0.0;
    }
  }
  return WeightMatrix(plan.mask(), std::move(values), std::move(zero_columns));
}

// T = Y Diag(q).
inline TransportPlan plan_from_weights(const WeightMatrix& weights, std::span<const double> q) {
  const Mask& mask = *weights.mask();
  std::vector<double> values(weights.values().begin(), weights.values().end());
  for (std::size_t j = 0; j < mask.n_cols(); ++j) {
    for (std::size_t k = mask.col_begin(j); k < mask.col_end(j); ++k) values[k] *= q[j];
  }
  return TransportPlan(weights.mask(), std::move(values));
}

// FedAvg weighting Y[i, j] = 1 / |A_j|.
inline WeightMatrix uniform_weights(const MaskPtr& mask) {
  std::vector<double> values(mask->nnz());
  for (std::size_t j = 0; j < mask->n_cols(); ++j) {
    const double w = 1.0 / static_cast<double>(mask->col_size(j));
    for (std::size_t k = mask->col_begin(j); k < mask->col_end(j); ++k) values[k] = w;
  }
  return WeightMatrix(mask, std::move(values));
}

// Importance implied by plain FedAvg under availability q:
// p~_i = sum_{A_j containing i} q_j / |A_j|.
inline std::vector<double> implied_importance(std::span<const double> q,
                                              std::span<const EventSet> events,
                                              std::size_t n_clients) {
  if (q.size() != events.size()) {
    throw ValidationError("q and events differ in length");
  }
  detail::check_events(events, n_clients);
  std::vector<double> implied(n_clients, 0.0);
  for (std::size_t j = 0; j < events.size(); ++j) {
    const double share = q[j] / static_cast<double>(events[j].size());
    for (std::size_t i : events[j]) implied[i] += share;
  }
  return implied;
}

inline std::vector<double> implied_importance(const TransportProblem& problem) {
  return implied_importance(problem.availability(), problem.events(), problem.n_clients());
}

struct SinkhornOptions {
  double epsilon = 1e-8;
  std::size_t max_iterations = 100000;
};

struct SinkhornResult {
  TransportPlan plan;
  WeightMatrix weights;
  std::size_t iterations = 0;
  double row_residual_l1 = 0.0;
  double col_residual_l1 = 0.0;
  bool converged = false;
  // Clients that appear in no event; they keep zero mass.
  std::vector<std::size_t> unreachable_clients;
};

// Alternates sinkhorn_step from init_plan until both L1 residuals are within
// epsilon or max_iterations passes have run. On infeasible instances the
// column marginal stays exact and the row residual settles at a positive
// value; converged is then false.
inline SinkhornResult solve_sinkhorn(const TransportProblem& problem,
                                     SinkhornOptions options = {}) {
  if (options.max_iterations == 0) {
    throw ValidationError("max_iterations must be positive");
  }
  if (!(options.epsilon > 0.0)) {
    throw ValidationError("epsilon must be positive");
  }
  std::vector<std::size_t> unreachable;
  for (std::size_t i = 0; i < problem.n_clients(); ++i) {
    if (problem.mask()->row_degree(i) == 0 && problem.importance()[i] > 0.0) {
      unreachable.push_back(i);
    }
  }

  TransportPlan plan = init_plan(problem);
  SinkhornScaler scaler(problem, /*tolerate_empty_rows=*/true);
  Residuals res;
  std::size_t iter = 0;
  bool converged = false;
  while (iter < options.max_iterations) {
    scaler.step(plan);
    ++iter;
    res = marginal_residuals(plan, problem);
    if (res.row_l1 <= options.epsilon && res.col_l1 <= options.epsilon) {
      converged = true;
      break;
    }
  }
  WeightMatrix weights = normalize_weights(plan, problem.availability());
  return SinkhornResult{std::move(plan), std::move(weights), iter, res.row_l1,
                        res.col_l1,      converged,          std::move(unreachable)};
}

}  // namespace fedavot
