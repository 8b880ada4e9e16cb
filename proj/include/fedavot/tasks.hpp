#pragma once

// Heterogeneous federated tasks: linear regression with client-specific
// feature distributions and label-skewed multinomial logistic regression.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "fedavot/errors.hpp"
#include "fedavot/rng.hpp"

namespace fedavot {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

enum class TaskKind { kLinearRegression, kMulticlassLogistic };

inline const char* to_string(TaskKind kind) {
  return kind == TaskKind::kLinearRegression ? "linear_regression" : "multiclass_logistic";
}

struct ClientData {
  Matrix features;          // n_i x d
  Vector targets;           // regression labels (size n_i), empty otherwise
  std::vector<int> labels;  // class indices in [0, L), empty for regression

  std::size_t size() const { return static_cast<std::size_t>(features.rows()); }
};

struct TaskSpec {
  TaskKind kind = TaskKind::kLinearRegression;
  std::size_t dim = 0;
  std::size_t n_classes = 0;  // 0 for regression
  std::vector<ClientData> clients;
  std::vector<double> importance;
  // Regression only: the map used to generate labels.
  Vector ground_truth;

  std::size_t n_clients() const { return clients.size(); }

  // Regression: theta in R^d. Logistic: L rows of (weights, bias), row-major.
  std::size_t param_dim() const {
    return kind == TaskKind::kLinearRegression ? dim : n_classes * (dim + 1);
  }
};

namespace detail {

inline Eigen::Map<const RowMatrix> class_weights(const Vector& theta, std::size_t n_classes,
                                                 std::size_t dim) {
  return Eigen::Map<const RowMatrix>(theta.data(), static_cast<Eigen::Index>(n_classes),
                                     static_cast<Eigen::Index>(dim + 1));
}

inline double log_sum_exp(const Vector& scores) {
  const double top = scores.maxCoeff();
  return top + std::log((scores.array() - top).exp().sum());
}

}  // namespace detail

// f_i(theta) over the full local dataset. Squared loss uses 1/2 (x.theta - y)^2;
// the logistic loss is cross-entropy over softmax(W x + b).
inline double local_loss(const TaskSpec& task, const Vector& theta, std::size_t client) {
  const ClientData& data = task.clients.at(client);
  const double n = static_cast<double>(data.size());
  if (task.kind == TaskKind::kLinearRegression) {
    const Vector residual = data.features * theta - data.targets;
    return 0.5 * residual.squaredNorm() / n;
  }
  const auto w = detail::class_weights(theta, task.n_classes, task.dim);
  const auto d = static_cast<Eigen::Index>(task.dim);
  Matrix scores = data.features * w.leftCols(d).transpose();
  scores.rowwise() += w.col(d).transpose();
  double total = 0.0;
  for (Eigen::Index r = 0; r < scores.rows(); ++r) {
    const Vector row = scores.row(r).transpose();
    total += detail::log_sum_exp(row) - row(data.labels[static_cast<std::size_t>(r)]);
  }
  return total / n;
}

// Mean gradient of the per-sample loss over `batch` (indices into client data).
inline void local_gradient(const TaskSpec& task, const Vector& theta, std::size_t client,
                           std::span<const std::size_t> batch, Vector& out) {
  const ClientData& data = task.clients.at(client);
  out.setZero(static_cast<Eigen::Index>(task.param_dim()));
  if (batch.empty()) return;
  const double scale = 1.0 / static_cast<double>(batch.size());
  if (task.kind == TaskKind::kLinearRegression) {
    for (std::size_t s : batch) {
      const auto x = data.features.row(static_cast<Eigen::Index>(s));
      const double residual = x.dot(theta) - data.targets(static_cast<Eigen::Index>(s));
      out.noalias() += (scale * residual) * x.transpose();
    }
    return;
  }
  const auto d = static_cast<Eigen::Index>(task.dim);
  const auto w = detail::class_weights(theta, task.n_classes, task.dim);
  Eigen::Map<RowMatrix> grad(out.data(), static_cast<Eigen::Index>(task.n_classes), d + 1);
  Vector scores(static_cast<Eigen::Index>(task.n_classes));
  for (std::size_t s : batch) {
    const auto x = data.features.row(static_cast<Eigen::Index>(s));
    scores.noalias() = w.leftCols(d) * x.transpose();
    scores += w.col(d);
    const double top = scores.maxCoeff();
    Vector prob = (scores.array() - top).exp();
    prob /= prob.sum();
    prob(data.labels[s]) -= 1.0;
    grad.leftCols(d).noalias() += scale * prob * x;
    grad.col(d) += scale * prob;
  }
}

inline Vector local_full_gradient(const TaskSpec& task, const Vector& theta, std::size_t client) {
  std::vector<std::size_t> all(task.clients.at(client).size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  Vector out;
  local_gradient(task, theta, client, all, out);
  return out;
}

// F(theta) = sum_i p_i f_i(theta).
inline double global_objective(const Vector& theta, std::span<const double> importance,
                               const TaskSpec& task) {
  if (importance.size() != task.n_clients()) {
    throw ValidationError("importance has " + std::to_string(importance.size()) +
                          " entries for " + std::to_string(task.n_clients()) + " clients");
  }
  if (static_cast<std::size_t>(theta.size()) != task.param_dim()) {
    throw ValidationError("parameter dimension " + std::to_string(theta.size()) +
                          " does not match task dimension " + std::to_string(task.param_dim()));
  }
  double total = 0.0;
  for (std::size_t i = 0; i < task.n_clients(); ++i) {
    if (importance[i] != 0.0) total += importance[i] * local_loss(task, theta, i);
  }
  return total;
}

inline std::vector<double> uniform_distribution(std::size_t n) {
  return std::vector<double>(n, 1.0 / static_cast<double>(n));
}

inline std::vector<double> normalized(std::vector<double> weights) {
  const double total = std::accumulate(weights.begin(), weights.end(), 0.0);
  for (double& w : weights) w /= total;
  return weights;
}

struct RegressionOptions {
  std::size_t n_clients = 100;
  std::size_t samples_per_client = 50;
  std::size_t dim = 10;
  double label_noise = 0.1;
  // When false every client draws features from N(0, 1).
  bool heterogeneous = true;
};

// Client i draws features from N(mu_i, sigma_i^2 I) with mu_i = 2i/N - 1 and
// sigma_i = 0.5 + i/N; labels are x.theta* + noise for one shared theta*.
inline TaskSpec gen_linear_regression(const RegressionOptions& opts, Rng& rng) {
  if (opts.n_clients == 0 || opts.samples_per_client == 0 || opts.dim == 0) {
    throw ValidationError("regression task needs N, samples per client and d >= 1");
  }
  TaskSpec task;
  task.kind = TaskKind::kLinearRegression;
  task.dim = opts.dim;
  const auto d = static_cast<Eigen::Index>(opts.dim);
  const auto n = static_cast<Eigen::Index>(opts.samples_per_client);
  task.ground_truth.resize(d);
  for (Eigen::Index k = 0; k < d; ++k) task.ground_truth(k) = rng.normal();

  const double n_clients = static_cast<double>(opts.n_clients);
  for (std::size_t i = 0; i < opts.n_clients; ++i) {
    const double mean = opts.heterogeneous ? 2.0 * static_cast<double>(i) / n_clients - 1.0 : 0.0;
    const double stddev = opts.heterogeneous ? 0.5 + static_cast<double>(i) / n_clients : 1.0;
    ClientData data;
    data.features.resize(n, d);
    data.targets.resize(n);
    for (Eigen::Index r = 0; r < n; ++r) {
      for (Eigen::Index k = 0; k < d; ++k) data.features(r, k) = rng.normal(mean, stddev);
      data.targets(r) =
          data.features.row(r).dot(task.ground_truth) + opts.label_noise * rng.normal();
    }
    task.clients.push_back(std::move(data));
  }
  task.importance = uniform_distribution(opts.n_clients);
  return task;
}

// Minimizer of sum_i p_i f_i for the regression task (weighted normal equations).
inline Vector weighted_least_squares(const TaskSpec& task, std::span<const double> importance) {
  const auto d = static_cast<Eigen::Index>(task.dim);
  Matrix gram = Matrix::Zero(d, d);
  Vector moment = Vector::Zero(d);
  for (std::size_t i = 0; i < task.n_clients(); ++i) {
    const ClientData& data = task.clients[i];
    const double w = importance[i] / static_cast<double>(data.size());
    gram.noalias() += w * data.features.transpose() * data.features;
    moment.noalias() += w * data.features.transpose() * data.targets;
  }
  return gram.ldlt().solve(moment);
}

struct SyntheticBlobs {
  std::size_t n_classes = 10;
  std::size_t dim = 20;
  std::size_t samples_per_class = 25;  // per client, per held class
  double center_scale = 1.0;           // class centers ~ N(0, center_scale^2 I)
  double spread = 1.0;                 // within-class standard deviation
};

// Labeled samples (e.g. MNIST) to be partitioned across clients.
struct LabeledPool {
  Matrix features;
  std::vector<int> labels;
  std::size_t n_classes = 10;
  std::size_t samples_per_class = 100;  // per client, per held class
};

using ClassificationSource = std::variant<SyntheticBlobs, LabeledPool>;

// k-subsets of [L] in lexicographic order; client i holds subset i mod C(L, k).
inline std::vector<std::vector<int>> class_subsets(std::size_t n_classes, std::size_t k) {
  std::vector<std::vector<int>> out;
  std::vector<int> current(k);
  std::iota(current.begin(), current.end(), 0);
  const int top = static_cast<int>(n_classes);
  while (true) {
    out.push_back(current);
    std::size_t pos = k;
    while (pos > 0 && current[pos - 1] == top - static_cast<int>(k - pos) - 1) --pos;
    if (pos == 0) break;
    ++current[pos - 1];
    for (std::size_t r = pos; r < k; ++r) current[r] = current[r - 1] + 1;
  }
  return out;
}

inline TaskSpec gen_label_skew_classification(std::size_t n_clients, std::size_t classes_per_client,
                                              const ClassificationSource& source, Rng& rng) {
  const std::size_t n_classes = std::visit([](const auto& s) { return s.n_classes; }, source);
  if (n_clients == 0) throw ValidationError("classification task needs N >= 1");
  if (n_classes < 2) throw ValidationError("classification task needs L >= 2");
  if (classes_per_client == 0 || classes_per_client > n_classes) {
    throw ValidationError("classes per client must lie in [1, L]");
  }
  const auto subsets = class_subsets(n_classes, classes_per_client);

  TaskSpec task;
  task.kind = TaskKind::kMulticlassLogistic;
  task.n_classes = n_classes;
  task.importance = uniform_distribution(n_clients);

  if (const auto* blobs = std::get_if<SyntheticBlobs>(&source)) {
    task.dim = blobs->dim;
    const auto d = static_cast<Eigen::Index>(blobs->dim);
    Matrix centers(static_cast<Eigen::Index>(n_classes), d);
    for (Eigen::Index c = 0; c < centers.rows(); ++c) {
      for (Eigen::Index k = 0; k < d; ++k) centers(c, k) = rng.normal(0.0, blobs->center_scale);
    }
    for (std::size_t i = 0; i < n_clients; ++i) {
      const auto& held = subsets[i % subsets.size()];
      const auto n = static_cast<Eigen::Index>(held.size() * blobs->samples_per_class);
      ClientData data;
      data.features.resize(n, d);
      Eigen::Index r = 0;
      for (int c : held) {
        for (std::size_t s = 0; s < blobs->samples_per_class; ++s, ++r) {
          for (Eigen::Index k = 0; k < d; ++k) {
            data.features(r, k) = centers(c, k) + rng.normal(0.0, blobs->spread);
          }
          data.labels.push_back(c);
        }
      }
      task.clients.push_back(std::move(data));
    }
    return task;
  }

  const auto& pool = std::get<LabeledPool>(source);
  task.dim = static_cast<std::size_t>(pool.features.cols());
  std::vector<std::vector<std::size_t>> by_class(n_classes);
  for (std::size_t s = 0; s < pool.labels.size(); ++s) {
    const int c = pool.labels[s];
    if (c < 0 || static_cast<std::size_t>(c) >= n_classes) {
      throw ValidationError("pool label " + std::to_string(c) + " outside [0, L)");
    }
    by_class[static_cast<std::size_t>(c)].push_back(s);
  }
  // Holders of each class receive disjoint shares of its shuffled samples.
  std::vector<std::size_t> holders(n_classes, 0);
  for (std::size_t i = 0; i < n_clients; ++i) {
    for (int c : subsets[i % subsets.size()]) ++holders[static_cast<std::size_t>(c)];
  }
  for (std::size_t c = 0; c < n_classes; ++c) {
    if (holders[c] > 0 && by_class[c].empty()) {
      throw ValidationError("source has no samples of class " + std::to_string(c));
    }
    rng.shuffle(std::span<std::size_t>(by_class[c]));
  }
  std::vector<std::size_t> cursor(n_classes, 0);
  for (std::size_t i = 0; i < n_clients; ++i) {
    const auto& held = subsets[i % subsets.size()];
    std::vector<std::size_t> picked;
    std::vector<int> picked_labels;
    for (int c : held) {
      const auto& members = by_class[static_cast<std::size_t>(c)];
      const std::size_t share = std::max<std::size_t>(1, members.size() / holders[static_cast<std::size_t>(c)]);
      const std::size_t take = std::min(share, pool.samples_per_class);
      for (std::size_t s = 0; s < take; ++s) {
        picked.push_back(members[(cursor[static_cast<std::size_t>(c)] + s) % members.size()]);
        picked_labels.push_back(c);
      }
      cursor[static_cast<std::size_t>(c)] += share;
    }
    ClientData data;
    data.features.resize(static_cast<Eigen::Index>(picked.size()), pool.features.cols());
    for (std::size_t r = 0; r < picked.size(); ++r) {
      data.features.row(static_cast<Eigen::Index>(r)) =
          pool.features.row(static_cast<Eigen::Index>(picked[r]));
    }
    data.labels = std::move(picked_labels);
    task.clients.push_back(std::move(data));
  }
  return task;
}

}  // namespace fedavot
