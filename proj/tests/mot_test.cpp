#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <cmath>
#include <numeric>
#include <vector>

#include "fedavot/errors.hpp"
#include "fedavot/io.hpp"
#include "fedavot/mot.hpp"
#include "test_support.hpp"

namespace fedavot {
namespace {

TransportProblem two_by_two() { return build_problem({0.5, 0.5}, {0.3, 0.7}, {{0}, {0, 1}}); }

// The 2x2 instance has three free entries T00, T01, T11 and four marginal
// equations. Solve the (consistent) overdetermined system directly.
Eigen::Vector3d two_by_two_exact() {
  Eigen::Matrix<double, 4, 3> a;
  a << 1, 1, 0,  // row 0
      0, 0, 1,   // row 1
      1, 0, 0,   // col 0
      0, 1, 1;   // col 1
  Eigen::Vector4d b(0.5, 0.5, 0.3, 0.7);
  return a.colPivHouseholderQr().solve(b);
}

TEST(BuildProblem, SingleClient) {
  const auto problem = build_problem({1.0}, {1.0}, {{0}});
  EXPECT_EQ(problem.mask()->nnz(), 1u);
  EXPECT_TRUE(problem.mask()->find(0, 0).has_value());
}

TEST(BuildProblem, TwoByTwoMask) {
  const auto problem = two_by_two();
  const Mask& mask = *problem.mask();
  EXPECT_EQ(mask.nnz(), 3u);
  EXPECT_TRUE(mask.find(0, 0));
  EXPECT_TRUE(mask.find(0, 1));
  EXPECT_TRUE(mask.find(1, 1));
  EXPECT_FALSE(mask.find(1, 0));
  EXPECT_EQ(mask.row_degree(0), 2u);
  EXPECT_EQ(mask.row_degree(1), 1u);
}

TEST(BuildProblem, RejectsNonSimplexImportance) {
  try {
    build_problem({0.5, 0.6}, {1.0}, {{0, 1}});
    FAIL() << "expected ValidationError";
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("importance p"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("1.1"), std::string::npos);
  }
}

TEST(BuildProblem, RejectsNegativeAvailability) {
  try {
    build_problem({1.0}, {1.5, -0.5}, {{0}, {0}});
    FAIL() << "expected ValidationError";
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("availability q[1]"), std::string::npos);
  }
}

TEST(BuildProblem, RejectsEmptyEvent) {
  try {
    build_problem({1.0}, {0.5, 0.5}, {{0}, {}});
    FAIL() << "expected ValidationError";
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("event 1"), std::string::npos);
  }
}

TEST(BuildProblem, RejectsOutOfRangeAndDuplicateClients) {
  EXPECT_THROW(build_problem({1.0}, {1.0}, {{1}}), ValidationError);
  EXPECT_THROW(build_problem({0.5, 0.5}, {1.0}, {{1, 1}}), ValidationError);
  EXPECT_THROW(build_problem({0.5, 0.5}, {0.5, 0.5}, {{0}}), ValidationError);
}

TEST(BuildProblem, SortsMembersAndDropsZeroMassEvents) {
  const auto problem = build_problem({0.5, 0.5}, {0.0, 1.0}, {{0}, {1, 0}});
  ASSERT_EQ(problem.n_events(), 1u);
  EXPECT_EQ(problem.events()[0], (EventSet{0, 1}));
  EXPECT_EQ(problem.original_event_index(0), 1u);
  EXPECT_EQ(problem.dropped_events(), (std::vector<std::size_t>{0}));
}

TEST(InitPlan, SplitsEventMassEvenly) {
  const auto a = init_plan(build_problem({0.5, 0.5}, {1.0}, {{0, 1}}));
  EXPECT_DOUBLE_EQ(a.at(0, 0), 0.5);
  EXPECT_DOUBLE_EQ(a.at(1, 0), 0.5);

  const auto b = init_plan(two_by_two());
  EXPECT_DOUBLE_EQ(b.at(0, 0), 0.3);
  EXPECT_DOUBLE_EQ(b.at(0, 1), 0.35);
  EXPECT_DOUBLE_EQ(b.at(1, 0), 0.0);
  EXPECT_DOUBLE_EQ(b.at(1, 1), 0.35);

  const auto c = init_plan(build_problem({0.2, 0.3, 0.5}, {1.0}, {{2}}));
  EXPECT_EQ(c.at(2, 0), 1.0);
  EXPECT_EQ(c.at(0, 0), 0.0);
  EXPECT_EQ(c.at(1, 0), 0.0);
}

TEST(SinkhornStep, FixedPointIsPreserved) {
  const auto problem = two_by_two();
  const Eigen::Vector3d t = two_by_two_exact();
  TransportPlan plan(problem.mask(), {t[0], t[1], t[2]});
  // CSC order: (0,0), (0,1), (1,1)
  const TransportPlan next = sinkhorn_step(plan, problem);
  for (std::size_t k = 0; k < 3; ++k) {
    EXPECT_NEAR(next.values()[k], plan.values()[k], 1e-15);
  }
}

TEST(SinkhornStep, ColumnsExactAfterOnePass) {
  const auto problem = two_by_two();
  const TransportPlan next = sinkhorn_step(init_plan(problem), problem);
  const auto cols = next.col_sums();
  EXPECT_EQ(cols[0], 0.3);
  EXPECT_EQ(cols[1], 0.7);
}

TEST(SinkhornStep, ZeroRowNamesClient) {
  const auto problem = two_by_two();
  TransportPlan plan(problem.mask(), {0.3, 0.7, 0.0});
  try {
    sinkhorn_step(plan, problem);
    FAIL() << "expected StructuralInfeasibility";
  } catch (const StructuralInfeasibility& e) {
    EXPECT_EQ(e.side(), StructuralInfeasibility::Side::kClient);
    EXPECT_EQ(e.index(), 1u);
  }
}

TEST(SinkhornStep, ClientInNoEventIsStructurallyInfeasible) {
  const auto problem = build_problem({0.5, 0.5}, {1.0}, {{0}});
  EXPECT_THROW(sinkhorn_step(init_plan(problem), problem), StructuralInfeasibility);
}

TEST(SolveSinkhorn, FullParticipation) {
  const std::vector<double> p{0.1, 0.2, 0.3, 0.4};
  const auto problem = build_problem(p, {1.0}, {{0, 1, 2, 3}});
  const auto result = solve_sinkhorn(problem);
  EXPECT_TRUE(result.converged);
  EXPECT_LE(result.iterations, 2u);
  for (std::size_t i = 0; i < p.size(); ++i) {
    EXPECT_NEAR(result.plan.at(i, 0), p[i], 1e-15);
    EXPECT_NEAR(result.weights.at(i, 0), p[i], 1e-15);
  }
}

TEST(SolveSinkhorn, TwoByTwoMatchesLinearSolve) {
  const Eigen::Vector3d exact = two_by_two_exact();
  EXPECT_NEAR(exact[0], 0.3, 1e-12);
  EXPECT_NEAR(exact[1], 0.2, 1e-12);
  EXPECT_NEAR(exact[2], 0.5, 1e-12);

  const auto result = solve_sinkhorn(two_by_two(), {1e-12, 100000});
  ASSERT_TRUE(result.converged);
  EXPECT_NEAR(result.plan.at(0, 0), exact[0], 1e-9);
  EXPECT_NEAR(result.plan.at(0, 1), exact[1], 1e-9);
  EXPECT_NEAR(result.plan.at(1, 1), exact[2], 1e-9);
  EXPECT_EQ(result.plan.at(1, 0), 0.0);
  EXPECT_NEAR(result.weights.at(0, 1), 2.0 / 7.0, 1e-9);
  EXPECT_NEAR(result.weights.at(1, 1), 5.0 / 7.0, 1e-9);
}

TEST(SolveSinkhorn, NeverAvailableClientDoesNotConverge) {
  const auto problem = build_problem({0.5, 0.5}, {1.0}, {{0}});
  const auto result = solve_sinkhorn(problem, {1e-8, 1000});
  EXPECT_FALSE(result.converged);
  EXPECT_LE(result.col_residual_l1, 1e-12);
  // All mass sits on client 0: |1 - 0.5| + |0 - 0.5|.
  EXPECT_NEAR(result.row_residual_l1, 1.0, 1e-12);
  EXPECT_EQ(result.unreachable_clients, (std::vector<std::size_t>{1}));
}

TEST(SolveSinkhorn, RejectsBadOptions) {
  EXPECT_THROW(solve_sinkhorn(two_by_two(), {1e-8, 0}), ValidationError);
  EXPECT_THROW(solve_sinkhorn(two_by_two(), {0.0, 10}), ValidationError);
}

TEST(MarginalResiduals, Examples) {
  const auto problem = two_by_two();
  TransportPlan exact(problem.mask(), {0.3, 0.2, 0.5});
  const auto r = marginal_residuals(exact, problem);
  EXPECT_NEAR(r.row_l1, 0.0, 1e-12);
  EXPECT_NEAR(r.col_l1, 0.0, 1e-12);

  EXPECT_EQ(marginal_residuals(init_plan(problem), problem).col_l1, 0.0);

  const auto uniform = build_problem({0.5, 0.5}, {0.5, 0.5}, {{0}, {1}});
  const auto z = marginal_residuals(TransportPlan(uniform.mask()), uniform);
  EXPECT_DOUBLE_EQ(z.row_l1, 1.0);
  EXPECT_DOUBLE_EQ(z.col_l1, 1.0);
}

TEST(NormalizeWeights, Examples) {
  const std::vector<double> p{0.25, 0.75};
  const auto full = build_problem(p, {1.0}, {{0, 1}});
  const auto y = normalize_weights(TransportPlan(full.mask(), p), full.availability());
  EXPECT_EQ(y.at(0, 0), 0.25);
  EXPECT_EQ(y.at(1, 0), 0.75);

  const auto problem = two_by_two();
  const auto w = normalize_weights(TransportPlan(problem.mask(), {0.3, 0.2, 0.5}),
                                   problem.availability());
  EXPECT_DOUBLE_EQ(w.at(0, 0), 1.0);
  EXPECT_DOUBLE_EQ(w.at(0, 1), 0.2 / 0.7);
  EXPECT_DOUBLE_EQ(w.at(1, 1), 0.5 / 0.7);
  EXPECT_EQ(w.at(1, 0), 0.0);
  EXPECT_TRUE(w.zero_columns().empty());

  const std::vector<double> q{1.0, 0.0};
  const auto degenerate = normalize_weights(TransportPlan(problem.mask(), {1.0, 0.0, 0.0}), q);
  EXPECT_EQ(degenerate.zero_columns(), (std::vector<std::size_t>{1}));
  EXPECT_EQ(degenerate.at(0, 1), 0.0);
  EXPECT_EQ(degenerate.at(1, 1), 0.0);
}

TEST(ImpliedImportance, Examples) {
  const std::size_t n = 6;
  std::vector<EventSet> pairs;
  for (std::size_t a = 0; a < n; ++a) {
    for (std::size_t b = a + 1; b < n; ++b) pairs.push_back({a, b});
  }
  const std::vector<double> q(pairs.size(), 1.0 / static_cast<double>(pairs.size()));
  for (double v : implied_importance(q, pairs, n)) EXPECT_NEAR(v, 1.0 / n, 1e-15);

  const auto two = implied_importance(two_by_two());
  EXPECT_DOUBLE_EQ(two[0], 0.65);
  EXPECT_DOUBLE_EQ(two[1], 0.35);

  const std::vector<double> one{1.0};
  const std::vector<EventSet> all{{0, 1, 2, 3}};
  for (double v : implied_importance(one, all, 4)) EXPECT_DOUBLE_EQ(v, 0.25);
}

TEST(ImpliedImportance, MatchesRowSumsOfUniformPlan) {
  Rng rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    const auto raw = testing::random_instance(rng, 8, 20, 4);
    const auto problem = testing::to_problem(raw);
    const auto t = plan_from_weights(uniform_weights(problem.mask()), problem.availability());
    const auto rows = t.row_sums();
    const auto implied = implied_importance(problem);
    for (std::size_t i = 0; i < rows.size(); ++i) EXPECT_NEAR(rows[i], implied[i], 1e-14);
  }
}

TEST(SinkhornProperty, RandomFeasibleInstancesConverge) {
  Rng rng(11);
  for (int trial = 0; trial < 40; ++trial) {
    const std::size_t n = 2 + rng.uniform_index(20);
    const std::size_t m = 1 + rng.uniform_index(60);
    const auto problem = testing::to_problem(testing::random_feasible_instance(rng, n, m, 5));
    const auto result = solve_sinkhorn(problem, {1e-10, 100000});
    ASSERT_TRUE(result.converged) << "trial " << trial;
    EXPECT_LE(result.row_residual_l1, 1e-10);
    EXPECT_LE(result.col_residual_l1, 1e-10);
  }
}

TEST(SinkhornProperty, ColumnsExactAfterEveryPass) {
  Rng rng(12);
  const auto problem = testing::to_problem(testing::random_instance(rng, 10, 25, 4));
  TransportPlan plan = init_plan(problem);
  SinkhornScaler scaler(problem, true);
  for (int pass = 0; pass < 20; ++pass) {
    scaler.step(plan);
    EXPECT_LE(marginal_residuals(plan, problem).col_l1, 1e-14);
  }
}

TEST(SinkhornProperty, InvariantToScalingOfTheStartingPlan) {
  Rng rng(13);
  const auto problem = testing::to_problem(testing::random_feasible_instance(rng, 12, 30, 4));
  TransportPlan a = init_plan(problem);
  std::vector<double> scaled(a.values().begin(), a.values().end());
  for (double& v : scaled) v *= 37.5;
  TransportPlan b(problem.mask(), scaled);
  SinkhornScaler scaler(problem, true);
  for (int pass = 0; pass < 200; ++pass) {
    scaler.step(a);
    scaler.step(b);
  }
  for (std::size_t k = 0; k < a.values().size(); ++k) {
    EXPECT_NEAR(a.values()[k], b.values()[k], 1e-13);
  }
}

TEST(Io, ProblemAndPlanRoundTrip) {
  Rng rng(14);
  const auto problem = testing::to_problem(testing::random_feasible_instance(rng, 6, 10, 3));
  const auto back = problem_from_json(parse_json(problem_to_json(problem).dump(), "mem"));
  EXPECT_EQ(back.importance(), problem.importance());
  EXPECT_EQ(back.availability(), problem.availability());
  EXPECT_EQ(back.events(), problem.events());

  const auto result = solve_sinkhorn(problem);
  const auto plan = plan_from_json(parse_json(matrix_to_json(result.plan).dump(), "mem"), problem);
  for (std::size_t k = 0; k < plan.values().size(); ++k) {
    EXPECT_EQ(plan.values()[k], result.plan.values()[k]);
  }
}

TEST(Io, MalformedJsonReportsLocation) {
  try {
    parse_json("{\"p\": [1.0,\n ]", "bad.json");
    FAIL() << "expected ValidationError";
  } catch (const ValidationError& e) {
    EXPECT_EQ(std::string(e.what()).rfind("bad.json:", 0), 0u);
  }
}

}  // namespace
}  // namespace fedavot
