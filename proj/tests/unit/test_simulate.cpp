#include "common.hpp"

#include "vcmoe/simulate.hpp"
#include "vcmoe/study.hpp"

#include <gtest/gtest.h>

#include <set>

using namespace vcmoe;
using testutil::code_of;

namespace {
const Scenario sim1{ScenarioId::Sim1, std::nullopt};
const Scenario sim2{ScenarioId::Sim2, std::nullopt};
const Scenario sim3{ScenarioId::Sim3, std::nullopt};
}  // namespace

TEST(Truth, TableValues) {
  EXPECT_DOUBLE_EQ(coefficient_truth(sim1, "beta0", 0.0), -0.4);
  EXPECT_DOUBLE_EQ(coefficient_truth(sim1, "alpha10", 0.0), 0.1);
  EXPECT_NEAR(coefficient_truth(sim3, "delta1", 1.0), 1.4191, 5e-5);
  EXPECT_NEAR(coefficient_truth(sim1, "delta1", 0.0), 1.2, 1e-12);
  EXPECT_NEAR(coefficient_truth(sim1, "beta1", 0.5), 0.3, 1e-12);
  EXPECT_NEAR(coefficient_truth(sim3, "beta21", 0.0), -0.5 + 0.7, 1e-12);
  EXPECT_EQ(code_of([] { coefficient_truth(sim2, "delta1", 0.3); }), ErrorCode::UnknownCoefficient);
}

TEST(Generate, DeterministicPerSeed) {
  const auto a = generate(sim1, 200, 42);
  const auto b = generate(sim1, 200, 42);
  const auto c = generate(sim1, 200, 43);
  EXPECT_TRUE((a.data.y.array() == b.data.y.array()).all());
  EXPECT_TRUE((a.data.Z.array() == b.data.Z.array()).all());
  EXPECT_EQ(a.labels, b.labels);
  EXPECT_FALSE((a.data.y.array() == c.data.y.array()).all());
  EXPECT_EQ(code_of([] { generate(sim1, 0, 1); }), ErrorCode::InvalidArgument);
}

TEST(Generate, BinomialResponsesInRange) {
  const auto s = generate(sim2, 1000, 3);
  for (Eigen::Index i = 0; i < s.data.size(); ++i) {
    EXPECT_GE(s.data.y(i), 0.0);
    EXPECT_LE(s.data.y(i), 100.0);
    EXPECT_EQ(s.data.y(i), std::round(s.data.y(i)));
  }
}

TEST(Generate, SymmetricGateSplitsEvenly) {
  Scenario s{ScenarioId::Sim1, std::vector<double>{0.0, 0.0}};
  const int n = 4000;
  const auto d = generate(s, n, 9);
  const double frac = std::count(d.labels.begin(), d.labels.end(), 0) / static_cast<double>(n);
  EXPECT_NEAR(frac, 0.5, 3.0 / std::sqrt(n));
}

TEST(Generate, GateFrequenciesMatchAnalyticProbabilities) {
  const int n = 20000;
  const auto d = generate(sim1, n, 10);
  const ModelSpec m = scenario_model(sim1);
  std::vector<double> hits(10, 0.0), expect(10, 0.0), count(10, 0.0);
  for (Eigen::Index i = 0; i < n; ++i) {
    const int bin = std::min(9, static_cast<int>(d.data.u(i) * 10));
    expect[static_cast<std::size_t>(bin)] += gate_probs(m, truth_point(sim1, d.data.u(i)), d.data.X.row(i).transpose())(0);
    hits[static_cast<std::size_t>(bin)] += d.labels[static_cast<std::size_t>(i)] == 0 ? 1.0 : 0.0;
    count[static_cast<std::size_t>(bin)] += 1.0;
  }
  for (std::size_t b = 0; b < 10; ++b) EXPECT_NEAR(hits[b] / count[b], expect[b] / count[b], 4.0 / std::sqrt(count[b]));
}

TEST(Generate, LatticeIndexForThirdScenario) {
  const auto d = generate(sim3, 500, 4);
  std::set<double> values;
  for (Eigen::Index i = 0; i < d.data.size(); ++i) {
    const double k = d.data.u(i) * 19.0;
    EXPECT_NEAR(k, std::round(k), 1e-12);
    values.insert(d.data.u(i));
  }
  EXPECT_EQ(values.size(), 20u);
  std::set<int> labels(d.labels.begin(), d.labels.end());
  EXPECT_EQ(labels.size(), 3u);
}

TEST(Rase, Examples) {
  EXPECT_DOUBLE_EQ(rase({1, 2, 3}, {1, 2, 3}), 0.0);
  EXPECT_DOUBLE_EQ(rase({1.5, 2.5}, {1, 2}), 0.5);
  EXPECT_NEAR(rase({1, 2}, {0, 0}), 1.5811, 5e-5);
  EXPECT_EQ(code_of([] { rase({1, 2}, {1}); }), ErrorCode::LengthMismatch);
}

TEST(Align, RecoversSwappedLabels) {
  for (const Scenario& s : {sim1, sim3}) {
    const ModelSpec m = scenario_model(s);
    ThetaCurve c;
    c.grid = equispaced_grid(11);
    for (double u : c.grid) c.points.push_back(truth_point(s, u));
    std::vector<int> perm(static_cast<std::size_t>(m.n_components));
    std::iota(perm.rbegin(), perm.rend(), 0);
    const ThetaCurve swapped = permute_components(m, c, perm);
    const auto back = align_to_truth(m, swapped, s);
    std::set<int> uniq(back.begin(), back.end());
    EXPECT_EQ(uniq.size(), perm.size());
    const ThetaCurve fixed = permute_components(m, swapped, back);
    for (std::size_t j = 0; j < c.grid.size(); ++j)
      for (const auto& id : m.coefficients()) EXPECT_NEAR(fixed.points[j].value(id), c.points[j].value(id), 1e-12);
  }
}

TEST(Align, PermutationPreservesMixtureDensity) {
  const ModelSpec m = scenario_model(sim3);
  const ThetaPoint t = truth_point(sim3, 0.3);
  const ThetaPoint p = permute_components(m, t, {2, 0, 1});
  Eigen::Vector2d x(1.0, 0.4), z(1.0, -0.7);
  EXPECT_NEAR(mixture_log_density(m, t, x, z, 1.1), mixture_log_density(m, p, x, z, 1.1), 1e-12);
}

TEST(Study, SingleReplicateHasZeroSd) {
  StudyConfig cfg;
  cfg.scenario = sim1;
  cfg.replicates = 1;
  cfg.n = 300;
  cfg.h_list = {0.25};
  cfg.fit.grid = equispaced_grid(21);
  const StudyResult r = run_study(cfg);
  EXPECT_EQ(r.successful, 1);
  ASSERT_EQ(r.rase.size(), scenario_model(sim1).coefficients().size());
  for (const auto& row : r.rase) {
    EXPECT_EQ(row.sd, 0.0);
    ASSERT_EQ(row.values.size(), 1u);
    EXPECT_EQ(row.mean, row.values[0]);
    EXPECT_GE(row.mean, 0.0);
  }
}

TEST(Study, ThirdScenarioReportsEveryGateRow) {
  StudyConfig cfg;
  cfg.scenario = sim3;
  cfg.replicates = 1;
  cfg.n = 400;
  cfg.h_list = {0.3};
  cfg.fit.grid = equispaced_grid(20);
  const StudyResult r = run_study(cfg);
  std::set<std::string> names;
  for (const auto& row : r.rase) names.insert(row.name);
  for (const char* want : {"beta10", "beta11", "beta20", "beta21", "alpha30", "delta3"}) EXPECT_TRUE(names.count(want)) << want;
}

TEST(Study, IndependentOfThreadCount) {
  StudyConfig cfg;
  cfg.scenario = sim1;
  cfg.replicates = 3;
  cfg.n = 250;
  cfg.h_list = {0.3};
  cfg.fit.grid = equispaced_grid(21);
  cfg.fit.max_iter = 30;
  cfg.threads = 1;
  const StudyResult a = run_study(cfg);
  cfg.threads = 3;
  const StudyResult b = run_study(cfg);
  ASSERT_EQ(a.rase.size(), b.rase.size());
  for (std::size_t k = 0; k < a.rase.size(); ++k) EXPECT_EQ(a.rase[k].values, b.rase[k].values);
}

TEST(Study, RejectsEmptyInputs) {
  StudyConfig cfg;
  cfg.replicates = 0;
  EXPECT_EQ(code_of([&] { run_study(cfg); }), ErrorCode::InvalidArgument);
  cfg.replicates = 1;
  cfg.h_list.clear();
  EXPECT_EQ(code_of([&] { run_study(cfg); }), ErrorCode::InvalidArgument);
}
