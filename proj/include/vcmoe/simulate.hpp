#pragma once

#include "vcmoe/dataset.hpp"
#include "vcmoe/error.hpp"
#include "vcmoe/fit.hpp"
#include "vcmoe/model.hpp"
#include "vcmoe/random.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace vcmoe {

enum class ScenarioId { Sim1, Sim2, Sim3 };

inline std::string to_string(ScenarioId id) {
  switch (id) {
    case ScenarioId::Sim1: return "sim1";
    case ScenarioId::Sim2: return "sim2";
    case ScenarioId::Sim3: return "sim3";
  }
  return {};
}

inline ScenarioId parse_scenario(const std::string& s) {
  if (s == "sim1" || s == "Sim1") return ScenarioId::Sim1;
  if (s == "sim2" || s == "Sim2") return ScenarioId::Sim2;
  if (s == "sim3" || s == "Sim3") return ScenarioId::Sim3;
  fail(ErrorCode::InvalidArgument, "unknown scenario '" + s + "'");
}

//! A data-generating design. `constant_beta` replaces the gating functions of
//! a two-component scenario by a constant vector (null designs for tests).
struct Scenario {
  ScenarioId id = ScenarioId::Sim1;
  std::optional<std::vector<double>> constant_beta;
};

inline ModelSpec scenario_model(const Scenario& s) {
  ModelSpec m;
  m.p_x = 2;
  m.p_z = 2;
  switch (s.id) {
    case ScenarioId::Sim1:
      m.n_components = 2;
      m.gating = GatingForm::Logistic;
      m.expert = ExpertFamily::Gaussian;
      break;
    case ScenarioId::Sim2:
      m.n_components = 2;
      m.gating = GatingForm::Logistic;
      m.expert = ExpertFamily::Binomial;
      m.trials = 100;
      break;
    case ScenarioId::Sim3:
      m.n_components = 3;
      m.gating = GatingForm::Softmax;
      m.expert = ExpertFamily::Gaussian;
      break;
  }
  return m;
}

//! True coefficient values (natural scale) at u.
inline ThetaPoint truth_point(const Scenario& s, double u) {
  const ModelSpec m = scenario_model(s);
  ThetaPoint t = ThetaPoint::zero(m);
  const double cs = std::cos(2 * std::numbers::pi * u);
  const double sn = std::sin(2 * std::numbers::pi * u);
  switch (s.id) {
    case ScenarioId::Sim1:
      t.beta << -0.4 + u, 0.9 - 1.2 * u;
      t.alpha << -0.5 + 0.6 * cs, 1 + 0.6 * sn,
                  0.5 + 0.6 * cs, 2 + 0.6 * sn;
      t.log_delta << std::log(0.85 + 0.35 * cs), std::log(1.85 + 0.35 * cs);
      break;
    case ScenarioId::Sim2:
      t.beta << -0.4 + u, 0.9 - 1.2 * u;
      t.alpha << -0.5 + 0.1 * cs, 1 + 0.1 * sn,
                  0.1 * cs, 1.5 + 0.1 * sn;
      break;
    case ScenarioId::Sim3:
      t.beta << 0.4 - 1.3 * u, 0.1 + 1.2 * cs,
                 0.9 - 1.2 * u, -0.5 + 0.7 * cs;
      t.alpha << -0.5 + 0.6 * cs, 1 + 0.6 * sn,
                  0.5 + 0.6 * cs, 1.5 + 0.6 * sn,
                  1 + 0.6 * cs, 2 + 0.6 * sn;
      t.log_delta.setConstant(0.35 * u * u);
      break;
  }
  if (s.constant_beta) {
    if (static_cast<Eigen::Index>(s.constant_beta->size()) != t.beta.size())
      fail(ErrorCode::DimensionMismatch, "constant_beta has the wrong length");
    for (Eigen::Index j = 0; j < t.beta.size(); ++j)
      t.beta(j / t.beta.cols(), j % t.beta.cols()) = (*s.constant_beta)[static_cast<std::size_t>(j)];
  }
  return t;
}

inline double coefficient_truth(const Scenario& s, const std::string& name, double u) {
  const ModelSpec m = scenario_model(s);
  CoefficientId id;
  try {
    id = parse_coefficient(m, name);
  } catch (const Error&) {
    fail(ErrorCode::UnknownCoefficient, "scenario " + to_string(s.id) + " has no coefficient '" + name + "'");
  }
  return truth_point(s, u).value(id);
}

struct SimulatedData {
  Dataset data;
  std::vector<int> labels;  // true component, 0-based
};

inline SimulatedData generate(const Scenario& s, Eigen::Index n, std::uint64_t seed) {
  if (n < 1) fail(ErrorCode::InvalidArgument, "n must be at least 1");
  const ModelSpec m = scenario_model(s);
  std::mt19937_64 rng(mix_seed(seed));
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::uniform_int_distribution<int> lattice(0, 19);
  SimulatedData out;
  Dataset& d = out.data;
  d.u.resize(n);
  d.X.resize(n, 2);
  d.Z.resize(n, 2);
  d.y.resize(n);
  out.labels.resize(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) {
    d.u(i) = s.id == ScenarioId::Sim3 ? lattice(rng) / 19.0 : unif(rng);
    d.X(i, 0) = 1.0;
    d.X(i, 1) = normal(rng);
    d.Z(i, 0) = 1.0;
    d.Z(i, 1) = normal(rng);
    const ThetaPoint t = truth_point(s, d.u(i));
    const Eigen::VectorXd p = gate_probs(m, t, d.X.row(i).transpose());
    const double draw = unif(rng);
    int c = 0;
    double acc = p(0);
    while (c + 1 < m.n_components && draw >= acc) acc += p(++c);
    out.labels[static_cast<std::size_t>(i)] = c;
    const double eta = t.alpha.row(c).dot(d.Z.row(i));
    if (m.expert == ExpertFamily::Gaussian) {
      d.y(i) = eta + std::exp(t.log_delta(c)) * normal(rng);
    } else {
      std::binomial_distribution<int> binom(m.trials, 1.0 / (1.0 + std::exp(-eta)));
      d.y(i) = binom(rng);
    }
  }
  return out;
}

//! sqrt(N^-1 sum_j (estimate_j - truth_j)^2).
inline double rase(const std::vector<double>& estimate, const std::vector<double>& truth) {
  if (estimate.size() != truth.size() || estimate.empty())
    fail(ErrorCode::LengthMismatch, "estimate and truth lengths differ");
  double s = 0.0;
  for (std::size_t j = 0; j < estimate.size(); ++j) {
    const double e = estimate[j] - truth[j];
    s += e * e;
  }
  return std::sqrt(s / static_cast<double>(estimate.size()));
}

inline std::vector<double> truth_curve(const Scenario& s, const CoefficientId& id,
                                       const std::vector<double>& grid) {
  std::vector<double> v(grid.size());
  for (std::size_t j = 0; j < grid.size(); ++j) v[j] = truth_point(s, grid[j]).value(id);
  return v;
}

//! Relabels components: new component k is old component perm[k]. Gating rows
//! are re-expressed against the new reference class.
inline ThetaPoint permute_components(const ModelSpec& spec, const ThetaPoint& t, const std::vector<int>& perm) {
  const int C = spec.n_components;
  auto full = [&](const Eigen::MatrixXd& b) {
    Eigen::MatrixXd f = Eigen::MatrixXd::Zero(C, b.cols());
    f.topRows(C - 1) = b;
    return f;
  };
  const Eigen::MatrixXd fb = full(t.beta), fs = full(t.beta_slope);
  ThetaPoint out = t;
  const int ref = perm[static_cast<std::size_t>(C - 1)];
  for (int k = 0; k < C - 1; ++k) {
    const int o = perm[static_cast<std::size_t>(k)];
    out.beta.row(k) = fb.row(o) - fb.row(ref);
    out.beta_slope.row(k) = fs.row(o) - fs.row(ref);
  }
  for (int k = 0; k < C; ++k) {
    const int o = perm[static_cast<std::size_t>(k)];
    out.alpha.row(k) = t.alpha.row(o);
    out.alpha_slope.row(k) = t.alpha_slope.row(o);
    out.log_delta(k) = t.log_delta(o);
    out.log_delta_slope(k) = t.log_delta_slope(o);
  }
  return out;
}

inline ThetaCurve permute_components(const ModelSpec& spec, const ThetaCurve& curve, const std::vector<int>& perm) {
  ThetaCurve out = curve;
  for (auto& p : out.points) p = permute_components(spec, p, perm);
  if (curve.responsibilities.size() > 0)
    for (int k = 0; k < spec.n_components; ++k)
      out.responsibilities.col(k) = curve.responsibilities.col(perm[static_cast<std::size_t>(k)]);
  return out;
}

//! Permutation minimising the summed squared distance of all coefficient
//! curves to the truth over the grid.
inline std::vector<int> align_to_truth(const ModelSpec& spec, const ThetaCurve& curve, const Scenario& s) {
  std::vector<int> perm(static_cast<std::size_t>(spec.n_components));
  for (int c = 0; c < spec.n_components; ++c) perm[static_cast<std::size_t>(c)] = c;
  std::vector<ThetaPoint> truth;
  for (double u : curve.grid) truth.push_back(truth_point(s, u));
  const auto ids = spec.coefficients();
  std::vector<int> best = perm;
  double best_cost = std::numeric_limits<double>::infinity();
  do {
    double cost = 0.0;
    for (std::size_t j = 0; j < curve.grid.size(); ++j) {
      const ThetaPoint p = permute_components(spec, curve.points[j], perm);
      for (const auto& id : ids) {
        const double e = p.value(id) - truth[j].value(id);
        cost += e * e;
      }
    }
    if (cost < best_cost) {
      best_cost = cost;
      best = perm;
    }
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

}  // namespace vcmoe
