#include <numbers>
#include "common.hpp"

#include "vcmoe/inference.hpp"
#include "vcmoe/simulate.hpp"

#include <gtest/gtest.h>

using namespace vcmoe;
using testutil::code_of;

namespace {

const Scenario sim1{ScenarioId::Sim1, std::nullopt};
const CoefficientId alpha10{CoefficientId::Kind::Alpha, 0, 0};
const CoefficientId delta1{CoefficientId::Kind::Delta, 0, 0};
const CoefficientId beta1{CoefficientId::Kind::Beta, 0, 1};

FitConfig quick(double h = 0.3) {
  FitConfig c;
  c.h = h;
  c.grid = equispaced_grid(21);
  return c;
}

}  // namespace

TEST(Gumbel, LocationAtPointEighteen) {
  const double L = std::sqrt(-2.0 * std::log(0.18));
  EXPECT_NEAR(L, 1.8520, 1e-4);
  // the four-digit hand value 0.9801 carries the rounding of L; exact evaluation is 0.97999
  EXPECT_NEAR(gumbel_location(0.18), 0.9801, 2e-4);
  EXPECT_NEAR(gumbel_location(0.18), L + std::log(1.5 / (4 * 0.6 * std::numbers::pi)) / L, 1e-12);
}

TEST(Gumbel, LevelTerm) {
  EXPECT_NEAR(gumbel_level_term(0.95), 3.6633, 5e-5);
  EXPECT_EQ(code_of([] { gumbel_level_term(1.0); }), ErrorCode::InvalidArgument);
}

TEST(Gumbel, BandwidthMustBeBelowOne) {
  EXPECT_EQ(code_of([] { gumbel_location(1.0); }), ErrorCode::BandwidthGeqOne);
  EXPECT_EQ(code_of([] { gumbel_location(0.0); }), ErrorCode::NonPositiveBandwidth);
}

TEST(Gumbel, CriticalValueDecreasesWithLevel) {
  double prev = std::numeric_limits<double>::infinity();
  for (double level : {0.99, 0.95, 0.9, 0.8, 0.5}) {
    const double c = gumbel_critical(0.2, level);
    EXPECT_LT(c, prev);
    prev = c;
  }
}

TEST(Sandwich, ReducesToWeightedLeastSquares) {
  ModelSpec m;
  m.p_z = 2;
  const Dataset d = testutil::linear_data(200, 3);
  const double u = 0.5, h = 0.3;
  // hand-built local-linear WLS at u
  Eigen::MatrixXd V(0, 4);
  std::vector<double> w, y;
  for (Eigen::Index i = 0; i < d.size(); ++i) {
    const double t = (d.u(i) - u) / h;
    if (std::abs(t) >= 1) continue;
    V.conservativeResize(V.rows() + 1, 4);
    const double du = d.u(i) - u;
    V.row(V.rows() - 1) << d.Z(i, 0), d.Z(i, 1), d.Z(i, 0) * du, d.Z(i, 1) * du;
    w.push_back(0.75 * (1 - t * t) / h);
    y.push_back(d.y(i));
  }
  const Eigen::Map<Eigen::VectorXd> W(w.data(), static_cast<Eigen::Index>(w.size()));
  const Eigen::Map<Eigen::VectorXd> Y(y.data(), static_cast<Eigen::Index>(y.size()));
  const Eigen::MatrixXd VtW = V.transpose() * W.asDiagonal();
  const Eigen::Vector4d coef = (VtW * V).ldlt().solve(VtW * Y);
  const Eigen::VectorXd r = Y - V * coef;
  const double s2 = W.dot(r.cwiseAbs2()) / W.sum();
  const Eigen::MatrixXd A = VtW * V / s2;
  const Eigen::MatrixXd B = V.transpose() * (W.array().square() * r.array().square()).matrix().asDiagonal() * V / (s2 * s2);
  const Eigen::MatrixXd Ai = A.inverse();
  const Eigen::MatrixXd expected = Ai * B * Ai;

  // component 1 carries every observation: the gate is saturated and
  // component 2 sits far away
  ThetaPoint t = ThetaPoint::zero(m);
  t.beta(0, 0) = 50.0;
  t.alpha << coef(0), coef(1), 1e3, 0.0;
  t.alpha_slope << coef(2), coef(3), 0.0, 0.0;
  t.log_delta << 0.5 * std::log(s2), 0.0;
  ThetaCurve c = testutil::flat_curve(t, {u});
  c.h = h;
  const NodeCovariance nc = sandwich_cov(m, c, d, u);
  ParamLayout L(m);
  std::vector<Eigen::Index> pos;
  for (int q = 0; q < 4; ++q)
    pos.push_back(std::find(nc.index.begin(), nc.index.end(), L.block_offset(1) + q) - nc.index.begin());
  const Eigen::MatrixXd got = nc.cov(pos, pos);
  EXPECT_LT((got - expected).cwiseAbs().maxCoeff(), 1e-6);
  EXPECT_GT(expected.cwiseAbs().maxCoeff(), 1e-4);
}

// Bread and meat against finite differences of a hand-coded two-component
// Gaussian mixture log-likelihood, expanded linearly around u.
TEST(Sandwich, InformationMatchesFiniteDifferences) {
  const auto sd = generate(sim1, 300, 11);
  const ModelSpec m = scenario_model(sim1);
  ThetaPoint t0 = truth_point(sim1, 0.4);
  t0.beta_slope(0, 0) = 0.7;
  t0.alpha_slope(0, 1) = -0.4;
  t0.alpha_slope(1, 0) = 0.3;
  ThetaCurve c = testutil::flat_curve(t0, {0.4});
  c.h = 0.2;
  const double u = 0.4;
  const ParamLayout L(m);
  const Eigen::VectorXd v0 = L.pack(t0);

  auto row_loglik = [&](const Eigen::VectorXd& v, Eigen::Index i) {
    ThetaPoint t = t0;
    L.unpack(v, t);
    const double d = sd.data.u(i) - u;
    const Eigen::VectorXd x = sd.data.X.row(i).transpose(), z = sd.data.Z.row(i).transpose();
    const double eta = (t.beta.row(0) + d * t.beta_slope.row(0)).dot(x);
    const double g = 1.0 / (1.0 + std::exp(-eta));
    double f = 0.0;
    for (int k = 0; k < 2; ++k) {
      const double mean = (t.alpha.row(k) + d * t.alpha_slope.row(k)).dot(z);
      const double sdev = std::exp(t.log_delta(k) + d * t.log_delta_slope(k));
      const double r = (sd.data.y(i) - mean) / sdev;
      f += (k == 0 ? g : 1.0 - g) * std::exp(-0.5 * r * r) / (sdev * std::sqrt(2.0 * std::numbers::pi));
    }
    return std::log(f);
  };
  std::vector<Eigen::Index> rows;
  std::vector<double> w;
  for (Eigen::Index i = 0; i < sd.data.size(); ++i) {
    const double q = (sd.data.u(i) - u) / c.h;
    if (std::abs(q) < 1.0) {
      rows.push_back(i);
      w.push_back(0.75 * (1 - q * q) / c.h);
    }
  }
  const int P = L.size();
  const double e = 1e-4;
  auto grad = [&](const Eigen::VectorXd& v, Eigen::Index i) {
    Eigen::VectorXd gr(P);
    for (int a = 0; a < P; ++a) {
      Eigen::VectorXd vp = v, vm = v;
      vp(a) += e;
      vm(a) -= e;
      gr(a) = (row_loglik(vp, i) - row_loglik(vm, i)) / (2 * e);
    }
    return gr;
  };
  Eigen::MatrixXd Bfd = Eigen::MatrixXd::Zero(P, P);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const Eigen::VectorXd s = grad(v0, rows[r]);
    Bfd += w[r] * w[r] * s * s.transpose();
  }
  auto total_grad = [&](const Eigen::VectorXd& v) {
    Eigen::VectorXd gr = Eigen::VectorXd::Zero(P);
    for (std::size_t r = 0; r < rows.size(); ++r) gr += w[r] * grad(v, rows[r]);
    return gr;
  };
  Eigen::MatrixXd Afd(P, P);
  for (int a = 0; a < P; ++a) {
    Eigen::VectorXd vp = v0, vm = v0;
    vp(a) += e;
    vm(a) -= e;
    Afd.col(a) = -(total_grad(vp) - total_grad(vm)) / (2 * e);
  }
  const LocalInformation info = local_information(m, c, sd.data, u);
  EXPECT_LT((info.A - Afd).cwiseAbs().maxCoeff(), 2e-3 * Afd.cwiseAbs().maxCoeff());
  EXPECT_LT((info.B - Bfd).cwiseAbs().maxCoeff(), 1e-6 * Bfd.cwiseAbs().maxCoeff());
}

TEST(Sandwich, SymmetricWithPositiveInteriorVariances) {
  const auto sd = generate(sim1, 500, 7);
  const ModelSpec m = scenario_model(sim1);
  const ThetaCurve fit = fit_vcmoe(m, sd.data, quick(0.21));
  const CovCurve cov = covariance_curve(m, fit, sd.data);
  for (std::size_t j = 0; j < cov.nodes.size(); ++j) {
    const auto& C = cov.nodes[j].cov;
    EXPECT_LT((C - C.transpose()).cwiseAbs().maxCoeff(), 1e-10);
    EXPECT_GE(Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(C).eigenvalues().minCoeff(), -1e-8 * C.norm());
    if (fit.grid[j] > 0.2 && fit.grid[j] < 0.8)
      for (const auto& id : m.coefficients()) EXPECT_GT(cov.nodes[j].variance(m, fit.points[j], id), 0.0);
  }
}

TEST(Sandwich, ChecksInputs) {
  const auto sd = generate(sim1, 100, 7);
  const ModelSpec m = scenario_model(sim1);
  ThetaCurve c = testutil::flat_curve(truth_point(sim1, 0.5));
  c.h = 0.3;
  Dataset far = sd.data;
  far.u *= 0.1;
  c.h = 0.01;
  EXPECT_EQ(code_of([&] { sandwich_cov(m, c, far, 0.9); }), ErrorCode::NoEffectiveSamples);
}

TEST(Sandwich, ConstantCoefficientHasNoVariance) {
  ModelSpec m;
  m.constant_mask.push_back(CoefficientId{});
  NodeCovariance nc;
  nc.index = free_indices(m);
  nc.cov = Eigen::MatrixXd::Identity(static_cast<Eigen::Index>(nc.index.size()), static_cast<Eigen::Index>(nc.index.size()));
  EXPECT_EQ(code_of([&] { nc.variance(m, ThetaPoint::zero(m), CoefficientId{}); }), ErrorCode::InvalidArgument);
  // delta method for the dispersion
  const CoefficientId d1{CoefficientId::Kind::Delta, 0, 0};
  ThetaPoint t = ThetaPoint::zero(m);
  t.log_delta(0) = std::log(2.0);
  EXPECT_NEAR(nc.variance(m, t, d1), 4.0, 1e-12);
}

namespace {

ThetaCurve curve_of(const std::function<double(double)>& f, double h, int nodes = 101) {
  ModelSpec m;
  ThetaCurve c;
  c.grid = equispaced_grid(nodes);
  c.h = h;
  for (double u : c.grid) {
    ThetaPoint t = ThetaPoint::zero(m);
    t.beta(0, 0) = f(u);
    c.points.push_back(t);
  }
  return c;
}

}  // namespace

TEST(Bias, LinearCurveHasNoBias) {
  const ThetaCurve c = curve_of([](double u) { return 2.0 + 3.0 * u; }, 0.2);
  for (double u : {0.0, 0.3, 0.5, 1.0}) {
    const double b = estimate_bias(ModelSpec{}, c, u, 0.4)(0);
    EXPECT_LT(std::abs(b), 0.05 * std::abs(2.0 + 3.0 * u));
    EXPECT_NEAR(b, 0.0, 1e-10);
  }
}

TEST(Bias, CubicCurveIsExact) {
  // local cubic pilot reproduces a cubic, so the bias is h^2 int u^2K theta''/2 exactly
  const ThetaCurve c = curve_of([](double u) { return u * u * u - u * u; }, 0.2);
  for (double u : {0.0, 0.35, 0.5, 1.0})
    EXPECT_NEAR(estimate_bias(ModelSpec{}, c, u, 0.4)(0), 0.5 * 0.04 * 0.2 * (6 * u - 2), 1e-10);
}

TEST(Bias, CosineCurvatureExample) {
  const double expected = 0.5 * 0.04 * (-4 * std::numbers::pi * std::numbers::pi) * 0.2;
  EXPECT_NEAR(expected, -0.1579, 5e-5);
  // pilot smoothing of cos(2 pi u) is itself biased, so shrink everything and rescale by h^2:
  // fit at h = 0.05 with a 0.06 pilot on a fine grid, report the h = 0.2 equivalent
  ThetaCurve c = curve_of([](double u) { return std::cos(2 * std::numbers::pi * u); }, 0.05);
  c.grid = equispaced_grid(401);
  c.points.clear();
  for (double u : c.grid) {
    ThetaPoint t = ThetaPoint::zero(ModelSpec{});
    t.beta(0, 0) = std::cos(2 * std::numbers::pi * u);
    c.points.push_back(t);
  }
  const double scale = 16.0;
  EXPECT_NEAR(scale * estimate_bias(ModelSpec{}, c, 0.0, 0.06)(0), expected, 0.003);
  EXPECT_NEAR(scale * estimate_bias(ModelSpec{}, c, 0.5, 0.06)(0), -expected, 0.003);
  // and the error shrinks with the pilot
  const double wide = std::abs(scale * estimate_bias(ModelSpec{}, c, 0.5, 0.12)(0) + expected);
  EXPECT_LT(std::abs(scale * estimate_bias(ModelSpec{}, c, 0.5, 0.06)(0) + expected), wide);
}

TEST(Bias, UndersmoothIsZeroAndPilotChecked) {
  const ThetaCurve c = curve_of([](double u) { return u * u; }, 0.2);
  EXPECT_TRUE(estimate_bias(ModelSpec{}, c, 0.5, 0.0, BiasMode::Undersmooth).isZero(0.0));
  EXPECT_EQ(code_of([&] { estimate_bias(ModelSpec{}, c, 0.5, 0.2); }), ErrorCode::PilotTooSmall);
  EXPECT_EQ(code_of([&] { estimate_bias(ModelSpec{}, curve_of([](double u) { return u; }, 0.2, 3), 0.5, 0.4); }),
            ErrorCode::InsufficientData);
}

TEST(AsymptoticBand, SymmetricWithWidthTwoDelta) {
  const auto sd = generate(sim1, 400, 11);
  const ModelSpec m = scenario_model(sim1);
  const ThetaCurve fit = fit_vcmoe(m, sd.data, quick(0.2));
  const CovCurve cov = covariance_curve(m, fit, sd.data, BiasMode::Estimated, 0.4);
  const auto var = cov.variance(m, fit, alpha10);
  for (bool debias : {false, true}) {
    const BandResult b = asymptotic_band(m, fit, cov, alpha10, 0.95, debias);
    EXPECT_EQ(b.name, "alpha10");
    const double crit = gumbel_critical(0.2, 0.95);
    EXPECT_DOUBLE_EQ(b.critical_value, crit);
    for (std::size_t j = 0; j < b.grid.size(); ++j) {
      EXPECT_NEAR(b.upper[j] - b.lower[j], 2 * crit * std::sqrt(var[j]), 1e-12);
      EXPECT_NEAR(0.5 * (b.upper[j] + b.lower[j]), b.estimate[j], 1e-12);
    }
  }
  ThetaCurve wide = fit;
  wide.h = 1.0;
  EXPECT_EQ(code_of([&] { asymptotic_band(m, wide, sd.data, alpha10, 0.95, false); }), ErrorCode::BandwidthGeqOne);
}

TEST(BootstrapBand, TooFewReplicates) {
  const auto sd = generate(sim1, 100, 1);
  const ModelSpec m = scenario_model(sim1);
  ThetaCurve c = testutil::flat_curve(truth_point(sim1, 0.5), equispaced_grid(21));
  c.h = 0.3;
  BootstrapOptions o;
  o.M1 = 0;
  EXPECT_EQ(code_of([&] { bootstrap_band(m, c, sd.data, quick(), delta1, 0.95, o); }), ErrorCode::TooFewReplicates);
  o.M1 = 200;
  o.M2 = 49;
  EXPECT_EQ(code_of([&] { bootstrap_band(m, c, sd.data, quick(), delta1, 0.95, o); }), ErrorCode::TooFewReplicates);
}

TEST(BootstrapBand, CriticalValuesMonotoneAndDeterministic) {
  const auto sd = generate(sim1, 300, 13);
  const ModelSpec m = scenario_model(sim1);
  FitConfig cfg = quick(0.3);
  cfg.max_iter = 30;
  const ThetaCurve fit = fit_vcmoe(m, sd.data, cfg);
  BootstrapOptions o;
  o.M1 = 50;
  o.M2 = 50;
  o.seed = 5;
  const auto bands = bootstrap_bands(m, fit, sd.data, cfg, {alpha10}, {0.99, 0.95, 0.9}, o);
  ASSERT_EQ(bands.size(), 3u);
  EXPECT_GE(bands[0].critical_value, bands[1].critical_value);
  EXPECT_GE(bands[1].critical_value, bands[2].critical_value);
  EXPECT_EQ(bands[0].replicates_used + bands[0].replicates_skipped, 50);
  for (std::size_t j = 0; j < bands[1].grid.size(); ++j) EXPECT_LE(bands[1].lower[j], bands[1].upper[j]);
  o.threads = 3;
  const auto again = bootstrap_bands(m, fit, sd.data, cfg, {alpha10}, {0.95}, o);
  EXPECT_EQ(again[0].critical_value, bands[1].critical_value);
  EXPECT_EQ(again[0].lower, bands[1].lower);
}

TEST(Quantile, TypeSevenInterpolation) {
  EXPECT_DOUBLE_EQ(detail::quantile({1, 2, 3, 4, 5}, 0.5), 3.0);
  EXPECT_DOUBLE_EQ(detail::quantile({1, 2, 3, 4}, 0.5), 2.5);
  EXPECT_DOUBLE_EQ(detail::quantile({4, 1, 3, 2}, 1.0), 4.0);
}

TEST(ConstancyTest, BootstrapPValueIsExceedanceFraction) {
  Scenario s{ScenarioId::Sim1, std::vector<double>{-0.5, 1.0}};
  const auto sd = generate(s, 300, 17);
  const ModelSpec m = scenario_model(s);
  FitConfig cfg = quick(0.3);
  cfg.max_iter = 30;
  BootstrapOptions o;
  o.M1 = 50;
  o.M2 = 50;
  o.seed = 3;
  const TestResult a = test_constancy_bootstrap(m, sd.data, cfg, beta1, 0.95, o);
  ASSERT_TRUE(a.p_value.has_value());
  EXPECT_GE(*a.p_value, 0.0);
  EXPECT_LE(*a.p_value, 1.0);
  EXPECT_EQ(a.reject, a.statistic > a.reference_value);
  // p is k / used for an integer k
  const double k = *a.p_value * a.replicates_used;
  EXPECT_NEAR(k, std::round(k), 1e-9);
  const TestResult b = test_constancy_bootstrap(m, sd.data, cfg, beta1, 0.95, o);
  EXPECT_EQ(a.statistic, b.statistic);
  EXPECT_EQ(*a.p_value, *b.p_value);
}

TEST(ConstancyTest, AsymptoticReportsGumbelReference) {
  const auto sd = generate(sim1, 400, 19);
  const ModelSpec m = scenario_model(sim1);
  const TestResult r = test_constancy_asymptotic(m, sd.data, quick(0.25), beta1);
  EXPECT_EQ(r.reference, ReferenceKind::GumbelCritical);
  EXPECT_DOUBLE_EQ(r.reference_value, gumbel_critical(0.25, 0.95));
  EXPECT_GE(r.statistic, 0.0);
  EXPECT_EQ(r.reject, r.statistic > r.reference_value);
  EXPECT_FALSE(r.p_value.has_value());
}

TEST(Glrt, DegreesOfFreedomExample) {
  const KernelConstants kc = kernel::constants(KernelSpec{});
  EXPECT_NEAR(glrt_dof(ModelSpec{}, 2, 0.1), 18.0 * kc.lr_scale, 1e-10);
  EXPECT_NEAR(chi_square_sf(0.0, 3.0), 1.0, 0.0);
  EXPECT_NEAR(chi_square_sf(3.841458820694124, 1.0), 0.05, 1e-10);
  EXPECT_EQ(code_of([] { chi_square_sf(1.0, 0.0); }), ErrorCode::InvalidArgument);
}

TEST(Glrt, StatisticIsNonNegative) {
  Scenario s{ScenarioId::Sim1, std::vector<double>{-1.0, 1.0}};
  const ModelSpec m = scenario_model(s);
  const std::vector<CoefficientId> null_set{CoefficientId{}, beta1};
  for (std::uint64_t seed : {1u, 2u}) {
    const auto sd = generate(s, 300, seed);
    const TestResult r = test_constancy_glrt(m, sd.data, quick(0.25), null_set);
    EXPECT_GE(r.lambda, 0.0);
    EXPECT_NEAR(r.statistic, kernel::constants(KernelSpec{}).lr_scale * r.lambda, 1e-12);
    EXPECT_EQ(r.reference, ReferenceKind::ChiSquare);
    EXPECT_NEAR(r.reference_value, glrt_dof(m, 2, 0.25), 1e-12);
    ASSERT_TRUE(r.p_value.has_value());
    EXPECT_GE(*r.p_value, 0.0);
    EXPECT_LE(*r.p_value, 1.0);
  }
  EXPECT_EQ(code_of([&] { test_constancy_glrt(m, generate(s, 50, 1).data, quick(), {}); }),
            ErrorCode::InvalidArgument);
}
