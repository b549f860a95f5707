#pragma once

#include "vcmoe/dataset.hpp"
#include "vcmoe/error.hpp"
#include "vcmoe/fit.hpp"
#include "vcmoe/kernel.hpp"
#include "vcmoe/model.hpp"
#include "vcmoe/parallel.hpp"
#include "vcmoe/random.hpp"

#include <Eigen/Dense>
#include <boost/math/special_functions/gamma.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace vcmoe {

// ---------------------------------------------------------------------------
// Sandwich covariance of the local estimates.
// ---------------------------------------------------------------------------

//! Covariance of the free local parameters at one index value.
struct NodeCovariance {
  double u = 0.0;
  Eigen::MatrixXd cov;
  std::vector<int> index;       // positions in the full local vector (ParamLayout)
  bool pseudo_inverse = false;  // the local information matrix was singular
  bool indefinite = false;      // it had negative eigenvalues (absolute values used)
  int clipped = 0;              // negative eigenvalues set to zero

  //! Variance of a coefficient value on its natural scale (delta by the
  //! delta method from log delta).
  double variance(const ModelSpec& spec, const ThetaPoint& at, const CoefficientId& id) const {
    const int pos = ParamLayout(spec).position(id).first;
    const auto it = std::find(index.begin(), index.end(), pos);
    if (it == index.end()) fail(ErrorCode::InvalidArgument, "coefficient is held constant");
    const auto k = static_cast<Eigen::Index>(it - index.begin());
    const double v = cov(k, k);
    if (id.kind == CoefficientId::Kind::Delta) {
      const double d = at.value(id);
      return d * d * v;
    }
    return v;
  }
};

namespace detail {

//! Gradient and Hessian of log(pi_c * phi_c) for one observation with respect
//! to the full local vector. `vx`, `vz` are the expanded covariate rows.
inline void complete_data_derivatives(const ModelSpec& spec, const ParamLayout& layout,
                                      const Eigen::VectorXd& pi, const ThetaPoint& at, int c,
                                      const Eigen::VectorXd& vx, const Eigen::VectorXd& vz,
                                      double y, double d, Eigen::VectorXd& g, Eigen::MatrixXd& H) {
  const int P = layout.size();
  const int C = spec.n_components;
  const auto qx = vx.size();
  const auto qz = vz.size();
  g.setZero(P);
  H.setZero(P, P);
  for (int k = 0; k < C - 1; ++k) {
    const int ok = layout.block_offset(0) + k * static_cast<int>(qx);
    g.segment(ok, qx) = ((c == k ? 1.0 : 0.0) - pi(k)) * vx;
    for (int l = 0; l < C - 1; ++l) {
      const int ol = layout.block_offset(0) + l * static_cast<int>(qx);
      const double coef = -((k == l ? pi(k) : 0.0) - pi(k) * pi(l));
      H.block(ok, ol, qx, qx) = coef * vx * vx.transpose();
    }
  }
  const int oe = layout.block_offset(c + 1);
  const double eta = at.alpha.row(c).dot(vz.head(spec.p_z));
  if (spec.expert == ExpertFamily::Gaussian) {
    const double s = at.log_delta(c);
    const double iv = std::exp(-2.0 * s);
    const double r = y - eta;
    Eigen::VectorXd sv(2);
    sv << 1.0, d;
    g.segment(oe, qz) = r * iv * vz;
    g.segment(oe + qz, 2) = (r * r * iv - 1.0) * sv;
    H.block(oe, oe, qz, qz) = -iv * vz * vz.transpose();
    const Eigen::MatrixXd as = -2.0 * r * iv * vz * sv.transpose();
    H.block(oe, oe + qz, qz, 2) = as;
    H.block(oe + qz, oe, 2, qz) = as.transpose();
    H.block(oe + qz, oe + qz, 2, 2) = -2.0 * r * r * iv * sv * sv.transpose();
  } else {
    const double N = spec.trials;
    const double p = 1.0 / (1.0 + std::exp(-eta));
    g.segment(oe, qz) = (y - N * p) * vz;
    H.block(oe, oe, qz, qz) = -N * p * (1.0 - p) * vz * vz.transpose();
  }
}

}  // namespace detail

//! Sandwich of the local mixture log-likelihood sum_i w_i log f(y_i | theta
//! expanded at U_i). With posteriors p_ic at the local expansion, the score is
//! s_i = sum_c p_ic g_ic and the Hessian sum_c p_ic (H_ic + g_ic g_ic^T) - s_i s_i^T,
//! g_ic and H_ic being the derivatives of log(pi_c phi_c). A = -sum_i w_i Hess_i,
//! B = sum_i w_i^2 s_i s_i^T, Cov = A^-1 B A^-1 over the free local parameters.
//! The grid fit shares one E-step across nodes, so A can be indefinite at a
//! node; its eigenvalues are then replaced by their absolute values (flagged).
struct LocalInformation {
  Eigen::MatrixXd A;  // bread, full layout
  Eigen::MatrixXd B;  // meat
};

inline LocalInformation local_information(const ModelSpec& spec, const ThetaCurve& curve, const Dataset& data,
                                          double u, const KernelSpec& kernel = {}) {
  const double h = curve.h;
  const LocalDesign ld = make_local_design(spec, data, kernel, u, h);
  if (ld.size() == 0) fail(ErrorCode::NoEffectiveSamples, "no observation has positive kernel weight");
  const ThetaPoint theta = evaluate_curve(curve, u);
  const ParamLayout layout(spec);
  const int P = layout.size();
  const int C = spec.n_components;
  Eigen::MatrixXd A = Eigen::MatrixXd::Zero(P, P);
  Eigen::MatrixXd B = Eigen::MatrixXd::Zero(P, P);
  Eigen::VectorXd g;
  Eigen::MatrixXd H;
  Eigen::VectorXd joint(C);
  for (Eigen::Index r = 0; r < ld.size(); ++r) {
    const Eigen::Index i = ld.rows[static_cast<std::size_t>(r)];
    const ThetaPoint at = theta.shifted(ld.d(r));
    const Eigen::VectorXd x = data.X.row(i).transpose();
    const Eigen::VectorXd z = data.Z.row(i).transpose();
    const Eigen::VectorXd pi = gate_probs(spec, at, x);
    const Eigen::VectorXd log_pi = gate_log_probs(spec, at, x);
    for (int c = 0; c < C; ++c) joint(c) = log_pi(c) + expert_log_density(spec, c, at, z, data.y(i));
    Eigen::VectorXd post = (joint.array() - joint.maxCoeff()).exp();
    post /= post.sum();
    Eigen::VectorXd score = Eigen::VectorXd::Zero(P);
    Eigen::MatrixXd hess = Eigen::MatrixXd::Zero(P, P);
    for (int c = 0; c < C; ++c) {
      if (post(c) == 0.0) continue;
      detail::complete_data_derivatives(spec, layout, pi, at, c, ld.vx.row(r).transpose(),
                                        ld.vz.row(r).transpose(), data.y(i), ld.d(r), g, H);
      score += post(c) * g;
      hess += post(c) * (H + g * g.transpose());
    }
    hess -= score * score.transpose();
    A -= ld.w(r) * hess;
    B += ld.w(r) * ld.w(r) * score * score.transpose();
  }
  return {std::move(A), std::move(B)};
}

inline NodeCovariance sandwich_cov(const ModelSpec& spec, const ThetaCurve& curve, const Dataset& data,
                                   double u, const KernelSpec& kernel = {}) {
  const LocalInformation info = local_information(spec, curve, data, u, kernel);
  NodeCovariance out;
  out.u = u;
  out.index = free_indices(spec);
  const Eigen::MatrixXd Af = info.A(out.index, out.index);
  const Eigen::MatrixXd Bf = info.B(out.index, out.index);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> ea(0.5 * (Af + Af.transpose()));
  const Eigen::VectorXd ev = ea.eigenvalues();
  const double cut = 1e-10 * std::max(ev.cwiseAbs().maxCoeff(), std::numeric_limits<double>::min());
  Eigen::VectorXd inv = Eigen::VectorXd::Zero(ev.size());
  for (Eigen::Index k = 0; k < ev.size(); ++k) {
    if (std::abs(ev(k)) <= cut) {
      out.pseudo_inverse = true;
      continue;
    }
    if (ev(k) < 0.0) out.indefinite = true;
    inv(k) = 1.0 / std::abs(ev(k));
  }
  const Eigen::MatrixXd Ainv = ea.eigenvectors() * inv.asDiagonal() * ea.eigenvectors().transpose();
  Eigen::MatrixXd cov = Ainv * Bf * Ainv.transpose();
  cov = 0.5 * (cov + cov.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
  if (es.eigenvalues().minCoeff() < 0.0) {
    Eigen::VectorXd ec = es.eigenvalues();
    for (Eigen::Index k = 0; k < ec.size(); ++k)
      if (ec(k) < 0.0) {
        ec(k) = 0.0;
        ++out.clipped;
      }
    cov = es.eigenvectors() * ec.asDiagonal() * es.eigenvectors().transpose();
    cov = 0.5 * (cov + cov.transpose());
  }
  out.cov = std::move(cov);
  return out;
}

// ---------------------------------------------------------------------------
// Bias.
// ---------------------------------------------------------------------------

enum class BiasMode { Undersmooth, Estimated };

//! (h^2 / 2) theta''(u) moment for one coefficient.
inline double bias_from_curvature(double h, double second_derivative, double moment) {
  return 0.5 * h * h * second_derivative * moment;
}

//! Bias of every coefficient (natural scale, order of spec.coefficients()) at
//! u. The second derivative comes from a kernel-weighted local cubic fit of
//! the grid curve with bandwidth `pilot_h`.
inline Eigen::VectorXd estimate_bias(const ModelSpec& spec, const ThetaCurve& curve, double u,
                                     double pilot_h, BiasMode mode = BiasMode::Estimated,
                                     const KernelSpec& kernel = {}) {
  const auto ids = spec.coefficients();
  Eigen::VectorXd out = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(ids.size()));
  if (mode == BiasMode::Undersmooth) return out;
  if (!(pilot_h > curve.h)) fail(ErrorCode::PilotTooSmall, "pilot bandwidth must exceed the fit bandwidth");
  std::vector<Eigen::Index> nodes;
  for (std::size_t j = 0; j < curve.grid.size(); ++j)
    if (kernel::eval(kernel, (curve.grid[j] - u) / pilot_h) > 0.0) nodes.push_back(static_cast<Eigen::Index>(j));
  if (nodes.size() < 4) fail(ErrorCode::InsufficientData, "local cubic fit needs at least four grid nodes");
  const auto m = static_cast<Eigen::Index>(nodes.size());
  Eigen::MatrixXd D(m, 4);
  Eigen::VectorXd w(m);
  for (Eigen::Index r = 0; r < m; ++r) {
    const double t = curve.grid[static_cast<std::size_t>(nodes[static_cast<std::size_t>(r)])] - u;
    D.row(r) << 1.0, t, t * t, t * t * t;
    w(r) = kernel::eval(kernel, t / pilot_h);
  }
  const Eigen::MatrixXd A = D.transpose() * w.asDiagonal() * D;
  const Eigen::LDLT<Eigen::MatrixXd> ldlt(A);
  const double moment = kernel::constants(kernel).second_moment;
  for (std::size_t k = 0; k < ids.size(); ++k) {
    Eigen::VectorXd v(m);
    for (Eigen::Index r = 0; r < m; ++r)
      v(r) = curve.points[static_cast<std::size_t>(nodes[static_cast<std::size_t>(r)])].value(ids[k]);
    const Eigen::VectorXd coef = ldlt.solve(D.transpose() * (w.array() * v.array()).matrix());
    out(static_cast<Eigen::Index>(k)) = bias_from_curvature(curve.h, 2.0 * coef(2), moment);
  }
  return out;
}

//! Covariance and bias at every grid node.
struct CovCurve {
  std::vector<double> grid;
  std::vector<NodeCovariance> nodes;
  std::vector<Eigen::VectorXd> bias;  // order of spec.coefficients()
  int clip_events = 0;
  int pseudo_inverse_nodes = 0;
  int indefinite_nodes = 0;

  std::vector<double> variance(const ModelSpec& spec, const ThetaCurve& curve, const CoefficientId& id) const {
    std::vector<double> v(grid.size());
    for (std::size_t j = 0; j < grid.size(); ++j) v[j] = nodes[j].variance(spec, curve.points[j], id);
    return v;
  }

  std::vector<double> bias_of(const ModelSpec& spec, const CoefficientId& id) const {
    const auto ids = spec.coefficients();
    const auto k = static_cast<Eigen::Index>(std::find(ids.begin(), ids.end(), id) - ids.begin());
    std::vector<double> b(grid.size());
    for (std::size_t j = 0; j < grid.size(); ++j) b[j] = bias[j](k);
    return b;
  }
};

inline CovCurve covariance_curve(const ModelSpec& spec, const ThetaCurve& curve, const Dataset& data,
                                 BiasMode mode = BiasMode::Undersmooth, double pilot_h = 0.0,
                                 const KernelSpec& kernel = {}) {
  CovCurve out;
  out.grid = curve.grid;
  if (mode == BiasMode::Estimated && pilot_h <= 0.0) pilot_h = 2.0 * curve.h;
  for (double u : curve.grid) {
    out.nodes.push_back(sandwich_cov(spec, curve, data, u, kernel));
    out.clip_events += out.nodes.back().clipped;
    out.pseudo_inverse_nodes += out.nodes.back().pseudo_inverse ? 1 : 0;
    out.indefinite_nodes += out.nodes.back().indefinite ? 1 : 0;
    out.bias.push_back(estimate_bias(spec, curve, u, pilot_h, mode, kernel));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Simultaneous bands.
// ---------------------------------------------------------------------------

//! Location constant of the Gumbel limit for kernels vanishing at their
//! support ends: L + log(int K'^2 / (4 pi int K^2)) / L with L = sqrt(-2 log h).
inline double gumbel_location(double h, const KernelSpec& kernel = {}) {
  if (!(h > 0.0)) fail(ErrorCode::NonPositiveBandwidth, "bandwidth must be positive");
  if (!(h < 1.0)) fail(ErrorCode::BandwidthGeqOne, "band constants need h < 1");
  const KernelConstants kc = kernel::constants(kernel);
  const double L = std::sqrt(-2.0 * std::log(h));
  return L + std::log(kc.deriv_sq_integral / (4.0 * kc.square_integral * std::numbers::pi)) / L;
}

//! log 2 - log(-log(level)), the level-dependent part before scaling.
inline double gumbel_level_term(double level) {
  if (!(level > 0.0 && level < 1.0)) fail(ErrorCode::InvalidArgument, "level must lie in (0, 1)");
  return std::log(2.0) - std::log(-std::log(level));
}

//! Critical value of the standardized sup deviation at confidence `level`.
inline double gumbel_critical(double h, double level, const KernelSpec& kernel = {}) {
  const double d = gumbel_location(h, kernel);
  return d + gumbel_level_term(level) / std::sqrt(-2.0 * std::log(h));
}

enum class BandMethod { Asymptotic, Bootstrap };

inline std::string to_string(BandMethod m) { return m == BandMethod::Asymptotic ? "asymptotic" : "bootstrap"; }

struct BandResult {
  CoefficientId coefficient;
  std::string name;
  std::vector<double> grid;
  std::vector<double> estimate;  // centre of the band (debiased if requested)
  std::vector<double> lower;
  std::vector<double> upper;
  double critical_value = 0.0;
  double level = 0.95;
  BandMethod method = BandMethod::Asymptotic;
  bool debias = false;
  double h_used = 0.0;
  int replicates_used = 0;
  int replicates_skipped = 0;
  // covariance diagnostics, asymptotic bands only
  int clip_events = 0;
  int pseudo_inverse_nodes = 0;
  int indefinite_nodes = 0;

  //! True when truth(u) lies inside the band at every grid node.
  template <class Fn>
  bool covers(Fn&& truth) const {
    for (std::size_t j = 0; j < grid.size(); ++j) {
      const double t = truth(grid[j]);
      if (t < lower[j] || t > upper[j]) return false;
    }
    return true;
  }
};

inline BandResult asymptotic_band(const ModelSpec& spec, const ThetaCurve& curve, const CovCurve& cov,
                                  const CoefficientId& id, double level, bool debias,
                                  const KernelSpec& kernel = {}) {
  spec.check_coefficient(id);
  BandResult b;
  b.coefficient = id;
  b.name = coefficient_name(spec, id);
  b.grid = curve.grid;
  b.level = level;
  b.method = BandMethod::Asymptotic;
  b.debias = debias;
  b.h_used = curve.h;
  b.critical_value = gumbel_critical(curve.h, level, kernel);
  b.clip_events = cov.clip_events;
  b.pseudo_inverse_nodes = cov.pseudo_inverse_nodes;
  b.indefinite_nodes = cov.indefinite_nodes;
  const auto var = cov.variance(spec, curve, id);
  const auto bias = cov.bias_of(spec, id);
  for (std::size_t j = 0; j < curve.grid.size(); ++j) {
    const double centre = curve.points[j].value(id) - (debias ? bias[j] : 0.0);
    const double half = b.critical_value * std::sqrt(std::max(var[j], 0.0));
    b.estimate.push_back(centre);
    b.lower.push_back(centre - half);
    b.upper.push_back(centre + half);
  }
  return b;
}

inline BandResult asymptotic_band(const ModelSpec& spec, const ThetaCurve& curve, const Dataset& data,
                                  const CoefficientId& id, double level, bool debias,
                                  double pilot_h = 0.0, const KernelSpec& kernel = {}) {
  if (!(curve.h < 1.0)) fail(ErrorCode::BandwidthGeqOne, "band constants need h < 1");
  const CovCurve cov = covariance_curve(spec, curve, data, debias ? BiasMode::Estimated : BiasMode::Undersmooth,
                                        pilot_h, kernel);
  return asymptotic_band(spec, curve, cov, id, level, debias, kernel);
}

// ---------------------------------------------------------------------------
// Parametric bootstrap.
// ---------------------------------------------------------------------------

//! Draws responses from the fitted conditional density, covariates and u fixed.
inline Eigen::VectorXd simulate_response(const ModelSpec& spec, const ThetaCurve& curve, const Dataset& data,
                                         std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::VectorXd y(data.size());
  ThetaPoint t = curve.points.front();
  for (Eigen::Index i = 0; i < data.size(); ++i) {
    detail::interpolate_into(curve, detail::bracket(curve.grid, data.u(i)), t, false);
    const Eigen::VectorXd p = gate_probs(spec, t, data.X.row(i).transpose());
    const double draw = unif(rng);
    int c = 0;
    double acc = p(0);
    while (c + 1 < spec.n_components && draw >= acc) acc += p(++c);
    const double eta = t.alpha.row(c).dot(data.Z.row(i));
    if (spec.expert == ExpertFamily::Gaussian) {
      y(i) = eta + std::exp(t.log_delta(c)) * normal(rng);
    } else {
      std::binomial_distribution<int> binom(spec.trials, 1.0 / (1.0 + std::exp(-eta)));
      y(i) = binom(rng);
    }
  }
  return y;
}

struct BootstrapOptions {
  int M1 = 200;  // replicates for the pointwise variance
  int M2 = 200;  // replicates for the sup statistic
  std::uint64_t seed = 1;
  unsigned threads = 1;
};

//! Coefficient curves of bootstrap refits: values[k] is coefficients x grid.
struct BootstrapSample {
  std::vector<Eigen::MatrixXd> values;
  std::vector<char> ok;
  int skipped = 0;
};

inline constexpr std::uint64_t bootstrap_stream = 0xB0075u;

//! `count` parametric bootstrap refits of `fit_spec` from data simulated
//! under `source`. Each refit is warm-started from `source` and uses its own
//! RNG stream derived from (seed, replicate index).
inline BootstrapSample bootstrap_sample(const ModelSpec& source_spec, const ThetaCurve& source,
                                        const ModelSpec& fit_spec, const Dataset& data,
                                        const FitConfig& config, int count, std::uint64_t seed,
                                        unsigned threads) {
  const auto ids = fit_spec.coefficients();
  BootstrapSample out;
  out.values.assign(static_cast<std::size_t>(count), Eigen::MatrixXd());
  out.ok.assign(static_cast<std::size_t>(count), 0);
  FitConfig cfg = config;
  cfg.h = source.h;
  cfg.grid = source.grid;
  if (cfg.init == InitMethod::Provided) cfg.init = InitMethod::QuantileSplit;
  parallel_for(static_cast<std::size_t>(count), threads, [&](std::size_t k) {
    auto rng = make_rng(seed, bootstrap_stream, k);
    Dataset boot = data;
    boot.y = simulate_response(source_spec, source, data, rng);
    try {
      const ThetaCurve fit = fit_vcmoe(fit_spec, boot, cfg, &source);
      Eigen::MatrixXd v(static_cast<Eigen::Index>(ids.size()), static_cast<Eigen::Index>(fit.grid.size()));
      for (std::size_t a = 0; a < ids.size(); ++a)
        for (std::size_t j = 0; j < fit.grid.size(); ++j)
          v(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(j)) = fit.points[j].value(ids[a]);
      out.values[k] = std::move(v);
      out.ok[k] = 1;
    } catch (const Error&) {
      out.ok[k] = 0;
    }
  });
  for (char f : out.ok) out.skipped += f ? 0 : 1;
  if (out.skipped * 10 > count)
    fail(ErrorCode::TooManyFailures, std::to_string(out.skipped) + " of " + std::to_string(count) +
                                         " bootstrap refits failed");
  return out;
}

namespace detail {

//! Type-7 empirical quantile.
inline double quantile(std::vector<double> v, double p) {
  if (v.empty()) fail(ErrorCode::TooFewReplicates, "no replicate available for a quantile");
  std::sort(v.begin(), v.end());
  const double pos = p * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

inline void check_replicates(const BootstrapOptions& o) {
  if (o.M1 < 50 || o.M2 < 50) fail(ErrorCode::TooFewReplicates, "M1 and M2 must be at least 50");
}

//! Pointwise bootstrap standard deviation of coefficient row `a` over the
//! first M1 replicates.
inline std::vector<double> bootstrap_sd(const BootstrapSample& s, Eigen::Index a, int M1, std::size_t G) {
  std::vector<double> mean(G, 0.0), sq(G, 0.0);
  int used = 0;
  for (int k = 0; k < M1 && k < static_cast<int>(s.values.size()); ++k) {
    if (!s.ok[static_cast<std::size_t>(k)]) continue;
    ++used;
    for (std::size_t j = 0; j < G; ++j) {
      const double x = s.values[static_cast<std::size_t>(k)](a, static_cast<Eigen::Index>(j));
      const double d = x - mean[j];
      mean[j] += d / used;
      sq[j] += d * (x - mean[j]);
    }
  }
  if (used < 2) fail(ErrorCode::TooFewReplicates, "fewer than two successful variance replicates");
  std::vector<double> sd(G);
  for (std::size_t j = 0; j < G; ++j) sd[j] = std::sqrt(sq[j] / (used - 1));
  return sd;
}

//! sup_j |values(j) - centre(j)| / sd(j) over nodes with positive sd.
template <class Centre>
double sup_standardized(const std::vector<double>& sd, Centre&& deviation) {
  double t = 0.0;
  for (std::size_t j = 0; j < sd.size(); ++j)
    if (sd[j] > 0.0) t = std::max(t, std::abs(deviation(j)) / sd[j]);
  return t;
}

}  // namespace detail

//! Bootstrap bands for several coefficients and levels from one replicate
//! set of size max(M1, M2): the first M1 replicates estimate the pointwise
//! variance and the first M2 give the sup statistics.
inline std::vector<BandResult> bootstrap_bands(const ModelSpec& spec, const ThetaCurve& curve,
                                               const Dataset& data, const FitConfig& config,
                                               const std::vector<CoefficientId>& targets,
                                               const std::vector<double>& levels,
                                               const BootstrapOptions& opt) {
  detail::check_replicates(opt);
  for (const auto& id : targets) spec.check_coefficient(id);
  const int count = std::max(opt.M1, opt.M2);
  const BootstrapSample s = bootstrap_sample(spec, curve, spec, data, config, count, opt.seed, opt.threads);
  const auto ids = spec.coefficients();
  const std::size_t G = curve.grid.size();
  std::vector<BandResult> out;
  for (const auto& id : targets) {
    const auto a = static_cast<Eigen::Index>(std::find(ids.begin(), ids.end(), id) - ids.begin());
    const auto sd = detail::bootstrap_sd(s, a, opt.M1, G);
    const auto est = curve.coefficient(id);
    std::vector<double> T;
    for (int k = 0; k < opt.M2; ++k) {
      if (!s.ok[static_cast<std::size_t>(k)]) continue;
      const auto& v = s.values[static_cast<std::size_t>(k)];
      T.push_back(detail::sup_standardized(sd, [&](std::size_t j) { return v(a, static_cast<Eigen::Index>(j)) - est[j]; }));
    }
    for (double level : levels) {
      if (!(level > 0.0 && level < 1.0)) fail(ErrorCode::InvalidArgument, "level must lie in (0, 1)");
      BandResult b;
      b.coefficient = id;
      b.name = coefficient_name(spec, id);
      b.grid = curve.grid;
      b.level = level;
      b.method = BandMethod::Bootstrap;
      b.h_used = curve.h;
      b.critical_value = detail::quantile(T, level);
      b.replicates_used = static_cast<int>(T.size());
      b.replicates_skipped = s.skipped;
      b.estimate = est;
      for (std::size_t j = 0; j < G; ++j) {
        b.lower.push_back(est[j] - sd[j] * b.critical_value);
        b.upper.push_back(est[j] + sd[j] * b.critical_value);
      }
      out.push_back(std::move(b));
    }
  }
  return out;
}

inline BandResult bootstrap_band(const ModelSpec& spec, const ThetaCurve& curve, const Dataset& data,
                                 const FitConfig& config, const CoefficientId& id, double level,
                                 const BootstrapOptions& opt) {
  return bootstrap_bands(spec, curve, data, config, {id}, {level}, opt).front();
}

// ---------------------------------------------------------------------------
// Constancy tests.
// ---------------------------------------------------------------------------

enum class TestMethod { Asymptotic, Bootstrap, Glrt };
enum class ReferenceKind { GumbelCritical, BootstrapQuantile, ChiSquare };

inline std::string to_string(TestMethod m) {
  switch (m) {
    case TestMethod::Asymptotic: return "asymptotic";
    case TestMethod::Bootstrap: return "bootstrap";
    case TestMethod::Glrt: return "glrt";
  }
  return {};
}

inline std::string to_string(ReferenceKind r) {
  switch (r) {
    case ReferenceKind::GumbelCritical: return "gumbel_critical";
    case ReferenceKind::BootstrapQuantile: return "bootstrap_quantile";
    case ReferenceKind::ChiSquare: return "chi_square";
  }
  return {};
}

struct TestResult {
  std::vector<CoefficientId> null_set;
  std::vector<std::string> names;
  TestMethod method = TestMethod::Asymptotic;
  double statistic = 0.0;
  ReferenceKind reference = ReferenceKind::GumbelCritical;
  double reference_value = 0.0;  // critical value, or chi-square dof
  std::optional<double> p_value;
  double level = 0.95;
  bool reject = false;
  std::vector<std::pair<CoefficientId, double>> constants;
  double log_lik_null = 0.0;  // GLRT only
  double log_lik_alt = 0.0;
  double lambda = 0.0;  // raw log-likelihood ratio (GLRT)
  double h = 0.0;
  int replicates_used = 0;
  int replicates_skipped = 0;
};

namespace detail {

inline ModelSpec without_targets(const ModelSpec& spec, const std::vector<CoefficientId>& targets) {
  ModelSpec s = spec;
  std::erase_if(s.constant_mask, [&](const CoefficientId& id) {
    return std::find(targets.begin(), targets.end(), id) != targets.end();
  });
  return s;
}

inline ModelSpec with_targets(const ModelSpec& spec, const std::vector<CoefficientId>& targets) {
  ModelSpec s = without_targets(spec, targets);
  for (const auto& id : targets) s.constant_mask.push_back(id);
  return s;
}

inline TestResult test_header(const ModelSpec& spec, const std::vector<CoefficientId>& ids, TestMethod m,
                              double level, double h) {
  TestResult r;
  r.null_set = ids;
  for (const auto& id : ids) r.names.push_back(coefficient_name(spec, id));
  r.method = m;
  r.level = level;
  r.h = h;
  return r;
}

}  // namespace detail

//! Sup of the standardized distance between the functional estimate and the
//! constant estimate, compared with the Gumbel critical value.
inline TestResult test_constancy_asymptotic(const ModelSpec& spec, const Dataset& data, const FitConfig& config,
                                            const CoefficientId& id, double level = 0.95,
                                            bool debias = false, double pilot_h = 0.0) {
  spec.check_coefficient(id);
  const ModelSpec free_spec = detail::without_targets(spec, {id});
  const ThetaCurve functional = fit_vcmoe(free_spec, data, config);
  const ConstantFit cf = fit_constant(spec, data, config, {id}, &functional);
  const double constant = cf.estimates.front().second;
  const CovCurve cov = covariance_curve(free_spec, functional, data,
                                        debias ? BiasMode::Estimated : BiasMode::Undersmooth, pilot_h, config.kernel);
  const auto var = cov.variance(free_spec, functional, id);
  const auto bias = cov.bias_of(free_spec, id);
  const auto est = functional.coefficient(id);
  double stat = 0.0;
  for (std::size_t j = 0; j < est.size(); ++j)
    if (var[j] > 0.0) stat = std::max(stat, std::abs(est[j] - constant - bias[j]) / std::sqrt(var[j]));
  TestResult r = detail::test_header(spec, {id}, TestMethod::Asymptotic, level, config.h);
  r.statistic = stat;
  r.reference = ReferenceKind::GumbelCritical;
  r.reference_value = gumbel_critical(config.h, level, config.kernel);
  r.reject = stat > r.reference_value;
  r.constants = cf.estimates;
  return r;
}

//! Bootstrap under the null: responses are drawn from the constrained fit,
//! the coefficient is re-estimated as a function, and the observed sup
//! distance is referred to the bootstrap distribution.
inline TestResult test_constancy_bootstrap(const ModelSpec& spec, const Dataset& data, const FitConfig& config,
                                           const CoefficientId& id, double level, const BootstrapOptions& opt) {
  detail::check_replicates(opt);
  spec.check_coefficient(id);
  const ModelSpec free_spec = detail::without_targets(spec, {id});
  const ModelSpec null_spec = detail::with_targets(spec, {id});
  const ThetaCurve functional = fit_vcmoe(free_spec, data, config);
  const ConstantFit cf = fit_constant(spec, data, config, {id}, &functional);
  const double constant = cf.estimates.front().second;
  const int count = std::max(opt.M1, opt.M2);
  const BootstrapSample s = bootstrap_sample(null_spec, cf.curve, free_spec, data, config, count, opt.seed, opt.threads);
  const auto ids = free_spec.coefficients();
  const auto a = static_cast<Eigen::Index>(std::find(ids.begin(), ids.end(), id) - ids.begin());
  const std::size_t G = functional.grid.size();
  const auto sd = detail::bootstrap_sd(s, a, opt.M1, G);
  std::vector<double> T;
  for (int k = 0; k < opt.M2; ++k) {
    if (!s.ok[static_cast<std::size_t>(k)]) continue;
    const auto& v = s.values[static_cast<std::size_t>(k)];
    T.push_back(detail::sup_standardized(sd, [&](std::size_t j) { return v(a, static_cast<Eigen::Index>(j)) - constant; }));
  }
  const auto est = functional.coefficient(id);
  const double stat = detail::sup_standardized(sd, [&](std::size_t j) { return est[j] - constant; });
  TestResult r = detail::test_header(spec, {id}, TestMethod::Bootstrap, level, config.h);
  r.statistic = stat;
  r.reference = ReferenceKind::BootstrapQuantile;
  r.reference_value = detail::quantile(T, level);
  r.reject = stat > r.reference_value;
  const auto exceed = std::count_if(T.begin(), T.end(), [&](double t) { return t >= stat; });
  r.p_value = static_cast<double>(exceed) / static_cast<double>(T.size());
  r.constants = cf.estimates;
  r.replicates_used = static_cast<int>(T.size());
  r.replicates_skipped = s.skipped;
  return r;
}

//! Degrees of freedom lr_scale * p * C * (K(0) - int K^2 / 2) / h of the rescaled
//! likelihood-ratio statistic, p being the number of tested functions.
inline double glrt_dof(const ModelSpec& spec, std::size_t tested, double h, const KernelSpec& kernel = {}) {
  if (!(h > 0.0)) fail(ErrorCode::NonPositiveBandwidth, "bandwidth must be positive");
  const KernelConstants kc = kernel::constants(kernel);
  return kc.lr_scale * static_cast<double>(tested) * spec.n_components * (kc.at_zero - 0.5 * kc.square_integral) / h;
}

//! Survival function of the Gamma(dof / 2, scale 2) law at x.
inline double chi_square_sf(double x, double dof) {
  if (!(dof > 0.0)) fail(ErrorCode::InvalidArgument, "degrees of freedom must be positive");
  if (x <= 0.0) return 1.0;
  return boost::math::gamma_q(0.5 * dof, 0.5 * x);
}

//! Likelihood ratio of the functional fit against the fit with the listed
//! coefficients constant. The alternative starts from the null solution.
inline TestResult test_constancy_glrt(const ModelSpec& spec, const Dataset& data, const FitConfig& config,
                                      const std::vector<CoefficientId>& targets, double level = 0.95) {
  if (targets.empty()) fail(ErrorCode::InvalidArgument, "empty null set");
  for (const auto& id : targets) spec.check_coefficient(id);
  const ModelSpec free_spec = detail::without_targets(spec, targets);
  const ModelSpec null_spec = detail::with_targets(spec, targets);
  const ConstantFit cf = fit_constant(spec, data, config, targets);
  FitConfig alt_cfg = config;
  if (alt_cfg.init == InitMethod::Provided) alt_cfg.init = InitMethod::QuantileSplit;
  const ThetaCurve alt = fit_vcmoe(free_spec, data, alt_cfg, &cf.curve);
  TestResult r = detail::test_header(spec, targets, TestMethod::Glrt, level, config.h);
  r.log_lik_null = log_likelihood(null_spec, cf.curve, data);
  r.log_lik_alt = log_likelihood(free_spec, alt, data);
  r.lambda = r.log_lik_alt - r.log_lik_null;
  const KernelConstants kc = kernel::constants(config.kernel);
  r.statistic = kc.lr_scale * r.lambda;
  r.reference = ReferenceKind::ChiSquare;
  r.reference_value = glrt_dof(spec, targets.size(), config.h, config.kernel);
  r.p_value = chi_square_sf(r.statistic, r.reference_value);
  r.reject = *r.p_value < 1.0 - level;
  r.constants = cf.estimates;
  return r;
}

}  // namespace vcmoe
