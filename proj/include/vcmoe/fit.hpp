#pragma once

#include "vcmoe/dataset.hpp"
#include "vcmoe/error.hpp"
#include "vcmoe/kernel.hpp"
#include "vcmoe/model.hpp"
#include "vcmoe/random.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <vector>

namespace vcmoe {

enum class InitMethod { Random, QuantileSplit, Provided };

//! How EM decides it has converged.
enum class ConvergenceRule {
  MeanLogDensity,  // relative change of n^-1 sum_i log f(y_i | theta(u_i)) below tol
  CoefficientSum,  // summed absolute change of all coefficient curves below tol
};

struct FitConfig {
  double h = 0.2;
  std::vector<double> grid;  // empty means 100 equispaced points on [0, 1]
  int max_iter = 200;
  double tol = 1e-6;
  ConvergenceRule rule = ConvergenceRule::MeanLogDensity;
  InitMethod init = InitMethod::QuantileSplit;
  Responsibilities provided;  // used when init == Provided
  std::uint64_t seed = 1;
  KernelSpec kernel{};
  int newton_max_iter = 50;
  double newton_grad_tol = 1e-8;
  double max_damping = 1e6;
  double min_delta = 1e-4;  // degenerate-component guard
  int starts = 1;  // extra starts use random responsibilities; the best final log-likelihood wins
};

inline std::vector<double> equispaced_grid(int count) {
  std::vector<double> g(static_cast<std::size_t>(count));
  for (int j = 0; j < count; ++j) g[static_cast<std::size_t>(j)] = count == 1 ? 0.5 : double(j) / (count - 1);
  return g;
}

//! Grid-indexed local estimates produced by the label-consistent EM.
struct ThetaCurve {
  std::vector<double> grid;
  std::vector<ThetaPoint> points;
  Responsibilities responsibilities;
  std::vector<double> loglik_trace;  // mean log density after each M-step
  bool converged = false;
  int n_iter = 0;
  double h = 0.0;
  int degenerate_events = 0;  // node/component freezes by the degeneracy guard
  double max_damping_used = 0.0;
  std::vector<std::pair<CoefficientId, double>> constants;  // estimates of masked coefficients

  std::size_t size() const { return grid.size(); }

  std::vector<double> coefficient(const CoefficientId& id) const {
    std::vector<double> v(points.size());
    for (std::size_t j = 0; j < points.size(); ++j) v[j] = points[j].value(id);
    return v;
  }
};

namespace detail {

//! Bracketing node and weight of the right node for linear interpolation.
struct Bracket {
  std::size_t left = 0;
  double frac = 0.0;
};

inline Bracket bracket(const std::vector<double>& grid, double u) {
  if (grid.size() == 1 || u <= grid.front()) return {0, 0.0};
  if (u >= grid.back()) return {grid.size() - 1, 0.0};
  const auto it = std::upper_bound(grid.begin(), grid.end(), u);
  const std::size_t right = static_cast<std::size_t>(it - grid.begin());
  const std::size_t left = right - 1;
  return {left, (u - grid[left]) / (grid[right] - grid[left])};
}

inline void interpolate_into(const ThetaCurve& curve, const Bracket& b, ThetaPoint& out,
                             bool with_slopes) {
  const ThetaPoint& l = curve.points[b.left];
  if (b.frac == 0.0) {
    out.beta = l.beta;
    out.alpha = l.alpha;
    out.log_delta = l.log_delta;
    if (with_slopes) {
      out.beta_slope = l.beta_slope;
      out.alpha_slope = l.alpha_slope;
      out.log_delta_slope = l.log_delta_slope;
    }
    return;
  }
  const ThetaPoint& r = curve.points[b.left + 1];
  const double f = b.frac;
  out.beta = (1 - f) * l.beta + f * r.beta;
  out.alpha = (1 - f) * l.alpha + f * r.alpha;
  out.log_delta = (1 - f) * l.log_delta + f * r.log_delta;
  if (with_slopes) {
    out.beta_slope = (1 - f) * l.beta_slope + f * r.beta_slope;
    out.alpha_slope = (1 - f) * l.alpha_slope + f * r.alpha_slope;
    out.log_delta_slope = (1 - f) * l.log_delta_slope + f * r.log_delta_slope;
  }
}

}  // namespace detail

//! Piecewise-linear interpolation between grid nodes, exact at nodes. Queries
//! outside the grid hull but inside [0, 1] take the nearest end node.
inline ThetaPoint evaluate_curve(const ThetaCurve& curve, double u) {
  if (!(u >= 0.0 && u <= 1.0)) fail(ErrorCode::OutOfDomain, "query outside [0, 1]");
  if (curve.points.empty()) fail(ErrorCode::InvalidArgument, "empty curve");
  ThetaPoint out = curve.points.front();
  detail::interpolate_into(curve, detail::bracket(curve.grid, u), out, true);
  return out;
}

//! Posterior component probabilities and the mean log mixture density.
struct EStepResult {
  Responsibilities gamma;
  double mean_log_density = 0.0;
};

inline EStepResult e_step_with_density(const ModelSpec& spec, const ThetaCurve& curve,
                                       const Dataset& data) {
  const Eigen::Index n = data.size();
  const int C = spec.n_components;
  EStepResult out;
  out.gamma.resize(n, C);
  ThetaPoint t = curve.points.front();
  double total = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    detail::interpolate_into(curve, detail::bracket(curve.grid, data.u(i)), t, false);
    const Eigen::VectorXd logpi = gate_log_probs(spec, t, data.X.row(i).transpose());
    Eigen::VectorXd terms = logpi;
    for (int c = 0; c < C; ++c)
      terms(c) += expert_log_density(spec, c, t, data.Z.row(i).transpose(), data.y(i));
    const double lse = detail::log_sum_exp(terms);
    if (!std::isfinite(lse)) {
      // every component density underflowed: fall back to the gate
      out.gamma.row(i) = logpi.array().exp().transpose();
      total += lse;
      continue;
    }
    out.gamma.row(i) = (terms.array() - lse).exp().transpose();
    out.gamma.row(i) /= out.gamma.row(i).sum();
    total += lse;
  }
  out.mean_log_density = total / static_cast<double>(n);
  return out;
}

inline Responsibilities e_step(const ModelSpec& spec, const ThetaCurve& curve, const Dataset& data) {
  return e_step_with_density(spec, curve, data).gamma;
}

//! sum_i log f(y_i | x_i, z_i, theta(u_i)) with theta interpolated from the grid.
inline double log_likelihood(const ModelSpec& spec, const ThetaCurve& curve, const Dataset& data) {
  return e_step_with_density(spec, curve, data).mean_log_density * static_cast<double>(data.size());
}

inline Responsibilities init_responsibilities(const ModelSpec& spec, const Dataset& data,
                                              const FitConfig& config) {
  const Eigen::Index n = data.size();
  const int C = spec.n_components;
  Responsibilities g(n, C);
  switch (config.init) {
    case InitMethod::Provided:
      if (config.provided.rows() != n || config.provided.cols() != C)
        fail(ErrorCode::DimensionMismatch, "provided responsibilities have the wrong shape");
      return config.provided;
    case InitMethod::Random: {
      std::mt19937_64 rng(config.seed);
      std::exponential_distribution<double> expo(1.0);
      for (Eigen::Index i = 0; i < n; ++i) {
        for (int c = 0; c < C; ++c) g(i, c) = expo(rng);
        g.row(i) /= g.row(i).sum();
      }
      return g;
    }
    case InitMethod::QuantileSplit: {
      std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
      std::iota(order.begin(), order.end(), Eigen::Index{0});
      std::stable_sort(order.begin(), order.end(),
                       [&](Eigen::Index a, Eigen::Index b) { return data.y(a) < data.y(b); });
      const double other = 0.1 / (C - 1);
      g.setConstant(other);
      for (std::size_t r = 0; r < order.size(); ++r) {
        const int bin = std::min<int>(C - 1, static_cast<int>(r * static_cast<std::size_t>(C) / order.size()));
        g(order[r], bin) = 0.9;
      }
      return g;
    }
  }
  return g;
}

namespace detail {

//! Result of one block's damped Newton solve.
struct BlockSolve {
  Eigen::VectorXd x;
  double value = 0.0;
  double max_damping = 0.0;
  bool saturated = false;  // curvature vanished on a full-rank design
};

//! Kernel-weighted Gram matrix of the covariate columns behind the free
//! entries of a block is numerically nonsingular.
inline bool block_design_full_rank(const ModelSpec& spec, const LocalDesign& ld, int block,
                                   const std::vector<int>& free) {
  const Eigen::MatrixXd& v = block == 0 ? ld.vx : ld.vz;
  const int q = static_cast<int>(v.cols());
  std::vector<int> cols;
  for (int i : free) {
    const int c = block == 0 ? i % q : i;
    if (c < q && std::find(cols.begin(), cols.end(), c) == cols.end()) cols.push_back(c);
  }
  if (cols.empty()) return true;
  const Eigen::MatrixXd G = weighted_gram(v(Eigen::all, cols), ld.w.array());
  const double scale = G.diagonal().cwiseAbs().maxCoeff();
  Eigen::LDLT<Eigen::MatrixXd> ldlt(G);
  return scale > 0.0 && ldlt.vectorD().minCoeff() > 1e-11 * scale;
}

//! Gaussian expert block: with a locally constant dispersion the maximiser is
//! weighted least squares for the mean and the weighted residual variance.
inline BlockSolve gaussian_block_solve(const ModelSpec& spec, const LocalDesign& ld,
                                       const Eigen::MatrixXd& gamma_local, int block,
                                       Eigen::VectorXd x, const std::vector<int>& free) {
  const int q = 2 * spec.p_z;
  const Eigen::ArrayXd omega = ld.w.array() * gamma_local.col(block - 1).array();
  std::vector<int> mean_free;
  bool scale_free = false;
  for (int i : free) {
    if (i < q) mean_free.push_back(i);
    else if (i == q) scale_free = true;
  }
  x(q + 1) = 0.0;
  if (!mean_free.empty()) {
    Eigen::VectorXd target = ld.y;
    for (int i = 0; i < q; ++i)
      if (std::find(mean_free.begin(), mean_free.end(), i) == mean_free.end()) target -= ld.vz.col(i) * x(i);
    const Eigen::MatrixXd V = ld.vz(Eigen::all, mean_free);
    const Eigen::MatrixXd A = weighted_gram(V, omega);
    const Eigen::VectorXd rhs = V.transpose() * (omega * target.array()).matrix();
    Eigen::LDLT<Eigen::MatrixXd> ldlt(A);
    const double scale = A.diagonal().cwiseAbs().maxCoeff();
    if (!(scale > 0.0) || ldlt.vectorD().minCoeff() <= 1e-11 * scale)
      fail(ErrorCode::SingularHessian, "local design is singular at u = " + std::to_string(ld.u));
    const Eigen::VectorXd coef = ldlt.solve(rhs);
    x(mean_free) = coef;
  }
  if (scale_free) {
    const Eigen::ArrayXd r = ld.y - ld.vz * x.head(q);
    const double mass = omega.sum();
    const double var = (omega * r.square()).sum() / mass;
    x(q) = 0.5 * std::log(std::max(var, std::numeric_limits<double>::min()));
  }
  BlockSolve out;
  out.x = x;
  out.value = block_objective(spec, ld, gamma_local, block, x, false).value;
  return out;
}

//! Maximises one separable block of Q over the entries listed in `free`
//! (indices into the block vector). Levenberg shift grows by 10x from 1e-6 to
//! `max_damping`; a Hessian that stays singular raises SingularHessian.
inline BlockSolve maximize_block(const ModelSpec& spec, const LocalDesign& ld,
                                 const Eigen::MatrixXd& gamma_local, int block,
                                 Eigen::VectorXd x, const std::vector<int>& free,
                                 const FitConfig& cfg) {
  if (block > 0 && spec.has_dispersion() && !free.empty())
    return gaussian_block_solve(spec, ld, gamma_local, block, std::move(x), free);
  BlockSolve out;
  if (free.empty()) {
    out.x = x;
    out.value = block_objective(spec, ld, gamma_local, block, x, false).value;
    return out;
  }
  ObjectiveValue f = block_objective(spec, ld, gamma_local, block, x, true);
  for (int it = 0; it < cfg.newton_max_iter; ++it) {
    const Eigen::VectorXd g = f.gradient(free);
    if (g.lpNorm<Eigen::Infinity>() < cfg.newton_grad_tol) break;
    const Eigen::MatrixXd negH = -f.hessian(free, free);
    double lambda = 0.0;
    bool accepted = false;
    bool stalled = false;
    Eigen::VectorXd xn;
    ObjectiveValue trial;
    double fn = 0.0;
    while (true) {
      Eigen::MatrixXd A = negH;
      A.diagonal().array() += lambda;
      Eigen::LLT<Eigen::MatrixXd> llt(A);
      if (llt.info() == Eigen::Success) {
        const Eigen::VectorXd step = llt.solve(g);
        xn = x;
        xn(free) += step;
        trial = block_objective(spec, ld, gamma_local, block, xn, true);
        fn = trial.value;
        if (std::isfinite(fn) && fn >= f.value - 1e-13 * (1.0 + std::abs(f.value))) {
          accepted = true;
          break;
        }
        if (g.dot(step) <= 1e-12 * (1.0 + std::abs(f.value))) {
          stalled = true;  // predicted gain is at rounding level
          break;
        }
      }
      lambda = lambda == 0.0 ? 1e-6 : lambda * 10.0;
      out.max_damping = std::max(out.max_damping, lambda);
      if (lambda > cfg.max_damping) break;
    }
    if (stalled) break;
    if (!accepted) fail(ErrorCode::SingularHessian, "Levenberg damping exhausted at u = " + std::to_string(ld.u));
    const double gain = fn - f.value;
    x = xn;
    f = std::move(trial);
    if (gain <= 1e-15 * (1.0 + std::abs(f.value)) && lambda == 0.0) break;
  }
  // Undamped curvature must be numerically nonsingular at the solution,
  // unless it vanished because the fitted probabilities saturated.
  const Eigen::MatrixXd negH = -f.hessian(free, free);
  const double scale = negH.diagonal().cwiseAbs().maxCoeff();
  Eigen::LDLT<Eigen::MatrixXd> ldlt(negH);
  if (!(scale > 0.0) || ldlt.vectorD().minCoeff() <= 1e-11 * scale) {
    if (!block_design_full_rank(spec, ld, block, free))
      fail(ErrorCode::SingularHessian, "local Hessian is singular at u = " + std::to_string(ld.u));
    out.saturated = true;
  }
  out.x = x;
  out.value = f.value;
  return out;
}

//! Starting values for a block when no previous solution exists.
inline Eigen::VectorXd cold_start(const ModelSpec& spec, const LocalDesign& ld,
                                  const Eigen::MatrixXd& gamma_local, int block) {
  ParamLayout layout(spec);
  Eigen::VectorXd x = Eigen::VectorXd::Zero(layout.block_size(block));
  if (block == 0 || spec.expert != ExpertFamily::Gaussian) return x;
  const int q = 2 * spec.p_z;
  const Eigen::VectorXd omega = ld.w.array() * gamma_local.col(block - 1).array();
  Eigen::MatrixXd A = weighted_gram(ld.vz, omega.array());
  A.diagonal().array() += 1e-8 * (1.0 + A.diagonal().cwiseAbs().maxCoeff());
  const Eigen::VectorXd coef = A.ldlt().solve(ld.vz.transpose() * (omega.array() * ld.y.array()).matrix());
  x.head(q) = coef;
  const Eigen::ArrayXd r = ld.y - ld.vz * coef;
  const double mass = omega.sum();
  const double var = mass > 0 ? (omega.array() * r.square()).sum() / mass : 1.0;
  x(q) = 0.5 * std::log(std::max(var, 1e-8));
  return x;
}

}  // namespace detail

//! Per-fit precomputation: kernel windows at each grid node.
class FitContext {
public:
  FitContext(const ModelSpec& spec, const Dataset& data, const FitConfig& config)
    : spec_(spec), data_(data), config_(config), layout_(spec) {
    spec.validate();
    check_dataset(data);
    if (data.X.cols() != spec.p_x || data.Z.cols() != spec.p_z)
      fail(ErrorCode::DimensionMismatch, "dataset covariates do not match the model");
    for (Eigen::Index i = 0; i < data.size(); ++i) check_response(spec, data.y(i));
    if (!(config.h > 0.0)) fail(ErrorCode::NonPositiveBandwidth, "bandwidth must be positive");
    if (!(config.tol > 0.0)) fail(ErrorCode::InvalidArgument, "tol must be positive");
    grid_ = config.grid.empty() ? equispaced_grid(100) : config.grid;
    for (std::size_t j = 0; j < grid_.size(); ++j) {
      if (grid_[j] < 0.0 || grid_[j] > 1.0) fail(ErrorCode::OutOfDomain, "grid point outside [0, 1]");
      if (j > 0 && !(grid_[j] > grid_[j - 1])) fail(ErrorCode::InvalidArgument, "grid must be strictly increasing");
    }
    std::vector<Eigen::Index> order(static_cast<std::size_t>(data.size()));
    std::iota(order.begin(), order.end(), Eigen::Index{0});
    std::sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index b) {
      return data.u(a) < data.u(b) || (data.u(a) == data.u(b) && a < b);
    });
    const double reach = config.h * config.kernel.halfwidth;
    designs_.reserve(grid_.size());
    for (double u : grid_) {
      auto lo = std::lower_bound(order.begin(), order.end(), u - reach,
                                 [&](Eigen::Index i, double v) { return data.u(i) < v; });
      auto hi = std::upper_bound(order.begin(), order.end(), u + reach,
                                 [&](double v, Eigen::Index i) { return v < data.u(i); });
      std::vector<Eigen::Index> cand(lo, hi);
      std::sort(cand.begin(), cand.end());
      designs_.push_back(make_local_design(spec, data, cand, config.kernel, u, config.h));
      if (designs_.back().size() == 0)
        fail(ErrorCode::NoEffectiveSamples, "no observation near grid point u = " + std::to_string(u));
    }
    free_all_.resize(static_cast<std::size_t>(layout_.block_count()));
    free_masked_.resize(static_cast<std::size_t>(layout_.block_count()));
    const auto free = free_indices(spec);
    const auto all = free_indices(spec, false);
    for (int b = 0; b < layout_.block_count(); ++b) {
      const int off = layout_.block_offset(b), len = layout_.block_size(b);
      for (int i : all)
        if (i >= off && i < off + len) free_all_[static_cast<std::size_t>(b)].push_back(i - off);
      for (int i : free)
        if (i >= off && i < off + len) free_masked_[static_cast<std::size_t>(b)].push_back(i - off);
    }
  }

  const ModelSpec& spec() const { return spec_; }
  const Dataset& data() const { return data_; }
  const FitConfig& config() const { return config_; }
  const std::vector<double>& grid() const { return grid_; }
  const LocalDesign& design(std::size_t j) const { return designs_[j]; }
  const ParamLayout& layout() const { return layout_; }
  const std::vector<int>& free_in_block(int b, bool masked) const {
    return masked ? free_masked_[static_cast<std::size_t>(b)] : free_all_[static_cast<std::size_t>(b)];
  }

private:
  ModelSpec spec_;
  const Dataset& data_;
  FitConfig config_;
  ParamLayout layout_;
  std::vector<double> grid_;
  std::vector<LocalDesign> designs_;
  std::vector<std::vector<int>> free_all_;
  std::vector<std::vector<int>> free_masked_;
};

//! Per-node Q before and after an M-step (for the monotonicity contract).
struct MStepTrace {
  std::vector<double> q_before;  // at the previous iteration's node value (NaN if none)
  std::vector<double> q_after;
  int degenerate_events = 0;
  double max_damping = 0.0;
};

//! n^-1 sum_i of coefficient `id` interpolated at the observation points.
inline double observation_average(const ThetaCurve& curve, const CoefficientId& id,
                                  const Eigen::VectorXd& u) {
  double s = 0.0;
  for (Eigen::Index i = 0; i < u.size(); ++i) {
    const auto b = detail::bracket(curve.grid, u(i));
    double v = curve.points[b.left].value(id);
    if (b.frac > 0.0) v = (1 - b.frac) * v + b.frac * curve.points[b.left + 1].value(id);
    s += v;
  }
  return s / static_cast<double>(u.size());
}

namespace detail {

inline void sweep(const FitContext& ctx, const Responsibilities& gamma, const ThetaCurve* previous,
                  ThetaCurve& out, bool respect_mask, MStepTrace* trace) {
  const ModelSpec& spec = ctx.spec();
  const ParamLayout& layout = ctx.layout();
  const auto& grid = ctx.grid();
  const int C = spec.n_components;
  const FitConfig& cfg = ctx.config();
  for (std::size_t j = 0; j < grid.size(); ++j) {
    const LocalDesign& ld = ctx.design(j);
    const Eigen::MatrixXd g = local_responsibilities(ld, gamma);
    std::optional<Eigen::VectorXd> prev_here;
    if (previous) prev_here = layout.pack(previous->points[j]);
    if (respect_mask) prev_here = layout.pack(out.points[j]);
    std::optional<Eigen::VectorXd> from_left;
    if (j > 0) {
      ThetaPoint t = out.points[j - 1];
      const double du = grid[j] - grid[j - 1];
      t.beta += du * t.beta_slope;
      t.alpha += du * t.alpha_slope;
      t.log_delta += du * t.log_delta_slope;
      from_left = layout.pack(t);
      if (respect_mask) {
        // masked coefficients keep their substituted constant
        for (const auto& id : spec.constant_mask) {
          auto [a, b] = layout.position(id);
          (*from_left)(a) = (*prev_here)(a);
          (*from_left)(b) = 0.0;
        }
      }
    }
    Eigen::VectorXd sol(layout.size());
    double q_before = 0.0, q_after = 0.0;
    bool have_before = prev_here.has_value();
    for (int b = 0; b < layout.block_count(); ++b) {
      const int off = layout.block_offset(b), len = layout.block_size(b);
      const auto& free = ctx.free_in_block(b, respect_mask);
      if (respect_mask && free.size() == ctx.free_in_block(b, false).size()) {
        // unaffected by the substitution
        sol.segment(off, len) = prev_here->segment(off, len);
        if (trace) {
          const double v = block_objective(spec, ld, g, b, sol.segment(off, len), false).value;
          q_before += v;
          q_after += v;
        }
        continue;
      }
      // Degenerate component guard: too little local mass. The block is
      // frozen at whichever neighbouring value scores higher.
      if (b > 0 && g.col(b - 1).sum() < 2.0 * C && (prev_here || from_left)) {
        Eigen::VectorXd keep = prev_here ? prev_here->segment(off, len) : from_left->segment(off, len);
        double v = block_objective(spec, ld, g, b, keep, false).value;
        const double before = v;
        if (prev_here && from_left) {
          const double vl = block_objective(spec, ld, g, b, from_left->segment(off, len), false).value;
          if (vl > v) {
            v = vl;
            keep = from_left->segment(off, len);
          }
        }
        sol.segment(off, len) = keep;
        if (have_before) q_before += before;
        q_after += v;
        if (trace) ++trace->degenerate_events;
        ++out.degenerate_events;
        continue;
      }
      Eigen::VectorXd start;
      double best = -std::numeric_limits<double>::infinity();
      double before = std::numeric_limits<double>::quiet_NaN();
      if (b > 0 && spec.has_dispersion()) {
        // closed-form block: the start only supplies held-fixed entries
        if (prev_here) {
          start = prev_here->segment(off, len);
          if (trace) before = block_objective(spec, ld, g, b, start, false).value;
        } else {
          start = from_left ? Eigen::VectorXd(from_left->segment(off, len)) : cold_start(spec, ld, g, b);
        }
        best = 0.0;
      } else if (prev_here) {
        start = prev_here->segment(off, len);
        best = block_objective(spec, ld, g, b, start, false).value;
        before = best;
        if (!std::isfinite(best)) best = -std::numeric_limits<double>::infinity();
      }
      if (from_left) {
        const Eigen::VectorXd cand = from_left->segment(off, len);
        const double v = block_objective(spec, ld, g, b, cand, false).value;
        if (std::isfinite(v) && v > best) {
          best = v;
          start = cand;
        }
      }
      if (!std::isfinite(best)) start = cold_start(spec, ld, g, b);
      BlockSolve bs = maximize_block(spec, ld, g, b, start, free, cfg);
      out.max_damping_used = std::max(out.max_damping_used, bs.max_damping);
      if (trace) trace->max_damping = std::max(trace->max_damping, bs.max_damping);
      if (bs.saturated) {
        if (trace) ++trace->degenerate_events;
        ++out.degenerate_events;
      }
      if (b > 0 && spec.has_dispersion()) {
        const double ld_val = bs.x(2 * spec.p_z);
        if (std::exp(ld_val) < cfg.min_delta && (prev_here || from_left)) {
          bs.x = from_left ? from_left->segment(off, len) : prev_here->segment(off, len);
          bs.value = block_objective(spec, ld, g, b, bs.x, false).value;
          if (trace) ++trace->degenerate_events;
          ++out.degenerate_events;
        }
      }
      sol.segment(off, len) = bs.x;
      if (have_before) q_before += before;
      q_after += bs.value;
    }
    layout.unpack(sol, out.points[j]);
    if (trace) {
      trace->q_before[j] = have_before ? q_before : std::numeric_limits<double>::quiet_NaN();
      trace->q_after[j] = q_after;
    }
  }
}

}  // namespace detail

//! Maximises Q(theta(u) | gamma) at every grid node, sweeping left to right
//! with warm starts. Coefficients in the model's constant mask are first
//! estimated as functions, replaced by their observation average, and the
//! blocks that contain them are re-optimised with the constant held fixed.
inline ThetaCurve m_step(const FitContext& ctx, const Responsibilities& gamma,
                         const ThetaCurve* previous, MStepTrace* trace = nullptr) {
  const ModelSpec& spec = ctx.spec();
  ThetaCurve out;
  out.grid = ctx.grid();
  out.h = ctx.config().h;
  out.points.assign(out.grid.size(), ThetaPoint::zero(spec));
  if (trace) {
    trace->q_before.assign(out.grid.size(), 0.0);
    trace->q_after.assign(out.grid.size(), 0.0);
  }
  detail::sweep(ctx, gamma, previous, out, false, trace);
  if (spec.constant_mask.empty()) return out;
  for (const auto& id : spec.constant_mask) {
    double avg = observation_average(out, id, ctx.data().u);
    if (id.kind == CoefficientId::Kind::Delta) avg = std::log(avg);
    for (auto& p : out.points) {
      p.raw(id) = avg;
      p.slope(id) = 0.0;
    }
    out.constants.emplace_back(id, id.kind == CoefficientId::Kind::Delta ? std::exp(avg) : avg);
  }
  detail::sweep(ctx, gamma, nullptr, out, true, nullptr);
  return out;
}

inline ThetaCurve m_step(const ModelSpec& spec, const Responsibilities& gamma, const Dataset& data,
                         const FitConfig& config) {
  FitContext ctx(spec, data, config);
  return m_step(ctx, gamma, nullptr);
}

namespace detail {

inline double coefficient_change(const ModelSpec& spec, const ThetaCurve& a, const ThetaCurve& b) {
  double s = 0.0;
  const auto ids = spec.coefficients();
  for (std::size_t j = 0; j < a.points.size(); ++j)
    for (const auto& id : ids) s += std::abs(a.points[j].value(id) - b.points[j].value(id));
  return s;
}

}  // namespace detail

//! Label-consistent EM. With `warm` supplied, the initial responsibilities are
//! the E-step of `warm` on this data (unless init is Provided) and the first
//! M-step may start each node from `warm`.
namespace detail {

inline ThetaCurve fit_single(const ModelSpec& spec, const Dataset& data, const FitConfig& config,
                             const ThetaCurve* warm) {
  FitContext ctx(spec, data, config);
  if (warm && warm->grid != ctx.grid()) fail(ErrorCode::InvalidArgument, "warm-start curve uses a different grid");
  Responsibilities gamma = (warm && config.init != InitMethod::Provided) ? e_step(spec, *warm, data)
                                                                         : init_responsibilities(spec, data, config);
  ThetaCurve curve = m_step(ctx, gamma, warm);
  int degenerate = curve.degenerate_events;
  double damping = curve.max_damping_used;
  EStepResult es = e_step_with_density(spec, curve, data);
  std::vector<double> trace{es.mean_log_density};
  bool converged = false;
  int iterations = 0;
  while (iterations < config.max_iter) {
    ThetaCurve next = m_step(ctx, es.gamma, &curve);
    ++iterations;
    degenerate += next.degenerate_events;
    damping = std::max(damping, next.max_damping_used);
    EStepResult es_next = e_step_with_density(spec, next, data);
    bool done = false;
    if (config.rule == ConvergenceRule::CoefficientSum) {
      done = detail::coefficient_change(spec, curve, next) < config.tol;
    } else {
      const double prev = es.mean_log_density;
      done = std::abs(es_next.mean_log_density - prev) <= config.tol * std::abs(prev);
    }
    curve = std::move(next);
    es = std::move(es_next);
    trace.push_back(es.mean_log_density);
    if (done) {
      converged = true;
      break;
    }
  }
  Responsibilities gamma_final = std::move(es.gamma);
  curve.responsibilities = std::move(gamma_final);
  curve.loglik_trace = std::move(trace);
  curve.converged = converged;
  curve.n_iter = iterations;
  curve.degenerate_events = degenerate;
  curve.max_damping_used = damping;
  return curve;
}

}  // namespace detail

inline constexpr std::uint64_t start_stream = 0x57A27u;

//! Label-consistent EM. With a warm curve the first E-step uses it; otherwise
//! `config.starts` initialisations are run (the configured one, then random
//! ones) and the fit with the largest log-likelihood is returned.
inline ThetaCurve fit_vcmoe(const ModelSpec& spec, const Dataset& data, const FitConfig& config,
                            const ThetaCurve* warm = nullptr) {
  if (config.starts < 1) fail(ErrorCode::InvalidArgument, "starts must be at least 1");
  if (warm || config.starts == 1 || config.init == InitMethod::Provided)
    return detail::fit_single(spec, data, config, warm);
  std::optional<ThetaCurve> best;
  double best_ll = -std::numeric_limits<double>::infinity();
  std::optional<Error> first_error;
  for (int k = 0; k < config.starts; ++k) {
    FitConfig cfg = config;
    if (k > 0) {
      cfg.init = InitMethod::Random;
      cfg.seed = derive_seed(config.seed, start_stream, static_cast<std::uint64_t>(k));
    }
    try {
      ThetaCurve c = detail::fit_single(spec, data, cfg, nullptr);
      const double ll = log_likelihood(spec, c, data);
      if (!best || ll > best_ll) {
        best_ll = ll;
        best = std::move(c);
      }
    } catch (const Error& e) {
      if (!first_error) first_error = e;
    }
  }
  if (!best) throw *first_error;
  return std::move(*best);
}

struct ConstantFit {
  std::vector<std::pair<CoefficientId, double>> estimates;
  ThetaCurve curve;         // refitted with the targets held constant
  ThetaCurve functional;    // step-1 fit with the targets free
};

//! Two-step estimator for coefficients that are constant in u: fit them as
//! functions, average at the observation points, then refit with the average
//! substituted after every M-step.
inline ConstantFit fit_constant(const ModelSpec& spec, const Dataset& data, const FitConfig& config,
                                const std::vector<CoefficientId>& targets,
                                const ThetaCurve* functional_fit = nullptr) {
  if (targets.empty()) fail(ErrorCode::InvalidArgument, "no target coefficient");
  ModelSpec free_spec = spec;
  std::erase_if(free_spec.constant_mask, [&](const CoefficientId& id) {
    return std::find(targets.begin(), targets.end(), id) != targets.end();
  });
  ModelSpec held = free_spec;
  for (const auto& id : targets) {
    spec.check_coefficient(id);
    held.constant_mask.push_back(id);
  }
  ConstantFit out;
  out.functional = functional_fit ? *functional_fit : fit_vcmoe(free_spec, data, config);
  FitConfig refit = config;
  refit.init = InitMethod::Provided;
  refit.provided = out.functional.responsibilities;
  out.curve = fit_vcmoe(held, data, refit, &out.functional);
  for (const auto& id : targets) out.estimates.emplace_back(id, observation_average(out.curve, id, data.u));
  return out;
}

}  // namespace vcmoe
