#pragma once

#include "vcmoe/dataset.hpp"
#include "vcmoe/error.hpp"
#include "vcmoe/kernel.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

namespace vcmoe {

enum class ExpertFamily { Gaussian, Binomial };
enum class GatingForm { Logistic, Softmax };

//! Names one scalar coefficient function of the model. Components are
//! 0-based here and 1-based in printed names.
struct CoefficientId {
  enum class Kind { Beta, Alpha, Delta };
  Kind kind = Kind::Beta;
  int component = 0;
  int index = 0;

  friend bool operator==(const CoefficientId&, const CoefficientId&) = default;
};

struct ModelSpec {
  int n_components = 2;
  ExpertFamily expert = ExpertFamily::Gaussian;
  int trials = 1;  // Binomial only
  GatingForm gating = GatingForm::Logistic;
  int p_x = 1;
  int p_z = 1;
  std::vector<CoefficientId> constant_mask;  // coefficients held constant over u

  int gating_rows() const { return n_components - 1; }
  bool has_dispersion() const { return expert == ExpertFamily::Gaussian; }

  bool is_constant(const CoefficientId& id) const {
    return std::find(constant_mask.begin(), constant_mask.end(), id) != constant_mask.end();
  }

  void validate() const {
    if (n_components < 2) fail(ErrorCode::InvalidModel, "at least two components are required");
    if (gating == GatingForm::Logistic && n_components != 2)
      fail(ErrorCode::InvalidModel, "logistic gating requires exactly two components");
    if (expert == ExpertFamily::Binomial && trials < 1)
      fail(ErrorCode::InvalidModel, "binomial trials must be at least 1");
    if (p_x < 1 || p_z < 1) fail(ErrorCode::InvalidModel, "covariate dimensions must be positive");
    for (const auto& id : constant_mask) check_coefficient(id);
  }

  void check_coefficient(const CoefficientId& id) const {
    bool ok = false;
    switch (id.kind) {
      case CoefficientId::Kind::Beta:
        ok = id.component >= 0 && id.component < gating_rows() && id.index >= 0 && id.index < p_x;
        break;
      case CoefficientId::Kind::Alpha:
        ok = id.component >= 0 && id.component < n_components && id.index >= 0 && id.index < p_z;
        break;
      case CoefficientId::Kind::Delta:
        ok = has_dispersion() && id.component >= 0 && id.component < n_components && id.index == 0;
        break;
    }
    if (!ok) fail(ErrorCode::UnknownCoefficient, "coefficient not present in this model");
  }

  //! Every scalar coefficient function, gating first.
  std::vector<CoefficientId> coefficients() const {
    std::vector<CoefficientId> out;
    for (int c = 0; c < gating_rows(); ++c)
      for (int j = 0; j < p_x; ++j) out.push_back({CoefficientId::Kind::Beta, c, j});
    for (int c = 0; c < n_components; ++c) {
      for (int j = 0; j < p_z; ++j) out.push_back({CoefficientId::Kind::Alpha, c, j});
      if (has_dispersion()) out.push_back({CoefficientId::Kind::Delta, c, 0});
    }
    return out;
  }
};

//! Printed name: beta<j> (two-component), beta<c><j>, alpha<c><j>, delta<c>.
inline std::string coefficient_name(const ModelSpec& spec, const CoefficientId& id) {
  const auto c = std::to_string(id.component + 1);
  const auto j = std::to_string(id.index);
  switch (id.kind) {
    case CoefficientId::Kind::Beta:
      return spec.n_components == 2 ? "beta" + j : "beta" + c + j;
    case CoefficientId::Kind::Alpha: return "alpha" + c + j;
    case CoefficientId::Kind::Delta: return "delta" + c;
  }
  return {};
}

//! Inverse of coefficient_name; also accepts the underscore form alpha_1_0.
inline CoefficientId parse_coefficient(const ModelSpec& spec, const std::string& name) {
  for (const auto& id : spec.coefficients())
    if (coefficient_name(spec, id) == name) return id;
  for (const auto& id : spec.coefficients()) {
    std::string alt;
    switch (id.kind) {
      case CoefficientId::Kind::Beta:
        alt = "beta_" + std::to_string(id.component + 1) + "_" + std::to_string(id.index);
        break;
      case CoefficientId::Kind::Alpha:
        alt = "alpha_" + std::to_string(id.component + 1) + "_" + std::to_string(id.index);
        break;
      case CoefficientId::Kind::Delta: alt = "delta_" + std::to_string(id.component + 1); break;
    }
    if (alt == name) return id;
    // Two-component models also answer to the three-index gating form.
    if (id.kind == CoefficientId::Kind::Beta && spec.n_components == 2 &&
        name == "beta1" + std::to_string(id.index) && spec.p_x <= 10 && name.size() == 6)
      return id;
  }
  fail(ErrorCode::UnknownCoefficient, "unknown coefficient '" + name + "'");
}

//! Local parameters at one index value u: values a(u) and slopes b(u).
struct ThetaPoint {
  Eigen::MatrixXd beta;        // (C-1) x p_x
  Eigen::MatrixXd alpha;       // C x p_z
  Eigen::VectorXd log_delta;   // C
  Eigen::MatrixXd beta_slope;  // same shapes as above
  Eigen::MatrixXd alpha_slope;
  Eigen::VectorXd log_delta_slope;

  static ThetaPoint zero(const ModelSpec& spec) {
    ThetaPoint t;
    t.beta = Eigen::MatrixXd::Zero(spec.gating_rows(), spec.p_x);
    t.alpha = Eigen::MatrixXd::Zero(spec.n_components, spec.p_z);
    t.log_delta = Eigen::VectorXd::Zero(spec.n_components);
    t.beta_slope = t.beta;
    t.alpha_slope = t.alpha;
    t.log_delta_slope = t.log_delta;
    return t;
  }

  //! Coefficient on its natural scale (delta = exp(log_delta)).
  double value(const CoefficientId& id) const {
    switch (id.kind) {
      case CoefficientId::Kind::Beta: return beta(id.component, id.index);
      case CoefficientId::Kind::Alpha: return alpha(id.component, id.index);
      case CoefficientId::Kind::Delta: return std::exp(log_delta(id.component));
    }
    return 0.0;
  }

  //! Raw stored parameter (log scale for delta) and its slope.
  double& raw(const CoefficientId& id) {
    switch (id.kind) {
      case CoefficientId::Kind::Beta: return beta(id.component, id.index);
      case CoefficientId::Kind::Alpha: return alpha(id.component, id.index);
      case CoefficientId::Kind::Delta: break;
    }
    return log_delta(id.component);
  }
  double raw(const CoefficientId& id) const { return const_cast<ThetaPoint*>(this)->raw(id); }
  double& slope(const CoefficientId& id) {
    switch (id.kind) {
      case CoefficientId::Kind::Beta: return beta_slope(id.component, id.index);
      case CoefficientId::Kind::Alpha: return alpha_slope(id.component, id.index);
      case CoefficientId::Kind::Delta: break;
    }
    return log_delta_slope(id.component);
  }

  //! Values at U = u + d under the local linear expansion.
  ThetaPoint shifted(double d) const {
    ThetaPoint t = *this;
    t.beta += d * beta_slope;
    t.alpha += d * alpha_slope;
    t.log_delta += d * log_delta_slope;
    return t;
  }
};

//! n x C matrix of posterior component probabilities.
using Responsibilities = Eigen::MatrixXd;

namespace detail {

inline double log1pexp(double x) {
  return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

inline double log_sum_exp(const Eigen::Ref<const Eigen::VectorXd>& v) {
  const double m = v.maxCoeff();
  if (!std::isfinite(m)) return m;
  return m + std::log((v.array() - m).exp().sum());
}

inline double log_binomial_coefficient(int trials, double y) {
  return std::lgamma(trials + 1.0) - std::lgamma(y + 1.0) - std::lgamma(trials - y + 1.0);
}

}  // namespace detail

//! Log gate probabilities; the last component is the reference class.
inline Eigen::VectorXd gate_log_probs(const ModelSpec& spec, const ThetaPoint& theta,
                                      const Eigen::Ref<const Eigen::VectorXd>& x) {
  if (x.size() != spec.p_x) fail(ErrorCode::DimensionMismatch, "gating covariate dimension");
  const int C = spec.n_components;
  Eigen::VectorXd out(C);
  if (spec.gating == GatingForm::Logistic) {
    const double eta = theta.beta.row(0).dot(x);
    out(0) = -detail::log1pexp(-eta);
    out(1) = -detail::log1pexp(eta);
    return out;
  }
  Eigen::VectorXd eta(C);
  eta.head(C - 1) = theta.beta * x;
  eta(C - 1) = 0.0;
  return eta.array() - detail::log_sum_exp(eta);
}

inline Eigen::VectorXd gate_probs(const ModelSpec& spec, const ThetaPoint& theta,
                                  const Eigen::Ref<const Eigen::VectorXd>& x) {
  if (spec.gating == GatingForm::Logistic) {
    if (x.size() != spec.p_x) fail(ErrorCode::DimensionMismatch, "gating covariate dimension");
    const double eta = theta.beta.row(0).dot(x);
    Eigen::VectorXd p(2);
    // expit evaluated on the side that cannot overflow
    if (eta >= 0) {
      const double e = std::exp(-eta);
      p(0) = 1.0 / (1.0 + e);
      p(1) = e / (1.0 + e);
    } else {
      const double e = std::exp(eta);
      p(0) = e / (1.0 + e);
      p(1) = 1.0 / (1.0 + e);
    }
    return p;
  }
  const int C = spec.n_components;
  if (x.size() != spec.p_x) fail(ErrorCode::DimensionMismatch, "gating covariate dimension");
  Eigen::VectorXd eta(C);
  eta.head(C - 1) = theta.beta * x;
  eta(C - 1) = 0.0;
  const double m = eta.maxCoeff();
  Eigen::VectorXd p = (eta.array() - m).exp();
  return p / p.sum();
}

inline void check_response(const ModelSpec& spec, double y) {
  if (spec.expert == ExpertFamily::Binomial) {
    if (!(y >= 0 && y <= spec.trials) || y != std::floor(y))
      fail(ErrorCode::InvalidResponse, "binomial response must be an integer in [0, trials]");
  } else if (!std::isfinite(y)) {
    fail(ErrorCode::InvalidResponse, "response must be finite");
  }
}

inline double expert_log_density(const ModelSpec& spec, int c, const ThetaPoint& theta,
                                 const Eigen::Ref<const Eigen::VectorXd>& z, double y) {
  if (z.size() != spec.p_z) fail(ErrorCode::DimensionMismatch, "expert covariate dimension");
  check_response(spec, y);
  const double eta = theta.alpha.row(c).dot(z);
  if (spec.expert == ExpertFamily::Gaussian) {
    const double s = theta.log_delta(c);
    const double r = (y - eta) * std::exp(-s);
    return -0.5 * std::log(2.0 * std::numbers::pi) - s - 0.5 * r * r;
  }
  return detail::log_binomial_coefficient(spec.trials, y) + y * eta -
         spec.trials * detail::log1pexp(eta);
}

//! Per-component log(pi_c * phi_c).
inline Eigen::VectorXd joint_log_terms(const ModelSpec& spec, const ThetaPoint& theta,
                                       const Eigen::Ref<const Eigen::VectorXd>& x,
                                       const Eigen::Ref<const Eigen::VectorXd>& z, double y) {
  Eigen::VectorXd t = gate_log_probs(spec, theta, x);
  for (int c = 0; c < spec.n_components; ++c) t(c) += expert_log_density(spec, c, theta, z, y);
  return t;
}

inline double mixture_log_density(const ModelSpec& spec, const ThetaPoint& theta,
                                  const Eigen::Ref<const Eigen::VectorXd>& x,
                                  const Eigen::Ref<const Eigen::VectorXd>& z, double y) {
  return detail::log_sum_exp(joint_log_terms(spec, theta, x, z, y));
}

// ---------------------------------------------------------------------------
// Local parameter vector.
//
// Layout: gating rows k = 0..C-2 as [beta(k,:), beta_slope(k,:)], then for each
// component c: [alpha(c,:), alpha_slope(c,:), log_delta(c), log_delta_slope(c)]
// (the dispersion pair only for Gaussian experts). The gating rows form block 0
// and component c forms block c + 1; the M-step objective is separable across
// blocks.
// ---------------------------------------------------------------------------

struct ParamLayout {
  int C = 0, p_x = 0, p_z = 0;
  bool dispersion = true;

  explicit ParamLayout(const ModelSpec& spec)
    : C(spec.n_components), p_x(spec.p_x), p_z(spec.p_z), dispersion(spec.has_dispersion()) {}

  int gating_size() const { return (C - 1) * 2 * p_x; }
  int expert_size() const { return 2 * p_z + (dispersion ? 2 : 0); }
  int size() const { return gating_size() + C * expert_size(); }
  int block_count() const { return C + 1; }
  int block_offset(int b) const { return b == 0 ? 0 : gating_size() + (b - 1) * expert_size(); }
  int block_size(int b) const { return b == 0 ? gating_size() : expert_size(); }

  //! Positions of a coefficient's (value, slope) pair in the full vector.
  std::pair<int, int> position(const CoefficientId& id) const {
    switch (id.kind) {
      case CoefficientId::Kind::Beta: {
        const int base = id.component * 2 * p_x;
        return {base + id.index, base + p_x + id.index};
      }
      case CoefficientId::Kind::Alpha: {
        const int base = gating_size() + id.component * expert_size();
        return {base + id.index, base + p_z + id.index};
      }
      case CoefficientId::Kind::Delta: {
        const int base = gating_size() + id.component * expert_size() + 2 * p_z;
        return {base, base + 1};
      }
    }
    return {0, 0};
  }

  static int block_of(const CoefficientId& id) {
    return id.kind == CoefficientId::Kind::Beta ? 0 : id.component + 1;
  }

  Eigen::VectorXd pack(const ThetaPoint& t) const {
    Eigen::VectorXd v(size());
    for (int k = 0; k < C - 1; ++k) {
      v.segment(k * 2 * p_x, p_x) = t.beta.row(k).transpose();
      v.segment(k * 2 * p_x + p_x, p_x) = t.beta_slope.row(k).transpose();
    }
    for (int c = 0; c < C; ++c) {
      const int base = gating_size() + c * expert_size();
      v.segment(base, p_z) = t.alpha.row(c).transpose();
      v.segment(base + p_z, p_z) = t.alpha_slope.row(c).transpose();
      if (dispersion) {
        v(base + 2 * p_z) = t.log_delta(c);
        v(base + 2 * p_z + 1) = t.log_delta_slope(c);
      }
    }
    return v;
  }

  void unpack(const Eigen::Ref<const Eigen::VectorXd>& v, ThetaPoint& t) const {
    for (int k = 0; k < C - 1; ++k) {
      t.beta.row(k) = v.segment(k * 2 * p_x, p_x).transpose();
      t.beta_slope.row(k) = v.segment(k * 2 * p_x + p_x, p_x).transpose();
    }
    for (int c = 0; c < C; ++c) {
      const int base = gating_size() + c * expert_size();
      t.alpha.row(c) = v.segment(base, p_z).transpose();
      t.alpha_slope.row(c) = v.segment(base + p_z, p_z).transpose();
      if (dispersion) {
        t.log_delta(c) = v(base + 2 * p_z);
        t.log_delta_slope(c) = v(base + 2 * p_z + 1);
      }
    }
  }
};

//! Indices of the full local vector that are optimised (constants removed).
//! The dispersion is locally constant: its slope slot is never optimised and
//! stays at zero. A local-linear log dispersion makes the boundary likelihood
//! unbounded (a few points near the node interpolated with vanishing spread).
inline std::vector<int> free_indices(const ModelSpec& spec, bool apply_mask = true) {
  ParamLayout layout(spec);
  std::vector<bool> keep(layout.size(), true);
  if (spec.has_dispersion())
    for (int c = 0; c < spec.n_components; ++c)
      keep[layout.position({CoefficientId::Kind::Delta, c, 0}).second] = false;
  if (apply_mask)
    for (const auto& id : spec.constant_mask) {
      auto [a, b] = layout.position(id);
      keep[a] = keep[b] = false;
    }
  std::vector<int> out;
  for (int i = 0; i < layout.size(); ++i)
    if (keep[i]) out.push_back(i);
  return out;
}

// ---------------------------------------------------------------------------
// Kernel-weighted local window and the M-step objective on it.
// ---------------------------------------------------------------------------

//! Observations with positive kernel weight around a grid point u.
struct LocalDesign {
  double u = 0.0;
  std::vector<Eigen::Index> rows;  // dataset rows
  Eigen::VectorXd d;               // U_i - u
  Eigen::VectorXd w;               // K_h(U_i - u)
  Eigen::VectorXd y;
  Eigen::MatrixXd vx;  // [x_i, x_i d_i]
  Eigen::MatrixXd vz;  // [z_i, z_i d_i]
  Eigen::VectorXd log_choose;  // Binomial only

  Eigen::Index size() const { return w.size(); }
};

inline LocalDesign make_local_design(const ModelSpec& spec, const Dataset& data,
                                     const std::vector<Eigen::Index>& candidates,
                                     const KernelSpec& k, double u, double h) {
  if (!(h > 0.0)) fail(ErrorCode::NonPositiveBandwidth, "bandwidth must be positive");
  LocalDesign ld;
  ld.u = u;
  for (Eigen::Index i : candidates) {
    const double w = kernel::eval(k, (data.u(i) - u) / h) / h;
    if (w > 0.0) ld.rows.push_back(i);
  }
  const auto m = static_cast<Eigen::Index>(ld.rows.size());
  ld.d.resize(m);
  ld.w.resize(m);
  ld.y.resize(m);
  ld.vx.resize(m, 2 * spec.p_x);
  ld.vz.resize(m, 2 * spec.p_z);
  if (spec.expert == ExpertFamily::Binomial) ld.log_choose.resize(m);
  for (Eigen::Index r = 0; r < m; ++r) {
    const Eigen::Index i = ld.rows[r];
    const double d = data.u(i) - u;
    ld.d(r) = d;
    ld.w(r) = kernel::eval(k, d / h) / h;
    ld.y(r) = data.y(i);
    ld.vx.row(r) << data.X.row(i), d * data.X.row(i);
    ld.vz.row(r) << data.Z.row(i), d * data.Z.row(i);
    if (spec.expert == ExpertFamily::Binomial)
      ld.log_choose(r) = detail::log_binomial_coefficient(spec.trials, data.y(i));
  }
  return ld;
}

inline LocalDesign make_local_design(const ModelSpec& spec, const Dataset& data,
                                     const KernelSpec& k, double u, double h) {
  std::vector<Eigen::Index> all(static_cast<std::size_t>(data.size()));
  for (Eigen::Index i = 0; i < data.size(); ++i) all[static_cast<std::size_t>(i)] = i;
  return make_local_design(spec, data, all, k, u, h);
}

struct ObjectiveValue {
  double value = 0.0;
  Eigen::VectorXd gradient;
  Eigen::MatrixXd hessian;
};

namespace detail {

//! V' diag(c) V for a tall, narrow V.
inline Eigen::MatrixXd weighted_gram(const Eigen::MatrixXd& V, const Eigen::Ref<const Eigen::ArrayXd>& c) {
  const Eigen::Index q = V.cols(), m = V.rows();
  Eigen::MatrixXd G = Eigen::MatrixXd::Zero(q, q);
  for (Eigen::Index a = 0; a < q; ++a) {
    const double* va = V.col(a).data();
    for (Eigen::Index b = 0; b <= a; ++b) {
      const double* vb = V.col(b).data();
      double acc = 0.0;
      for (Eigen::Index r = 0; r < m; ++r) acc += va[r] * c(r) * vb[r];
      G(a, b) = G(b, a) = acc;
    }
  }
  return G;
}

//! Gating block of Q: sum_i w_i sum_c gamma_ic log pi_c. `gamma` is m x C.
inline ObjectiveValue gating_block(const ModelSpec& spec, const LocalDesign& ld,
                                   const Eigen::Ref<const Eigen::MatrixXd>& gamma,
                                   const Eigen::Ref<const Eigen::VectorXd>& params,
                                   bool derivatives) {
  const int C = spec.n_components;
  const int q = 2 * spec.p_x;
  const Eigen::Index m = ld.size();
  ObjectiveValue out;
  if (C == 2) {
    const Eigen::VectorXd eta = ld.vx * params;
    Eigen::VectorXd p1(m), lp1(m), lp2(m);
    for (Eigen::Index r = 0; r < m; ++r) {
      const double e = std::exp(-std::abs(eta(r)));
      const double l = std::log1p(e);
      lp1(r) = -(std::max(-eta(r), 0.0) + l);
      lp2(r) = -(std::max(eta(r), 0.0) + l);
      p1(r) = eta(r) > 0 ? 1.0 / (1.0 + e) : e / (1.0 + e);
    }
    out.value = (ld.w.array() * (gamma.col(0).array() * lp1.array() +
                                 gamma.col(1).array() * lp2.array()))
                    .sum();
    if (derivatives) {
      out.gradient = ld.vx.transpose() * (ld.w.array() * (gamma.col(0).array() - p1.array())).matrix();
      const Eigen::VectorXd c = ld.w.array() * p1.array() * (1.0 - p1.array());
      out.hessian = -weighted_gram(ld.vx, c.array());
    }
    return out;
  }
  Eigen::MatrixXd eta(m, C);
  for (int k = 0; k < C - 1; ++k) eta.col(k) = ld.vx * params.segment(k * q, q);
  eta.col(C - 1).setZero();
  Eigen::MatrixXd logp(m, C), p(m, C);
  for (Eigen::Index r = 0; r < m; ++r) {
    const double lse = log_sum_exp(eta.row(r).transpose());
    logp.row(r) = eta.row(r).array() - lse;
    p.row(r) = logp.row(r).array().exp();
  }
  out.value =((gamma.array() * logp.array()).colwise() * ld.w.array()).sum();
  if (derivatives) {
    out.gradient.resize((C - 1) * q);
    out.hessian.resize((C - 1) * q, (C - 1) * q);
    for (int k = 0; k < C - 1; ++k) {
      out.gradient.segment(k * q, q) =
          ld.vx.transpose() * (ld.w.array() * (gamma.col(k).array() - p.col(k).array())).matrix();
      for (int l = 0; l <= k; ++l) {
        Eigen::VectorXd c = -(ld.w.array() * p.col(k).array() * p.col(l).array());
        if (k == l) c += (ld.w.array() * p.col(k).array()).matrix();
        const Eigen::MatrixXd blk = -weighted_gram(ld.vx, c.array());
        out.hessian.block(k * q, l * q, q, q) = blk;
        if (l != k) out.hessian.block(l * q, k * q, q, q) = blk.transpose();
      }
    }
  }
  return out;
}

//! Expert block for one component: sum_i w_i gamma_ic log phi_c.
inline ObjectiveValue expert_block(const ModelSpec& spec, const LocalDesign& ld,
                                   const Eigen::Ref<const Eigen::VectorXd>& gamma_c,
                                   const Eigen::Ref<const Eigen::VectorXd>& params,
                                   bool derivatives) {
  const int q = 2 * spec.p_z;
  const Eigen::VectorXd omega = ld.w.array() * gamma_c.array();
  const Eigen::VectorXd mu = ld.vz * params.head(q);
  ObjectiveValue out;
  if (spec.expert == ExpertFamily::Gaussian) {
    if (!derivatives && params(q + 1) == 0.0) {
      const double iv = std::exp(-2.0 * params(q));
      const double mass = omega.sum();
      const double ss = (omega.array() * (ld.y - mu).array().square()).sum();
      out.value = mass * (-0.5 * std::log(2.0 * std::numbers::pi) - params(q)) - 0.5 * iv * ss;
      return out;
    }
    const Eigen::VectorXd s = (params(q) + ld.d.array() * params(q + 1)).matrix();
    const Eigen::ArrayXd inv_var = (-2.0 * s.array()).exp();
    const Eigen::ArrayXd r = ld.y.array() - mu.array();
    const Eigen::ArrayXd r2v = r * r * inv_var;
    out.value = (omega.array() * (-0.5 * std::log(2.0 * std::numbers::pi) - s.array() - 0.5 * r2v)).sum();
    if (derivatives) {
      out.gradient.resize(q + 2);
      out.hessian.resize(q + 2, q + 2);
      out.gradient.head(q) = ld.vz.transpose() * (omega.array() * r * inv_var).matrix();
      const Eigen::ArrayXd gs = omega.array() * (r2v - 1.0);
      out.gradient(q) = gs.sum();
      out.gradient(q + 1) = (gs * ld.d.array()).sum();
      const Eigen::ArrayXd haa = omega.array() * inv_var;
      out.hessian.topLeftCorner(q, q) = -weighted_gram(ld.vz, haa);
      const Eigen::ArrayXd has = -2.0 * omega.array() * r * inv_var;
      out.hessian.block(0, q, q, 1) = ld.vz.transpose() * has.matrix();
      out.hessian.block(0, q + 1, q, 1) = ld.vz.transpose() * (has * ld.d.array()).matrix();
      out.hessian.block(q, 0, 2, q) = out.hessian.block(0, q, q, 2).transpose();
      const Eigen::ArrayXd hss = -2.0 * omega.array() * r2v;
      out.hessian(q, q) = hss.sum();
      out.hessian(q, q + 1) = out.hessian(q + 1, q) = (hss * ld.d.array()).sum();
      out.hessian(q + 1, q + 1) = (hss * ld.d.array().square()).sum();
    }
    return out;
  }
  const double N = spec.trials;
  Eigen::ArrayXd softplus(mu.size()), p(mu.size());
  for (Eigen::Index r = 0; r < mu.size(); ++r) {
    softplus(r) = log1pexp(mu(r));
    p(r) = std::exp(mu(r) - softplus(r));
  }
  out.value = (omega.array() * (ld.log_choose.array() + ld.y.array() * mu.array() - N * softplus)).sum();
  if (derivatives) {
    out.gradient = ld.vz.transpose() * (omega.array() * (ld.y.array() - N * p)).matrix();
    const Eigen::ArrayXd c = omega.array() * N * p * (1.0 - p);
    out.hessian = -weighted_gram(ld.vz, c);
  }
  return out;
}

}  // namespace detail

//! One block of Q at the block's parameter sub-vector.
inline ObjectiveValue block_objective(const ModelSpec& spec, const LocalDesign& ld,
                                      const Eigen::Ref<const Eigen::MatrixXd>& gamma_local,
                                      int block, const Eigen::Ref<const Eigen::VectorXd>& params,
                                      bool derivatives = true) {
  if (block == 0) return detail::gating_block(spec, ld, gamma_local, params, derivatives);
  return detail::expert_block(spec, ld, gamma_local.col(block - 1), params, derivatives);
}

//! Rows of gamma belonging to the window.
inline Eigen::MatrixXd local_responsibilities(const LocalDesign& ld, const Responsibilities& gamma) {
  Eigen::MatrixXd g(ld.size(), gamma.cols());
  for (Eigen::Index r = 0; r < ld.size(); ++r) g.row(r) = gamma.row(ld.rows[static_cast<std::size_t>(r)]);
  return g;
}

//! Q(theta(u) | gamma) with each coefficient expanded as a + b (U_i - u);
//! gradient and Hessian over the free local parameters.
inline ObjectiveValue local_objective_grad_hess(const ModelSpec& spec, const ThetaPoint& theta,
                                                const Responsibilities& gamma, const Dataset& data,
                                                const KernelSpec& k, double u, double h) {
  const LocalDesign ld = make_local_design(spec, data, k, u, h);
  if (ld.size() == 0) fail(ErrorCode::NoEffectiveSamples, "no observation has positive kernel weight");
  const Eigen::MatrixXd g = local_responsibilities(ld, gamma);
  ParamLayout layout(spec);
  const Eigen::VectorXd full = layout.pack(theta);
  ObjectiveValue all;
  all.gradient = Eigen::VectorXd::Zero(layout.size());
  all.hessian = Eigen::MatrixXd::Zero(layout.size(), layout.size());
  for (int b = 0; b < layout.block_count(); ++b) {
    const int off = layout.block_offset(b), len = layout.block_size(b);
    auto blk = block_objective(spec, ld, g, b, full.segment(off, len));
    all.value += blk.value;
    all.gradient.segment(off, len) = blk.gradient;
    all.hessian.block(off, off, len, len) = blk.hessian;
  }
  const auto idx = free_indices(spec);
  ObjectiveValue out;
  out.value = all.value;
  out.gradient = all.gradient(idx);
  out.hessian = all.hessian(idx, idx);
  return out;
}

}  // namespace vcmoe
