#pragma once

#include "vcmoe/error.hpp"

#include <boost/math/quadrature/gauss.hpp>
#include <boost/math/quadrature/gauss_kronrod.hpp>

#include <array>
#include <cmath>
#include <functional>
#include <vector>

namespace vcmoe {

enum class KernelFamily { Epanechnikov };

struct KernelSpec {
  KernelFamily family = KernelFamily::Epanechnikov;
  double halfwidth = 1.0;  // support is [-halfwidth, halfwidth]
};

//! Moments and functionals of a kernel used by estimation and inference.
struct KernelConstants {
  double second_moment = 0;      // int u^2 K(u) du
  double square_integral = 0;    // int K^2(u) du
  double at_zero = 0;            // K(0)
  double deriv_sq_integral = 0;  // int K'(u)^2 du
  double lr_scale = 0;           // likelihood-ratio scaling: [K(0) - square_integral/2] / conv_norm
  double conv_norm = 0;          // int [K(u) - (K*K)(u)/2]^2 du
};

namespace kernel {

inline constexpr double quadrature_tolerance = 1e-10;

inline double eval(const KernelSpec& k, double t) {
  switch (k.family) {
    case KernelFamily::Epanechnikov: {
      const double s = t / k.halfwidth;
      return std::abs(s) < 1.0 ? 0.75 * (1.0 - s * s) / k.halfwidth : 0.0;
    }
  }
  return 0.0;
}

inline double derivative(const KernelSpec& k, double t) {
  switch (k.family) {
    case KernelFamily::Epanechnikov: {
      const double s = t / k.halfwidth;
      return std::abs(s) < 1.0 ? -1.5 * s / (k.halfwidth * k.halfwidth) : 0.0;
    }
  }
  return 0.0;
}

//! K_h(t) = K(t/h)/h.
inline double scaled_weight(const KernelSpec& k, double t, double h) {
  if (!(h > 0.0)) fail(ErrorCode::NonPositiveBandwidth, "bandwidth must be positive");
  return eval(k, t / h) / h;
}

//! Points where a kernel-derived integrand may lose smoothness on [-2A, 2A].
inline std::vector<double> breakpoints(const KernelSpec& k) {
  const double a = k.halfwidth;
  return {-2 * a, -a, 0.0, a, 2 * a};
}

//! Adaptive Gauss-Kronrod over [lo, hi] split at the kernel breakpoints.
//! Throws QuadratureFailure when the absolute error estimate exceeds 1e-10.
inline double integrate(const KernelSpec& k, const std::function<double(double)>& f,
                        double lo, double hi) {
  using boost::math::quadrature::gauss_kronrod;
  std::vector<double> cuts{lo};
  for (double b : breakpoints(k))
    if (b > lo && b < hi) cuts.push_back(b);
  cuts.push_back(hi);
  double total = 0.0;
  double total_err = 0.0;
  for (std::size_t i = 0; i + 1 < cuts.size(); ++i) {
    double err = 0.0;
    total += gauss_kronrod<double, 31>::integrate(f, cuts[i], cuts[i + 1], 15, 1e-14, &err);
    total_err += err;
  }
  if (!(total_err <= quadrature_tolerance) || !std::isfinite(total))
    fail(ErrorCode::QuadratureFailure, "error estimate " + std::to_string(total_err));
  return total;
}

//! (K*K)(u) = int K(t) K(u - t) dt by Gauss-Legendre on the overlap of the supports.
inline double self_convolution(const KernelSpec& k, double u) {
  const double a = k.halfwidth;
  const double lo = std::max(-a, u - a);
  const double hi = std::min(a, u + a);
  if (!(hi > lo)) return 0.0;
  auto f = [&](double t) { return eval(k, t) * eval(k, u - t); };
  // The integrand is a degree-4 polynomial on the overlap for Epanechnikov, so
  // 10 nodes are exact; other families fall back to the same rule.
  return boost::math::quadrature::gauss<double, 10>::integrate(f, lo, hi);
}

//! All constants by quadrature, independent of any closed form.
inline KernelConstants numeric_constants(const KernelSpec& k) {
  const double a = k.halfwidth;
  KernelConstants c;
  c.second_moment = integrate(k, [&](double t) { return t * t * eval(k, t); }, -a, a);
  c.square_integral = integrate(k, [&](double t) { double v = eval(k, t); return v * v; }, -a, a);
  c.at_zero = eval(k, 0.0);
  c.deriv_sq_integral =
      integrate(k, [&](double t) { double d = derivative(k, t); return d * d; }, -a, a);
  c.conv_norm = integrate(
      k,
      [&](double t) {
        double d = eval(k, t) - 0.5 * self_convolution(k, t);
        return d * d;
      },
      -2 * a, 2 * a);
  c.lr_scale = (c.at_zero - 0.5 * c.square_integral) / c.conv_norm;
  return c;
}

namespace detail {

inline KernelConstants compute_constants(const KernelSpec& k) {
  KernelConstants c;
  switch (k.family) {
    case KernelFamily::Epanechnikov: {
      const double a = k.halfwidth;
      c.second_moment = 0.2 * a * a;
      c.square_integral = 0.6 / a;
      c.at_zero = 0.75 / a;
      c.deriv_sq_integral = 1.5 / (a * a * a);
      break;
    }
  }
  // No closed form is used for the convolution functional.
  c.conv_norm = integrate(
      k,
      [&](double t) {
        double d = eval(k, t) - 0.5 * self_convolution(k, t);
        return d * d;
      },
      -2 * k.halfwidth, 2 * k.halfwidth);
  c.lr_scale = (c.at_zero - 0.5 * c.square_integral) / c.conv_norm;
  return c;
}

}  // namespace detail

//! Closed forms where available, quadrature otherwise. Cached for the unit
//! Epanechnikov kernel, which every fit in this library uses.
inline KernelConstants constants(const KernelSpec& k) {
  if (k.family == KernelFamily::Epanechnikov && k.halfwidth == 1.0) {
    static const KernelConstants cached = detail::compute_constants(k);
    return cached;
  }
  return detail::compute_constants(k);
}

}  // namespace kernel
}  // namespace vcmoe
