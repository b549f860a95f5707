#include "vcmoe/kernel.hpp"

#include <gtest/gtest.h>

#include <boost/math/quadrature/gauss_kronrod.hpp>

using namespace vcmoe;

TEST(Kernel, EpanechnikovValues) {
  const KernelSpec k;
  EXPECT_DOUBLE_EQ(kernel::eval(k, 0.0), 0.75);
  EXPECT_DOUBLE_EQ(kernel::eval(k, 1.5), 0.0);
  EXPECT_DOUBLE_EQ(kernel::eval(k, 0.5), 0.5625);
  EXPECT_DOUBLE_EQ(kernel::eval(k, -1.0), 0.0);
}

TEST(Kernel, ScaledWeight) {
  const KernelSpec k;
  EXPECT_DOUBLE_EQ(kernel::scaled_weight(k, 0.0, 0.5), 1.5);
  EXPECT_DOUBLE_EQ(kernel::scaled_weight(k, 0.6, 0.5), 0.0);
  EXPECT_NEAR(kernel::scaled_weight(k, 0.1, 0.2), 2.8125, 1e-12);
}

TEST(Kernel, NonPositiveBandwidthRejected) {
  try {
    kernel::scaled_weight(KernelSpec{}, 0.0, 0.0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::NonPositiveBandwidth);
  }
  EXPECT_THROW(kernel::scaled_weight(KernelSpec{}, 0.0, -1.0), Error);
}

// Plain Gauss-Kronrod on the closed-form polynomial, independent of the
// library's own quadrature wrapper.
double gk(const std::function<double(double)>& f, double a, double b) {
  return boost::math::quadrature::gauss_kronrod<double, 61>::integrate(f, a, b, 10, 1e-15);
}

TEST(Kernel, ConstantsAgainstIndependentQuadrature) {
  auto K = [](double t) { return std::abs(t) < 1 ? 0.75 * (1 - t * t) : 0.0; };
  const auto c = kernel::constants(KernelSpec{});
  EXPECT_NEAR(c.second_moment, gk([&](double t) { return t * t * K(t); }, -1, 1), 1e-8);
  EXPECT_NEAR(c.square_integral, gk([&](double t) { return K(t) * K(t); }, -1, 1), 1e-8);
  EXPECT_NEAR(c.deriv_sq_integral, gk([](double t) { return 2.25 * t * t; }, -1, 1), 1e-8);
  EXPECT_NEAR(c.second_moment, 0.2, 1e-8);
  EXPECT_NEAR(c.square_integral, 0.6, 1e-8);
  EXPECT_NEAR(c.deriv_sq_integral, 1.5, 1e-8);
  EXPECT_DOUBLE_EQ(c.at_zero, 0.75);
}

TEST(Kernel, SelfConvolutionAtZeroIsTau) {
  EXPECT_NEAR(kernel::self_convolution(KernelSpec{}, 0.0), 0.6, 1e-8);
  EXPECT_DOUBLE_EQ(kernel::self_convolution(KernelSpec{}, 2.5), 0.0);
  // symmetric
  EXPECT_NEAR(kernel::self_convolution(KernelSpec{}, 0.7), kernel::self_convolution(KernelSpec{}, -0.7), 1e-14);
}

TEST(Kernel, ClosedFormsMatchQuadrature) {
  const auto a = kernel::constants(KernelSpec{});
  const auto b = kernel::numeric_constants(KernelSpec{});
  EXPECT_NEAR(a.second_moment, b.second_moment, 1e-10);
  EXPECT_NEAR(a.square_integral, b.square_integral, 1e-10);
  EXPECT_NEAR(a.deriv_sq_integral, b.deriv_sq_integral, 1e-10);
  EXPECT_NEAR(a.lr_scale, b.lr_scale, 1e-10);
  EXPECT_GT(a.lr_scale, 0.0);
}

TEST(Kernel, ConvolutionNormIndependentCheck) {
  // (K*K)(u) for Epanechnikov in closed form on |u| <= 2
  auto conv = [](double u) {
    const double a = std::abs(u);
    if (a >= 2) return 0.0;
    return 9.0 / 16.0 * (16.0 / 15.0 - 4.0 / 3.0 * a * a + 2.0 / 3.0 * a * a * a - a * a * a * a * a / 30.0);
  };
  EXPECT_NEAR(kernel::self_convolution(KernelSpec{}, 0.9), conv(0.9), 1e-12);
  auto K = [](double t) { return std::abs(t) < 1 ? 0.75 * (1 - t * t) : 0.0; };
  auto f = [&](double t) {
    const double d = K(t) - 0.5 * conv(t);
    return d * d;
  };
  const double norm = gk(f, -2, -1) + gk(f, -1, 0) + gk(f, 0, 1) + gk(f, 1, 2);
  EXPECT_NEAR(kernel::constants(KernelSpec{}).conv_norm, norm, 1e-10);
}

TEST(Kernel, HalfwidthScaling) {
  const KernelSpec k{KernelFamily::Epanechnikov, 2.0};
  const auto c = kernel::constants(k);
  EXPECT_NEAR(c.second_moment, 0.8, 1e-10);
  EXPECT_NEAR(c.square_integral, 0.3, 1e-10);
  const auto n = kernel::numeric_constants(k);
  EXPECT_NEAR(c.deriv_sq_integral, n.deriv_sq_integral, 1e-10);
}
