#pragma once

#include "vcmoe/fit.hpp"
#include "vcmoe/simulate.hpp"

#include <gtest/gtest.h>

#include <random>

namespace testutil {

inline vcmoe::ThetaCurve flat_curve(const vcmoe::ThetaPoint& t, std::vector<double> grid = {0.0, 1.0}) {
  vcmoe::ThetaCurve c;
  c.grid = std::move(grid);
  c.points.assign(c.grid.size(), t);
  c.h = 0.2;
  return c;
}

inline vcmoe::ErrorCode code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const vcmoe::Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no vcmoe::Error thrown";
  return vcmoe::ErrorCode::InvalidArgument;
}

// y = z'a + noise for a single Gaussian population.
inline vcmoe::Dataset linear_data(int n, unsigned seed, double noise = 0.3) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> N(0, 1);
  std::uniform_real_distribution<double> U(0, 1);
  vcmoe::Dataset d;
  d.u.resize(n);
  d.X = Eigen::MatrixXd::Ones(n, 1);
  d.Z.resize(n, 2);
  d.y.resize(n);
  for (int i = 0; i < n; ++i) {
    d.u(i) = U(rng);
    d.Z(i, 0) = 1.0;
    d.Z(i, 1) = N(rng);
    d.y(i) = 1.0 + std::sin(3 * d.u(i)) + 0.5 * d.Z(i, 1) + noise * N(rng);
  }
  return d;
}

}  // namespace testutil
