#pragma once

#include "vcmoe/error.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <string>

namespace vcmoe {

//! Observations (u_i, x_i, z_i, y_i) with the index already on [0, 1].
struct Dataset {
  Eigen::VectorXd u;
  Eigen::MatrixXd X;  // gating covariates, n x p_x
  Eigen::MatrixXd Z;  // expert covariates, n x p_z
  Eigen::VectorXd y;

  Eigen::Index size() const { return y.size(); }

  //! Copy with row `skip` removed.
  Dataset without(Eigen::Index skip) const {
    const Eigen::Index n = size();
    Dataset out;
    out.u.resize(n - 1);
    out.X.resize(n - 1, X.cols());
    out.Z.resize(n - 1, Z.cols());
    out.y.resize(n - 1);
    for (Eigen::Index i = 0, j = 0; i < n; ++i) {
      if (i == skip) continue;
      out.u(j) = u(i);
      out.X.row(j) = X.row(i);
      out.Z.row(j) = Z.row(i);
      out.y(j) = y(i);
      ++j;
    }
    return out;
  }
};

//! Affine map taking the raw index range onto [0, 1].
struct IndexMap {
  double offset = 0.0;
  double scale = 1.0;

  double forward(double raw) const { return (raw - offset) / scale; }
  double inverse(double unit) const { return offset + scale * unit; }
};

inline std::pair<Eigen::VectorXd, IndexMap> rescale_index(const Eigen::VectorXd& raw) {
  if (raw.size() == 0) fail(ErrorCode::DegenerateIndex, "empty index");
  const double lo = raw.minCoeff();
  const double hi = raw.maxCoeff();
  if (!(hi > lo)) fail(ErrorCode::DegenerateIndex, "all index values are equal");
  IndexMap map{lo, hi - lo};
  Eigen::VectorXd out = (raw.array() - lo) / (hi - lo);
  return {out, map};
}

//! Structural checks shared by every entry point that consumes a Dataset.
inline void check_dataset(const Dataset& d) {
  const Eigen::Index n = d.y.size();
  if (d.u.size() != n || d.X.rows() != n || d.Z.rows() != n)
    fail(ErrorCode::DimensionMismatch, "dataset columns have different lengths");
  if (n < 2) fail(ErrorCode::InsufficientData, "at least two observations are required");
  if (!d.u.allFinite() || !d.X.allFinite() || !d.Z.allFinite() || !d.y.allFinite())
    fail(ErrorCode::InvalidArgument, "dataset contains NaN or infinite values");
  if (d.u.minCoeff() < 0.0 || d.u.maxCoeff() > 1.0)
    fail(ErrorCode::OutOfDomain, "index values must lie in [0, 1]");
}

}  // namespace vcmoe
