#pragma once

#include "vcmoe/dataset.hpp"
#include "vcmoe/error.hpp"
#include "vcmoe/fit.hpp"
#include "vcmoe/model.hpp"
#include "vcmoe/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <vector>

namespace vcmoe {

//! Cap on EM iterations of a leave-one-out refit.
inline constexpr int loo_max_iter = 20;

struct CvScore {
  double score = 0.0;  // sum of held-out log mixture densities
  int failed_folds = 0;
};

//! Leave-one-out likelihood cross-validation at bandwidth h. Every fold is
//! refitted from the full-data fit.
inline CvScore cv_score_detail(const ModelSpec& spec, const Dataset& data, double h, const FitConfig& config) {
  const Eigen::Index n = data.size();
  if (n < 3) fail(ErrorCode::InsufficientData, "cross-validation needs at least three observations");
  FitConfig cfg = config;
  cfg.h = h;
  const ThetaCurve full = fit_vcmoe(spec, data, cfg);
  FitConfig fold_cfg = cfg;
  fold_cfg.max_iter = std::min(cfg.max_iter, loo_max_iter);
  if (fold_cfg.init == InitMethod::Provided) fold_cfg.init = InitMethod::QuantileSplit;
  CvScore out;
  for (Eigen::Index i = 0; i < n; ++i) {
    try {
      const ThetaCurve loo = fit_vcmoe(spec, data.without(i), fold_cfg, &full);
      const ThetaPoint t = evaluate_curve(loo, data.u(i));
      const double ld = mixture_log_density(spec, t, data.X.row(i).transpose(), data.Z.row(i).transpose(), data.y(i));
      out.score += ld;
    } catch (const Error&) {
      ++out.failed_folds;
    }
  }
  if (out.failed_folds == n) fail(ErrorCode::AllFoldsFailed, "every leave-one-out fit failed");
  return out;
}

inline double cv_score(const ModelSpec& spec, const Dataset& data, double h, const FitConfig& config) {
  return cv_score_detail(spec, data, h, config).score;
}

struct CvReport {
  std::vector<double> candidates;
  std::vector<double> scores;
  std::vector<int> failed_folds;
  double best_h = 0.0;
};

//! 1.06 sd(u) n^(-1/5).
inline double rule_of_thumb_bandwidth(const Dataset& data) {
  const Eigen::Index n = data.size();
  if (n < 2) fail(ErrorCode::InsufficientData, "need at least two observations");
  const double mean = data.u.mean();
  const double sd = std::sqrt((data.u.array() - mean).square().sum() / static_cast<double>(n - 1));
  return 1.06 * sd * std::pow(static_cast<double>(n), -0.2);
}

//! Ten log-spaced values in [h0 / 2, 2 h0].
inline std::vector<double> default_candidates(const Dataset& data) {
  const double h0 = rule_of_thumb_bandwidth(data);
  if (!(h0 > 0.0)) fail(ErrorCode::DegenerateIndex, "index variable has zero spread");
  std::vector<double> c(10);
  for (int k = 0; k < 10; ++k) c[static_cast<std::size_t>(k)] = 0.5 * h0 * std::pow(4.0, k / 9.0);
  return c;
}

//! Candidate maximising the cross-validation sum; ties go to the larger h.
inline CvReport select_bandwidth(const ModelSpec& spec, const Dataset& data, const std::vector<double>& candidates,
                                 const FitConfig& config, unsigned threads = 1) {
  if (candidates.empty()) fail(ErrorCode::InvalidArgument, "no candidate bandwidth");
  for (double h : candidates)
    if (!(h > 0.0)) fail(ErrorCode::NonPositiveBandwidth, "candidate bandwidths must be positive");
  CvReport r;
  r.candidates = candidates;
  r.scores.assign(candidates.size(), 0.0);
  r.failed_folds.assign(candidates.size(), 0);
  std::vector<std::optional<Error>> errors(candidates.size());
  parallel_for(candidates.size(), threads, [&](std::size_t k) {
    try {
      const CvScore s = cv_score_detail(spec, data, candidates[k], config);
      r.scores[k] = s.score;
      r.failed_folds[k] = s.failed_folds;
    } catch (const Error& e) {
      errors[k] = e;
    }
  });
  for (const auto& e : errors)
    if (e) throw *e;
  double best = -std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < candidates.size(); ++k) {
    if (r.scores[k] > best || (r.scores[k] == best && candidates[k] > r.best_h)) {
      best = r.scores[k];
      r.best_h = candidates[k];
    }
  }
  return r;
}

}  // namespace vcmoe
