#pragma once

#include "vcmoe/error.hpp"
#include "vcmoe/fit.hpp"
#include "vcmoe/inference.hpp"
#include "vcmoe/model.hpp"
#include "vcmoe/parallel.hpp"
#include "vcmoe/random.hpp"
#include "vcmoe/simulate.hpp"

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace vcmoe {

struct StudyConfig {
  Scenario scenario;
  int replicates = 50;
  Eigen::Index n = 500;
  std::vector<double> h_list{0.21};
  FitConfig fit;  // h is overridden by h_list
  std::uint64_t seed = 1;
  unsigned threads = 1;
  std::vector<CoefficientId> rase_targets;  // empty: every coefficient

  // simultaneous bands scored against the truth
  std::vector<CoefficientId> band_targets;
  std::vector<double> band_levels;
  bool asymptotic_bands = false;
  bool bootstrap_bands = false;
  BootstrapOptions bootstrap;  // seed and threads are set per replicate

  // likelihood-ratio null sample; the scenario should have constant gating
  std::vector<CoefficientId> glrt_null;

  // two-step constant estimates
  std::vector<CoefficientId> constant_targets;
};

struct RaseRow {
  double h = 0.0;
  CoefficientId coefficient;
  std::string name;
  std::vector<double> values;  // per successful replicate
  double mean = 0.0;
  double sd = 0.0;
};

struct CoverageRow {
  double h = 0.0;
  CoefficientId coefficient;
  std::string name;
  BandMethod method = BandMethod::Asymptotic;
  double level = 0.95;
  std::vector<char> hits;  // per successful replicate
  double rate = 0.0;
};

struct ConstantRow {
  double h = 0.0;
  CoefficientId coefficient;
  std::string name;
  std::vector<double> values;
  double mean = 0.0;
  double sd = 0.0;
};

struct StudyResult {
  std::vector<RaseRow> rase;
  std::vector<CoverageRow> coverage;
  std::vector<ConstantRow> constants;
  std::vector<double> glrt_h;
  std::vector<std::vector<double>> glrt_statistic;  // lr_scale * lambda per h, per replicate
  std::vector<double> glrt_dof;
  int successful = 0;
  int failed = 0;
  std::vector<std::string> failures;
};

inline constexpr std::uint64_t study_data_stream = 0xDA7Au;
inline constexpr std::uint64_t study_fit_stream = 0xF17u;
inline constexpr std::uint64_t study_boot_stream = 0xB00Bu;

namespace detail {

inline void mean_sd(const std::vector<double>& v, double& mean, double& sd) {
  mean = 0.0;
  sd = 0.0;
  if (v.empty()) return;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  if (v.size() < 2) return;
  for (double x : v) sd += (x - mean) * (x - mean);
  sd = std::sqrt(sd / static_cast<double>(v.size() - 1));
}

struct ReplicateOutcome {
  std::optional<std::string> error;
  std::vector<std::vector<double>> rase;      // [h][target]
  std::vector<std::vector<char>> hits;        // [h][row within h]
  std::vector<std::vector<double>> constants;  // [h][target]
  std::vector<double> glrt;                    // [h]
};

}  // namespace detail

//! Monte Carlo study over independent simulated replicates. Each replicate
//! draws its data, fit starts and bootstrap streams from seeds derived from
//! (seed, replicate index), so results do not depend on `threads`.
inline StudyResult run_study(const StudyConfig& cfg) {
  if (cfg.replicates < 1) fail(ErrorCode::InvalidArgument, "replicates must be at least 1");
  if (cfg.h_list.empty()) fail(ErrorCode::InvalidArgument, "no bandwidth given");
  const ModelSpec spec = scenario_model(cfg.scenario);
  const std::vector<CoefficientId> targets = cfg.rase_targets.empty() ? spec.coefficients() : cfg.rase_targets;
  for (const auto& id : targets) spec.check_coefficient(id);
  for (const auto& id : cfg.band_targets) spec.check_coefficient(id);
  if ((cfg.asymptotic_bands || cfg.bootstrap_bands) && (cfg.band_targets.empty() || cfg.band_levels.empty()))
    fail(ErrorCode::InvalidArgument, "bands need targets and levels");

  // coverage row layout within one h: bootstrap (target x level), then asymptotic
  struct RowKey {
    CoefficientId id;
    BandMethod method;
    double level;
  };
  std::vector<RowKey> keys;
  if (cfg.bootstrap_bands)
    for (const auto& id : cfg.band_targets)
      for (double l : cfg.band_levels) keys.push_back({id, BandMethod::Bootstrap, l});
  if (cfg.asymptotic_bands)
    for (const auto& id : cfg.band_targets)
      for (double l : cfg.band_levels) keys.push_back({id, BandMethod::Asymptotic, l});

  const auto R = static_cast<std::size_t>(cfg.replicates);
  std::vector<detail::ReplicateOutcome> out(R);
  parallel_for(R, cfg.threads, [&](std::size_t r) {
    auto& o = out[r];
    try {
      const SimulatedData sim = generate(cfg.scenario, cfg.n, derive_seed(cfg.seed, study_data_stream, r));
      for (double h : cfg.h_list) {
        FitConfig fc = cfg.fit;
        fc.h = h;
        fc.seed = derive_seed(cfg.seed, study_fit_stream, r);
        ThetaCurve fit = fit_vcmoe(spec, sim.data, fc);
        fit = permute_components(spec, fit, align_to_truth(spec, fit, cfg.scenario));
        std::vector<double> rr;
        for (const auto& id : targets) rr.push_back(rase(fit.coefficient(id), truth_curve(cfg.scenario, id, fit.grid)));
        o.rase.push_back(std::move(rr));

        std::vector<char> hits;
        if (cfg.bootstrap_bands) {
          BootstrapOptions bo = cfg.bootstrap;
          bo.seed = derive_seed(cfg.seed, study_boot_stream, r);
          bo.threads = 1;
          const auto bands = bootstrap_bands(spec, fit, sim.data, fc, cfg.band_targets, cfg.band_levels, bo);
          for (const auto& b : bands)
            hits.push_back(b.covers([&](double u) { return truth_point(cfg.scenario, u).value(b.coefficient); }));
        }
        if (cfg.asymptotic_bands) {
          const CovCurve cov = covariance_curve(spec, fit, sim.data, BiasMode::Undersmooth, 0.0, fc.kernel);
          for (const auto& id : cfg.band_targets)
            for (double l : cfg.band_levels) {
              const BandResult b = asymptotic_band(spec, fit, cov, id, l, false, fc.kernel);
              hits.push_back(b.covers([&](double u) { return truth_point(cfg.scenario, u).value(id); }));
            }
        }
        o.hits.push_back(std::move(hits));

        if (!cfg.constant_targets.empty()) {
          const ConstantFit cf = fit_constant(spec, sim.data, fc, cfg.constant_targets, &fit);
          std::vector<double> cv;
          for (const auto& e : cf.estimates) cv.push_back(e.second);
          o.constants.push_back(std::move(cv));
        }
        if (!cfg.glrt_null.empty()) {
          const TestResult t = test_constancy_glrt(spec, sim.data, fc, cfg.glrt_null);
          o.glrt.push_back(t.statistic);
        }
      }
    } catch (const Error& e) {
      o.error = "replicate " + std::to_string(r) + ": " + e.what();
    }
  });

  StudyResult res;
  for (const auto& o : out) {
    if (o.error) {
      ++res.failed;
      res.failures.push_back(*o.error);
    } else {
      ++res.successful;
    }
  }
  if (res.failed * 10 > cfg.replicates)
    fail(ErrorCode::TooManyFailures, std::to_string(res.failed) + " of " + std::to_string(cfg.replicates) +
                                         " replicates failed; first: " + res.failures.front());

  for (std::size_t k = 0; k < cfg.h_list.size(); ++k) {
    const double h = cfg.h_list[k];
    for (std::size_t a = 0; a < targets.size(); ++a) {
      RaseRow row{h, targets[a], coefficient_name(spec, targets[a]), {}, 0.0, 0.0};
      for (const auto& o : out)
        if (!o.error) row.values.push_back(o.rase[k][a]);
      detail::mean_sd(row.values, row.mean, row.sd);
      res.rase.push_back(std::move(row));
    }
    for (std::size_t q = 0; q < keys.size(); ++q) {
      CoverageRow row{h, keys[q].id, coefficient_name(spec, keys[q].id), keys[q].method, keys[q].level, {}, 0.0};
      int covered = 0;
      for (const auto& o : out)
        if (!o.error) {
          row.hits.push_back(o.hits[k][q]);
          covered += o.hits[k][q] ? 1 : 0;
        }
      row.rate = row.hits.empty() ? 0.0 : static_cast<double>(covered) / static_cast<double>(row.hits.size());
      res.coverage.push_back(std::move(row));
    }
    for (std::size_t a = 0; a < cfg.constant_targets.size(); ++a) {
      ConstantRow row{h, cfg.constant_targets[a], coefficient_name(spec, cfg.constant_targets[a]), {}, 0.0, 0.0};
      for (const auto& o : out)
        if (!o.error) row.values.push_back(o.constants[k][a]);
      detail::mean_sd(row.values, row.mean, row.sd);
      res.constants.push_back(std::move(row));
    }
    if (!cfg.glrt_null.empty()) {
      res.glrt_h.push_back(h);
      std::vector<double> s;
      for (const auto& o : out)
        if (!o.error) s.push_back(o.glrt[k]);
      res.glrt_statistic.push_back(std::move(s));
      res.glrt_dof.push_back(glrt_dof(spec, cfg.glrt_null.size(), h, cfg.fit.kernel));
    }
  }
  return res;
}

}  // namespace vcmoe
