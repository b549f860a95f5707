#include "manifest.hpp"

#include "vcmoe/bandwidth.hpp"
#include "vcmoe/fit.hpp"
#include "vcmoe/inference.hpp"
#include "vcmoe/io.hpp"
#include "vcmoe/simulate.hpp"
#include "vcmoe/study.hpp"
#include "vcmoe/version.hpp"

#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace {

using vcmoe::io::json;
using vcmoe::cli::RunManifest;

constexpr int exit_usage = 2;
constexpr int exit_data = 3;
constexpr int exit_numerical = 4;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

int exit_code(vcmoe::ErrorCode c) {
  using vcmoe::ErrorCode;
  switch (c) {
    case ErrorCode::InvalidArgument:
    case ErrorCode::UnknownCoefficient:
    case ErrorCode::InvalidModel:
    case ErrorCode::NonPositiveBandwidth:
    case ErrorCode::BandwidthGeqOne:
    case ErrorCode::PilotTooSmall:
    case ErrorCode::TooFewReplicates:
      return exit_usage;
    case ErrorCode::ParseError:
    case ErrorCode::SchemaError:
    case ErrorCode::DimensionMismatch:
    case ErrorCode::InvalidResponse:
    case ErrorCode::OutOfDomain:
    case ErrorCode::DegenerateIndex:
    case ErrorCode::InsufficientData:
    case ErrorCode::LengthMismatch:
      return exit_data;
    case ErrorCode::SingularHessian:
    case ErrorCode::NoEffectiveSamples:
    case ErrorCode::QuadratureFailure:
    case ErrorCode::AllFoldsFailed:
    case ErrorCode::TooManyFailures:
      return exit_numerical;
  }
  return exit_numerical;
}

void write_json(const json& j, const std::string& path) {
  if (path.empty() || path == "-") {
    std::cout << j.dump(2) << '\n';
    return;
  }
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write '" + path + "'");
  out << j.dump(2) << '\n';
}

std::ofstream open_out(const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write '" + path + "'");
  return out;
}

json envelope(const RunManifest& m) { return {{"schema_version", vcmoe::io::schema_version}, {"manifest", m.to_json()}}; }

// ---------------------------------------------------------------------------
// shared model and fit options

struct ModelOptions {
  int components = 2;
  std::string expert = "gaussian";
  int trials = 1;
  std::string gating;  // default: logistic for two components, softmax otherwise
  std::vector<std::string> constant;
  double h = 0.0;
  int grid_size = 100;
  int max_iter = 200;
  double tol = 1e-6;
  std::string rule = "mean_log_density";
  std::string init = "quantile";
  int starts = 1;
  bool rescale_index = false;
  std::optional<std::uint64_t> seed;
  unsigned threads = 1;

  void add_model(CLI::App* app) {
    app->add_option("--components", components, "number of mixture components")->check(CLI::Range(2, 50));
    app->add_option("--expert", expert, "expert family")->check(CLI::IsMember({"gaussian", "binomial"}));
    app->add_option("--trials", trials, "binomial trial count")->check(CLI::PositiveNumber);
    app->add_option("--gating", gating, "gating form")->check(CLI::IsMember({"logistic", "softmax"}));
    app->add_option("--constant", constant, "coefficient held constant over u (repeatable)");
  }
  void add_fit(CLI::App* app, bool need_h) {
    auto* o = app->add_option("--h", h, "bandwidth")->check(CLI::PositiveNumber);
    if (need_h) o->required();
    app->add_option("--grid-size", grid_size, "number of grid nodes on [0, 1]")->check(CLI::Range(2, 100000));
    app->add_option("--max-iter", max_iter, "EM iteration cap")->check(CLI::PositiveNumber);
    app->add_option("--tol", tol, "EM convergence tolerance")->check(CLI::PositiveNumber);
    app->add_option("--rule", rule, "convergence rule")->check(CLI::IsMember({"mean_log_density", "coefficient_sum"}));
    app->add_option("--init", init, "initial responsibilities")->check(CLI::IsMember({"quantile", "random"}));
    app->add_option("--starts", starts, "number of EM starts")->check(CLI::Range(1, 1000));
    app->add_flag("--rescale-index", rescale_index, "map the index column affinely onto [0, 1]");
  }
  void add_seed(CLI::App* app) {
    app->add_option("--seed", seed, "master seed (default: derived from the input digest)");
  }
  void add_threads(CLI::App* app) { app->add_option("--threads", threads, "worker threads (0: all cores)"); }

  vcmoe::ModelSpec spec(const vcmoe::Dataset& d) const {
    vcmoe::ModelSpec s;
    s.n_components = components;
    s.expert = expert == "binomial" ? vcmoe::ExpertFamily::Binomial : vcmoe::ExpertFamily::Gaussian;
    s.trials = trials;
    const std::string g = gating.empty() ? (components == 2 ? "logistic" : "softmax") : gating;
    s.gating = g == "logistic" ? vcmoe::GatingForm::Logistic : vcmoe::GatingForm::Softmax;
    s.p_x = static_cast<int>(d.X.cols());
    s.p_z = static_cast<int>(d.Z.cols());
    for (const auto& name : constant) s.constant_mask.push_back(vcmoe::parse_coefficient(s, name));
    s.validate();
    return s;
  }

  vcmoe::FitConfig config(std::uint64_t master_seed) const {
    vcmoe::FitConfig c;
    c.h = h;
    c.grid = vcmoe::equispaced_grid(grid_size);
    c.max_iter = max_iter;
    c.tol = tol;
    c.rule = rule == "coefficient_sum" ? vcmoe::ConvergenceRule::CoefficientSum : vcmoe::ConvergenceRule::MeanLogDensity;
    c.init = init == "random" ? vcmoe::InitMethod::Random : vcmoe::InitMethod::QuantileSplit;
    c.starts = starts;
    c.seed = master_seed;
    return c;
  }
};

struct LoadedData {
  vcmoe::Dataset data;
  std::string digest;
  std::optional<vcmoe::IndexMap> map;
};

LoadedData load_data(const std::string& path, bool rescale, const std::optional<vcmoe::IndexMap>& given = {}) {
  LoadedData out;
  out.data = vcmoe::io::read_csv_file(path);
  out.digest = vcmoe::cli::sha256_files({path});
  if (given) {
    for (Eigen::Index i = 0; i < out.data.size(); ++i) out.data.u(i) = given->forward(out.data.u(i));
    out.map = given;
  } else if (rescale) {
    auto [u, map] = vcmoe::rescale_index(out.data.u);
    out.data.u = u;
    out.map = map;
  }
  vcmoe::check_dataset(out.data);
  return out;
}

json map_json(const std::optional<vcmoe::IndexMap>& m) {
  if (!m) return nullptr;
  return {{"offset", m->offset}, {"scale", m->scale}};
}

std::optional<vcmoe::IndexMap> map_from(const json& j) {
  if (!j.contains("index_map") || j.at("index_map").is_null()) return std::nullopt;
  return vcmoe::IndexMap{j.at("index_map").at("offset").get<double>(), j.at("index_map").at("scale").get<double>()};
}

std::uint64_t resolve_seed(const std::optional<std::uint64_t>& s, const std::string& digest, RunManifest& m) {
  m.seed_derived = !s.has_value();
  m.seed = s ? *s : vcmoe::cli::seed_from_digest(digest);
  return m.seed;
}

std::vector<vcmoe::CoefficientId> parse_ids(const vcmoe::ModelSpec& spec, const std::vector<std::string>& names) {
  std::vector<vcmoe::CoefficientId> out;
  for (const auto& n : names) out.push_back(vcmoe::parse_coefficient(spec, n));
  return out;
}

void check_level(double level) {
  if (!(level > 0.0 && level < 1.0)) throw UsageError("--level must lie strictly between 0 and 1");
}

json band_json(const vcmoe::BandResult& b) {
  return {{"coefficient", b.name},
          {"method", vcmoe::to_string(b.method)},
          {"level", b.level},
          {"debias", b.debias},
          {"h_used", b.h_used},
          {"critical_value", b.critical_value},
          {"grid", b.grid},
          {"estimate", b.estimate},
          {"lower", b.lower},
          {"upper", b.upper},
          {"replicates_used", b.replicates_used},
          {"replicates_skipped", b.replicates_skipped},
          {"covariance",
           {{"clip_events", b.clip_events},
            {"pseudo_inverse_nodes", b.pseudo_inverse_nodes},
            {"indefinite_nodes", b.indefinite_nodes}}}};
}

void write_band_csv(const vcmoe::BandResult& b, const std::string& path) {
  auto out = open_out(path);
  out << "u,estimate,lower,upper\n";
  for (std::size_t j = 0; j < b.grid.size(); ++j)
    out << vcmoe::io::format_double(b.grid[j]) << ',' << vcmoe::io::format_double(b.estimate[j]) << ','
        << vcmoe::io::format_double(b.lower[j]) << ',' << vcmoe::io::format_double(b.upper[j]) << '\n';
}

// ---------------------------------------------------------------------------
// subcommands

struct SimulateCmd {
  std::string scenario = "sim1";
  long n = 500;
  std::uint64_t seed = 0;
  std::vector<double> constant_beta;
  std::string out, manifest;

  void add(CLI::App& root) {
    auto* c = root.add_subcommand("simulate", "draw a data set from a built-in scenario");
    c->add_option("--scenario", scenario)->check(CLI::IsMember({"sim1", "sim2", "sim3"}));
    c->add_option("--n", n, "sample size")->check(CLI::PositiveNumber);
    c->add_option("--seed", seed, "seed")->required();
    c->add_option("--constant-beta", constant_beta, "replace the gating functions by constants")->delimiter(',');
    c->add_option("--out", out, "CSV output")->required();
    c->add_option("--manifest", manifest, "JSON summary (default stdout)");
    c->callback([this] { run(); });
  }

  void run() {
    RunManifest m;
    m.command = "simulate";
    m.version = vcmoe::version;
    m.seed = seed;
    vcmoe::Scenario s{vcmoe::parse_scenario(scenario)};
    if (!constant_beta.empty()) s.constant_beta = constant_beta;
    m.config = {{"scenario", scenario}, {"n", n}, {"constant_beta", constant_beta}};
    const auto sim = vcmoe::generate(s, n, seed);
    {
      auto f = open_out(out);
      vcmoe::io::write_csv(f, sim.data);
    }
    m.input_digest = vcmoe::cli::sha256_files({out});
    json j = envelope(m);
    j["output"] = out;
    j["model"] = vcmoe::io::to_json(vcmoe::scenario_model(s));
    write_json(j, manifest);
  }
};

struct FitCmd {
  ModelOptions opt;
  std::string data, out;

  void add(CLI::App& root) {
    auto* c = root.add_subcommand("fit", "fit the varying-coefficient mixture of experts");
    c->add_option("--data", data, "input CSV")->required();
    c->add_option("--out", out, "fit JSON (default stdout)");
    opt.add_model(c);
    opt.add_fit(c, true);
    opt.add_seed(c);
    c->callback([this] { run(); });
  }

  void run() {
    RunManifest m;
    m.command = "fit";
    m.version = vcmoe::version;
    const auto ld = load_data(data, opt.rescale_index);
    m.input_digest = ld.digest;
    const auto spec = opt.spec(ld.data);
    const auto cfg = opt.config(resolve_seed(opt.seed, ld.digest, m));
    m.config = vcmoe::io::to_json(cfg);
    const auto curve = vcmoe::fit_vcmoe(spec, ld.data, cfg);
    json j = envelope(m);
    j["model"] = vcmoe::io::to_json(spec);
    j["config"] = vcmoe::io::to_json(cfg);
    j["index_map"] = map_json(ld.map);
    j["log_likelihood"] = vcmoe::log_likelihood(spec, curve, ld.data);
    j["curve"] = vcmoe::io::to_json(spec, curve);
    write_json(j, out);
  }
};

struct CvCmd {
  ModelOptions opt;
  std::string data, out;
  std::vector<double> candidates;

  void add(CLI::App& root) {
    auto* c = root.add_subcommand("cv", "leave-one-out likelihood cross-validation over bandwidths");
    c->add_option("--data", data, "input CSV")->required();
    c->add_option("--candidates", candidates, "comma-separated bandwidths (default: rule-of-thumb grid)")
        ->delimiter(',');
    c->add_option("--out", out, "report JSON (default stdout)");
    opt.add_model(c);
    opt.add_fit(c, false);
    opt.add_seed(c);
    opt.add_threads(c);
    c->callback([this, c] {
      if (c->count("--candidates") > 0 && candidates.empty()) throw UsageError("--candidates is empty");
      run();
    });
  }

  void run() {
    RunManifest m;
    m.command = "cv";
    m.version = vcmoe::version;
    const auto ld = load_data(data, opt.rescale_index);
    m.input_digest = ld.digest;
    const auto spec = opt.spec(ld.data);
    const auto cfg = opt.config(resolve_seed(opt.seed, ld.digest, m));
    const auto cand = candidates.empty() ? vcmoe::default_candidates(ld.data) : candidates;
    m.config = vcmoe::io::to_json(cfg);
    m.config["threads"] = opt.threads;
    const auto r = vcmoe::select_bandwidth(spec, ld.data, cand, cfg, opt.threads);
    json j = envelope(m);
    j["model"] = vcmoe::io::to_json(spec);
    j["candidates"] = r.candidates;
    j["scores"] = r.scores;
    j["failed_folds"] = r.failed_folds;
    j["best_h"] = r.best_h;
    write_json(j, out);
  }
};

struct FitFile {
  vcmoe::ModelSpec spec;
  vcmoe::FitConfig config;
  vcmoe::ThetaCurve curve;
  std::optional<vcmoe::IndexMap> map;
  std::string digest;
};

FitFile load_fit(const std::string& path) {
  const json j = vcmoe::io::read_json_file(path);
  FitFile f;
  f.spec = vcmoe::io::spec_from_json(j.at("model"));
  f.config = vcmoe::io::config_from_json(j.at("config"));
  f.curve = vcmoe::io::curve_from_json(f.spec, j.at("curve"));
  f.config.grid = f.curve.grid;
  f.map = map_from(j);
  f.digest = vcmoe::cli::sha256_files({path});
  return f;
}

struct BandCmd {
  std::string fit, data, coefficient, method = "asymptotic", out, plot;
  double level = 0.95;
  std::optional<int> M1, M2;
  std::optional<std::uint64_t> seed;
  unsigned threads = 1;
  bool debias = false;
  double pilot_h = 0.0;
  double undersmooth = 0.85;

  void add(CLI::App& root) {
    auto* c = root.add_subcommand("band", "simultaneous confidence band for one coefficient function");
    c->add_option("--fit", fit, "fit JSON")->required();
    c->add_option("--data", data, "CSV the fit was computed from")->required();
    c->add_option("--coefficient", coefficient, "coefficient name, e.g. alpha10")->required();
    c->add_option("--method", method)->check(CLI::IsMember({"asymptotic", "bootstrap"}));
    c->add_option("--level", level, "confidence level in (0, 1)");
    c->add_option("--M1", M1, "bootstrap replicates for the variance");
    c->add_option("--M2", M2, "bootstrap replicates for the critical value");
    c->add_option("--seed", seed, "bootstrap seed (default: derived from the inputs)");
    c->add_option("--threads", threads, "worker threads (0: all cores)");
    c->add_flag("--debias", debias, "subtract the estimated bias instead of undersmoothing");
    c->add_option("--pilot-h", pilot_h, "pilot bandwidth for the bias (default 2h)");
    c->add_option("--undersmooth", undersmooth, "band bandwidth as a fraction of the fit bandwidth")
        ->check(CLI::Range(0.05, 1.0));
    c->add_option("--out", out, "band JSON (default stdout)");
    c->add_option("--plot", plot, "plot-data CSV (u, estimate, lower, upper)");
    c->callback([this] {
      check_level(level);
      if (method == "bootstrap" && (!M1 || !M2)) throw UsageError("bootstrap bands need --M1 and --M2");
      run();
    });
  }

  void run() {
    RunManifest m;
    m.command = "band";
    m.version = vcmoe::version;
    const FitFile ff = load_fit(fit);
    const auto ld = load_data(data, false, ff.map);
    m.input_digest = vcmoe::cli::sha256_files({fit, data});
    const auto id = vcmoe::parse_coefficient(ff.spec, coefficient);
    vcmoe::FitConfig cfg = ff.config;
    vcmoe::ThetaCurve curve = ff.curve;
    if (!debias && undersmooth < 1.0) {
      cfg.h = undersmooth * ff.curve.h;
      curve = vcmoe::fit_vcmoe(ff.spec, ld.data, cfg, &ff.curve);
    }
    m.config = {{"method", method}, {"level", level}, {"debias", debias}, {"h_fit", ff.curve.h}, {"h_band", cfg.h}};
    vcmoe::BandResult b;
    if (method == "asymptotic") {
      b = vcmoe::asymptotic_band(ff.spec, curve, ld.data, id, level, debias, pilot_h);
      if (debias) m.config["pilot_h"] = pilot_h > 0.0 ? pilot_h : 2.0 * cfg.h;
    } else {
      vcmoe::BootstrapOptions o;
      o.M1 = *M1;
      o.M2 = *M2;
      o.seed = resolve_seed(seed, m.input_digest, m);
      o.threads = threads;
      m.config["M1"] = o.M1;
      m.config["M2"] = o.M2;
      m.config["threads"] = threads;
      b = vcmoe::bootstrap_band(ff.spec, curve, ld.data, cfg, id, level, o);
    }
    json j = envelope(m);
    j["band"] = band_json(b);
    if (method == "bootstrap") {
      j["band"]["M1"] = *M1;
      j["band"]["M2"] = *M2;
      j["band"]["seed"] = m.seed;
    }
    write_json(j, out);
    if (!plot.empty()) write_band_csv(b, plot);
  }
};

struct TestCmd {
  ModelOptions opt;
  std::string data, fit, method = "glrt", out;
  std::vector<std::string> coefficients;
  double level = 0.95;
  std::optional<int> M1, M2;
  bool debias = false;

  void add(CLI::App& root) {
    auto* c = root.add_subcommand("test", "test whether coefficient functions are constant");
    c->add_option("--data", data, "input CSV")->required();
    c->add_option("--fit", fit, "fit JSON supplying model and settings (otherwise use model flags and --h)");
    c->add_option("--method", method)->check(CLI::IsMember({"asymptotic", "bootstrap", "glrt"}));
    c->add_option("--coefficient", coefficients, "coefficient under the null (repeatable for glrt)")->required();
    c->add_option("--level", level, "confidence level in (0, 1)");
    c->add_option("--M1", M1, "bootstrap replicates for the variance");
    c->add_option("--M2", M2, "bootstrap replicates for the critical value");
    c->add_flag("--debias", debias, "subtract the estimated bias in the asymptotic statistic");
    c->add_option("--out", out, "result JSON (default stdout)");
    opt.add_model(c);
    opt.add_fit(c, false);
    opt.add_seed(c);
    opt.add_threads(c);
    c->callback([this] {
      check_level(level);
      if (method != "glrt" && coefficients.size() != 1) throw UsageError("this method tests exactly one coefficient");
      if (method == "bootstrap" && (!M1 || !M2)) throw UsageError("bootstrap test needs --M1 and --M2");
      if (fit.empty() && !(opt.h > 0.0)) throw UsageError("give --fit or --h");
      run();
    });
  }

  void run() {
    RunManifest m;
    m.command = "test";
    m.version = vcmoe::version;
    vcmoe::ModelSpec spec;
    vcmoe::FitConfig cfg;
    LoadedData ld;
    if (!fit.empty()) {
      const FitFile ff = load_fit(fit);
      ld = load_data(data, false, ff.map);
      spec = ff.spec;
      cfg = ff.config;
      m.input_digest = vcmoe::cli::sha256_files({fit, data});
      cfg.seed = resolve_seed(opt.seed ? opt.seed : std::optional<std::uint64_t>(ff.config.seed), m.input_digest, m);
    } else {
      ld = load_data(data, opt.rescale_index);
      m.input_digest = ld.digest;
      spec = opt.spec(ld.data);
      cfg = opt.config(resolve_seed(opt.seed, ld.digest, m));
    }
    const auto ids = parse_ids(spec, coefficients);
    m.config = vcmoe::io::to_json(cfg);
    m.config["method"] = method;
    m.config["level"] = level;
    vcmoe::TestResult r;
    if (method == "asymptotic") {
      r = vcmoe::test_constancy_asymptotic(spec, ld.data, cfg, ids.front(), level, debias);
    } else if (method == "bootstrap") {
      vcmoe::BootstrapOptions o;
      o.M1 = *M1;
      o.M2 = *M2;
      o.seed = m.seed;
      o.threads = opt.threads;
      r = vcmoe::test_constancy_bootstrap(spec, ld.data, cfg, ids.front(), level, o);
    } else {
      r = vcmoe::test_constancy_glrt(spec, ld.data, cfg, ids, level);
    }
    json res = {{"null_set", r.names},
                {"method", vcmoe::to_string(r.method)},
                {"statistic", r.statistic},
                {"reference", vcmoe::to_string(r.reference)},
                {"reference_value", r.reference_value},
                {"p_value", r.p_value ? json(*r.p_value) : json(nullptr)},
                {"level", r.level},
                {"reject", r.reject},
                {"h", r.h}};
    json constants = json::object();
    for (const auto& [id, v] : r.constants) constants[vcmoe::coefficient_name(spec, id)] = v;
    res["constants"] = constants;
    if (method == "glrt") {
      res["dof"] = r.reference_value;
      res["lambda"] = r.lambda;
      res["log_lik_null"] = r.log_lik_null;
      res["log_lik_alt"] = r.log_lik_alt;
    }
    if (method == "bootstrap") {
      res["M1"] = *M1;
      res["M2"] = *M2;
      res["seed"] = m.seed;
      res["replicates_used"] = r.replicates_used;
      res["replicates_skipped"] = r.replicates_skipped;
    }
    json j = envelope(m);
    j["model"] = vcmoe::io::to_json(spec);
    j["test"] = res;
    write_json(j, out);
  }
};

struct StudyCmd {
  std::string scenario = "sim1", out, table, wilks, coverage_csv;
  int replicates = 50;
  long n = 500;
  std::vector<double> h_list{0.21};
  std::uint64_t seed = 0;
  unsigned threads = 1;
  int starts = 1;
  std::vector<std::string> bands;
  std::vector<double> levels{0.95};
  std::vector<std::string> band_coefficients;
  int M1 = 200, M2 = 200;
  std::vector<double> constant_beta;
  std::vector<std::string> glrt_null, constant_targets;

  void add(CLI::App& root) {
    auto* c = root.add_subcommand("study", "Monte Carlo study on a built-in scenario");
    c->add_option("--scenario", scenario)->check(CLI::IsMember({"sim1", "sim2", "sim3"}));
    c->add_option("--replicates", replicates)->check(CLI::PositiveNumber);
    c->add_option("--n", n, "sample size")->check(CLI::PositiveNumber);
    c->add_option("--h", h_list, "comma-separated bandwidths")->delimiter(',');
    c->add_option("--seed", seed, "master seed")->required();
    c->add_option("--threads", threads, "worker threads (0: all cores)");
    c->add_option("--starts", starts, "EM starts per fit")->check(CLI::Range(1, 1000));
    c->add_option("--bands", bands, "band methods to score: asymptotic,bootstrap")
        ->delimiter(',')
        ->check(CLI::IsMember({"asymptotic", "bootstrap"}));
    c->add_option("--levels", levels, "band levels")->delimiter(',');
    c->add_option("--band-coefficients", band_coefficients, "coefficients for bands")->delimiter(',');
    c->add_option("--M1", M1, "bootstrap replicates for the variance");
    c->add_option("--M2", M2, "bootstrap replicates for the critical value");
    c->add_option("--constant-beta", constant_beta, "constant gating truth")->delimiter(',');
    c->add_option("--glrt-null", glrt_null, "coefficients for the likelihood-ratio null sample")->delimiter(',');
    c->add_option("--constant-targets", constant_targets, "coefficients estimated as constants")->delimiter(',');
    c->add_option("--out", out, "summary JSON (default stdout)");
    c->add_option("--table", table, "RASE table CSV (coefficient, h, mean, sd)");
    c->add_option("--coverage", coverage_csv, "coverage CSV");
    c->add_option("--wilks", wilks, "likelihood-ratio sample CSV (h, replicate, statistic)");
    c->callback([this] {
      for (double l : levels) check_level(l);
      if (!bands.empty() && band_coefficients.empty()) throw UsageError("--bands needs --band-coefficients");
      run();
    });
  }

  void run() {
    RunManifest m;
    m.command = "study";
    m.version = vcmoe::version;
    m.seed = seed;
    vcmoe::StudyConfig sc;
    sc.scenario.id = vcmoe::parse_scenario(scenario);
    if (!constant_beta.empty()) sc.scenario.constant_beta = constant_beta;
    const auto spec = vcmoe::scenario_model(sc.scenario);
    sc.replicates = replicates;
    sc.n = n;
    sc.h_list = h_list;
    sc.fit.starts = starts;
    sc.seed = seed;
    sc.threads = threads;
    sc.band_targets = parse_ids(spec, band_coefficients);
    sc.band_levels = levels;
    for (const auto& b : bands) {
      if (b == "asymptotic") sc.asymptotic_bands = true;
      if (b == "bootstrap") sc.bootstrap_bands = true;
    }
    sc.bootstrap.M1 = M1;
    sc.bootstrap.M2 = M2;
    sc.glrt_null = parse_ids(spec, glrt_null);
    sc.constant_targets = parse_ids(spec, constant_targets);
    m.config = {{"scenario", scenario}, {"replicates", replicates}, {"n", n}, {"h", h_list}, {"starts", starts},
                {"bands", bands}, {"levels", levels}, {"band_coefficients", band_coefficients}, {"M1", M1},
                {"M2", M2}, {"constant_beta", constant_beta}, {"glrt_null", glrt_null},
                {"constant_targets", constant_targets}, {"threads", threads}};
    const auto r = vcmoe::run_study(sc);

    json j = envelope(m);
    j["successful"] = r.successful;
    j["failed"] = r.failed;
    j["failures"] = r.failures;
    json rase = json::array();
    for (const auto& row : r.rase)
      rase.push_back({{"coefficient", row.name}, {"h", row.h}, {"mean", row.mean}, {"sd", row.sd}});
    j["rase"] = rase;
    json cov = json::array();
    for (const auto& row : r.coverage)
      cov.push_back({{"coefficient", row.name}, {"h", row.h}, {"method", vcmoe::to_string(row.method)},
                     {"level", row.level}, {"coverage", row.rate}, {"replicates", row.hits.size()}});
    j["coverage"] = cov;
    json cons = json::array();
    for (const auto& row : r.constants)
      cons.push_back({{"coefficient", row.name}, {"h", row.h}, {"mean", row.mean}, {"sd", row.sd}});
    j["constants"] = cons;
    json gl = json::array();
    for (std::size_t k = 0; k < r.glrt_h.size(); ++k) {
      double mean = 0.0;
      for (double v : r.glrt_statistic[k]) mean += v;
      if (!r.glrt_statistic[k].empty()) mean /= static_cast<double>(r.glrt_statistic[k].size());
      gl.push_back({{"h", r.glrt_h[k]}, {"dof", r.glrt_dof[k]}, {"mean_statistic", mean}});
    }
    j["glrt"] = gl;
    write_json(j, out);

    using vcmoe::io::format_double;
    if (!table.empty()) {
      auto f = open_out(table);
      f << "coefficient,h,mean,sd\n";
      for (const auto& row : r.rase)
        f << row.name << ',' << format_double(row.h) << ',' << format_double(row.mean) << ',' << format_double(row.sd) << '\n';
    }
    if (!coverage_csv.empty()) {
      auto f = open_out(coverage_csv);
      f << "coefficient,h,method,level,coverage\n";
      for (const auto& row : r.coverage)
        f << row.name << ',' << format_double(row.h) << ',' << vcmoe::to_string(row.method) << ','
          << format_double(row.level) << ',' << format_double(row.rate) << '\n';
    }
    if (!wilks.empty()) {
      auto f = open_out(wilks);
      f << "h,replicate,statistic\n";
      for (std::size_t k = 0; k < r.glrt_h.size(); ++k)
        for (std::size_t i = 0; i < r.glrt_statistic[k].size(); ++i)
          f << format_double(r.glrt_h[k]) << ',' << i << ',' << format_double(r.glrt_statistic[k][i]) << '\n';
    }
  }
};

struct PlotDataCmd {
  std::string fit, band, out;
  std::vector<std::string> coefficients;

  void add(CLI::App& root) {
    auto* c = root.add_subcommand("plot-data", "export curves or bands as CSV for plotting");
    auto* f = c->add_option("--fit", fit, "fit JSON: one column per coefficient");
    auto* b = c->add_option("--band", band, "band JSON: u, estimate, lower, upper");
    f->excludes(b);
    c->add_option("--coefficients", coefficients, "subset of coefficients (fit only)")->delimiter(',');
    c->add_option("--out", out, "CSV output")->required();
    c->callback([this] {
      if (fit.empty() == band.empty()) throw UsageError("give exactly one of --fit or --band");
      run();
    });
  }

  void run() {
    using vcmoe::io::format_double;
    if (!band.empty()) {
      const json j = vcmoe::io::read_json_file(band);
      vcmoe::BandResult b;
      vcmoe::io::detail::schema_guard("band", [&] {
        const json& bj = j.at("band");
        b.grid = bj.at("grid").get<std::vector<double>>();
        b.estimate = bj.at("estimate").get<std::vector<double>>();
        b.lower = bj.at("lower").get<std::vector<double>>();
        b.upper = bj.at("upper").get<std::vector<double>>();
        return 0;
      });
      write_band_csv(b, out);
      return;
    }
    const FitFile ff = load_fit(fit);
    const auto ids = coefficients.empty() ? ff.spec.coefficients() : parse_ids(ff.spec, coefficients);
    auto f = open_out(out);
    f << "u";
    for (const auto& id : ids) f << ',' << vcmoe::coefficient_name(ff.spec, id);
    f << '\n';
    for (std::size_t k = 0; k < ff.curve.grid.size(); ++k) {
      const double u = ff.map ? ff.map->inverse(ff.curve.grid[k]) : ff.curve.grid[k];
      f << format_double(u);
      for (const auto& id : ids) f << ',' << format_double(ff.curve.points[k].value(id));
      f << '\n';
    }
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Varying-coefficient mixture-of-experts estimation and inference"};
  app.require_subcommand(1);
  app.set_help_flag("--help", "print this help and exit");  // -h would clash with --h
  app.set_version_flag("--version", vcmoe::version);
  SimulateCmd simulate;
  FitCmd fit;
  CvCmd cv;
  BandCmd band;
  TestCmd test;
  StudyCmd study;
  PlotDataCmd plot;
  simulate.add(app);
  fit.add(app);
  cv.add(app);
  band.add(app);
  test.add(app);
  study.add(app);
  plot.add(app);
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : exit_usage;
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return exit_usage;
  } catch (const vcmoe::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_code(e.code());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_data;
  }
  return 0;
}
