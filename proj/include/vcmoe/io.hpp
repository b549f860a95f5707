#pragma once

// CSV and JSON exchange formats. JSON support uses nlohmann/json, which the
// including target must put on its include path.

#include "vcmoe/dataset.hpp"
#include "vcmoe/error.hpp"
#include "vcmoe/fit.hpp"
#include "vcmoe/model.hpp"

#include <json.hpp>

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

namespace vcmoe::io {

using json = nlohmann::json;

inline constexpr int schema_version = 1;

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

//! 17 significant digits, enough to read back the same double.
inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

namespace detail {

inline std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

inline std::string trim(std::string s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return {};
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

inline double parse_cell(const std::string& raw, std::size_t row, const std::string& column) {
  const std::string s = trim(raw);
  double v = 0.0;
  const auto* first = s.data();
  const auto* last = s.data() + s.size();
  if (!s.empty() && *first == '+') ++first;
  const auto res = std::from_chars(first, last, v);
  if (s.empty() || res.ec != std::errc() || res.ptr != last)
    fail(ErrorCode::ParseError, "row " + std::to_string(row) + ", column '" + column + "': cannot parse '" + s + "'");
  return v;
}

//! Index k when `name` is prefix followed by a decimal number.
inline std::optional<int> numbered(const std::string& name, char prefix) {
  if (name.size() < 2 || name[0] != prefix) return std::nullopt;
  int k = 0;
  const auto res = std::from_chars(name.data() + 1, name.data() + name.size(), k);
  if (res.ec != std::errc() || res.ptr != name.data() + name.size() || k < 0) return std::nullopt;
  return k;
}

}  // namespace detail

//! Reads a header row naming u, y, x0..x{p-1} and z0..z{q-1} (any order;
//! other columns are ignored). Rows are numbered from 1 after the header.
inline Dataset read_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) fail(ErrorCode::SchemaError, "empty input: header row missing");
  const auto header = detail::split_line(line);
  std::map<std::string, std::size_t> col;
  for (std::size_t k = 0; k < header.size(); ++k) col[detail::trim(header[k])] = k;
  for (const char* need : {"u", "y", "x0", "z0"})
    if (!col.count(need)) fail(ErrorCode::SchemaError, std::string("missing column '") + need + "'");
  int p_x = 0, p_z = 0;
  for (const auto& [name, k] : col) {
    if (auto j = detail::numbered(name, 'x')) p_x = std::max(p_x, *j + 1);
    if (auto j = detail::numbered(name, 'z')) p_z = std::max(p_z, *j + 1);
  }
  for (int j = 0; j < p_x; ++j)
    if (!col.count("x" + std::to_string(j))) fail(ErrorCode::SchemaError, "missing column 'x" + std::to_string(j) + "'");
  for (int j = 0; j < p_z; ++j)
    if (!col.count("z" + std::to_string(j))) fail(ErrorCode::SchemaError, "missing column 'z" + std::to_string(j) + "'");

  std::vector<double> u, y, X, Z;
  std::size_t row = 0;
  while (std::getline(in, line)) {
    ++row;
    if (detail::trim(line).empty()) continue;
    const auto cells = detail::split_line(line);
    if (cells.size() != header.size())
      fail(ErrorCode::ParseError, "row " + std::to_string(row) + ": expected " + std::to_string(header.size()) +
                                      " fields, found " + std::to_string(cells.size()));
    u.push_back(detail::parse_cell(cells[col["u"]], row, "u"));
    y.push_back(detail::parse_cell(cells[col["y"]], row, "y"));
    for (int j = 0; j < p_x; ++j) {
      const std::string name = "x" + std::to_string(j);
      X.push_back(detail::parse_cell(cells[col[name]], row, name));
    }
    for (int j = 0; j < p_z; ++j) {
      const std::string name = "z" + std::to_string(j);
      Z.push_back(detail::parse_cell(cells[col[name]], row, name));
    }
  }
  const auto n = static_cast<Eigen::Index>(u.size());
  Dataset d;
  d.u = Eigen::Map<Eigen::VectorXd>(u.data(), n);
  d.y = Eigen::Map<Eigen::VectorXd>(y.data(), n);
  d.X = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(X.data(), n, p_x);
  d.Z = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(Z.data(), n, p_z);
  return d;
}

inline Dataset read_csv_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::ParseError, "cannot open '" + path + "'");
  return read_csv(in);
}

inline void write_csv(std::ostream& out, const Dataset& d) {
  out << "u,y";
  for (Eigen::Index j = 0; j < d.X.cols(); ++j) out << ",x" << j;
  for (Eigen::Index j = 0; j < d.Z.cols(); ++j) out << ",z" << j;
  out << '\n';
  for (Eigen::Index i = 0; i < d.size(); ++i) {
    out << format_double(d.u(i)) << ',' << format_double(d.y(i));
    for (Eigen::Index j = 0; j < d.X.cols(); ++j) out << ',' << format_double(d.X(i, j));
    for (Eigen::Index j = 0; j < d.Z.cols(); ++j) out << ',' << format_double(d.Z(i, j));
    out << '\n';
  }
}

// ---------------------------------------------------------------------------
// JSON
// ---------------------------------------------------------------------------

inline json matrix_to_json(const Eigen::MatrixXd& m) {
  json a = json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    json row = json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    a.push_back(std::move(row));
  }
  return a;
}

inline json vector_to_json(const Eigen::VectorXd& v) {
  json a = json::array();
  for (Eigen::Index k = 0; k < v.size(); ++k) a.push_back(v(k));
  return a;
}

namespace detail {

template <class F>
auto schema_guard(const std::string& what, F&& f) {
  try {
    return f();
  } catch (const json::exception& e) {
    fail(ErrorCode::SchemaError, what + ": " + e.what());
  }
}

inline Eigen::MatrixXd matrix_from_json(const json& a, Eigen::Index rows, Eigen::Index cols, const char* field) {
  if (!a.is_array() || static_cast<Eigen::Index>(a.size()) != rows)
    fail(ErrorCode::SchemaError, std::string("field '") + field + "' has the wrong shape");
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const json& row = a[static_cast<std::size_t>(r)];
    if (!row.is_array() || static_cast<Eigen::Index>(row.size()) != cols)
      fail(ErrorCode::SchemaError, std::string("field '") + field + "' has the wrong shape");
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = row[static_cast<std::size_t>(c)].get<double>();
  }
  return m;
}

inline Eigen::VectorXd vector_from_json(const json& a, Eigen::Index size, const char* field) {
  if (!a.is_array() || static_cast<Eigen::Index>(a.size()) != size)
    fail(ErrorCode::SchemaError, std::string("field '") + field + "' has the wrong length");
  Eigen::VectorXd v(size);
  for (Eigen::Index k = 0; k < size; ++k) v(k) = a[static_cast<std::size_t>(k)].get<double>();
  return v;
}

}  // namespace detail

inline json to_json(const ModelSpec& spec) {
  json mask = json::array();
  for (const auto& id : spec.constant_mask) mask.push_back(coefficient_name(spec, id));
  return {{"n_components", spec.n_components},
          {"expert", spec.expert == ExpertFamily::Gaussian ? "gaussian" : "binomial"},
          {"trials", spec.trials},
          {"gating", spec.gating == GatingForm::Logistic ? "logistic" : "softmax"},
          {"p_x", spec.p_x},
          {"p_z", spec.p_z},
          {"constant", mask}};
}

inline ModelSpec spec_from_json(const json& j) {
  return detail::schema_guard("model", [&] {
    ModelSpec s;
    s.n_components = j.at("n_components").get<int>();
    const auto expert = j.at("expert").get<std::string>();
    if (expert != "gaussian" && expert != "binomial") fail(ErrorCode::SchemaError, "unknown expert family '" + expert + "'");
    s.expert = expert == "gaussian" ? ExpertFamily::Gaussian : ExpertFamily::Binomial;
    s.trials = j.at("trials").get<int>();
    const auto gating = j.at("gating").get<std::string>();
    if (gating != "logistic" && gating != "softmax") fail(ErrorCode::SchemaError, "unknown gating form '" + gating + "'");
    s.gating = gating == "logistic" ? GatingForm::Logistic : GatingForm::Softmax;
    s.p_x = j.at("p_x").get<int>();
    s.p_z = j.at("p_z").get<int>();
    for (const auto& name : j.at("constant")) s.constant_mask.push_back(parse_coefficient(s, name.get<std::string>()));
    s.validate();
    return s;
  });
}

inline json to_json(const FitConfig& c) {
  return {{"h", c.h},
          {"grid_size", c.grid.empty() ? 100 : static_cast<int>(c.grid.size())},
          {"max_iter", c.max_iter},
          {"tol", c.tol},
          {"rule", c.rule == ConvergenceRule::MeanLogDensity ? "mean_log_density" : "coefficient_sum"},
          {"init", c.init == InitMethod::QuantileSplit ? "quantile" : c.init == InitMethod::Random ? "random" : "provided"},
          {"starts", c.starts},
          {"seed", c.seed},
          {"newton_max_iter", c.newton_max_iter},
          {"newton_grad_tol", c.newton_grad_tol},
          {"max_damping", c.max_damping},
          {"min_delta", c.min_delta}};
}

inline FitConfig config_from_json(const json& j) {
  return detail::schema_guard("config", [&] {
    FitConfig c;
    c.h = j.at("h").get<double>();
    c.max_iter = j.at("max_iter").get<int>();
    c.tol = j.at("tol").get<double>();
    c.rule = j.at("rule").get<std::string>() == "coefficient_sum" ? ConvergenceRule::CoefficientSum
                                                                   : ConvergenceRule::MeanLogDensity;
    const auto init = j.at("init").get<std::string>();
    c.init = init == "random" ? InitMethod::Random : InitMethod::QuantileSplit;
    c.starts = j.value("starts", 1);
    c.seed = j.at("seed").get<std::uint64_t>();
    c.newton_max_iter = j.at("newton_max_iter").get<int>();
    c.newton_grad_tol = j.at("newton_grad_tol").get<double>();
    c.max_damping = j.at("max_damping").get<double>();
    c.min_delta = j.at("min_delta").get<double>();
    return c;
  });
}

//! Curve with every node's values and slopes, plus per-coefficient columns on
//! the natural scale for plotting.
inline json to_json(const ModelSpec& spec, const ThetaCurve& curve) {
  json nodes = json::array();
  for (const auto& p : curve.points)
    nodes.push_back({{"beta", matrix_to_json(p.beta)},
                     {"beta_slope", matrix_to_json(p.beta_slope)},
                     {"alpha", matrix_to_json(p.alpha)},
                     {"alpha_slope", matrix_to_json(p.alpha_slope)},
                     {"log_delta", vector_to_json(p.log_delta)},
                     {"log_delta_slope", vector_to_json(p.log_delta_slope)}});
  json coef = json::object();
  for (const auto& id : spec.coefficients()) coef[coefficient_name(spec, id)] = curve.coefficient(id);
  json constants = json::object();
  for (const auto& [id, v] : curve.constants) constants[coefficient_name(spec, id)] = v;
  json resp = json::object();
  if (curve.responsibilities.size() > 0) {
    resp["n"] = curve.responsibilities.rows();
    resp["component_mean"] = vector_to_json(curve.responsibilities.colwise().mean().transpose());
  }
  return {{"h", curve.h},
          {"grid", curve.grid},
          {"coefficients", coef},
          {"constants", constants},
          {"nodes", nodes},
          {"responsibilities", resp},
          {"converged", curve.converged},
          {"n_iter", curve.n_iter},
          {"loglik_trace", curve.loglik_trace},
          {"degenerate_events", curve.degenerate_events},
          {"max_damping_used", curve.max_damping_used}};
}

inline ThetaCurve curve_from_json(const ModelSpec& spec, const json& j) {
  return detail::schema_guard("curve", [&] {
    ThetaCurve c;
    c.h = j.at("h").get<double>();
    c.grid = j.at("grid").get<std::vector<double>>();
    const auto& nodes = j.at("nodes");
    if (nodes.size() != c.grid.size()) fail(ErrorCode::SchemaError, "node count differs from grid size");
    const Eigen::Index G = spec.n_components - 1, C = spec.n_components;
    for (const auto& n : nodes) {
      ThetaPoint p = ThetaPoint::zero(spec);
      p.beta = detail::matrix_from_json(n.at("beta"), G, spec.p_x, "beta");
      p.beta_slope = detail::matrix_from_json(n.at("beta_slope"), G, spec.p_x, "beta_slope");
      p.alpha = detail::matrix_from_json(n.at("alpha"), C, spec.p_z, "alpha");
      p.alpha_slope = detail::matrix_from_json(n.at("alpha_slope"), C, spec.p_z, "alpha_slope");
      p.log_delta = detail::vector_from_json(n.at("log_delta"), C, "log_delta");
      p.log_delta_slope = detail::vector_from_json(n.at("log_delta_slope"), C, "log_delta_slope");
      c.points.push_back(std::move(p));
    }
    for (const auto& [name, v] : j.at("constants").items())
      c.constants.emplace_back(parse_coefficient(spec, name), v.get<double>());
    c.converged = j.at("converged").get<bool>();
    c.n_iter = j.at("n_iter").get<int>();
    c.loglik_trace = j.at("loglik_trace").get<std::vector<double>>();
    c.degenerate_events = j.at("degenerate_events").get<int>();
    c.max_damping_used = j.at("max_damping_used").get<double>();
    return c;
  });
}

inline json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::ParseError, "cannot open '" + path + "'");
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    fail(ErrorCode::ParseError, "'" + path + "': " + e.what());
  }
}

}  // namespace vcmoe::io
