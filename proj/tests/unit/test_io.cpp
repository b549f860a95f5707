#include "common.hpp"

#include "vcmoe/io.hpp"
#include "vcmoe/simulate.hpp"

#include <gtest/gtest.h>

#include <sstream>

using namespace vcmoe;
using testutil::code_of;

namespace {
const Scenario sim1{ScenarioId::Sim1, std::nullopt};
}

TEST(Csv, RoundTripIsBitExact) {
  const auto sd = generate(sim1, 120, 2);
  std::stringstream ss;
  io::write_csv(ss, sd.data);
  const Dataset back = io::read_csv(ss);
  EXPECT_TRUE((back.u.array() == sd.data.u.array()).all());
  EXPECT_TRUE((back.y.array() == sd.data.y.array()).all());
  EXPECT_TRUE((back.X.array() == sd.data.X.array()).all());
  EXPECT_TRUE((back.Z.array() == sd.data.Z.array()).all());
}

TEST(Csv, FitFromFileMatchesFitFromMemory) {
  const auto sd = generate(sim1, 250, 3);
  std::stringstream ss;
  io::write_csv(ss, sd.data);
  const Dataset back = io::read_csv(ss);
  FitConfig cfg;
  cfg.h = 0.3;
  cfg.grid = equispaced_grid(21);
  const ModelSpec m = scenario_model(sim1);
  const ThetaCurve a = fit_vcmoe(m, sd.data, cfg);
  const ThetaCurve b = fit_vcmoe(m, back, cfg);
  for (std::size_t j = 0; j < a.points.size(); ++j) EXPECT_EQ(a.points[j].alpha, b.points[j].alpha);
}

TEST(Csv, ColumnOrderIsFree) {
  std::stringstream ss("z0,y,x0,u,z1\n1,2.5,1,0.25,-3\n1,1e-3,1,0.75,4\n");
  const Dataset d = io::read_csv(ss);
  ASSERT_EQ(d.size(), 2);
  EXPECT_EQ(d.Z.cols(), 2);
  EXPECT_EQ(d.X.cols(), 1);
  EXPECT_EQ(d.u(1), 0.75);
  EXPECT_EQ(d.y(1), 1e-3);
  EXPECT_EQ(d.Z(0, 1), -3.0);
}

TEST(Csv, MissingResponseColumn) {
  std::stringstream ss("u,x0,z0\n0.1,1,1\n");
  try {
    io::read_csv(ss);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::SchemaError);
    EXPECT_NE(std::string(e.what()).find("'y'"), std::string::npos);
  }
}

TEST(Csv, GapInNumberedColumns) {
  std::stringstream ss("u,y,x0,z0,z2\n0.1,1,1,1,1\n");
  EXPECT_EQ(code_of([&] { io::read_csv(ss); }), ErrorCode::SchemaError);
}

TEST(Csv, BadCellNamesRowAndColumn) {
  std::stringstream ss;
  ss << "u,y,x0,z0\n";
  for (int r = 1; r <= 20; ++r) ss << 0.05 * r << ',' << (r == 17 ? "abc" : "1.5") << ",1,1\n";
  try {
    io::read_csv(ss);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::ParseError);
    const std::string w = e.what();
    EXPECT_NE(w.find("row 17"), std::string::npos) << w;
    EXPECT_NE(w.find("'y'"), std::string::npos) << w;
  }
}

TEST(Csv, WrongFieldCount) {
  std::stringstream ss("u,y,x0,z0\n0.1,1,1\n");
  EXPECT_EQ(code_of([&] { io::read_csv(ss); }), ErrorCode::ParseError);
  std::stringstream empty("");
  EXPECT_EQ(code_of([&] { io::read_csv(empty); }), ErrorCode::SchemaError);
}

TEST(Json, SpecAndConfigRoundTrip) {
  ModelSpec m = scenario_model(Scenario{ScenarioId::Sim3, std::nullopt});
  m.constant_mask.push_back({CoefficientId::Kind::Beta, 1, 0});
  const ModelSpec back = io::spec_from_json(io::to_json(m));
  EXPECT_EQ(back.n_components, 3);
  EXPECT_EQ(back.gating, GatingForm::Softmax);
  EXPECT_EQ(back.constant_mask, m.constant_mask);

  FitConfig c;
  c.h = 0.17;
  c.seed = 12345678901234ull;
  c.init = InitMethod::Random;
  c.starts = 4;
  const FitConfig cb = io::config_from_json(io::to_json(c));
  EXPECT_EQ(cb.h, 0.17);
  EXPECT_EQ(cb.seed, c.seed);
  EXPECT_EQ(cb.init, InitMethod::Random);
  EXPECT_EQ(cb.starts, 4);
}

TEST(Json, CurveRoundTripIsExact) {
  const auto sd = generate(sim1, 200, 5);
  const ModelSpec m = scenario_model(sim1);
  FitConfig cfg;
  cfg.h = 0.3;
  cfg.grid = equispaced_grid(11);
  cfg.max_iter = 10;
  const ThetaCurve c = fit_vcmoe(m, sd.data, cfg);
  const auto text = io::to_json(m, c).dump();
  const ThetaCurve back = io::curve_from_json(m, io::json::parse(text));
  ASSERT_EQ(back.points.size(), c.points.size());
  for (std::size_t j = 0; j < c.points.size(); ++j) {
    EXPECT_EQ(back.points[j].alpha, c.points[j].alpha);
    EXPECT_EQ(back.points[j].beta_slope, c.points[j].beta_slope);
    EXPECT_EQ(back.points[j].log_delta, c.points[j].log_delta);
  }
  EXPECT_EQ(back.grid, c.grid);
  EXPECT_EQ(back.h, c.h);
}

TEST(Json, SchemaErrors) {
  auto j = io::to_json(ModelSpec{});
  j["expert"] = "poisson";
  EXPECT_EQ(code_of([&] { io::spec_from_json(j); }), ErrorCode::SchemaError);
  j.erase("expert");
  EXPECT_EQ(code_of([&] { io::spec_from_json(j); }), ErrorCode::SchemaError);
  EXPECT_EQ(code_of([] { io::read_json_file("/nonexistent/fit.json"); }), ErrorCode::ParseError);
}

TEST(Format, SeventeenDigits) {
  EXPECT_EQ(std::stod(io::format_double(0.1)), 0.1);
  EXPECT_EQ(std::stod(io::format_double(1.0 / 3.0)), 1.0 / 3.0);
}
