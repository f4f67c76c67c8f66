#include <gtest/gtest.h>

#include <cmath>

#include "iukan/audit.hpp"
#include "iukan/verify.hpp"

using namespace iukan;

TEST(LogLogSlope, RecoversPowerLaw) {
  std::vector<double> x{1, 2, 4, 8}, y;
  for (double v : x) y.push_back(3.0 * std::pow(v, -2.5));
  EXPECT_NEAR(detail::loglog_slope(x, y), -2.5, 1e-12);
  EXPECT_TRUE(std::isnan(detail::loglog_slope({1}, {1})));
}

TEST(Checks, Rk4IsFourthOrder) {
  const auto r = check_rk4_order();
  EXPECT_TRUE(r.pass) << r.measured.dump();
  EXPECT_EQ(r.measured["zero_field_error"].get<double>(), 0.0);
  EXPECT_NE(r.csv.find("h,steps,error"), std::string::npos);
}

TEST(Checks, AdjointAgreesWithUnrolled) {
  const auto r = check_adjoint();
  EXPECT_TRUE(r.pass) << r.measured.dump();
}

TEST(Checks, AdjointMemoryIsConstantInSteps) {
  const auto r = check_memory();
  EXPECT_TRUE(r.pass) << r.measured.dump();
}

TEST(Checks, MultiKanDegeneratesToKan) {
  const auto r = check_multikan_degeneracy();
  EXPECT_TRUE(r.pass) << r.measured.dump();
}

TEST(Checks, UnknownNameThrows) {
  EXPECT_THROW(run_check("nope"), Error);
  EXPECT_THROW(scaling_target("nope"), Error);
}

TEST(GridScaling, IdentityIsFitToTheFloor) {
  ScalingOptions o;
  o.widths = {1, 1};
  o.grids = {3, 5};
  o.adam_steps = 200;
  const auto res = fit_grid_scaling(scaling_target("identity"), o);
  for (const auto& row : res.rows) EXPECT_LT(row.sup_error, 1e-10) << "G=" << row.grid;
  EXPECT_EQ(res.pre_floor, 0u);
}

TEST(GridScaling, SineConvergesAtCubicRateWithGradientOneOrderLower) {
  ScalingOptions o;
  o.widths = {1, 1};
  const auto res = fit_grid_scaling(scaling_target("sin"), o);
  ASSERT_GE(res.pre_floor, 3u);
  EXPECT_LE(res.slope, -3.5);
  EXPECT_GE(res.slope, -4.5);
  const double gap = res.grad_slope - res.slope;
  EXPECT_GE(gap, 0.5);
  EXPECT_LE(gap, 1.5);
  for (std::size_t i = 1; i < res.rows.size(); ++i) EXPECT_LT(res.rows[i].sup_error, res.rows[i - 1].sup_error);
}

TEST(GridScaling, CheckReportsTable) {
  ScalingOptions o;
  o.grids = {3, 5, 10};
  const auto r = check_grid_scaling("sin", o);
  EXPECT_EQ(r.name, "scaling");
  EXPECT_TRUE(r.pass) << r.measured.dump();
  EXPECT_EQ(std::count(r.csv.begin(), r.csv.end(), '\n'), 4);
}

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.in_channels = 1;
  c.channels = {2, 4, 4};
  c.n_sono_blocks = 1;
  c.n_tok_blocks = 2;
  c.kan_layers = 1;
  c.integration.steps = 1;
  return c;
}

}  // namespace

TEST(NoiseTrend, LevelZeroMatchesPlainEvaluation) {
  ParameterStore<float> store;
  Rng rng(4);
  auto m = Model<float>::create(store, small_config(), rng);
  auto ds = synthetic_dataset(6, 16, 16, 9);
  const auto plain = evaluate(m, store, ds, ds.all(), 4);
  const auto r = check_noise_trend(m, store, ds, ds.all(), {0.0}, 7);
  EXPECT_EQ(r.measured["dice"][0].get<double>(), plain.dice);
  EXPECT_EQ(r.csv, "level,dice\n0," + MetricsReport::fmt(plain.dice) + "\n");
}

TEST(NoiseTrend, NoiseIsSeededAndNonMonotoneFails) {
  ParameterStore<float> store;
  Rng rng(4);
  auto m = Model<float>::create(store, small_config(), rng);
  auto ds = synthetic_dataset(6, 16, 16, 9);
  const auto a = check_noise_trend(m, store, ds, ds.all(), {0.0, 0.2, 0.4}, 7);
  const auto b = check_noise_trend(m, store, ds, ds.all(), {0.0, 0.2, 0.4}, 7);
  EXPECT_EQ(a.csv, b.csv);
  // Reversed levels give a non-increasing sequence only if Dice is flat.
  const auto rev = check_noise_trend(m, store, ds, ds.all(), {0.4, 0.0}, 7);
  const auto d = rev.measured["dice"];
  EXPECT_EQ(rev.pass, d[1].get<double>() <= d[0].get<double>());
  EXPECT_THROW(check_noise_trend(m, store, ds, {}, {0.0}, 7), Error);
}

TEST(Audits, EveryModulePasses) {
  for (const auto& mod : audit_modules()) {
    const auto rows = run_gradient_audits(mod);
    ASSERT_FALSE(rows.empty()) << mod;
    for (const auto& r : rows) EXPECT_TRUE(r.pass) << r.module << " " << r.name << " " << r.precision << " "
                                                   << r.max_rel_error << " at " << r.worst;
  }
  EXPECT_THROW(run_gradient_audits("nope"), Error);
}
