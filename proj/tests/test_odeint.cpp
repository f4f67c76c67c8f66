#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "iukan/odeint.hpp"
#include "oracles.hpp"

using namespace iukan;

namespace {

/// v' = -x (harmonic oscillator), no parameters.
struct Oscillator {
  template <typename T>
  Var<T> operator()(Tape<T>&, Var<T> x, Var<T>, T, std::span<const Var<T>>) const {
    return scale(x, T(-1));
  }
};

/// v' = 0.
struct Frozen {
  template <typename T>
  Var<T> operator()(Tape<T>&, Var<T>, Var<T> v, T, std::span<const Var<T>>) const {
    return scale(v, T(0));
  }
};

/// v' = c, a constant field.
struct ConstantField {
  double c;
  template <typename T>
  Var<T> operator()(Tape<T>& tape, Var<T>, Var<T> v, T, std::span<const Var<T>>) const {
    return tape.constant(Tensor<T>::full(v.shape(), T(c)));
  }
};

/// v' = theta0 * x + theta1 * v: a parameterised linear field.
struct LinearField {
  template <typename T>
  Var<T> operator()(Tape<T>&, Var<T> x, Var<T> v, T, std::span<const Var<T>> th) const {
    return add(mul(th[0], x), mul(th[1], v));
  }
};

template <typename T>
OdeState<T> state(Shape s, T x, T v) {
  return {Tensor<T>::full(s, x), Tensor<T>::full(s, v)};
}

double max_rel(const Tensor<double>& a, const Tensor<double>& b) {
  double scale = 0, err = 0;
  for (std::size_t i = 0; i < a.size(); ++i) scale = std::max(scale, std::abs(b[i]));
  for (std::size_t i = 0; i < a.size(); ++i) err = std::max(err, std::abs(a[i] - b[i]) / std::max(scale, 1e-12));
  return err;
}

}  // namespace

TEST(Rk4Step, FrozenFieldIsExact) {
  Rng rng(1);
  OdeState<double> s{normal_tensor<double>({3}, 1.0, rng), normal_tensor<double>({3}, 1.0, rng)};
  auto r = rk4_step(s, 0.0, 0.1, Frozen{});
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_DOUBLE_EQ(r.x[i], s.x[i] + 0.1 * s.v[i]);
    EXPECT_EQ(r.v[i], s.v[i]);
  }
  EXPECT_THROW(rk4_step(s, 0.0, 0.0, Frozen{}), Error);
}

TEST(Rk4Step, ConstantAccelerationIsExact) {
  auto r = rk4_step(state<double>({2}, 0.5, 1.0), 0.0, 0.25, ConstantField{3.0});
  EXPECT_DOUBLE_EQ(r.v[0], 1.0 + 0.25 * 3.0);
  EXPECT_DOUBLE_EQ(r.x[0], 0.5 + 0.25 * 1.0 + 0.5 * 3.0 * 0.25 * 0.25);
}

TEST(Rk4Step, OscillatorMatchesHandRolledRk4) {
  auto r = rk4_step(state<double>({1}, 1.0, 0.0), 0.0, 0.1, Oscillator{});
  double x = 1.0, v = 0.0;
  oracle::rk4_second_order(x, v, 0.1, [](double xx, double) { return -xx; });
  EXPECT_NEAR(r.x[0], x, 1e-15);
  EXPECT_NEAR(r.v[0], v, 1e-15);
}

TEST(Rk4Step, NonFiniteIsReported) {
  EXPECT_THROW(rk4_step(state<double>({1}, 1.0, 0.0), 0.0, 1.0, ConstantField{1e308 * 10}), NumericError);
}

TEST(OdeSolve, OscillatorQuarterPeriod) {
  IntegrationConfig<double> cfg{0.0, std::numbers::pi / 2, 64};
  auto r = ode_solve(state<double>({1}, 1.0, 0.0), cfg, Oscillator{});
  EXPECT_NEAR(r.x[0], 0.0, 1e-6);
  EXPECT_NEAR(r.v[0], -1.0, 1e-6);
}

TEST(OdeSolve, FrozenFlowIsLinear) {
  // Exact up to rounding of the 1/6, 1/3 stage weights.
  for (int steps : {1, 2, 3, 16, 17}) {
    auto r = ode_solve(state<double>({2}, 0.25, -1.5), IntegrationConfig<double>{0.0, 2.0, steps}, Frozen{});
    EXPECT_NEAR(r.x[0], 0.25 + 2.0 * -1.5, 1e-14);
    EXPECT_EQ(r.v[0], -1.5);
  }
}

TEST(OdeSolve, FourthOrderConvergence) {
  const double t1 = 2.0;
  std::vector<double> hs{0.2, 0.1, 0.05, 0.025}, errs;
  for (double h : hs) {
    IntegrationConfig<double> cfg{0.0, t1, int(std::lround(t1 / h))};
    auto r = ode_solve(state<double>({1}, 1.0, 0.0), cfg, Oscillator{});
    errs.push_back(std::hypot(r.x[0] - std::cos(t1), r.v[0] + std::sin(t1)));
  }
  for (std::size_t i = 1; i < errs.size(); ++i) {
    const double ratio = errs[i - 1] / errs[i];
    EXPECT_GT(ratio, 13.0);
    EXPECT_LT(ratio, 19.0);
  }
}

TEST(OdeSolve, TimeSpanAdditivity) {
  Rng rng(2);
  ParameterStore<double> store;
  auto f = DynamicsNet<double>::create(store, "f", 2, rng);
  std::vector<Tensor<double>> theta;
  for (auto id : f.param_ids) theta.push_back(store[id]);
  std::span<const Tensor<double>> th(theta);
  OdeState<double> s{normal_tensor<double>({1, 2, 3, 3}, 1.0, rng), normal_tensor<double>({1, 2, 3, 3}, 1.0, rng)};
  auto whole = ode_solve(s, IntegrationConfig<double>{0.0, 1.0, 4}, f, th);
  auto half = ode_solve(s, IntegrationConfig<double>{0.0, 0.5, 2}, f, th);
  auto rest = ode_solve(half, IntegrationConfig<double>{0.5, 1.0, 2}, f, th);
  EXPECT_EQ(whole.x, rest.x);
  EXPECT_EQ(whole.v, rest.v);
}

TEST(Adjoint, FrozenFlowGradients) {
  Tape<double> tape;
  auto x0 = tape.leaf(Tensor<double>::full({3}, 0.3));
  auto v0 = tape.leaf(Tensor<double>::full({3}, -0.2));
  IntegrationConfig<double> cfg{0.0, 1.5, 5};
  auto out = ode_block(x0, v0, Frozen{}, {}, cfg);
  auto g = tape.backward(sum(select(out, 0)));
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_NEAR(g[x0][i], 1.0, 1e-14);
    EXPECT_NEAR(g[v0][i], 1.5, 1e-14);
  }
}

TEST(Adjoint, ParameterFreeLossGivesZeroParameterGradient) {
  Tape<double> tape;
  auto x0 = tape.leaf(Tensor<double>::full({2}, 0.7));
  auto v0 = tape.leaf(Tensor<double>::full({2}, 0.1));
  // The field ignores theta entirely: zero dynamics.
  struct ZeroWithTheta {
    Var<double> operator()(Tape<double>&, Var<double>, Var<double> v, double, std::span<const Var<double>>) const {
      return scale(v, 0.0);
    }
  };
  auto th = tape.leaf(Tensor<double>::full({2}, 5.0));
  auto out = select(ode_block(x0, v0, ZeroWithTheta{}, {th}, IntegrationConfig<double>{}), 0);
  auto g = tape.backward(sum(mul(out, out)));
  EXPECT_EQ(g[th], Tensor<double>::zeros({2}));
}

TEST(Adjoint, LinearFieldMatchesUnrolled) {
  auto run = [](GradientMode mode) {
    Tape<double> tape;
    auto x0 = tape.leaf(Tensor<double>({2}, {1.0, -0.5}));
    auto v0 = tape.leaf(Tensor<double>({2}, {0.25, 0.5}));
    std::vector<Var<double>> th{tape.leaf(Tensor<double>({2}, {-1.3, -0.4})), tape.leaf(Tensor<double>({2}, {0.2, -0.1}))};
    auto out = ode_block(x0, v0, LinearField{}, th, IntegrationConfig<double>{0.0, 1.0, 32}, mode);
    auto g = tape.backward(dot_const(out, Tensor<double>({2, 2}, {1.0, -2.0, 0.5, 3.0})));
    return std::vector<Tensor<double>>{out.value(), g[x0], g[v0], g[th[0]], g[th[1]]};
  };
  auto adj = run(GradientMode::adjoint);
  auto unr = run(GradientMode::unrolled);
  EXPECT_EQ(adj[0], unr[0]);  // forward values are bit-identical
  for (std::size_t i = 1; i < adj.size(); ++i) EXPECT_LT(max_rel(adj[i], unr[i]), 1e-6) << i;
}

TEST(Adjoint, DynamicsNetMatchesUnrolled) {
  ParameterStore<double> store;
  Rng rng(3);
  auto f = DynamicsNet<double>::create(store, "f", 2, rng);
  ASSERT_LE(store.scalar_count(), 1000u);
  auto x0v = normal_tensor<double>({1, 2, 4, 4}, 1.0, rng);
  auto v0v = normal_tensor<double>({1, 2, 4, 4}, 1.0, rng);
  auto w = normal_tensor<double>({2, 1, 2, 4, 4}, 1.0, rng);
  auto run = [&](GradientMode mode) {
    Tape<double> tape;
    Binding<double> p(tape, store, true);
    auto x0 = tape.leaf(x0v);
    auto v0 = tape.leaf(v0v);
    auto out = ode_block(x0, v0, f, p.select(f.param_ids), IntegrationConfig<double>{0.0, 1.0, 16}, mode);
    auto g = tape.backward(dot_const(out, w));
    std::vector<Tensor<double>> r{g[x0], g[v0]};
    for (auto id : f.param_ids) r.push_back(g[p[id]]);
    return r;
  };
  auto adj = run(GradientMode::adjoint);
  auto unr = run(GradientMode::unrolled);
  for (std::size_t i = 0; i < adj.size(); ++i) EXPECT_LT(max_rel(adj[i], unr[i]), 1e-4) << i;
}

TEST(Adjoint, FloatMatchesUnrolledWithinLooseTolerance) {
  ParameterStore<float> store;
  Rng rng(4);
  auto f = DynamicsNet<float>::create(store, "f", 2, rng);
  auto x0v = normal_tensor<float>({1, 2, 4, 4}, 1.f, rng);
  auto run = [&](GradientMode mode) {
    Tape<float> tape;
    Binding<float> p(tape, store, true);
    auto x0 = tape.leaf(x0v);
    auto out = ode_block(x0, scale(x0, 0.5f), f, p.select(f.param_ids), IntegrationConfig<float>{}, mode);
    auto g = tape.backward(sum(select(out, 0)));
    return g[x0].cast<double>();
  };
  EXPECT_LT(max_rel(run(GradientMode::adjoint), run(GradientMode::unrolled)), 1e-2);
}

TEST(Adjoint, ReconstructionMismatchIsReported) {
  OdeState<double> s0 = state<double>({1}, 1.0, 0.0);
  IntegrationConfig<double> cfg{0.0, 1.0, 8};
  auto s1 = ode_solve(s0, cfg, Oscillator{});
  auto ok = adjoint_backward(s0, s1, Tensor<double>::ones({1}), Tensor<double>::zeros({1}), cfg, Oscillator{}, {},
                             std::optional<double>(1e-6));
  EXPECT_NEAR(ok.reconstructed.x[0], 1.0, 1e-6);
  IntegrationConfig<double> other{0.0, 2.0, 8};
  EXPECT_THROW(adjoint_backward(s0, s1, Tensor<double>::ones({1}), Tensor<double>::zeros({1}), other, Oscillator{}, {},
                                std::optional<double>(1e-6)),
               Error);
}

TEST(Adjoint, RetainedBuffersIndependentOfSteps) {
  ParameterStore<float> store;
  Rng rng(5);
  auto f = DynamicsNet<float>::create(store, "f", 4, rng);
  auto g = VelocityNet<float>::create(store, "g", 4, rng);
  auto x0v = normal_tensor<float>({1, 4, 4, 4}, 1.f, rng);
  auto retained = [&](int steps, GradientMode mode) {
    Tape<float> tape;
    Binding<float> p(tape, store, true);
    const auto before = tape.retained_buffers();
    sono_integrate(p, tape.leaf(x0v), g, f, IntegrationConfig<float>{0.f, 1.f, steps}, mode);
    return tape.retained_buffers() - before;
  };
  EXPECT_EQ(retained(2, GradientMode::adjoint), retained(64, GradientMode::adjoint));
  EXPECT_LT(retained(2, GradientMode::unrolled), retained(8, GradientMode::unrolled));
}

TEST(SonoIntegrate, FrozenDynamicsIsIdentity) {
  ParameterStore<double> store;
  Rng rng(6);
  auto f = DynamicsNet<double>::create(store, "f", 2, rng);
  auto g = VelocityNet<double>::create(store, "g", 2, rng);
  for (auto id : f.param_ids) store[id].fill(0.0);
  store[g.weight].fill(0.0);
  Tape<double> tape;
  Binding<double> p(tape, store, false);
  auto x0 = tape.constant(normal_tensor<double>({1, 2, 3, 3}, 1.0, rng));
  EXPECT_EQ(sono_integrate(p, x0, g, f, IntegrationConfig<double>{}).value(), x0.value());

  // Constant initial velocity c via the bias: x1 = x0 + c over a unit span.
  store[g.bias] = Tensor<double>({2}, {0.5, -1.0});
  Binding<double> p2(tape, store, false);
  auto out = sono_integrate(p2, x0, g, f, IntegrationConfig<double>{}).value();
  for (std::size_t i = 0; i < out.size(); ++i) EXPECT_NEAR(out[i], x0.value()[i] + (i < 9 ? 0.5 : -1.0), 1e-15);
}

TEST(SonoIntegrate, EqualsManualComposition) {
  ParameterStore<double> store;
  Rng rng(7);
  auto f = DynamicsNet<double>::create(store, "f", 2, rng, false);
  auto g = VelocityNet<double>::create(store, "g", 2, rng);
  Tape<double> tape;
  Binding<double> p(tape, store, false);
  auto x0 = tape.constant(normal_tensor<double>({1, 2, 4, 4}, 1.0, rng));
  IntegrationConfig<double> cfg{0.0, 1.0, 3};
  auto out = sono_integrate(p, x0, g, f, cfg).value();
  std::vector<Tensor<double>> theta;
  for (auto id : f.param_ids) theta.push_back(store[id]);
  auto v0 = conv2d(x0, p[g.weight], p[g.bias], 1, 1).value();
  auto ref = ode_solve(OdeState<double>{x0.value(), v0}, cfg, f, std::span<const Tensor<double>>(theta));
  EXPECT_EQ(out, ref.x);
}

TEST(DynamicsNet, OutputShapeAndPositionSwitch) {
  ParameterStore<float> store;
  Rng rng(8);
  auto with = DynamicsNet<float>::create(store, "a", 3, rng, true);
  auto without = DynamicsNet<float>::create(store, "b", 3, rng, false);
  EXPECT_EQ(store[with.param_ids[0]].dim(1), 7u);
  EXPECT_EQ(store[without.param_ids[0]].dim(1), 4u);
  Tape<float> tape;
  Binding<float> p(tape, store, false);
  auto x = tape.constant(normal_tensor<float>({2, 3, 5, 5}, 1.f, rng));
  auto th = p.select(without.param_ids);
  auto y1 = without(tape, x, x, 0.f, std::span<const Var<float>>(th));
  auto y2 = without(tape, scale(x, 3.f), x, 0.f, std::span<const Var<float>>(th));
  EXPECT_EQ(y1.shape(), x.shape());
  EXPECT_EQ(y1.value(), y2.value());
}
