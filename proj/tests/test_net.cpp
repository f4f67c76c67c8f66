#include <gtest/gtest.h>

#include "iukan/gradcheck.hpp"
#include "iukan/net.hpp"

using namespace iukan;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.in_channels = 1;
  c.channels = {2, 4, 4};
  c.n_sono_blocks = 1;
  c.n_tok_blocks = 2;
  c.kan_layers = 2;
  c.integration.steps = 2;
  return c;
}

template <typename T>
void zero_dynamics(ParameterStore<T>& store, const OdeBlock<T>& b) {
  for (auto id : b.f.param_ids) store[id].fill(T(0));
  store[b.g.weight].fill(T(0));
  store[b.g.bias].fill(T(0));
}

template <typename T>
void zero_token_branch(ParameterStore<T>& store, const TokenizedBlock<T>& t) {
  for (const auto& l : t.stack) {
    store[l.kan.coeffs].fill(T(0));
    store[l.kan.base_weight].fill(T(0));
  }
  store[t.dw_kernel].fill(T(0));
}

Tensor<double> bce_target(const Shape& s, Rng& rng) {
  Tensor<double> y(s);
  std::bernoulli_distribution coin(0.4);
  for (auto& v : y.data()) v = coin(rng) ? 1.0 : 0.0;
  return y;
}

}  // namespace

TEST(SonoBlock, FrozenDynamicsWithIdentityConvIsIdentity) {
  ParameterStore<double> store;
  Rng rng(1);
  auto b = OdeBlock<double>::create(store, "b", 3, 3, Resample::none, true, rng);
  b.add_conv(store, "b", 1, rng);
  zero_dynamics(store, b);
  store[*b.conv_w].fill(0.0);
  for (std::size_t c = 0; c < 3; ++c) store[*b.conv_w].at(c, c, 0, 0) = 1.0;
  Tape<double> tape;
  Binding<double> p(tape, store, false);
  auto x = tape.constant(normal_tensor<double>({2, 3, 4, 4}, 1.0, rng));
  EXPECT_EQ(b.forward(p, x, {}, GradientMode::adjoint).value(), x.value());
}

TEST(SonoBlock, DownAndUpShapes) {
  ParameterStore<float> store;
  Rng rng(2);
  auto down = OdeBlock<float>::create(store, "d", 4, 6, Resample::down, true, rng);
  down.add_conv(store, "d", 3, rng);
  auto up = OdeBlock<float>::create(store, "u", 6, 4, Resample::up, true, rng);
  up.add_conv(store, "u", 3, rng);
  Tape<float> tape;
  Binding<float> p(tape, store, false);
  auto x = tape.constant(normal_tensor<float>({1, 4, 8, 8}, 1.f, rng));
  auto h = down.forward(p, x, {}, GradientMode::adjoint);
  EXPECT_EQ(h.shape(), (Shape{1, 6, 4, 4}));
  EXPECT_EQ(up.forward(p, h, {}, GradientMode::adjoint).shape(), (Shape{1, 4, 8, 8}));
  EXPECT_THROW(down.forward(p, h, {}, GradientMode::adjoint), ShapeError);
}

TEST(SonoBlock, EqualsManualChain) {
  ParameterStore<double> store;
  Rng rng(3);
  auto b = OdeBlock<double>::create(store, "b", 2, 3, Resample::up, true, rng);
  b.add_conv(store, "b", 3, rng);
  Tape<double> tape;
  Binding<double> p(tape, store, false);
  IntegrationConfig<double> cfg{0.0, 1.0, 3};
  auto x = tape.constant(normal_tensor<double>({1, 2, 3, 5}, 1.0, rng));
  auto ref = conv2d(upsample2x(sono_integrate(p, x, b.g, b.f, cfg)), p[*b.conv_w], p[*b.conv_b], 1, 1);
  EXPECT_EQ(b.forward(p, x, cfg, GradientMode::adjoint).value(), ref.value());
}

TEST(SonoMultiKanBlock, ShapeContract) {
  ParameterStore<float> store;
  Rng rng(4);
  ModelConfig mc;
  auto b = OdeBlock<float>::create(store, "b", 64, 32, Resample::down, true, rng);
  b.add_tokens(store, "b", 2, 4 * 64, mc, rng);
  b.add_conv(store, "b", 3, rng);
  Tape<float> tape;
  Binding<float> p(tape, store, false);
  auto x = tape.constant(normal_tensor<float>({1, 64, 16, 16}, 1.f, rng));
  EXPECT_EQ(b.forward(p, x, {}, GradientMode::adjoint).shape(), (Shape{1, 32, 8, 8}));
  auto odd = tape.constant(normal_tensor<float>({1, 64, 6, 5}, 1.f, rng));
  EXPECT_THROW(b.forward(p, odd, {}, GradientMode::adjoint), ShapeError);
}

TEST(SonoMultiKanBlock, ZeroedBranchesGiveLayerNormThenResample) {
  ParameterStore<double> store;
  Rng rng(5);
  ModelConfig mc;
  auto b = OdeBlock<double>::create(store, "b", 2, 3, Resample::down, true, rng);
  b.add_tokens(store, "b", 2, 8, mc, rng);
  b.add_conv(store, "b", 3, rng);
  zero_dynamics(store, b);
  zero_token_branch(store, *b.tok);
  Tape<double> tape;
  Binding<double> p(tape, store, false);
  auto x = tape.constant(normal_tensor<double>({1, 2, 4, 4}, 1.0, rng));
  auto ln = layer_norm(tokenize(x, p[b.tok->embed], 2), p[b.tok->ln_gamma], p[b.tok->ln_beta]);
  auto ref = conv2d(detokenize(ln, 4, 4, 2), p[*b.conv_w], p[*b.conv_b], 2, 1);
  EXPECT_EQ(b.forward(p, x, {}, GradientMode::adjoint).value(), ref.value());
}

TEST(SonoMultiKanBlock, EqualsFiveStageChain) {
  ParameterStore<double> store;
  Rng rng(6);
  ModelConfig mc;
  auto b = OdeBlock<double>::create(store, "b", 2, 2, Resample::up, true, rng);
  b.add_tokens(store, "b", 2, 8, mc, rng);
  b.add_conv(store, "b", 3, rng);
  Tape<double> tape;
  Binding<double> p(tape, store, false);
  IntegrationConfig<double> cfg;
  auto x = tape.constant(normal_tensor<double>({1, 2, 4, 4}, 1.0, rng));
  auto h = sono_integrate(p, x, b.g, b.f, cfg);
  auto z = b.tok->tokenize(p, h);
  z = b.tok->block(p, z, 2, 2);
  auto sp = detokenize(z, 4, 4, 2);
  auto ref = conv2d(upsample2x(sp), p[*b.conv_w], p[*b.conv_b], 1, 1);
  EXPECT_EQ(b.forward(p, x, cfg, GradientMode::adjoint).value(), ref.value());
}

TEST(ModelConfig, Validation) {
  ModelConfig c;
  EXPECT_NO_THROW(c.validate());
  c.channels = {8, 16};
  EXPECT_THROW(c.validate(), Error);
  c = {};
  c.patch = {2, 2};
  EXPECT_THROW(c.validate(), Error);
  c = {};
  c.integration.steps = 0;
  EXPECT_THROW(c.validate(), Error);
  EXPECT_EQ(ModelConfig{}.divisor(), 64u);
  c = {};
  c.patch = {1, 1, 1};
  EXPECT_EQ(c.divisor(), 32u);
}

TEST(Model, ShapeContractAndDeterminism) {
  ParameterStore<float> store;
  Rng rng(7);
  auto cfg = tiny_config();
  auto m = Model<float>::create(store, cfg, rng);
  for (auto [h, w] : {std::pair{16, 16}, std::pair{16, 48}, std::pair{32, 16}}) {
    auto x = normal_tensor<float>({2, 1, std::size_t(h), std::size_t(w)}, 1.f, rng);
    auto run = [&] {
      Tape<float> tape;
      Binding<float> p(tape, store, false);
      return m.forward(p, tape.constant(x)).value();
    };
    auto a = run();
    EXPECT_EQ(a.shape(), (Shape{2, 1, std::size_t(h), std::size_t(w)}));
    EXPECT_EQ(a, run());
  }
  Tape<float> tape;
  Binding<float> p(tape, store, false);
  EXPECT_THROW(m.forward(p, tape.constant(Tensor<float>({1, 1, 8, 8}))), ShapeError);
  EXPECT_THROW(m.forward(p, tape.constant(Tensor<float>({1, 2, 16, 16}))), ShapeError);
}

TEST(Model, DefaultArchitectureLayout) {
  ParameterStore<float> store;
  Rng rng(8);
  ModelConfig cfg;
  cfg.channels = {8, 16, 32, 48, 64};
  auto m = Model<float>::create(store, cfg, rng);
  ASSERT_EQ(m.encoder.size(), 5u);
  ASSERT_EQ(m.decoder.size(), 5u);
  for (std::size_t i = 0; i < 5; ++i) {
    EXPECT_EQ(m.encoder[i].tok.has_value(), i >= 2) << i;
    EXPECT_EQ(m.decoder[i].tok.has_value(), i < 3) << i;
  }
  EXPECT_TRUE(m.bottleneck.tok.has_value());
  EXPECT_FALSE(m.bottleneck.conv_w.has_value());
  EXPECT_EQ(m.fuse.size(), 4u);
  Tape<float> tape;
  Binding<float> p(tape, store, false);
  auto y = m.forward(p, tape.constant(normal_tensor<float>({1, 3, 64, 64}, 1.f, rng)));
  EXPECT_EQ(y.shape(), (Shape{1, 1, 64, 64}));
}

TEST(Model, EveryParameterReceivesGradient) {
  ParameterStore<double> store;
  Rng rng(9);
  auto m = Model<double>::create(store, tiny_config(), rng);
  Tape<double> tape;
  Binding<double> p(tape, store, true);
  auto x = tape.constant(normal_tensor<double>({2, 1, 16, 16}, 1.0, rng));
  auto logits = m.forward(p, x);
  auto g = tape.backward(bce_with_logits(logits, bce_target(logits.shape(), rng)));
  const auto dead = zero_gradient_parameters(store, p, g);
  std::string names;
  for (const auto& d : dead) names += d + " ";
  EXPECT_TRUE(dead.empty()) << names;
}

TEST(Model, SkipsAreWired) {
  ParameterStore<float> store;
  Rng rng(10);
  auto m = Model<float>::create(store, tiny_config(), rng);
  Tape<float> tape;
  Binding<float> p(tape, store, false);
  auto x = tape.constant(normal_tensor<float>({1, 1, 16, 16}, 1.f, rng));
  const auto base = m.forward(p, x).value();
  for (std::size_t s = 0; s + 1 < m.config.depth(); ++s) {
    ForwardOptions opt;
    opt.zero_skip.assign(m.config.depth(), false);
    opt.zero_skip[s] = true;
    EXPECT_NE(m.forward(p, x, opt).value(), base) << "skip " << s;
  }
}

TEST(Model, BottleneckPreservesShapeAndMatchesChain) {
  ParameterStore<double> store;
  Rng rng(11);
  auto m = Model<double>::create(store, tiny_config(), rng);
  Tape<double> tape;
  Binding<double> p(tape, store, false);
  auto cfg = m.integration();
  auto x = tape.constant(normal_tensor<double>({1, 4, 2, 2}, 1.0, rng));
  auto y = m.bottleneck.forward(p, x, cfg, GradientMode::adjoint);
  EXPECT_EQ(y.shape(), x.shape());
  auto h = sono_integrate(p, x, m.bottleneck.g, m.bottleneck.f, cfg);
  auto ref = detokenize(m.bottleneck.tok->block(p, m.bottleneck.tok->tokenize(p, h), 2, 2), 2, 2, 1);
  EXPECT_EQ(y.value(), ref.value());

  zero_dynamics(store, m.bottleneck);
  zero_token_branch(store, *m.bottleneck.tok);
  Binding<double> p0(tape, store, false);
  auto z = m.bottleneck.forward(p0, x, cfg, GradientMode::adjoint);
  auto ln = layer_norm(tokenize(x, p0[m.bottleneck.tok->embed], 1), p0[m.bottleneck.tok->ln_gamma],
                       p0[m.bottleneck.tok->ln_beta]);
  EXPECT_EQ(z.value(), detokenize(ln, 2, 2, 1).value());
}

TEST(Model, RetainedBuffersIndependentOfSteps) {
  auto retained = [](int steps) {
    ParameterStore<float> store;
    Rng rng(12);
    auto cfg = tiny_config();
    cfg.integration.steps = steps;
    auto m = Model<float>::create(store, cfg, rng);
    Tape<float> tape;
    Binding<float> p(tape, store, true);
    m.forward(p, tape.constant(normal_tensor<float>({1, 1, 16, 16}, 1.f, rng)));
    return tape.retained_buffers();
  };
  EXPECT_EQ(retained(2), retained(64));
}

TEST(Model, FullGradientCheck64) {
  ParameterStore<double> store;
  Rng rng(13);
  auto m = Model<double>::create(store, tiny_config(), rng);
  auto x = normal_tensor<double>({1, 1, 16, 16}, 1.0, rng);
  auto y = bce_target({1, 1, 16, 16}, rng);
  // Unrolled mode differentiates the discrete solver exactly.
  auto loss = [&](Tape<double>& tape, const Binding<double>& p) {
    ForwardOptions opt;
    opt.mode = GradientMode::unrolled;
    return bce_with_logits(m.forward(p, tape.constant(x), opt), y);
  };
  Rng pick(14);
  auto r = gradcheck_parameters(store, loss, pick, 20);
  EXPECT_LT(r.max_rel_error, 1e-3) << r.worst;
}

TEST(Model, AdjointGradientConvergesToDiscreteGradient) {
  // The adjoint differentiates the continuous flow, so it departs from the
  // discrete gradient by the solver error, which shrinks as h^4.
  std::vector<double> errs;
  for (int steps : {4, 16}) {
    ParameterStore<double> store;
    Rng rng(13);
    auto cfg = tiny_config();
    cfg.integration.steps = steps;
    auto m = Model<double>::create(store, cfg, rng);
    auto x = normal_tensor<double>({1, 1, 16, 16}, 1.0, rng);
    auto y = bce_target({1, 1, 16, 16}, rng);
    auto grads = [&](GradientMode mode) {
      Tape<double> tape;
      Binding<double> p(tape, store, true);
      ForwardOptions opt;
      opt.mode = mode;
      auto g = tape.backward(bce_with_logits(m.forward(p, tape.constant(x), opt), y));
      std::vector<double> flat;
      for (std::size_t i = 0; i < store.size(); ++i) {
        const Tensor<double> gi = g[p[i]];
        flat.insert(flat.end(), gi.data().begin(), gi.data().end());
      }
      return flat;
    };
    errs.push_back(relative_errors(grads(GradientMode::adjoint), grads(GradientMode::unrolled), 1e-2));
  }
  EXPECT_LT(errs[1], 1e-4);
  EXPECT_LT(errs[1], errs[0] / 64);
}
