#pragma once

#include <cmath>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "iukan/gradcheck.hpp"
#include "iukan/kan.hpp"
#include "iukan/net.hpp"
#include "iukan/odeint.hpp"

namespace iukan {

/// One finite-difference audit of one differentiable operation.
struct AuditRow {
  std::string module;
  std::string name;
  std::string precision;  ///< "f32" or "f64"
  double max_rel_error = 0;
  double tolerance = 0;
  std::size_t checked = 0;
  std::string worst;
  bool pass = false;
};

inline std::vector<std::string> audit_modules() { return {"tensor-core", "kan", "odeint", "net"}; }

namespace detail {

template <typename T>
constexpr const char* precision_name() {
  return sizeof(T) == 8 ? "f64" : "f32";
}

template <typename T>
constexpr double op_tolerance() {
  return sizeof(T) == 8 ? 1e-5 : 1e-3;
}

template <typename Vars>
using scalar_of = typename Vars::value_type::value_type;

template <typename T>
struct Auditor {
  std::string module;
  std::vector<AuditRow>* rows;
  std::uint64_t seed = 99;

  template <typename Build>
  void check(const std::string& name, const Build& build, std::vector<Tensor<T>> inputs,
             std::size_t samples = 40) {
    Rng rng(seed++);
    const auto r = gradcheck(build, inputs, rng, samples);
    AuditRow row{module, name, precision_name<T>(), r.max_rel_error, op_tolerance<T>(), r.checked, r.worst};
    row.pass = std::isfinite(row.max_rel_error) && row.max_rel_error < row.tolerance;
    rows->push_back(row);
  }

  Tensor<T> rand(Shape s, std::uint64_t k, T sd = T(1)) const {
    Rng rng(1000 + k);
    return normal_tensor<T>(std::move(s), sd, rng);
  }
};

template <typename T>
void audit_tensor_core(std::vector<AuditRow>& rows) {
  Auditor<T> a{"tensor-core", &rows};
  for (auto kind : {Activation::silu, Activation::sigmoid, Activation::tanh, Activation::exp})
    a.check(activation_name(kind), [kind](auto&, const auto& v) { return activate(v[0], kind); }, {a.rand({7}, 1)});
  a.check("add/sub/mul", [](auto&, const auto& v) { return mul(add(v[0], v[1]), sub(v[0], v[1])); },
          {a.rand({6}, 2), a.rand({6}, 3)});
  a.check("scale/axpy", [](auto&, const auto& v) {
    using U = scalar_of<std::decay_t<decltype(v)>>;
    return axpy(scale(v[0], U(0.7)), U(-1.3), v[1]);
  }, {a.rand({5}, 4), a.rand({5}, 5)});
  a.check("conv2d", [](auto&, const auto& v) { return conv2d(v[0], v[1], v[2], 2, 1); },
          {a.rand({2, 2, 5, 5}, 6), a.rand({3, 2, 3, 3}, 7), a.rand({3}, 8)});
  a.check("conv2d 1x1", [](auto&, const auto& v) { return conv2d(v[0], v[1]); },
          {a.rand({1, 3, 4, 4}, 9), a.rand({2, 3, 1, 1}, 10)});
  a.check("depthwise_conv2d", [](auto&, const auto& v) { return depthwise_conv2d(v[0], v[1]); },
          {a.rand({2, 3, 4, 4}, 11), a.rand({3, 1, 3, 3}, 12)});
  a.check("linear", [](auto&, const auto& v) { return linear(v[0], v[1], v[2]); },
          {a.rand({2, 3, 4}, 13), a.rand({4, 5}, 14), a.rand({5}, 15)});
  a.check("layer_norm", [](auto&, const auto& v) { return layer_norm(v[0], v[1], v[2]); },
          {a.rand({3, 6}, 16, T(2)), a.rand({6}, 17), a.rand({6}, 18)});
  a.check("group_norm", [](auto&, const auto& v) { return group_norm(v[0], 2, v[1], v[2]); },
          {a.rand({2, 4, 3, 3}, 19, T(2)), a.rand({4}, 20), a.rand({4}, 21)});
  a.check("concat/slice/upsample", [](auto&, const auto& v) {
    return upsample2x(slice_channels(concat_channels(v[0], v[1]), 1, 4));
  }, {a.rand({2, 2, 3, 2}, 22), a.rand({2, 3, 3, 2}, 23)});
  a.check("stack/select/tokens", [](auto&, const auto& v) {
    return tokens_to_grid(grid_to_tokens(select(stack(std::vector{v[0], v[0]}), 1)), 3, 2);
  }, {a.rand({1, 2, 3, 2}, 24)});
  Tensor<T> y({8});
  for (std::size_t i = 0; i < 8; ++i) y[i] = T(i % 2);
  a.check("bce_with_logits", [y](auto&, const auto& v) {
    return bce_with_logits(v[0], y.template cast<scalar_of<std::decay_t<decltype(v)>>>());
  }, {a.rand({8}, 25, T(2))});
}

template <typename T>
void audit_kan(std::vector<AuditRow>& rows) {
  Auditor<T> a{"kan", &rows};
  BSplineGrid<T> g;
  Rng rng(20);
  // Inputs kept off the knots so the piecewise cubic is smooth under the step.
  auto xs = uniform_tensor<T>({4, 3}, T(0.9), rng);
  for (auto& v : xs.data()) {
    const T cell = (v - g.lo) / g.step();
    const T frac = cell - std::floor(cell);
    if (frac < T(0.1) || frac > T(0.9)) v += T(0.05);
  }
  a.check("bspline_basis", [g](auto&, const auto& v) {
    return bspline_basis(v[0], g.template cast<scalar_of<std::decay_t<decltype(v)>>>());
  }, {xs});
  a.check("kan_layer", [g](auto&, const auto& v) {
    return kan_layer(v[0], v[1], v[2], v[3], g.template cast<scalar_of<std::decay_t<decltype(v)>>>());
  }, {xs, normal_tensor<T>({2, 3, g.num_basis()}, T(1), rng), normal_tensor<T>({2, 3}, T(1), rng),
      normal_tensor<T>({2, 3}, T(1), rng)});
  a.check("multiply_groups", [](auto&, const auto& v) { return multiply_groups(v[0], 1, 2, 2); },
          {normal_tensor<T>({3, 5}, T(1), rng)});

  ParameterStore<T> store;
  BSplineGrid<T> tg{3, 5, T(-3), T(3)};
  auto blk = TokenizedBlock<T>::create(store, "t", 2, 2, 8, tg, 2, rng);
  std::vector<Tensor<T>> params;
  for (const auto& p : store.all()) params.push_back(p.value);
  params.push_back(normal_tensor<T>({1, 2, 4, 4}, T(0.5), rng));
  a.check("tokenized_block", [&blk](auto&, const auto& v) {
    using U = scalar_of<std::decay_t<decltype(v)>>;
    auto z = tokenize(v.back(), v[blk.embed], blk.patch);
    auto y = z;
    for (const auto& l : blk.stack) {
      y = kan_layer(y, v[l.kan.coeffs], v[l.kan.base_weight], v[l.kan.spline_weight], l.kan.grid.template cast<U>());
      if (l.n_mul) y = multiply_groups(y, l.n_add, l.n_mul, l.mul_arity);
    }
    auto dw = depthwise_conv2d(tokens_to_grid(y, 2, 2), v[blk.dw_kernel]);
    return detokenize(layer_norm(add(z, grid_to_tokens(dw)), v[blk.ln_gamma], v[blk.ln_beta]), 4, 4, 2);
  }, params, 12);
}

template <typename U>
DynamicsNet<U> dynamics_like(std::size_t channels, bool use_position) {
  DynamicsNet<U> f;
  f.channels = channels;
  f.use_position = use_position;
  f.groups = default_groups(channels);
  return f;
}

template <typename T>
void audit_odeint(std::vector<AuditRow>& rows) {
  Auditor<T> a{"odeint", &rows};
  ParameterStore<T> store;
  Rng rng(30);
  auto f = DynamicsNet<T>::create(store, "f", 2, rng);
  std::vector<Tensor<T>> in{normal_tensor<T>({1, 2, 4, 4}, T(1), rng), normal_tensor<T>({1, 2, 4, 4}, T(1), rng)};
  for (auto id : f.param_ids) in.push_back(store[id]);
  a.check("dynamics_net", [](auto& tape, const auto& v) {
    using U = scalar_of<std::decay_t<decltype(v)>>;
    std::vector th(v.begin() + 2, v.end());
    return dynamics_like<U>(2, true)(tape, v[0], v[1], U(0.4), std::span<const Var<U>>(th));
  }, in);
  a.check("ode_block unrolled", [](auto&, const auto& v) {
    using U = scalar_of<std::decay_t<decltype(v)>>;
    std::vector th(v.begin() + 2, v.end());
    return ode_block(v[0], v[1], dynamics_like<U>(2, true), th, IntegrationConfig<U>{U(0), U(1), 4},
                     GradientMode::unrolled);
  }, in);
}

inline ModelConfig audit_model_config() {
  ModelConfig c;
  c.in_channels = 1;
  c.channels = {2, 4, 4};
  c.n_sono_blocks = 1;
  c.n_tok_blocks = 2;
  c.kan_layers = 2;
  c.integration.steps = 2;
  return c;
}

/// The full tiny model at 64-bit, unrolled so the gradient is that of the
/// discrete forward pass.
inline void audit_net(std::vector<AuditRow>& rows) {
  ParameterStore<double> store;
  Rng rng(13);
  auto m = Model<double>::create(store, audit_model_config(), rng);
  auto x = normal_tensor<double>({1, 1, 16, 16}, 1.0, rng);
  Tensor<double> y({1, 1, 16, 16});
  std::bernoulli_distribution coin(0.4);
  for (auto& v : y.data()) v = coin(rng) ? 1.0 : 0.0;
  auto loss = [&](Tape<double>& tape, const Binding<double>& p) {
    ForwardOptions opt;
    opt.mode = GradientMode::unrolled;
    return bce_with_logits(m.forward(p, tape.constant(x), opt), y);
  };
  Rng pick(14);
  const auto r = gradcheck_parameters(store, loss, pick, 20);
  AuditRow row{"net", "full model", "f64", r.max_rel_error, 1e-3, r.checked, r.worst};
  row.pass = std::isfinite(row.max_rel_error) && row.max_rel_error < row.tolerance;
  rows.push_back(row);
}

}  // namespace detail

/// Finite-difference audits for one module ("all" runs every module).
inline std::vector<AuditRow> run_gradient_audits(const std::string& module = "all") {
  std::vector<AuditRow> rows;
  const bool all = module == "all";
  bool known = all;
  if (all || module == "tensor-core") {
    detail::audit_tensor_core<float>(rows);
    detail::audit_tensor_core<double>(rows);
    known = true;
  }
  if (all || module == "kan") {
    detail::audit_kan<float>(rows);
    detail::audit_kan<double>(rows);
    known = true;
  }
  if (all || module == "odeint") {
    detail::audit_odeint<float>(rows);
    detail::audit_odeint<double>(rows);
    known = true;
  }
  if (all || module == "net") {
    detail::audit_net(rows);
    known = true;
  }
  if (!known) throw Error("unknown module '" + module + "' (expected tensor-core, kan, odeint, net or all)");
  return rows;
}

inline std::string audit_csv(const std::vector<AuditRow>& rows) {
  std::string s = "module,name,precision,max_rel_error,tolerance,checked,pass\n";
  char buf[96];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, ",%.6e,%.1e,%zu,%d\n", r.max_rel_error, r.tolerance, r.checked, int(r.pass));
    s += r.module + "," + r.name + "," + r.precision + buf;
  }
  return s;
}

}  // namespace iukan
