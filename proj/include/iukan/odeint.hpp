#pragma once

#include <cmath>
#include <concepts>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "iukan/ops.hpp"
#include "iukan/params.hpp"

// Second-order neural ODE machinery. The second-order system
//   x'' = f(x, x', t; theta_f),  x'(t0) = g(x0; theta_g),  x(t0) = x0
// is integrated as the first-order system x' = v, v' = f(x, v, t) on the
// doubled state [x, v].

namespace iukan {

template <typename T>
struct OdeState {
  Tensor<T> x;
  Tensor<T> v;
};

template <typename T>
struct IntegrationConfig {
  T t0 = T(0);
  T t1 = T(1);
  int steps = 4;

  void validate() const {
    if (steps < 1) throw Error("integration: steps must be >= 1");
    if (!(t1 > t0)) throw Error("integration: t1 must exceed t0");
  }
  T step() const { return (t1 - t0) / static_cast<T>(steps); }
  T time(int i) const { return t0 + static_cast<T>(i) * step(); }

  friend bool operator==(const IntegrationConfig&, const IntegrationConfig&) = default;
};

/// How gradients flow through an ODE block.
enum class GradientMode {
  adjoint,   ///< one tape entry; backward integrates the adjoint system (O(1) memory)
  unrolled,  ///< every RK4 stage recorded on the tape
};

/// f(x, v, t; theta) evaluated on a tape.
template <typename F, typename T>
concept VectorField = requires(const F& f, Tape<T>& tape, Var<T> x, Var<T> v, T t,
                               std::span<const Var<T>> theta) {
  { f(tape, x, v, t, theta) } -> std::same_as<Var<T>>;
};

namespace detail {

template <typename T>
using Bundle = std::vector<Tensor<T>>;

template <typename T>
Bundle<T> bundle_axpy(const Bundle<T>& y, T s, const Bundle<T>& k) {
  Bundle<T> out = y;
  for (std::size_t b = 0; b < out.size(); ++b) {
    auto o = out[b].data();
    const auto kv = k[b].data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] += s * kv[i];
  }
  return out;
}

/// One classical RK4 step over a bundle of tensors from t_start to t_end
/// (signed step hs), with stage times supplied by the caller.
template <typename T, typename Deriv>
Bundle<T> rk4_bundle(const Bundle<T>& y, T t_start, T t_mid, T t_end, T hs, Deriv&& deriv) {
  const Bundle<T> k1 = deriv(t_start, y);
  const Bundle<T> k2 = deriv(t_mid, bundle_axpy(y, hs / 2, k1));
  const Bundle<T> k3 = deriv(t_mid, bundle_axpy(y, hs / 2, k2));
  const Bundle<T> k4 = deriv(t_end, bundle_axpy(y, hs, k3));
  Bundle<T> out = bundle_axpy(y, hs / 6, k1);
  out = bundle_axpy(out, hs / 3, k2);
  out = bundle_axpy(out, hs / 3, k3);
  return bundle_axpy(out, hs / 6, k4);
}

template <typename T>
void require_finite(const Bundle<T>& y, const char* what, int step) {
  for (const auto& t : y) {
    if (!t.all_finite()) {
      throw NumericError(std::string(what) + " produced non-finite values at step " +
                         std::to_string(step));
    }
  }
}

}  // namespace detail

/// Value of f at (x, v, t) without recording gradients.
template <typename T, typename F>
  requires VectorField<F, T>
Tensor<T> eval_field(const F& f, const Tensor<T>& x, const Tensor<T>& v, T t,
                     std::span<const Tensor<T>> theta) {
  Tape<T> tape;
  std::vector<Var<T>> th;
  th.reserve(theta.size());
  for (const auto& p : theta) th.push_back(tape.constant(p));
  Var<T> out = f(tape, tape.constant(x), tape.constant(v), t, std::span<const Var<T>>(th));
  require_same_shape(out.shape(), v.shape(), "vector field output");
  return out.value();
}

template <typename T, typename F>
  requires VectorField<F, T>
OdeState<T> rk4_step(const OdeState<T>& s, T t, T h, const F& f,
                     std::span<const Tensor<T>> theta = {}) {
  if (!(h > 0)) throw Error("rk4_step: step size must be positive");
  require_same_shape(s.x.shape(), s.v.shape(), "ode state");
  auto deriv = [&](T tt, const detail::Bundle<T>& y) {
    return detail::Bundle<T>{y[1], eval_field(f, y[0], y[1], tt, theta)};
  };
  auto y = detail::rk4_bundle<T>({s.x, s.v}, t, t + h / 2, t + h, h, deriv);
  detail::require_finite(y, "rk4_step", 0);
  return {std::move(y[0]), std::move(y[1])};
}

template <typename T, typename F>
  requires VectorField<F, T>
OdeState<T> ode_solve(const OdeState<T>& s0, const IntegrationConfig<T>& cfg, const F& f,
                      std::span<const Tensor<T>> theta = {}) {
  cfg.validate();
  require_same_shape(s0.x.shape(), s0.v.shape(), "ode state");
  const T h = cfg.step();
  auto deriv = [&](T tt, const detail::Bundle<T>& y) {
    return detail::Bundle<T>{y[1], eval_field(f, y[0], y[1], tt, theta)};
  };
  detail::Bundle<T> y{s0.x, s0.v};
  for (int i = 0; i < cfg.steps; ++i) {
    const T t = cfg.time(i);
    y = detail::rk4_bundle<T>(y, t, t + h / 2, cfg.time(i + 1), h, deriv);
    detail::require_finite(y, "ode_solve", i);
  }
  return {std::move(y[0]), std::move(y[1])};
}

template <typename T>
struct AdjointResult {
  Tensor<T> grad_x0;
  Tensor<T> grad_v0;
  std::vector<Tensor<T>> grad_theta;
  OdeState<T> reconstructed;  ///< state at t0 recovered by the reverse sweep
};

/// Continuous adjoint: integrates [x, v, a_x, a_v, a_theta] backward from t1
/// to t0 with the forward RK4 grid, reconstructing the trajectory instead of
/// storing it. With a = dL/d[x, v]:
///   a_x' = -a_v^T df/dx,  a_v' = -(a_x + a_v^T df/dv),  a_theta' = -a_v^T df/dtheta.
/// When `check_tolerance` is set, a reconstructed x0/v0 that departs from
/// `s0` by more than that relative amount is reported as a config mismatch.
template <typename T, typename F>
  requires VectorField<F, T>
AdjointResult<T> adjoint_backward(const OdeState<T>& s0, const OdeState<T>& s1,
                                  const Tensor<T>& grad_x1, const Tensor<T>& grad_v1,
                                  const IntegrationConfig<T>& cfg, const F& f,
                                  std::span<const Tensor<T>> theta = {},
                                  std::optional<T> check_tolerance = std::nullopt) {
  cfg.validate();
  require_same_shape(s1.x.shape(), grad_x1.shape(), "adjoint grad_x");
  require_same_shape(s1.v.shape(), grad_v1.shape(), "adjoint grad_v");
  const std::size_t np = theta.size();

  auto deriv = [&](T tt, const detail::Bundle<T>& y) {
    Tape<T> tape;
    Var<T> x = tape.leaf(y[0]);
    Var<T> v = tape.leaf(y[1]);
    std::vector<Var<T>> th;
    th.reserve(np);
    for (std::size_t p = 0; p < np; ++p) th.push_back(tape.leaf(theta[p]));
    Var<T> fx = f(tape, x, v, tt, std::span<const Var<T>>(th));
    require_same_shape(fx.shape(), y[1].shape(), "vector field output");
    auto grads = tape.backward(dot_const(fx, y[3]));
    detail::Bundle<T> d;
    d.reserve(4 + np);
    d.push_back(y[1]);
    d.push_back(fx.value());
    Tensor<T> gx = grads[x];
    for (auto& e : gx.data()) e = -e;
    d.push_back(std::move(gx));
    Tensor<T> gv = grads[v];
    const auto ax = y[2].data();
    for (std::size_t i = 0; i < gv.size(); ++i) gv[i] = -(ax[i] + gv[i]);
    d.push_back(std::move(gv));
    for (std::size_t p = 0; p < np; ++p) {
      Tensor<T> gp = grads[th[p]];
      for (auto& e : gp.data()) e = -e;
      d.push_back(std::move(gp));
    }
    return d;
  };

  detail::Bundle<T> y{s1.x, s1.v, grad_x1, grad_v1};
  for (std::size_t p = 0; p < np; ++p) y.push_back(Tensor<T>::zeros(theta[p].shape()));
  const T h = cfg.step();
  for (int i = cfg.steps - 1; i >= 0; --i) {
    const T t_hi = cfg.time(i + 1);
    const T t_lo = cfg.time(i);
    y = detail::rk4_bundle<T>(y, t_hi, t_lo + h / 2, t_lo, -h, deriv);
    detail::require_finite(y, "adjoint_backward", i);
  }

  if (check_tolerance) {
    auto rel = [](const Tensor<T>& a, const Tensor<T>& b) {
      T num = 0, den = 0;
      for (std::size_t i = 0; i < a.size(); ++i) {
        num = std::max(num, std::abs(a[i] - b[i]));
        den = std::max(den, std::abs(b[i]));
      }
      return num / std::max(den, T(1));
    };
    if (rel(y[0], s0.x) > *check_tolerance || rel(y[1], s0.v) > *check_tolerance) {
      throw Error("adjoint_backward: reverse sweep does not return to the initial state; "
                  "integration config or vector field differs from the forward solve");
    }
  }

  AdjointResult<T> r;
  r.reconstructed = {y[0], y[1]};
  r.grad_x0 = std::move(y[2]);
  r.grad_v0 = std::move(y[3]);
  for (std::size_t p = 0; p < np; ++p) r.grad_theta.push_back(std::move(y[4 + p]));
  return r;
}

/// ODE block on a tape. Returns [2, ...] stacking (x(t1), v(t1)).
template <typename T, typename F>
  requires VectorField<F, T>
Var<T> ode_block(Var<T> x0, Var<T> v0, const F& f, const std::vector<Var<T>>& theta,
                 const IntegrationConfig<T>& cfg, GradientMode mode = GradientMode::adjoint) {
  cfg.validate();
  require_same_shape(x0.shape(), v0.shape(), "ode_block state");
  Tape<T>& tape = *x0.tape;
  const T h = cfg.step();

  if (mode == GradientMode::unrolled) {
    Var<T> x = x0, v = v0;
    std::span<const Var<T>> th(theta);
    for (int i = 0; i < cfg.steps; ++i) {
      const T t = cfg.time(i);
      const T tm = t + h / 2;
      const T te = cfg.time(i + 1);
      Var<T> k1x = v;
      Var<T> k1v = f(tape, x, v, t, th);
      Var<T> k2x = axpy(v, h / 2, k1v);
      Var<T> k2v = f(tape, axpy(x, h / 2, k1x), k2x, tm, th);
      Var<T> k3x = axpy(v, h / 2, k2v);
      Var<T> k3v = f(tape, axpy(x, h / 2, k2x), k3x, tm, th);
      Var<T> k4x = axpy(v, h, k3v);
      Var<T> k4v = f(tape, axpy(x, h, k3x), k4x, te, th);
      x = axpy(axpy(axpy(axpy(x, h / 6, k1x), h / 3, k2x), h / 3, k3x), h / 6, k4x);
      v = axpy(axpy(axpy(axpy(v, h / 6, k1v), h / 3, k2v), h / 3, k3v), h / 6, k4v);
    }
    return stack<T>({x, v});
  }

  std::vector<Tensor<T>> theta_values;
  theta_values.reserve(theta.size());
  for (const auto& p : theta) theta_values.push_back(p.value());
  auto s0 = std::make_shared<OdeState<T>>(OdeState<T>{x0.value(), v0.value()});
  auto s1 = std::make_shared<OdeState<T>>(ode_solve(*s0, cfg, f, std::span<const Tensor<T>>(theta_values)));

  const Shape& xs = s1->x.shape();
  Shape out_shape{2};
  out_shape.insert(out_shape.end(), xs.begin(), xs.end());
  Tensor<T> out(out_shape);
  const std::size_t n = s1->x.size();
  std::copy(s1->x.ptr(), s1->x.ptr() + n, out.ptr());
  std::copy(s1->v.ptr(), s1->v.ptr() + n, out.ptr() + n);

  std::vector<Var<T>> inputs{x0, v0};
  inputs.insert(inputs.end(), theta.begin(), theta.end());
  // Retained for backward: the initial and final states only.
  return tape.record(
      "ode_adjoint", inputs, std::move(out), 2,
      [x0, v0, theta, f, cfg, s0, s1, n, xs](Tape<T>& tp, const Tensor<T>& g) {
        Tensor<T> gx1(xs, std::vector<T>(g.ptr(), g.ptr() + n));
        Tensor<T> gv1(xs, std::vector<T>(g.ptr() + n, g.ptr() + 2 * n));
        std::vector<Tensor<T>> tv;
        tv.reserve(theta.size());
        for (const auto& p : theta) tv.push_back(p.value());
        auto r = adjoint_backward(*s0, *s1, gx1, gv1, cfg, f, std::span<const Tensor<T>>(tv));
        tp.accumulate(x0.id, r.grad_x0.data());
        tp.accumulate(v0.id, r.grad_v0.data());
        for (std::size_t p = 0; p < theta.size(); ++p)
          tp.accumulate(theta[p].id, r.grad_theta[p].data());
      });
}

// ---------------------------------------------------------------------------
// Learned fields

inline std::size_t default_groups(std::size_t channels) {
  if (channels % 4 == 0) return 4;
  if (channels % 2 == 0) return 2;
  return 1;
}

/// f(x, v, t): conv3x3 -> GroupNorm -> SiLU -> conv3x3 over the channel
/// concatenation [x, v, t] (x omitted when `use_position` is false), with t
/// broadcast as a constant channel.
template <typename T>
struct DynamicsNet {
  std::size_t channels = 0;
  bool use_position = true;
  std::size_t groups = 1;
  std::vector<std::size_t> param_ids;  // w1, b1, gn_gamma, gn_beta, w2, b2

  static DynamicsNet create(ParameterStore<T>& store, const std::string& prefix,
                            std::size_t channels, Rng& rng, bool use_position = true,
                            T out_gain = T(0.5)) {
    DynamicsNet f;
    f.channels = channels;
    f.use_position = use_position;
    f.groups = default_groups(channels);
    const std::size_t cin = (use_position ? 2 * channels : channels) + 1;
    f.param_ids = {
        store.add(prefix + ".conv1.w", conv_init<T>(channels, cin, 3, 3, rng)),
        store.add(prefix + ".conv1.b", Tensor<T>::zeros(Shape{channels})),
        store.add(prefix + ".norm.gamma", Tensor<T>::ones(Shape{channels})),
        store.add(prefix + ".norm.beta", Tensor<T>::zeros(Shape{channels})),
        store.add(prefix + ".conv2.w", conv_init<T>(channels, channels, 3, 3, rng, out_gain)),
        store.add(prefix + ".conv2.b", Tensor<T>::zeros(Shape{channels})),
    };
    return f;
  }

  Var<T> operator()(Tape<T>& tape, Var<T> x, Var<T> v, T t,
                    std::span<const Var<T>> th) const {
    const Shape& s = v.shape();
    detail::require_rank(s, 4, "dynamics input");
    if (th.size() != 6) throw Error("dynamics net expects 6 parameter tensors");
    Var<T> tch = tape.constant(Tensor<T>::full(Shape{s[0], 1, s[2], s[3]}, t));
    Var<T> in = use_position ? concat_channels<T>({x, v, tch}) : concat_channels<T>({v, tch});
    Var<T> h = conv2d(in, th[0], th[1], 1, 1);
    h = silu(group_norm(h, groups, th[2], th[3]));
    return conv2d(h, th[4], th[5], 1, 1);
  }
};

/// g(x0): initial velocity, one same-size 3x3 convolution.
template <typename T>
struct VelocityNet {
  std::size_t channels = 0;
  std::size_t weight = 0;
  std::size_t bias = 0;

  static VelocityNet create(ParameterStore<T>& store, const std::string& prefix,
                            std::size_t channels, Rng& rng, T gain = T(0.5)) {
    VelocityNet g;
    g.channels = channels;
    g.weight = store.add(prefix + ".w", conv_init<T>(channels, channels, 3, 3, rng, gain));
    g.bias = store.add(prefix + ".b", Tensor<T>::zeros(Shape{channels}));
    return g;
  }

  Var<T> forward(const Binding<T>& p, Var<T> x) const {
    return conv2d(x, p[weight], p[bias], 1, 1);
  }
};

/// Second-order ODE feature map: v0 = g(x0), integrate, return x(t1).
template <typename T>
Var<T> sono_integrate(const Binding<T>& p, Var<T> x0, const VelocityNet<T>& g,
                      const DynamicsNet<T>& f, const IntegrationConfig<T>& cfg,
                      GradientMode mode = GradientMode::adjoint) {
  Var<T> v0 = g.forward(p, x0);
  Var<T> state = ode_block(x0, v0, f, p.select(f.param_ids), cfg, mode);
  return select(state, 0);
}

}  // namespace iukan
