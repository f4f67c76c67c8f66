#pragma once

#include <algorithm>
#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "iukan/ops.hpp"
#include "iukan/params.hpp"

namespace iukan {

template <typename T>
struct GradCheckResult {
  double max_rel_error = 0;
  std::size_t checked = 0;
  std::string worst;  ///< "input[i] element j" of the largest discrepancy
};

/// Finite-difference step for the 64-bit reference evaluation.
inline constexpr double kFdStep = 1e-5;

/// Per-element relative error |a - n| / max(|a|, |n|, floor), where floor is
/// `floor_frac` of the largest finite-difference magnitude over the sample,
/// so entries that are numerically zero do not dominate.
inline double relative_errors(const std::vector<double>& analytic,
                              const std::vector<double>& numeric, double floor_frac,
                              std::size_t* worst = nullptr) {
  double scale = 0;
  for (double n : numeric) scale = std::max(scale, std::abs(n));
  const double floor = std::max(floor_frac * scale, 1e-12);
  double max_err = 0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const double den = std::max({std::abs(analytic[i]), std::abs(numeric[i]), floor});
    const double e = std::abs(analytic[i] - numeric[i]) / den;
    if (e > max_err) {
      max_err = e;
      if (worst) *worst = i;
    }
  }
  return max_err;
}

/// Compares reverse-mode gradients of L = sum(w * build(inputs)) at precision
/// T with five-point finite differences of the same graph evaluated at 64-bit,
/// for a fixed random projection w. `build` is called with both Tape<T> and
/// Tape<double>. `samples` caps the checked elements per input (0 = all).
template <typename T, typename Build>
GradCheckResult<T> gradcheck(const Build& build, const std::vector<Tensor<T>>& inputs, Rng& rng,
                             std::size_t samples = 0, double step = kFdStep,
                             double floor_frac = 1e-2) {
  Tape<T> tape;
  std::vector<Var<T>> vars;
  for (const auto& t : inputs) vars.push_back(tape.leaf(t));
  Var<T> out = build(tape, vars);
  const Tensor<T> weights = normal_tensor<T>(out.shape(), T(1), rng);
  auto grads = tape.backward(dot_const(out, weights));

  std::vector<Tensor<double>> base;
  for (const auto& t : inputs) base.push_back(t.template cast<double>());
  const Tensor<double> w64 = weights.template cast<double>();
  auto eval = [&](const std::vector<Tensor<double>>& in) {
    Tape<double> t64;
    std::vector<Var<double>> v64;
    for (const auto& t : in) v64.push_back(t64.constant(t));
    const auto& o = build(t64, v64).value();
    double acc = 0;
    for (std::size_t i = 0; i < o.size(); ++i) acc += w64[i] * o[i];
    return acc;
  };

  std::vector<double> analytic, numeric;
  std::vector<std::string> labels;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const Tensor<T> g = grads[vars[k]];
    std::vector<std::size_t> idx(inputs[k].size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    if (samples && idx.size() > samples) {
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(samples);
    }
    for (std::size_t i : idx) {
      auto probe = [&](double offset) {
        auto in = base;
        in[k][i] += offset;
        return eval(in);
      };
      const double fd = (8 * (probe(step) - probe(-step)) - (probe(2 * step) - probe(-2 * step))) /
                        (12 * step);
      analytic.push_back(static_cast<double>(g[i]));
      numeric.push_back(fd);
      labels.push_back("input[" + std::to_string(k) + "] element " + std::to_string(i));
    }
  }
  GradCheckResult<T> r;
  std::size_t worst = 0;
  r.max_rel_error = relative_errors(analytic, numeric, floor_frac, &worst);
  r.checked = analytic.size();
  if (!labels.empty()) r.worst = labels[worst];
  return r;
}

/// Finite-difference audit of `samples` randomly chosen scalars across all
/// parameters of a store, for a scalar loss built from a Binding.
template <typename T, typename Loss>
GradCheckResult<T> gradcheck_parameters(ParameterStore<T>& store, const Loss& loss, Rng& rng,
                                        std::size_t samples, double step = kFdStep,
                                        double floor_frac = 1e-2) {
  static_assert(sizeof(T) >= 8, "parameter audits run at 64-bit");
  std::vector<Tensor<T>> grads;
  {
    Tape<T> tape;
    Binding<T> p(tape, store, true);
    auto g = tape.backward(loss(tape, p));
    for (std::size_t i = 0; i < store.size(); ++i) grads.push_back(g[p[i]]);
  }
  auto eval = [&]() {
    Tape<T> tape;
    Binding<T> p(tape, store, false);
    return static_cast<double>(loss(tape, p).value()[0]);
  };

  std::vector<std::pair<std::size_t, std::size_t>> picks;
  const std::size_t total = store.scalar_count();
  std::uniform_int_distribution<std::size_t> pick(0, total - 1);
  for (std::size_t s = 0; s < samples; ++s) {
    std::size_t flat = pick(rng), i = 0;
    while (flat >= store[i].size()) flat -= store[i++].size();
    picks.emplace_back(i, flat);
  }

  std::vector<double> analytic, numeric;
  std::vector<std::string> labels;
  for (auto [i, e] : picks) {
    const T saved = store[i][e];
    auto probe = [&](double offset) {
      store[i][e] = static_cast<T>(static_cast<double>(saved) + offset);
      return eval();
    };
    const double fd =
        (8 * (probe(step) - probe(-step)) - (probe(2 * step) - probe(-2 * step))) / (12 * step);
    store[i][e] = saved;
    analytic.push_back(static_cast<double>(grads[i][e]));
    numeric.push_back(fd);
    labels.push_back(store.name(i) + "[" + std::to_string(e) + "]");
  }
  GradCheckResult<T> r;
  std::size_t worst = 0;
  r.max_rel_error = relative_errors(analytic, numeric, floor_frac, &worst);
  r.checked = analytic.size();
  if (!labels.empty()) r.worst = labels[worst];
  return r;
}

}  // namespace iukan
