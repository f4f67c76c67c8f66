#pragma once

#include <cmath>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "iukan/tape.hpp"
#include "iukan/tensor.hpp"

namespace iukan {

using Rng = std::mt19937_64;

template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
};

/// Ordered, uniquely named parameter tensors. Order is the checkpoint order.
template <typename T>
class ParameterStore {
 public:
  std::size_t add(std::string name, Tensor<T> init) {
    if (index_.count(name)) throw Error("duplicate parameter name '" + name + "'");
    index_.emplace(name, params_.size());
    params_.push_back({std::move(name), std::move(init)});
    return params_.size() - 1;
  }

  std::size_t size() const noexcept { return params_.size(); }
  Tensor<T>& operator[](std::size_t i) { return params_.at(i).value; }
  const Tensor<T>& operator[](std::size_t i) const { return params_.at(i).value; }
  const std::string& name(std::size_t i) const { return params_.at(i).name; }
  std::vector<Parameter<T>>& all() noexcept { return params_; }
  const std::vector<Parameter<T>>& all() const noexcept { return params_; }

  std::size_t find(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw Error("unknown parameter '" + name + "'");
    return it->second;
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
  }

 private:
  std::vector<Parameter<T>> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Parameters registered as leaves on one tape, addressed by store index.
template <typename T>
class Binding {
 public:
  Binding(Tape<T>& tape, const ParameterStore<T>& store, bool requires_grad) {
    vars_.reserve(store.size());
    for (std::size_t i = 0; i < store.size(); ++i)
      vars_.push_back(tape.leaf(store[i], requires_grad, "param"));
  }

  /// Wraps variables already on a tape, in store order.
  explicit Binding(std::vector<Var<T>> vars) : vars_(std::move(vars)) {}

  Var<T> operator[](std::size_t id) const { return vars_.at(id); }

  std::vector<Var<T>> select(const std::vector<std::size_t>& ids) const {
    std::vector<Var<T>> out;
    out.reserve(ids.size());
    for (auto id : ids) out.push_back(vars_.at(id));
    return out;
  }

  const std::vector<Var<T>>& vars() const noexcept { return vars_; }

 private:
  std::vector<Var<T>> vars_;
};

template <typename T>
Tensor<T> uniform_tensor(Shape shape, T bound, Rng& rng) {
  Tensor<T> t(std::move(shape));
  std::uniform_real_distribution<double> dist(-static_cast<double>(bound),
                                              static_cast<double>(bound));
  for (auto& v : t.data()) v = static_cast<T>(dist(rng));
  return t;
}

template <typename T>
Tensor<T> normal_tensor(Shape shape, T stddev, Rng& rng) {
  Tensor<T> t(std::move(shape));
  std::normal_distribution<double> dist(0.0, static_cast<double>(stddev));
  for (auto& v : t.data()) v = static_cast<T>(dist(rng));
  return t;
}

/// Conv kernel [out, in, kh, kw] with fan-in uniform bound scaled by `gain`.
template <typename T>
Tensor<T> conv_init(std::size_t out, std::size_t in, std::size_t kh, std::size_t kw,
                    Rng& rng, T gain = T(1)) {
  const T bound = gain / std::sqrt(static_cast<T>(in * kh * kw));
  return uniform_tensor<T>(Shape{out, in, kh, kw}, bound, rng);
}

}  // namespace iukan
