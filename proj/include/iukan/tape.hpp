#pragma once

#include <deque>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "iukan/tensor.hpp"

namespace iukan {

template <typename T>
class Tape;

/// Handle to a value recorded on a tape.
template <typename T>
struct Var {
  using value_type = T;

  Tape<T>* tape = nullptr;
  std::size_t id = 0;

  const Tensor<T>& value() const { return tape->value(id); }
  const Shape& shape() const { return tape->value(id).shape(); }
  bool requires_grad() const { return tape->requires_grad(id); }
};

template <typename T>
class GradientMap {
 public:
  GradientMap(const Tape<T>* tape, std::vector<Tensor<T>> grads)
      : tape_(tape), grads_(std::move(grads)) {}

  /// Gradient of the loss w.r.t. `v`; zeros when the loss does not depend on it.
  Tensor<T> operator[](Var<T> v) const { return get(v.id); }

  Tensor<T> get(std::size_t id) const {
    if (id >= grads_.size()) {
      throw Error("gradient requested for id " + std::to_string(id) +
                  " which is not on the tape");
    }
    if (grads_[id].empty() && !tape_->value(id).empty()) {
      return Tensor<T>::zeros(tape_->value(id).shape());
    }
    return grads_[id];
  }

  bool has(Var<T> v) const { return v.id < grads_.size() && !grads_[v.id].empty(); }

 private:
  const Tape<T>* tape_;
  std::vector<Tensor<T>> grads_;
};

/// Reverse-mode tape. Entries are appended in evaluation order, so every
/// input id precedes its consumer; backward visits each entry once in
/// reverse. A tape belongs to a single thread.
template <typename T>
class Tape {
 public:
  using Id = std::size_t;
  /// Receives the tape and the gradient flowing into the entry's output and
  /// accumulates into its inputs through `grad_buffer`.
  using BackwardFn = std::function<void(Tape&, const Tensor<T>&)>;

  struct Entry {
    std::string op;
    std::vector<Id> inputs;
    Tensor<T> value;
    std::size_t retained = 0;
    bool requires_grad = false;
    BackwardFn backward;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> leaf(Tensor<T> value, bool requires_grad = true,
              std::string op = "leaf") {
    if (!value.all_finite()) {
      throw NumericError("non-finite value supplied to tape leaf '" + op + "'");
    }
    Entry e;
    e.op = std::move(op);
    e.value = std::move(value);
    e.requires_grad = requires_grad;
    entries_.push_back(std::move(e));
    return Var<T>{this, entries_.size() - 1};
  }

  Var<T> constant(Tensor<T> value) {
    return leaf(std::move(value), false, "constant");
  }

  /// Appends an op result. `retained` is the number of tensors the backward
  /// closure keeps alive beyond the tape values themselves.
  Var<T> record(std::string op, const std::vector<Var<T>>& inputs,
                Tensor<T> value, std::size_t retained, BackwardFn backward) {
    if (!value.all_finite()) {
      throw NumericError("non-finite value produced by op '" + op + "'");
    }
    Entry e;
    e.op = std::move(op);
    e.value = std::move(value);
    e.inputs.reserve(inputs.size());
    for (const auto& in : inputs) {
      if (in.tape != this) throw Error("op '" + e.op + "' mixes tapes");
      e.inputs.push_back(in.id);
      e.requires_grad = e.requires_grad || entries_[in.id].requires_grad;
    }
    if (e.requires_grad) {
      e.retained = retained;
      e.backward = std::move(backward);
    }
    entries_.push_back(std::move(e));
    return Var<T>{this, entries_.size() - 1};
  }

  const Tensor<T>& value(Id id) const { return entries_.at(id).value; }
  bool requires_grad(Id id) const { return entries_.at(id).requires_grad; }
  const Entry& entry(Id id) const { return entries_.at(id); }
  std::size_t size() const noexcept { return entries_.size(); }

  /// Total tensors held for backward across all recorded entries.
  std::size_t retained_buffers() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.retained;
    return n;
  }

  /// During backward: mutable gradient accumulator for `id`, or an empty span
  /// when that value does not require a gradient.
  std::span<T> grad_buffer(Id id) {
    if (!entries_[id].requires_grad) return {};
    auto& g = grads_[id];
    if (g.empty() && !entries_[id].value.empty()) {
      g = Tensor<T>::zeros(entries_[id].value.shape());
    }
    return g.data();
  }
  std::span<T> grad_buffer(Var<T> v) { return grad_buffer(v.id); }

  void accumulate(Id id, std::span<const T> g) {
    auto buf = grad_buffer(id);
    if (buf.empty()) return;
    for (std::size_t i = 0; i < buf.size(); ++i) buf[i] += g[i];
  }

  GradientMap<T> backward(Var<T> loss) {
    if (loss.tape != this || loss.id >= entries_.size()) {
      throw Error("backward: loss id is not on this tape");
    }
    if (entries_[loss.id].value.size() != 1) {
      throw ShapeError("backward: loss must be scalar, got shape " +
                       shape_str(entries_[loss.id].value.shape()));
    }
    grads_.assign(entries_.size(), Tensor<T>{});
    if (entries_[loss.id].requires_grad) {
      grads_[loss.id] = Tensor<T>::ones(entries_[loss.id].value.shape());
    }
    for (Id i = loss.id + 1; i-- > 0;) {
      auto& e = entries_[i];
      if (!e.backward || grads_[i].empty()) continue;
      e.backward(*this, grads_[i]);
      if (!e.inputs.empty() && !keep_intermediate_) grads_[i] = Tensor<T>{};
    }
    return GradientMap<T>(this, std::exchange(grads_, {}));
  }

  /// Keep gradients of non-leaf values (for inspection in tests).
  void keep_intermediate_grads(bool keep) { keep_intermediate_ = keep; }

 private:
  std::deque<Entry> entries_;
  std::vector<Tensor<T>> grads_;
  bool keep_intermediate_ = false;
};

}  // namespace iukan
