#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace iukan {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Incompatible extents between operands or against a configuration.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A NaN or Inf appeared where finite values were required.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Malformed file or configuration content.
class FormatError : public Error {
 public:
  using Error::Error;
};

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

/// Dense row-major array. Extents may be zero (e.g. an empty channel block).
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0))
      : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}
  Tensor(Shape shape, std::vector<T> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != shape_numel(shape_)) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_str(shape_));
    }
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), T(0)); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), T(1)); }
  static Tensor full(Shape shape, T v) { return Tensor(std::move(shape), v); }
  static Tensor scalar(T v) { return Tensor(Shape{1}, v); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  T* ptr() noexcept { return data_.data(); }
  const T* ptr() const noexcept { return data_.data(); }
  std::vector<T>& storage() noexcept { return data_; }
  const std::vector<T>& storage() const noexcept { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  template <typename... Idx>
  T& at(Idx... idx) {
    return data_[offset({static_cast<std::size_t>(idx)...})];
  }
  template <typename... Idx>
  const T& at(Idx... idx) const {
    return data_[offset({static_cast<std::size_t>(idx)...})];
  }

  Tensor reshaped(Shape shape) const {
    if (shape_numel(shape) != size()) {
      throw ShapeError("cannot reshape " + shape_str(shape_) + " to " +
                       shape_str(shape));
    }
    return Tensor(std::move(shape), data_);
  }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return Tensor<U>(shape_, std::move(out));
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(),
                       [](T v) { return std::isfinite(v); });
  }

  T sum() const { return std::accumulate(data_.begin(), data_.end(), T(0)); }

  T max_abs() const {
    T m = 0;
    for (T v : data_) m = std::max(m, std::abs(v));
    return m;
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  std::size_t offset(std::initializer_list<std::size_t> idx) const {
    if (idx.size() != shape_.size()) {
      throw ShapeError("index rank " + std::to_string(idx.size()) +
                       " does not match tensor rank " +
                       std::to_string(shape_.size()));
    }
    std::size_t off = 0;
    std::size_t d = 0;
    for (std::size_t i : idx) off = off * shape_[d++] + i;
    return off;
  }

  Shape shape_;
  std::vector<T> data_;
};

inline void require_same_shape(const Shape& a, const Shape& b,
                               const char* what) {
  if (a != b) {
    throw ShapeError(std::string(what) + ": shape mismatch " + shape_str(a) +
                     " vs " + shape_str(b));
  }
}

}  // namespace iukan
