#pragma once

#include <Eigen/Core>
#include <cmath>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "iukan/tape.hpp"
#include "iukan/tensor.hpp"

// Differentiable operators over Tape values. Layout is row-major NCHW for
// images and [N, M, d] for token sequences.

namespace iukan {

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapMat = Eigen::Map<const RowMat<T>>;

template <typename T>
inline T sigmoid(T x) {
  if (x >= 0) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

inline void require_rank(const Shape& s, std::size_t r, const char* what) {
  if (s.size() != r) {
    throw ShapeError(std::string(what) + ": expected rank " +
                     std::to_string(r) + ", got " + shape_str(s));
  }
}

/// Unfold [C,H,W] into columns [C*kh*kw, Ho*Wo] with zero padding.
template <typename T>
void im2col(const T* x, std::size_t C, std::size_t H, std::size_t W,
            std::size_t kh, std::size_t kw, std::size_t stride,
            std::size_t pad, std::size_t Ho, std::size_t Wo, T* col) {
  const std::ptrdiff_t sH = static_cast<std::ptrdiff_t>(H);
  const std::ptrdiff_t sW = static_cast<std::ptrdiff_t>(W);
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t ky = 0; ky < kh; ++ky) {
      for (std::size_t kx = 0; kx < kw; ++kx) {
        T* row = col + ((c * kh + ky) * kw + kx) * Ho * Wo;
        for (std::size_t oy = 0; oy < Ho; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) -
                                    static_cast<std::ptrdiff_t>(pad);
          T* r = row + oy * Wo;
          if (iy < 0 || iy >= sH) {
            std::fill(r, r + Wo, T(0));
            continue;
          }
          const T* src = x + (c * H + static_cast<std::size_t>(iy)) * W;
          for (std::size_t ox = 0; ox < Wo; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) -
                                      static_cast<std::ptrdiff_t>(pad);
            r[ox] = (ix < 0 || ix >= sW) ? T(0) : src[ix];
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* col, std::size_t C, std::size_t H, std::size_t W,
            std::size_t kh, std::size_t kw, std::size_t stride,
            std::size_t pad, std::size_t Ho, std::size_t Wo, T* x) {
  const std::ptrdiff_t sH = static_cast<std::ptrdiff_t>(H);
  const std::ptrdiff_t sW = static_cast<std::ptrdiff_t>(W);
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t ky = 0; ky < kh; ++ky) {
      for (std::size_t kx = 0; kx < kw; ++kx) {
        const T* row = col + ((c * kh + ky) * kw + kx) * Ho * Wo;
        for (std::size_t oy = 0; oy < Ho; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) -
                                    static_cast<std::ptrdiff_t>(pad);
          if (iy < 0 || iy >= sH) continue;
          T* dst = x + (c * H + static_cast<std::size_t>(iy)) * W;
          const T* r = row + oy * Wo;
          for (std::size_t ox = 0; ox < Wo; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) -
                                      static_cast<std::ptrdiff_t>(pad);
            if (ix >= 0 && ix < sW) dst[ix] += r[ox];
          }
        }
      }
    }
  }
}

/// Output element i takes input element index[i].
template <typename T>
Var<T> gather(Var<T> x, Shape out_shape,
              std::shared_ptr<const std::vector<std::size_t>> index,
              std::string op) {
  const auto& xv = x.value();
  Tensor<T> out(std::move(out_shape));
  const auto& idx = *index;
  for (std::size_t i = 0; i < idx.size(); ++i) out[i] = xv[idx[i]];
  return x.tape->record(std::move(op), {x}, std::move(out), 0,
                        [x, index](Tape<T>& tape, const Tensor<T>& g) {
                          auto gx = tape.grad_buffer(x);
                          const auto& idx = *index;
                          for (std::size_t i = 0; i < idx.size(); ++i) gx[idx[i]] += g[i];
                        });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  require_same_shape(a.shape(), b.shape(), "add");
  Tensor<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return a.tape->record("add", {a, b}, std::move(out), 0,
                        [a, b](Tape<T>& tape, const Tensor<T>& g) {
                          tape.accumulate(a.id, g.data());
                          tape.accumulate(b.id, g.data());
                        });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  require_same_shape(a.shape(), b.shape(), "sub");
  Tensor<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  return a.tape->record("sub", {a, b}, std::move(out), 0,
                        [a, b](Tape<T>& tape, const Tensor<T>& g) {
                          tape.accumulate(a.id, g.data());
                          auto gb = tape.grad_buffer(b);
                          for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= g[i];
                        });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  require_same_shape(a.shape(), b.shape(), "mul");
  Tensor<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return a.tape->record("mul", {a, b}, std::move(out), 0,
                        [a, b](Tape<T>& tape, const Tensor<T>& g) {
                          const auto& av = a.value();
                          const auto& bv = b.value();
                          auto ga = tape.grad_buffer(a);
                          for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * bv[i];
                          auto gb = tape.grad_buffer(b);
                          for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[i] * av[i];
                        });
}

template <typename T>
Var<T> scale(Var<T> a, T s) {
  Tensor<T> out = a.value();
  for (auto& v : out.data()) v *= s;
  return a.tape->record("scale", {a}, std::move(out), 0,
                        [a, s](Tape<T>& tape, const Tensor<T>& g) {
                          auto ga = tape.grad_buffer(a);
                          for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += s * g[i];
                        });
}

template <typename T>
Var<T> add_scalar(Var<T> a, T c) {
  Tensor<T> out = a.value();
  for (auto& v : out.data()) v += c;
  return a.tape->record("add_scalar", {a}, std::move(out), 0,
                        [a](Tape<T>& tape, const Tensor<T>& g) {
                          tape.accumulate(a.id, g.data());
                        });
}

/// a + s * b, the RK4 stage combiner.
template <typename T>
Var<T> axpy(Var<T> a, T s, Var<T> b) {
  require_same_shape(a.shape(), b.shape(), "axpy");
  Tensor<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += s * bv[i];
  return a.tape->record("axpy", {a, b}, std::move(out), 0,
                        [a, b, s](Tape<T>& tape, const Tensor<T>& g) {
                          tape.accumulate(a.id, g.data());
                          auto gb = tape.grad_buffer(b);
                          for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += s * g[i];
                        });
}

enum class Activation { silu, sigmoid, relu, tanh, exp };

inline const char* activation_name(Activation k) {
  switch (k) {
    case Activation::silu: return "silu";
    case Activation::sigmoid: return "sigmoid";
    case Activation::relu: return "relu";
    case Activation::tanh: return "tanh";
    case Activation::exp: return "exp";
  }
  return "?";
}

template <typename T>
Var<T> activate(Var<T> a, Activation kind) {
  Tensor<T> out = a.value();
  for (auto& v : out.data()) {
    switch (kind) {
      case Activation::silu: v = v * detail::sigmoid(v); break;
      case Activation::sigmoid: v = detail::sigmoid(v); break;
      case Activation::relu: v = v > 0 ? v : T(0); break;
      case Activation::tanh: v = std::tanh(v); break;
      case Activation::exp: v = std::exp(v); break;
    }
  }
  return a.tape->record(activation_name(kind), {a}, std::move(out), 1,
                        [a, kind](Tape<T>& tape, const Tensor<T>& g) {
                          const auto& xv = a.value();
                          auto ga = tape.grad_buffer(a);
                          for (std::size_t i = 0; i < ga.size(); ++i) {
                            const T x = xv[i];
                            T d = 0;
                            switch (kind) {
                              case Activation::silu: {
                                const T s = detail::sigmoid(x);
                                d = s * (T(1) + x * (T(1) - s));
                                break;
                              }
                              case Activation::sigmoid: {
                                const T s = detail::sigmoid(x);
                                d = s * (T(1) - s);
                                break;
                              }
                              case Activation::relu: d = x > 0 ? T(1) : T(0); break;
                              case Activation::tanh: {
                                const T t = std::tanh(x);
                                d = T(1) - t * t;
                                break;
                              }
                              case Activation::exp: d = std::exp(x); break;
                            }
                            ga[i] += g[i] * d;
                          }
                        });
}

template <typename T> Var<T> silu(Var<T> a) { return activate(a, Activation::silu); }
template <typename T> Var<T> sigmoid(Var<T> a) { return activate(a, Activation::sigmoid); }
template <typename T> Var<T> relu(Var<T> a) { return activate(a, Activation::relu); }

// ---------------------------------------------------------------------------
// Reductions

template <typename T>
Var<T> sum(Var<T> a) {
  T s = 0;
  for (T v : a.value().data()) s += v;
  return a.tape->record("sum", {a}, Tensor<T>::scalar(s), 0,
                        [a](Tape<T>& tape, const Tensor<T>& g) {
                          auto ga = tape.grad_buffer(a);
                          for (auto& v : ga) v += g[0];
                        });
}

template <typename T>
Var<T> mean(Var<T> a) {
  const T n = static_cast<T>(a.value().size());
  return scale(sum(a), T(1) / n);
}

/// sum(a * w) for a fixed weight tensor.
template <typename T>
Var<T> dot_const(Var<T> a, const Tensor<T>& w) {
  require_same_shape(a.shape(), w.shape(), "dot_const");
  T s = 0;
  const auto& av = a.value();
  for (std::size_t i = 0; i < av.size(); ++i) s += av[i] * w[i];
  return a.tape->record("dot_const", {a}, Tensor<T>::scalar(s), 1,
                        [a, w](Tape<T>& tape, const Tensor<T>& g) {
                          auto ga = tape.grad_buffer(a);
                          for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[0] * w[i];
                        });
}

// ---------------------------------------------------------------------------
// Shape manipulation

template <typename T>
Var<T> reshape(Var<T> a, Shape shape) {
  Tensor<T> out = a.value().reshaped(std::move(shape));
  return a.tape->record("reshape", {a}, std::move(out), 0,
                        [a](Tape<T>& tape, const Tensor<T>& g) {
                          tape.accumulate(a.id, g.data());
                        });
}

/// Concatenate along dim 1 (channels for NCHW). All other extents must agree.
template <typename T>
Var<T> concat_channels(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_channels: no inputs");
  const Shape& s0 = parts[0].shape();
  if (s0.size() < 2) throw ShapeError("concat_channels: rank must be >= 2");
  std::size_t total_c = 0;
  std::size_t inner = 1;
  for (std::size_t d = 2; d < s0.size(); ++d) inner *= s0[d];
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == s0.size() && s[0] == s0[0];
    for (std::size_t d = 2; ok && d < s.size(); ++d) ok = s[d] == s0[d];
    if (!ok) {
      throw ShapeError("concat_channels: spatial/batch mismatch " +
                       shape_str(s0) + " vs " + shape_str(s));
    }
    total_c += s[1];
  }
  Shape out_shape = s0;
  out_shape[1] = total_c;
  Tensor<T> out(out_shape);
  const std::size_t N = s0[0];
  for (std::size_t n = 0; n < N; ++n) {
    std::size_t c_off = 0;
    for (const auto& p : parts) {
      const std::size_t C = p.shape()[1];
      const T* src = p.value().ptr() + n * C * inner;
      std::copy(src, src + C * inner, out.ptr() + (n * total_c + c_off) * inner);
      c_off += C;
    }
  }
  return parts[0].tape->record(
      "concat_channels", parts, std::move(out), 0,
      [parts, total_c, inner, N](Tape<T>& tape, const Tensor<T>& g) {
        std::size_t c_off = 0;
        for (const auto& p : parts) {
          const std::size_t C = p.shape()[1];
          auto gp = tape.grad_buffer(p);
          if (!gp.empty()) {
            for (std::size_t n = 0; n < N; ++n) {
              const T* src = g.ptr() + (n * total_c + c_off) * inner;
              T* dst = gp.data() + n * C * inner;
              for (std::size_t i = 0; i < C * inner; ++i) dst[i] += src[i];
            }
          }
          c_off += C;
        }
      });
}

template <typename T>
Var<T> concat_channels(Var<T> a, Var<T> b) {
  return concat_channels<T>(std::vector<Var<T>>{a, b});
}

/// Channels [c0, c1) of an [N, C, ...] tensor.
template <typename T>
Var<T> slice_channels(Var<T> a, std::size_t c0, std::size_t c1) {
  const Shape& s = a.shape();
  if (s.size() < 2 || c0 > c1 || c1 > s[1]) {
    throw ShapeError("slice_channels: range [" + std::to_string(c0) + "," +
                     std::to_string(c1) + ") invalid for " + shape_str(s));
  }
  std::size_t inner = 1;
  for (std::size_t d = 2; d < s.size(); ++d) inner *= s[d];
  Shape out_shape = s;
  out_shape[1] = c1 - c0;
  auto index = std::make_shared<std::vector<std::size_t>>();
  index->reserve(shape_numel(out_shape));
  for (std::size_t n = 0; n < s[0]; ++n)
    for (std::size_t c = c0; c < c1; ++c)
      for (std::size_t i = 0; i < inner; ++i) index->push_back((n * s[1] + c) * inner + i);
  return detail::gather(a, out_shape, std::move(index), "slice_channels");
}

/// Stack equally shaped values along a new leading dimension.
template <typename T>
Var<T> stack(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw ShapeError("stack: no inputs");
  const Shape& s0 = parts[0].shape();
  for (const auto& p : parts) require_same_shape(s0, p.shape(), "stack");
  Shape out_shape{parts.size()};
  out_shape.insert(out_shape.end(), s0.begin(), s0.end());
  Tensor<T> out(out_shape);
  const std::size_t n = shape_numel(s0);
  for (std::size_t k = 0; k < parts.size(); ++k)
    std::copy(parts[k].value().ptr(), parts[k].value().ptr() + n, out.ptr() + k * n);
  return parts[0].tape->record("stack", parts, std::move(out), 0,
                               [parts, n](Tape<T>& tape, const Tensor<T>& g) {
                                 for (std::size_t k = 0; k < parts.size(); ++k)
                                   tape.accumulate(parts[k].id, g.data().subspan(k * n, n));
                               });
}

/// Entry `i` along the leading dimension.
template <typename T>
Var<T> select(Var<T> a, std::size_t i) {
  const Shape& s = a.shape();
  if (s.empty() || i >= s[0]) throw ShapeError("select: index out of range for " + shape_str(s));
  Shape out_shape(s.begin() + 1, s.end());
  const std::size_t n = shape_numel(out_shape);
  Tensor<T> out(out_shape,
                std::vector<T>(a.value().ptr() + i * n, a.value().ptr() + (i + 1) * n));
  return a.tape->record("select", {a}, std::move(out), 0,
                        [a, i, n](Tape<T>& tape, const Tensor<T>& g) {
                          auto ga = tape.grad_buffer(a);
                          for (std::size_t k = 0; k < n; ++k) ga[i * n + k] += g[k];
                        });
}

/// [N, C, H, W] -> [N, H*W, C] (pixels become rows).
template <typename T>
Var<T> grid_to_tokens(Var<T> a) {
  const Shape& s = a.shape();
  detail::require_rank(s, 4, "grid_to_tokens");
  const std::size_t N = s[0], C = s[1], HW = s[2] * s[3];
  auto index = std::make_shared<std::vector<std::size_t>>(N * HW * C);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t p = 0; p < HW; ++p)
      for (std::size_t c = 0; c < C; ++c) (*index)[(n * HW + p) * C + c] = (n * C + c) * HW + p;
  return detail::gather(a, Shape{N, HW, C}, std::move(index), "grid_to_tokens");
}

/// [N, H*W, C] -> [N, C, H, W].
template <typename T>
Var<T> tokens_to_grid(Var<T> a, std::size_t H, std::size_t W) {
  const Shape& s = a.shape();
  detail::require_rank(s, 3, "tokens_to_grid");
  if (s[1] != H * W) {
    throw ShapeError("tokens_to_grid: " + std::to_string(s[1]) +
                     " tokens cannot form a " + std::to_string(H) + "x" +
                     std::to_string(W) + " grid");
  }
  const std::size_t N = s[0], C = s[2], HW = H * W;
  auto index = std::make_shared<std::vector<std::size_t>>(N * HW * C);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t p = 0; p < HW; ++p) (*index)[(n * C + c) * HW + p] = (n * HW + p) * C + c;
  return detail::gather(a, Shape{N, C, H, W}, std::move(index), "tokens_to_grid");
}

// ---------------------------------------------------------------------------
// Convolutions

/// Adds b[c] to every element of channel c of an [N, C, ...] tensor.
template <typename T>
Var<T> add_channel_bias(Var<T> x, Var<T> b) {
  const Shape& s = x.shape();
  if (s.size() < 2 || b.value().size() != s[1]) {
    throw ShapeError("add_channel_bias: bias " + shape_str(b.shape()) +
                     " does not match channels of " + shape_str(s));
  }
  std::size_t inner = 1;
  for (std::size_t d = 2; d < s.size(); ++d) inner *= s[d];
  const std::size_t N = s[0], C = s[1];
  Tensor<T> out = x.value();
  const auto& bv = b.value();
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c) {
      T* p = out.ptr() + (n * C + c) * inner;
      for (std::size_t i = 0; i < inner; ++i) p[i] += bv[c];
    }
  return x.tape->record("add_channel_bias", {x, b}, std::move(out), 0,
                        [x, b, N, C, inner](Tape<T>& tape, const Tensor<T>& g) {
                          tape.accumulate(x.id, g.data());
                          auto gb = tape.grad_buffer(b);
                          if (gb.empty()) return;
                          for (std::size_t n = 0; n < N; ++n)
                            for (std::size_t c = 0; c < C; ++c) {
                              const T* p = g.ptr() + (n * C + c) * inner;
                              T acc = 0;
                              for (std::size_t i = 0; i < inner; ++i) acc += p[i];
                              gb[c] += acc;
                            }
                        });
}

/// Cross-correlation of [N,C,H,W] with [C',C,kh,kw], zero padding.
template <typename T>
Var<T> conv2d(Var<T> x, Var<T> w, std::size_t stride = 1, std::size_t padding = 0) {
  const Shape& xs = x.shape();
  const Shape& ws = w.shape();
  detail::require_rank(xs, 4, "conv2d input");
  detail::require_rank(ws, 4, "conv2d kernel");
  if (stride < 1) throw ShapeError("conv2d: stride must be >= 1");
  const std::size_t N = xs[0], C = xs[1], H = xs[2], W = xs[3];
  const std::size_t Co = ws[0], kh = ws[2], kw = ws[3];
  if (ws[1] != C) {
    throw ShapeError("conv2d: kernel expects " + std::to_string(ws[1]) +
                     " input channels, input " + shape_str(xs) + " has " +
                     std::to_string(C));
  }
  if (kh > H + 2 * padding || kw > W + 2 * padding || kh == 0 || kw == 0) {
    throw ShapeError("conv2d: kernel " + shape_str(ws) +
                     " larger than padded input " + shape_str(xs));
  }
  const std::size_t Ho = (H + 2 * padding - kh) / stride + 1;
  const std::size_t Wo = (W + 2 * padding - kw) / stride + 1;
  const std::size_t K = C * kh * kw, P = Ho * Wo;
  const bool pointwise = kh == 1 && kw == 1 && stride == 1 && padding == 0;

  Tensor<T> out(Shape{N, Co, Ho, Wo});
  std::vector<T> col(pointwise ? 0 : K * P);
  detail::CMapMat<T> wm(w.value().ptr(), Co, K);
  for (std::size_t n = 0; n < N; ++n) {
    const T* xn = x.value().ptr() + n * C * H * W;
    if (!pointwise) detail::im2col(xn, C, H, W, kh, kw, stride, padding, Ho, Wo, col.data());
    detail::CMapMat<T> cm(pointwise ? xn : col.data(), K, P);
    detail::MapMat<T> om(out.ptr() + n * Co * P, Co, P);
    om.noalias() = wm * cm;
  }
  return x.tape->record(
      "conv2d", {x, w}, std::move(out), 2,
      [=](Tape<T>& tape, const Tensor<T>& g) {
        auto gx = tape.grad_buffer(x);
        auto gw = tape.grad_buffer(w);
        std::vector<T> colb(pointwise ? 0 : K * P);
        std::vector<T> gcol(pointwise || gx.empty() ? 0 : K * P);
        detail::CMapMat<T> wm(w.value().ptr(), Co, K);
        for (std::size_t n = 0; n < N; ++n) {
          const T* xn = x.value().ptr() + n * C * H * W;
          detail::CMapMat<T> gm(g.ptr() + n * Co * P, Co, P);
          if (!gw.empty()) {
            if (!pointwise) detail::im2col(xn, C, H, W, kh, kw, stride, padding, Ho, Wo, colb.data());
            detail::CMapMat<T> cm(pointwise ? xn : colb.data(), K, P);
            detail::MapMat<T> gwm(gw.data(), Co, K);
            gwm.noalias() += gm * cm.transpose();
          }
          if (!gx.empty()) {
            if (pointwise) {
              detail::MapMat<T> gxm(gx.data() + n * C * H * W, K, P);
              gxm.noalias() += wm.transpose() * gm;
            } else {
              detail::MapMat<T> gcm(gcol.data(), K, P);
              gcm.noalias() = wm.transpose() * gm;
              detail::col2im(gcol.data(), C, H, W, kh, kw, stride, padding, Ho, Wo,
                             gx.data() + n * C * H * W);
            }
          }
        }
      });
}

template <typename T>
Var<T> conv2d(Var<T> x, Var<T> w, Var<T> bias, std::size_t stride, std::size_t padding) {
  return add_channel_bias(conv2d(x, w, stride, padding), bias);
}

/// Per-channel convolution with [C,1,kh,kw] kernels and same-size padding.
template <typename T>
Var<T> depthwise_conv2d(Var<T> x, Var<T> w) {
  const Shape& xs = x.shape();
  const Shape& ws = w.shape();
  detail::require_rank(xs, 4, "depthwise_conv2d input");
  detail::require_rank(ws, 4, "depthwise_conv2d kernel");
  const std::size_t N = xs[0], C = xs[1], H = xs[2], W = xs[3];
  const std::size_t kh = ws[2], kw = ws[3];
  if (ws[0] != C || ws[1] != 1) {
    throw ShapeError("depthwise_conv2d: kernel " + shape_str(ws) +
                     " incompatible with input " + shape_str(xs));
  }
  if (kh % 2 == 0 || kw % 2 == 0) {
    throw ShapeError("depthwise_conv2d: even kernel size " + std::to_string(kh) +
                     "x" + std::to_string(kw) + " cannot preserve spatial size");
  }
  const std::ptrdiff_t ph = static_cast<std::ptrdiff_t>(kh / 2);
  const std::ptrdiff_t pw = static_cast<std::ptrdiff_t>(kw / 2);
  const std::ptrdiff_t sH = static_cast<std::ptrdiff_t>(H), sW = static_cast<std::ptrdiff_t>(W);

  // Visits (output, input, kernel) offsets for every in-bounds tap.
  auto for_each_tap = [=](auto&& fn) {
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t c = 0; c < C; ++c) {
        const std::size_t plane = (n * C + c) * H * W;
        for (std::size_t ky = 0; ky < kh; ++ky)
          for (std::size_t kx = 0; kx < kw; ++kx) {
            const std::size_t ko = (c * kh + ky) * kw + kx;
            const std::ptrdiff_t dy = static_cast<std::ptrdiff_t>(ky) - ph;
            const std::ptrdiff_t dx = static_cast<std::ptrdiff_t>(kx) - pw;
            for (std::ptrdiff_t y = std::max<std::ptrdiff_t>(0, -dy);
                 y < std::min(sH, sH - dy); ++y)
              for (std::ptrdiff_t xx = std::max<std::ptrdiff_t>(0, -dx);
                   xx < std::min(sW, sW - dx); ++xx)
                fn(plane + static_cast<std::size_t>(y * sW + xx),
                   plane + static_cast<std::size_t>((y + dy) * sW + xx + dx), ko);
          }
      }
  };

  Tensor<T> out(xs);
  const T* xv = x.value().ptr();
  const T* wv = w.value().ptr();
  T* ov = out.ptr();
  for_each_tap([&](std::size_t o, std::size_t i, std::size_t k) { ov[o] += wv[k] * xv[i]; });
  return x.tape->record("depthwise_conv2d", {x, w}, std::move(out), 2,
                        [x, w, for_each_tap](Tape<T>& tape, const Tensor<T>& g) {
                          auto gx = tape.grad_buffer(x);
                          auto gw = tape.grad_buffer(w);
                          const T* xv = x.value().ptr();
                          const T* wv = w.value().ptr();
                          const T* gv = g.ptr();
                          if (!gx.empty())
                            for_each_tap([&](std::size_t o, std::size_t i, std::size_t k) {
                              gx[i] += wv[k] * gv[o];
                            });
                          if (!gw.empty())
                            for_each_tap([&](std::size_t o, std::size_t i, std::size_t k) {
                              gw[k] += xv[i] * gv[o];
                            });
                        });
}

// ---------------------------------------------------------------------------
// Dense

/// x[..., n] @ w[n, m] + b[m].
template <typename T>
Var<T> linear(Var<T> x, Var<T> w, std::optional<Var<T>> b = std::nullopt) {
  const Shape& xs = x.shape();
  const Shape& ws = w.shape();
  detail::require_rank(ws, 2, "linear weight");
  if (xs.empty() || xs.back() != ws[0]) {
    throw ShapeError("linear: trailing extent of " + shape_str(xs) +
                     " does not match weight " + shape_str(ws));
  }
  const std::size_t n = ws[0], m = ws[1];
  if (b && b->value().size() != m) {
    throw ShapeError("linear: bias " + shape_str(b->shape()) + " vs output width " +
                     std::to_string(m));
  }
  const std::size_t rows = x.value().size() / n;
  Shape out_shape = xs;
  out_shape.back() = m;
  Tensor<T> out(out_shape);
  detail::MapMat<T> om(out.ptr(), rows, m);
  om.noalias() = detail::CMapMat<T>(x.value().ptr(), rows, n) *
                 detail::CMapMat<T>(w.value().ptr(), n, m);
  if (b) {
    const auto& bv = b->value();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < m; ++j) out[r * m + j] += bv[j];
  }
  std::vector<Var<T>> inputs{x, w};
  if (b) inputs.push_back(*b);
  return x.tape->record("linear", inputs, std::move(out), 2,
                        [x, w, b, rows, n, m](Tape<T>& tape, const Tensor<T>& g) {
                          detail::CMapMat<T> gm(g.ptr(), rows, m);
                          auto gx = tape.grad_buffer(x);
                          if (!gx.empty()) {
                            detail::MapMat<T>(gx.data(), rows, n).noalias() +=
                                gm * detail::CMapMat<T>(w.value().ptr(), n, m).transpose();
                          }
                          auto gw = tape.grad_buffer(w);
                          if (!gw.empty()) {
                            detail::MapMat<T>(gw.data(), n, m).noalias() +=
                                detail::CMapMat<T>(x.value().ptr(), rows, n).transpose() * gm;
                          }
                          if (b) {
                            auto gb = tape.grad_buffer(*b);
                            for (std::size_t r = 0; r < rows && !gb.empty(); ++r)
                              for (std::size_t j = 0; j < m; ++j) gb[j] += g[r * m + j];
                          }
                        });
}

template <typename T>
Var<T> linear(Var<T> x, Var<T> w, Var<T> b) {
  return linear(x, w, std::optional<Var<T>>(b));
}

// ---------------------------------------------------------------------------
// Normalization

namespace detail {

/// Normalizes `groups` contiguous blocks of `len` values, then applies a
/// per-element affine chosen by `affine_index(block, i)`.
template <typename T, typename AffineIndex>
Var<T> normalize_blocks(Var<T> x, Var<T> gamma, Var<T> beta, T eps,
                        std::size_t blocks, std::size_t len,
                        AffineIndex affine_index, const char* op) {
  const auto& xv = x.value();
  Tensor<T> out(x.shape());
  auto xhat = std::make_shared<std::vector<T>>(xv.size());
  auto inv_std = std::make_shared<std::vector<T>>(blocks);
  const auto& gv = gamma.value();
  const auto& bv = beta.value();
  for (std::size_t r = 0; r < blocks; ++r) {
    const T* p = xv.ptr() + r * len;
    T mu = 0;
    for (std::size_t i = 0; i < len; ++i) mu += p[i];
    mu /= static_cast<T>(len);
    T var = 0;
    for (std::size_t i = 0; i < len; ++i) var += (p[i] - mu) * (p[i] - mu);
    var /= static_cast<T>(len);
    const T is = T(1) / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t i = 0; i < len; ++i) {
      const T h = (p[i] - mu) * is;
      (*xhat)[r * len + i] = h;
      const std::size_t a = affine_index(r, i);
      out[r * len + i] = gv[a] * h + bv[a];
    }
  }
  return x.tape->record(
      op, {x, gamma, beta}, std::move(out), 2,
      [=](Tape<T>& tape, const Tensor<T>& g) {
        auto gx = tape.grad_buffer(x);
        auto gg = tape.grad_buffer(gamma);
        auto gb = tape.grad_buffer(beta);
        const auto& gv = gamma.value();
        std::vector<T> dh(len);
        for (std::size_t r = 0; r < blocks; ++r) {
          T m1 = 0, m2 = 0;
          for (std::size_t i = 0; i < len; ++i) {
            const std::size_t k = r * len + i;
            const std::size_t a = affine_index(r, i);
            const T h = (*xhat)[k];
            if (!gg.empty()) gg[a] += g[k] * h;
            if (!gb.empty()) gb[a] += g[k];
            dh[i] = g[k] * gv[a];
            m1 += dh[i];
            m2 += dh[i] * h;
          }
          if (gx.empty()) continue;
          m1 /= static_cast<T>(len);
          m2 /= static_cast<T>(len);
          const T is = (*inv_std)[r];
          for (std::size_t i = 0; i < len; ++i) {
            const std::size_t k = r * len + i;
            gx[k] += is * (dh[i] - m1 - (*xhat)[k] * m2);
          }
        }
      });
}

}  // namespace detail

/// Normalizes each trailing-dim row to zero mean / unit variance, then
/// applies gamma and beta.
template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, T eps = T(1e-5)) {
  const Shape& s = x.shape();
  if (s.empty() || s.back() < 1) throw ShapeError("layer_norm: empty trailing dim");
  const std::size_t d = s.back();
  if (gamma.value().size() != d || beta.value().size() != d) {
    throw ShapeError("layer_norm: affine params must have length " + std::to_string(d));
  }
  return detail::normalize_blocks(x, gamma, beta, eps, x.value().size() / d, d,
                                  [](std::size_t, std::size_t i) { return i; },
                                  "layer_norm");
}

/// GroupNorm over [N, C, ...] with per-channel affine.
template <typename T>
Var<T> group_norm(Var<T> x, std::size_t groups, Var<T> gamma, Var<T> beta,
                  T eps = T(1e-5)) {
  const Shape& s = x.shape();
  if (s.size() < 2) throw ShapeError("group_norm: rank must be >= 2");
  const std::size_t C = s[1];
  if (groups == 0 || C % groups != 0) {
    throw ShapeError("group_norm: " + std::to_string(groups) +
                     " groups do not divide " + std::to_string(C) + " channels");
  }
  if (gamma.value().size() != C || beta.value().size() != C) {
    throw ShapeError("group_norm: affine params must have length " + std::to_string(C));
  }
  std::size_t inner = 1;
  for (std::size_t d = 2; d < s.size(); ++d) inner *= s[d];
  const std::size_t cpg = C / groups;
  const std::size_t len = cpg * inner;
  return detail::normalize_blocks(
      x, gamma, beta, eps, s[0] * groups, len,
      [groups, cpg, inner](std::size_t r, std::size_t i) {
        return (r % groups) * cpg + i / inner;
      },
      "group_norm");
}

// ---------------------------------------------------------------------------
// Resampling

/// Bilinear 2x upsampling with half-pixel centers (corner alignment off).
template <typename T>
Var<T> upsample2x(Var<T> x) {
  const Shape& s = x.shape();
  detail::require_rank(s, 4, "upsample2x");
  const std::size_t N = s[0], C = s[1], H = s[2], W = s[3];
  if (H < 1 || W < 1) throw ShapeError("upsample2x: empty spatial extent");
  struct Tap {
    std::size_t i0, i1;
    T w0, w1;
  };
  auto taps = [](std::size_t in) {
    std::vector<Tap> t(2 * in);
    for (std::size_t o = 0; o < 2 * in; ++o) {
      T src = (static_cast<T>(o) + T(0.5)) / T(2) - T(0.5);
      if (src < 0) src = 0;
      std::size_t i0 = static_cast<std::size_t>(src);
      if (i0 > in - 1) i0 = in - 1;
      const std::size_t i1 = std::min(i0 + 1, in - 1);
      const T l = src - static_cast<T>(i0);
      t[o] = Tap{i0, i1, T(1) - l, l};
    }
    return t;
  };
  auto ty = std::make_shared<std::vector<Tap>>(taps(H));
  auto tx = std::make_shared<std::vector<Tap>>(taps(W));
  const std::size_t Ho = 2 * H, Wo = 2 * W;
  Tensor<T> out(Shape{N, C, Ho, Wo});
  const T* xv = x.value().ptr();
  for (std::size_t p = 0; p < N * C; ++p) {
    const T* src = xv + p * H * W;
    T* dst = out.ptr() + p * Ho * Wo;
    for (std::size_t oy = 0; oy < Ho; ++oy) {
      const Tap& a = (*ty)[oy];
      for (std::size_t ox = 0; ox < Wo; ++ox) {
        const Tap& b = (*tx)[ox];
        dst[oy * Wo + ox] = a.w0 * (b.w0 * src[a.i0 * W + b.i0] + b.w1 * src[a.i0 * W + b.i1]) +
                            a.w1 * (b.w0 * src[a.i1 * W + b.i0] + b.w1 * src[a.i1 * W + b.i1]);
      }
    }
  }
  return x.tape->record("upsample2x", {x}, std::move(out), 0,
                        [=](Tape<T>& tape, const Tensor<T>& g) {
                          auto gx = tape.grad_buffer(x);
                          for (std::size_t p = 0; p < N * C; ++p) {
                            T* dst = gx.data() + p * H * W;
                            const T* src = g.ptr() + p * Ho * Wo;
                            for (std::size_t oy = 0; oy < Ho; ++oy) {
                              const Tap& a = (*ty)[oy];
                              for (std::size_t ox = 0; ox < Wo; ++ox) {
                                const Tap& b = (*tx)[ox];
                                const T v = src[oy * Wo + ox];
                                dst[a.i0 * W + b.i0] += a.w0 * b.w0 * v;
                                dst[a.i0 * W + b.i1] += a.w0 * b.w1 * v;
                                dst[a.i1 * W + b.i0] += a.w1 * b.w0 * v;
                                dst[a.i1 * W + b.i1] += a.w1 * b.w1 * v;
                              }
                            }
                          }
                        });
}

// ---------------------------------------------------------------------------
// Loss

/// Mean binary cross-entropy on logits, in the log-sum-exp stable form.
template <typename T>
Var<T> bce_with_logits(Var<T> logits, const Tensor<T>& target) {
  require_same_shape(logits.shape(), target.shape(), "bce_with_logits");
  for (T y : target.data()) {
    if (y != T(0) && y != T(1)) throw Error("bce_with_logits: target is not binary");
  }
  const auto& z = logits.value();
  const std::size_t n = z.size();
  T acc = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const T zi = z[i];
    acc += std::max(zi, T(0)) - zi * target[i] + std::log1p(std::exp(-std::abs(zi)));
  }
  return logits.tape->record(
      "bce_with_logits", {logits}, Tensor<T>::scalar(acc / static_cast<T>(n)), 1,
      [logits, target, n](Tape<T>& tape, const Tensor<T>& g) {
        auto gz = tape.grad_buffer(logits);
        const auto& z = logits.value();
        const T s = g[0] / static_cast<T>(n);
        for (std::size_t i = 0; i < n; ++i) gz[i] += s * (detail::sigmoid(z[i]) - target[i]);
      });
}

}  // namespace iukan
