#pragma once

#include <algorithm>
#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "iukan/ops.hpp"
#include "iukan/params.hpp"

namespace iukan {

/// Uniform B-spline grid of `grid_size` cells on [lo, hi], extended by
/// `degree` knots on each side so every point of the range sees a full set
/// of `degree + 1` active basis functions.
template <typename T>
struct BSplineGrid {
  int degree = 3;
  int grid_size = 5;
  T lo = T(-1);
  T hi = T(1);

  void validate() const {
    if (grid_size < 1) throw Error("bspline grid: grid_size must be >= 1");
    if (degree < 0) throw Error("bspline grid: degree must be >= 0");
    if (!(hi > lo)) throw Error("bspline grid: empty range");
  }

  template <typename U>
  BSplineGrid<U> cast() const {
    return {degree, grid_size, static_cast<U>(lo), static_cast<U>(hi)};
  }

  friend bool operator==(const BSplineGrid&, const BSplineGrid&) = default;

  std::size_t num_basis() const { return static_cast<std::size_t>(grid_size + degree); }
  T step() const { return (hi - lo) / static_cast<T>(grid_size); }

  std::vector<T> knots() const {
    std::vector<T> t(static_cast<std::size_t>(grid_size + 2 * degree + 1));
    for (std::size_t i = 0; i < t.size(); ++i)
      t[i] = lo + (static_cast<T>(i) - static_cast<T>(degree)) * step();
    return t;
  }

  /// Active basis functions at x (clamped to the range). Writes degree+1
  /// values and their x-derivatives; returns the index of the first one.
  /// Derivatives are zero outside [lo, hi] where the clamp is flat.
  std::size_t eval(T x, T* values, T* derivs) const {
    const int k = degree;
    const T h = step();
    const bool inside = x >= lo && x <= hi;
    const T xc = std::clamp(x, lo, hi);
    int j = static_cast<int>(std::floor((xc - lo) / h));
    j = std::clamp(j, 0, grid_size - 1);

    // Cox-de Boor triangle on the local knots of cell j.
    T left[16], right[16], lower[16];
    values[0] = T(1);
    for (int r = 1; r <= k; ++r) {
      if (r == k) std::copy(values, values + k, lower);
      left[r] = xc - (lo + static_cast<T>(j + 1 - r) * h);
      right[r] = lo + static_cast<T>(j + r) * h - xc;
      T saved = 0;
      for (int s = 0; s < r; ++s) {
        const T tmp = values[s] / (right[s + 1] + left[r - s]);
        values[s] = saved + right[s + 1] * tmp;
        saved = left[r - s] * tmp;
      }
      values[r] = saved;
    }
    for (int s = 0; s <= k; ++s) {
      if (k == 0 || !inside) {
        derivs[s] = 0;
        continue;
      }
      const T a = s >= 1 ? lower[s - 1] : T(0);
      const T b = s <= k - 1 ? lower[s] : T(0);
      derivs[s] = (a - b) / h;
    }
    return static_cast<std::size_t>(j);
  }
};

/// Dense basis matrix [..., G + k]; differentiable in x.
template <typename T>
Var<T> bspline_basis(Var<T> x, const BSplineGrid<T>& grid) {
  grid.validate();
  if (grid.degree > 14) throw Error("bspline grid: degree too large");
  const std::size_t nb = grid.num_basis();
  const std::size_t kk = static_cast<std::size_t>(grid.degree) + 1;
  const auto& xv = x.value();
  Shape out_shape = x.shape();
  out_shape.push_back(nb);
  Tensor<T> out(out_shape);
  auto first = std::make_shared<std::vector<std::size_t>>(xv.size());
  auto deriv = std::make_shared<std::vector<T>>(xv.size() * kk);
  std::vector<T> vals(kk);
  for (std::size_t i = 0; i < xv.size(); ++i) {
    const std::size_t j = grid.eval(xv[i], vals.data(), deriv->data() + i * kk);
    (*first)[i] = j;
    for (std::size_t s = 0; s < kk; ++s) out[i * nb + j + s] = vals[s];
  }
  return x.tape->record("bspline_basis", {x}, std::move(out), 2,
                        [x, first, deriv, nb, kk](Tape<T>& tape, const Tensor<T>& g) {
                          auto gx = tape.grad_buffer(x);
                          for (std::size_t i = 0; i < gx.size(); ++i) {
                            const std::size_t j = (*first)[i];
                            T acc = 0;
                            for (std::size_t s = 0; s < kk; ++s)
                              acc += g[i * nb + j + s] * (*deriv)[i * kk + s];
                            gx[i] += acc;
                          }
                        });
}

/// Fused KAN layer:
///   out[., o] = sum_i base[o,i] * silu(x_i) + spline_w[o,i] * <coeffs[o,i,:], B(x_i)>
template <typename T>
Var<T> kan_layer(Var<T> x, Var<T> coeffs, Var<T> base_weight, Var<T> spline_weight,
                 const BSplineGrid<T>& grid) {
  grid.validate();
  const Shape& xs = x.shape();
  const Shape& cs = coeffs.shape();
  const std::size_t nb = grid.num_basis();
  detail::require_rank(cs, 3, "kan_layer coeffs");
  const std::size_t n_out = cs[0], n_in = cs[1];
  if (cs[2] != nb) {
    throw ShapeError("kan_layer: coeffs " + shape_str(cs) + " do not match " +
                     std::to_string(nb) + " basis functions");
  }
  require_same_shape(base_weight.shape(), Shape{n_out, n_in}, "kan_layer base_weight");
  require_same_shape(spline_weight.shape(), Shape{n_out, n_in}, "kan_layer spline_weight");
  if (xs.empty() || xs.back() != n_in) {
    throw ShapeError("kan_layer: input " + shape_str(xs) + " has trailing extent != " +
                     std::to_string(n_in));
  }
  const std::size_t rows = x.value().size() / n_in;
  const std::size_t kk = static_cast<std::size_t>(grid.degree) + 1;
  const std::size_t width = n_in * (1 + nb);

  // Feature rows [silu(x) | basis(x)] against weights [base | spline_w * coeffs].
  auto feats = std::make_shared<std::vector<T>>(rows * width, T(0));
  auto first = std::make_shared<std::vector<std::size_t>>(rows * n_in);
  auto dbasis = std::make_shared<std::vector<T>>(rows * n_in * kk);
  std::vector<T> vals(kk);
  const auto& xv = x.value();
  for (std::size_t r = 0; r < rows; ++r) {
    T* f = feats->data() + r * width;
    for (std::size_t i = 0; i < n_in; ++i) {
      const T xi = xv[r * n_in + i];
      f[i] = xi * detail::sigmoid(xi);
      const std::size_t j = grid.eval(xi, vals.data(), dbasis->data() + (r * n_in + i) * kk);
      (*first)[r * n_in + i] = j;
      T* fb = f + n_in + i * nb + j;
      for (std::size_t s = 0; s < kk; ++s) fb[s] = vals[s];
    }
  }
  auto wcat = std::make_shared<detail::RowMat<T>>(n_out, width);
  {
    const auto& bw = base_weight.value();
    const auto& sw = spline_weight.value();
    const auto& cv = coeffs.value();
    for (std::size_t o = 0; o < n_out; ++o) {
      for (std::size_t i = 0; i < n_in; ++i) {
        (*wcat)(o, i) = bw[o * n_in + i];
        const T s = sw[o * n_in + i];
        for (std::size_t b = 0; b < nb; ++b)
          (*wcat)(o, n_in + i * nb + b) = s * cv[(o * n_in + i) * nb + b];
      }
    }
  }
  Shape out_shape = xs;
  out_shape.back() = n_out;
  Tensor<T> out(out_shape);
  detail::MapMat<T>(out.ptr(), rows, n_out).noalias() =
      detail::CMapMat<T>(feats->data(), rows, width) * wcat->transpose();

  return x.tape->record(
      "kan_layer", {x, coeffs, base_weight, spline_weight}, std::move(out), 4,
      [=](Tape<T>& tape, const Tensor<T>& g) {
        detail::CMapMat<T> gm(g.ptr(), rows, n_out);
        detail::CMapMat<T> fm(feats->data(), rows, width);
        auto gc = tape.grad_buffer(coeffs);
        auto gbw = tape.grad_buffer(base_weight);
        auto gsw = tape.grad_buffer(spline_weight);
        if (!gc.empty() || !gbw.empty() || !gsw.empty()) {
          detail::RowMat<T> gw = gm.transpose() * fm;
          const auto& sw = spline_weight.value();
          const auto& cv = coeffs.value();
          for (std::size_t o = 0; o < n_out; ++o)
            for (std::size_t i = 0; i < n_in; ++i) {
              if (!gbw.empty()) gbw[o * n_in + i] += gw(o, i);
              T acc = 0;
              for (std::size_t b = 0; b < nb; ++b) {
                const T gwe = gw(o, n_in + i * nb + b);
                const std::size_t ci = (o * n_in + i) * nb + b;
                if (!gc.empty()) gc[ci] += gwe * sw[o * n_in + i];
                acc += gwe * cv[ci];
              }
              if (!gsw.empty()) gsw[o * n_in + i] += acc;
            }
        }
        auto gx = tape.grad_buffer(x);
        if (gx.empty()) return;
        detail::RowMat<T> gf = gm * (*wcat);
        const auto& xv = x.value();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t i = 0; i < n_in; ++i) {
            const T xi = xv[r * n_in + i];
            const T sg = detail::sigmoid(xi);
            T acc = gf(r, i) * sg * (T(1) + xi * (T(1) - sg));
            const std::size_t j = (*first)[r * n_in + i];
            const T* db = dbasis->data() + (r * n_in + i) * kk;
            for (std::size_t s = 0; s < kk; ++s) acc += gf(r, n_in + i * nb + j + s) * db[s];
            gx[r * n_in + i] += acc;
          }
      });
}

/// Parameter-free multiplication sub-layer: the first `n_add` entries pass
/// through, then each of `n_mul` nodes multiplies `arity` consecutive entries.
template <typename T>
Var<T> multiply_groups(Var<T> y, std::size_t n_add, std::size_t n_mul, std::size_t arity) {
  const Shape& s = y.shape();
  const std::size_t n = n_add + arity * n_mul;
  if (s.empty() || s.back() != n) {
    throw ShapeError("multiply_groups: width " + (s.empty() ? std::string("?") : std::to_string(s.back())) +
                     " != n_add + arity * n_mul = " + std::to_string(n));
  }
  const std::size_t rows = y.value().size() / n;
  const std::size_t m = n_add + n_mul;
  Shape out_shape = s;
  out_shape.back() = m;
  Tensor<T> out(out_shape);
  const auto& yv = y.value();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* src = yv.ptr() + r * n;
    T* dst = out.ptr() + r * m;
    std::copy(src, src + n_add, dst);
    for (std::size_t q = 0; q < n_mul; ++q) {
      T p = 1;
      for (std::size_t a = 0; a < arity; ++a) p *= src[n_add + q * arity + a];
      dst[n_add + q] = p;
    }
  }
  return y.tape->record("multiply_groups", {y}, std::move(out), 1,
                        [=](Tape<T>& tape, const Tensor<T>& g) {
                          auto gy = tape.grad_buffer(y);
                          const auto& yv = y.value();
                          for (std::size_t r = 0; r < rows; ++r) {
                            const T* src = yv.ptr() + r * n;
                            const T* gr = g.ptr() + r * m;
                            T* dst = gy.data() + r * n;
                            for (std::size_t i = 0; i < n_add; ++i) dst[i] += gr[i];
                            for (std::size_t q = 0; q < n_mul; ++q)
                              for (std::size_t a = 0; a < arity; ++a) {
                                T p = 1;
                                for (std::size_t b = 0; b < arity; ++b)
                                  if (b != a) p *= src[n_add + q * arity + b];
                                dst[n_add + q * arity + a] += gr[n_add + q] * p;
                              }
                          }
                        });
}

template <typename T>
struct KanLayer {
  std::size_t n_in = 0;
  std::size_t n_out = 0;
  BSplineGrid<T> grid;
  std::size_t coeffs = 0;
  std::size_t base_weight = 0;
  std::size_t spline_weight = 0;

  static KanLayer create(ParameterStore<T>& store, const std::string& prefix,
                         std::size_t n_in, std::size_t n_out,
                         const BSplineGrid<T>& grid, Rng& rng) {
    grid.validate();
    KanLayer l;
    l.n_in = n_in;
    l.n_out = n_out;
    l.grid = grid;
    const T fan = std::sqrt(static_cast<T>(n_in));
    l.coeffs = store.add(prefix + ".coeffs",
                         uniform_tensor<T>(Shape{n_out, n_in, grid.num_basis()}, T(0.1) / fan, rng));
    l.base_weight = store.add(prefix + ".base_weight",
                              uniform_tensor<T>(Shape{n_out, n_in}, T(1) / fan, rng));
    l.spline_weight = store.add(prefix + ".spline_weight", Tensor<T>::ones(Shape{n_out, n_in}));
    return l;
  }

  Var<T> forward(const Binding<T>& p, Var<T> x) const {
    return kan_layer(x, p[coeffs], p[base_weight], p[spline_weight], grid);
  }
};

/// A KAN layer (addition part) followed by the multiplication sub-layer.
template <typename T>
struct MultiKanLayer {
  KanLayer<T> kan;
  std::size_t n_add = 0;
  std::size_t n_mul = 0;
  std::size_t mul_arity = 2;

  std::size_t out_width() const { return n_add + n_mul; }

  static MultiKanLayer create(ParameterStore<T>& store, const std::string& prefix,
                              std::size_t n_in, std::size_t n_add, std::size_t n_mul,
                              const BSplineGrid<T>& grid, Rng& rng, std::size_t arity = 2) {
    if (arity < 1) throw Error("multikan: multiplication arity must be >= 1");
    MultiKanLayer l;
    l.kan = KanLayer<T>::create(store, prefix, n_in, n_add + arity * n_mul, grid, rng);
    l.n_add = n_add;
    l.n_mul = n_mul;
    l.mul_arity = arity;
    return l;
  }

  Var<T> forward(const Binding<T>& p, Var<T> x) const {
    if (kan.n_out != n_add + mul_arity * n_mul) {
      throw ShapeError("multikan layer: kan width " + std::to_string(kan.n_out) +
                       " != n_add + arity * n_mul");
    }
    Var<T> y = kan.forward(p, x);
    if (n_mul == 0) return y;
    return multiply_groups(y, n_add, n_mul, mul_arity);
  }
};

/// Left-to-right composition of MultiKAN layers.
template <typename T>
Var<T> multikan_forward(const Binding<T>& p, Var<T> x, const std::vector<MultiKanLayer<T>>& layers) {
  for (std::size_t l = 0; l + 1 < layers.size(); ++l) {
    if (layers[l].out_width() != layers[l + 1].kan.n_in) {
      throw ShapeError("multikan: layer " + std::to_string(l) + " emits " +
                       std::to_string(layers[l].out_width()) + " but layer " +
                       std::to_string(l + 1) + " expects " +
                       std::to_string(layers[l + 1].kan.n_in));
    }
  }
  for (const auto& layer : layers) x = layer.forward(p, x);
  return x;
}

// ---------------------------------------------------------------------------
// Tokenization

/// [N, C, H, W] -> [N, (H/K)(W/K), K*K*C]; tokens in raster order, each the
/// patch flattened as (ky, kx, c).
template <typename T>
Var<T> patchify(Var<T> x, std::size_t K) {
  const Shape& s = x.shape();
  detail::require_rank(s, 4, "patchify");
  const std::size_t N = s[0], C = s[1], H = s[2], W = s[3];
  if (K == 0 || H % K != 0 || W % K != 0) {
    throw ShapeError("tokenize: spatial size " + std::to_string(H) + "x" + std::to_string(W) +
                     " not divisible by patch size " + std::to_string(K));
  }
  const std::size_t gh = H / K, gw = W / K, M = gh * gw, D = K * K * C;
  auto index = std::make_shared<std::vector<std::size_t>>(N * M * D);
  std::size_t o = 0;
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t py = 0; py < gh; ++py)
      for (std::size_t px = 0; px < gw; ++px)
        for (std::size_t ky = 0; ky < K; ++ky)
          for (std::size_t kx = 0; kx < K; ++kx)
            for (std::size_t c = 0; c < C; ++c)
              (*index)[o++] = ((n * C + c) * H + py * K + ky) * W + px * K + kx;
  return detail::gather(x, Shape{N, M, D}, std::move(index), "patchify");
}

/// Inverse of patchify: [N, M, K*K*C] -> [N, C, H, W].
template <typename T>
Var<T> detokenize(Var<T> z, std::size_t H, std::size_t W, std::size_t K) {
  const Shape& s = z.shape();
  detail::require_rank(s, 3, "detokenize");
  const std::size_t N = s[0], M = s[1], D = s[2];
  if (K == 0 || H % K != 0 || W % K != 0 || M * K * K != H * W || D % (K * K) != 0) {
    throw ShapeError("detokenize: tokens " + shape_str(s) + " inconsistent with " +
                     std::to_string(H) + "x" + std::to_string(W) + " and patch " +
                     std::to_string(K));
  }
  const std::size_t C = D / (K * K), gw = W / K;
  auto index = std::make_shared<std::vector<std::size_t>>(N * C * H * W);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) {
          const std::size_t tok = (y / K) * gw + x / K;
          const std::size_t feat = ((y % K) * K + x % K) * C + c;
          (*index)[((n * C + c) * H + y) * W + x] = (n * M + tok) * D + feat;
        }
  return detail::gather(z, Shape{N, C, H, W}, std::move(index), "detokenize");
}

/// Patch embedding: patchify then project through E [K*K*C, d].
template <typename T>
Var<T> tokenize(Var<T> x, Var<T> embed, std::size_t K) {
  return linear(patchify(x, K), embed);
}

/// Parameters of one tokenized MultiKAN block.
template <typename T>
struct TokenizedBlock {
  std::size_t patch = 1;
  std::size_t in_channels = 0;
  std::size_t embed_dim = 0;
  std::size_t embed = 0;
  std::vector<MultiKanLayer<T>> stack;
  std::size_t dw_kernel = 0;
  std::size_t ln_gamma = 0;
  std::size_t ln_beta = 0;

  /// Channels produced by detokenizing the block's tokens.
  std::size_t out_channels() const { return embed_dim / (patch * patch); }

  static TokenizedBlock create(ParameterStore<T>& store, const std::string& prefix,
                               std::size_t in_channels, std::size_t patch,
                               std::size_t embed_dim, const BSplineGrid<T>& grid,
                               std::size_t n_mul, Rng& rng, std::size_t layers = 3) {
    if (patch == 0 || embed_dim % (patch * patch) != 0) {
      throw Error("tokenized block: embed dim " + std::to_string(embed_dim) +
                  " must be a multiple of patch^2");
    }
    if (n_mul > embed_dim) throw Error("tokenized block: more multiplication nodes than width");
    TokenizedBlock b;
    b.patch = patch;
    b.in_channels = in_channels;
    b.embed_dim = embed_dim;
    const std::size_t din = patch * patch * in_channels;
    b.embed = store.add(prefix + ".embed",
                        uniform_tensor<T>(Shape{din, embed_dim}, T(1) / std::sqrt(static_cast<T>(din)), rng));
    for (std::size_t l = 0; l < layers; ++l) {
      b.stack.push_back(MultiKanLayer<T>::create(store, prefix + ".multikan" + std::to_string(l),
                                                 embed_dim, embed_dim - n_mul, n_mul, grid, rng));
    }
    b.dw_kernel = store.add(prefix + ".dwconv",
                            uniform_tensor<T>(Shape{embed_dim, 1, 3, 3}, T(1) / T(3), rng));
    b.ln_gamma = store.add(prefix + ".ln.gamma", Tensor<T>::ones(Shape{embed_dim}));
    b.ln_beta = store.add(prefix + ".ln.beta", Tensor<T>::zeros(Shape{embed_dim}));
    return b;
  }

  Var<T> tokenize(const Binding<T>& p, Var<T> x) const {
    return iukan::tokenize(x, p[embed], patch);
  }

  /// LN(z + DwConv(MultiKAN(z))) with the depthwise conv on the token grid.
  Var<T> block(const Binding<T>& p, Var<T> z, std::size_t grid_h, std::size_t grid_w) const {
    Var<T> y = multikan_forward(p, z, stack);
    Var<T> g = depthwise_conv2d(tokens_to_grid(y, grid_h, grid_w), p[dw_kernel]);
    return layer_norm(add(z, grid_to_tokens(g)), p[ln_gamma], p[ln_beta]);
  }

  /// tokenize -> block -> detokenize on a spatial map.
  Var<T> forward(const Binding<T>& p, Var<T> x) const {
    const Shape& s = x.shape();
    detail::require_rank(s, 4, "tokenized block");
    if (s[1] != in_channels) {
      throw ShapeError("tokenized block: expected " + std::to_string(in_channels) +
                       " channels, got " + shape_str(s));
    }
    Var<T> z = tokenize(p, x);
    z = block(p, z, s[2] / patch, s[3] / patch);
    return detokenize(z, s[2], s[3], patch);
  }
};

}  // namespace iukan
