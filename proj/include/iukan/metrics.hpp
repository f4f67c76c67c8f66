#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "iukan/tensor.hpp"

namespace iukan {

/// Row-major H x W mask with values in {0, 1}.
class BinaryMask {
 public:
  BinaryMask() = default;
  BinaryMask(std::size_t H, std::size_t W) : h_(H), w_(W), v_(H * W, 0) {}
  BinaryMask(std::size_t H, std::size_t W, std::vector<std::uint8_t> values)
      : h_(H), w_(W), v_(std::move(values)) {
    if (v_.size() != H * W) throw ShapeError("mask: " + std::to_string(v_.size()) + " values for " +
                                             std::to_string(H) + "x" + std::to_string(W));
    for (auto x : v_)
      if (x > 1) throw Error("mask: values must be 0 or 1");
  }

  /// Pixels whose logit is positive, i.e. sigmoid > 0.5.
  template <typename T>
  static BinaryMask from_logits(const T* logits, std::size_t H, std::size_t W) {
    BinaryMask m(H, W);
    for (std::size_t i = 0; i < H * W; ++i) m.v_[i] = logits[i] > T(0) ? 1 : 0;
    return m;
  }

  /// Pixels with value >= threshold.
  template <typename T>
  static BinaryMask threshold(const T* values, std::size_t H, std::size_t W, T thr) {
    BinaryMask m(H, W);
    for (std::size_t i = 0; i < H * W; ++i) m.v_[i] = values[i] >= thr ? 1 : 0;
    return m;
  }

  std::size_t height() const { return h_; }
  std::size_t width() const { return w_; }
  std::size_t size() const { return v_.size(); }
  bool operator()(std::size_t y, std::size_t x) const { return v_[y * w_ + x] != 0; }
  void set(std::size_t y, std::size_t x, bool on) { v_[y * w_ + x] = on ? 1 : 0; }
  const std::vector<std::uint8_t>& values() const { return v_; }
  std::size_t count() const {
    std::size_t n = 0;
    for (auto x : v_) n += x;
    return n;
  }

  friend bool operator==(const BinaryMask&, const BinaryMask&) = default;

 private:
  std::size_t h_ = 0, w_ = 0;
  std::vector<std::uint8_t> v_;
};

struct Confusion {
  std::size_t tp = 0, fp = 0, fn = 0, tn = 0;

  Confusion& operator+=(const Confusion& o) {
    tp += o.tp;
    fp += o.fp;
    fn += o.fn;
    tn += o.tn;
    return *this;
  }
};

inline void require_same_mask_shape(const BinaryMask& a, const BinaryMask& b) {
  if (a.height() != b.height() || a.width() != b.width()) {
    throw ShapeError("mask shape mismatch: " + std::to_string(a.height()) + "x" +
                     std::to_string(a.width()) + " vs " + std::to_string(b.height()) + "x" +
                     std::to_string(b.width()));
  }
}

inline Confusion confusion(const BinaryMask& pred, const BinaryMask& gt) {
  require_same_mask_shape(pred, gt);
  Confusion c;
  const auto& p = pred.values();
  const auto& g = gt.values();
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] && g[i]) ++c.tp;
    else if (p[i]) ++c.fp;
    else if (g[i]) ++c.fn;
    else ++c.tn;
  }
  return c;
}

/// 2|P&G| / (|P| + |G|). Two empty masks score 1.
inline double dice(const BinaryMask& pred, const BinaryMask& gt) {
  const Confusion c = confusion(pred, gt);
  const double den = 2.0 * c.tp + c.fp + c.fn;
  if (den == 0) return 1.0;
  return 2.0 * c.tp / den;
}

/// |P&G| / |P or G|, with the same empty-union policy as dice.
inline double iou(const BinaryMask& pred, const BinaryMask& gt) {
  const Confusion c = confusion(pred, gt);
  const double uni = static_cast<double>(c.tp + c.fp + c.fn);
  if (uni == 0) return 1.0;
  return c.tp / uni;
}

inline double accuracy(const BinaryMask& pred, const BinaryMask& gt) {
  const Confusion c = confusion(pred, gt);
  if (pred.size() == 0) return 1.0;
  return static_cast<double>(c.tp + c.tn) / static_cast<double>(pred.size());
}

inline double f1_pixels(std::size_t tp, std::size_t fp, std::size_t fn) {
  const double den = 2.0 * tp + fp + fn;
  if (den == 0) return 1.0;
  return 2.0 * tp / den;
}

namespace detail {

/// Foreground pixels with a background 4-neighbour or on the image edge.
inline std::vector<std::pair<int, int>> boundary(const BinaryMask& m) {
  std::vector<std::pair<int, int>> pts;
  const int H = static_cast<int>(m.height()), W = static_cast<int>(m.width());
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      if (!m(y, x)) continue;
      if (y == 0 || x == 0 || y == H - 1 || x == W - 1 || !m(y - 1, x) || !m(y + 1, x) ||
          !m(y, x - 1) || !m(y, x + 1))
        pts.emplace_back(y, x);
    }
  return pts;
}

/// 1-D squared distance transform (lower envelope of parabolas).
inline void sq_dt_1d(const double* f, std::size_t n, double* out, std::vector<int>& v,
                     std::vector<double>& z) {
  constexpr double inf = std::numeric_limits<double>::infinity();
  v.assign(n, 0);
  z.assign(n + 1, 0);
  int k = 0;
  v[0] = 0;
  z[0] = -inf;
  z[1] = inf;
  for (int q = 1; q < static_cast<int>(n); ++q) {
    if (f[q] == inf) continue;
    if (f[v[k]] == inf) {
      v[k] = q;
      continue;
    }
    double s;
    while (true) {
      s = ((f[q] + double(q) * q) - (f[v[k]] + double(v[k]) * v[k])) / (2.0 * q - 2.0 * v[k]);
      if (s <= z[k] && k > 0) {
        --k;
        continue;
      }
      break;
    }
    ++k;
    v[k] = q;
    z[k] = s;
    z[k + 1] = inf;
  }
  k = 0;
  for (int q = 0; q < static_cast<int>(n); ++q) {
    while (z[k + 1] < q) ++k;
    const double d = q - v[k];
    out[q] = f[v[k]] == inf ? inf : d * d + f[v[k]];
  }
}

/// Exact squared Euclidean distance from every pixel to the nearest seed.
inline std::vector<double> squared_distance_map(const std::vector<std::pair<int, int>>& seeds,
                                                std::size_t H, std::size_t W) {
  constexpr double inf = std::numeric_limits<double>::infinity();
  std::vector<double> g(H * W, inf);
  for (auto [y, x] : seeds) g[y * W + x] = 0;
  std::vector<int> v;
  std::vector<double> z, col(H), out(std::max(H, W));
  for (std::size_t x = 0; x < W; ++x) {
    for (std::size_t y = 0; y < H; ++y) col[y] = g[y * W + x];
    sq_dt_1d(col.data(), H, out.data(), v, z);
    for (std::size_t y = 0; y < H; ++y) g[y * W + x] = out[y];
  }
  for (std::size_t y = 0; y < H; ++y) {
    sq_dt_1d(&g[y * W], W, out.data(), v, z);
    std::copy(out.begin(), out.begin() + static_cast<std::ptrdiff_t>(W), g.begin() + static_cast<std::ptrdiff_t>(y * W));
  }
  return g;
}

/// Linear-interpolation percentile of sorted values, q in [0, 1].
inline double percentile_sorted(const std::vector<double>& d, double q) {
  const double pos = q * static_cast<double>(d.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, d.size() - 1);
  return d[lo] + (pos - static_cast<double>(lo)) * (d[hi] - d[lo]);
}

inline double directed_hd95(const std::vector<std::pair<int, int>>& from,
                            const std::vector<std::pair<int, int>>& to, std::size_t H, std::size_t W) {
  const auto dt = squared_distance_map(to, H, W);
  std::vector<double> d;
  d.reserve(from.size());
  for (auto [y, x] : from) d.push_back(std::sqrt(dt[y * W + x]));
  std::sort(d.begin(), d.end());
  return percentile_sorted(d, 0.95);
}

}  // namespace detail

/// Symmetric 95th-percentile Hausdorff distance between mask boundaries, in
/// pixels. Both empty: 0. Exactly one empty: the image diagonal.
inline double hd95(const BinaryMask& pred, const BinaryMask& gt) {
  require_same_mask_shape(pred, gt);
  const std::size_t H = pred.height(), W = pred.width();
  const auto bp = detail::boundary(pred);
  const auto bg = detail::boundary(gt);
  if (bp.empty() && bg.empty()) return 0.0;
  if (bp.empty() || bg.empty()) return std::sqrt(double(H) * H + double(W) * W);
  return std::max(detail::directed_hd95(bp, bg, H, W), detail::directed_hd95(bg, bp, H, W));
}

/// image + N(0, level^2) per element, clipped to [0, 1].
template <typename T>
Tensor<T> add_gaussian_noise(const Tensor<T>& image, double level, std::uint64_t seed) {
  if (!(level >= 0)) throw Error("noise level must be non-negative");
  Tensor<T> out = image;
  if (level == 0) return out;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, level);
  for (auto& v : out.data())
    v = static_cast<T>(std::clamp(static_cast<double>(v) + noise(rng), 0.0, 1.0));
  return out;
}

struct ImageMetrics {
  std::string id;
  double dice = 0, hd95 = 0, acc = 0, iou = 0, f1 = 0;
  Confusion counts;
};

/// Per-image rows plus aggregates: dice, hd95, acc and iou are per-image
/// means; f1 is pooled over all pixels of the set.
struct MetricsReport {
  std::vector<ImageMetrics> per_image;
  double dice = 0, hd95 = 0, acc = 0, iou = 0, f1 = 0;

  void add(std::string id, const BinaryMask& pred, const BinaryMask& gt) {
    ImageMetrics m;
    m.id = std::move(id);
    m.counts = confusion(pred, gt);
    m.dice = iukan::dice(pred, gt);
    m.hd95 = iukan::hd95(pred, gt);
    m.acc = accuracy(pred, gt);
    m.iou = iukan::iou(pred, gt);
    m.f1 = f1_pixels(m.counts.tp, m.counts.fp, m.counts.fn);
    per_image.push_back(std::move(m));
    finalize();
  }

  void finalize() {
    dice = hd95 = acc = iou = f1 = 0;
    if (per_image.empty()) return;
    Confusion total;
    for (const auto& m : per_image) {
      dice += m.dice;
      hd95 += m.hd95;
      acc += m.acc;
      iou += m.iou;
      total += m.counts;
    }
    const double n = static_cast<double>(per_image.size());
    dice /= n;
    hd95 /= n;
    acc /= n;
    iou /= n;
    f1 = f1_pixels(total.tp, total.fp, total.fn);
  }

  static std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.10f", v);
    return buf;
  }

  std::string csv() const {
    std::string s = "id,dice,hd95,acc,iou,f1\n";
    for (const auto& m : per_image)
      s += m.id + "," + fmt(m.dice) + "," + fmt(m.hd95) + "," + fmt(m.acc) + "," + fmt(m.iou) + "," +
           fmt(m.f1) + "\n";
    return s;
  }

  nlohmann::json json() const {
    return {{"images", per_image.size()}, {"dice", dice}, {"hd95", hd95},
            {"acc", acc},                 {"iou", iou},   {"f1", f1}};
  }

  void write(const std::string& csv_path, const std::string& json_path) const {
    std::ofstream c(csv_path, std::ios::binary);
    if (!c) throw Error("cannot write " + csv_path);
    c << csv();
    std::ofstream j(json_path, std::ios::binary);
    if (!j) throw Error("cannot write " + json_path);
    j << json().dump(2) << "\n";
  }
};

}  // namespace iukan
