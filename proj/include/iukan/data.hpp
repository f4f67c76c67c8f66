#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "iukan/config.hpp"
#include "iukan/image_io.hpp"
#include "iukan/metrics.hpp"
#include "iukan/params.hpp"

namespace iukan {

/// One image [C, H, W] in [0, 1] with its mask.
struct Sample {
  std::string id;
  Tensor<float> image;
  BinaryMask mask;
};

struct Dataset {
  std::vector<Sample> items;
  std::vector<std::size_t> train, val, test;
  std::size_t channels = 1, height = 0, width = 0;

  std::vector<std::size_t> all() const {
    std::vector<std::size_t> i(items.size());
    for (std::size_t k = 0; k < i.size(); ++k) i[k] = k;
    return i;
  }

  const std::vector<std::size_t>& split(const std::string& name) const {
    if (name == "train") return train;
    if (name == "val") return val;
    if (name == "test") return test;
    throw Error("unknown split '" + name + "' (expected train, val or test)");
  }
};

/// Bilinear resize with half-pixel centres and edge clamping, per channel.
inline std::vector<float> resize_bilinear(const std::vector<float>& src, std::size_t C, std::size_t H,
                                          std::size_t W, std::size_t oh, std::size_t ow) {
  std::vector<float> out(C * oh * ow);
  const double sy = double(H) / double(oh), sx = double(W) / double(ow);
  for (std::size_t y = 0; y < oh; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, double(H - 1));
    const auto y0 = static_cast<std::size_t>(fy);
    const std::size_t y1 = std::min(y0 + 1, H - 1);
    const double wy = fy - double(y0);
    for (std::size_t x = 0; x < ow; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, double(W - 1));
      const auto x0 = static_cast<std::size_t>(fx);
      const std::size_t x1 = std::min(x0 + 1, W - 1);
      const double wx = fx - double(x0);
      for (std::size_t c = 0; c < C; ++c) {
        const float* s = &src[c * H * W];
        const double top = s[y0 * W + x0] * (1 - wx) + s[y0 * W + x1] * wx;
        const double bot = s[y1 * W + x0] * (1 - wx) + s[y1 * W + x1] * wx;
        out[(c * oh + y) * ow + x] = static_cast<float>(top * (1 - wy) + bot * wy);
      }
    }
  }
  return out;
}

inline BinaryMask resize_nearest(const BinaryMask& m, std::size_t oh, std::size_t ow) {
  BinaryMask out(oh, ow);
  for (std::size_t y = 0; y < oh; ++y) {
    const std::size_t sy = std::min(m.height() - 1, static_cast<std::size_t>((y + 0.5) * m.height() / oh));
    for (std::size_t x = 0; x < ow; ++x) {
      const std::size_t sx = std::min(m.width() - 1, static_cast<std::size_t>((x + 0.5) * m.width() / ow));
      out.set(y, x, m(sy, sx));
    }
  }
  return out;
}

/// 8-bit image to [C, H, W] floats in [0, 1]; RGB is averaged to gray for
/// one channel, gray is replicated for three.
inline Tensor<float> image_to_tensor(const Image8& im, std::size_t channels) {
  if (channels != 1 && channels != 3) throw Error("images must map to 1 or 3 channels");
  const std::size_t H = im.height, W = im.width;
  Tensor<float> t(Shape{channels, H, W});
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) {
      if (channels == 1) {
        float s = 0;
        for (std::size_t c = 0; c < im.channels; ++c) s += im.at(y, x, c);
        t.at(0, y, x) = s / (255.0f * static_cast<float>(im.channels));
      } else {
        for (std::size_t c = 0; c < 3; ++c) t.at(c, y, x) = im.at(y, x, im.channels == 3 ? c : 0) / 255.0f;
      }
    }
  return t;
}

/// Mask pixels >= 128 (mean over channels) are foreground.
inline BinaryMask image_to_mask(const Image8& im) {
  BinaryMask m(im.height, im.width);
  for (std::size_t y = 0; y < im.height; ++y)
    for (std::size_t x = 0; x < im.width; ++x) {
      unsigned s = 0;
      for (std::size_t c = 0; c < im.channels; ++c) s += im.at(y, x, c);
      m.set(y, x, s >= 128u * im.channels);
    }
  return m;
}

inline Image8 mask_to_image(const BinaryMask& m) {
  Image8 im(m.height(), m.width(), 1);
  for (std::size_t i = 0; i < m.size(); ++i) im.pixels[i] = m.values()[i] ? 255 : 0;
  return im;
}

inline Sample make_sample(std::string id, const Image8& image, const Image8& mask, std::size_t channels,
                          std::size_t H, std::size_t W) {
  if (image.height != mask.height || image.width != mask.width) {
    throw IoError("image and mask sizes differ for '" + id + "'");
  }
  Sample s;
  s.id = std::move(id);
  Tensor<float> t = image_to_tensor(image, channels);
  if (image.height != H || image.width != W) {
    t = Tensor<float>(Shape{channels, H, W},
                      resize_bilinear(t.storage(), channels, image.height, image.width, H, W));
  }
  s.image = std::move(t);
  s.mask = resize_nearest(image_to_mask(mask), H, W);
  return s;
}

namespace detail {

inline std::vector<std::string> read_list(const std::filesystem::path& p) {
  std::ifstream f(p);
  if (!f) throw IoError("cannot read split list " + p.string());
  std::vector<std::string> out;
  std::string line;
  while (std::getline(f, line)) {
    line = trim(line);
    if (!line.empty() && line[0] != '#') out.push_back(line);
  }
  return out;
}

}  // namespace detail

/// Carves a seeded fraction of `train` into `val` (at least one item when
/// train has two or more).
inline void split_validation(Dataset& ds, double fraction, std::uint64_t seed) {
  if (fraction <= 0 || ds.train.size() < 2) return;
  std::vector<std::size_t> order = ds.train;
  Rng rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  const auto n = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::lround(fraction * static_cast<double>(order.size()))), 1, order.size() - 1);
  std::vector<std::size_t> val(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n));
  std::sort(val.begin(), val.end());
  const std::set<std::size_t> taken(val.begin(), val.end());
  std::vector<std::size_t> rest;
  for (auto i : ds.train)
    if (!taken.count(i)) rest.push_back(i);
  ds.train = std::move(rest);
  ds.val = std::move(val);
}

/// root/images/<stem>.png|bmp paired with root/masks/<stem>.png|bmp.
/// Optional root/{train,val,test}.txt list stems; without train.txt every
/// item trains, and without val.txt a seeded fraction of train validates.
inline Dataset load_dataset(const std::string& root, std::size_t channels, std::size_t H, std::size_t W,
                            double val_fraction, std::uint64_t seed) {
  namespace fs = std::filesystem;
  const fs::path base(root), img_dir = base / "images", mask_dir = base / "masks";
  if (!fs::is_directory(img_dir)) throw IoError("dataset has no images/ directory: " + img_dir.string());
  if (!fs::is_directory(mask_dir)) throw IoError("dataset has no masks/ directory: " + mask_dir.string());

  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(img_dir)) {
    const auto ext = detail::lower_ext(e.path());
    if (e.is_regular_file() && (ext == ".png" || ext == ".bmp")) files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw IoError("no images found in " + img_dir.string());

  Dataset ds;
  ds.channels = channels;
  ds.height = H;
  ds.width = W;
  std::map<std::string, std::size_t> by_stem;
  for (const auto& f : files) {
    const std::string stem = f.stem().string();
    if (by_stem.count(stem)) throw IoError("duplicate image stem '" + stem + "' in " + img_dir.string());
    fs::path mask = mask_dir / (stem + ".png");
    if (!fs::exists(mask)) mask = mask_dir / (stem + ".bmp");
    if (!fs::exists(mask)) throw IoError("missing mask for " + f.string() + " (expected " + (mask_dir / (stem + ".png")).string() + ")");
    by_stem[stem] = ds.items.size();
    ds.items.push_back(make_sample(stem, read_image(f.string()), read_image(mask.string()), channels, H, W));
  }

  auto resolve = [&](const std::string& name, std::vector<std::size_t>& out) {
    const fs::path list = base / (name + ".txt");
    if (!fs::exists(list)) return false;
    for (const auto& stem : detail::read_list(list)) {
      auto it = by_stem.find(stem);
      if (it == by_stem.end()) throw IoError(list.string() + ": unknown item '" + stem + "'");
      out.push_back(it->second);
    }
    return true;
  };
  if (!resolve("train", ds.train)) ds.train = ds.all();
  const bool has_val = resolve("val", ds.val);
  resolve("test", ds.test);
  if (!has_val) split_validation(ds, val_fraction, seed);
  return ds;
}

/// Gray image with one random ellipse brighter than a shaded background.
inline std::pair<Image8, Image8> synthetic_pair(std::size_t H, std::size_t W, Rng& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double cy = (0.3 + 0.4 * u(rng)) * H, cx = (0.3 + 0.4 * u(rng)) * W;
  const double ry = (0.12 + 0.16 * u(rng)) * H, rx = (0.12 + 0.16 * u(rng)) * W;
  const double angle = std::numbers::pi * u(rng);
  const double bg = 0.15 + 0.15 * u(rng), fg = 0.65 + 0.2 * u(rng);
  const double gy = 0.1 * (u(rng) - 0.5), gx = 0.1 * (u(rng) - 0.5);
  const double ca = std::cos(angle), sa = std::sin(angle);
  Image8 img(H, W, 1), mask(H, W, 1);
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) {
      const double dy = y + 0.5 - cy, dx = x + 0.5 - cx;
      const double a = (dx * ca + dy * sa) / rx, b = (-dx * sa + dy * ca) / ry;
      const bool inside = a * a + b * b <= 1.0;
      const double v = (inside ? fg : bg) + gy * (double(y) / H - 0.5) + gx * (double(x) / W - 0.5);
      img.at(y, x) = static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
      mask.at(y, x) = inside ? 255 : 0;
    }
  return {img, mask};
}

/// In-memory synthetic set; every item in train.
inline Dataset synthetic_dataset(std::size_t n, std::size_t H, std::size_t W, std::uint64_t seed,
                                 std::size_t channels = 1) {
  Dataset ds;
  ds.channels = channels;
  ds.height = H;
  ds.width = W;
  Rng rng(seed);
  for (std::size_t i = 0; i < n; ++i) {
    auto [img, mask] = synthetic_pair(H, W, rng);
    char id[32];
    std::snprintf(id, sizeof id, "synth_%04zu", i);
    ds.items.push_back(make_sample(id, img, mask, channels, H, W));
  }
  ds.train = ds.all();
  return ds;
}

/// Writes the same items as synthetic_dataset under root/images and root/masks.
inline void write_synthetic_dataset(const std::string& root, std::size_t n, std::size_t H, std::size_t W,
                                    std::uint64_t seed) {
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(root) / "images");
  fs::create_directories(fs::path(root) / "masks");
  Rng rng(seed);
  for (std::size_t i = 0; i < n; ++i) {
    auto [img, mask] = synthetic_pair(H, W, rng);
    char id[32];
    std::snprintf(id, sizeof id, "synth_%04zu", i);
    write_image((fs::path(root) / "images" / (std::string(id) + ".png")).string(), img);
    write_image((fs::path(root) / "masks" / (std::string(id) + ".png")).string(), mask);
  }
}

/// Stacks items into an image batch [B, C, H, W] and a target batch [B, 1, H, W].
template <typename T>
std::pair<Tensor<T>, Tensor<T>> make_batch(const Dataset& ds, const std::vector<std::size_t>& idx,
                                           std::size_t begin, std::size_t end,
                                           double noise_level = 0, std::uint64_t noise_seed = 0) {
  const std::size_t B = end - begin, C = ds.channels, H = ds.height, W = ds.width;
  Tensor<T> x(Shape{B, C, H, W}), y(Shape{B, 1, H, W});
  for (std::size_t b = 0; b < B; ++b) {
    const std::size_t item = idx.at(begin + b);
    const Sample& s = ds.items.at(item);
    const Tensor<float> img = noise_level > 0 ? add_gaussian_noise(s.image, noise_level, noise_seed + item) : s.image;
    std::copy(img.storage().begin(), img.storage().end(), x.ptr() + b * C * H * W);
    for (std::size_t i = 0; i < H * W; ++i) y[b * H * W + i] = static_cast<T>(s.mask.values()[i]);
  }
  return {std::move(x), std::move(y)};
}

}  // namespace iukan
