#pragma once

#include <cmath>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "iukan/kan.hpp"
#include "iukan/odeint.hpp"

namespace iukan {

/// Architecture hyperparameters. Kept in double so one config can build a
/// model at either precision and round-trip through checkpoints.
struct ModelConfig {
  std::size_t in_channels = 3;
  std::vector<std::size_t> channels{16, 32, 64, 128, 256};
  std::size_t n_sono_blocks = 2;
  std::size_t n_tok_blocks = 3;
  std::vector<std::size_t> patch;  ///< per tokenized stage; empty = 2 everywhere
  std::vector<std::size_t> embed;  ///< per tokenized stage; empty = patch^2 * channels
  double mul_fraction = 0.25;      ///< multiplication nodes per MultiKAN layer, as a share of d
  std::size_t kan_layers = 3;
  IntegrationConfig<double> integration;
  BSplineGrid<double> grid;
  bool use_position = true;
  std::size_t out_channels = 1;

  std::size_t depth() const { return n_sono_blocks + n_tok_blocks; }

  std::size_t patch_at(std::size_t tok_stage) const {
    return patch.empty() ? 2 : patch.at(tok_stage);
  }

  void validate() const {
    if (in_channels == 0 || out_channels == 0) throw Error("model: channel counts must be positive");
    if (depth() == 0) throw Error("model: needs at least one block");
    if (channels.size() != depth()) {
      throw Error("model: " + std::to_string(channels.size()) + " encoder channels for " +
                  std::to_string(depth()) + " blocks");
    }
    for (auto c : channels)
      if (c == 0) throw Error("model: encoder channels must be positive");
    if (!patch.empty() && patch.size() != n_tok_blocks) {
      throw Error("model: need one patch size per tokenized stage");
    }
    if (!embed.empty() && embed.size() != n_tok_blocks) {
      throw Error("model: need one embed dim per tokenized stage");
    }
    for (std::size_t s = 0; s < n_tok_blocks; ++s)
      if (patch_at(s) == 0) throw Error("model: patch size must be positive");
    if (!(mul_fraction >= 0 && mul_fraction < 1)) throw Error("model: mul_fraction must be in [0, 1)");
    if (kan_layers == 0) throw Error("model: kan_layers must be >= 1");
    integration.validate();
    grid.validate();
  }

  /// Multiplication nodes for a MultiKAN layer of width d.
  std::size_t n_mul_for(std::size_t d) const {
    if (mul_fraction == 0) return 0;
    const auto n = static_cast<std::size_t>(std::lround(mul_fraction * static_cast<double>(d)));
    return std::clamp<std::size_t>(n, 1, d);
  }

  /// Spatial sizes must be divisible by this: 2^depth for the resampling,
  /// and each tokenized stage's patch at its encoder and decoder resolutions.
  std::size_t divisor() const {
    std::size_t d = std::size_t(1) << depth();
    for (std::size_t i = n_sono_blocks; i < depth(); ++i)
      d = std::lcm(d, (std::size_t(1) << (i + 1)) * patch_at(i - n_sono_blocks));
    return d;
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

enum class Resample { down, up, none };

/// One ODE stage followed by an optional tokenized MultiKAN block and a
/// resolution change: Conv(ODE(x)), or Conv(Tok(ODE(x))).
template <typename T>
struct OdeBlock {
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  Resample resample = Resample::none;
  VelocityNet<T> g;
  DynamicsNet<T> f;
  std::optional<TokenizedBlock<T>> tok;
  std::optional<std::size_t> conv_w;
  std::optional<std::size_t> conv_b;

  /// Channels entering the resampling convolution.
  std::size_t mid_channels() const { return tok ? tok->out_channels() : in_channels; }

  /// Without add_conv the block has no resampling convolution.
  static OdeBlock create(ParameterStore<T>& store, const std::string& prefix,
                         std::size_t in_ch, std::size_t out_ch, Resample resample,
                         bool use_position, Rng& rng) {
    OdeBlock b;
    b.in_channels = in_ch;
    b.out_channels = out_ch;
    b.resample = resample;
    b.g = VelocityNet<T>::create(store, prefix + ".g", in_ch, rng);
    b.f = DynamicsNet<T>::create(store, prefix + ".f", in_ch, rng, use_position);
    return b;
  }

  void add_tokens(ParameterStore<T>& store, const std::string& prefix, std::size_t patch,
                  std::size_t embed_dim, const ModelConfig& cfg, Rng& rng) {
    tok = TokenizedBlock<T>::create(store, prefix + ".tok", in_channels, patch, embed_dim,
                                    cfg.grid.cast<T>(), cfg.n_mul_for(embed_dim), rng,
                                    cfg.kan_layers);
  }

  void add_conv(ParameterStore<T>& store, const std::string& prefix, std::size_t kernel, Rng& rng) {
    if (kernel % 2 == 0) throw Error("block conv kernel must be odd");
    conv_w = store.add(prefix + ".conv.w", conv_init<T>(out_channels, mid_channels(), kernel, kernel, rng));
    conv_b = store.add(prefix + ".conv.b", Tensor<T>::zeros(Shape{out_channels}));
  }

  /// The pieces before the resampling convolution.
  Var<T> features(const Binding<T>& p, Var<T> x, const IntegrationConfig<T>& cfg,
                  GradientMode mode) const {
    const Shape& s = x.shape();
    detail::require_rank(s, 4, "ode block");
    if (s[1] != in_channels) {
      throw ShapeError("ode block: expected " + std::to_string(in_channels) + " channels, got " +
                       shape_str(s));
    }
    Var<T> h = sono_integrate(p, x, g, f, cfg, mode);
    if (tok) h = tok->forward(p, h);
    return h;
  }

  Var<T> forward(const Binding<T>& p, Var<T> x, const IntegrationConfig<T>& cfg,
                 GradientMode mode) const {
    Var<T> h = features(p, x, cfg, mode);
    if (!conv_w) return h;
    if (resample == Resample::up) h = upsample2x(h);
    const std::size_t k = p[*conv_w].shape()[2];
    return conv2d(h, p[*conv_w], p[*conv_b], resample == Resample::down ? 2 : 1, k / 2);
  }
};

struct ForwardOptions {
  GradientMode mode = GradientMode::adjoint;
  std::vector<bool> zero_skip;  ///< ablation: replace skip i with zeros
};

/// Encoder of ODE blocks (plain, then tokenized), a tokenized bottleneck at
/// the lowest resolution, a mirrored decoder with concatenation skips, and a
/// 1x1 head producing logits.
template <typename T>
struct Model {
  ModelConfig config;
  std::vector<OdeBlock<T>> encoder;
  OdeBlock<T> bottleneck;
  std::vector<OdeBlock<T>> decoder;
  std::vector<std::pair<std::size_t, std::size_t>> fuse;  ///< 1x1 conv after each skip concat
  std::size_t head_w = 0;
  std::size_t head_b = 0;

  static Model create(ParameterStore<T>& store, const ModelConfig& cfg, Rng& rng) {
    cfg.validate();
    Model m;
    m.config = cfg;
    const std::size_t L = cfg.depth(), S = cfg.n_sono_blocks;
    const auto& c = cfg.channels;
    auto embed_for = [&](std::size_t stage, std::size_t in_ch) {
      const std::size_t K = cfg.patch_at(stage);
      return cfg.embed.empty() ? K * K * in_ch : cfg.embed[stage];
    };

    for (std::size_t i = 0; i < L; ++i) {
      const std::string name = "enc" + std::to_string(i);
      const std::size_t in_ch = i == 0 ? cfg.in_channels : c[i - 1];
      auto b = OdeBlock<T>::create(store, name, in_ch, c[i], Resample::down, cfg.use_position, rng);
      if (i >= S) b.add_tokens(store, name, cfg.patch_at(i - S), embed_for(i - S, in_ch), cfg, rng);
      b.add_conv(store, name, 3, rng);
      m.encoder.push_back(std::move(b));
    }

    m.bottleneck = OdeBlock<T>::create(store, "mid", c[L - 1], c[L - 1], Resample::none,
                                       cfg.use_position, rng);
    m.bottleneck.add_tokens(store, "mid", 1, c[L - 1], cfg, rng);
    if (m.bottleneck.mid_channels() != c[L - 1]) throw Error("model: bottleneck width mismatch");

    for (std::size_t j = 0; j < L; ++j) {
      const std::size_t i = L - 1 - j;
      const std::string name = "dec" + std::to_string(j);
      const std::size_t in_ch = c[i];
      const std::size_t out_ch = i == 0 ? c[0] : c[i - 1];
      auto b = OdeBlock<T>::create(store, name, in_ch, out_ch, Resample::up, cfg.use_position, rng);
      if (i >= S) b.add_tokens(store, name, cfg.patch_at(i - S), embed_for(i - S, in_ch), cfg, rng);
      b.add_conv(store, name, 3, rng);
      m.decoder.push_back(std::move(b));
      if (i > 0) {
        const std::size_t fw = store.add(name + ".fuse.w", conv_init<T>(out_ch, 2 * out_ch, 1, 1, rng));
        const std::size_t fb = store.add(name + ".fuse.b", Tensor<T>::zeros(Shape{out_ch}));
        m.fuse.emplace_back(fw, fb);
      }
    }
    m.head_w = store.add("head.w", conv_init<T>(cfg.out_channels, c[0], 1, 1, rng));
    m.head_b = store.add("head.b", Tensor<T>::zeros(Shape{cfg.out_channels}));
    return m;
  }

  void check_input(const Shape& s) const {
    detail::require_rank(s, 4, "model input");
    if (s[1] != config.in_channels) {
      throw ShapeError("model: expected " + std::to_string(config.in_channels) +
                       " input channels, got " + shape_str(s));
    }
    const std::size_t d = config.divisor();
    if (s[2] % d != 0 || s[3] % d != 0 || s[2] == 0 || s[3] == 0) {
      throw ShapeError("model: spatial size " + std::to_string(s[2]) + "x" + std::to_string(s[3]) +
                       " must be a positive multiple of " + std::to_string(d));
    }
  }

  /// Logits [N, out_channels, H, W].
  Var<T> forward(const Binding<T>& p, Var<T> x, const ForwardOptions& opt = {}) const {
    check_input(x.shape());
    const auto cfg = integration();
    const std::size_t L = config.depth();
    std::vector<Var<T>> skips;
    Var<T> h = x;
    for (const auto& b : encoder) {
      h = b.forward(p, h, cfg, opt.mode);
      skips.push_back(h);
    }
    h = bottleneck.forward(p, h, cfg, opt.mode);
    std::size_t f = 0;
    for (std::size_t j = 0; j < L; ++j) {
      const std::size_t i = L - 1 - j;
      h = decoder[j].forward(p, h, cfg, opt.mode);
      if (i == 0) continue;
      Var<T> s = skips[i - 1];
      if (i - 1 < opt.zero_skip.size() && opt.zero_skip[i - 1]) s = scale(s, T(0));
      h = conv2d(concat_channels(h, s), p[fuse[f].first], p[fuse[f].second], 1, 0);
      ++f;
    }
    return conv2d(h, p[head_w], p[head_b], 1, 0);
  }

  IntegrationConfig<T> integration() const {
    return {static_cast<T>(config.integration.t0), static_cast<T>(config.integration.t1),
            config.integration.steps};
  }
};

/// Parameters whose gradient is identically zero, by name.
template <typename T>
std::vector<std::string> zero_gradient_parameters(const ParameterStore<T>& store,
                                                  const Binding<T>& p, const GradientMap<T>& g) {
  std::vector<std::string> dead;
  for (std::size_t i = 0; i < store.size(); ++i) {
    const Tensor<T> gi = g[p[i]];
    if (gi.max_abs() == T(0)) dead.push_back(store.name(i));
  }
  return dead;
}

}  // namespace iukan
