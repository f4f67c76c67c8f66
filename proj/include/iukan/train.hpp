#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <string>
#include <vector>

#include "iukan/checkpoint.hpp"
#include "iukan/config.hpp"
#include "iukan/data.hpp"
#include "iukan/metrics.hpp"
#include "iukan/net.hpp"

namespace iukan {

/// Bias-corrected Adam over every tensor of a store.
template <typename T>
class Adam {
 public:
  Adam(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8) : b1_(beta1), b2_(beta2), eps_(eps) {}

  void step(ParameterStore<T>& store, const std::vector<Tensor<T>>& grads, double lr) {
    if (grads.size() != store.size()) {
      throw ShapeError("adam: " + std::to_string(grads.size()) + " gradients for " +
                       std::to_string(store.size()) + " parameters");
    }
    if (m_.empty()) {
      for (std::size_t i = 0; i < store.size(); ++i) {
        m_.push_back(Tensor<T>::zeros(store[i].shape()));
        v_.push_back(Tensor<T>::zeros(store[i].shape()));
      }
    }
    if (m_.size() != store.size()) throw ShapeError("adam: parameter count changed");
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, double(t_));
    const double c2 = 1.0 - std::pow(b2_, double(t_));
    for (std::size_t i = 0; i < store.size(); ++i) {
      Tensor<T>& p = store[i];
      const Tensor<T>& g = grads[i];
      if (g.shape() != p.shape() || m_[i].shape() != p.shape()) {
        throw ShapeError("adam: gradient " + shape_str(g.shape()) + " for parameter '" + store.name(i) +
                         "' " + shape_str(p.shape()));
      }
      for (std::size_t k = 0; k < p.size(); ++k) {
        const double gk = g[k];
        const double m = b1_ * m_[i][k] + (1 - b1_) * gk;
        const double v = b2_ * v_[i][k] + (1 - b2_) * gk * gk;
        m_[i][k] = static_cast<T>(m);
        v_[i][k] = static_cast<T>(v);
        p[k] = static_cast<T>(p[k] - lr * (m / c1) / (std::sqrt(v / c2) + eps_));
      }
    }
  }

  long steps() const { return t_; }
  const std::vector<Tensor<T>>& first_moment() const { return m_; }
  const std::vector<Tensor<T>>& second_moment() const { return v_; }

 private:
  double b1_, b2_, eps_;
  long t_ = 0;
  std::vector<Tensor<T>> m_, v_;
};

/// Logits [B, out, H, W] without recording gradients.
template <typename T>
Tensor<T> predict_logits(const Model<T>& model, const ParameterStore<T>& store, const Tensor<T>& x,
                         GradientMode mode = GradientMode::adjoint) {
  Tape<T> tape;
  Binding<T> p(tape, store, false);
  ForwardOptions opt;
  opt.mode = mode;
  return model.forward(p, tape.constant(x), opt).value();
}

/// Predicted masks for dataset items, thresholding the first output channel.
template <typename T>
std::vector<BinaryMask> predict_masks(const Model<T>& model, const ParameterStore<T>& store, const Dataset& ds,
                                      const std::vector<std::size_t>& idx, std::size_t batch_size,
                                      double noise_level = 0, std::uint64_t noise_seed = 0) {
  std::vector<BinaryMask> out;
  const std::size_t H = ds.height, W = ds.width, C = model.config.out_channels;
  for (std::size_t b = 0; b < idx.size(); b += batch_size) {
    const std::size_t e = std::min(idx.size(), b + batch_size);
    auto [x, y] = make_batch<T>(ds, idx, b, e, noise_level, noise_seed);
    const Tensor<T> z = predict_logits(model, store, x);
    for (std::size_t i = 0; i < e - b; ++i) out.push_back(BinaryMask::from_logits(z.ptr() + i * C * H * W, H, W));
  }
  return out;
}

template <typename T>
MetricsReport evaluate(const Model<T>& model, const ParameterStore<T>& store, const Dataset& ds,
                       const std::vector<std::size_t>& idx, std::size_t batch_size, double noise_level = 0,
                       std::uint64_t noise_seed = 0) {
  const auto masks = predict_masks(model, store, ds, idx, batch_size, noise_level, noise_seed);
  MetricsReport r;
  for (std::size_t i = 0; i < idx.size(); ++i) r.add(ds.items[idx[i]].id, masks[i], ds.items[idx[i]].mask);
  return r;
}

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0;
  double val_dice = 0;
  double val_hd95 = 0;
};

inline std::string history_csv(const std::vector<EpochRecord>& h) {
  std::string s = "epoch,train_loss,val_dice,val_hd95\n";
  char buf[128];
  for (const auto& r : h) {
    std::snprintf(buf, sizeof buf, "%d,%.10f,%.10f,%.10f\n", r.epoch, r.train_loss, r.val_dice, r.val_hd95);
    s += buf;
  }
  return s;
}

struct TrainResult {
  std::vector<EpochRecord> history;
  int best_epoch = 0;
  double best_val_dice = -1;
  std::string stop_reason;
};

struct TrainHooks {
  /// After each validation round; `improved` marks a new best.
  std::function<void(const EpochRecord&, bool improved)> on_epoch;
};

/// Seeded epoch loop: shuffle, batch, forward, BCE, backward, Adam; then a
/// validation round. Restores the best parameters before returning.
template <typename T>
TrainResult train(const Model<T>& model, ParameterStore<T>& store, const Dataset& ds,
                  const std::vector<std::size_t>& train_idx, const std::vector<std::size_t>& val_idx,
                  const TrainConfig& cfg, const TrainHooks& hooks = {}) {
  cfg.validate();
  if (train_idx.empty()) throw Error("train: the training split is empty");
  const auto& val = val_idx.empty() ? train_idx : val_idx;

  Adam<T> opt(cfg.beta1, cfg.beta2, cfg.eps);
  Rng rng(cfg.seed);
  std::vector<std::size_t> order = train_idx;
  std::vector<Tensor<T>> best;
  TrainResult res;
  int stale = 0;
  ForwardOptions fwd;
  fwd.mode = cfg.gradient_mode;

  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0;
    std::size_t seen = 0;
    int step = 0;
    for (std::size_t b = 0; b < order.size(); b += cfg.batch_size, ++step) {
      const std::size_t e = std::min(order.size(), b + cfg.batch_size);
      auto [x, y] = make_batch<T>(ds, order, b, e);
      std::vector<Tensor<T>> grads;
      double loss = 0;
      try {
        Tape<T> tape;
        Binding<T> p(tape, store, true);
        Var<T> l = bce_with_logits(model.forward(p, tape.constant(x), fwd), y);
        loss = static_cast<double>(l.value()[0]);
        if (!std::isfinite(loss)) throw NumericError("loss is " + std::to_string(loss));
        auto g = tape.backward(l);
        for (std::size_t i = 0; i < store.size(); ++i) grads.push_back(g[p[i]]);
      } catch (const NumericError& err) {
        throw NumericError("non-finite value at epoch " + std::to_string(epoch) + " step " + std::to_string(step) +
                           ": " + err.what());
      }
      for (const auto& g : grads)
        if (!g.all_finite())
          throw NumericError("non-finite gradient at epoch " + std::to_string(epoch) + " step " + std::to_string(step));
      opt.step(store, grads, cfg.lr);
      loss_sum += loss * double(e - b);
      seen += e - b;
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / double(seen);
    const MetricsReport vr = evaluate(model, store, ds, val, cfg.batch_size);
    rec.val_dice = vr.dice;
    rec.val_hd95 = vr.hd95;
    res.history.push_back(rec);

    const bool improved = rec.val_dice > res.best_val_dice;
    if (improved) {
      res.best_val_dice = rec.val_dice;
      res.best_epoch = epoch;
      best.clear();
      for (const auto& p : store.all()) best.push_back(p.value);
      stale = 0;
    } else {
      ++stale;
    }
    if (hooks.on_epoch) hooks.on_epoch(rec, improved);

    if (cfg.stop_at_val_dice > 0 && rec.val_dice > cfg.stop_at_val_dice) {
      res.stop_reason = "target";
      break;
    }
    if (stale >= cfg.early_stop_patience) {
      res.stop_reason = "patience";
      break;
    }
  }
  if (res.stop_reason.empty()) res.stop_reason = "max_epochs";
  for (std::size_t i = 0; i < store.size(); ++i) store[i] = best[i];
  return res;
}

}  // namespace iukan
