#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "iukan/audit.hpp"
#include "iukan/checkpoint.hpp"
#include "iukan/data.hpp"
#include "iukan/train.hpp"
#include "iukan/verify.hpp"

namespace fs = std::filesystem;
using namespace iukan;

namespace {

struct Options {
  std::string config, data, ckpt, out = ".", levels = "0,0.2,0.4", check, size, split;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  int threads = 1;
  bool overlay = false;
  std::size_t count = 8;
};

/// Thrown when a requested assertion fails; exits 1 without the "error:" prefix.
struct AssertionFailed {
  std::string what;
};

void write_text(const fs::path& p, const std::string& s) {
  std::ofstream f(p, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write " + p.string());
  f << s;
  if (!f) throw IoError("short write to " + p.string());
}

fs::path out_dir(const Options& o) {
  fs::create_directories(o.out);
  return fs::path(o.out);
}

std::string g17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

/// Train and data keys stored in a checkpoint so later commands see the
/// sizes and split that training used.
nlohmann::json run_keys(const RunConfig& rc) {
  return {{"data.root", rc.data.root},
          {"data.height", std::to_string(rc.data.height)},
          {"data.width", std::to_string(rc.data.width)},
          {"train.val_fraction", g17(rc.train.val_fraction)},
          {"train.seed", std::to_string(rc.train.seed)},
          {"train.batch_size", std::to_string(rc.train.batch_size)}};
}

/// Precedence: flag > --set > config file > checkpoint > default. With a
/// stored run, --seed is left to the caller: the stored seed fixes the split.
RunConfig resolve(const Options& o, const nlohmann::json* stored = nullptr) {
  RunConfig rc;
  if (stored)
    for (const auto& [k, v] : stored->items()) rc.set(k, v.get<std::string>());
  if (!o.config.empty()) rc.load_file(o.config);
  for (const auto& kv : o.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    rc.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (!o.data.empty()) rc.data.root = o.data;
  if (!o.size.empty()) rc.set("data.size", o.size);
  if (o.seed && !stored) rc.train.seed = *o.seed;
  if (o.threads < 1) throw ConfigError("--threads must be >= 1");
  rc.validate();
  return rc;
}

std::vector<double> parse_levels(const std::string& s) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(detail::parse_number<double>("--levels", item));
  if (out.empty()) throw ConfigError("--levels is empty");
  for (double l : out)
    if (l < 0) throw ConfigError("--levels must be >= 0");
  return out;
}

struct Loaded {
  LoadedModel<float> lm;
  RunConfig rc;
  Dataset ds;
  std::vector<std::size_t> idx;
  std::string split;
};

void require_ckpt(const Options& o) {
  if (o.ckpt.empty()) throw ConfigError("--ckpt is required");
  if (!fs::exists(o.ckpt)) throw IoError("checkpoint not found: " + o.ckpt);
}

/// Checkpoint plus dataset split. Without --split: test if listed, else the
/// split validated on during training.
Loaded load_for_eval(const Options& o) {
  require_ckpt(o);
  Loaded L{load_checkpoint<float>(o.ckpt)};
  const auto run = L.lm.meta.extra.value("run", nlohmann::json::object());
  L.rc = resolve(o, &run);
  if (L.rc.data.root.empty()) throw ConfigError("--data is required");
  L.ds = load_dataset(L.rc.data.root, L.lm.config.in_channels, L.rc.data.height, L.rc.data.width,
                      L.rc.train.val_fraction, L.rc.train.seed);
  L.split = o.split;
  if (L.split.empty()) L.split = L.ds.test.empty() ? L.lm.meta.extra.value("validated_on", "val") : "test";
  if (L.split != "all" && L.split != "train" && L.split != "val" && L.split != "test")
    throw ConfigError("unknown split '" + L.split + "' (expected train, val, test or all)");
  L.idx = L.split == "all" ? L.ds.all() : L.ds.split(L.split);
  if (L.idx.empty()) throw Error("split '" + L.split + "' is empty");
  return L;
}

int cmd_train(const Options& o) {
  const RunConfig rc = resolve(o);
  if (rc.data.root.empty()) throw ConfigError("--data is required");
  Dataset ds = load_dataset(rc.data.root, rc.model.in_channels, rc.data.height, rc.data.width,
                            rc.train.val_fraction, rc.train.seed);
  ParameterStore<float> store;
  Rng rng(rc.train.seed);
  const auto model = Model<float>::create(store, rc.model, rng);
  std::printf("train: %zu train / %zu val images at %zux%zu, %zu parameters\n", ds.train.size(), ds.val.size(),
              rc.data.height, rc.data.width, store.scalar_count());

  const fs::path dir = out_dir(o);
  std::vector<EpochRecord> hist;
  TrainHooks hooks;
  hooks.on_epoch = [&](const EpochRecord& r, bool improved) {
    hist.push_back(r);
    write_text(dir / "history.csv", history_csv(hist));
    std::printf("epoch %d loss %.6f val_dice %.6f val_hd95 %.4f%s\n", r.epoch, r.train_loss, r.val_dice, r.val_hd95,
                improved ? " *" : "");
    std::fflush(stdout);
  };
  const auto res = train(model, store, ds, ds.train, ds.val, rc.train, hooks);
  write_text(dir / "history.csv", history_csv(res.history));

  CheckpointMeta meta;
  meta.epoch = res.best_epoch;
  meta.best_metric = res.best_val_dice;
  meta.extra = {{"run", run_keys(rc)}, {"validated_on", ds.val.empty() ? "train" : "val"},
                {"stop_reason", res.stop_reason}};
  const std::string ckpt = o.ckpt.empty() ? (dir / "model.iuk").string() : o.ckpt;
  save_checkpoint(ckpt, rc.model, store, meta);
  std::printf("best val_dice %.6f at epoch %d (%s); checkpoint %s\n", res.best_val_dice, res.best_epoch,
              res.stop_reason.c_str(), ckpt.c_str());
  return 0;
}

int cmd_eval(const Options& o) {
  const Loaded L = load_for_eval(o);
  const auto rep = evaluate(L.lm.model, L.lm.store, L.ds, L.idx, L.rc.train.batch_size);
  const fs::path dir = out_dir(o);
  rep.write((dir / "metrics.csv").string(), (dir / "metrics.json").string());
  std::printf("eval %s (%zu images): dice %s hd95 %s acc %s iou %s f1 %s\n", L.split.c_str(), L.idx.size(),
              MetricsReport::fmt(rep.dice).c_str(), MetricsReport::fmt(rep.hd95).c_str(),
              MetricsReport::fmt(rep.acc).c_str(), MetricsReport::fmt(rep.iou).c_str(),
              MetricsReport::fmt(rep.f1).c_str());
  return 0;
}

int cmd_ablate(const Options& o) {
  const Loaded L = load_for_eval(o);
  const auto levels = parse_levels(o.levels);
  const auto r = check_noise_trend(L.lm.model, L.lm.store, L.ds, L.idx, levels, o.seed.value_or(0),
                                   L.rc.train.batch_size);
  write_text(out_dir(o) / "noise.csv", r.csv);
  std::fputs(r.csv.c_str(), stdout);
  std::printf("%s %s\n", r.pass ? "PASS" : "FAIL", r.measured.dump().c_str());
  if (!r.pass) throw AssertionFailed{"noise trend"};
  return 0;
}

int cmd_predict(const Options& o) {
  require_ckpt(o);
  const auto lm = load_checkpoint<float>(o.ckpt);
  const auto run = lm.meta.extra.value("run", nlohmann::json::object());
  const RunConfig rc = resolve(o, &run);
  if (o.data.empty()) throw ConfigError("--data is required");
  fs::path src(o.data);
  if (fs::is_directory(src / "images")) src /= "images";
  if (!fs::is_directory(src)) throw IoError("not a directory: " + src.string());
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(src)) {
    const auto ext = detail::lower_ext(e.path());
    if (e.is_regular_file() && (ext == ".png" || ext == ".bmp")) files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw IoError("no images found in " + src.string());

  const fs::path dir = out_dir(o);
  fs::create_directories(dir / "masks");
  if (o.overlay) fs::create_directories(dir / "overlays");
  const std::size_t C = lm.config.in_channels, H = rc.data.height, W = rc.data.width;
  for (const auto& f : files) {
    const Image8 im = read_image(f.string());
    Tensor<float> t = image_to_tensor(im, C);
    Tensor<float> x(Shape{1, C, H, W}, resize_bilinear(t.storage(), C, im.height, im.width, H, W));
    const auto z = predict_logits(lm.model, lm.store, x);
    const BinaryMask m = resize_nearest(BinaryMask::from_logits(z.ptr(), H, W), im.height, im.width);
    const std::string stem = f.stem().string();
    write_image((dir / "masks" / (stem + ".png")).string(), mask_to_image(m));
    if (o.overlay) {
      Image8 ov(im.height, im.width, 3);
      for (std::size_t y = 0; y < im.height; ++y)
        for (std::size_t xx = 0; xx < im.width; ++xx)
          for (std::size_t c = 0; c < 3; ++c) {
            const int base = im.at(y, xx, im.channels == 3 ? c : 0);
            ov.at(y, xx, c) = static_cast<std::uint8_t>(m(y, xx) ? (c == 0 ? (base + 255) / 2 : base / 2) : base);
          }
      write_image((dir / "overlays" / (stem + ".png")).string(), ov);
    }
  }
  std::printf("predict: %zu masks written to %s\n", files.size(), (dir / "masks").string().c_str());
  return 0;
}

int cmd_verify(const Options& o) {
  std::vector<std::string> names;
  const std::string check = o.check.empty() ? "all" : o.check;
  if (check == "all") {
    names = verify_check_names();
    if (!o.ckpt.empty()) names.push_back("noise");
  } else {
    names = {check};
  }
  const fs::path dir = out_dir(o);
  nlohmann::json summary = {{"checks", nlohmann::json::array()}};
  bool all_pass = true;
  for (const auto& name : names) {
    CheckResult r;
    if (name == "noise") {
      const Loaded L = load_for_eval(o);
      r = check_noise_trend(L.lm.model, L.lm.store, L.ds, L.idx, parse_levels(o.levels), o.seed.value_or(0),
                            L.rc.train.batch_size);
    } else {
      r = run_check(name, o.seed.value_or(0));
    }
    write_text(dir / ("verify_" + name + ".csv"), r.csv);
    summary["checks"].push_back({{"name", r.name}, {"pass", r.pass}, {"measured", r.measured}});
    all_pass = all_pass && r.pass;
    std::printf("%s %s %s\n", r.pass ? "PASS" : "FAIL", name.c_str(), r.measured.dump().c_str());
    std::fflush(stdout);
  }
  summary["pass"] = all_pass;
  write_text(dir / "verify.json", summary.dump(2) + "\n");
  if (!all_pass) throw AssertionFailed{"verify"};
  return 0;
}

int cmd_gradcheck(const Options& o) {
  const auto rows = run_gradient_audits(o.check.empty() ? "all" : o.check);
  write_text(out_dir(o) / "gradcheck.csv", audit_csv(rows));
  bool ok = true;
  for (const auto& r : rows) {
    std::printf("%s %s %s %s rel_err %.3e tol %.0e\n", r.pass ? "PASS" : "FAIL", r.module.c_str(), r.name.c_str(),
                r.precision.c_str(), r.max_rel_error, r.tolerance);
    ok = ok && r.pass;
  }
  if (!ok) throw AssertionFailed{"gradcheck"};
  return 0;
}

int cmd_synth(const Options& o) {
  std::size_t H = 64, W = 64;
  if (!o.size.empty()) std::tie(H, W) = detail::parse_size("--size", o.size);
  write_synthetic_dataset(o.out, o.count, H, W, o.seed.value_or(0));
  std::printf("synth: %zu image/mask pairs at %zux%zu in %s\n", o.count, H, W, o.out.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"iukan: segmentation with second-order ODE blocks and MultiKAN layers"};
  app.footer(
      "Settings resolve as: command-line flag > --set key=value > --config file > values stored in the\n"
      "checkpoint > built-in default. Execution is single-threaded and deterministic for a given --seed.");
  app.require_subcommand(1);
  Options o;

  auto common = [&](CLI::App* c) {
    c->add_option("--config", o.config, "key=value config file")->check(CLI::ExistingFile);
    c->add_option("--set", o.sets, "override one config key (key=value), repeatable");
    c->add_option("--seed", o.seed, "random seed");
    c->add_option("--threads", o.threads, "worker threads (computation is single-threaded)");
    c->add_option("--out", o.out, "output directory")->capture_default_str();
    c->add_option("--size", o.size, "image size HxW");
  };
  auto data = [&](CLI::App* c) { c->add_option("--data", o.data, "dataset root with images/ and masks/"); };
  auto ckpt = [&](CLI::App* c) { c->add_option("--ckpt", o.ckpt, "checkpoint path"); };
  auto split = [&](CLI::App* c) { c->add_option("--split", o.split, "train, val, test or all"); };

  int rc = 0;
  auto* tr = app.add_subcommand("train", "train a model; writes history.csv and model.iuk");
  common(tr), data(tr), ckpt(tr);
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint; writes metrics.csv and metrics.json");
  common(ev), data(ev), ckpt(ev), split(ev);
  auto* pr = app.add_subcommand("predict", "write predicted masks (0/255 PNG) to masks/");
  common(pr), data(pr), ckpt(pr);
  pr->add_flag("--overlay", o.overlay, "also write overlays/ images");
  auto* ab = app.add_subcommand("ablate-noise", "Dice against input noise level; writes noise.csv");
  common(ab), data(ab), ckpt(ab), split(ab);
  ab->add_option("--levels", o.levels, "comma-separated noise levels")->capture_default_str();
  auto* ve = app.add_subcommand("verify", "numerical checks; writes verify.json and verify_<check>.csv");
  common(ve), data(ve), ckpt(ve), split(ve);
  ve->add_option("--check", o.check, "rk4, adjoint, memory, degeneracy, scaling, noise or all");
  ve->add_option("--levels", o.levels, "noise levels for the noise check")->capture_default_str();
  auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient audits; writes gradcheck.csv");
  common(gc);
  gc->add_option("--check", o.check, "tensor-core, kan, odeint, net or all");
  auto* sy = app.add_subcommand("synth", "write a synthetic ellipse dataset to --out");
  common(sy);
  sy->add_option("--count", o.count, "number of image/mask pairs")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (*tr) rc = cmd_train(o);
    else if (*ev) rc = cmd_eval(o);
    else if (*pr) rc = cmd_predict(o);
    else if (*ab) rc = cmd_ablate(o);
    else if (*ve) rc = cmd_verify(o);
    else if (*gc) rc = cmd_gradcheck(o);
    else if (*sy) rc = cmd_synth(o);
  } catch (const AssertionFailed& a) {
    std::fprintf(stderr, "%s: assertion failed\n", a.what.c_str());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return rc;
}
