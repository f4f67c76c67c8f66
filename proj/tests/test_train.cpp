#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "iukan/train.hpp"

using namespace iukan;
namespace fs = std::filesystem;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.in_channels = 1;
  c.channels = {2, 4, 4};
  c.n_sono_blocks = 1;
  c.n_tok_blocks = 2;
  c.kan_layers = 1;
  c.integration.steps = 1;
  return c;
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("iukan_train_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::vector<char> read_bytes(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

TrainConfig quick_train(int epochs) {
  TrainConfig t;
  t.lr = 1e-3;
  t.max_epochs = epochs;
  t.batch_size = 2;
  t.seed = 5;
  return t;
}

}  // namespace

TEST(Bce, ZeroLogitsGiveLn2) {
  Tape<double> tape;
  auto z = tape.constant(Tensor<double>::zeros({1, 1, 2, 3}));
  auto y = Tensor<double>({1, 1, 2, 3}, {0, 1, 1, 0, 1, 0});
  EXPECT_NEAR(bce_with_logits(z, y).value()[0], std::log(2.0), 1e-15);
}

TEST(Bce, Saturates) {
  Tape<double> tape;
  auto y = Tensor<double>({4}, {1, 0, 1, 0});
  auto z = tape.constant(Tensor<double>({4}, {20, -20, 20, -20}));
  EXPECT_LT(bce_with_logits(z, y).value()[0], 1e-8);
}

TEST(Bce, MatchesSigmoidThenLog) {
  Rng rng(3);
  auto zt = normal_tensor<double>({64}, 3.0, rng);
  Tensor<double> y({64});
  for (std::size_t i = 0; i < 64; ++i) y[i] = double(i % 3 == 0);
  double ref = 0;
  for (std::size_t i = 0; i < 64; ++i) {
    const double s = 1.0 / (1.0 + std::exp(-zt[i]));
    ref -= y[i] * std::log(s) + (1 - y[i]) * std::log(1 - s);
  }
  ref /= 64;
  Tape<double> tape;
  EXPECT_NEAR(bce_with_logits(tape.constant(zt), y).value()[0], ref, 1e-10);
}

TEST(Bce, RejectsNonBinaryTarget) {
  Tape<double> tape;
  EXPECT_THROW(bce_with_logits(tape.constant(Tensor<double>::zeros({2})), Tensor<double>({2}, {0.5, 1})), Error);
}

TEST(Adam, ZeroGradientsLeaveParametersAndDecayMoments) {
  ParameterStore<double> s;
  s.add("w", Tensor<double>({2}, {1.5, -2.0}));
  Adam<double> opt;
  opt.step(s, {Tensor<double>({2}, {0.5, -1.0})}, 0.0);
  const auto before = s[0];
  const auto m = opt.first_moment()[0], v = opt.second_moment()[0];
  opt.step(s, {Tensor<double>::zeros({2})}, 0.0);
  opt.step(s, {Tensor<double>::zeros({2})}, 0.0);
  EXPECT_EQ(s[0], before);
  for (std::size_t k = 0; k < 2; ++k) {
    EXPECT_DOUBLE_EQ(opt.first_moment()[0][k], m[k] * 0.9 * 0.9);
    EXPECT_DOUBLE_EQ(opt.second_moment()[0][k], v[k] * 0.999 * 0.999);
  }
}

TEST(Adam, FirstStepHasMagnitudeLr) {
  ParameterStore<double> s;
  s.add("w", Tensor<double>({3}, {0, 0, 0}));
  Adam<double> opt;
  opt.step(s, {Tensor<double>({3}, {3.0, -0.02, 1e-3})}, 0.01);
  EXPECT_NEAR(s[0][0], -0.01, 1e-9);
  EXPECT_NEAR(s[0][1], 0.01, 1e-8);
  EXPECT_NEAR(s[0][2], -0.01, 1e-7);
}

TEST(Adam, ThreeStepScalarTrace) {
  // scalar Adam by hand, lr 0.1, gradients 1, -2, 0.5, starting at 1
  // m1 = 0.1, v1 = 0.001; bias-corrected step is 1 / (1 + eps)
  const double p1 = 1.0 - 0.1 * 1.0 / (1.0 + 1e-8);
  // m2 = 0.09 - 0.2 = -0.11, v2 = 0.000999 + 0.004 = 0.004999
  const double p2 = p1 - 0.1 * (-0.11 / 0.19) / (std::sqrt(0.004999 / 0.001999) + 1e-8);
  // m3 = -0.099 + 0.05 = -0.049, v3 = 0.004994001 + 0.00025 = 0.005244001
  const double p3 = p2 - 0.1 * (-0.049 / 0.271) / (std::sqrt(0.005244001 / 0.002997001) + 1e-8);
  ParameterStore<double> s;
  s.add("w", Tensor<double>::scalar(1.0));
  Adam<double> opt;
  opt.step(s, {Tensor<double>::scalar(1.0)}, 0.1);
  EXPECT_NEAR(s[0][0], p1, 1e-12);
  opt.step(s, {Tensor<double>::scalar(-2.0)}, 0.1);
  EXPECT_NEAR(s[0][0], p2, 1e-12);
  opt.step(s, {Tensor<double>::scalar(0.5)}, 0.1);
  EXPECT_NEAR(s[0][0], p3, 1e-12);
}

TEST(Adam, ShapeMismatchThrows) {
  ParameterStore<double> s;
  s.add("w", Tensor<double>::zeros({2}));
  Adam<double> opt;
  EXPECT_THROW(opt.step(s, {Tensor<double>::zeros({3})}, 0.1), ShapeError);
  EXPECT_THROW(opt.step(s, {}, 0.1), ShapeError);
}

TEST(Train, ZeroLearningRateKeepsParametersBitIdentical) {
  auto ds = synthetic_dataset(4, 16, 16, 1);
  ParameterStore<float> store;
  Rng rng(2);
  auto m = Model<float>::create(store, tiny_config(), rng);
  std::vector<Tensor<float>> before;
  for (const auto& p : store.all()) before.push_back(p.value);
  auto cfg = quick_train(2);
  cfg.lr = 0;
  train(m, store, ds, ds.train, {}, cfg);
  for (std::size_t i = 0; i < store.size(); ++i) EXPECT_EQ(store[i], before[i]) << store.name(i);
}

TEST(Train, EarlyStoppingAfterPatiencePlusOneRounds) {
  auto ds = synthetic_dataset(2, 16, 16, 1);
  ParameterStore<float> store;
  Rng rng(2);
  auto m = Model<float>::create(store, tiny_config(), rng);
  auto cfg = quick_train(50);
  cfg.lr = 0;
  cfg.early_stop_patience = 3;
  auto res = train(m, store, ds, ds.train, {}, cfg);
  EXPECT_EQ(res.history.size(), 4u);
  EXPECT_EQ(res.stop_reason, "patience");
  EXPECT_EQ(res.best_epoch, 1);
}

TEST(Train, SeededRunsAreIdentical) {
  auto ds = synthetic_dataset(4, 16, 16, 7);
  auto run = [&] {
    ParameterStore<float> store;
    Rng rng(11);
    auto m = Model<float>::create(store, tiny_config(), rng);
    auto res = train(m, store, ds, ds.train, {}, quick_train(3));
    return std::make_pair(history_csv(res.history), encode_checkpoint(m.config, store, {res.best_epoch, res.best_val_dice}));
  };
  const auto a = run(), b = run();
  EXPECT_EQ(a.first, b.first);
  EXPECT_EQ(a.second, b.second);
}

TEST(Train, LossDecreasesOnTinyOverfit) {
  auto ds = synthetic_dataset(2, 16, 16, 4);
  ParameterStore<float> store;
  Rng rng(1);
  auto m = Model<float>::create(store, tiny_config(), rng);
  auto cfg = quick_train(15);
  cfg.lr = 1e-2;
  cfg.early_stop_patience = 100;
  auto res = train(m, store, ds, ds.train, {}, cfg);
  EXPECT_LT(res.history.back().train_loss, 0.5 * res.history.front().train_loss);
}

TEST(Train, NonFiniteParameterAbortsWithLocation) {
  auto ds = synthetic_dataset(2, 16, 16, 1);
  ParameterStore<float> store;
  Rng rng(2);
  auto m = Model<float>::create(store, tiny_config(), rng);
  store[store.find("head.b")][0] = std::numeric_limits<float>::quiet_NaN();
  try {
    train(m, store, ds, ds.train, {}, quick_train(1));
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("epoch 1 step 0"), std::string::npos) << e.what();
  }
}

TEST(Train, HistoryCsvFormat) {
  const std::string s = history_csv({{1, 0.5, 0.25, 3.0}});
  EXPECT_EQ(s, "epoch,train_loss,val_dice,val_hd95\n1,0.5000000000,0.2500000000,3.0000000000\n");
}

TEST(Checkpoint, RoundTripGivesBitIdenticalOutputs) {
  const auto dir = scratch("roundtrip");
  ParameterStore<float> store;
  Rng rng(4);
  auto m = Model<float>::create(store, tiny_config(), rng);
  save_checkpoint((dir / "m.iuk").string(), m.config, store, {7, 0.75});
  auto back = load_checkpoint<float>((dir / "m.iuk").string());
  EXPECT_EQ(back.config, m.config);
  EXPECT_EQ(back.meta.epoch, 7);
  EXPECT_EQ(back.meta.best_metric, 0.75);
  for (std::size_t i = 0; i < store.size(); ++i) EXPECT_EQ(back.store[i], store[i]);
  auto x = normal_tensor<float>({1, 1, 16, 16}, 1.0f, rng);
  EXPECT_EQ(predict_logits(back.model, back.store, x), predict_logits(m, store, x));
  save_checkpoint((dir / "again.iuk").string(), back.config, back.store, back.meta);
  EXPECT_EQ(read_bytes(dir / "m.iuk"), read_bytes(dir / "again.iuk"));
}

TEST(Checkpoint, PayloadLengthMatchesManifest) {
  ParameterStore<float> store;
  Rng rng(4);
  auto m = Model<float>::create(store, tiny_config(), rng);
  const auto b = encode_checkpoint(m.config, store, {});
  std::uint64_t meta = 0;
  for (int i = 0; i < 8; ++i) meta |= std::uint64_t(static_cast<unsigned char>(b[8 + i])) << (8 * i);
  EXPECT_EQ(b.size() - 16 - meta, store.scalar_count() * 4);
  EXPECT_EQ(std::string(b.data(), 4), "IUK2");
}

TEST(Checkpoint, TruncatedFileRejected) {
  ParameterStore<float> store;
  Rng rng(4);
  auto m = Model<float>::create(store, tiny_config(), rng);
  auto b = encode_checkpoint(m.config, store, {});
  b.resize(b.size() - 3);
  try {
    decode_checkpoint<float>(b);
    FAIL();
  } catch (const CheckpointError& e) {
    EXPECT_NE(std::string(e.what()).find("truncated"), std::string::npos) << e.what();
  }
  b.resize(10);
  EXPECT_THROW(decode_checkpoint<float>(b), CheckpointError);
}

TEST(Checkpoint, BadMagicAndVersionRejected) {
  ParameterStore<float> store;
  Rng rng(4);
  auto m = Model<float>::create(store, tiny_config(), rng);
  auto b = encode_checkpoint(m.config, store, {});
  auto bad = b;
  bad[3] = '1';
  EXPECT_THROW(decode_checkpoint<float>(bad), CheckpointError);
  bad = b;
  bad[4] = 9;
  try {
    decode_checkpoint<float>(bad);
    FAIL();
  } catch (const CheckpointError& e) {
    EXPECT_NE(std::string(e.what()).find("version"), std::string::npos);
  }
}

TEST(Checkpoint, ReorderedManifestRejected) {
  ParameterStore<float> store;
  Rng rng(4);
  auto m = Model<float>::create(store, tiny_config(), rng);
  const auto b = encode_checkpoint(m.config, store, {});
  std::uint64_t len = 0;
  for (int i = 0; i < 8; ++i) len |= std::uint64_t(static_cast<unsigned char>(b[8 + i])) << (8 * i);
  auto j = nlohmann::json::parse(std::string(b.begin() + 16, b.begin() + 16 + static_cast<std::ptrdiff_t>(len)));
  auto& man = j["manifest"];
  // swap the first two entries whose shapes differ, keeping offsets consistent
  std::size_t other = 1;
  while (man[other]["shape"] == man[0]["shape"]) ++other;
  std::swap(man[0], man[other]);
  const std::string text = j.dump();
  std::vector<char> forged(b.begin(), b.begin() + 8);
  for (int i = 0; i < 8; ++i) forged.push_back(static_cast<char>((text.size() >> (8 * i)) & 0xff));
  forged.insert(forged.end(), text.begin(), text.end());
  forged.insert(forged.end(), b.begin() + 16 + static_cast<std::ptrdiff_t>(len), b.end());
  try {
    decode_checkpoint<float>(forged);
    FAIL();
  } catch (const CheckpointError& e) {
    EXPECT_NE(std::string(e.what()).find("shape mismatch"), std::string::npos) << e.what();
  }
}

TEST(Config, DottedKeysAndComments) {
  const auto dir = scratch("config");
  {
    std::ofstream f(dir / "run.cfg");
    f << "# comment\ntrain.lr = 0.0005\nmodel.channels=8,16,32\nmodel.n_sono_blocks=1\nmodel.n_tok_blocks=2\n"
         "model.integration.steps=3  # inline\nmodel.use_position=false\ndata.size=32x48\n"
         "train.gradient_mode=unrolled\n";
  }
  RunConfig c;
  c.load_file((dir / "run.cfg").string());
  EXPECT_EQ(c.train.lr, 0.0005);
  EXPECT_EQ(c.model.channels, (std::vector<std::size_t>{8, 16, 32}));
  EXPECT_EQ(c.model.integration.steps, 3);
  EXPECT_FALSE(c.model.use_position);
  EXPECT_EQ(c.data.height, 32u);
  EXPECT_EQ(c.data.width, 48u);
  EXPECT_EQ(c.train.gradient_mode, GradientMode::unrolled);
  EXPECT_NO_THROW(c.validate());
}

TEST(Config, ErrorsNameTheLine) {
  const auto dir = scratch("config_bad");
  {
    std::ofstream f(dir / "bad.cfg");
    f << "train.lr=0.1\ntrain.max_epochs=ten\n";
  }
  RunConfig c;
  try {
    c.load_file((dir / "bad.cfg").string());
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("bad.cfg:2"), std::string::npos) << e.what();
  }
  EXPECT_THROW(c.set("train.nope", "1"), ConfigError);
  EXPECT_THROW(c.set("model.use_position", "maybe"), ConfigError);
  EXPECT_THROW(c.load_file((dir / "missing.cfg").string()), ConfigError);
}

TEST(Config, EveryKeyIsSettable) {
  RunConfig c;
  for (const auto& k : c.keys()) EXPECT_NO_THROW(c.set(k, k == "model.use_position" ? "1" : k == "train.gradient_mode" ? "adjoint" : k == "data.size" ? "8x8" : k == "data.root" ? "x" : "2")) << k;
}

TEST(ImageIo, PngAndBmpRoundTrip) {
  const auto dir = scratch("imageio");
  Rng rng(3);
  std::uniform_int_distribution<int> px(0, 255);
  for (std::size_t C : {1u, 3u}) {
    Image8 im(5, 7, C);
    for (auto& v : im.pixels) v = static_cast<std::uint8_t>(px(rng));
    for (const char* ext : {".png", ".bmp"}) {
      const auto p = (dir / ("im" + std::to_string(C) + ext)).string();
      write_image(p, im);
      EXPECT_EQ(read_image(p), im) << p;
    }
  }
  EXPECT_THROW(read_image((dir / "none.png").string()), IoError);
  EXPECT_THROW(write_image((dir / "x.gif").string(), Image8(2, 2, 1)), IoError);
}

TEST(Data, BilinearResizeOracle) {
  // 2x2 -> 4x4 with half-pixel centres: rows interpolate at 0, 0.25, 0.75, 1
  const std::vector<float> src{0, 1, 2, 3};
  const auto out = resize_bilinear(src, 1, 2, 2, 4, 4);
  const float w[4] = {0, 0.25f, 0.75f, 1};
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 4; ++x) EXPECT_NEAR(out[y * 4 + x], 2 * w[y] + w[x], 1e-6);
  const auto flat = resize_bilinear(std::vector<float>(12, 0.3f), 1, 3, 4, 7, 5);
  for (float v : flat) EXPECT_NEAR(v, 0.3f, 1e-7);
}

TEST(Data, NearestMaskResizeStaysBinary) {
  BinaryMask m(2, 2, {1, 0, 0, 1});
  const auto r = resize_nearest(m, 4, 4);
  EXPECT_EQ(r.count(), 8u);
  EXPECT_TRUE(r(0, 0) && r(1, 1) && r(3, 3) && !r(0, 3));
}

TEST(Data, DiskDatasetMatchesInMemory) {
  const auto dir = scratch("dataset");
  write_synthetic_dataset(dir.string(), 5, 16, 16, 9);
  auto disk = load_dataset(dir.string(), 1, 16, 16, 0.0, 0);
  auto mem = synthetic_dataset(5, 16, 16, 9);
  ASSERT_EQ(disk.items.size(), 5u);
  for (std::size_t i = 0; i < 5; ++i) {
    EXPECT_EQ(disk.items[i].id, mem.items[i].id);
    EXPECT_EQ(disk.items[i].image, mem.items[i].image);
    EXPECT_EQ(disk.items[i].mask, mem.items[i].mask);
  }
  EXPECT_EQ(disk.train.size(), 5u);
  EXPECT_TRUE(disk.val.empty());
}

TEST(Data, SplitListsAndSeededValidation) {
  const auto dir = scratch("splits");
  write_synthetic_dataset(dir.string(), 10, 16, 16, 2);
  auto ds = load_dataset(dir.string(), 1, 32, 32, 0.2, 4);
  EXPECT_EQ(ds.train.size(), 8u);
  EXPECT_EQ(ds.val.size(), 2u);
  EXPECT_EQ(ds.items[0].image.shape(), (Shape{1, 32, 32}));
  auto again = load_dataset(dir.string(), 1, 32, 32, 0.2, 4);
  EXPECT_EQ(ds.val, again.val);
  {
    std::ofstream(dir / "train.txt") << "synth_0000\nsynth_0001\nsynth_0002\n";
    std::ofstream(dir / "val.txt") << "synth_0003\n";
    std::ofstream(dir / "test.txt") << "synth_0004\nsynth_0005\n";
  }
  auto listed = load_dataset(dir.string(), 3, 16, 16, 0.2, 4);
  EXPECT_EQ(listed.train, (std::vector<std::size_t>{0, 1, 2}));
  EXPECT_EQ(listed.val, (std::vector<std::size_t>{3}));
  EXPECT_EQ(listed.test, (std::vector<std::size_t>{4, 5}));
  EXPECT_EQ(listed.items[0].image.shape(), (Shape{3, 16, 16}));
}

TEST(Data, MissingMaskNamesThePath) {
  const auto dir = scratch("missing");
  write_synthetic_dataset(dir.string(), 2, 8, 8, 2);
  fs::remove(dir / "masks" / "synth_0001.png");
  try {
    load_dataset(dir.string(), 1, 8, 8, 0, 0);
    FAIL();
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find("synth_0001"), std::string::npos) << e.what();
  }
  EXPECT_THROW(load_dataset((dir / "nothing").string(), 1, 8, 8, 0, 0), IoError);
}
