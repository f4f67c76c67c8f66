#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "iukan/config.hpp"
#include "iukan/net.hpp"

namespace iukan {

class CheckpointError : public Error {
 public:
  using Error::Error;
};

inline constexpr char kCheckpointMagic[4] = {'I', 'U', 'K', '2'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointMeta {
  int epoch = 0;
  double best_metric = 0;
  nlohmann::json extra = nlohmann::json::object();
};

/// Layout: magic "IUK2", u32 version, u64 metadata length, metadata JSON,
/// then every parameter as little-endian f32 in manifest order.
template <typename T>
std::vector<char> encode_checkpoint(const ModelConfig& cfg, const ParameterStore<T>& store,
                                    const CheckpointMeta& meta) {
  nlohmann::json manifest = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& p : store.all()) {
    manifest.push_back({{"name", p.name}, {"shape", p.value.shape()}, {"offset", offset}});
    offset += p.value.size() * 4;
  }
  const nlohmann::json j = {{"config", cfg},
                            {"epoch", meta.epoch},
                            {"best_metric", meta.best_metric},
                            {"extra", meta.extra},
                            {"manifest", manifest}};
  const std::string text = j.dump();

  std::vector<char> out(kCheckpointMagic, kCheckpointMagic + 4);
  auto put = [&out](std::uint64_t v, int bytes) {
    for (int i = 0; i < bytes; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  };
  put(kCheckpointVersion, 4);
  put(text.size(), 8);
  out.insert(out.end(), text.begin(), text.end());
  out.reserve(out.size() + offset);
  for (const auto& p : store.all())
    for (T v : p.value.data()) put(std::bit_cast<std::uint32_t>(static_cast<float>(v)), 4);
  return out;
}

template <typename T>
void save_checkpoint(const std::string& path, const ModelConfig& cfg, const ParameterStore<T>& store,
                     const CheckpointMeta& meta) {
  const auto bytes = encode_checkpoint(cfg, store, meta);
  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw CheckpointError("cannot write checkpoint " + path);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw CheckpointError("short write to " + path);
  }
  std::filesystem::rename(tmp, path);
}

template <typename T>
struct LoadedModel {
  ModelConfig config;
  ParameterStore<T> store;
  Model<T> model;
  CheckpointMeta meta;
};

/// Rebuilds the model from the stored config and fills its parameters,
/// rejecting any disagreement between manifest, model and payload.
template <typename T>
LoadedModel<T> decode_checkpoint(const std::vector<char>& b, const std::string& what = "checkpoint") {
  auto fail = [&](const std::string& m) { throw CheckpointError(what + ": " + m); };
  if (b.size() < 16) fail("truncated header (" + std::to_string(b.size()) + " bytes)");
  if (std::memcmp(b.data(), kCheckpointMagic, 4) != 0) fail("bad magic, not an IUK2 checkpoint");
  auto get = [&b](std::size_t at, int bytes) {
    std::uint64_t v = 0;
    for (int i = 0; i < bytes; ++i) v |= std::uint64_t(static_cast<unsigned char>(b[at + i])) << (8 * i);
    return v;
  };
  const auto version = static_cast<std::uint32_t>(get(4, 4));
  if (version != kCheckpointVersion) {
    fail("unsupported version " + std::to_string(version) + " (expected " + std::to_string(kCheckpointVersion) + ")");
  }
  const std::uint64_t meta_len = get(8, 8);
  if (meta_len > b.size() - 16) fail("truncated metadata");

  nlohmann::json j;
  try {
    j = nlohmann::json::parse(b.begin() + 16, b.begin() + 16 + static_cast<std::ptrdiff_t>(meta_len));
  } catch (const nlohmann::json::exception& e) {
    fail(std::string("corrupt metadata: ") + e.what());
  }

  LoadedModel<T> out;
  try {
    out.config = j.at("config").get<ModelConfig>();
    out.meta.epoch = j.at("epoch").get<int>();
    out.meta.best_metric = j.at("best_metric").get<double>();
    out.meta.extra = j.value("extra", nlohmann::json::object());
  } catch (const nlohmann::json::exception& e) {
    fail(std::string("bad metadata: ") + e.what());
  }
  try {
    out.config.validate();
  } catch (const Error& e) {
    fail(std::string("invalid model config: ") + e.what());
  }
  Rng rng(0);
  out.model = Model<T>::create(out.store, out.config, rng);

  const nlohmann::json manifest = j.value("manifest", nlohmann::json());
  if (!manifest.is_array() || manifest.size() != out.store.size()) {
    fail("manifest lists " + std::to_string(manifest.size()) + " tensors, model has " +
         std::to_string(out.store.size()));
  }
  const std::size_t payload = 16 + meta_len;
  std::uint64_t offset = 0;
  for (std::size_t i = 0; i < out.store.size(); ++i) {
    const auto& e = manifest[i];
    Tensor<T>& t = out.store[i];
    Shape shape;
    std::string name;
    std::uint64_t off = 0;
    try {
      shape = e.at("shape").get<Shape>();
      name = e.at("name").get<std::string>();
      off = e.at("offset").get<std::uint64_t>();
    } catch (const nlohmann::json::exception& ex) {
      fail("bad manifest entry " + std::to_string(i) + ": " + ex.what());
    }
    if (shape != t.shape() || name != out.store.name(i)) {
      fail("shape mismatch at manifest entry " + std::to_string(i) + ": file has '" + name + "' " +
           shape_str(shape) + ", model expects '" + out.store.name(i) + "' " + shape_str(t.shape()));
    }
    if (off != offset) fail("manifest offset mismatch at '" + name + "'");
    offset += t.size() * 4;
  }
  if (b.size() - payload < offset) {
    fail("truncated payload: " + std::to_string(b.size() - payload) + " of " + std::to_string(offset) + " bytes");
  }
  if (b.size() - payload > offset) fail("trailing bytes after payload");

  std::size_t at = payload;
  for (std::size_t i = 0; i < out.store.size(); ++i)
    for (T& v : out.store[i].data()) {
      v = static_cast<T>(std::bit_cast<float>(static_cast<std::uint32_t>(get(at, 4))));
      at += 4;
    }
  return out;
}

template <typename T>
LoadedModel<T> load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot open checkpoint " + path);
  std::vector<char> b((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_checkpoint<T>(b, path);
}

}  // namespace iukan
