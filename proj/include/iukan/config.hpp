#pragma once

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "iukan/net.hpp"

namespace iukan {

class ConfigError : public Error {
 public:
  using Error::Error;
};

struct TrainConfig {
  double lr = 1e-4;
  int max_epochs = 500;
  std::size_t batch_size = 4;
  int early_stop_patience = 25;
  std::uint64_t seed = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double val_fraction = 0.1;
  double stop_at_val_dice = 0;  ///< stop once validation Dice exceeds this; <= 0 disables
  GradientMode gradient_mode = GradientMode::adjoint;

  void validate() const {
    if (!(lr >= 0)) throw ConfigError("train.lr must be >= 0");
    if (max_epochs < 1) throw ConfigError("train.max_epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
    if (early_stop_patience < 1) throw ConfigError("train.early_stop_patience must be >= 1");
    if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) throw ConfigError("train.beta1/beta2 must be in [0, 1)");
    if (!(eps > 0)) throw ConfigError("train.eps must be > 0");
    if (!(val_fraction >= 0 && val_fraction < 1)) throw ConfigError("train.val_fraction must be in [0, 1)");
  }
};

struct DataConfig {
  std::string root;
  std::size_t height = 64;
  std::size_t width = 64;
};

/// Everything a command needs, addressable by dotted key.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  DataConfig data;

  void set(const std::string& key, const std::string& value);
  void load_file(const std::string& path);
  void validate() const {
    model.validate();
    train.validate();
    if (data.height == 0 || data.width == 0) throw ConfigError("data size must be positive");
  }
  std::vector<std::string> keys() const;
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

template <typename N>
N parse_number(const std::string& key, const std::string& v) {
  N out{};
  const std::string t = trim(v);
  if constexpr (std::is_floating_point_v<N>) {
    std::size_t used = 0;
    try {
      out = static_cast<N>(std::stod(t, &used));
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != t.size()) throw ConfigError(key + ": expected a number, got '" + v + "'");
  } else {
    auto [p, ec] = std::from_chars(t.data(), t.data() + t.size(), out);
    if (ec != std::errc() || p != t.data() + t.size() || t.empty())
      throw ConfigError(key + ": expected an integer, got '" + v + "'");
  }
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  const std::string t = trim(v);
  if (t == "1" || t == "true" || t == "yes" || t == "on") return true;
  if (t == "0" || t == "false" || t == "no" || t == "off") return false;
  throw ConfigError(key + ": expected a boolean, got '" + v + "'");
}

inline std::vector<std::size_t> parse_size_list(const std::string& key, const std::string& v) {
  std::vector<std::size_t> out;
  if (trim(v).empty()) return out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_number<std::size_t>(key, item));
  return out;
}

inline GradientMode parse_mode(const std::string& key, const std::string& v) {
  const std::string t = trim(v);
  if (t == "adjoint") return GradientMode::adjoint;
  if (t == "unrolled") return GradientMode::unrolled;
  throw ConfigError(key + ": expected adjoint or unrolled, got '" + v + "'");
}

/// "HxW" or a single N for a square size.
inline std::pair<std::size_t, std::size_t> parse_size(const std::string& key, const std::string& v) {
  const std::string t = trim(v);
  const auto x = t.find_first_of("xX");
  if (x == std::string::npos) {
    const auto n = parse_number<std::size_t>(key, t);
    return {n, n};
  }
  return {parse_number<std::size_t>(key, t.substr(0, x)), parse_number<std::size_t>(key, t.substr(x + 1))};
}

using Setter = std::function<void(RunConfig&, const std::string&, const std::string&)>;

inline const std::map<std::string, Setter>& setters() {
  using detail::parse_number;
  static const std::map<std::string, Setter> table = {
      {"model.in_channels", [](RunConfig& c, auto& k, auto& v) { c.model.in_channels = parse_number<std::size_t>(k, v); }},
      {"model.channels", [](RunConfig& c, auto& k, auto& v) { c.model.channels = parse_size_list(k, v); }},
      {"model.n_sono_blocks", [](RunConfig& c, auto& k, auto& v) { c.model.n_sono_blocks = parse_number<std::size_t>(k, v); }},
      {"model.n_tok_blocks", [](RunConfig& c, auto& k, auto& v) { c.model.n_tok_blocks = parse_number<std::size_t>(k, v); }},
      {"model.patch", [](RunConfig& c, auto& k, auto& v) { c.model.patch = parse_size_list(k, v); }},
      {"model.embed", [](RunConfig& c, auto& k, auto& v) { c.model.embed = parse_size_list(k, v); }},
      {"model.mul_fraction", [](RunConfig& c, auto& k, auto& v) { c.model.mul_fraction = parse_number<double>(k, v); }},
      {"model.kan_layers", [](RunConfig& c, auto& k, auto& v) { c.model.kan_layers = parse_number<std::size_t>(k, v); }},
      {"model.integration.t0", [](RunConfig& c, auto& k, auto& v) { c.model.integration.t0 = parse_number<double>(k, v); }},
      {"model.integration.t1", [](RunConfig& c, auto& k, auto& v) { c.model.integration.t1 = parse_number<double>(k, v); }},
      {"model.integration.steps", [](RunConfig& c, auto& k, auto& v) { c.model.integration.steps = parse_number<int>(k, v); }},
      {"model.grid.degree", [](RunConfig& c, auto& k, auto& v) { c.model.grid.degree = parse_number<int>(k, v); }},
      {"model.grid.grid_size", [](RunConfig& c, auto& k, auto& v) { c.model.grid.grid_size = parse_number<int>(k, v); }},
      {"model.grid.lo", [](RunConfig& c, auto& k, auto& v) { c.model.grid.lo = parse_number<double>(k, v); }},
      {"model.grid.hi", [](RunConfig& c, auto& k, auto& v) { c.model.grid.hi = parse_number<double>(k, v); }},
      {"model.use_position", [](RunConfig& c, auto& k, auto& v) { c.model.use_position = parse_bool(k, v); }},
      {"model.out_channels", [](RunConfig& c, auto& k, auto& v) { c.model.out_channels = parse_number<std::size_t>(k, v); }},
      {"train.lr", [](RunConfig& c, auto& k, auto& v) { c.train.lr = parse_number<double>(k, v); }},
      {"train.max_epochs", [](RunConfig& c, auto& k, auto& v) { c.train.max_epochs = parse_number<int>(k, v); }},
      {"train.batch_size", [](RunConfig& c, auto& k, auto& v) { c.train.batch_size = parse_number<std::size_t>(k, v); }},
      {"train.early_stop_patience", [](RunConfig& c, auto& k, auto& v) { c.train.early_stop_patience = parse_number<int>(k, v); }},
      {"train.seed", [](RunConfig& c, auto& k, auto& v) { c.train.seed = parse_number<std::uint64_t>(k, v); }},
      {"train.beta1", [](RunConfig& c, auto& k, auto& v) { c.train.beta1 = parse_number<double>(k, v); }},
      {"train.beta2", [](RunConfig& c, auto& k, auto& v) { c.train.beta2 = parse_number<double>(k, v); }},
      {"train.eps", [](RunConfig& c, auto& k, auto& v) { c.train.eps = parse_number<double>(k, v); }},
      {"train.val_fraction", [](RunConfig& c, auto& k, auto& v) { c.train.val_fraction = parse_number<double>(k, v); }},
      {"train.stop_at_val_dice", [](RunConfig& c, auto& k, auto& v) { c.train.stop_at_val_dice = parse_number<double>(k, v); }},
      {"train.gradient_mode", [](RunConfig& c, auto& k, auto& v) { c.train.gradient_mode = parse_mode(k, v); }},
      {"data.root", [](RunConfig& c, auto&, auto& v) { c.data.root = trim(v); }},
      {"data.height", [](RunConfig& c, auto& k, auto& v) { c.data.height = parse_number<std::size_t>(k, v); }},
      {"data.width", [](RunConfig& c, auto& k, auto& v) { c.data.width = parse_number<std::size_t>(k, v); }},
      {"data.size", [](RunConfig& c, auto& k, auto& v) { std::tie(c.data.height, c.data.width) = parse_size(k, v); }},
  };
  return table;
}

}  // namespace detail

inline void RunConfig::set(const std::string& key, const std::string& value) {
  const auto& t = detail::setters();
  auto it = t.find(detail::trim(key));
  if (it == t.end()) throw ConfigError("unknown config key '" + key + "'");
  it->second(*this, it->first, value);
}

inline std::vector<std::string> RunConfig::keys() const {
  std::vector<std::string> out;
  for (const auto& [k, _] : detail::setters()) out.push_back(k);
  return out;
}

/// key=value per line; '#' starts a comment.
inline void RunConfig::load_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config file " + path);
  std::string line;
  int n = 0;
  while (std::getline(f, line)) {
    ++n;
    if (auto h = line.find('#'); h != std::string::npos) line.erase(h);
    if (detail::trim(line).empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(path + ":" + std::to_string(n) + ": expected key=value");
    try {
      set(line.substr(0, eq), line.substr(eq + 1));
    } catch (const ConfigError& e) {
      throw ConfigError(path + ":" + std::to_string(n) + ": " + e.what());
    }
  }
}

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"in_channels", c.in_channels},
       {"channels", c.channels},
       {"n_sono_blocks", c.n_sono_blocks},
       {"n_tok_blocks", c.n_tok_blocks},
       {"patch", c.patch},
       {"embed", c.embed},
       {"mul_fraction", c.mul_fraction},
       {"kan_layers", c.kan_layers},
       {"integration", {{"t0", c.integration.t0}, {"t1", c.integration.t1}, {"steps", c.integration.steps}}},
       {"grid", {{"degree", c.grid.degree}, {"grid_size", c.grid.grid_size}, {"lo", c.grid.lo}, {"hi", c.grid.hi}}},
       {"use_position", c.use_position},
       {"out_channels", c.out_channels}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  j.at("in_channels").get_to(c.in_channels);
  j.at("channels").get_to(c.channels);
  j.at("n_sono_blocks").get_to(c.n_sono_blocks);
  j.at("n_tok_blocks").get_to(c.n_tok_blocks);
  j.at("patch").get_to(c.patch);
  j.at("embed").get_to(c.embed);
  j.at("mul_fraction").get_to(c.mul_fraction);
  j.at("kan_layers").get_to(c.kan_layers);
  const auto& in = j.at("integration");
  in.at("t0").get_to(c.integration.t0);
  in.at("t1").get_to(c.integration.t1);
  in.at("steps").get_to(c.integration.steps);
  const auto& g = j.at("grid");
  g.at("degree").get_to(c.grid.degree);
  g.at("grid_size").get_to(c.grid.grid_size);
  g.at("lo").get_to(c.grid.lo);
  g.at("hi").get_to(c.grid.hi);
  j.at("use_position").get_to(c.use_position);
  j.at("out_channels").get_to(c.out_channels);
}

}  // namespace iukan
