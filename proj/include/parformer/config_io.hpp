#pragma once

// JSON config files:
//
//   {
//     "model": { "name": "S", "stages": [ {"dim": 64, "ratio": "0", ...}, ... ], ... },
//     "train": { "optimizer": "adamw", "lr": 0.001, ... },
//     "data":  { "source": "synth", "classes": 4, "per_class": 64, ... }
//   }
//
// Every key is optional except model.stages; missing keys take the in-memory
// defaults. Unknown keys are rejected. Ratios are strings such as "1/4" (plain
// integers are accepted too). "model" may also be a preset name: "model": "T".
// data.source is "synth" or a CIFAR-10 binary directory/file; mean/std, when
// present, replace the statistics computed from the loaded images.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"
#include "parformer/config.hpp"
#include "parformer/optim.hpp"

namespace parformer {

struct DataConfig {
  std::string source = "synth";
  int classes = 4;
  int per_class = 64;
  int size = 32;
  double noise = 0.1;
  std::vector<float> mean;
  std::vector<float> stddev;

  friend bool operator==(const DataConfig&, const DataConfig&) = default;
};

struct ConfigFile {
  ModelConfig model;
  std::optional<TrainConfig> train;
  std::optional<DataConfig> data;

  friend bool operator==(const ConfigFile&, const ConfigFile&) = default;
};

namespace detail {

using nlohmann::json;

inline void require_object(const json& j, const std::string& where, const std::set<std::string>& allowed) {
  if (!j.is_object()) throw Error("config", where + " must be an object");
  for (const auto& [key, _] : j.items()) {
    if (!allowed.count(key)) throw Error("config", where + ": unknown key '" + key + "'");
  }
}

template <typename V>
void read(const json& j, const char* key, V& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<V>();
  } catch (const json::exception&) {
    throw Error("config", where + "." + key + " has the wrong type");
  }
}

template <typename V>
void read_int(const json& j, const char* key, V& out, const std::string& where) {
  if (!j.contains(key)) return;
  if (!j.at(key).is_number_integer()) throw Error("config", where + "." + key + " must be an integer");
  read(j, key, out, where);
}

inline void read_ratio(const json& j, const char* key, Ratio& out, const std::string& where) {
  if (!j.contains(key)) return;
  const auto& v = j.at(key);
  if (v.is_string()) {
    out = Ratio::parse(v.get<std::string>());
  } else if (v.is_number_integer()) {
    out = Ratio(v.get<std::int64_t>());
  } else {
    throw Error("config", where + "." + key + " must be a string like \"1/4\" or an integer");
  }
}

inline StageConfig stage_from_json(const json& j, const std::string& where) {
  require_object(j, where, {"dim", "blocks", "ratio", "qk_dim", "ffn_ratio", "patch_kernel", "patch_stride",
                            "dw_kernel"});
  if (!j.contains("dim")) throw Error("config", where + ".dim is required");
  StageConfig s;
  read_int(j, "dim", s.dim, where);
  read_int(j, "blocks", s.blocks, where);
  read_ratio(j, "ratio", s.ratio, where);
  read_int(j, "qk_dim", s.qk_dim, where);
  read_ratio(j, "ffn_ratio", s.ffn_ratio, where);
  read_int(j, "patch_stride", s.patch_stride, where);
  s.patch_kernel = 2 * s.patch_stride - 1;
  read_int(j, "patch_kernel", s.patch_kernel, where);
  read_int(j, "dw_kernel", s.dw_kernel, where);
  return s;
}

inline json stage_to_json(const StageConfig& s) {
  return json{{"dim", s.dim},
              {"blocks", s.blocks},
              {"ratio", s.ratio.str()},
              {"qk_dim", s.qk_dim},
              {"ffn_ratio", s.ffn_ratio.str()},
              {"patch_kernel", s.patch_kernel},
              {"patch_stride", s.patch_stride},
              {"dw_kernel", s.dw_kernel}};
}

}  // namespace detail

inline nlohmann::json model_to_json(const ModelConfig& c) {
  nlohmann::json stages = nlohmann::json::array();
  for (const auto& s : c.stages) stages.push_back(detail::stage_to_json(s));
  return nlohmann::json{{"name", c.name},
                        {"stages", stages},
                        {"in_channels", c.in_channels},
                        {"head_hidden", c.head_hidden},
                        {"num_classes", c.num_classes},
                        {"layerscale_init", c.layerscale_init},
                        {"scam_placement", placement_name(c.scam_placement)},
                        {"bn_eps", c.bn_eps},
                        {"bn_momentum", c.bn_momentum},
                        {"init_std", c.init_std}};
}

inline ModelConfig model_from_json(const nlohmann::json& j) {
  if (j.is_string()) return preset(j.get<std::string>());
  const std::string where = "model";
  detail::require_object(j, where, {"name", "stages", "in_channels", "head_hidden", "num_classes",
                                    "layerscale_init", "scam_placement", "bn_eps", "bn_momentum", "init_std"});
  if (!j.contains("stages") || !j.at("stages").is_array()) throw Error("config", "model.stages must be an array");
  ModelConfig c;
  detail::read(j, "name", c.name, where);
  c.stages.clear();
  std::size_t i = 0;
  for (const auto& s : j.at("stages")) {
    c.stages.push_back(detail::stage_from_json(s, "model.stages[" + std::to_string(i++) + "]"));
  }
  detail::read_int(j, "in_channels", c.in_channels, where);
  detail::read_int(j, "head_hidden", c.head_hidden, where);
  detail::read_int(j, "num_classes", c.num_classes, where);
  detail::read(j, "layerscale_init", c.layerscale_init, where);
  if (j.contains("scam_placement")) {
    std::string p;
    detail::read(j, "scam_placement", p, where);
    c.scam_placement = parse_placement(p);
  }
  detail::read(j, "bn_eps", c.bn_eps, where);
  detail::read(j, "bn_momentum", c.bn_momentum, where);
  detail::read(j, "init_std", c.init_std, where);
  validate(c);
  return c;
}

inline nlohmann::json train_to_json(const TrainConfig& t) {
  return nlohmann::json{{"optimizer", optimizer_name(t.optimizer)},
                        {"lr", t.lr},
                        {"weight_decay", t.weight_decay},
                        {"momentum", t.momentum},
                        {"beta1", t.beta1},
                        {"beta2", t.beta2},
                        {"adam_eps", t.adam_eps},
                        {"batch_size", t.batch_size},
                        {"steps", t.steps},
                        {"seed", t.seed},
                        {"dtype", dtype_name(t.dtype)}};
}

inline DType parse_dtype(const std::string& s) {
  if (s == "f32") return DType::f32;
  if (s == "f64") return DType::f64;
  throw Error("config", "unknown dtype '" + s + "' (expected f32 or f64)");
}

inline TrainConfig train_from_json(const nlohmann::json& j) {
  const std::string where = "train";
  detail::require_object(j, where, {"optimizer", "lr", "weight_decay", "momentum", "beta1", "beta2", "adam_eps",
                                    "batch_size", "steps", "seed", "dtype"});
  TrainConfig t;
  if (j.contains("optimizer")) {
    std::string o;
    detail::read(j, "optimizer", o, where);
    t.optimizer = parse_optimizer(o);
  }
  detail::read(j, "lr", t.lr, where);
  detail::read(j, "weight_decay", t.weight_decay, where);
  detail::read(j, "momentum", t.momentum, where);
  detail::read(j, "beta1", t.beta1, where);
  detail::read(j, "beta2", t.beta2, where);
  detail::read(j, "adam_eps", t.adam_eps, where);
  detail::read_int(j, "batch_size", t.batch_size, where);
  detail::read_int(j, "steps", t.steps, where);
  if (j.contains("seed") && !j.at("seed").is_number_unsigned()) {
    throw Error("config", "train.seed must be a non-negative integer");
  }
  detail::read(j, "seed", t.seed, where);
  if (j.contains("dtype")) {
    std::string d;
    detail::read(j, "dtype", d, where);
    t.dtype = parse_dtype(d);
  }
  validate(t);
  return t;
}

inline nlohmann::json data_to_json(const DataConfig& d) {
  nlohmann::json j{{"source", d.source},
                   {"classes", d.classes},
                   {"per_class", d.per_class},
                   {"size", d.size},
                   {"noise", d.noise}};
  if (!d.mean.empty()) j["mean"] = d.mean;
  if (!d.stddev.empty()) j["std"] = d.stddev;
  return j;
}

inline void validate(const DataConfig& d) {
  auto fail = [](const std::string& m) { throw Error("config", "data." + m); };
  if (d.source.empty()) fail("source must not be empty");
  if (d.classes < 1) fail("classes must be >= 1");
  if (d.per_class < 1) fail("per_class must be >= 1");
  if (d.size < 1) fail("size must be >= 1");
  if (!(d.noise >= 0.0) || !std::isfinite(d.noise)) fail("noise must be finite and >= 0");
  if (d.mean.size() != d.stddev.size()) fail("mean and std must have the same length");
  for (float s : d.stddev)
    if (!(s > 0.0f) || !std::isfinite(s)) fail("std entries must be positive");
  for (float m : d.mean)
    if (!std::isfinite(m)) fail("mean entries must be finite");
}

inline DataConfig data_from_json(const nlohmann::json& j) {
  const std::string where = "data";
  detail::require_object(j, where, {"source", "classes", "per_class", "size", "noise", "mean", "std"});
  DataConfig d;
  detail::read(j, "source", d.source, where);
  detail::read_int(j, "classes", d.classes, where);
  detail::read_int(j, "per_class", d.per_class, where);
  detail::read_int(j, "size", d.size, where);
  detail::read(j, "noise", d.noise, where);
  detail::read(j, "mean", d.mean, where);
  detail::read(j, "std", d.stddev, where);
  validate(d);
  return d;
}

inline nlohmann::json config_to_json(const ConfigFile& f) {
  nlohmann::json j{{"model", model_to_json(f.model)}};
  if (f.train) j["train"] = train_to_json(*f.train);
  if (f.data) j["data"] = data_to_json(*f.data);
  return j;
}

inline ConfigFile config_from_json(const nlohmann::json& j) {
  detail::require_object(j, "config", {"model", "train", "data"});
  if (!j.contains("model")) throw Error("config", "config needs a \"model\" section");
  ConfigFile f;
  f.model = model_from_json(j.at("model"));
  if (j.contains("train")) f.train = train_from_json(j.at("train"));
  if (j.contains("data")) f.data = data_from_json(j.at("data"));
  return f;
}

inline ConfigFile parse_config(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw Error("config", std::string("invalid JSON: ") + e.what());
  }
  return config_from_json(j);
}

inline std::string dump_config(const ConfigFile& f) { return config_to_json(f).dump(2) + "\n"; }

inline ConfigFile load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("io", "cannot open " + path.string());
  const std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_config(text);
}

inline void save_config(const std::filesystem::path& path, const ConfigFile& f) {
  std::ofstream out(path);
  if (!out) throw Error("io", "cannot create " + path.string());
  out << dump_config(f);
  if (!out) throw Error("io", "write failed: " + path.string());
}

}  // namespace parformer
