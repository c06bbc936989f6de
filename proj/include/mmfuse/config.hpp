#pragma once

// Flat key=value run configuration.
//
//   # comment
//   task = task2
//   setting = B
//   base_lr = 2e-3
//
// Unknown keys are rejected so typos surface immediately.

#include "mmfuse/dataset.hpp"
#include "mmfuse/fusion.hpp"
#include "mmfuse/knowledge.hpp"

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>

namespace mmfuse {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using KeyValues = std::map<std::string, std::string>;

inline KeyValues parse_key_values(std::istream& in, const std::string& origin = "<config>") {
  KeyValues kv;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const std::string t = detail::trim(line);
    if (t.empty()) continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(origin + ":" + std::to_string(n) + ": expected key = value");
    }
    const std::string key = detail::trim(t.substr(0, eq));
    if (key.empty()) throw ConfigError(origin + ":" + std::to_string(n) + ": empty key");
    kv[key] = detail::trim(t.substr(eq + 1));
  }
  return kv;
}

inline KeyValues read_key_values(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path.string() + "'");
  return parse_key_values(in, path.string());
}

enum class DecayPolicy { plateau, step, none };

struct TrainConfig {
  // data
  TaskId task = TaskId::task1;
  Setting setting = Setting::A;
  LabelPolicy label_policy = LabelPolicy::text_label;
  std::string annotations;
  std::string images_root;
  std::string manifest;  // alternative to annotations: a (possibly enriched) manifest
  bool require_images = true;
  std::uint64_t split_seed = 0;
  ColumnMap columns;

  // knowledge
  bool knowledge = true;
  std::string knowledge_cache;
  double threshold = 0.1;
  std::size_t max_chars_per_entity = 500;
  std::size_t max_ngram = 3;

  // model
  std::string image_encoder = "toy";
  std::string text_encoder = "toy";
  int text_max_length = 256;
  int proj_dim = 100;
  int hidden_dim = 100;
  bool guided_attention = true;

  // optimisation
  double base_lr = 2e-3;
  DecayPolicy decay = DecayPolicy::plateau;
  double decay_factor = 10.0;
  int decay_patience = 10;
  int decay_step_epoch = 25;
  int batch_size = 64;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-4;
  int epochs = 50;
  int early_stopping_patience = 0;  // 0 = off
  std::uint64_t seed = 0;

  DatasetConfig dataset_config() const {
    DatasetConfig d;
    d.setting = setting;
    d.task = TaskSpec::make(task);
    d.annotations_path = annotations;
    d.images_root = images_root;
    d.label_policy_for_B = label_policy;
    d.columns = columns;
    d.require_images = require_images;
    d.split_seed = split_seed;
    return d;
  }

  EnrichOptions enrich_options() const {
    EnrichOptions o;
    o.extract.threshold = threshold;
    o.extract.max_ngram = max_ngram;
    o.max_chars_per_entity = max_chars_per_entity;
    return o;
  }

  ModelConfig model_config(int image_channels, int text_dim) const {
    ModelConfig m;
    m.image_channels = image_channels;
    m.text_dim = text_dim;
    m.proj_dim = proj_dim;
    m.hidden_dim = hidden_dim;
    m.num_classes = TaskSpec::make(task).class_count();
    m.attention = guided_attention ? AttentionMode::learned : AttentionMode::none;
    m.gate = guided_attention ? GateMode::sigmoid : GateMode::constant_one;
    m.seed = seed;
    return m;
  }

  // The four ablation settings: MS1 neither knowledge nor guided
  // attention, MS2 no knowledge, MS3 no guided attention, MS4 full model.
  static TrainConfig ablation(int ms, TrainConfig base) {
    switch (ms) {
      case 1: base.knowledge = false; base.guided_attention = false; break;
      case 2: base.knowledge = false; base.guided_attention = true; break;
      case 3: base.knowledge = true; base.guided_attention = false; break;
      case 4: base.knowledge = true; base.guided_attention = true; break;
      default: throw ConfigError("ablation setting must be 1..4");
    }
    return base;
  }

  void validate() const {
    if (!(base_lr >= 0.0)) throw ConfigError("base_lr must be >= 0");
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (!(adam_beta1 > 0 && adam_beta1 < 1 && adam_beta2 > 0 && adam_beta2 < 1)) {
      throw ConfigError("adam betas must lie in (0, 1)");
    }
    if (!(adam_eps > 0)) throw ConfigError("adam_eps must be positive");
    if (!(decay_factor > 0)) throw ConfigError("decay_factor must be positive");
    if (decay_patience < 1 || decay_step_epoch < 1) throw ConfigError("decay trigger must be >= 1");
    if (proj_dim < 1 || hidden_dim < 1 || text_max_length < 1) {
      throw ConfigError("model dimensions must be positive");
    }
    if (!(threshold >= 0 && threshold < 1)) throw ConfigError("threshold must lie in [0, 1)");
    if (setting == Setting::B && task == TaskId::task3) {
      throw ConfigError("Setting B is defined only for task1 and task2");
    }
    if (annotations.empty() && manifest.empty()) {
      throw ConfigError("config needs either 'annotations' or 'manifest'");
    }
  }

  // Keys that must agree between a checkpoint and the data it is evaluated on.
  KeyValues compatibility_keys() const;
  KeyValues to_key_values() const;
  static TrainConfig from_key_values(const KeyValues& kv);
};

namespace detail {

inline std::string fmt_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  const std::string k = lower(v);
  if (k == "on" || k == "true" || k == "1" || k == "yes") return true;
  if (k == "off" || k == "false" || k == "0" || k == "no") return false;
  throw ConfigError(key + ": expected on/off, got '" + v + "'");
}

template <typename N>
N parse_number(const std::string& key, const std::string& v) {
  if constexpr (std::is_floating_point_v<N>) {
    std::size_t used = 0;
    double out = 0.0;
    try {
      out = std::stod(v, &used);
    } catch (const std::logic_error&) {
      used = 0;
    }
    if (used == 0 || used != v.size()) throw ConfigError(key + ": not a number: '" + v + "'");
    return static_cast<N>(out);
  } else {
    N out{};
    const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
    if (v.empty() || r.ec != std::errc() || r.ptr != v.data() + v.size()) {
      throw ConfigError(key + ": not an integer: '" + v + "'");
    }
    return out;
  }
}

inline std::string decay_name(DecayPolicy p) {
  switch (p) {
    case DecayPolicy::plateau: return "plateau";
    case DecayPolicy::step: return "step";
    case DecayPolicy::none: return "none";
  }
  return "?";
}

}  // namespace detail

inline KeyValues TrainConfig::to_key_values() const {
  using detail::fmt_double;
  KeyValues kv;
  kv["task"] = to_string(task);
  kv["setting"] = to_string(setting);
  kv["label_policy"] = to_string(label_policy);
  kv["annotations"] = annotations;
  kv["images_root"] = images_root;
  kv["manifest"] = manifest;
  kv["require_images"] = require_images ? "on" : "off";
  kv["split_seed"] = std::to_string(split_seed);
  kv["column.sample_id"] = columns.sample_id;
  kv["column.event_name"] = columns.event_name;
  kv["column.image_path"] = columns.image_path;
  kv["column.text"] = columns.text;
  kv["column.image_label"] = columns.image_label;
  kv["column.text_label"] = columns.text_label;
  kv["column.split"] = columns.split;
  kv["knowledge"] = knowledge ? "on" : "off";
  kv["knowledge_cache"] = knowledge_cache;
  kv["threshold"] = fmt_double(threshold);
  kv["max_chars_per_entity"] = std::to_string(max_chars_per_entity);
  kv["max_ngram"] = std::to_string(max_ngram);
  kv["encoder.image"] = image_encoder;
  kv["encoder.text"] = text_encoder;
  kv["text_max_length"] = std::to_string(text_max_length);
  kv["proj_dim"] = std::to_string(proj_dim);
  kv["hidden_dim"] = std::to_string(hidden_dim);
  kv["guided_attention"] = guided_attention ? "on" : "off";
  kv["base_lr"] = fmt_double(base_lr);
  kv["decay"] = detail::decay_name(decay);
  kv["decay_factor"] = fmt_double(decay_factor);
  kv["decay_patience"] = std::to_string(decay_patience);
  kv["decay_step_epoch"] = std::to_string(decay_step_epoch);
  kv["batch_size"] = std::to_string(batch_size);
  kv["adam_beta1"] = fmt_double(adam_beta1);
  kv["adam_beta2"] = fmt_double(adam_beta2);
  kv["adam_eps"] = fmt_double(adam_eps);
  kv["epochs"] = std::to_string(epochs);
  kv["early_stopping_patience"] = std::to_string(early_stopping_patience);
  kv["seed"] = std::to_string(seed);
  return kv;
}

inline KeyValues TrainConfig::compatibility_keys() const {
  static const std::set<std::string> keys = {
      "task",          "setting",         "label_policy", "knowledge",     "threshold",
      "max_chars_per_entity", "max_ngram", "encoder.image", "encoder.text", "text_max_length",
      "proj_dim",      "hidden_dim",      "guided_attention"};
  KeyValues out;
  for (const auto& [k, v] : to_key_values()) {
    if (keys.count(k)) out[k] = v;
  }
  return out;
}

inline TrainConfig TrainConfig::from_key_values(const KeyValues& kv) {
  using detail::parse_bool;
  using detail::parse_number;
  TrainConfig c;
  for (const auto& [k, v] : kv) {
    if (k == "task") c.task = parse_task(v);
    else if (k == "setting") c.setting = parse_setting(v);
    else if (k == "label_policy") c.label_policy = parse_label_policy(v);
    else if (k == "annotations") c.annotations = v;
    else if (k == "images_root") c.images_root = v;
    else if (k == "manifest") c.manifest = v;
    else if (k == "require_images") c.require_images = parse_bool(k, v);
    else if (k == "split_seed") c.split_seed = parse_number<std::uint64_t>(k, v);
    else if (k == "column.sample_id") c.columns.sample_id = v;
    else if (k == "column.event_name") c.columns.event_name = v;
    else if (k == "column.image_path") c.columns.image_path = v;
    else if (k == "column.text") c.columns.text = v;
    else if (k == "column.image_label") c.columns.image_label = v;
    else if (k == "column.text_label") c.columns.text_label = v;
    else if (k == "column.split") c.columns.split = v;
    else if (k == "knowledge") c.knowledge = parse_bool(k, v);
    else if (k == "knowledge_cache") c.knowledge_cache = v;
    else if (k == "threshold") c.threshold = parse_number<double>(k, v);
    else if (k == "max_chars_per_entity") c.max_chars_per_entity = parse_number<std::size_t>(k, v);
    else if (k == "max_ngram") c.max_ngram = parse_number<std::size_t>(k, v);
    else if (k == "encoder.image") c.image_encoder = v;
    else if (k == "encoder.text") c.text_encoder = v;
    else if (k == "text_max_length") c.text_max_length = parse_number<int>(k, v);
    else if (k == "proj_dim") c.proj_dim = parse_number<int>(k, v);
    else if (k == "hidden_dim") c.hidden_dim = parse_number<int>(k, v);
    else if (k == "guided_attention") c.guided_attention = parse_bool(k, v);
    else if (k == "base_lr") c.base_lr = parse_number<double>(k, v);
    else if (k == "decay") {
      if (v == "plateau") c.decay = DecayPolicy::plateau;
      else if (v == "step") c.decay = DecayPolicy::step;
      else if (v == "none") c.decay = DecayPolicy::none;
      else throw ConfigError("decay: expected plateau|step|none, got '" + v + "'");
    }
    else if (k == "decay_factor") c.decay_factor = parse_number<double>(k, v);
    else if (k == "decay_patience") c.decay_patience = parse_number<int>(k, v);
    else if (k == "decay_step_epoch") c.decay_step_epoch = parse_number<int>(k, v);
    else if (k == "batch_size") c.batch_size = parse_number<int>(k, v);
    else if (k == "adam_beta1") c.adam_beta1 = parse_number<double>(k, v);
    else if (k == "adam_beta2") c.adam_beta2 = parse_number<double>(k, v);
    else if (k == "adam_eps") c.adam_eps = parse_number<double>(k, v);
    else if (k == "epochs") c.epochs = parse_number<int>(k, v);
    else if (k == "early_stopping_patience") c.early_stopping_patience = parse_number<int>(k, v);
    else if (k == "seed") c.seed = parse_number<std::uint64_t>(k, v);
    else throw ConfigError("unknown config key '" + k + "'");
  }
  return c;
}

inline std::string config_hash(const KeyValues& kv) {
  std::uint64_t h = fnv1a("");
  for (const auto& [k, v] : kv) {
    h = fnv1a(k, h);
    h = fnv1a("=", h);
    h = fnv1a(v, h);
    h = fnv1a("\n", h);
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace mmfuse
