#pragma once

// Training loop, evaluation and checkpoints.
//
// Adam with the configured betas/eps, mini-batches drawn from a seeded
// shuffle, learning rate divided by `decay_factor` on a validation plateau
// (or at a fixed epoch). The best-by-validation-accuracy parameters are kept.
// Every epoch writes `last.ckpt`, which carries the optimizer and RNG state
// so an interrupted run resumes bit-for-bit.

#include "mmfuse/config.hpp"
#include "mmfuse/fusion.hpp"
#include "mmfuse/metrics.hpp"
#include "mmfuse/pipeline.hpp"

#include <nlohmann/json.hpp>

#include <chrono>
#include <cmath>
#include <cstdint>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numeric>
#include <optional>
#include <ostream>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace mmfuse {

class TrainError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Flat views over parameter tensors

template <typename T>
std::vector<std::span<T>> flat_views(FusionParams<T>& p) {
  std::vector<std::span<T>> out;
  p.visit([&](std::string_view, auto& t) { out.emplace_back(t.data(), static_cast<std::size_t>(t.size())); });
  return out;
}

template <typename T>
std::vector<std::span<const T>> flat_views(const FusionParams<T>& p) {
  std::vector<std::span<const T>> out;
  p.visit([&](std::string_view, const auto& t) {
    out.emplace_back(t.data(), static_cast<std::size_t>(t.size()));
  });
  return out;
}

template <typename T>
class Adam {
 public:
  Adam() = default;
  Adam(const ModelConfig& cfg, double beta1, double beta2, double eps)
      : beta1_(beta1), beta2_(beta2), eps_(eps),
        m_(FusionParams<T>::zeros_like(cfg)), v_(FusionParams<T>::zeros_like(cfg)) {}

  void step(FusionParams<T>& params, const FusionParams<T>& grads, double lr) {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    auto p = flat_views(params);
    auto g = flat_views(grads);
    auto m = flat_views(m_);
    auto v = flat_views(v_);
    for (std::size_t k = 0; k < p.size(); ++k) {
      for (std::size_t i = 0; i < p[k].size(); ++i) {
        const double gi = static_cast<double>(g[k][i]);
        m[k][i] = static_cast<T>(beta1_ * m[k][i] + (1.0 - beta1_) * gi);
        v[k][i] = static_cast<T>(beta2_ * v[k][i] + (1.0 - beta2_) * gi * gi);
        const double mhat = m[k][i] / c1;
        const double vhat = v[k][i] / c2;
        p[k][i] -= static_cast<T>(lr * mhat / (std::sqrt(vhat) + eps_));
      }
    }
  }

  std::int64_t steps() const { return t_; }
  const FusionParams<T>& first_moment() const { return m_; }
  const FusionParams<T>& second_moment() const { return v_; }
  void restore(std::int64_t t, FusionParams<T> m, FusionParams<T> v) {
    t_ = t;
    m_ = std::move(m);
    v_ = std::move(v);
  }

 private:
  double beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8;
  std::int64_t t_ = 0;
  FusionParams<T> m_, v_;
};

// ---------------------------------------------------------------------------
// Checkpoints

struct Checkpoint {
  ModelConfig model;
  FusionParams<double> params;
  int epoch = 0;
  std::optional<TaskResult> val_metrics;
  std::string config_hash;
  KeyValues config;
};

namespace detail {

inline std::string attention_name(AttentionMode m) {
  switch (m) {
    case AttentionMode::learned: return "learned";
    case AttentionMode::identity: return "identity";
    case AttentionMode::none: return "none";
  }
  return "?";
}

inline AttentionMode parse_attention(const std::string& s) {
  if (s == "learned") return AttentionMode::learned;
  if (s == "identity") return AttentionMode::identity;
  if (s == "none") return AttentionMode::none;
  throw CheckpointError("unknown attention mode '" + s + "'");
}

inline nlohmann::json model_to_json(const ModelConfig& m) {
  return {{"image_channels", m.image_channels}, {"text_dim", m.text_dim},
          {"proj_dim", m.proj_dim},             {"hidden_dim", m.hidden_dim},
          {"num_classes", m.num_classes},       {"attention", attention_name(m.attention)},
          {"gate", m.gate == GateMode::sigmoid ? "sigmoid" : "constant_one"},
          {"seed", m.seed}};
}

inline ModelConfig model_from_json(const nlohmann::json& j) {
  ModelConfig m;
  m.image_channels = j.at("image_channels").get<int>();
  m.text_dim = j.at("text_dim").get<int>();
  m.proj_dim = j.at("proj_dim").get<int>();
  m.hidden_dim = j.at("hidden_dim").get<int>();
  m.num_classes = j.at("num_classes").get<int>();
  m.attention = parse_attention(j.at("attention").get<std::string>());
  m.gate = j.at("gate").get<std::string>() == "sigmoid" ? GateMode::sigmoid : GateMode::constant_one;
  m.seed = j.at("seed").get<std::uint64_t>();
  return m;
}

inline nlohmann::json tensors_to_json(const FusionParams<double>& p) {
  nlohmann::json t = nlohmann::json::object();
  p.visit([&](std::string_view name, const auto& m) {
    std::vector<double> data(m.data(), m.data() + m.size());
    t[std::string(name)] = {{"rows", m.rows()}, {"cols", m.cols()}, {"data", data}};
  });
  return t;
}

// Shapes must match the model's table exactly: same names, same dims.
inline FusionParams<double> tensors_from_json(const nlohmann::json& t, const ModelConfig& cfg) {
  FusionParams<double> p = FusionParams<double>::zeros_like(cfg);
  std::size_t seen = 0;
  p.visit([&](std::string_view name, auto& m) {
    const std::string key(name);
    if (!t.contains(key)) throw CheckpointError("checkpoint is missing tensor '" + key + "'");
    const auto& e = t.at(key);
    const auto rows = e.at("rows").get<Eigen::Index>();
    const auto cols = e.at("cols").get<Eigen::Index>();
    if (rows != m.rows() || cols != m.cols()) {
      throw CheckpointError("shape mismatch for '" + key + "': checkpoint " + std::to_string(rows) + "x" +
                            std::to_string(cols) + ", model " + std::to_string(m.rows()) + "x" +
                            std::to_string(m.cols()));
    }
    const auto data = e.at("data").get<std::vector<double>>();
    if (static_cast<Eigen::Index>(data.size()) != m.size()) {
      throw CheckpointError("tensor '" + key + "' has wrong element count");
    }
    std::copy(data.begin(), data.end(), m.data());
    ++seen;
  });
  if (seen != t.size()) throw CheckpointError("checkpoint has tensors the model does not define");
  return p;
}

}  // namespace detail

inline nlohmann::json checkpoint_to_json(const Checkpoint& c) {
  nlohmann::json j;
  j["format"] = "mmfuse-checkpoint/1";
  j["model"] = detail::model_to_json(c.model);
  j["tensors"] = detail::tensors_to_json(c.params);
  j["epoch"] = c.epoch;
  j["config_hash"] = c.config_hash;
  j["config"] = c.config;
  j["metrics"] = c.val_metrics ? to_json(*c.val_metrics) : nlohmann::json(nullptr);
  return j;
}

inline Checkpoint checkpoint_from_json(const nlohmann::json& j) {
  try {
    if (j.at("format").get<std::string>() != "mmfuse-checkpoint/1") {
      throw CheckpointError("unsupported checkpoint format");
    }
    Checkpoint c;
    c.model = detail::model_from_json(j.at("model"));
    c.params = detail::tensors_from_json(j.at("tensors"), c.model);
    c.epoch = j.at("epoch").get<int>();
    c.config_hash = j.at("config_hash").get<std::string>();
    c.config = j.at("config").get<KeyValues>();
    if (!j.at("metrics").is_null()) c.val_metrics = task_result_from_json(j.at("metrics"));
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("malformed checkpoint: ") + e.what());
  }
}

inline void write_cbor(const nlohmann::json& j, const std::filesystem::path& path) {
  const auto bytes = nlohmann::json::to_cbor(j);
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw CheckpointError("cannot write '" + path.string() + "'");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw CheckpointError("write failed for '" + path.string() + "'");
  }
  std::filesystem::rename(tmp, path);
}

inline nlohmann::json read_cbor(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint '" + path.string() + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return nlohmann::json::from_cbor(bytes);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError("'" + path.string() + "' is not a checkpoint: " + e.what());
  }
}

inline void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path) {
  write_cbor(checkpoint_to_json(c), path);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return checkpoint_from_json(read_cbor(path));
}

// ---------------------------------------------------------------------------
// Evaluation

struct Evaluation {
  MetricsReport report;
  std::vector<int> predictions;
  std::vector<int> labels;
};

template <typename T>
Evaluation evaluate_model(const FusionModel<T>& model, const EncodedSplit& data, TaskId task) {
  if (data.empty()) throw TrainError("cannot evaluate on an empty split");
  Evaluation ev;
  ev.predictions.reserve(data.size());
  for (const auto& item : data.items) {
    ev.predictions.push_back(model.predict(item.input).predicted());
    ev.labels.push_back(item.label);
  }
  ev.report = compute_mtms({compute_task_metrics(ev.predictions, ev.labels, task, model.config().num_classes)});
  return ev;
}

// Refuses to score data prepared under a different configuration.
inline Evaluation evaluate(const Checkpoint& ckpt, const EncodedSplit& data, const TrainConfig& data_cfg) {
  const std::string expected = config_hash(data_cfg.compatibility_keys());
  if (!ckpt.config_hash.empty() && ckpt.config_hash != expected) {
    throw TrainError("checkpoint config hash " + ckpt.config_hash + " does not match dataset config hash " +
                     expected + "; refusing to evaluate");
  }
  FusionModel<double> model(ckpt.model, ckpt.params);
  return evaluate_model(model, data, data_cfg.task);
}

// ---------------------------------------------------------------------------
// Training

struct EpochLog {
  int epoch = 0;
  double train_loss = 0.0;
  double train_accuracy = 0.0;
  double val_accuracy = 0.0;
  double val_macro_f1 = 0.0;
  double lr = 0.0;
};

inline nlohmann::json to_json(const EpochLog& e) {
  return {{"epoch", e.epoch},
          {"loss", e.train_loss},
          {"train_accuracy", e.train_accuracy},
          {"val_accuracy", e.val_accuracy},
          {"val_macro_f1", e.val_macro_f1},
          {"lr", e.lr}};
}

inline EpochLog epoch_log_from_json(const nlohmann::json& j) {
  return {j.at("epoch").get<int>(),          j.at("loss").get<double>(),
          j.at("train_accuracy").get<double>(), j.at("val_accuracy").get<double>(),
          j.at("val_macro_f1").get<double>(),   j.at("lr").get<double>()};
}

struct TrainOptions {
  std::optional<std::filesystem::path> out_dir;  // last.ckpt, best.ckpt, train_log.jsonl
  std::optional<std::filesystem::path> resume_from;
  int stop_after_epoch = 0;  // > 0: return early after this epoch (simulates interruption)
  std::ostream* log = nullptr;
};

struct TrainResult {
  Checkpoint best;
  Checkpoint last;
  std::vector<EpochLog> history;
};

namespace detail {

inline std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

struct ResumeState {
  Checkpoint current;
  Checkpoint best;
  std::int64_t adam_steps = 0;
  FusionParams<double> adam_m, adam_v;
  std::string rng;
  double lr = 0.0;
  double best_val = -1.0;
  int stale_epochs = 0;
  std::vector<EpochLog> history;
};

inline void save_resume_state(const ResumeState& s, const std::filesystem::path& path) {
  nlohmann::json j = checkpoint_to_json(s.current);
  nlohmann::json hist = nlohmann::json::array();
  for (const auto& e : s.history) hist.push_back(to_json(e));
  j["resume"] = {{"best", checkpoint_to_json(s.best)},
                 {"adam_steps", s.adam_steps},
                 {"adam_m", tensors_to_json(s.adam_m)},
                 {"adam_v", tensors_to_json(s.adam_v)},
                 {"rng", s.rng},
                 {"lr", s.lr},
                 {"best_val", s.best_val},
                 {"stale_epochs", s.stale_epochs},
                 {"history", hist}};
  write_cbor(j, path);
}

inline ResumeState load_resume_state(const std::filesystem::path& path) {
  const auto j = read_cbor(path);
  if (!j.contains("resume")) throw CheckpointError("'" + path.string() + "' has no resume state");
  ResumeState s;
  s.current = checkpoint_from_json(j);
  try {
    const auto& r = j.at("resume");
    s.best = checkpoint_from_json(r.at("best"));
    s.adam_steps = r.at("adam_steps").get<std::int64_t>();
    s.adam_m = tensors_from_json(r.at("adam_m"), s.current.model);
    s.adam_v = tensors_from_json(r.at("adam_v"), s.current.model);
    s.rng = r.at("rng").get<std::string>();
    s.lr = r.at("lr").get<double>();
    s.best_val = r.at("best_val").get<double>();
    s.stale_epochs = r.at("stale_epochs").get<int>();
    for (const auto& e : r.at("history")) s.history.push_back(epoch_log_from_json(e));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("malformed resume state: ") + e.what());
  }
  return s;
}

}  // namespace detail

inline TrainResult train(const TrainConfig& cfg, const EncodedSplit& train_data, const EncodedSplit& val_data,
                         FusionModel<double>& model, const TrainOptions& opt = {}) {
  if (train_data.empty()) throw TrainError("training split is empty");
  const EncodedSplit& select = val_data.empty() ? train_data : val_data;
  const KeyValues cfg_kv = cfg.to_key_values();
  const std::string hash = config_hash(cfg.compatibility_keys());
  const auto& mcfg = model.config();

  Adam<double> adam(mcfg, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
  std::mt19937_64 rng(cfg.seed ^ 0x5DEECE66DULL);
  double lr = cfg.base_lr;
  double best_val = -1.0;
  int stale = 0;
  int start_epoch = 1;
  TrainResult result;
  result.best = {mcfg, model.params(), 0, std::nullopt, hash, cfg_kv};

  if (opt.resume_from) {
    auto s = detail::load_resume_state(*opt.resume_from);
    if (s.current.config_hash != hash) throw TrainError("resume checkpoint was produced by a different config");
    model = FusionModel<double>(s.current.model, s.current.params);
    adam.restore(s.adam_steps, std::move(s.adam_m), std::move(s.adam_v));
    std::istringstream rs(s.rng);
    rs >> rng;
    lr = s.lr;
    best_val = s.best_val;
    stale = s.stale_epochs;
    result.best = std::move(s.best);
    result.history = std::move(s.history);
    start_epoch = s.current.epoch + 1;
  }

  std::ofstream log_file;
  if (opt.out_dir) {
    std::filesystem::create_directories(*opt.out_dir);
    log_file.open(*opt.out_dir / "train_log.jsonl", start_epoch == 1 ? std::ios::trunc : std::ios::app);
  }

  std::vector<std::size_t> order(train_data.size());
  for (int epoch = start_epoch; epoch <= cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    std::vector<LabeledInput<double>> batch;
    for (std::size_t b = 0; b < order.size(); b += static_cast<std::size_t>(cfg.batch_size)) {
      batch.clear();
      const std::size_t e = std::min(order.size(), b + static_cast<std::size_t>(cfg.batch_size));
      for (std::size_t i = b; i < e; ++i) batch.push_back(train_data.items[order[i]]);
      LossAndGrads<double> lg;
      try {
        lg = loss_and_grads<double>(batch, model);
      } catch (const ContractError& err) {
        if (opt.out_dir) {
          save_checkpoint({mcfg, model.params(), epoch, std::nullopt, hash, cfg_kv},
                          *opt.out_dir / "diagnostic.ckpt");
        }
        throw TrainError("epoch " + std::to_string(epoch) + ", batch at " + std::to_string(b) + ": " +
                         err.what() + (opt.out_dir ? " (snapshot written to diagnostic.ckpt)" : ""));
      }
      loss_sum += lg.loss * static_cast<double>(e - b);
      adam.step(model.params(), lg.grads, lr);
    }

    EpochLog log;
    log.epoch = epoch;
    log.train_loss = loss_sum / static_cast<double>(order.size());
    log.lr = lr;
    log.train_accuracy = evaluate_model(model, train_data, cfg.task).report.tasks[0].accuracy;
    const auto val = evaluate_model(model, select, cfg.task).report.tasks[0];
    log.val_accuracy = val.accuracy;
    log.val_macro_f1 = val.macro_f1;
    result.history.push_back(log);

    if (val.accuracy > best_val) {
      best_val = val.accuracy;
      stale = 0;
      result.best = {mcfg, model.params(), epoch, val, hash, cfg_kv};
      if (opt.out_dir) save_checkpoint(result.best, *opt.out_dir / "best.ckpt");
    } else {
      ++stale;
    }
    if (cfg.decay == DecayPolicy::plateau && stale > 0 && stale % cfg.decay_patience == 0) {
      lr /= cfg.decay_factor;
    } else if (cfg.decay == DecayPolicy::step && epoch % cfg.decay_step_epoch == 0) {
      lr /= cfg.decay_factor;
    }

    result.last = {mcfg, model.params(), epoch, val, hash, cfg_kv};
    if (opt.out_dir) {
      nlohmann::json line = to_json(log);
      line["ts"] = detail::utc_timestamp();
      log_file << line.dump() << '\n' << std::flush;
      std::ostringstream rs;
      rs << rng;
      detail::ResumeState s{result.last, result.best, adam.steps(), adam.first_moment(),
                            adam.second_moment(), rs.str(), lr, best_val, stale, result.history};
      detail::save_resume_state(s, *opt.out_dir / "last.ckpt");
    }
    if (opt.log) {
      *opt.log << "epoch " << epoch << " loss " << log.train_loss << " train_acc " << log.train_accuracy
               << " val_acc " << log.val_accuracy << " lr " << log.lr << '\n';
    }
    if (opt.stop_after_epoch > 0 && epoch >= opt.stop_after_epoch) break;
    if (cfg.early_stopping_patience > 0 && stale >= cfg.early_stopping_patience) break;
  }
  return result;
}

}  // namespace mmfuse
