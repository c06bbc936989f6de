#pragma once

// Per-task accuracy / macro-F1 / weighted-F1 and Multi-task Model Strength:
// the class-count weighted mean of task accuracies.

#include "mmfuse/dataset.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <set>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace mmfuse {

class MetricsError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TaskResult {
  TaskId task = TaskId::task1;
  int class_count = 0;
  double accuracy = 0.0;
  double macro_f1 = 0.0;
  double weighted_f1 = 0.0;
  // confusion[true][predicted]; empty when the result was read from a
  // summary rather than computed.
  std::vector<std::vector<std::int64_t>> confusion;
  std::vector<double> per_class_f1;
};

struct MetricsReport {
  std::vector<TaskResult> tasks;
  std::vector<double> weights;
  double mtms = 0.0;
};

// F1 of a class with no support or no predictions is 0.
inline TaskResult compute_task_metrics(std::span<const int> predictions, std::span<const int> labels,
                                       TaskId task, int class_count) {
  if (predictions.size() != labels.size()) {
    throw MetricsError("prediction/label length mismatch: " + std::to_string(predictions.size()) +
                       " vs " + std::to_string(labels.size()));
  }
  if (labels.empty()) throw MetricsError("no predictions to score");
  if (class_count < 1) throw MetricsError("class count must be positive");
  const auto C = static_cast<std::size_t>(class_count);
  TaskResult r;
  r.task = task;
  r.class_count = class_count;
  r.confusion.assign(C, std::vector<std::int64_t>(C, 0));
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int y = labels[i], p = predictions[i];
    if (y < 0 || y >= class_count || p < 0 || p >= class_count) {
      throw MetricsError("class index out of range at position " + std::to_string(i));
    }
    ++r.confusion[static_cast<std::size_t>(y)][static_cast<std::size_t>(p)];
  }
  std::int64_t correct = 0, total = 0;
  std::vector<std::int64_t> support(C, 0), predicted(C, 0);
  for (std::size_t a = 0; a < C; ++a) {
    for (std::size_t b = 0; b < C; ++b) {
      support[a] += r.confusion[a][b];
      predicted[b] += r.confusion[a][b];
      total += r.confusion[a][b];
    }
    correct += r.confusion[a][a];
  }
  r.accuracy = static_cast<double>(correct) / static_cast<double>(total);
  r.per_class_f1.assign(C, 0.0);
  double macro = 0.0, weighted = 0.0;
  for (std::size_t k = 0; k < C; ++k) {
    const auto tp = static_cast<double>(r.confusion[k][k]);
    const double denom = static_cast<double>(support[k] + predicted[k]);
    const double f1 = (support[k] == 0 || predicted[k] == 0) ? 0.0 : 2.0 * tp / denom;
    r.per_class_f1[k] = f1;
    macro += f1;
    weighted += f1 * static_cast<double>(support[k]);
  }
  r.macro_f1 = macro / static_cast<double>(C);
  r.weighted_f1 = weighted / static_cast<double>(total);
  return r;
}

inline TaskResult compute_task_metrics(std::span<const int> predictions, std::span<const int> labels,
                                       const TaskSpec& task) {
  return compute_task_metrics(predictions, labels, task.id, task.class_count());
}

inline MetricsReport compute_mtms(std::vector<TaskResult> results) {
  if (results.empty()) throw MetricsError("MTMS needs at least one task result");
  std::set<TaskId> ids;
  double total_classes = 0.0;
  for (const auto& r : results) {
    if (!ids.insert(r.task).second) throw MetricsError("duplicate task " + to_string(r.task));
    if (r.class_count < 1) throw MetricsError("class count must be positive");
    total_classes += r.class_count;
  }
  MetricsReport rep;
  rep.tasks = std::move(results);
  for (const auto& r : rep.tasks) {
    const double beta = r.class_count / total_classes;
    rep.weights.push_back(beta);
    rep.mtms += beta * r.accuracy;
  }
  return rep;
}

// Percent to one decimal.
inline std::string percent(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.1f", v * 100.0);
  return buf;
}

inline nlohmann::json to_json(const TaskResult& r) {
  nlohmann::json j = {{"task", to_string(r.task)},
                      {"class_count", r.class_count},
                      {"accuracy", r.accuracy},
                      {"macro_f1", r.macro_f1},
                      {"weighted_f1", r.weighted_f1}};
  if (!r.confusion.empty()) {
    j["confusion"] = r.confusion;
    j["per_class_f1"] = r.per_class_f1;
  }
  return j;
}

inline nlohmann::json to_json(const MetricsReport& rep) {
  nlohmann::json tasks = nlohmann::json::array();
  for (const auto& t : rep.tasks) tasks.push_back(to_json(t));
  return {{"tasks", tasks}, {"weights", rep.weights}, {"mtms", rep.mtms}};
}

inline TaskResult task_result_from_json(const nlohmann::json& j) {
  TaskResult r;
  try {
    r.task = parse_task(j.at("task").get<std::string>());
    r.class_count = j.contains("class_count") ? j.at("class_count").get<int>()
                                              : TaskSpec::make(r.task).class_count();
    r.accuracy = j.at("accuracy").get<double>();
    r.macro_f1 = j.value("macro_f1", 0.0);
    r.weighted_f1 = j.value("weighted_f1", 0.0);
    if (j.contains("confusion")) r.confusion = j.at("confusion").get<decltype(r.confusion)>();
    if (j.contains("per_class_f1")) r.per_class_f1 = j.at("per_class_f1").get<std::vector<double>>();
  } catch (const nlohmann::json::exception& e) {
    throw MetricsError(std::string("malformed task result: ") + e.what());
  } catch (const DatasetError& e) {
    throw MetricsError(e.what());
  }
  if (r.accuracy < 0.0 || r.accuracy > 1.0) throw MetricsError("accuracy outside [0, 1]");
  return r;
}

// Accepts either a report ({"tasks": [...]}) or a single task result.
inline std::vector<TaskResult> task_results_from_json(const nlohmann::json& j) {
  std::vector<TaskResult> out;
  if (j.contains("tasks")) {
    for (const auto& t : j.at("tasks")) out.push_back(task_result_from_json(t));
  } else {
    out.push_back(task_result_from_json(j));
  }
  return out;
}

// Table with Acc / M-F1 / W-F1 per task and the MTMS column, in percent.
inline std::string format_table(const MetricsReport& rep, const std::string& method = "model") {
  std::vector<const TaskResult*> by_task(3, nullptr);
  for (const auto& t : rep.tasks) by_task[static_cast<std::size_t>(t.task)] = &t;
  const int mw = std::max<int>(6, static_cast<int>(method.size()));
  char buf[128];
  std::string out;
  std::snprintf(buf, sizeof buf, "%-*s", mw, "");
  out += buf;
  for (int t = 1; t <= 3; ++t) {
    std::snprintf(buf, sizeof buf, " | %-17s", ("Task " + std::to_string(t)).c_str());
    out += buf;
  }
  out += " |\n";
  std::snprintf(buf, sizeof buf, "%-*s", mw, "Method");
  out += buf;
  for (int t = 0; t < 3; ++t) out += " |   Acc  M-F1  W-F1";
  out += " |  MTMS\n";
  std::snprintf(buf, sizeof buf, "%-*s", mw, method.c_str());
  out += buf;
  for (const TaskResult* r : by_task) {
    if (r) {
      std::snprintf(buf, sizeof buf, " | %5s %5s %5s", percent(r->accuracy).c_str(),
                    percent(r->macro_f1).c_str(), percent(r->weighted_f1).c_str());
    } else {
      std::snprintf(buf, sizeof buf, " | %5s %5s %5s", "-", "-", "-");
    }
    out += buf;
  }
  std::snprintf(buf, sizeof buf, " | %5s\n", percent(rep.mtms).c_str());
  out += buf;
  return out;
}

}  // namespace mmfuse
