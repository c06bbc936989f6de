#pragma once

// Annotation ingest: task definitions, tweet text cleaning, and the
// Setting A / Setting B split protocol over CrisisMMD-style TSV files.

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace mmfuse {

class DatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class TaskId { task1, task2, task3 };
enum class Setting { A, B };
enum class Split { train, val, test };
enum class LabelPolicy { text_label, image_label };

inline std::string to_string(TaskId t) {
  switch (t) {
    case TaskId::task1: return "task1";
    case TaskId::task2: return "task2";
    case TaskId::task3: return "task3";
  }
  return "?";
}
inline std::string to_string(Setting s) { return s == Setting::A ? "A" : "B"; }
inline std::string to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}
inline std::string to_string(LabelPolicy p) {
  return p == LabelPolicy::text_label ? "text_label" : "image_label";
}

namespace detail {

inline std::string lower(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return out;
}

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

// Lowercase, spaces and hyphens folded to underscores.
inline std::string normalize_label(std::string_view s) {
  std::string out = lower(trim(s));
  for (char& c : out) {
    if (c == ' ' || c == '-') c = '_';
  }
  return out;
}

inline std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> cols;
  std::string cur;
  for (char c : line) {
    if (c == '\t') {
      cols.push_back(std::move(cur));
      cur.clear();
    } else if (c != '\r' && c != '\n') {
      cur.push_back(c);
    }
  }
  cols.push_back(std::move(cur));
  return cols;
}

}  // namespace detail

struct TaskSpec {
  TaskId id = TaskId::task1;
  std::vector<std::string> class_names;
  // Extra spellings accepted in annotation files, keyed by normalized form.
  std::map<std::string, int> aliases;

  int class_count() const { return static_cast<int>(class_names.size()); }

  std::optional<int> class_index(std::string_view label) const {
    const std::string key = detail::normalize_label(label);
    for (int i = 0; i < class_count(); ++i) {
      if (detail::normalize_label(class_names[static_cast<std::size_t>(i)]) == key) return i;
    }
    if (auto it = aliases.find(key); it != aliases.end()) return it->second;
    return std::nullopt;
  }

  static TaskSpec make(TaskId id) {
    TaskSpec t;
    t.id = id;
    switch (id) {
      case TaskId::task1:
        t.class_names = {"informative", "non-informative"};
        t.aliases = {{"not_informative", 1}};
        break;
      case TaskId::task2:
        t.class_names = {"infrastructure_and_utility_damage", "vehicle_damage",
                         "rescue_volunteering_or_donation_effort", "affected_individuals",
                         "other_relevant_information"};
        t.aliases = {{"injured_or_dead_people", 3}, {"missing_or_found_people", 3}};
        break;
      case TaskId::task3:
        t.class_names = {"severe_damage", "mild_damage", "little_or_no_damage"};
        break;
    }
    return t;
  }
};

inline TaskId parse_task(std::string_view s) {
  const std::string k = detail::lower(s);
  if (k == "task1" || k == "1") return TaskId::task1;
  if (k == "task2" || k == "2") return TaskId::task2;
  if (k == "task3" || k == "3") return TaskId::task3;
  throw DatasetError("unknown task '" + std::string(s) + "' (expected task1|task2|task3)");
}

inline Setting parse_setting(std::string_view s) {
  const std::string k = detail::lower(s);
  if (k == "a") return Setting::A;
  if (k == "b") return Setting::B;
  throw DatasetError("unknown setting '" + std::string(s) + "' (expected A|B)");
}

inline LabelPolicy parse_label_policy(std::string_view s) {
  if (s == "text_label") return LabelPolicy::text_label;
  if (s == "image_label") return LabelPolicy::image_label;
  throw DatasetError("unknown label policy '" + std::string(s) + "'");
}

inline std::optional<Split> parse_split(std::string_view s) {
  const std::string k = detail::lower(detail::trim(s));
  if (k == "train") return Split::train;
  if (k == "val" || k == "dev" || k == "valid" || k == "validation") return Split::val;
  if (k == "test") return Split::test;
  return std::nullopt;
}

struct Sample {
  std::string sample_id;
  std::string image_ref;
  std::string raw_text;
  std::string clean_text;
  std::optional<int> image_label;
  std::optional<int> text_label;
  int label = 0;
  std::string event_name;
  Split split = Split::train;
};

// Header names of the annotation columns. The split column may be absent
// from the file, in which case splits are assigned by stratified shuffle.
struct ColumnMap {
  std::string sample_id = "sample_id";
  std::string event_name = "event_name";
  std::string image_path = "image_path";
  std::string text = "text";
  std::string image_label = "image_label";
  std::string text_label = "text_label";
  std::string split = "split";
};

struct DatasetConfig {
  Setting setting = Setting::A;
  TaskSpec task = TaskSpec::make(TaskId::task1);
  std::filesystem::path annotations_path;
  std::filesystem::path images_root;
  LabelPolicy label_policy_for_B = LabelPolicy::text_label;
  ColumnMap columns;
  bool require_images = true;
  std::uint64_t split_seed = 0;
};

struct SplitCounts {
  std::size_t train = 0, val = 0, test = 0;
  std::size_t total() const { return train + val + test; }
};

struct Dataset {
  std::vector<Sample> train, val, test;
  std::size_t missing_images = 0;

  const std::vector<Sample>& split(Split s) const {
    switch (s) {
      case Split::train: return train;
      case Split::val: return val;
      case Split::test: return test;
    }
    return train;
  }
  SplitCounts counts() const { return {train.size(), val.size(), test.size()}; }
};

namespace detail {
inline bool is_url_token(std::string_view tok) {
  const std::string k = lower(tok);
  return k.rfind("http", 0) == 0 || k.rfind("www.", 0) == 0;
}
}  // namespace detail

// Removes '@' and '#' characters (the word is kept), drops URL tokens and
// collapses whitespace. Idempotent.
inline std::string clean_text(std::string_view raw) {
  std::string out;
  std::string tok;
  auto flush = [&] {
    if (tok.empty()) return;
    std::string stripped;
    stripped.reserve(tok.size());
    for (char c : tok) {
      if (c != '@' && c != '#') stripped.push_back(c);
    }
    tok.clear();
    if (stripped.empty() || detail::is_url_token(stripped)) return;
    if (!out.empty()) out.push_back(' ');
    out += stripped;
  };
  for (char c : raw) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      flush();
    } else {
      tok.push_back(c);
    }
  }
  flush();
  return out;
}

namespace detail {

struct Row {
  std::size_t line = 0;
  Sample sample;
  std::optional<Split> split;
};

inline std::size_t column_index(const std::vector<std::string>& header, const std::string& name,
                                bool required, const std::filesystem::path& path) {
  for (std::size_t i = 0; i < header.size(); ++i) {
    if (trim(header[i]) == name) return i;
  }
  if (required) {
    throw DatasetError(path.string() + ": missing column '" + name + "'");
  }
  return static_cast<std::size_t>(-1);
}

inline std::optional<int> parse_label_cell(const std::string& cell, const TaskSpec& task,
                                           std::size_t line, const std::string& sample_id,
                                           const char* which) {
  const std::string v = trim(cell);
  if (v.empty()) return std::nullopt;
  if (auto idx = task.class_index(v)) return idx;
  throw DatasetError("row " + std::to_string(line) + " (" + sample_id + "): unknown " + which +
                     " '" + v + "' for " + to_string(task.id));
}

// Stratified 75 / 12.5 / 12.5 assignment of rows grouped by label.
inline void assign_stratified(std::vector<Row*>& rows, int class_count, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  for (int c = 0; c < class_count; ++c) {
    std::vector<Row*> group;
    for (Row* r : rows) {
      if (r->sample.label == c) group.push_back(r);
    }
    std::shuffle(group.begin(), group.end(), rng);
    const auto n = static_cast<double>(group.size());
    const auto n_train = static_cast<std::size_t>(std::llround(n * 0.75));
    const auto n_val = static_cast<std::size_t>(std::llround(n * 0.125));
    for (std::size_t i = 0; i < group.size(); ++i) {
      group[i]->split = i < n_train ? Split::train
                        : i < n_train + n_val ? Split::val
                                              : Split::test;
    }
  }
}

}  // namespace detail

inline Dataset load_dataset(const DatasetConfig& cfg) {
  if (cfg.setting == Setting::B && cfg.task.id == TaskId::task3) {
    throw DatasetError("Setting B is defined only for task1 and task2");
  }
  std::ifstream in(cfg.annotations_path);
  if (!in) {
    throw DatasetError("cannot open annotation file '" + cfg.annotations_path.string() + "'");
  }

  std::string line;
  if (!std::getline(in, line)) {
    throw DatasetError(cfg.annotations_path.string() + ": empty annotation file");
  }
  const auto header = detail::split_tabs(line);
  const auto& cm = cfg.columns;
  const auto& path = cfg.annotations_path;
  const std::size_t c_id = detail::column_index(header, cm.sample_id, true, path);
  const std::size_t c_event = detail::column_index(header, cm.event_name, true, path);
  const std::size_t c_image = detail::column_index(header, cm.image_path, true, path);
  const std::size_t c_text = detail::column_index(header, cm.text, true, path);
  const std::size_t c_ilab = detail::column_index(header, cm.image_label, true, path);
  const std::size_t c_tlab = detail::column_index(header, cm.text_label, true, path);
  const std::size_t c_split = detail::column_index(header, cm.split, false, path);
  const bool has_split = c_split != static_cast<std::size_t>(-1);
  const std::size_t needed =
      1 + std::max({c_id, c_event, c_image, c_text, c_ilab, c_tlab, has_split ? c_split : 0});

  Dataset ds;
  std::vector<detail::Row> rows;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (detail::trim(line).empty()) continue;
    auto cols = detail::split_tabs(line);
    if (cols.size() < needed) {
      throw DatasetError("row " + std::to_string(line_no) + ": expected at least " +
                         std::to_string(needed) + " columns, got " + std::to_string(cols.size()));
    }
    detail::Row row;
    row.line = line_no;
    Sample& s = row.sample;
    s.sample_id = detail::trim(cols[c_id]);
    s.event_name = detail::trim(cols[c_event]);
    s.image_ref = detail::trim(cols[c_image]);
    s.raw_text = cols[c_text];
    s.clean_text = clean_text(s.raw_text);
    s.image_label = detail::parse_label_cell(cols[c_ilab], cfg.task, line_no, s.sample_id, "image label");
    s.text_label = detail::parse_label_cell(cols[c_tlab], cfg.task, line_no, s.sample_id, "text label");
    if (has_split) {
      row.split = parse_split(cols[c_split]);
      if (!row.split) {
        throw DatasetError("row " + std::to_string(line_no) + " (" + s.sample_id +
                           "): unknown split '" + detail::trim(cols[c_split]) + "'");
      }
    }
    rows.push_back(std::move(row));
  }

  // Resolve labels. Agreeing pairs are eligible everywhere; disagreeing (or
  // half-labelled) pairs only enter Setting B's training split.
  std::vector<detail::Row*> agreeing;
  std::vector<detail::Row*> b_only;
  for (auto& r : rows) {
    Sample& s = r.sample;
    if (s.image_label && s.text_label && *s.image_label == *s.text_label) {
      s.label = *s.text_label;
      agreeing.push_back(&r);
      continue;
    }
    if (cfg.setting != Setting::B) continue;
    const auto& primary = cfg.label_policy_for_B == LabelPolicy::text_label ? s.text_label : s.image_label;
    const auto& fallback = cfg.label_policy_for_B == LabelPolicy::text_label ? s.image_label : s.text_label;
    if (primary) {
      s.label = *primary;
    } else if (fallback) {
      s.label = *fallback;
    } else {
      continue;
    }
    b_only.push_back(&r);
  }

  if (!has_split) {
    detail::assign_stratified(agreeing, cfg.task.class_count(), cfg.split_seed);
    for (auto* r : b_only) r->split = Split::train;
  }

  auto emit = [&](detail::Row* r, bool train_only) {
    Sample& s = r->sample;
    s.split = *r->split;
    if (train_only && s.split != Split::train) return;
    if (cfg.require_images && !std::filesystem::exists(cfg.images_root / s.image_ref)) {
      ++ds.missing_images;
      return;
    }
    switch (s.split) {
      case Split::train: ds.train.push_back(s); break;
      case Split::val: ds.val.push_back(s); break;
      case Split::test: ds.test.push_back(s); break;
    }
  };
  // Keep file order within each split.
  std::vector<std::pair<detail::Row*, bool>> ordered;
  for (auto* r : agreeing) ordered.emplace_back(r, false);
  for (auto* r : b_only) ordered.emplace_back(r, true);
  std::sort(ordered.begin(), ordered.end(),
            [](const auto& a, const auto& b) { return a.first->line < b.first->line; });
  for (auto& [r, train_only] : ordered) emit(r, train_only);
  return ds;
}

}  // namespace mmfuse
