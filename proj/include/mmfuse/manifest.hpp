#pragma once

// JSON-lines dataset manifests: one record per sample, keys sorted, so the
// same inputs always produce the same bytes. Enriched manifests add the
// entity list, wiki text and fused text.

#include "mmfuse/dataset.hpp"
#include "mmfuse/knowledge.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

namespace mmfuse {

struct ManifestRecord {
  TaskId task = TaskId::task1;
  Sample sample;
  std::optional<EnrichedText> enriched;
};

inline nlohmann::json to_json(const ManifestRecord& r) {
  const Sample& s = r.sample;
  auto opt = [](const std::optional<int>& v) -> nlohmann::json {
    return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
  };
  nlohmann::json j = {{"task", to_string(r.task)},
                      {"sample_id", s.sample_id},
                      {"event_name", s.event_name},
                      {"image_path", s.image_ref},
                      {"raw_text", s.raw_text},
                      {"clean_text", s.clean_text},
                      {"image_label", opt(s.image_label)},
                      {"text_label", opt(s.text_label)},
                      {"label", s.label},
                      {"split", to_string(s.split)}};
  if (r.enriched) {
    nlohmann::json ents = nlohmann::json::array();
    for (const auto& e : r.enriched->entities) {
      ents.push_back({{"word", e.word}, {"score", e.score}, {"title", e.title}});
    }
    j["entities"] = ents;
    j["wiki_text"] = r.enriched->wiki_text;
    j["fused_text"] = r.enriched->fused;
  }
  return j;
}

inline ManifestRecord manifest_record_from_json(const nlohmann::json& j) {
  ManifestRecord r;
  auto opt = [&](const char* key) -> std::optional<int> {
    if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
    return j.at(key).get<int>();
  };
  r.task = parse_task(j.at("task").get<std::string>());
  Sample& s = r.sample;
  s.sample_id = j.at("sample_id").get<std::string>();
  s.event_name = j.value("event_name", std::string());
  s.image_ref = j.at("image_path").get<std::string>();
  s.raw_text = j.value("raw_text", std::string());
  s.clean_text = j.at("clean_text").get<std::string>();
  s.image_label = opt("image_label");
  s.text_label = opt("text_label");
  s.label = j.at("label").get<int>();
  const auto split = parse_split(j.at("split").get<std::string>());
  if (!split) throw DatasetError("manifest: bad split for " + s.sample_id);
  s.split = *split;
  const int classes = TaskSpec::make(r.task).class_count();
  if (s.label < 0 || s.label >= classes) {
    throw DatasetError("manifest: label out of range for " + s.sample_id);
  }
  if (j.contains("fused_text")) {
    EnrichedText e;
    e.original = s.clean_text;
    for (const auto& ej : j.value("entities", nlohmann::json::array())) {
      e.entities.push_back({ej.at("word").get<std::string>(), ej.at("score").get<double>(),
                            ej.at("title").get<std::string>()});
    }
    e.wiki_text = j.value("wiki_text", std::string());
    e.fused = j.at("fused_text").get<std::string>();
    r.enriched = std::move(e);
  }
  return r;
}

inline std::string manifest_line(const ManifestRecord& r) { return to_json(r).dump(); }

inline void write_manifest(const std::filesystem::path& path, const std::vector<ManifestRecord>& records) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DatasetError("cannot write manifest '" + path.string() + "'");
  for (const auto& r : records) out << manifest_line(r) << '\n';
  if (!out) throw DatasetError("write failed for manifest '" + path.string() + "'");
}

inline std::vector<ManifestRecord> read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DatasetError("cannot open manifest '" + path.string() + "'");
  std::vector<ManifestRecord> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (detail::trim(line).empty()) continue;
    try {
      out.push_back(manifest_record_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw DatasetError(path.string() + ":" + std::to_string(n) + ": " + e.what());
    }
  }
  return out;
}

inline std::vector<ManifestRecord> to_records(const Dataset& ds, TaskId task) {
  std::vector<ManifestRecord> out;
  for (const auto* split : {&ds.train, &ds.val, &ds.test}) {
    for (const auto& s : *split) out.push_back({task, s, std::nullopt});
  }
  return out;
}

}  // namespace mmfuse
