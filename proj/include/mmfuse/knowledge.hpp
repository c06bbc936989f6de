#pragma once

// Entity2Wiki knowledge infusion.
//
// Candidate spans of the cleaned post are scored for entity relatedness;
// spans scoring strictly above the threshold become entities, their
// Wikipedia lead text is fetched and concatenated into the wiki text, and
// the encoder input is "T [SEP] T_wiki".
//
// All scoring and fetching goes through two small interfaces so the offline
// JSON cache, test fixtures and the live HTTP clients are interchangeable.

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cctype>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <shared_mutex>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_set>
#include <utility>
#include <vector>

namespace mmfuse {

inline constexpr std::string_view kSepToken = "[SEP]";

class KnowledgeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Relatedness {
  double score = 0.0;
  std::optional<std::string> title;
};

class RelatednessScorer {
 public:
  virtual ~RelatednessScorer() = default;
  // May throw; callers treat a throw as "skip this span".
  virtual Relatedness score(std::string_view span) = 0;
};

class WikiClient {
 public:
  virtual ~WikiClient() = default;
  // Unknown titles yield "". May throw on transport failure.
  virtual std::string fetch(std::string_view title) = 0;
};

struct Entity {
  std::string word;
  double score = 0.0;
  std::string title;

  friend bool operator==(const Entity&, const Entity&) = default;
};

struct EnrichedText {
  std::string original;
  std::vector<Entity> entities;
  std::string wiki_text;
  std::string fused;

  friend bool operator==(const EnrichedText&, const EnrichedText&) = default;
};

struct ExtractOptions {
  double threshold = 0.1;
  std::size_t max_ngram = 3;  // 1 reproduces strict per-word scoring
  bool filter_stopwords = true;
};

struct KnowledgeStats {
  std::size_t scorer_failures = 0;
  std::size_t fetch_failures = 0;
};

namespace detail {

inline std::string ascii_lower(std::string_view s) {
  std::string out(s);
  for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

inline const std::unordered_set<std::string>& stopwords() {
  static const std::unordered_set<std::string> words = {
      "a",     "an",    "the",   "and",   "or",    "but",   "if",    "of",    "in",
      "on",    "at",    "to",    "for",   "from",  "by",    "with",  "as",    "is",
      "are",   "was",   "were",  "be",    "been",  "being", "am",    "it",    "its",
      "this",  "that",  "these", "those", "i",     "me",    "my",    "we",    "our",
      "you",   "your",  "he",    "she",   "him",   "her",   "his",   "they",  "them",
      "their", "not",   "no",    "so",    "do",    "does",  "did",   "has",   "have",
      "had",   "will",  "would", "can",   "could", "should", "may",  "might", "must",
      "near",  "into",  "out",   "up",    "down",  "over",  "under", "about", "than",
      "then",  "there", "here",  "what",  "which", "who",   "whom",  "when",  "where",
      "why",   "how",   "all",   "any",   "some",  "more",  "most",  "just",  "very",
      "also",  "too",   "now",   "via",   "rt",    "amp"};
  return words;
}

// Strip leading/trailing ASCII punctuation from a whitespace token.
inline std::string_view strip_punct(std::string_view tok) {
  auto is_p = [](char c) { return std::ispunct(static_cast<unsigned char>(c)) != 0; };
  while (!tok.empty() && is_p(tok.front())) tok.remove_prefix(1);
  while (!tok.empty() && is_p(tok.back())) tok.remove_suffix(1);
  return tok;
}

inline std::vector<std::string> words_of(std::string_view text) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    std::size_t j = i;
    while (j < text.size() && !std::isspace(static_cast<unsigned char>(text[j]))) ++j;
    if (j > i) out.emplace_back(strip_punct(text.substr(i, j - i)));
    i = j;
  }
  return out;
}

inline bool is_stopword(const std::string& w) { return stopwords().count(ascii_lower(w)) != 0; }

inline bool is_utf8_continuation(char c) {
  return (static_cast<unsigned char>(c) & 0xC0u) == 0x80u;
}

}  // namespace detail

// Every candidate span of up to max_ngram words scoring strictly above the
// threshold, ordered by start position (longer spans first on ties), with
// repeats collapsed case-insensitively to their first occurrence.
inline std::vector<Entity> extract_entities(std::string_view text, RelatednessScorer& scorer,
                                            const ExtractOptions& opt,
                                            KnowledgeStats* stats = nullptr) {
  if (!(opt.threshold >= 0.0 && opt.threshold < 1.0)) {
    throw KnowledgeError("threshold must lie in [0, 1)");
  }
  const auto words = detail::words_of(text);
  const std::size_t max_n = std::max<std::size_t>(1, opt.max_ngram);
  std::vector<Entity> out;
  std::set<std::string> seen;
  for (std::size_t start = 0; start < words.size(); ++start) {
    for (std::size_t n = std::min(max_n, words.size() - start); n >= 1; --n) {
      const std::string& first = words[start];
      const std::string& last = words[start + n - 1];
      if (first.empty() || last.empty()) continue;
      if (opt.filter_stopwords && (detail::is_stopword(first) || detail::is_stopword(last))) {
        continue;
      }
      std::string span = first;
      for (std::size_t k = 1; k < n; ++k) span += " " + words[start + k];
      const std::string key = detail::ascii_lower(span);
      if (seen.count(key) != 0) continue;
      Relatedness rel;
      try {
        rel = scorer.score(span);
      } catch (const std::exception&) {
        if (stats) ++stats->scorer_failures;
        continue;
      }
      if (rel.score > opt.threshold) {
        seen.insert(key);
        out.push_back({span, rel.score, rel.title.value_or(span)});
      }
    }
  }
  return out;
}

// Lead paragraph of `text`, cut to at most max_chars bytes on a word
// boundary. A single word longer than the cap is hard-cut (never inside a
// UTF-8 sequence).
inline std::string truncate_at_word(std::string_view text, std::size_t max_chars) {
  if (auto nl = text.find('\n'); nl != std::string_view::npos) text = text.substr(0, nl);
  while (!text.empty() && std::isspace(static_cast<unsigned char>(text.back()))) text.remove_suffix(1);
  while (!text.empty() && std::isspace(static_cast<unsigned char>(text.front()))) text.remove_prefix(1);
  if (text.size() <= max_chars) return std::string(text);
  std::size_t cut = max_chars;
  if (!std::isspace(static_cast<unsigned char>(text[cut]))) {
    const auto ws = text.substr(0, cut).find_last_of(" \t\r");
    if (ws != std::string_view::npos) {
      cut = ws;
    } else {
      while (cut > 0 && detail::is_utf8_continuation(text[cut])) --cut;
    }
  }
  auto head = text.substr(0, cut);
  while (!head.empty() && std::isspace(static_cast<unsigned char>(head.back()))) head.remove_suffix(1);
  return std::string(head);
}

inline std::string build_wiki_text(const std::vector<Entity>& entities, WikiClient& client,
                                   std::size_t max_chars_per_entity,
                                   KnowledgeStats* stats = nullptr) {
  std::string out;
  for (const auto& e : entities) {
    std::string text;
    try {
      text = client.fetch(e.title);
    } catch (const std::exception&) {
      if (stats) ++stats->fetch_failures;
      continue;
    }
    text = truncate_at_word(text, max_chars_per_entity);
    if (text.empty()) continue;
    if (!out.empty()) out.push_back(' ');
    out += text;
  }
  return out;
}

inline std::string fuse_text(std::string_view original, std::string_view wiki_text) {
  if (wiki_text.empty()) return std::string(original);
  std::string s(original);
  s += " ";
  s += kSepToken;
  s += " ";
  s += wiki_text;
  return s;
}

struct EnrichOptions {
  ExtractOptions extract;
  std::size_t max_chars_per_entity = 500;
};

inline EnrichedText enrich(std::string_view text, RelatednessScorer& scorer, WikiClient& client,
                           const EnrichOptions& opt = {}, KnowledgeStats* stats = nullptr) {
  EnrichedText out;
  out.original = std::string(text);
  out.entities = extract_entities(text, scorer, opt.extract, stats);
  out.wiki_text = build_wiki_text(out.entities, client, opt.max_chars_per_entity, stats);
  out.fused = fuse_text(out.original, out.wiki_text);
  return out;
}

// Persistent title -> (text, ts) and span -> score maps. Reads are shared,
// writes exclusive.
class KnowledgeCache {
 public:
  struct Page {
    std::string text;
    std::int64_t ts = 0;
    friend bool operator==(const Page&, const Page&) = default;
  };

  KnowledgeCache() = default;

  static KnowledgeCache load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw KnowledgeError("cannot open knowledge cache '" + path.string() + "'");
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw KnowledgeError("malformed knowledge cache '" + path.string() + "': " + e.what());
    }
    return from_json(j);
  }

  static KnowledgeCache from_json(const nlohmann::json& j) {
    KnowledgeCache c;
    if (j.contains("entities")) {
      for (const auto& [title, v] : j.at("entities").items()) {
        c.pages_[title] = Page{v.value("text", std::string()), v.value("ts", std::int64_t{0})};
      }
    }
    if (j.contains("scores")) {
      for (const auto& [word, v] : j.at("scores").items()) {
        c.scores_[word] = v.get<double>();
      }
    }
    return c;
  }

  nlohmann::json to_json() const {
    std::shared_lock lock(mu_);
    nlohmann::json j;
    j["entities"] = nlohmann::json::object();
    j["scores"] = nlohmann::json::object();
    for (const auto& [title, p] : pages_) j["entities"][title] = {{"text", p.text}, {"ts", p.ts}};
    for (const auto& [w, s] : scores_) j["scores"][w] = s;
    return j;
  }

  void save(const std::filesystem::path& path) const {
    std::ofstream out(path);
    if (!out) throw KnowledgeError("cannot write knowledge cache '" + path.string() + "'");
    out << to_json().dump(2) << "\n";
  }

  std::optional<double> score(const std::string& word) const {
    std::shared_lock lock(mu_);
    if (auto it = scores_.find(detail::ascii_lower(word)); it != scores_.end()) return it->second;
    return std::nullopt;
  }

  std::optional<Page> page(const std::string& title) const {
    std::shared_lock lock(mu_);
    if (auto it = pages_.find(title); it != pages_.end()) return it->second;
    const std::string key = detail::ascii_lower(title);
    for (const auto& [t, p] : pages_) {
      if (detail::ascii_lower(t) == key) return p;
    }
    return std::nullopt;
  }

  void put_score(const std::string& word, double s) {
    std::unique_lock lock(mu_);
    scores_[detail::ascii_lower(word)] = s;
  }

  void put_page(const std::string& title, std::string text, std::int64_t ts) {
    std::unique_lock lock(mu_);
    pages_[title] = Page{std::move(text), ts};
  }

  std::size_t page_count() const {
    std::shared_lock lock(mu_);
    return pages_.size();
  }
  std::size_t score_count() const {
    std::shared_lock lock(mu_);
    return scores_.size();
  }

  KnowledgeCache(const KnowledgeCache& o) {
    std::shared_lock lock(o.mu_);
    pages_ = o.pages_;
    scores_ = o.scores_;
  }
  KnowledgeCache& operator=(const KnowledgeCache& o) {
    if (this != &o) {
      std::scoped_lock lock(mu_, o.mu_);
      pages_ = o.pages_;
      scores_ = o.scores_;
    }
    return *this;
  }

  friend bool operator==(const KnowledgeCache& a, const KnowledgeCache& b) {
    return a.pages_ == b.pages_ && a.scores_ == b.scores_;
  }

 private:
  mutable std::shared_mutex mu_;
  std::map<std::string, Page> pages_;
  std::map<std::string, double> scores_;
};

// Cache-first scorer. Misses go to the upstream scorer when one is attached
// (and are written back), otherwise score 0.
class CachedScorer final : public RelatednessScorer {
 public:
  explicit CachedScorer(KnowledgeCache& cache, RelatednessScorer* upstream = nullptr)
      : cache_(cache), upstream_(upstream) {}

  Relatedness score(std::string_view span) override {
    if (span.empty()) return {};
    const std::string key(span);
    if (auto s = cache_.score(key)) return {*s, std::nullopt};
    if (!upstream_) return {};
    Relatedness r = upstream_->score(span);
    cache_.put_score(key, r.score);
    return r;
  }

 private:
  KnowledgeCache& cache_;
  RelatednessScorer* upstream_;
};

class CachedWikiClient final : public WikiClient {
 public:
  explicit CachedWikiClient(KnowledgeCache& cache, WikiClient* upstream = nullptr)
      : cache_(cache), upstream_(upstream) {}

  std::string fetch(std::string_view title) override {
    const std::string key(title);
    if (auto p = cache_.page(key)) return p->text;
    if (!upstream_) return {};
    std::string text = upstream_->fetch(title);
    const auto now = std::chrono::duration_cast<std::chrono::seconds>(
                         std::chrono::system_clock::now().time_since_epoch())
                         .count();
    cache_.put_page(key, text, now);
    return text;
  }

 private:
  KnowledgeCache& cache_;
  WikiClient* upstream_;
};

// In-memory fixtures, mainly for tests.
class MapScorer final : public RelatednessScorer {
 public:
  MapScorer() = default;
  explicit MapScorer(std::map<std::string, double> scores) {
    for (auto& [k, v] : scores) scores_[detail::ascii_lower(k)] = v;
  }
  Relatedness score(std::string_view span) override {
    if (span.empty()) return {};
    if (auto it = scores_.find(detail::ascii_lower(span)); it != scores_.end()) return {it->second, {}};
    return {};
  }

 private:
  std::map<std::string, double> scores_;
};

class MapWikiClient final : public WikiClient {
 public:
  MapWikiClient() = default;
  explicit MapWikiClient(std::map<std::string, std::string> pages) : pages_(std::move(pages)) {}
  std::string fetch(std::string_view title) override {
    if (auto it = pages_.find(std::string(title)); it != pages_.end()) return it->second;
    return {};
  }

 private:
  std::map<std::string, std::string> pages_;
};

}  // namespace mmfuse
