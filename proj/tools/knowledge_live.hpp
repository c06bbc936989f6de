#pragma once

// Network-backed scorer and Wikipedia client. Both are meant to sit behind
// CachedScorer / CachedWikiClient so each span and title is requested once.

#ifndef CPPHTTPLIB_OPENSSL_SUPPORT
#define CPPHTTPLIB_OPENSSL_SUPPORT
#endif
#include "httplib.h"

#include "mmfuse/knowledge.hpp"

#include <nlohmann/json.hpp>

#include <chrono>
#include <cstdlib>
#include <mutex>
#include <string>
#include <thread>

namespace mmfuse::tools {

// Spaces requests at least 1/rate seconds apart across threads.
class RateLimiter {
 public:
  explicit RateLimiter(double per_second) : interval_(per_second > 0 ? 1.0 / per_second : 0.0) {}

  void wait() {
    std::unique_lock lock(mu_);
    const auto now = std::chrono::steady_clock::now();
    if (now < next_) std::this_thread::sleep_until(next_);
    next_ = std::max(now, next_) + std::chrono::duration_cast<std::chrono::steady_clock::duration>(
                                       std::chrono::duration<double>(interval_));
  }

 private:
  double interval_;
  std::mutex mu_;
  std::chrono::steady_clock::time_point next_{};
};

namespace detail {

inline nlohmann::json get_json(httplib::Client& cli, const std::string& path, const httplib::Params& params,
                               RateLimiter& limiter, const std::string& what) {
  limiter.wait();
  auto res = cli.Get(path, params, httplib::Headers{{"User-Agent", "mmfuse/1.0"}});
  if (!res) throw KnowledgeError(what + ": " + httplib::to_string(res.error()));
  if (res->status != 200) throw KnowledgeError(what + ": HTTP " + std::to_string(res->status));
  try {
    return nlohmann::json::parse(res->body);
  } catch (const nlohmann::json::exception& e) {
    throw KnowledgeError(what + ": bad JSON: " + e.what());
  }
}

}  // namespace detail

// Annotates the span with the TAGME service and keeps the best-scoring
// annotation whose mention covers the whole span.
class TagmeScorer final : public RelatednessScorer {
 public:
  TagmeScorer(std::string token, RateLimiter& limiter, std::string host = "https://tagme.d4science.org")
      : token_(std::move(token)), limiter_(limiter), cli_(host) {
    cli_.set_connection_timeout(10);
    cli_.set_read_timeout(20);
  }

  static std::string token_from_env() {
    const char* t = std::getenv("TAGME_TOKEN");
    if (!t || !*t) throw KnowledgeError("TAGME_TOKEN is not set");
    return t;
  }

  Relatedness score(std::string_view span) override {
    if (span.empty()) return {};
    const auto j = detail::get_json(cli_, "/tagme/tag",
                                    {{"lang", "en"}, {"gcube-token", token_}, {"text", std::string(span)}},
                                    limiter_, "tagme");
    Relatedness best;
    const std::string want = mmfuse::detail::ascii_lower(span);
    for (const auto& a : j.value("annotations", nlohmann::json::array())) {
      if (mmfuse::detail::ascii_lower(a.value("spot", std::string())) != want) continue;
      const double rho = a.value("rho", 0.0);
      if (rho > best.score) best = {rho, a.value("title", std::string(span))};
    }
    return best;
  }

 private:
  std::string token_;
  RateLimiter& limiter_;
  httplib::Client cli_;
};

// Plain-text introduction of an English Wikipedia article.
class WikipediaClient final : public WikiClient {
 public:
  explicit WikipediaClient(RateLimiter& limiter, std::string host = "https://en.wikipedia.org")
      : limiter_(limiter), cli_(host) {
    cli_.set_connection_timeout(10);
    cli_.set_read_timeout(20);
  }

  std::string fetch(std::string_view title) override {
    const auto j = detail::get_json(cli_, "/w/api.php",
                                    {{"action", "query"},
                                     {"prop", "extracts"},
                                     {"exintro", "1"},
                                     {"explaintext", "1"},
                                     {"redirects", "1"},
                                     {"format", "json"},
                                     {"titles", std::string(title)}},
                                    limiter_, "wikipedia");
    if (!j.contains("query") || !j["query"].contains("pages")) return {};
    for (const auto& [id, page] : j["query"]["pages"].items()) {
      if (page.contains("missing")) return {};
      return page.value("extract", std::string());
    }
    return {};
  }

 private:
  RateLimiter& limiter_;
  httplib::Client cli_;
};

}  // namespace mmfuse::tools
