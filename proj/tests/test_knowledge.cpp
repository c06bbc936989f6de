#include "mmfuse/knowledge.hpp"

#include "support/knowledge_fixture.hpp"
#include "support/temp_dir.hpp"

#include <gtest/gtest.h>

#include <stdexcept>
#include <thread>

using namespace mmfuse;
using namespace mmfuse::testing;

namespace {

std::vector<std::string> words(const std::vector<Entity>& es) {
  std::vector<std::string> out;
  for (const auto& e : es) out.push_back(e.word);
  return out;
}

class ConstantScorer final : public RelatednessScorer {
 public:
  explicit ConstantScorer(double v) : v_(v) {}
  Relatedness score(std::string_view s) override { return s.empty() ? Relatedness{} : Relatedness{v_, {}}; }

 private:
  double v_;
};

class ThrowingScorer final : public RelatednessScorer {
 public:
  Relatedness score(std::string_view s) override {
    if (s == "boom") throw std::runtime_error("scorer down");
    return {s == "flood" ? 0.5 : 0.0, {}};
  }
};

class ThrowingWiki final : public WikiClient {
 public:
  std::string fetch(std::string_view t) override {
    if (t == "A") throw std::runtime_error("offline");
    return "text for " + std::string(t);
  }
};

class CountingScorer final : public RelatednessScorer {
 public:
  int calls = 0;
  Relatedness score(std::string_view s) override {
    ++calls;
    return {s == "harvey" ? 0.7 : 0.0, std::string("Hurricane Harvey")};
  }
};

}  // namespace

TEST(ExtractEntities, LandfallSentenceWithCommittedCache) {
  auto cache = KnowledgeCache::load(knowledge_cache_path());
  CachedScorer scorer(cache);
  const auto es = extract_entities(kLandfallText, scorer, ExtractOptions{});
  EXPECT_EQ(words(es), (std::vector<std::string>{"Hurricane Harvey", "Texas", "Bayside"}));
  for (const auto& e : es) EXPECT_GT(e.score, 0.1);
}

TEST(ExtractEntities, SingleWordModeMissesMultiWordEntity) {
  auto cache = KnowledgeCache::load(knowledge_cache_path());
  CachedScorer scorer(cache);
  ExtractOptions opt;
  opt.max_ngram = 1;
  EXPECT_EQ(words(extract_entities(kLandfallText, scorer, opt)), (std::vector<std::string>{"Texas", "Bayside"}));
}

TEST(ExtractEntities, ConstantZeroScorerGivesNothing) {
  ConstantScorer zero(0.0);
  EXPECT_TRUE(extract_entities(kLandfallText, zero, ExtractOptions{}).empty());
}

TEST(ExtractEntities, ThresholdAndDedup) {
  MapScorer scorer({{"flood", 0.3}, {"the", 0.01}});
  ExtractOptions opt;
  opt.filter_stopwords = false;
  const auto es = extract_entities("the flood the flood", scorer, opt);
  ASSERT_EQ(es.size(), 1u);
  EXPECT_EQ(es[0].word, "flood");
  EXPECT_DOUBLE_EQ(es[0].score, 0.3);
}

TEST(ExtractEntities, ScoreEqualToThresholdIsExcluded) {
  MapScorer scorer({{"flood", 0.1}});
  EXPECT_TRUE(extract_entities("flood", scorer, ExtractOptions{}).empty());
}

TEST(ExtractEntities, ThresholdOutOfRange) {
  MapScorer scorer;
  ExtractOptions opt;
  opt.threshold = 1.0;
  EXPECT_THROW(extract_entities("x", scorer, opt), KnowledgeError);
  opt.threshold = -0.01;
  EXPECT_THROW(extract_entities("x", scorer, opt), KnowledgeError);
}

TEST(ExtractEntities, ScorerFailureSkipsSpanAndCounts) {
  ThrowingScorer scorer;
  KnowledgeStats stats;
  ExtractOptions opt;
  opt.max_ngram = 1;
  const auto es = extract_entities("boom flood", scorer, opt, &stats);
  EXPECT_EQ(words(es), std::vector<std::string>{"flood"});
  EXPECT_EQ(stats.scorer_failures, 1u);
}

TEST(ExtractEntities, StopwordsAreNotScored) {
  CountingScorer scorer;
  ExtractOptions opt;
  opt.max_ngram = 1;
  const auto es = extract_entities("the harvey of", scorer, opt);
  EXPECT_EQ(scorer.calls, 1);
  ASSERT_EQ(es.size(), 1u);
  EXPECT_EQ(es[0].title, "Hurricane Harvey");
}

TEST(TruncateAtWord, Rules) {
  EXPECT_EQ(truncate_at_word("alpha beta gamma", 100), "alpha beta gamma");
  EXPECT_EQ(truncate_at_word("alpha beta gamma", 12), "alpha beta");
  EXPECT_EQ(truncate_at_word("alpha beta gamma", 10), "alpha beta");
  EXPECT_EQ(truncate_at_word("lead para\nsecond para", 100), "lead para");
  EXPECT_EQ(truncate_at_word("abcdefghij", 4), "abcd");
  // Never split a multi-byte sequence: "é" is two bytes.
  EXPECT_EQ(truncate_at_word("\xC3\xA9\xC3\xA9\xC3\xA9", 3), "\xC3\xA9");
}

TEST(BuildWikiText, Examples) {
  MapWikiClient client({{"A", "alpha"}, {"B", "beta"}});
  EXPECT_EQ(build_wiki_text({}, client, 500), "");
  EXPECT_EQ(build_wiki_text({{"A", 0.5, "A"}, {"B", 0.5, "B"}}, client, 500), "alpha beta");
  EXPECT_EQ(build_wiki_text({{"Z", 0.5, "Z"}, {"B", 0.5, "B"}}, client, 500), "beta");
}

TEST(BuildWikiText, LongPageCappedOnWordBoundary) {
  std::string page;
  while (page.size() < 10000) page += "word" + std::to_string(page.size() % 97) + " ";
  MapWikiClient client({{"A", page}});
  const auto t = build_wiki_text({{"A", 0.5, "A"}}, client, 500);
  ASSERT_LE(t.size(), 500u);
  EXPECT_EQ(page.compare(0, t.size(), t), 0);
  EXPECT_EQ(page[t.size()], ' ');
  EXPECT_GT(t.size(), 480u);
}

TEST(BuildWikiText, FetchFailureIsEmptyAndCounted) {
  ThrowingWiki client;
  KnowledgeStats stats;
  EXPECT_EQ(build_wiki_text({{"A", 0.5, "A"}, {"B", 0.5, "B"}}, client, 500, &stats), "text for B");
  EXPECT_EQ(stats.fetch_failures, 1u);
}

TEST(Enrich, FusedSequence) {
  MapScorer scorer({{"fire", 0.4}});
  MapWikiClient client(std::map<std::string, std::string>{{"fire", "wildfire text"}});
  const auto e = enrich("fire in town", scorer, client);
  EXPECT_EQ(e.wiki_text, "wildfire text");
  EXPECT_EQ(e.fused, "fire in town [SEP] wildfire text");
}

TEST(Enrich, NoEntitiesMeansFusedIsOriginal) {
  MapScorer scorer;
  MapWikiClient client;
  const auto e = enrich("quiet day", scorer, client);
  EXPECT_TRUE(e.entities.empty());
  EXPECT_EQ(e.fused, "quiet day");
}

TEST(Enrich, LandfallSentenceFromCache) {
  auto cache = KnowledgeCache::load(knowledge_cache_path());
  CachedScorer scorer(cache);
  CachedWikiClient wiki(cache);
  const auto e = enrich(kLandfallText, scorer, wiki);
  EXPECT_EQ(e.fused.rfind(std::string(kLandfallText) + " [SEP] Hurricane Harvey was a Category 4", 0), 0u);
  // Lead paragraph only.
  EXPECT_EQ(e.wiki_text.find("meteorological history"), std::string::npos);
  EXPECT_NE(e.wiki_text.find("Bayside is a small town"), std::string::npos);
}

TEST(Enrich, DeterministicWithWarmCache) {
  auto cache = KnowledgeCache::load(knowledge_cache_path());
  CachedScorer scorer(cache);
  CachedWikiClient wiki(cache);
  for (const auto& t : random_fixture_texts(20, 9)) EXPECT_EQ(enrich(t, scorer, wiki), enrich(t, scorer, wiki));
}

TEST(KnowledgeCache, RoundTripIsLossless) {
  TempDir dir;
  auto cache = KnowledgeCache::load(knowledge_cache_path());
  cache.put_page("Zeta", "unicode \xE2\x80\x94 dash", 42);
  cache.put_score("zeta", 0.123456789012345);
  cache.save(dir / "c.json");
  const auto back = KnowledgeCache::load(dir / "c.json");
  EXPECT_TRUE(back == cache);
  EXPECT_EQ(back.page("zeta")->text, "unicode \xE2\x80\x94 dash");
  EXPECT_EQ(*back.score("ZETA"), 0.123456789012345);
}

TEST(KnowledgeCache, MissGoesUpstreamAndIsWrittenBack) {
  KnowledgeCache cache;
  CountingScorer up;
  CachedScorer scorer(cache, &up);
  EXPECT_DOUBLE_EQ(scorer.score("harvey").score, 0.7);
  EXPECT_DOUBLE_EQ(scorer.score("harvey").score, 0.7);
  EXPECT_EQ(up.calls, 1);
  MapWikiClient upstream_wiki(std::map<std::string, std::string>{{"T", "page"}});
  CachedWikiClient wiki(cache, &upstream_wiki);
  EXPECT_EQ(wiki.fetch("T"), "page");
  ASSERT_TRUE(cache.page("T"));
  EXPECT_GT(cache.page("T")->ts, 0);
}

TEST(KnowledgeCache, ConcurrentReadsAndWrites) {
  KnowledgeCache cache;
  std::vector<std::thread> threads;
  for (int t = 0; t < 4; ++t) {
    threads.emplace_back([&cache, t] {
      for (int i = 0; i < 500; ++i) {
        cache.put_score("w" + std::to_string(t * 1000 + i), 0.5);
        (void)cache.score("w" + std::to_string(i));
      }
    });
  }
  for (auto& th : threads) th.join();
  EXPECT_EQ(cache.score_count(), 2000u);
}

TEST(KnowledgeCache, MissingFileNamesPath) {
  try {
    KnowledgeCache::load("/nonexistent/cache.json");
    FAIL();
  } catch (const KnowledgeError& e) {
    EXPECT_NE(std::string(e.what()).find("/nonexistent/cache.json"), std::string::npos);
  }
}

TEST(Enrich, RandomizedInvariants) {
  auto cache = KnowledgeCache::load(knowledge_cache_path());
  CachedScorer scorer(cache);
  CachedWikiClient wiki(cache);
  const std::vector<double> thresholds = {0.0, 0.05, 0.1, 0.2, 0.3, 0.45, 0.6, 0.9};
  for (const auto& text : random_fixture_texts(100, 17)) {
    std::vector<Entity> prev;
    for (std::size_t k = 0; k < thresholds.size(); ++k) {
      EnrichOptions opt;
      opt.extract.threshold = thresholds[k];
      const auto e = enrich(text, scorer, wiki, opt);
      for (const auto& ent : e.entities) EXPECT_GT(ent.score, thresholds[k]);
      if (k > 0) EXPECT_TRUE(entity_subset(e.entities, prev)) << text;
      prev = e.entities;
      EXPECT_EQ(e.fused.rfind(text, 0), 0u);
      if (e.wiki_text.empty()) {
        EXPECT_EQ(e.fused, text);
      } else {
        EXPECT_EQ(e.fused, text + " [SEP] " + e.wiki_text);
        EXPECT_EQ(count_occurrences(e.fused, "[SEP]"), 1u);
      }
    }
  }
}
