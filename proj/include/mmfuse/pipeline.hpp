#pragma once

// From a run configuration to encoded model inputs: load (or read a
// manifest), enrich with knowledge when enabled, decode images through a
// caller-supplied loader, and run the frozen encoders.

#include "mmfuse/config.hpp"
#include "mmfuse/dataset.hpp"
#include "mmfuse/encoders.hpp"
#include "mmfuse/fusion.hpp"
#include "mmfuse/knowledge.hpp"
#include "mmfuse/manifest.hpp"

#include <filesystem>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace mmfuse {

struct PreparedData {
  std::vector<ManifestRecord> train, val, test;
  std::size_t missing_images = 0;
  KnowledgeStats knowledge_stats;

  const std::vector<ManifestRecord>& split(Split s) const {
    switch (s) {
      case Split::train: return train;
      case Split::val: return val;
      case Split::test: return test;
    }
    return train;
  }
  std::vector<ManifestRecord> all() const {
    std::vector<ManifestRecord> out(train);
    out.insert(out.end(), val.begin(), val.end());
    out.insert(out.end(), test.begin(), test.end());
    return out;
  }
};

// Encoder input text: the fused sequence when knowledge is on.
inline std::string encoder_text(const ManifestRecord& r, bool knowledge) {
  if (knowledge && r.enriched) return r.enriched->fused;
  return r.sample.clean_text;
}

inline PreparedData prepare_data(const TrainConfig& cfg, RelatednessScorer* scorer = nullptr,
                                 WikiClient* wiki = nullptr) {
  std::vector<ManifestRecord> records;
  PreparedData out;
  if (!cfg.manifest.empty()) {
    records = read_manifest(cfg.manifest);
    for (const auto& r : records) {
      if (r.task != cfg.task) {
        throw DatasetError("manifest task " + to_string(r.task) + " does not match config task " +
                           to_string(cfg.task));
      }
    }
  } else {
    const Dataset ds = load_dataset(cfg.dataset_config());
    out.missing_images = ds.missing_images;
    records = to_records(ds, cfg.task);
  }

  if (cfg.knowledge) {
    std::unique_ptr<KnowledgeCache> cache;
    std::unique_ptr<CachedScorer> cached_scorer;
    std::unique_ptr<CachedWikiClient> cached_wiki;
    const bool need = std::any_of(records.begin(), records.end(), [](const auto& r) { return !r.enriched; });
    if (need && (!scorer || !wiki)) {
      cache = std::make_unique<KnowledgeCache>(cfg.knowledge_cache.empty()
                                                   ? KnowledgeCache()
                                                   : KnowledgeCache::load(cfg.knowledge_cache));
      cached_scorer = std::make_unique<CachedScorer>(*cache);
      cached_wiki = std::make_unique<CachedWikiClient>(*cache);
      if (!scorer) scorer = cached_scorer.get();
      if (!wiki) wiki = cached_wiki.get();
    }
    const EnrichOptions opt = cfg.enrich_options();
    for (auto& r : records) {
      if (!r.enriched) r.enriched = enrich(r.sample.clean_text, *scorer, *wiki, opt, &out.knowledge_stats);
    }
  }

  for (auto& r : records) {
    switch (r.sample.split) {
      case Split::train: out.train.push_back(std::move(r)); break;
      case Split::val: out.val.push_back(std::move(r)); break;
      case Split::test: out.test.push_back(std::move(r)); break;
    }
  }
  return out;
}

using ImageLoader = std::function<Image(const ManifestRecord&)>;

struct EncodedSplit {
  std::vector<LabeledInput<double>> items;
  std::vector<std::string> sample_ids;
  std::size_t truncated = 0;

  std::size_t size() const { return items.size(); }
  bool empty() const { return items.empty(); }
};

struct Encoders {
  std::unique_ptr<ImageEncoder> image;
  std::unique_ptr<TextEncoder> text;

  // Toy text encoder honours text_max_length; registry entries are used as-is.
  static Encoders from_config(const TrainConfig& cfg) {
    Encoders e;
    e.image = image_encoders().create(cfg.image_encoder);
    if (cfg.text_encoder == "toy") {
      ToyTextEncoder::Options o;
      o.max_length = cfg.text_max_length;
      e.text = std::make_unique<ToyTextEncoder>(o);
    } else {
      e.text = text_encoders().create(cfg.text_encoder);
    }
    return e;
  }

  int image_channels() const { return image->spec().shape[0]; }
  int text_dim() const { return text->spec().shape[1]; }
};

inline FusionInput<double> encode_pair(const Encoders& enc, const Image& image, std::string_view text,
                                       std::size_t* truncated = nullptr) {
  const auto& ispec = enc.image->spec();
  const Image sized = ispec.input_width > 0 ? resize_bilinear(image, ispec.input_width, ispec.input_height)
                                            : image;
  FusionInput<double> in;
  in.image = encode_image(*enc.image, sized);
  in.text = encode_text(*enc.text, text, truncated).valid();
  return in;
}

inline EncodedSplit encode_split(const std::vector<ManifestRecord>& records, const TrainConfig& cfg,
                                 const Encoders& enc, const ImageLoader& load_image) {
  EncodedSplit out;
  out.items.reserve(records.size());
  for (const auto& r : records) {
    Image img;
    try {
      img = load_image(r);
    } catch (const std::exception& e) {
      throw DatasetError("sample " + r.sample.sample_id + ": " + e.what());
    }
    LabeledInput<double> item;
    item.input = encode_pair(enc, img, encoder_text(r, cfg.knowledge), &out.truncated);
    item.label = r.sample.label;
    out.items.push_back(std::move(item));
    out.sample_ids.push_back(r.sample.sample_id);
  }
  return out;
}

}  // namespace mmfuse
