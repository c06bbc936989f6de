#include "cli.hpp"

#include "image_io.hpp"
#ifdef MMFUSE_LIVE_KNOWLEDGE
#include "knowledge_live.hpp"
#endif

#include "mmfuse/config.hpp"
#include "mmfuse/explain.hpp"
#include "mmfuse/knowledge.hpp"
#include "mmfuse/manifest.hpp"
#include "mmfuse/metrics.hpp"
#include "mmfuse/pipeline.hpp"
#include "mmfuse/train.hpp"

#include "CLI11.hpp"

#include <algorithm>
#include <fstream>
#include <iostream>
#include <optional>

namespace mmfuse::cli {
namespace {

namespace fs = std::filesystem;

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Relative data paths in a config file are taken relative to that file.
TrainConfig load_config(const fs::path& path) {
  TrainConfig cfg = TrainConfig::from_key_values(read_key_values(path));
  const fs::path base = fs::absolute(path).parent_path();
  for (std::string* p : {&cfg.annotations, &cfg.images_root, &cfg.manifest, &cfg.knowledge_cache}) {
    if (!p->empty() && fs::path(*p).is_relative()) *p = (base / *p).lexically_normal().string();
  }
  cfg.validate();
  return cfg;
}

ImageLoader image_loader(const TrainConfig& cfg) {
  const fs::path root = cfg.images_root;
  return [root](const ManifestRecord& r) { return tools::read_image(root / r.sample.image_ref); };
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
  out << text;
  if (!out) throw std::runtime_error("write failed for '" + path.string() + "'");
}

void write_json(const fs::path& path, const nlohmann::json& j) { write_text(path, j.dump(2) + "\n"); }

std::string config_text(const TrainConfig& cfg) {
  std::string s;
  for (const auto& [k, v] : cfg.to_key_values()) s += k + " = " + v + "\n";
  return s;
}

// --------------------------------------------------------------------------

struct IngestArgs {
  std::string config, out = ".";
};

CommandResult do_ingest(const IngestArgs& a, std::ostream& out) {
  const TrainConfig cfg = load_config(a.config);
  if (cfg.annotations.empty()) throw ConfigError("ingest needs 'annotations' in the config");
  const Dataset ds = load_dataset(cfg.dataset_config());
  fs::create_directories(a.out);
  const fs::path manifest = fs::path(a.out) / "manifest.jsonl";
  write_manifest(manifest, to_records(ds, cfg.task));
  const auto n = ds.counts();
  out << to_string(cfg.task) << "/" << to_string(cfg.setting) << ": train " << n.train << ", val " << n.val
      << ", test " << n.test << " (" << ds.missing_images << " skipped for missing images)\n";
  CommandResult r;
  r.artifacts = {manifest};
  r.summary = {{"train", n.train}, {"val", n.val}, {"test", n.test}, {"missing_images", ds.missing_images}};
  return r;
}

struct EnrichArgs {
  std::string manifest, cache, out = ".";
  double threshold = 0.1;
  std::size_t max_chars = 500;
  std::size_t max_ngram = 3;
  bool single_word = false;
  bool live = false;
  double rate = 3.0;
};

CommandResult do_enrich(const EnrichArgs& a, std::ostream& out) {
  auto records = read_manifest(a.manifest);
  KnowledgeCache cache = a.cache.empty() ? KnowledgeCache() : KnowledgeCache::load(a.cache);
  RelatednessScorer* up_scorer = nullptr;
  WikiClient* up_wiki = nullptr;
#ifdef MMFUSE_LIVE_KNOWLEDGE
  std::optional<tools::RateLimiter> limiter;
  std::optional<tools::TagmeScorer> tagme;
  std::optional<tools::WikipediaClient> wikipedia;
  if (a.live) {
    limiter.emplace(a.rate);
    tagme.emplace(tools::TagmeScorer::token_from_env(), *limiter);
    wikipedia.emplace(*limiter);
    up_scorer = &*tagme;
    up_wiki = &*wikipedia;
  }
#else
  if (a.live) throw KnowledgeError("this build has no live knowledge clients");
#endif
  CachedScorer scorer(cache, up_scorer);
  CachedWikiClient wiki(cache, up_wiki);
  EnrichOptions opt;
  opt.extract.threshold = a.threshold;
  opt.extract.max_ngram = a.single_word ? 1 : a.max_ngram;
  opt.max_chars_per_entity = a.max_chars;
  KnowledgeStats stats;
  std::size_t with_entities = 0;
  for (auto& r : records) {
    r.enriched = enrich(r.sample.clean_text, scorer, wiki, opt, &stats);
    if (!r.enriched->entities.empty()) ++with_entities;
  }
  fs::create_directories(a.out);
  const fs::path path = fs::path(a.out) / "manifest.enriched.jsonl";
  write_manifest(path, records);
  CommandResult res;
  res.artifacts = {path};
  if (a.live && !a.cache.empty()) {
    cache.save(a.cache);
    res.artifacts.emplace_back(a.cache);
  }
  out << records.size() << " records, " << with_entities << " with entities, " << stats.scorer_failures
      << " scorer failures, " << stats.fetch_failures << " fetch failures\n";
  res.summary = {{"records", records.size()},
                 {"with_entities", with_entities},
                 {"scorer_failures", stats.scorer_failures},
                 {"fetch_failures", stats.fetch_failures}};
  return res;
}

struct TrainArgs {
  std::string config, out = "run";
  bool resume = false;
};

CommandResult do_train(const TrainArgs& a, std::ostream& out) {
  const TrainConfig cfg = load_config(a.config);
  const PreparedData data = prepare_data(cfg);
  if (data.missing_images > 0) out << data.missing_images << " samples skipped for missing images\n";
  const Encoders enc = Encoders::from_config(cfg);
  const auto loader = image_loader(cfg);
  const EncodedSplit train_set = encode_split(data.train, cfg, enc, loader);
  const EncodedSplit val_set = encode_split(data.val, cfg, enc, loader);
  if (train_set.truncated + val_set.truncated > 0) {
    out << (train_set.truncated + val_set.truncated) << " texts truncated to the encoder length\n";
  }
  FusionModel<double> model(cfg.model_config(enc.image_channels(), enc.text_dim()));
  const fs::path dir = a.out;
  fs::create_directories(dir);
  write_text(dir / "config.cfg", config_text(cfg));
  TrainOptions opt;
  opt.out_dir = dir;
  opt.log = &out;
  if (a.resume) opt.resume_from = dir / "last.ckpt";
  const TrainResult tr = train(cfg, train_set, val_set, model, opt);
  nlohmann::json metrics = tr.best.val_metrics ? to_json(*tr.best.val_metrics) : nlohmann::json(nullptr);
  write_json(dir / "val_metrics.json", metrics);
  out << "best epoch " << tr.best.epoch << ", val accuracy "
      << (tr.best.val_metrics ? percent(tr.best.val_metrics->accuracy) : std::string("-")) << "%\n";
  CommandResult r;
  r.artifacts = {dir / "best.ckpt", dir / "last.ckpt", dir / "train_log.jsonl", dir / "val_metrics.json",
                 dir / "config.cfg"};
  r.summary = {{"best_epoch", tr.best.epoch}, {"epochs_run", tr.history.size()}, {"val", metrics}};
  return r;
}

struct EvalArgs {
  std::string checkpoint, split = "test", config, out;
  bool dump_predictions = false;
};

TrainConfig config_for(const Checkpoint& ckpt, const std::string& config_path) {
  if (!config_path.empty()) return load_config(config_path);
  TrainConfig cfg = TrainConfig::from_key_values(ckpt.config);
  cfg.validate();
  return cfg;
}

CommandResult do_evaluate(const EvalArgs& a, std::ostream& out) {
  const auto split = parse_split(a.split);
  if (!split) throw UsageError("--split must be train, val or test");
  const Checkpoint ckpt = load_checkpoint(a.checkpoint);
  const TrainConfig cfg = config_for(ckpt, a.config);
  const PreparedData data = prepare_data(cfg);
  const Encoders enc = Encoders::from_config(cfg);
  const EncodedSplit set = encode_split(data.split(*split), cfg, enc, image_loader(cfg));
  const Evaluation ev = evaluate(ckpt, set, cfg);
  const fs::path dir = a.out.empty() ? fs::path(a.checkpoint).parent_path() : fs::path(a.out);
  if (!dir.empty()) fs::create_directories(dir);
  CommandResult r;
  const fs::path mpath = dir / ("metrics_" + to_string(*split) + ".json");
  write_json(mpath, to_json(ev.report));
  r.artifacts.push_back(mpath);
  if (a.dump_predictions) {
    const fs::path ppath = dir / ("predictions_" + to_string(*split) + ".jsonl");
    std::string lines;
    const auto task = TaskSpec::make(cfg.task);
    for (std::size_t i = 0; i < ev.predictions.size(); ++i) {
      nlohmann::json j = {{"sample_id", set.sample_ids[i]},
                          {"label", ev.labels[i]},
                          {"predicted", ev.predictions[i]},
                          {"predicted_name", task.class_names[static_cast<std::size_t>(ev.predictions[i])]}};
      lines += j.dump() + "\n";
    }
    write_text(ppath, lines);
    r.artifacts.push_back(ppath);
  }
  const auto& t = ev.report.tasks[0];
  out << to_string(cfg.task) << " " << to_string(*split) << ": accuracy " << percent(t.accuracy) << ", macro-F1 "
      << percent(t.macro_f1) << ", weighted-F1 " << percent(t.weighted_f1) << " (" << set.size() << " samples)\n";
  r.summary = to_json(ev.report);
  return r;
}

struct ExplainArgs {
  std::string checkpoint, sample, cls, out = ".", config;
};

CommandResult do_explain(const ExplainArgs& a, std::ostream& out) {
  const Checkpoint ckpt = load_checkpoint(a.checkpoint);
  const TrainConfig cfg = config_for(ckpt, a.config);
  const std::string expected = config_hash(cfg.compatibility_keys());
  if (!ckpt.config_hash.empty() && ckpt.config_hash != expected) {
    throw TrainError("checkpoint config hash " + ckpt.config_hash + " does not match config hash " + expected);
  }
  const auto task = TaskSpec::make(cfg.task);
  int y = -1;
  std::string class_name;
  if (auto idx = task.class_index(a.cls)) {
    y = *idx;
  } else if (!a.cls.empty() && std::all_of(a.cls.begin(), a.cls.end(), ::isdigit)) {
    y = std::stoi(a.cls);
  }
  if (y < 0 || y >= task.class_count()) {
    throw ContractError("unknown class '" + a.cls + "' for " + to_string(cfg.task));
  }
  class_name = task.class_names[static_cast<std::size_t>(y)];

  const PreparedData data = prepare_data(cfg);
  const auto all = data.all();
  const auto it = std::find_if(all.begin(), all.end(), [&](const auto& r) { return r.sample.sample_id == a.sample; });
  if (it == all.end()) throw DatasetError("sample '" + a.sample + "' not found");
  const Image image = tools::read_image(fs::path(cfg.images_root) / it->sample.image_ref);
  const Encoders enc = Encoders::from_config(cfg);
  const FusionInput<double> in = encode_pair(enc, image, encoder_text(*it, cfg.knowledge));
  const FusionModel<double> model(ckpt.model, ckpt.params);
  const auto map = grad_cam(FusionGradCam<double>(model), in, y);

  const fs::path dir = a.out;
  fs::create_directories(dir);
  const std::string stem = a.sample + "_" + class_name;
  const fs::path png = dir / (stem + ".png");
  const fs::path csv = dir / (stem + ".csv");
  tools::write_png(render_overlay(map, image), png);
  write_grid_csv(map.raw, csv);
  const auto pred = model.predict(in);
  out << a.sample << ": predicted " << task.class_names[static_cast<std::size_t>(pred.predicted())]
      << ", map for " << class_name << " written to " << png.string() << "\n";
  CommandResult r;
  r.artifacts = {png, csv};
  r.summary = {{"sample", a.sample}, {"class", class_name}, {"predicted", pred.predicted()},
               {"raw_max", map.raw.maxCoeff()}};
  return r;
}

struct ReportArgs {
  std::vector<std::string> metrics;
  std::string out = ".", method = "model";
};

CommandResult do_report(const ReportArgs& a, std::ostream& out) {
  std::vector<TaskResult> results;
  for (const auto& path : a.metrics) {
    std::ifstream in(path);
    if (!in) throw MetricsError("cannot open metrics file '" + path + "'");
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw MetricsError("'" + path + "' is not JSON: " + e.what());
    }
    for (auto& t : task_results_from_json(j)) results.push_back(std::move(t));
  }
  const MetricsReport rep = compute_mtms(std::move(results));
  const std::string table = format_table(rep, a.method);
  fs::create_directories(a.out);
  const fs::path jpath = fs::path(a.out) / "report.json";
  const fs::path tpath = fs::path(a.out) / "report.txt";
  write_json(jpath, to_json(rep));
  write_text(tpath, table);
  out << table;
  CommandResult r;
  r.artifacts = {jpath, tpath};
  r.summary = to_json(rep);
  return r;
}

}  // namespace

CommandResult run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Multimodal image-text classification with knowledge infusion and guided cross-attention"};
  app.name("mmfuse");
  app.require_subcommand(1);

  IngestArgs ingest;
  auto* c_ingest = app.add_subcommand("ingest", "Load annotations and write the split manifest");
  c_ingest->add_option("--config", ingest.config, "Run configuration (key = value)")->required();
  c_ingest->add_option("--out", ingest.out, "Output directory")->capture_default_str();

  EnrichArgs enr;
  auto* c_enrich = app.add_subcommand("enrich", "Attach entities, wiki text and fused text to a manifest");
  c_enrich->add_option("--manifest", enr.manifest, "Input manifest (JSON lines)")->required();
  c_enrich->add_option("--cache", enr.cache, "Knowledge cache JSON");
  c_enrich->add_option("--out", enr.out, "Output directory")->capture_default_str();
  c_enrich->add_option("--threshold", enr.threshold, "Relatedness threshold in [0, 1)")->capture_default_str();
  c_enrich->add_option("--max-chars", enr.max_chars, "Wiki characters kept per entity")->capture_default_str();
  c_enrich->add_option("--max-ngram", enr.max_ngram, "Longest candidate span in words")->capture_default_str();
  c_enrich->add_flag("--single-word", enr.single_word, "Score single words only");
  c_enrich->add_flag("--live", enr.live, "Query the entity linker and Wikipedia on cache misses (needs TAGME_TOKEN)");
  c_enrich->add_option("--rate", enr.rate, "Live request rate limit per second")->capture_default_str();

  TrainArgs tr;
  auto* c_train = app.add_subcommand("train", "Train a model and keep the best validation checkpoint");
  c_train->add_option("--config", tr.config, "Run configuration (key = value)")->required();
  c_train->add_option("--out", tr.out, "Output directory")->capture_default_str();
  c_train->add_flag("--resume", tr.resume, "Continue from <out>/last.ckpt");

  EvalArgs ev;
  auto* c_eval = app.add_subcommand("evaluate", "Score a checkpoint on one split");
  c_eval->add_option("--checkpoint", ev.checkpoint, "Checkpoint file")->required();
  c_eval->add_option("--split", ev.split, "train | val | test")->capture_default_str();
  c_eval->add_option("--config", ev.config, "Configuration (defaults to the one stored in the checkpoint)");
  c_eval->add_option("--out", ev.out, "Output directory (defaults to the checkpoint's directory)");
  c_eval->add_flag("--dump-predictions", ev.dump_predictions, "Write per-sample predictions");

  ExplainArgs ex;
  auto* c_explain = app.add_subcommand("explain", "Grad-CAM heatmap for one sample and class");
  c_explain->add_option("--checkpoint", ex.checkpoint, "Checkpoint file")->required();
  c_explain->add_option("--sample", ex.sample, "Sample id")->required();
  c_explain->add_option("--class", ex.cls, "Class name or index")->required();
  c_explain->add_option("--out", ex.out, "Output directory")->capture_default_str();
  c_explain->add_option("--config", ex.config, "Configuration (defaults to the one stored in the checkpoint)");

  ReportArgs rp;
  auto* c_report = app.add_subcommand("report", "Combine per-task metrics into a table with MTMS");
  c_report->add_option("--metrics", rp.metrics, "Metrics JSON (repeatable)")->required();
  c_report->add_option("--out", rp.out, "Output directory")->capture_default_str();
  c_report->add_option("--method", rp.method, "Row label")->capture_default_str();

  CommandResult result;
  try {
    std::vector<std::string> rev(args.rbegin(), args.rend());
    app.parse(rev);
  } catch (const CLI::Success& e) {
    result.exit_code = app.exit(e, out, err);
    return result;
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    result.exit_code = 2;
    return result;
  }

  try {
    if (c_ingest->parsed()) result = do_ingest(ingest, out);
    else if (c_enrich->parsed()) result = do_enrich(enr, out);
    else if (c_train->parsed()) result = do_train(tr, out);
    else if (c_eval->parsed()) result = do_evaluate(ev, out);
    else if (c_explain->parsed()) result = do_explain(ex, out);
    else if (c_report->parsed()) result = do_report(rp, out);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n";
    return {2, {}, {{"error", e.what()}}};
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return {1, {}, {{"error", e.what()}}};
  }
  result.exit_code = 0;
  return result;
}

}  // namespace mmfuse::cli
