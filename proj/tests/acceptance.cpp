// Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any FAIL.

#include "mmfuse/explain.hpp"
#include "mmfuse/knowledge.hpp"
#include "mmfuse/metrics.hpp"
#include "mmfuse/train.hpp"

#include "support/annotation_fixture.hpp"
#include "support/knowledge_fixture.hpp"
#include "support/oracles.hpp"
#include "support/toy_training.hpp"

#include <chrono>
#include <cstdio>
#include <functional>
#include <set>
#include <sstream>

using namespace mmfuse;
using namespace mmfuse::testing;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

Outcome mtms_rows() {
  auto row = [](std::vector<double> accs) {
    std::vector<TaskResult> rs;
    for (std::size_t i = 0; i < accs.size(); ++i) {
      TaskResult r;
      r.task = static_cast<TaskId>(i);
      r.class_count = TaskSpec::make(r.task).class_count();
      r.accuracy = accs[i];
      rs.push_back(r);
    }
    return compute_mtms(rs).mtms * 100.0;
  };
  const struct {
    std::vector<double> accs;
    double expected;
  } rows[] = {{{0.917, 0.936, 0.731}, 87.1}, {{0.869, 0.901}, 89.2}, {{0.884, 0.900, 0.729}, 84.5}};
  Outcome o{true, ""};
  for (const auto& r : rows) {
    const double got = row(r.accs);
    o.pass = o.pass && std::abs(got - r.expected) <= 0.05 + 1e-9;
    o.detail += fmt("%.4f", got) + "->" + fmt("%.1f", r.expected) + " ";
  }
  return o;
}

Outcome gradients() {
  double worst = 0.0;
  std::string where;
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    const auto c = gradient_check(seed);
    if (c.worst_rel_error > worst) {
      worst = c.worst_rel_error;
      where = c.worst_tensor;
    }
  }
  return {worst < 1e-4, "10 seeds, worst relative error " + fmt("%.2e", worst) + " (" + where + ")"};
}

Outcome gradcam() {
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(seed);
    AffineConvDNet<double> net;
    net.convd_w = random_matrix(4, 4, rng);
    net.convd_b = random_matrix(4, 1, rng);
    for (int y = 0; y < 3; ++y) net.weights.push_back(random_matrix(4, 12, rng));
    net.bias = random_matrix(3, 1, rng);
    ImageFeatureMap<double> z(4, 3, 4);
    z.values = random_matrix(4, 12, rng);
    const auto a = net.convd(z);
    for (int y = 0; y < 3; ++y) {
      const auto map = grad_cam(net, z, y);
      for (int p = 0; p < 12; ++p) {
        double s = 0.0;
        for (int k = 0; k < 4; ++k) s += net.weights[static_cast<std::size_t>(y)].row(k).mean() * a.values(k, p);
        worst = std::max(worst, std::abs(map.raw(p / 4, p % 4) - std::max(0.0, s)));
      }
    }
  }
  FusionModel<double> model(toy_model_config(3));
  model.params().gate_img_b.setConstant(-1e3);
  model.params().gate_txt_w.setZero();
  std::mt19937_64 rng(3);
  const auto zero = grad_cam(FusionGradCam<double>(model), random_input(3, 2, 2, 3, 4, rng), 0);
  const bool zero_ok = (zero.raw.array() == 0).all() && (zero.normalized.array() == 0).all();
  return {worst <= 1e-6 && zero_ok,
          "affine max error " + fmt("%.1e", worst) + ", zero-gradient map " + (zero_ok ? "zero" : "NONZERO")};
}

Outcome cross_dependency() {
  int checked = 0, ok = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    FusionModel<double> model(toy_model_config(seed));
    std::mt19937_64 rng(seed + 100);
    const auto in = random_input(3, 2, 2, 3, 4, rng);
    const auto base = model.forward(in);
    auto img = in;
    img.image.values += random_matrix(3, 4, rng);
    auto txt = in;
    txt.text += random_matrix(3, 4, rng);
    checked += 2;
    ok += model.forward(img).gates.gate_img == base.gates.gate_img;
    ok += model.forward(txt).gates.gate_txt == base.gates.gate_txt;
  }
  return {ok == checked, std::to_string(ok) + "/" + std::to_string(checked) + " perturbations left the gate bitwise equal"};
}

Outcome toy_training() {
  auto s = toy_setup(1, 50);
  FusionModel<double> a(s.model), b(s.model);
  const auto t0 = std::chrono::steady_clock::now();
  const auto ra = train(s.cfg, s.train, s.val, a);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const auto rb = train(s.cfg, s.train, s.val, b);
  double best = 0.0;
  int reached = 0;
  for (const auto& e : ra.history) {
    if (e.train_accuracy >= 0.95 && reached == 0) reached = e.epoch;
    best = std::max(best, e.train_accuracy);
  }
  bool same = ra.history.size() == rb.history.size();
  for (std::size_t i = 0; same && i < ra.history.size(); ++i) same = ra.history[i].train_loss == rb.history[i].train_loss;
  return {best >= 0.95 && same && secs < 120.0,
          "best train accuracy " + fmt("%.3f", best) + (reached ? " (>=0.95 at epoch " + std::to_string(reached) + ")" : "") +
              ", one run " + fmt("%.1f", secs) + " s, rerun loss curve " + (same ? "identical" : "DIFFERS")};
}

Outcome knowledge() {
  auto cache = KnowledgeCache::load(knowledge_cache_path());
  CachedScorer scorer(cache);
  CachedWikiClient wiki(cache);
  std::set<std::string> words;
  for (const auto& e : extract_entities(kLandfallText, scorer, ExtractOptions{}, nullptr)) words.insert(e.word);
  const bool fig = words == std::set<std::string>{"Hurricane Harvey", "Texas", "Bayside"};
  const std::vector<double> thresholds = {0.0, 0.05, 0.1, 0.2, 0.3, 0.45, 0.6, 0.9};
  int violations = 0;
  for (const auto& text : random_fixture_texts(100, 17)) {
    std::vector<Entity> prev;
    for (std::size_t k = 0; k < thresholds.size(); ++k) {
      EnrichOptions opt;
      opt.extract.threshold = thresholds[k];
      const auto e = enrich(text, scorer, wiki, opt);
      for (const auto& ent : e.entities) violations += !(ent.score > thresholds[k]);
      if (k > 0 && !entity_subset(e.entities, prev)) ++violations;
      prev = e.entities;
      const std::string want = e.wiki_text.empty() ? text : text + " [SEP] " + e.wiki_text;
      violations += e.fused != want;
      violations += count_occurrences(e.fused, "[SEP]") != (e.wiki_text.empty() ? 0u : 1u);
    }
  }
  return {fig && violations == 0, std::string("landfall entities ") + (fig ? "match" : "DIFFER") + ", " +
                                      std::to_string(violations) + " invariant violations over 100 texts x 8 thresholds"};
}

Outcome dataset_protocol() {
  const auto a = load_dataset(fixture_config(Setting::A));
  const auto b = load_dataset(fixture_config(Setting::B));
  std::vector<std::string> b_train = kAgreeTrain;
  b_train.insert(b_train.end(), kBOnlyTrain.begin(), kBOnlyTrain.end());
  std::sort(b_train.begin(), b_train.end());
  bool ok = ids(a.train) == kAgreeTrain && ids(a.val) == kVal && ids(a.test) == kTest && ids(b.train) == b_train &&
            ids(b.val) == ids(a.val) && ids(b.test) == ids(a.test);
  std::string detail = "A " + std::to_string(a.train.size()) + "/" + std::to_string(a.val.size()) + "/" +
                       std::to_string(a.test.size()) + ", B " + std::to_string(b.train.size()) + "/" +
                       std::to_string(b.val.size()) + "/" + std::to_string(b.test.size());
  const char* real = std::getenv("MMFUSE_CRISISMMD_TASK1");
  if (real && *real) {
    DatasetConfig cfg;
    cfg.annotations_path = real;
    cfg.require_images = false;
    const auto n = load_dataset(cfg).counts();
    const bool full = n.train == 9601 && n.val == 1573 && n.test == 1534;
    ok = ok && full;
    detail += "; corpus task1/A " + std::to_string(n.train) + "/" + std::to_string(n.val) + "/" + std::to_string(n.test);
  } else {
    detail += "; corpus check SKIPPED (MMFUSE_CRISISMMD_TASK1 not set)";
  }
  return {ok, detail};
}

Outcome metric_oracle() {
  std::mt19937_64 rng(2024);
  const int cs[] = {2, 3, 5};
  int mismatches = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const int c = cs[trial % 3];
    std::uniform_int_distribution<int> cls(0, c - 1), len(1, 60);
    const int n = len(rng);
    std::vector<int> p(static_cast<std::size_t>(n)), y(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
      p[static_cast<std::size_t>(i)] = cls(rng);
      y[static_cast<std::size_t>(i)] = cls(rng);
    }
    const auto r = compute_task_metrics(p, y, TaskId::task1, c);
    const auto o = brute_metrics(p, y, c);
    mismatches += !(r.confusion == o.confusion && r.accuracy == o.accuracy && r.per_class_f1 == o.per_class_f1 &&
                    r.macro_f1 == o.macro_f1 && r.weighted_f1 == o.weighted_f1);
  }
  return {mismatches == 0, std::to_string(1000 - mismatches) + "/1000 random sets equal"};
}

}  // namespace

int main() {
  const struct {
    int id;
    const char* name;
    double budget_s;  // 0: no runtime bound
    std::function<Outcome()> run;
  } criteria[] = {
      {1, "MTMS arithmetic", 1.0, mtms_rows},
      {2, "gradient check", 30.0, gradients},
      {3, "Grad-CAM oracle", 5.0, gradcam},
      {4, "cross-gate dependency", 0.0, cross_dependency},
      {5, "toy end-to-end training", 0.0, toy_training},
      {6, "entity/wiki fixtures", 5.0, knowledge},
      {7, "dataset protocol", 0.0, dataset_protocol},
      {8, "metric oracle", 0.0, metric_oracle},
  };
  int failed = 0;
  for (const auto& c : criteria) {
    Outcome o;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (c.budget_s > 0 && secs >= c.budget_s) {
      o.pass = false;
      o.detail += " [over " + fmt("%.0f", c.budget_s) + " s budget]";
    }
    failed += !o.pass;
    std::printf("CRITERION %d %s  %-24s %7.2f s  %s\n", c.id, o.pass ? "PASS" : "FAIL", c.name, secs, o.detail.c_str());
    std::fflush(stdout);
  }
  std::printf("%d/8 criteria passed\n", 8 - failed);
  return failed == 0 ? 0 : 1;
}
