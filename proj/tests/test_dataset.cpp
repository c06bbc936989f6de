#include "mmfuse/dataset.hpp"

#include "support/annotation_fixture.hpp"
#include "support/temp_dir.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cstdlib>
#include <random>
#include <set>

using namespace mmfuse;
using namespace mmfuse::testing;

TEST(TaskSpec, ClassCounts) {
  EXPECT_EQ(TaskSpec::make(TaskId::task1).class_count(), 2);
  EXPECT_EQ(TaskSpec::make(TaskId::task2).class_count(), 5);
  EXPECT_EQ(TaskSpec::make(TaskId::task3).class_count(), 3);
  const auto t1 = TaskSpec::make(TaskId::task1);
  EXPECT_EQ(t1.class_names[0], "informative");
  EXPECT_EQ(t1.class_names[1], "non-informative");
  for (auto id : {TaskId::task1, TaskId::task2, TaskId::task3}) {
    const auto t = TaskSpec::make(id);
    std::set<std::string> names(t.class_names.begin(), t.class_names.end());
    EXPECT_EQ(names.size(), t.class_names.size());
  }
}

TEST(TaskSpec, LabelSpellings) {
  const auto t1 = TaskSpec::make(TaskId::task1);
  EXPECT_EQ(t1.class_index("Non-Informative"), 1);
  EXPECT_EQ(t1.class_index("not_informative"), 1);
  EXPECT_EQ(t1.class_index(" informative "), 0);
  EXPECT_FALSE(t1.class_index("maybe"));
  const auto t2 = TaskSpec::make(TaskId::task2);
  EXPECT_EQ(t2.class_index("vehicle_damage"), 1);
  EXPECT_EQ(t2.class_index("injured_or_dead_people"), 3);
  const auto t3 = TaskSpec::make(TaskId::task3);
  EXPECT_EQ(t3.class_index("little_or_no_damage"), 2);
}

TEST(CleanText, Examples) {
  EXPECT_EQ(clean_text(""), "");
  EXPECT_EQ(clean_text("@user help #flood http://t.co/x now"), "user help flood now");
  EXPECT_EQ(clean_text("no markers here"), "no markers here");
  EXPECT_EQ(clean_text("  spaced\t\tout \n text "), "spaced out text");
  EXPECT_EQ(clean_text("see www.example.com and HTTPS://X.Y"), "see and");
  EXPECT_EQ(clean_text("# @ lone symbols"), "lone symbols");
}

TEST(CleanText, IdempotentOnRandomStrings) {
  const std::string alphabet = "ab @#:/.hwtpHW \t";
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<std::size_t> pick(0, alphabet.size() - 1), len(0, 40);
  for (int i = 0; i < 2000; ++i) {
    std::string s;
    for (std::size_t n = len(rng); n > 0; --n) s.push_back(alphabet[pick(rng)]);
    const std::string once = clean_text(s);
    EXPECT_EQ(clean_text(once), once) << s;
    EXPECT_EQ(once.find('@'), std::string::npos);
    EXPECT_EQ(once.find('#'), std::string::npos);
    EXPECT_EQ(once.find("  "), std::string::npos);
  }
}

TEST(LoadDataset, SixRowSettingAKeepsMatchingPairs) {
  TempDir dir;
  const auto path = dir.write("a.tsv",
                              "sample_id\tevent_name\timage_path\ttext\timage_label\ttext_label\tsplit\n"
                              "r1\te\tr1.jpg\tone\tinformative\tinformative\ttrain\n"
                              "r2\te\tr2.jpg\ttwo\tinformative\tnon-informative\ttrain\n"
                              "r3\te\tr3.jpg\tthree\tnon-informative\tnon-informative\ttrain\n"
                              "r4\te\tr4.jpg\tfour\tnon-informative\tinformative\ttrain\n"
                              "r5\te\tr5.jpg\tfive\tinformative\tinformative\ttrain\n"
                              "r6\te\tr6.jpg\tsix\tnon-informative\tnon-informative\ttrain\n");
  DatasetConfig cfg;
  cfg.annotations_path = path;
  cfg.require_images = false;
  const auto ds = load_dataset(cfg);
  EXPECT_EQ(ids(ds.train), (std::vector<std::string>{"r1", "r3", "r5", "r6"}));
  for (const auto& s : ds.train) {
    EXPECT_EQ(s.image_label, s.text_label);
    EXPECT_EQ(*s.text_label, s.label);
  }
}

TEST(LoadDataset, FixtureSettingA) {
  const auto ds = load_dataset(fixture_config(Setting::A));
  EXPECT_EQ(ids(ds.train), kAgreeTrain);
  EXPECT_EQ(ids(ds.val), kVal);
  EXPECT_EQ(ids(ds.test), kTest);
  EXPECT_EQ(ds.counts().total(), 30u);
}

TEST(LoadDataset, FixtureSettingB) {
  const auto a = load_dataset(fixture_config(Setting::A));
  const auto b = load_dataset(fixture_config(Setting::B));
  std::vector<std::string> train = kAgreeTrain;
  train.insert(train.end(), kBOnlyTrain.begin(), kBOnlyTrain.end());
  std::sort(train.begin(), train.end());
  EXPECT_EQ(ids(b.train), train);  // ids sort the same as file order
  EXPECT_EQ(ids(b.val), ids(a.val));
  EXPECT_EQ(ids(b.test), ids(a.test));
  // A's train is a subset of B's.
  const std::set<std::string> bset(train.begin(), train.end());
  for (const auto& s : a.train) EXPECT_TRUE(bset.count(s.sample_id)) << s.sample_id;
}

TEST(LoadDataset, SettingBLabelPolicy) {
  for (auto policy : {LabelPolicy::text_label, LabelPolicy::image_label}) {
    auto cfg = fixture_config(Setting::B);
    cfg.label_policy_for_B = policy;
    const auto ds = load_dataset(cfg);
    int hist[2] = {0, 0};
    for (const auto& s : ds.train) ++hist[s.label];
    const int* want = policy == LabelPolicy::text_label ? kBTextPolicy : kBImagePolicy;
    EXPECT_EQ(hist[0], want[0]) << to_string(policy);
    EXPECT_EQ(hist[1], want[1]) << to_string(policy);
  }
}

TEST(LoadDataset, SettingBRejectedForTask3) {
  auto cfg = fixture_config(Setting::B);
  cfg.task = TaskSpec::make(TaskId::task3);
  EXPECT_THROW(load_dataset(cfg), DatasetError);
}

TEST(LoadDataset, MissingFileIsFatal) {
  DatasetConfig cfg;
  cfg.annotations_path = "/nonexistent/annotations.tsv";
  try {
    load_dataset(cfg);
    FAIL();
  } catch (const DatasetError& e) {
    EXPECT_NE(std::string(e.what()).find("/nonexistent/annotations.tsv"), std::string::npos);
  }
}

TEST(LoadDataset, UnknownLabelNamesRow) {
  TempDir dir;
  const auto path = dir.write("bad.tsv",
                              "sample_id\tevent_name\timage_path\ttext\timage_label\ttext_label\tsplit\n"
                              "ok\te\tok.jpg\tfine\tinformative\tinformative\ttrain\n"
                              "bad\te\tbad.jpg\toops\tinformative\tsomething_else\ttrain\n");
  DatasetConfig cfg;
  cfg.annotations_path = path;
  cfg.require_images = false;
  try {
    load_dataset(cfg);
    FAIL();
  } catch (const DatasetError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("row 3"), std::string::npos) << msg;
    EXPECT_NE(msg.find("bad"), std::string::npos) << msg;
    EXPECT_NE(msg.find("something_else"), std::string::npos) << msg;
  }
}

TEST(LoadDataset, MissingImagesAreCountedAndExcluded) {
  TempDir dir;
  auto cfg = fixture_config(Setting::A);
  cfg.require_images = true;
  cfg.images_root = dir.path();
  std::filesystem::create_directories(dir / "img");
  // Every agreeing row except two train rows and one test row has an image.
  std::vector<std::string> present;
  for (const auto* v : {&kAgreeTrain, &kVal, &kTest}) present.insert(present.end(), v->begin(), v->end());
  for (const auto& id : present) {
    if (id == "s00" || id == "s48" || id == "s43") continue;
    dir.write("img/" + id + ".jpg", "x");
  }
  const auto ds = load_dataset(cfg);
  EXPECT_EQ(ds.missing_images, 3u);
  EXPECT_EQ(ds.counts().train, 18u);
  EXPECT_EQ(ds.counts().val, 5u);
  EXPECT_EQ(ds.counts().test, 4u);
}

TEST(LoadDataset, CleanTextAndAliasesApplied) {
  const auto ds = load_dataset(fixture_config(Setting::A));
  const auto& s00 = ds.train.front();
  EXPECT_EQ(s00.sample_id, "s00");
  EXPECT_EQ(s00.clean_text, "KHOU flooding on I-45 HurricaneHarvey");
  EXPECT_EQ(s00.event_name, "hurricane_harvey");
  EXPECT_EQ(s00.image_ref, "img/s00.jpg");
  for (const auto* split : {&ds.train, &ds.val, &ds.test}) {
    for (const auto& s : *split) {
      EXPECT_GE(s.label, 0);
      EXPECT_LT(s.label, 2);
    }
  }
}

TEST(LoadDataset, StratifiedSplitWithoutSplitColumn) {
  TempDir dir;
  std::string tsv = "sample_id\tevent_name\timage_path\ttext\timage_label\ttext_label\n";
  for (int i = 0; i < 80; ++i) {
    const char* lab = i < 48 ? "informative" : "non-informative";
    tsv += "x" + std::to_string(i) + "\te\tx.jpg\tt\t" + lab + "\t" + lab + "\n";
  }
  tsv += "dis\te\tx.jpg\tt\tinformative\tnon-informative\n";
  const auto path = dir.write("nosplit.tsv", tsv);
  DatasetConfig cfg;
  cfg.annotations_path = path;
  cfg.require_images = false;
  cfg.split_seed = 3;
  const auto a = load_dataset(cfg);
  // 48 -> 36/6/6 and 32 -> 24/4/4.
  EXPECT_EQ(a.counts().train, 60u);
  EXPECT_EQ(a.counts().val, 10u);
  EXPECT_EQ(a.counts().test, 10u);
  auto count_label = [](const std::vector<Sample>& v, int y) {
    return std::count_if(v.begin(), v.end(), [y](const Sample& s) { return s.label == y; });
  };
  EXPECT_EQ(count_label(a.val, 0), 6);
  EXPECT_EQ(count_label(a.test, 1), 4);
  EXPECT_EQ(ids(load_dataset(cfg).val), ids(a.val));  // seeded

  cfg.setting = Setting::B;
  const auto b = load_dataset(cfg);
  EXPECT_EQ(b.counts().train, 61u);
  EXPECT_EQ(ids(b.val), ids(a.val));
  EXPECT_EQ(ids(b.test), ids(a.test));
}

TEST(LoadDataset, ColumnMapAdaptsHeaders) {
  TempDir dir;
  const auto path = dir.write("alt.tsv",
                              "tweet_id\tevent\timage\ttweet_text\tlabel_image\tlabel_text\n"
                              "7\tev\t7.jpg\t#help now\tinformative\tinformative\n");
  DatasetConfig cfg;
  cfg.annotations_path = path;
  cfg.require_images = false;
  cfg.columns = {"tweet_id", "event", "image", "tweet_text", "label_image", "label_text", "split"};
  const auto ds = load_dataset(cfg);
  ASSERT_EQ(ds.counts().total(), 1u);
  const Sample& s = ds.split(ds.train.empty() ? (ds.val.empty() ? Split::test : Split::val) : Split::train)[0];
  EXPECT_EQ(s.sample_id, "7");
  EXPECT_EQ(s.clean_text, "help now");
}

// Runs only when a full task-1 annotation file in the default column layout
// is supplied through MMFUSE_CRISISMMD_TASK1.
TEST(LoadDataset, FullCorpusTask1SplitCounts) {
  const char* path = std::getenv("MMFUSE_CRISISMMD_TASK1");
  if (!path || !*path) GTEST_SKIP() << "MMFUSE_CRISISMMD_TASK1 not set";
  DatasetConfig cfg;
  cfg.annotations_path = path;
  cfg.require_images = false;
  const auto n = load_dataset(cfg).counts();
  EXPECT_EQ(n.train, 9601u);
  EXPECT_EQ(n.val, 1573u);
  EXPECT_EQ(n.test, 1534u);
  EXPECT_EQ(n.total(), 12708u);
}
