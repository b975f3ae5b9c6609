#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <iterator>
#include <limits>
#include <sstream>

#include "commands.hpp"
#include "mos/analysis.hpp"
#include "mos/data.hpp"
#include "mos/train.hpp"

namespace mos::cli {
namespace {

namespace fs = std::filesystem;

struct Result {
  int code = 0;
  std::string out;
  std::string err;
};

Result mos(const std::vector<std::string>& args) {
  std::ostringstream out;
  std::ostringstream err;
  const int code = run(args, out, err);
  return {code, out.str(), err.str()};
}

std::string read_all(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  EXPECT_TRUE(in.good()) << p;
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  out << text;
}

constexpr const char* kSmallConfig =
    "seed = 3\n"
    "data.items_per_theme = 10\n"
    "data.max_sequence = 30\n"
    "data.impressions_per_user = 6\n"
    "data.users = 30\n"
    "data.impression_gap = 3\n"
    "model.dim = 16\n"
    "model.experts = 3\n"
    "model.window_length = 4\n"
    "model.window_stride = 2\n"
    "train.backbone_warmup_epochs = 1\n"
    "train.expert_warmup_epochs = 1\n"
    "train.joint_epochs = 1\n"
    "train.batch_size = 32\n"
    "train.kmeans_sample = 64\n"
    "analyze.session_users = 2\n"
    "analyze.min_occurrences = 2\n"
    "analyze.complexity_trials = 2\n"
    "eval.split = all\n";

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    root_ = fs::temp_directory_path() /
            ("mos_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(root_);
    fs::create_directories(root_);
    config_ = (root_ / "run.cfg").string();
    write_text(config_, kSmallConfig);
  }
  void TearDown() override { fs::remove_all(root_); }

  std::string path(const std::string& name) const { return (root_ / name).string(); }

  void generate(const std::string& out) {
    const Result r = mos({"generate", "--config", config_, "--out", path(out)});
    ASSERT_EQ(r.code, kExitOk) << r.err;
  }
  void train(const std::string& data, const std::string& out, const std::string& stage = "full") {
    const Result r = mos({"train", "--config", config_, "--data", path(data), "--out", path(out), "--stage", stage});
    ASSERT_EQ(r.code, kExitOk) << r.err;
  }

  fs::path root_;
  std::string config_;
};

TEST_F(Cli, UsageErrorsAreConfigErrors) {
  EXPECT_EQ(mos({}).code, kExitConfig);
  EXPECT_EQ(mos({"fly"}).code, kExitConfig);
  EXPECT_EQ(mos({"generate", "--bogus"}).code, kExitConfig);
  EXPECT_EQ(mos({"analyze", "--config", config_, "--out", path("a")}).code, kExitConfig);  // --mode required
  EXPECT_EQ(mos({"--help"}).code, kExitOk);
}

TEST_F(Cli, MissingSeedNamesTheKey) {
  write_text(path("noseed.cfg"), "data.users = 3\n");
  const Result r = mos({"generate", "--config", path("noseed.cfg"), "--out", path("d")});
  EXPECT_EQ(r.code, kExitConfig);
  EXPECT_NE(r.err.find("seed"), std::string::npos);
  // A --seed flag supplies it.
  EXPECT_EQ(mos({"generate", "--config", path("noseed.cfg"), "--seed", "4", "--out", path("d")}).code, kExitOk);
}

TEST_F(Cli, BadConfigFiles) {
  write_text(path("typo.cfg"), "seed = 1\nmodel.expert = 4\n");
  const Result typo = mos({"generate", "--config", path("typo.cfg"), "--out", path("d")});
  EXPECT_EQ(typo.code, kExitConfig);
  EXPECT_NE(typo.err.find("model.expert"), std::string::npos);
  write_text(path("range.cfg"), "seed = 1\nmodel.k = 9\n");
  EXPECT_EQ(mos({"generate", "--config", path("range.cfg"), "--out", path("d")}).code, kExitConfig);
  EXPECT_EQ(mos({"generate", "--config", path("missing.cfg"), "--out", path("d")}).code, kExitIo);
}

TEST_F(Cli, GenerateIsIdempotentAndReportsCounts) {
  const std::vector<const char*> files{"interactions.tsv", "meta.txt", "item_themes.tsv", "item_vectors.bin",
                                       "resolved_config.txt"};
  generate("a");
  std::vector<std::string> first;
  for (const char* f : files) first.push_back(read_all(root_ / "a" / f));
  generate("a");
  for (std::size_t i = 0; i < files.size(); ++i) EXPECT_EQ(read_all(root_ / "a" / files[i]), first[i]) << files[i];
  generate("b");
  EXPECT_EQ(read_all(root_ / "b" / "interactions.tsv"), first[0]);
  const Result r = mos({"generate", "--config", config_, "--out", path("c")});
  EXPECT_EQ(r.out, "users=30 items=50 interactions=" + std::to_string(30 * (30 + 6 * 4)) + " impressions=180\n");
  const LabeledDataset d = load_dataset(root_ / "c");
  EXPECT_EQ(d.impressions.size(), 180u);
  EXPECT_EQ(d.vocab_size, 50u);
  EXPECT_FALSE(fs::exists(root_ / "c" / ".mos.lock"));
}

TEST_F(Cli, LockedOutputDirectoryIsRefused) {
  fs::create_directories(root_ / "locked");
  write_text(root_ / "locked" / ".mos.lock", "");
  EXPECT_EQ(mos({"generate", "--config", config_, "--out", path("locked")}).code, kExitIo);
}

TEST_F(Cli, TrainEvalAreDeterministic) {
  generate("d");
  train("d", "t1");
  train("d", "t2");
  for (const char* f : {"model.mos", "checkpoint_backbone_warmup.mos", "checkpoint_expert_warmup.mos",
                        "checkpoint_joint.mos", "train_log.csv", "router_diagnostics.csv"}) {
    EXPECT_EQ(read_all(root_ / "t1" / f), read_all(root_ / "t2" / f)) << f;
  }
  const std::string log = read_all(root_ / "t1" / "train_log.csv");
  EXPECT_EQ(log.substr(0, log.find('\n')), mos::training_log_header(3));
  for (const char* out : {"e1", "e2"}) {
    const Result r = mos({"eval", "--config", config_, "--data", path("d"), "--checkpoint", path("t1/model.mos"),
                          "--out", path(out)});
    ASSERT_EQ(r.code, kExitOk) << r.err;
  }
  const std::string metrics = read_all(root_ / "e1" / "metrics.csv");
  EXPECT_EQ(metrics, read_all(root_ / "e2" / "metrics.csv"));
  EXPECT_EQ(metrics.rfind("metric,value\nauc,", 0), 0u);
  EXPECT_NE(metrics.find("load_2,"), std::string::npos);
  EXPECT_NE(metrics.find("flops_per_impression,"), std::string::npos);
}

TEST_F(Cli, BackboneOnlyRunsOnlyTheFirstStage) {
  generate("d");
  train("d", "t", "backbone-only");
  EXPECT_TRUE(fs::exists(root_ / "t" / "checkpoint_backbone_warmup.mos"));
  EXPECT_FALSE(fs::exists(root_ / "t" / "checkpoint_expert_warmup.mos"));
  EXPECT_FALSE(fs::exists(root_ / "t" / "checkpoint_joint.mos"));
  EXPECT_EQ(mos({"train", "--config", config_, "--data", path("d"), "--out", path("x"), "--stage", "half"}).code,
            kExitConfig);
}

TEST_F(Cli, VocabularyMismatchIsACompatibilityError) {
  generate("d");
  train("d", "t", "backbone-only");
  write_text(path("other.cfg"), std::string(kSmallConfig) + "data.themes = 4\n");
  ASSERT_EQ(mos({"generate", "--config", path("other.cfg"), "--out", path("d2")}).code, kExitOk);
  const Result r =
      mos({"eval", "--config", config_, "--data", path("d2"), "--checkpoint", path("t/model.mos"), "--out", path("e")});
  EXPECT_EQ(r.code, kExitCompatibility);
}

TEST_F(Cli, SingleClassDataIsMetricUndefined) {
  generate("d");
  train("d", "t", "backbone-only");
  LabeledDataset one = load_dataset(root_ / "d");
  for (Interaction& row : one.interactions) {
    if (row.label != kUnlabeled) row.label = 1;
  }
  export_dataset(one, root_ / "ones");
  const Result r = mos(
      {"eval", "--config", config_, "--data", path("ones"), "--checkpoint", path("t/model.mos"), "--out", path("e")});
  EXPECT_EQ(r.code, kExitMetricUndefined) << r.err;
}

TEST_F(Cli, MissingInputsAreIoErrors) {
  EXPECT_EQ(mos({"train", "--config", config_, "--data", path("none"), "--out", path("t")}).code, kExitIo);
  generate("d");
  write_text(path("junk.mos"), "not a checkpoint");
  EXPECT_EQ(
      mos({"eval", "--config", config_, "--data", path("d"), "--checkpoint", path("junk.mos"), "--out", path("e")})
          .code,
      kExitIo);
}

TEST_F(Cli, DivergedTrainingExitsWithTrainingCode) {
  generate("d");
  LabeledDataset data = load_dataset(root_ / "d");
  Matrix bad = *data.item_embeddings;
  bad(0, 0) = std::numeric_limits<double>::quiet_NaN();
  for (ItemId i = 0; i < bad.rows(); ++i) bad(i, 1) = std::numeric_limits<double>::quiet_NaN();
  write_embeddings(root_ / "d" / "item_vectors.bin", bad);
  write_text(path("pre.cfg"), std::string(kSmallConfig) + "train.pretrained_embeddings = true\n");
  const Result r = mos({"train", "--config", path("pre.cfg"), "--data", path("d"), "--out", path("t")});
  EXPECT_EQ(r.code, kExitTraining) << r.err;
}

TEST_F(Cli, AnalyzeModes) {
  generate("d");
  train("d", "t");
  const std::vector<std::string> common{"--config", config_, "--data", path("d"), "--checkpoint", path("t/model.mos")};
  auto analyze = [&](const std::string& mode, const std::string& out) {
    std::vector<std::string> args{"analyze", "--mode", mode, "--out", path(out)};
    args.insert(args.end(), common.begin(), common.end());
    return mos(args);
  };

  const Result flops = analyze("flops", "f");
  ASSERT_EQ(flops.code, kExitOk) << flops.err;
  const std::string table = read_all(root_ / "f" / "complexity.csv");
  EXPECT_EQ(table.substr(0, table.find('\n')), "N,mos_extra,shared_moe,measured_ratio,theoretical_ratio");
  EXPECT_NE(read_all(root_ / "f" / "flops.csv").find("total,"), std::string::npos);

  const Result routing = analyze("routing", "r");
  ASSERT_EQ(routing.code, kExitOk) << routing.err;
  const std::string hist = read_all(root_ / "r" / "routing_histogram.csv");
  EXPECT_EQ(hist.substr(0, hist.find('\n')), "item_id,occurrences,expert_0,expert_1,expert_2");
  EXPECT_NE(read_all(root_ / "r" / "routing_summary.csv").find("min_occurrences,2\n"), std::string::npos);

  const Result sessions = analyze("sessions", "s");
  ASSERT_EQ(sessions.code, kExitOk) << sessions.err;
  std::size_t heatmaps = 0;
  for (const auto& entry : fs::directory_iterator(root_ / "s")) {
    if (entry.path().extension() != ".csv" || entry.path().filename() == "sessions.csv") continue;
    ++heatmaps;
    SimilarityMatrix m{read_matrix_csv(entry.path()), {}};
    EXPECT_NO_THROW(check_similarity_invariants(m)) << entry.path();
  }
  EXPECT_EQ(heatmaps, 2u);
  EXPECT_EQ(analyze("colors", "x").code, kExitConfig);
}

TEST_F(Cli, FlopsModeWithDefaultsPrintsTheTheoreticalRatio) {
  const Result r = mos({"analyze", "--mode", "flops", "--seed", "1", "--out", path("f")});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  EXPECT_NE(r.out.find("theoretical_ratio 0.53125"), std::string::npos) << r.out;
}

TEST_F(Cli, RoutingModeDefaultsToEightOccurrences) {
  write_text(path("plain.cfg"), "seed = 2\ndata.users = 20\ndata.max_sequence = 30\ndata.impressions_per_user = 3\n"
                                "train.backbone_warmup_epochs = 0\ntrain.expert_warmup_epochs = 0\n"
                                "train.joint_epochs = 0\n");
  ASSERT_EQ(mos({"generate", "--config", path("plain.cfg"), "--out", path("d")}).code, kExitOk);
  ASSERT_EQ(mos({"train", "--config", path("plain.cfg"), "--data", path("d"), "--out", path("t")}).code, kExitOk);
  const Result r = mos({"analyze", "--mode", "routing", "--config", path("plain.cfg"), "--data", path("d"),
                        "--checkpoint", path("t/model.mos"), "--out", path("r")});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  EXPECT_NE(read_all(root_ / "r" / "routing_summary.csv").find("min_occurrences,8\n"), std::string::npos);
}

TEST_F(Cli, RandomModelScoresAtChance) {
  // 500 users x 20 impressions; an untrained model should land near 0.5.
  write_text(path("chance.cfg"), "seed = 9\ndata.max_sequence = 50\neval.split = all\n"
                                 "train.backbone_warmup_epochs = 0\ntrain.expert_warmup_epochs = 0\n"
                                 "train.joint_epochs = 0\n");
  ASSERT_EQ(mos({"generate", "--config", path("chance.cfg"), "--out", path("d")}).code, kExitOk);
  ASSERT_EQ(mos({"train", "--config", path("chance.cfg"), "--data", path("d"), "--out", path("t")}).code, kExitOk);
  const Result r = mos({"eval", "--config", path("chance.cfg"), "--data", path("d"), "--checkpoint",
                        path("t/model.mos"), "--out", path("e")});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  const std::string metrics = read_all(root_ / "e" / "metrics.csv");
  EXPECT_NE(metrics.find("impressions,10000\n"), std::string::npos);
  const auto at = metrics.find("auc,") + 4;
  const double auc = std::stod(metrics.substr(at, metrics.find('\n', at) - at));
  EXPECT_GE(auc, 0.45);
  EXPECT_LE(auc, 0.55);
}

}  // namespace
}  // namespace mos::cli
