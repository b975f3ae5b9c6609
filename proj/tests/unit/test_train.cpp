#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <limits>
#include <vector>

#include "model_fixtures.hpp"
#include "mos/errors.hpp"
#include "mos/train.hpp"

namespace mos {
namespace {

using testing::tiny_config;

LabeledDataset small_data(std::uint64_t seed = 1) {
  SyntheticConfig s;
  s.themes = 3;
  s.items_per_theme = 5;
  s.dim = 4;
  s.max_sequence = 12;
  s.impressions_per_user = 4;
  s.users = 24;
  s.impression_gap = 3;
  s.seed = seed;
  return generate_synthetic(s);
}

MosModel small_model(std::size_t vocab, std::uint64_t seed = 5) {
  RngStream rng(seed, 1);
  ModelConfig c = tiny_config(vocab);
  c.window = {4, 2};
  return make_mos_model(c, rng);
}

TrainConfig small_train(StageBudgets budgets) {
  TrainConfig t;
  t.budgets = budgets;
  t.batch_size = 20;
  t.kmeans_sample = 64;
  return t;
}

std::vector<double> flatten(MosModel& m) {
  std::vector<double> out;
  for (const TensorView& t : m.parameters()) out.insert(out.end(), t.values.begin(), t.values.end());
  for (const Codebook* cb : {&m.item.router.codebook, &m.window.router.codebook}) {
    out.insert(out.end(), cb->rows.data().begin(), cb->rows.data().end());
  }
  return out;
}

bool bit_equal(const std::vector<double>& a, const std::vector<double>& b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

bool tensors_equal(MosModel& a, MosModel& b, const std::string& prefix) {
  auto pa = a.parameters();
  auto pb = b.parameters();
  for (std::size_t i = 0; i < pa.size(); ++i) {
    if (pa[i].name.rfind(prefix, 0) != 0) continue;
    if (!std::equal(pa[i].values.begin(), pa[i].values.end(), pb[i].values.begin())) return false;
  }
  return true;
}

TEST(Budgets, DefaultSplit) {
  const StageBudgets b = default_budgets(10);
  EXPECT_EQ(b.backbone_warmup, 4u);
  EXPECT_EQ(b.expert_warmup, 2u);
  EXPECT_EQ(b.joint, 4u);
  EXPECT_EQ(default_budgets(7).total(), 7u);
  const StageBudgets o = backbone_only_budgets(6);
  EXPECT_EQ(o.backbone_warmup, 6u);
  EXPECT_EQ(o.expert_warmup + o.joint, 0u);
  EXPECT_EQ(b.of(TrainingStage::kExpertWarmup), 2u);
}

TEST(Train, ZeroEpochsLeaveTheModelUnchanged) {
  const LabeledDataset data = small_data();
  const DatasetSplit s = split(data.impressions, {});
  MosModel m = small_model(data.vocab_size);
  const auto before = flatten(m);
  RngStream rng(1, 2);
  const TrainResult r = train(m, s.train, s.validation, small_train({0, 0, 0}), rng);
  EXPECT_TRUE(r.log.empty());
  EXPECT_TRUE(bit_equal(before, flatten(m)));
}

TEST(Train, ExpertWarmupFreezesTheBackbone) {
  const LabeledDataset data = small_data();
  const DatasetSplit s = split(data.impressions, {});
  MosModel m = small_model(data.vocab_size);
  MosModel original = small_model(data.vocab_size);
  const Matrix item_codebook = m.item.router.codebook.rows;
  RngStream rng(1, 2);
  const TrainResult r = train(m, s.train, s.validation, small_train({0, 2, 0}), rng);
  ASSERT_EQ(r.log.size(), 2u);
  EXPECT_EQ(r.log[0].stage, TrainingStage::kExpertWarmup);
  for (const char* frozen : {"embedding", "global.", "head."}) {
    EXPECT_TRUE(tensors_equal(m, original, frozen)) << frozen;
  }
  EXPECT_FALSE(tensors_equal(m, original, "item_expert."));
  EXPECT_FALSE(tensors_equal(m, original, "window_expert."));
  EXPECT_NE(m.item.router.codebook.rows.data(), item_codebook.data());
}

TEST(Train, BackboneWarmupIgnoresTheExperts) {
  // Two models that share the backbone but differ in every routed part must
  // train to the same backbone.
  const LabeledDataset data = small_data();
  const DatasetSplit s = split(data.impressions, {});
  MosModel a = small_model(data.vocab_size, 5);
  MosModel b = small_model(data.vocab_size, 6);
  b.embedding = a.embedding;
  b.global = a.global;
  b.head = a.head;
  const MosModel b_routed = b;
  RngStream ra(3, 2);
  RngStream rb(3, 2);
  const TrainResult la = train(a, s.train, s.validation, small_train(backbone_only_budgets(2)), ra);
  const TrainResult lb = train(b, s.train, s.validation, small_train(backbone_only_budgets(2)), rb);
  for (const char* prefix : {"embedding", "global.", "head."}) EXPECT_TRUE(tensors_equal(a, b, prefix)) << prefix;
  MosModel untouched = b_routed;
  EXPECT_TRUE(tensors_equal(b, untouched, "item_"));
  EXPECT_TRUE(tensors_equal(b, untouched, "window_"));
  ASSERT_EQ(la.log.size(), lb.log.size());
  for (std::size_t i = 0; i < la.log.size(); ++i) EXPECT_EQ(la.log[i].train_loss, lb.log[i].train_loss);
  // The trained model scores exactly like the plain backbone path.
  const Impression& imp = s.test.front();
  EXPECT_EQ(mos_forward(a, imp.sequence, imp.target, TrainingStage::kBackboneWarmup).logit,
            backbone_logit(a.embedding, a.global, a.head, imp.sequence, imp.target));
}

TEST(Train, ThreadCountDoesNotChangeResults) {
  const LabeledDataset data = small_data(2);
  const DatasetSplit s = split(data.impressions, {});
  TrainConfig cfg = small_train({1, 1, 1});
  cfg.batch_size = 40;
  std::vector<double> reference;
  std::vector<double> reference_loss;
  for (std::size_t threads : {1u, 3u}) {
    MosModel m = small_model(data.vocab_size);
    RngStream rng(4, 2);
    cfg.threads = threads;
    const TrainResult r = train(m, s.train, s.validation, cfg, rng);
    std::vector<double> losses;
    for (const EpochLog& e : r.log) losses.push_back(e.train_loss);
    if (reference.empty()) {
      reference = flatten(m);
      reference_loss = losses;
      EXPECT_EQ(predict(m, s.test, TrainingStage::kJoint, 1), predict(m, s.test, TrainingStage::kJoint, 4));
    } else {
      EXPECT_TRUE(bit_equal(reference, flatten(m)));
      EXPECT_EQ(reference_loss, losses);
    }
  }
}

TEST(Train, StageHookFiresPerNonEmptyStage) {
  const LabeledDataset data = small_data();
  const DatasetSplit s = split(data.impressions, {});
  MosModel m = small_model(data.vocab_size);
  RngStream rng(1, 2);
  std::vector<TrainingStage> seen;
  std::size_t batches = 0;
  TrainConfig cfg = small_train({1, 0, 1});
  cfg.on_batch = [&](const BatchDiagnostics& d) {
    ++batches;
    EXPECT_EQ(d.item_counts.size(), m.config.experts);
    EXPECT_NE(d.stage, TrainingStage::kBackboneWarmup);
  };
  train(m, s.train, s.validation, cfg, rng, [&](TrainingStage st, MosModel&) { seen.push_back(st); });
  EXPECT_EQ(seen, (std::vector<TrainingStage>{TrainingStage::kBackboneWarmup, TrainingStage::kJoint}));
  EXPECT_GT(batches, 0u);
}

TEST(Train, NonFiniteLossAborts) {
  const LabeledDataset data = small_data();
  const DatasetSplit s = split(data.impressions, {});
  MosModel m = small_model(data.vocab_size);
  for (double& v : m.embedding.weights.data()) v = std::numeric_limits<double>::quiet_NaN();
  RngStream rng(1, 2);
  EXPECT_THROW(train(m, s.train, s.validation, small_train({1, 0, 0}), rng), TrainingAbortedError);
}

TEST(Train, LossDecreasesOnTrainingData) {
  const LabeledDataset data = small_data(3);
  const DatasetSplit s = split(data.impressions, {});
  MosModel m = small_model(data.vocab_size);
  TrainConfig cfg = small_train(backbone_only_budgets(8));
  cfg.adam.learning_rate = 1e-2;
  cfg.keep_best = false;
  RngStream rng(1, 2);
  const TrainResult r = train(m, s.train, s.validation, cfg, rng);
  ASSERT_EQ(r.log.size(), 8u);
  EXPECT_LT(r.log.back().train_loss, r.log.front().train_loss);
}

TEST(Evaluate, GroupsByUserInAscendingOrder) {
  std::vector<Impression> imps{{2, {1}, 1, 1}, {0, {1}, 2, 0}, {2, {3}, 1, 0}};
  const std::vector<double> scores{0.9, 0.1, 0.4};
  const auto groups = group_by_user(imps, scores);
  ASSERT_EQ(groups.size(), 2u);
  EXPECT_EQ(groups[0].scores, (std::vector<double>{0.1}));
  EXPECT_EQ(groups[1].scores, (std::vector<double>{0.9, 0.4}));
  EXPECT_EQ(groups[1].labels, (std::vector<int>{1, 0}));
}

TEST(Evaluate, SingleClassIsUndefined) {
  const LabeledDataset data = small_data();
  MosModel m = small_model(data.vocab_size);
  std::vector<Impression> imps(data.impressions.begin(), data.impressions.begin() + 5);
  for (Impression& i : imps) i.label = 1;
  EXPECT_THROW(evaluate(m, imps, TrainingStage::kJoint), MetricUndefinedError);
}

TEST(TrainingLog, RowMatchesHeader) {
  EpochLog e;
  e.epoch = 3;
  e.load = {1, 2};
  const auto count = [](const std::string& s) { return std::count(s.begin(), s.end(), ','); };
  EXPECT_EQ(count(training_log_header(2)), count(training_log_row(e)));
}

}  // namespace
}  // namespace mos
