#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "mos/data.hpp"
#include "mos/metrics.hpp"
#include "mos/model.hpp"

namespace mos {

struct StageBudgets {
  std::size_t backbone_warmup = 4;
  std::size_t expert_warmup = 2;
  std::size_t joint = 4;

  std::size_t total() const { return backbone_warmup + expert_warmup + joint; }
  std::size_t of(TrainingStage s) const;
};

// 40% / 20% / 40% of `total_epochs`, rounded, joint takes the remainder.
StageBudgets default_budgets(std::size_t total_epochs);
// Whole budget in backbone warm-up: the plain backbone.
StageBudgets backbone_only_budgets(std::size_t total_epochs);

// Router statistics of one batch, reported while the codebooks are live.
struct BatchDiagnostics {
  std::size_t batch = 0;  // global, 1-based
  TrainingStage stage = TrainingStage::kExpertWarmup;
  std::vector<std::uint64_t> item_counts;
  std::vector<std::uint64_t> window_counts;
  double collapse_item = 0.0;
  double collapse_window = 0.0;
};

struct TrainConfig {
  StageBudgets budgets;
  std::size_t batch_size = 256;
  AdamConfig adam;
  // Restore the best validation-GAUC epoch of the final stage at the end.
  bool keep_best = true;
  std::size_t threads = 1;
  // Cap on the sample used for k-means codebook initialization.
  std::size_t kmeans_sample = 4096;
  std::function<void(const BatchDiagnostics&)> on_batch;
};

struct EpochLog {
  TrainingStage stage = TrainingStage::kBackboneWarmup;
  std::size_t epoch = 0;  // global, 1-based
  double train_loss = 0.0;
  double val_auc = 0.0;   // NaN when undefined
  double val_gauc = 0.0;  // NaN when undefined
  double collapse_item = 0.0;
  double collapse_window = 0.0;
  std::vector<std::uint64_t> load;  // item-router dispatches per expert
};

struct TrainResult {
  std::vector<EpochLog> log;
  std::vector<std::string> warnings;
};

using StageHook = std::function<void(TrainingStage, MosModel&)>;

// Runs the three stages in order. `on_stage_end` fires after every stage with
// a nonzero budget.
TrainResult train(MosModel& model, std::span<const Impression> train_set,
                  std::span<const Impression> validation, const TrainConfig& config, RngStream& rng,
                  const StageHook& on_stage_end = {});

std::string training_log_header(std::size_t experts);
std::string training_log_row(const EpochLog& e);

struct Evaluation {
  std::vector<double> probabilities;  // parallel to the input impressions
  double auc = 0.0;
  double gauc = 0.0;
  std::vector<std::uint64_t> load;  // item-router aggregation selections per expert
  double mean_flops = 0.0;
};

// Probabilities for every impression; thread count only changes speed.
std::vector<double> predict(const MosModel& model, std::span<const Impression> impressions,
                            TrainingStage stage, std::size_t threads = 1);

// Scores and computes AUC/GAUC (MetricUndefinedError propagates).
Evaluation evaluate(const MosModel& model, std::span<const Impression> impressions, TrainingStage stage,
                    std::size_t threads = 1);

// Per-user groups in ascending user order.
std::vector<ScoredGroup> group_by_user(std::span<const Impression> impressions,
                                       std::span<const double> scores);

}  // namespace mos
