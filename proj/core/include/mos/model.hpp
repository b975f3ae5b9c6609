#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "mos/checkpoint.hpp"
#include "mos/experts.hpp"
#include "mos/nn.hpp"
#include "mos/router.hpp"

namespace mos {

struct FusionWeights {
  double item = 0.25;    // alpha_I
  double window = 0.25;  // alpha_W
};

void validate(const FusionWeights& w);

enum class TrainingStage { kBackboneWarmup, kExpertWarmup, kJoint };

const char* stage_tag(TrainingStage stage);  // backbone_warmup, expert_warmup, joint
TrainingStage parse_stage_tag(const std::string& tag);

// (0, 0) during backbone warm-up, (0.5, 0.5) during expert warm-up, the
// configured weights during joint training.
FusionWeights effective_fusion(const FusionWeights& configured, TrainingStage stage);

struct ModelConfig {
  std::size_t vocab_size = 0;
  std::size_t dim = 16;           // d
  std::size_t theme_dim = 32;     // D
  std::size_t experts = 5;        // n, per group
  std::size_t k = 1;
  std::size_t ffn_hidden = 32;
  std::size_t router_hidden = 0;  // 0 means D
  std::size_t head_hidden = 32;
  WindowSpec window;
  FusionWeights fusion;
  double ema_decay = kDefaultEmaDecay;
};

void validate(const ModelConfig& c);

struct MosModel {
  ModelConfig config;
  ItemEmbeddingTable embedding;
  AttentionBlockParams global;
  ExpertGroup item;
  ExpertGroup window;
  MlpParams head;

  // Every gradient-trained tensor, in a fixed order. Codebooks are excluded.
  std::vector<TensorView> parameters();
};

MosModel make_mos_model(const ModelConfig& config, RngStream& rng);
// Same shapes, all trainable tensors zero. Used as a gradient buffer.
MosModel zeros_like(const MosModel& model);
void set_zero(MosModel& grad);
// grad += other, tensor by tensor in parameters() order.
void accumulate(MosModel& grad, MosModel& other);

struct StageParameterSets {
  std::vector<std::string> trainable;
  std::vector<std::string> frozen;
  bool ema_active = false;
};

bool is_trainable(const std::string& parameter_name, TrainingStage stage);
StageParameterSets stage_parameter_sets(MosModel& model, TrainingStage stage);

// Precomputed item-router gates for every vocabulary item.
struct ItemGateTable {
  std::vector<GateVector> gates;
  std::vector<Vector> projected;
};
ItemGateTable build_item_gate_table(const MosModel& model);

struct ForwardTrace {
  FusionWeights alphas;
  std::size_t sequence_length = 0;
  std::size_t window_count = 0;
  bool item_active = false;
  bool window_active = false;
  GroupTrace item;
  GroupTrace window;
};

struct ForwardCache {
  std::vector<ItemId> items;
  ItemId target = 0;
  std::vector<Vector> embeddings;
  AttentionCache global;
  GroupCache item;
  WindowSequence windows;
  GroupCache window;
  ClassifierCache head;
};

struct ForwardResult {
  double logit = 0.0;
  double prob = 0.5;
  Vector y_global, y_item, y_window, y;
  ForwardTrace trace;
};

ForwardResult mos_forward(const MosModel& model, std::span<const ItemId> sequence, ItemId target,
                          TrainingStage stage, const ItemGateTable* table = nullptr,
                          ForwardCache* cache = nullptr);

// Accumulates dL/dparameters for the forward recorded in `cache` into `grad`.
void mos_backward(const MosModel& model, const ForwardCache& cache, const ForwardTrace& trace,
                  double dlogit, MosModel& grad);

// The plain backbone path: embedding, global expert, classifier.
double backbone_logit(const ItemEmbeddingTable& embedding, const AttentionBlockParams& global,
                      const MlpParams& head, std::span<const ItemId> sequence, ItemId target);

// Checkpoint mapping. Besides parameters, codebooks and usage are stored as
// "buffer/..." tensors and hyperparameters as "meta/..." scalars.
std::vector<NamedTensor> to_checkpoint(MosModel& model, TrainingStage stage);
struct LoadedModel {
  MosModel model;
  TrainingStage stage = TrainingStage::kJoint;
};
LoadedModel from_checkpoint(const std::vector<NamedTensor>& tensors);

}  // namespace mos
