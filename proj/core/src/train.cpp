#include "mos/train.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <thread>

#include "mos/errors.hpp"
#include "mos/flops.hpp"

namespace mos {
namespace {

// Gradients are accumulated per fixed-size chunk of a batch and reduced in
// chunk order, so results do not depend on the thread count.
constexpr std::size_t kChunkSize = 16;

template <class F>
void run_chunks(std::size_t chunks, std::size_t threads, F&& work) {
  threads = std::max<std::size_t>(1, std::min(threads, chunks));
  if (threads == 1) {
    for (std::size_t c = 0; c < chunks; ++c) work(c);
    return;
  }
  std::vector<std::exception_ptr> errors(chunks);
  std::vector<std::thread> pool;
  pool.reserve(threads);
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&, t] {
      for (std::size_t c = t; c < chunks; c += threads) {
        try {
          work(c);
        } catch (...) {
          errors[c] = std::current_exception();
        }
      }
    });
  }
  for (std::thread& th : pool) th.join();
  for (const std::exception_ptr& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

bool item_path_active(const MosModel& model, TrainingStage stage) {
  return effective_fusion(model.config.fusion, stage).item != 0.0;
}

struct ChunkState {
  MosModel grad;
  EmaAccumulator item_stats;
  EmaAccumulator window_stats;
  double loss = 0.0;
};

struct ScoredImpression {
  double prob = 0.0;
  FlopsReport flops;
  std::vector<std::size_t> item_selection;
};

std::vector<ScoredImpression> score_all(const MosModel& model, std::span<const Impression> impressions,
                                        TrainingStage stage, std::size_t threads, bool with_trace) {
  std::optional<ItemGateTable> table;
  if (item_path_active(model, stage)) table = build_item_gate_table(model);
  std::vector<ScoredImpression> out(impressions.size());
  const std::size_t chunks = (impressions.size() + kChunkSize - 1) / kChunkSize;
  run_chunks(chunks, threads, [&](std::size_t c) {
    const std::size_t end = std::min(impressions.size(), (c + 1) * kChunkSize);
    for (std::size_t i = c * kChunkSize; i < end; ++i) {
      const Impression& imp = impressions[i];
      ForwardResult r = mos_forward(model, imp.sequence, imp.target, stage, table ? &*table : nullptr);
      out[i].prob = r.prob;
      if (with_trace) {
        out[i].flops = count_flops(model, r.trace);
        if (r.trace.item_active) out[i].item_selection = r.trace.item.aggregation.support;
      }
    }
  });
  return out;
}

std::vector<std::size_t> distinct_training_items(std::span<const Impression> data) {
  std::set<ItemId> ids;
  for (const Impression& imp : data) {
    ids.insert(imp.sequence.begin(), imp.sequence.end());
    ids.insert(imp.target);
  }
  return {ids.begin(), ids.end()};
}

void initialize_codebooks(MosModel& model, std::span<const Impression> data, const TrainConfig& cfg,
                          RngStream& rng) {
  std::vector<std::size_t> items = distinct_training_items(data);
  if (items.size() > cfg.kmeans_sample) {
    rng.shuffle(items);
    items.resize(cfg.kmeans_sample);
    std::sort(items.begin(), items.end());
  }
  std::vector<Vector> item_sample;
  item_sample.reserve(items.size());
  for (std::size_t id : items) item_sample.push_back(model.embedding.weights.row_vector(id));
  model.item.router.codebook = init_codebook_kmeans(item_sample, model.item.router, rng);

  std::vector<std::size_t> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  rng.shuffle(order);
  std::vector<Vector> window_sample;
  for (std::size_t idx : order) {
    if (window_sample.size() >= cfg.kmeans_sample) break;
    const std::vector<Vector> xs = embed(model.embedding, data[idx].sequence);
    WindowSequence w = window_transform(xs, model.config.window);
    for (Vector& e : w.embeddings) {
      if (window_sample.size() >= cfg.kmeans_sample) break;
      window_sample.push_back(std::move(e));
    }
  }
  model.window.router.codebook = init_codebook_kmeans(window_sample, model.window.router, rng);
}

std::string first_nonfinite(MosModel& grad) {
  for (const TensorView& t : grad.parameters()) {
    if (!all_finite(t.values)) return t.name;
  }
  return "";
}

double nan() { return std::numeric_limits<double>::quiet_NaN(); }

}  // namespace

std::size_t StageBudgets::of(TrainingStage s) const {
  switch (s) {
    case TrainingStage::kBackboneWarmup:
      return backbone_warmup;
    case TrainingStage::kExpertWarmup:
      return expert_warmup;
    case TrainingStage::kJoint:
      return joint;
  }
  return 0;
}

StageBudgets default_budgets(std::size_t total_epochs) {
  StageBudgets b;
  const double t = static_cast<double>(total_epochs);
  b.backbone_warmup = static_cast<std::size_t>(std::llround(0.4 * t));
  b.expert_warmup = static_cast<std::size_t>(std::llround(0.2 * t));
  b.expert_warmup = std::min(b.expert_warmup, total_epochs - b.backbone_warmup);
  b.joint = total_epochs - b.backbone_warmup - b.expert_warmup;
  return b;
}

StageBudgets backbone_only_budgets(std::size_t total_epochs) { return {total_epochs, 0, 0}; }

std::vector<ScoredGroup> group_by_user(std::span<const Impression> impressions, std::span<const double> scores) {
  if (impressions.size() != scores.size()) throw ArgumentError("group_by_user: one score per impression required");
  std::map<UserId, ScoredGroup> groups;
  for (std::size_t i = 0; i < impressions.size(); ++i) {
    ScoredGroup& g = groups[impressions[i].user];
    g.scores.push_back(scores[i]);
    g.labels.push_back(impressions[i].label);
  }
  std::vector<ScoredGroup> out;
  out.reserve(groups.size());
  for (auto& [user, g] : groups) out.push_back(std::move(g));
  return out;
}

std::vector<double> predict(const MosModel& model, std::span<const Impression> impressions,
                            TrainingStage stage, std::size_t threads) {
  std::vector<ScoredImpression> scored = score_all(model, impressions, stage, threads, false);
  std::vector<double> out;
  out.reserve(scored.size());
  for (const ScoredImpression& s : scored) out.push_back(s.prob);
  return out;
}

Evaluation evaluate(const MosModel& model, std::span<const Impression> impressions, TrainingStage stage,
                    std::size_t threads) {
  std::vector<ScoredImpression> scored = score_all(model, impressions, stage, threads, true);
  Evaluation e;
  e.load.assign(model.item.num_experts(), 0);
  std::vector<int> labels;
  double flops = 0.0;
  for (std::size_t i = 0; i < scored.size(); ++i) {
    e.probabilities.push_back(scored[i].prob);
    labels.push_back(impressions[i].label);
    for (std::size_t x : scored[i].item_selection) ++e.load[x];
    flops += static_cast<double>(scored[i].flops.total());
  }
  e.mean_flops = scored.empty() ? 0.0 : flops / static_cast<double>(scored.size());
  e.auc = auc(e.probabilities, labels);
  const std::vector<ScoredGroup> groups = group_by_user(impressions, e.probabilities);
  e.gauc = gauc(groups);
  return e;
}

std::string training_log_header(std::size_t experts) {
  std::string h = "stage,epoch,train_loss,val_auc,val_gauc,collapse_item,collapse_window";
  for (std::size_t i = 0; i < experts; ++i) h += ",load_" + std::to_string(i);
  return h;
}

std::string training_log_row(const EpochLog& e) {
  std::string row = std::string(stage_tag(e.stage)) + "," + std::to_string(e.epoch) + "," +
                    format_real(e.train_loss) + "," + format_real(e.val_auc) + "," +
                    format_real(e.val_gauc) + "," + format_real(e.collapse_item) + "," +
                    format_real(e.collapse_window);
  for (std::uint64_t l : e.load) row += "," + std::to_string(l);
  return row;
}

TrainResult train(MosModel& model, std::span<const Impression> train_set,
                  std::span<const Impression> validation, const TrainConfig& config, RngStream& rng,
                  const StageHook& on_stage_end) {
  TrainResult result;
  if (config.budgets.total() == 0) return result;
  if (train_set.empty()) throw ArgumentError("train: empty training set");
  if (config.batch_size < 1) throw ArgumentError("train: batch size must be positive");

  const std::size_t n = model.config.experts;
  const std::size_t theme_dim = model.config.theme_dim;
  std::vector<TensorView> params = model.parameters();
  std::vector<AdamState> adam;
  adam.reserve(params.size());
  for (const TensorView& p : params) adam.push_back(make_adam_state(config.adam, p.values.size()));

  const std::size_t max_chunks = (config.batch_size + kChunkSize - 1) / kChunkSize;
  std::vector<ChunkState> chunks;
  chunks.reserve(max_chunks);
  for (std::size_t c = 0; c < max_chunks; ++c) {
    chunks.push_back({zeros_like(model), EmaAccumulator(n, theme_dim), EmaAccumulator(n, theme_dim), 0.0});
  }
  MosModel total_grad = zeros_like(model);

  const TrainingStage stages[3] = {TrainingStage::kBackboneWarmup, TrainingStage::kExpertWarmup,
                                   TrainingStage::kJoint};
  TrainingStage final_stage = TrainingStage::kBackboneWarmup;
  for (TrainingStage s : stages) {
    if (config.budgets.of(s) > 0) final_stage = s;
  }
  bool codebooks_ready = false;
  std::size_t epoch_counter = 0;
  std::size_t batch_counter = 0;
  std::vector<std::size_t> order(train_set.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (TrainingStage stage : stages) {
    const std::size_t budget = config.budgets.of(stage);
    if (budget == 0) continue;
    const bool ema_active = stage != TrainingStage::kBackboneWarmup;
    if (ema_active && !codebooks_ready) {
      initialize_codebooks(model, train_set, config, rng);
      codebooks_ready = true;
    }
    std::vector<bool> trainable(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) trainable[i] = is_trainable(params[i].name, stage);

    std::optional<MosModel> best;
    double best_gauc = -std::numeric_limits<double>::infinity();

    for (std::size_t epoch = 0; epoch < budget; ++epoch) {
      ++epoch_counter;
      rng.shuffle(order);
      double loss_sum = 0.0;
      std::vector<std::uint64_t> load(n, 0);
      for (std::size_t begin = 0; begin < order.size(); begin += config.batch_size) {
        ++batch_counter;
        const std::size_t end = std::min(order.size(), begin + config.batch_size);
        const std::size_t batch = end - begin;
        const double scale = 1.0 / static_cast<double>(batch);
        std::optional<ItemGateTable> table;
        const std::size_t used = (batch + kChunkSize - 1) / kChunkSize;
        // Diverged weights surface as domain or routing failures in the forward.
        try {
          if (item_path_active(model, stage)) table = build_item_gate_table(model);
          run_chunks(used, config.threads, [&](std::size_t c) {
            ChunkState& st = chunks[c];
            set_zero(st.grad);
            st.item_stats = EmaAccumulator(n, theme_dim);
            st.window_stats = EmaAccumulator(n, theme_dim);
            st.loss = 0.0;
            const std::size_t cend = std::min(end, begin + (c + 1) * kChunkSize);
            for (std::size_t j = begin + c * kChunkSize; j < cend; ++j) {
              const Impression& imp = train_set[order[j]];
              ForwardCache cache;
              ForwardResult r = mos_forward(model, imp.sequence, imp.target, stage, table ? &*table : nullptr, &cache);
              const BceResult b = bce_loss(r.logit, imp.label);
              st.loss += b.loss;
              mos_backward(model, cache, r.trace, b.dloss_dlogit * scale, st.grad);
              if (!ema_active) continue;
              if (r.trace.item_active) {
                for (ItemId id : imp.sequence) st.item_stats.add(table->projected[id], table->gates[id]);
              }
              if (r.trace.window_active) {
                for (std::size_t m = 0; m < cache.window.gates.size(); ++m) {
                  st.window_stats.add(cache.window.projected[m], cache.window.gates[m]);
                }
              }
            }
          });
        } catch (const DomainError& e) {
          throw TrainingAbortedError("non-finite values at batch " + std::to_string(batch_counter) + ": " + e.what());
        } catch (const RoutingError& e) {
          throw TrainingAbortedError("routing failed at batch " + std::to_string(batch_counter) + ": " + e.what());
        }

        set_zero(total_grad);
        double batch_loss = 0.0;
        EmaAccumulator item_stats(n, theme_dim);
        EmaAccumulator window_stats(n, theme_dim);
        for (std::size_t c = 0; c < used; ++c) {
          accumulate(total_grad, chunks[c].grad);
          batch_loss += chunks[c].loss;
          item_stats.merge(chunks[c].item_stats);
          window_stats.merge(chunks[c].window_stats);
        }
        std::vector<TensorView> grads = total_grad.parameters();
        if (!std::isfinite(batch_loss)) {
          const std::string name = first_nonfinite(total_grad);
          throw TrainingAbortedError("non-finite loss at batch " + std::to_string(batch_counter) +
                                     (name.empty() ? std::string() : "; first non-finite gradient in '" + name + "'"));
        }
        for (std::size_t i = 0; i < params.size(); ++i) {
          if (!trainable[i]) continue;
          if (!all_finite(grads[i].values)) {
            throw TrainingAbortedError("non-finite gradient at batch " + std::to_string(batch_counter) +
                                       " in parameter '" + grads[i].name + "'");
          }
          adam_step(adam[i], params[i].values, grads[i].values);
        }
        if (ema_active) {
          ema_update(model.item.router.codebook, item_stats);
          ema_update(model.window.router.codebook, window_stats);
          for (std::size_t i = 0; i < n; ++i) load[i] += item_stats.counts()[i];
          if (config.on_batch && n >= 2) {
            config.on_batch({batch_counter, stage, item_stats.counts(), window_stats.counts(),
                             collapse_metric(model.item.router.codebook),
                             collapse_metric(model.window.router.codebook)});
          }
        }
        loss_sum += batch_loss;
      }

      EpochLog e;
      e.stage = stage;
      e.epoch = epoch_counter;
      e.train_loss = loss_sum / static_cast<double>(train_set.size());
      e.val_auc = nan();
      e.val_gauc = nan();
      if (!validation.empty()) {
        const std::vector<double> probs = predict(model, validation, stage, config.threads);
        std::vector<int> labels;
        labels.reserve(validation.size());
        for (const Impression& imp : validation) labels.push_back(imp.label);
        try {
          e.val_auc = auc(probs, labels);
        } catch (const MetricUndefinedError&) {
        }
        try {
          e.val_gauc = gauc(group_by_user(validation, probs));
        } catch (const MetricUndefinedError&) {
        }
      }
      e.collapse_item = n >= 2 ? collapse_metric(model.item.router.codebook) : 0.0;
      e.collapse_window = n >= 2 ? collapse_metric(model.window.router.codebook) : 0.0;
      e.load = load;
      if (ema_active) {
        if (e.collapse_item > kCollapseWarningThreshold) {
          result.warnings.push_back("epoch " + std::to_string(e.epoch) + ": item codebook collapse metric " +
                                    format_real(e.collapse_item));
        }
        if (e.collapse_window > kCollapseWarningThreshold) {
          result.warnings.push_back("epoch " + std::to_string(e.epoch) + ": window codebook collapse metric " +
                                    format_real(e.collapse_window));
        }
      }
      result.log.push_back(e);
      if (config.keep_best && stage == final_stage && std::isfinite(e.val_gauc) && e.val_gauc > best_gauc) {
        best_gauc = e.val_gauc;
        best = model;
      }
    }
    if (best) {
      model = std::move(*best);
      params = model.parameters();
    }
    if (on_stage_end) on_stage_end(stage, model);
  }
  return result;
}

}  // namespace mos
