#include "mos/model.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "mos/errors.hpp"

namespace mos {

void validate(const FusionWeights& w) {
  if (!(w.item >= 0.0 && w.item <= 1.0) || !(w.window >= 0.0 && w.window <= 1.0) ||
      !(w.item + w.window <= 1.0)) {
    throw ArgumentError("fusion weights must satisfy 0 <= alpha_I, alpha_W and alpha_I + alpha_W <= 1");
  }
}

const char* stage_tag(TrainingStage stage) {
  switch (stage) {
    case TrainingStage::kBackboneWarmup:
      return "backbone_warmup";
    case TrainingStage::kExpertWarmup:
      return "expert_warmup";
    case TrainingStage::kJoint:
      return "joint";
  }
  return "joint";
}

TrainingStage parse_stage_tag(const std::string& tag) {
  if (tag == "backbone_warmup") return TrainingStage::kBackboneWarmup;
  if (tag == "expert_warmup") return TrainingStage::kExpertWarmup;
  if (tag == "joint") return TrainingStage::kJoint;
  throw ArgumentError("unknown training stage '" + tag + "'");
}

FusionWeights effective_fusion(const FusionWeights& configured, TrainingStage stage) {
  switch (stage) {
    case TrainingStage::kBackboneWarmup:
      return {0.0, 0.0};
    case TrainingStage::kExpertWarmup:
      return {0.5, 0.5};
    case TrainingStage::kJoint:
      return configured;
  }
  return configured;
}

void validate(const ModelConfig& c) {
  if (c.vocab_size < 1) throw ArgumentError("model vocab_size must be positive");
  if (c.dim < 1 || c.theme_dim < 1 || c.ffn_hidden < 1 || c.head_hidden < 1) {
    throw ArgumentError("model dimensions must be positive");
  }
  if (c.experts < 1) throw ArgumentError("model needs at least one expert per group");
  if (c.k < 1 || c.k > c.experts) throw ArgumentError("router k must lie in [1, n]");
  if (c.window.length < 1 || c.window.stride < 1) throw ArgumentError("window size and stride must be >= 1");
  if (c.window.stride > c.window.length) throw ArgumentError("window stride must not exceed the window size");
  if (!(c.ema_decay > 0.0 && c.ema_decay < 1.0)) throw ArgumentError("EMA decay must lie in (0, 1)");
  validate(c.fusion);
}

std::vector<TensorView> MosModel::parameters() {
  std::vector<TensorView> out;
  embedding.collect("embedding", out);
  global.collect("global", out);
  for (std::size_t i = 0; i < item.experts.size(); ++i) {
    item.experts[i].collect("item_expert." + std::to_string(i), out);
  }
  item.router.collect("item_router.proj", out);
  for (std::size_t i = 0; i < window.experts.size(); ++i) {
    window.experts[i].collect("window_expert." + std::to_string(i), out);
  }
  window.router.collect("window_router.proj", out);
  head.collect("head", out);
  return out;
}

MosModel make_mos_model(const ModelConfig& config, RngStream& rng) {
  validate(config);
  MosModel m;
  m.config = config;
  const std::size_t router_hidden = config.router_hidden == 0 ? config.theme_dim : config.router_hidden;
  m.embedding.weights = Matrix(config.vocab_size, config.dim);
  const double bound = 1.0 / std::sqrt(static_cast<double>(config.dim));
  for (double& v : m.embedding.weights.data()) v = rng.uniform(-bound, bound);
  m.global = make_attention_block(config.dim, config.ffn_hidden, rng);
  m.item = make_expert_group(config.dim, config.theme_dim, router_hidden, config.ffn_hidden,
                             config.experts, config.k, config.ema_decay, rng);
  m.window = make_expert_group(config.dim, config.theme_dim, router_hidden, config.ffn_hidden,
                               config.experts, config.k, config.ema_decay, rng);
  m.head = make_mlp({2 * config.dim, config.head_hidden, 1}, Activation::kIdentity, rng);
  return m;
}

MosModel zeros_like(const MosModel& model) {
  MosModel z;
  z.config = model.config;
  z.embedding.weights = Matrix(model.embedding.weights.rows(), model.embedding.weights.cols());
  z.global = zeros_like(model.global);
  z.item = zeros_like(model.item);
  z.window = zeros_like(model.window);
  z.head = zeros_like(model.head);
  return z;
}

void set_zero(MosModel& grad) {
  for (TensorView& t : grad.parameters()) std::fill(t.values.begin(), t.values.end(), 0.0);
}

void accumulate(MosModel& grad, MosModel& other) {
  auto a = grad.parameters();
  auto b = other.parameters();
  for (std::size_t i = 0; i < a.size(); ++i) axpy(1.0, b[i].values, a[i].values);
}

bool is_trainable(const std::string& name, TrainingStage stage) {
  auto starts = [&](const char* p) { return name.rfind(p, 0) == 0; };
  const bool backbone = name == "embedding" || starts("global.") || starts("head.");
  switch (stage) {
    case TrainingStage::kBackboneWarmup:
      return backbone;
    case TrainingStage::kExpertWarmup:
      return starts("item_expert.") || starts("window_expert.") || starts("item_router.") ||
             starts("window_router.");
    case TrainingStage::kJoint:
      return true;
  }
  return false;
}

StageParameterSets stage_parameter_sets(MosModel& model, TrainingStage stage) {
  StageParameterSets s;
  for (const TensorView& t : model.parameters()) {
    (is_trainable(t.name, stage) ? s.trainable : s.frozen).push_back(t.name);
  }
  s.ema_active = stage != TrainingStage::kBackboneWarmup;
  return s;
}

ItemGateTable build_item_gate_table(const MosModel& model) {
  ItemGateTable table;
  const std::size_t v = model.embedding.vocab_size();
  table.gates.reserve(v);
  table.projected.reserve(v);
  for (std::size_t id = 0; id < v; ++id) {
    Route r;
    try {
      r = route(model.item.router, model.embedding.weights.row(id));
    } catch (const RoutingError& e) {
      throw RoutingError("item " + std::to_string(id) + ": " + e.what());
    }
    table.gates.push_back(std::move(r.gate));
    table.projected.push_back(std::move(r.projected));
  }
  return table;
}

ForwardResult mos_forward(const MosModel& model, std::span<const ItemId> sequence, ItemId target,
                          TrainingStage stage, const ItemGateTable* table, ForwardCache* cache) {
  if (sequence.empty()) throw ArgumentError("mos_forward: empty sequence");
  std::vector<Vector> xs = embed(model.embedding, sequence);
  const ItemId target_ids[1] = {target};
  const Vector target_emb = std::move(embed(model.embedding, target_ids)[0]);

  ForwardResult r;
  r.trace.alphas = effective_fusion(model.config.fusion, stage);
  r.trace.sequence_length = xs.size();
  const double a_item = r.trace.alphas.item;
  const double a_window = r.trace.alphas.window;
  const double a_global = 1.0 - a_item - a_window;

  if (a_global != 0.0) {
    r.y_global = global_expert_forward(model.global, xs, cache != nullptr ? &cache->global : nullptr);
  }
  if (a_item != 0.0) {
    r.trace.item_active = true;
    std::vector<GateVector> gates;
    if (table != nullptr) {
      gates.reserve(sequence.size());
      for (ItemId id : sequence) gates.push_back(table->gates[id]);
    }
    r.y_item = routed_group_forward(model.item, xs, gates, &r.trace.item,
                                    cache != nullptr ? &cache->item : nullptr);
  }
  WindowSequence windows;
  if (a_window != 0.0) {
    r.trace.window_active = true;
    windows = window_transform(xs, model.config.window);
    r.trace.window_count = windows.embeddings.size();
    r.y_window = routed_group_forward(model.window, windows.embeddings, {}, &r.trace.window,
                                      cache != nullptr ? &cache->window : nullptr);
  }

  bool first = true;
  auto fuse = [&](double alpha, const Vector& part) {
    if (alpha == 0.0) return;
    if (first) {
      r.y = scaled(part, alpha);
      first = false;
    } else {
      axpy(alpha, part, r.y);
    }
  };
  fuse(a_global, r.y_global);
  fuse(a_item, r.y_item);
  fuse(a_window, r.y_window);

  r.logit = classifier_forward(model.head, r.y, target_emb, cache != nullptr ? &cache->head : nullptr);
  r.prob = sigmoid(r.logit);
  if (cache != nullptr) {
    cache->items.assign(sequence.begin(), sequence.end());
    cache->target = target;
    cache->embeddings = std::move(xs);
    cache->windows = std::move(windows);
  }
  return r;
}

void mos_backward(const MosModel& model, const ForwardCache& cache, const ForwardTrace& trace,
                  double dlogit, MosModel& grad) {
  ClassifierGrad hg = classifier_backward(model.head, cache.head, dlogit, grad.head);
  axpy(1.0, hg.d_target, grad.embedding.weights.row(cache.target));

  const std::size_t t = cache.items.size();
  const double a_item = trace.alphas.item;
  const double a_window = trace.alphas.window;
  const double a_global = 1.0 - a_item - a_window;
  std::vector<Vector> dx(t, Vector(model.config.dim, 0.0));

  if (a_global != 0.0) {
    Vector dy = scaled(hg.d_user, a_global);
    auto d = expert_block_backward(model.global, cache.global, dy, grad.global);
    for (std::size_t p = 0; p < t; ++p) axpy(1.0, d[p], dx[p]);
  }
  if (trace.item_active) {
    Vector dy = scaled(hg.d_user, a_item);
    auto d = routed_group_backward(model.item, cache.item, dy, grad.item);
    for (std::size_t p = 0; p < t; ++p) axpy(1.0, d[p], dx[p]);
  }
  if (trace.window_active) {
    Vector dy = scaled(hg.d_user, a_window);
    auto dw = routed_group_backward(model.window, cache.window, dy, grad.window);
    auto d = window_transform_backward(cache.windows, dw, t);
    for (std::size_t p = 0; p < t; ++p) axpy(1.0, d[p], dx[p]);
  }
  for (std::size_t p = 0; p < t; ++p) axpy(1.0, dx[p], grad.embedding.weights.row(cache.items[p]));
}

double backbone_logit(const ItemEmbeddingTable& embedding, const AttentionBlockParams& global,
                      const MlpParams& head, std::span<const ItemId> sequence, ItemId target) {
  std::vector<Vector> xs = embed(embedding, sequence);
  const ItemId target_ids[1] = {target};
  const Vector target_emb = embed(embedding, target_ids)[0];
  const Vector y = expert_block_forward(global, xs);
  return classifier_forward(head, y, target_emb);
}

// ---- checkpoint mapping ---------------------------------------------------------

namespace {

NamedTensor scalar(const std::string& name, double v) { return {"meta/" + name, {1}, {v}}; }

void push_codebook(const std::string& group, const Codebook& cb, std::vector<NamedTensor>& out) {
  out.push_back({"buffer/" + group + "_codebook", {cb.rows.rows(), cb.rows.cols()}, cb.rows.data()});
  Vector usage(cb.usage.begin(), cb.usage.end());
  out.push_back({"buffer/" + group + "_usage", {usage.size()}, usage});
}

}  // namespace

std::vector<NamedTensor> to_checkpoint(MosModel& model, TrainingStage stage) {
  const ModelConfig& c = model.config;
  std::vector<NamedTensor> out;
  out.push_back(scalar("vocab_size", static_cast<double>(c.vocab_size)));
  out.push_back(scalar("dim", static_cast<double>(c.dim)));
  out.push_back(scalar("theme_dim", static_cast<double>(c.theme_dim)));
  out.push_back(scalar("experts", static_cast<double>(c.experts)));
  out.push_back(scalar("k", static_cast<double>(c.k)));
  out.push_back(scalar("ffn_hidden", static_cast<double>(c.ffn_hidden)));
  out.push_back(scalar("router_hidden", static_cast<double>(c.router_hidden)));
  out.push_back(scalar("head_hidden", static_cast<double>(c.head_hidden)));
  out.push_back(scalar("window_length", static_cast<double>(c.window.length)));
  out.push_back(scalar("window_stride", static_cast<double>(c.window.stride)));
  out.push_back(scalar("alpha_item", c.fusion.item));
  out.push_back(scalar("alpha_window", c.fusion.window));
  out.push_back(scalar("ema_decay", c.ema_decay));
  out.push_back(scalar("stage", static_cast<double>(static_cast<int>(stage))));
  for (const TensorView& t : model.parameters()) {
    out.push_back({t.name, t.shape, Vector(t.values.begin(), t.values.end())});
  }
  push_codebook("item", model.item.router.codebook, out);
  push_codebook("window", model.window.router.codebook, out);
  return out;
}

LoadedModel from_checkpoint(const std::vector<NamedTensor>& tensors) {
  std::map<std::string, const NamedTensor*> by_name;
  for (const NamedTensor& t : tensors) by_name[t.name] = &t;
  auto find = [&](const std::string& name) -> const NamedTensor& {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw ParseError("checkpoint is missing tensor '" + name + "'");
    return *it->second;
  };
  auto meta = [&](const std::string& name) {
    const NamedTensor& t = find("meta/" + name);
    if (t.values.size() != 1) throw ParseError("checkpoint meta '" + name + "' is not a scalar");
    return t.values[0];
  };
  auto count = [&](const std::string& name) { return static_cast<std::size_t>(meta(name)); };

  ModelConfig c;
  c.vocab_size = count("vocab_size");
  c.dim = count("dim");
  c.theme_dim = count("theme_dim");
  c.experts = count("experts");
  c.k = count("k");
  c.ffn_hidden = count("ffn_hidden");
  c.router_hidden = count("router_hidden");
  c.head_hidden = count("head_hidden");
  c.window.length = count("window_length");
  c.window.stride = count("window_stride");
  c.fusion.item = meta("alpha_item");
  c.fusion.window = meta("alpha_window");
  c.ema_decay = meta("ema_decay");
  const int stage = static_cast<int>(meta("stage"));
  if (stage < 0 || stage > 2) throw ParseError("checkpoint has an invalid stage tag");

  RngStream scratch(0, 0);
  LoadedModel loaded{make_mos_model(c, scratch), static_cast<TrainingStage>(stage)};
  for (TensorView& view : loaded.model.parameters()) {
    const NamedTensor& t = find(view.name);
    if (t.shape != view.shape) throw ParseError("checkpoint tensor '" + view.name + "' has the wrong shape");
    std::copy(t.values.begin(), t.values.end(), view.values.begin());
  }
  auto load_codebook = [&](const std::string& group, Codebook& cb) {
    const NamedTensor& rows = find("buffer/" + group + "_codebook");
    const NamedTensor& usage = find("buffer/" + group + "_usage");
    const std::vector<std::uint64_t> shape{cb.rows.rows(), cb.rows.cols()};
    if (rows.shape != shape || usage.values.size() != cb.usage.size()) {
      throw ParseError("checkpoint codebook '" + group + "' has the wrong shape");
    }
    cb.rows.data() = rows.values;
    for (std::size_t i = 0; i < cb.usage.size(); ++i) {
      cb.usage[i] = static_cast<std::uint64_t>(usage.values[i]);
    }
  };
  load_codebook("item", loaded.model.item.router.codebook);
  load_codebook("window", loaded.model.window.router.codebook);
  return loaded;
}

}  // namespace mos
