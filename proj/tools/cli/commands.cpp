#include "commands.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>

#include "config.hpp"
#include "mos/analysis.hpp"
#include "mos/checkpoint.hpp"
#include "mos/data.hpp"
#include "mos/errors.hpp"
#include "mos/flops.hpp"
#include "mos/model.hpp"
#include "mos/train.hpp"

namespace mos::cli {
namespace {

namespace fs = std::filesystem;

struct Flags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string stage = "full";
  std::string mode;
  std::string data;
  std::string checkpoint;
};

// Marks an output directory as in use for the lifetime of one command.
class OutputLock {
 public:
  explicit OutputLock(const fs::path& dir) : path_(dir / ".mos.lock") {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create output directory " + dir.string() + ": " + ec.message());
    std::FILE* f = std::fopen(path_.c_str(), "wx");
    if (f == nullptr) throw IoError("output directory " + dir.string() + " is locked by another run");
    std::fclose(f);
  }
  ~OutputLock() {
    std::error_code ec;
    fs::remove(path_, ec);
  }
  OutputLock(const OutputLock&) = delete;
  OutputLock& operator=(const OutputLock&) = delete;

 private:
  fs::path path_;
};

std::size_t thread_count() {
  const char* env = std::getenv("MOS_THREADS");
  if (env == nullptr || *env == '\0') return 1;
  char* end = nullptr;
  const unsigned long v = std::strtoul(env, &end, 10);
  if (*end != '\0' || v == 0) throw ConfigError("MOS_THREADS must be a positive integer");
  return v;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed for " + path.string());
}

RunConfig resolve(const Flags& f) {
  RunConfig c = f.config.empty() ? RunConfig{} : load_config(f.config);
  if (f.seed) c.seed = f.seed;
  if (!f.out.empty()) c.out_path = f.out;
  if (!f.data.empty()) c.data_path = f.data;
  if (!f.checkpoint.empty()) c.checkpoint_path = f.checkpoint;
  validate(c);
  return c;
}

fs::path require_path(const std::string& p, const char* what) {
  if (p.empty()) throw ConfigError(std::string("missing required ") + what);
  return p;
}

std::string join(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? " " : "") + std::to_string(v[i]);
  return s;
}

void echo_config(const RunConfig& c, const fs::path& out) { write_text(out / "resolved_config.txt", render_config(c)); }

std::vector<Impression> select_split(const LabeledDataset& data, const RunConfig& c, const std::string& which) {
  if (which == "all") return data.impressions;
  DatasetSplit s = split(data.impressions, c.split);
  if (which == "train") return s.train;
  if (which == "validation") return s.validation;
  return s.test;
}

LoadedModel load_model(const fs::path& path) { return from_checkpoint(read_checkpoint(path)); }

void check_vocab(const MosModel& model, const LabeledDataset& data) {
  if (model.embedding.vocab_size() != data.vocab_size) {
    throw CompatibilityError("checkpoint vocabulary has " + std::to_string(model.embedding.vocab_size()) +
                             " items but the dataset has " + std::to_string(data.vocab_size));
  }
}

// ---- generate -----------------------------------------------------------------

int cmd_generate(const RunConfig& c, std::ostream& out) {
  const fs::path dir = require_path(c.out_path, "--out");
  OutputLock lock(dir);
  SyntheticConfig sc = c.data;
  sc.seed = *c.seed;
  const LabeledDataset data = generate_synthetic(sc);
  export_dataset(data, dir);
  echo_config(c, dir);
  out << "users=" << data.users << " items=" << data.vocab_size << " interactions=" << data.interactions.size()
      << " impressions=" << data.impressions.size() << "\n";
  return kExitOk;
}

// ---- train --------------------------------------------------------------------

int cmd_train(const RunConfig& c, const std::string& stage_flag, std::ostream& out, std::ostream& err) {
  if (stage_flag != "full" && stage_flag != "backbone-only") {
    throw ConfigError("--stage must be backbone-only or full");
  }
  const fs::path dir = require_path(c.out_path, "--out");
  const LabeledDataset data = load_dataset(require_path(c.data_path, "--data"));
  OutputLock lock(dir);
  const DatasetSplit parts = split(data.impressions, c.split);

  ModelConfig mc = c.model;
  mc.vocab_size = data.vocab_size;
  RngStream model_rng(*c.seed, 1);
  MosModel model = make_mos_model(mc, model_rng);
  if (c.pretrained_embeddings) {
    if (!data.item_embeddings) throw ConfigError("train.pretrained_embeddings needs item_vectors.bin in the dataset");
    if (data.item_embeddings->cols() != mc.dim || data.item_embeddings->rows() != mc.vocab_size) {
      throw ConfigError("dataset item vectors do not match model.dim and the vocabulary");
    }
    model.embedding.weights = *data.item_embeddings;
  }

  TrainConfig tc;
  tc.budgets = stage_flag == "backbone-only" ? backbone_only_budgets(c.budgets.total()) : c.budgets;
  tc.batch_size = c.batch_size;
  tc.adam = c.adam;
  tc.keep_best = c.keep_best;
  tc.threads = thread_count();
  tc.kmeans_sample = c.kmeans_sample;
  std::string diagnostics = router_diagnostics_header(mc.experts) + "\n";
  tc.on_batch = [&](const BatchDiagnostics& d) {
    diagnostics += router_diagnostics_row(d.batch, "item", d.item_counts, d.collapse_item) + "\n";
    diagnostics += router_diagnostics_row(d.batch, "window", d.window_counts, d.collapse_window) + "\n";
  };
  TrainingStage last_stage = TrainingStage::kBackboneWarmup;
  RngStream train_rng(*c.seed, 2);
  const TrainResult result = train(model, parts.train, parts.validation, tc, train_rng,
                                   [&](TrainingStage stage, MosModel& m) {
                                     last_stage = stage;
                                     write_checkpoint(dir / ("checkpoint_" + std::string(stage_tag(stage)) + ".mos"),
                                                      to_checkpoint(m, stage));
                                   });
  write_checkpoint(dir / "model.mos", to_checkpoint(model, last_stage));
  std::string log = training_log_header(mc.experts) + "\n";
  for (const EpochLog& e : result.log) log += training_log_row(e) + "\n";
  write_text(dir / "train_log.csv", log);
  write_text(dir / "router_diagnostics.csv", diagnostics);
  echo_config(c, dir);
  for (const std::string& w : result.warnings) err << "warning: " << w << "\n";
  out << "epochs=" << result.log.size() << " final_stage=" << stage_tag(last_stage);
  if (!result.log.empty()) {
    out << " val_auc=" << format_real(result.log.back().val_auc) << " val_gauc=" << format_real(result.log.back().val_gauc);
  }
  out << "\n";
  return kExitOk;
}

// ---- eval ---------------------------------------------------------------------

int cmd_eval(const RunConfig& c, std::ostream& out) {
  const fs::path dir = require_path(c.out_path, "--out");
  LoadedModel loaded = load_model(require_path(c.checkpoint_path, "--checkpoint"));
  const LabeledDataset data = load_dataset(require_path(c.data_path, "--data"));
  check_vocab(loaded.model, data);
  OutputLock lock(dir);
  const std::vector<Impression> imps = select_split(data, c, c.eval_split);
  const Evaluation e = evaluate(loaded.model, imps, loaded.stage, thread_count());
  std::string csv = "metric,value\n";
  csv += "auc," + format_real(e.auc) + "\n";
  csv += "gauc," + format_real(e.gauc) + "\n";
  csv += "impressions," + std::to_string(imps.size()) + "\n";
  csv += "flops_per_impression," + format_real(e.mean_flops) + "\n";
  for (std::size_t i = 0; i < e.load.size(); ++i) csv += "load_" + std::to_string(i) + "," + std::to_string(e.load[i]) + "\n";
  write_text(dir / "metrics.csv", csv);
  echo_config(c, dir);
  out << "auc=" << format_real(e.auc) << " gauc=" << format_real(e.gauc) << " impressions=" << imps.size() << "\n";
  return kExitOk;
}

// ---- analyze ------------------------------------------------------------------

void analyze_sessions(const RunConfig& c, const fs::path& dir, std::ostream& out) {
  const LabeledDataset data = load_dataset(require_path(c.data_path, "--data"));
  std::optional<Matrix> table;
  if (!c.checkpoint_path.empty()) {
    LoadedModel loaded = load_model(c.checkpoint_path);
    check_vocab(loaded.model, data);
    table = loaded.model.embedding.weights;
  } else if (data.item_embeddings) {
    table = *data.item_embeddings;
  } else {
    throw ConfigError("sessions mode needs --checkpoint or a dataset with item_vectors.bin");
  }
  std::string csv = "user,length,detected,truth,recovered,false_detections\n";
  std::size_t done = 0;
  std::optional<UserId> previous;
  for (const Impression& imp : data.impressions) {
    if (done >= c.session_users) break;
    if (previous && *previous == imp.user) continue;
    previous = imp.user;
    std::vector<Vector> xs;
    for (ItemId id : imp.sequence) xs.push_back(table->row_vector(id));
    SimilarityMatrix m = self_similarity(xs);
    check_similarity_invariants(m);
    m.boundaries = detect_sessions(m, c.session_window, c.session_threshold);
    std::vector<std::size_t> truth;
    if (data.truth) {
      for (std::size_t p = 1; p < imp.sequence.size(); ++p) {
        if (data.truth->item_theme[imp.sequence[p]] != data.truth->item_theme[imp.sequence[p - 1]]) truth.push_back(p);
      }
    }
    const BoundaryMatch match = match_boundaries(m.boundaries, truth);
    export_heatmap(m, dir / ("user_" + std::to_string(imp.user)));
    csv += std::to_string(imp.user) + "," + std::to_string(xs.size()) + "," + join(m.boundaries) + "," + join(truth) +
           "," + std::to_string(match.recovered) + "," + std::to_string(match.false_detections) + "\n";
    ++done;
  }
  write_text(dir / "sessions.csv", csv);
  out << "users=" << done << " heatmaps written to " << dir.string() << "\n";
}

void analyze_routing(const RunConfig& c, const fs::path& dir, std::ostream& out) {
  LoadedModel loaded = load_model(require_path(c.checkpoint_path, "--checkpoint"));
  const LabeledDataset data = load_dataset(require_path(c.data_path, "--data"));
  check_vocab(loaded.model, data);
  const RoutingReport report = routing_histogram(loaded.model, data, c.min_occurrences);
  const std::size_t n = loaded.model.config.experts;
  std::string csv = "item_id,occurrences";
  for (std::size_t i = 0; i < n; ++i) csv += ",expert_" + std::to_string(i);
  csv += "\n";
  for (const RoutingHistogram& h : report.items) {
    csv += std::to_string(h.item) + "," + std::to_string(h.occurrences);
    for (std::uint64_t d : h.dispatch) csv += "," + std::to_string(d);
    csv += "\n";
  }
  write_text(dir / "routing_histogram.csv", csv);
  std::string summary = "metric,value\n";
  summary += "qualifying_items," + std::to_string(report.items.size()) + "\n";
  summary += "min_occurrences," + std::to_string(c.min_occurrences) + "\n";
  auto describe = [&](const char* tag, const std::optional<std::size_t>& idx) {
    if (!idx) return;
    const RoutingHistogram& h = report.items[*idx];
    summary += std::string(tag) + "_item," + std::to_string(h.item) + "\n";
    summary += std::string(tag) + "_occurrences," + std::to_string(h.occurrences) + "\n";
    summary += std::string(tag) + "_modal_expert," + std::to_string(h.modal_expert()) + "\n";
    summary += std::string(tag) + "_modal_share," + format_real(h.modal_share()) + "\n";
  };
  describe("most_frequent", report.most_frequent);
  describe("least_frequent", report.least_frequent);
  if (data.truth) {
    summary += "theme_purity," + format_real(theme_routing_purity(loaded.model, data, data.truth->item_theme)) + "\n";
  }
  write_text(dir / "routing_summary.csv", summary);
  out << "qualifying_items=" << report.items.size();
  if (report.most_frequent) out << " most_frequent_share=" << format_real(report.items[*report.most_frequent].modal_share());
  out << "\n";
}

void analyze_flops(const RunConfig& c, const fs::path& dir, std::ostream& out) {
  std::optional<LabeledDataset> data;
  if (!c.data_path.empty()) data = load_dataset(c.data_path);
  MosModel model;
  TrainingStage stage = TrainingStage::kJoint;
  if (!c.checkpoint_path.empty()) {
    LoadedModel loaded = load_model(c.checkpoint_path);
    model = std::move(loaded.model);
    stage = loaded.stage;
    if (data) check_vocab(model, *data);
  } else {
    ModelConfig mc = c.model;
    mc.vocab_size = data ? data->vocab_size : 1;
    RngStream rng(*c.seed, 1);
    model = make_mos_model(mc, rng);
  }
  const ModelConfig& mc = model.config;
  std::string report = "component,flops_per_impression\n";
  if (data && !data->impressions.empty()) {
    const std::size_t count = std::min(c.flops_impressions, data->impressions.size());
    FlopsReport sum;
    const ItemGateTable table = build_item_gate_table(model);
    for (std::size_t i = 0; i < count; ++i) {
      const Impression& imp = data->impressions[i];
      const ForwardResult r = mos_forward(model, imp.sequence, imp.target, stage, &table);
      const FlopsReport f = count_flops(model, r.trace);
      sum.embedding += f.embedding;
      sum.global += f.global;
      sum.item_experts += f.item_experts;
      sum.window_experts += f.window_experts;
      sum.routers += f.routers;
      sum.fusion += f.fusion;
      sum.classifier += f.classifier;
    }
    const double k = static_cast<double>(count);
    auto row = [&](const char* name, std::uint64_t v) { report += std::string(name) + "," + format_real(static_cast<double>(v) / k) + "\n"; };
    row("embedding", sum.embedding);
    row("global", sum.global);
    row("item_experts", sum.item_experts);
    row("window_experts", sum.window_experts);
    row("routers", sum.routers);
    row("fusion", sum.fusion);
    row("classifier", sum.classifier);
    row("total", sum.total());
  }
  write_text(dir / "flops.csv", report);

  const double theory = moe_complexity_ratio(static_cast<double>(mc.k), static_cast<double>(mc.k),
                                             static_cast<double>(mc.experts), static_cast<double>(mc.experts),
                                             static_cast<double>(mc.window.stride));
  std::string table = "N,mos_extra,shared_moe,measured_ratio,theoretical_ratio\n";
  RngStream rng(*c.seed, 7);
  for (std::size_t len : {128u, 256u, 512u}) {
    const ComplexityMeasurement m = sampled_complexity(mc, len, c.complexity_trials, rng);
    table += std::to_string(len) + "," + std::to_string(m.mos_extra) + "," + std::to_string(m.shared_moe) + "," +
             format_real(m.measured_ratio) + "," + format_real(m.theoretical_ratio) + "\n";
  }
  write_text(dir / "complexity.csv", table);
  out << "theoretical_ratio " << format_real(theory) << "\n";
}

int cmd_analyze(const RunConfig& c, const std::string& mode, std::ostream& out) {
  const fs::path dir = require_path(c.out_path, "--out");
  if (mode != "sessions" && mode != "routing" && mode != "flops") {
    throw ConfigError("--mode must be sessions, routing or flops");
  }
  OutputLock lock(dir);
  if (mode == "sessions") analyze_sessions(c, dir, out);
  if (mode == "routing") analyze_routing(c, dir, out);
  if (mode == "flops") analyze_flops(c, dir, out);
  echo_config(c, dir);
  return kExitOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Theme-routed mixture-of-sequence CTR models", "mos"};
  app.require_subcommand(1);
  Flags f;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", f.config, "Configuration file (key = value lines)");
    sub->add_option("--seed", f.seed, "Overrides the configured seed");
    sub->add_option("--out", f.out, "Output directory");
  };
  CLI::App* gen = app.add_subcommand("generate", "Generate a synthetic dataset");
  add_common(gen);
  CLI::App* tr = app.add_subcommand("train", "Train a model");
  add_common(tr);
  tr->add_option("--data", f.data, "Dataset directory");
  tr->add_option("--stage", f.stage, "backbone-only or full");
  CLI::App* ev = app.add_subcommand("eval", "Evaluate a checkpoint");
  add_common(ev);
  ev->add_option("--data", f.data, "Dataset directory");
  ev->add_option("--checkpoint", f.checkpoint, "Checkpoint file");
  CLI::App* an = app.add_subcommand("analyze", "Session, routing and FLOPs analyses");
  add_common(an);
  an->add_option("--data", f.data, "Dataset directory");
  an->add_option("--checkpoint", f.checkpoint, "Checkpoint file");
  an->add_option("--mode", f.mode, "sessions, routing or flops")->required();

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kExitConfig;
  }

  try {
    const RunConfig c = resolve(f);
    if (gen->parsed()) return cmd_generate(c, out);
    if (tr->parsed()) return cmd_train(c, f.stage, out, err);
    if (ev->parsed()) return cmd_eval(c, out);
    if (an->parsed()) return cmd_analyze(c, f.mode, out);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const IoError& e) {
    err << "i/o error: " << e.what() << "\n";
    return kExitIo;
  } catch (const ParseError& e) {
    err << "i/o error: " << e.what() << "\n";
    return kExitIo;
  } catch (const TrainingAbortedError& e) {
    err << "training aborted: " << e.what() << "\n";
    return kExitTraining;
  } catch (const CompatibilityError& e) {
    err << "incompatible inputs: " << e.what() << "\n";
    return kExitCompatibility;
  } catch (const MetricUndefinedError& e) {
    err << "metric undefined: " << e.what() << "\n";
    return kExitMetricUndefined;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitFailure;
}

}  // namespace mos::cli
