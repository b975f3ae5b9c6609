#include "config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

#include "mos/errors.hpp"

namespace mos::cli {
namespace {

struct Key {
  const char* name;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

std::uint64_t to_uint(const std::string& v) {
  std::uint64_t out = 0;
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) throw ConfigError("expected a nonnegative integer, got '" + v + "'");
  return out;
}

double to_real(const std::string& v) {
  if (v.empty()) throw ConfigError("expected a number, got an empty value");
  std::size_t used = 0;
  double out = 0.0;
  try {
    out = std::stod(v, &used);
  } catch (const std::exception&) {
    throw ConfigError("expected a number, got '" + v + "'");
  }
  if (used != v.size()) throw ConfigError("expected a number, got '" + v + "'");
  return out;
}

bool to_bool(const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("expected true or false, got '" + v + "'");
}

std::string from_bool(bool b) { return b ? "true" : "false"; }

#define MOS_SIZE_KEY(NAME, FIELD)                                                   \
  Key {                                                                             \
    NAME, [](RunConfig& c, const std::string& v) { c.FIELD = to_uint(v); },         \
        [](const RunConfig& c) { return std::to_string(c.FIELD); }                  \
  }
#define MOS_REAL_KEY(NAME, FIELD)                                                   \
  Key {                                                                             \
    NAME, [](RunConfig& c, const std::string& v) { c.FIELD = to_real(v); },         \
        [](const RunConfig& c) { return format_real(c.FIELD); }                     \
  }
#define MOS_BOOL_KEY(NAME, FIELD)                                                   \
  Key {                                                                             \
    NAME, [](RunConfig& c, const std::string& v) { c.FIELD = to_bool(v); },         \
        [](const RunConfig& c) { return from_bool(c.FIELD); }                       \
  }
#define MOS_STRING_KEY(NAME, FIELD)                                                 \
  Key {                                                                             \
    NAME, [](RunConfig& c, const std::string& v) { c.FIELD = v; },                  \
        [](const RunConfig& c) { return c.FIELD; }                                  \
  }

const std::vector<Key>& registry() {
  static const std::vector<Key> keys = {
      Key{"seed", [](RunConfig& c, const std::string& v) { c.seed = to_uint(v); },
          [](const RunConfig& c) { return c.seed ? std::to_string(*c.seed) : std::string(); }},
      MOS_SIZE_KEY("data.themes", data.themes),
      MOS_SIZE_KEY("data.items_per_theme", data.items_per_theme),
      MOS_SIZE_KEY("data.dim", data.dim),
      MOS_REAL_KEY("data.sigma", data.sigma),
      MOS_REAL_KEY("data.mean_session_length", data.mean_session_length),
      MOS_REAL_KEY("data.p_switch", data.p_switch),
      MOS_REAL_KEY("data.beta", data.beta),
      MOS_SIZE_KEY("data.max_sequence", data.max_sequence),
      MOS_SIZE_KEY("data.impressions_per_user", data.impressions_per_user),
      MOS_SIZE_KEY("data.users", data.users),
      MOS_REAL_KEY("data.label_noise", data.label_noise),
      MOS_SIZE_KEY("data.impression_gap", data.impression_gap),
      MOS_REAL_KEY("split.train", split.train),
      MOS_REAL_KEY("split.validation", split.validation),
      MOS_REAL_KEY("split.test", split.test),
      MOS_SIZE_KEY("model.dim", model.dim),
      MOS_SIZE_KEY("model.theme_dim", model.theme_dim),
      MOS_SIZE_KEY("model.experts", model.experts),
      MOS_SIZE_KEY("model.k", model.k),
      MOS_SIZE_KEY("model.ffn_hidden", model.ffn_hidden),
      MOS_SIZE_KEY("model.router_hidden", model.router_hidden),
      MOS_SIZE_KEY("model.head_hidden", model.head_hidden),
      MOS_SIZE_KEY("model.window_length", model.window.length),
      MOS_SIZE_KEY("model.window_stride", model.window.stride),
      MOS_REAL_KEY("model.alpha_item", model.fusion.item),
      MOS_REAL_KEY("model.alpha_window", model.fusion.window),
      MOS_REAL_KEY("model.ema_decay", model.ema_decay),
      MOS_SIZE_KEY("train.backbone_warmup_epochs", budgets.backbone_warmup),
      MOS_SIZE_KEY("train.expert_warmup_epochs", budgets.expert_warmup),
      MOS_SIZE_KEY("train.joint_epochs", budgets.joint),
      MOS_SIZE_KEY("train.batch_size", batch_size),
      MOS_REAL_KEY("train.learning_rate", adam.learning_rate),
      MOS_REAL_KEY("train.beta1", adam.beta1),
      MOS_REAL_KEY("train.beta2", adam.beta2),
      MOS_REAL_KEY("train.epsilon", adam.epsilon),
      MOS_BOOL_KEY("train.keep_best", keep_best),
      MOS_SIZE_KEY("train.kmeans_sample", kmeans_sample),
      MOS_BOOL_KEY("train.pretrained_embeddings", pretrained_embeddings),
      MOS_STRING_KEY("eval.split", eval_split),
      MOS_SIZE_KEY("analyze.session_users", session_users),
      MOS_SIZE_KEY("analyze.session_window", session_window),
      MOS_REAL_KEY("analyze.session_threshold", session_threshold),
      MOS_SIZE_KEY("analyze.min_occurrences", min_occurrences),
      MOS_SIZE_KEY("analyze.flops_impressions", flops_impressions),
      MOS_SIZE_KEY("analyze.complexity_trials", complexity_trials),
      MOS_STRING_KEY("paths.data", data_path),
      MOS_STRING_KEY("paths.checkpoint", checkpoint_path),
      MOS_STRING_KEY("paths.out", out_path),
  };
  return keys;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

std::vector<std::string> config_keys() {
  std::vector<std::string> out;
  for (const Key& k : registry()) out.emplace_back(k.name);
  return out;
}

RunConfig parse_config(const std::string& text, const std::string& origin) {
  RunConfig c;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  std::set<std::string> seen;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const std::string where = origin + ":" + std::to_string(line_no);
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + ": expected 'key = value'");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    const Key* match = nullptr;
    for (const Key& k : registry()) {
      if (key == k.name) match = &k;
    }
    if (match == nullptr) throw ConfigError(where + ": unknown key '" + key + "'");
    if (!seen.insert(key).second) throw ConfigError(where + ": duplicate key '" + key + "'");
    try {
      match->set(c, value);
    } catch (const ConfigError& e) {
      throw ConfigError(where + ": key '" + key + "': " + e.what());
    }
  }
  return c;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), path.string());
}

void validate(const RunConfig& c) {
  if (!c.seed) throw ConfigError("missing required key 'seed'");
  try {
    mos::validate(c.data);
    ModelConfig m = c.model;
    m.vocab_size = 1;
    mos::validate(m);
  } catch (const ArgumentError& e) {
    throw ConfigError(e.what());
  }
  if (c.batch_size < 1) throw ConfigError("train.batch_size must be positive");
  if (!(c.adam.learning_rate > 0.0)) throw ConfigError("train.learning_rate must be positive");
  if (!(c.adam.beta1 >= 0.0 && c.adam.beta1 < 1.0) || !(c.adam.beta2 >= 0.0 && c.adam.beta2 < 1.0)) {
    throw ConfigError("train.beta1 and train.beta2 must lie in [0, 1)");
  }
  if (!(c.adam.epsilon > 0.0)) throw ConfigError("train.epsilon must be positive");
  const double total = c.split.train + c.split.validation + c.split.test;
  if (!(c.split.train > 0.0 && c.split.validation >= 0.0 && c.split.test >= 0.0) || std::abs(total - 1.0) > 1e-9) {
    throw ConfigError("split ratios must be nonnegative, with positive train share, and sum to 1");
  }
  if (c.eval_split != "test" && c.eval_split != "validation" && c.eval_split != "train" && c.eval_split != "all") {
    throw ConfigError("eval.split must be one of test, validation, train, all");
  }
  if (c.session_window < 1) throw ConfigError("analyze.session_window must be >= 1");
  if (c.complexity_trials < 1) throw ConfigError("analyze.complexity_trials must be positive");
  if (!(c.session_threshold > -1.0 && c.session_threshold < 1.0)) {
    throw ConfigError("analyze.session_threshold must lie in (-1, 1)");
  }
}

std::string render_config(const RunConfig& c) {
  std::string out;
  for (const Key& k : registry()) out += std::string(k.name) + " = " + k.get(c) + "\n";
  return out;
}

}  // namespace mos::cli
