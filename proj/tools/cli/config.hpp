#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "mos/analysis.hpp"
#include "mos/data.hpp"
#include "mos/model.hpp"
#include "mos/train.hpp"

namespace mos::cli {

struct RunConfig {
  std::optional<std::uint64_t> seed;
  SyntheticConfig data;
  SplitRatios split;
  ModelConfig model;
  StageBudgets budgets;
  std::size_t batch_size = 256;
  AdamConfig adam;
  bool keep_best = true;
  std::size_t kmeans_sample = 4096;
  // Initialize the embedding table from the dataset's item vectors.
  bool pretrained_embeddings = false;
  std::string eval_split = "test";  // test | validation | train | all
  std::size_t session_users = 5;
  std::size_t session_window = 3;
  double session_threshold = 0.35;
  std::uint64_t min_occurrences = kDefaultMinOccurrences;
  std::size_t flops_impressions = 200;
  std::size_t complexity_trials = 16;
  std::string data_path;
  std::string checkpoint_path;
  std::string out_path;
};

// Parses `key = value` lines; '#' starts a comment. Unknown keys, malformed
// values and duplicate keys throw ConfigError naming the line.
RunConfig parse_config(const std::string& text, const std::string& origin = "config");
RunConfig load_config(const std::filesystem::path& path);

// Checks cross-field invariants; throws ConfigError.
void validate(const RunConfig& c);

// Every key with its resolved value, one `key = value` per line.
std::string render_config(const RunConfig& c);

std::vector<std::string> config_keys();

}  // namespace mos::cli
