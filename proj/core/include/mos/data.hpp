#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mos/nn.hpp"
#include "mos/numerics.hpp"

namespace mos {

using UserId = std::uint32_t;

struct Impression {
  UserId user = 0;
  std::vector<ItemId> sequence;  // chronological, most recent last
  ItemId target = 0;
  int label = 0;

  friend bool operator==(const Impression&, const Impression&) = default;
};

// One row of an interaction log. label is 0 or 1 for an impression row and
// kUnlabeled for a plain history event.
inline constexpr int kUnlabeled = -1;

struct Interaction {
  UserId user = 0;
  ItemId item = 0;
  std::int64_t timestamp = 0;
  int label = kUnlabeled;

  friend bool operator==(const Interaction&, const Interaction&) = default;
};

struct SyntheticConfig {
  std::size_t themes = 5;  // K
  std::size_t items_per_theme = 200;
  std::size_t dim = 16;
  double sigma = 0.15;
  double mean_session_length = 10.0;
  double p_switch = 0.7;
  double beta = 1.0;
  std::size_t max_sequence = 200;  // N
  std::size_t impressions_per_user = 20;
  std::size_t users = 500;
  double label_noise = 0.1;  // epsilon
  // Plain events between consecutive impressions of a user.
  std::size_t impression_gap = 10;
  std::uint64_t seed = 0;
};

void validate(const SyntheticConfig& cfg);

// Ground truth that only the generator knows.
struct GroundTruth {
  std::vector<std::uint32_t> item_theme;
  Matrix item_vectors;  // unit rows
  Matrix theme_centers;
  // Per user: theme of every event, in time order.
  std::vector<std::vector<std::uint32_t>> event_themes;
  // Per user: event indices where a new session (maximal same-theme run)
  // starts. Index 0 is never listed.
  std::vector<std::vector<std::size_t>> session_boundaries;
  // Per user: theme of every raw trajectory segment, including segments that
  // kept the previous theme.
  std::vector<std::vector<std::uint32_t>> segment_themes;
};

struct LabeledDataset {
  std::size_t vocab_size = 0;
  std::size_t max_sequence = 0;
  std::size_t users = 0;
  std::vector<Interaction> interactions;  // sorted by user, then time
  std::vector<Impression> impressions;    // sorted by user, then time
  std::optional<Matrix> item_embeddings;  // pre-loaded table, if any
  std::optional<GroundTruth> truth;
  std::uint64_t seed = 0;
  std::size_t themes = 0;
};

LabeledDataset generate_synthetic(const SyntheticConfig& cfg);

// Builds impressions from a log: every labeled row with at least one earlier
// row of the same user becomes an impression whose sequence is the preceding
// up-to-N rows. Rows are ordered by timestamp; ties keep input order.
std::vector<Impression> build_impressions(std::vector<Interaction>& interactions,
                                          std::size_t max_sequence);

// Rows: user_id TAB item_id TAB timestamp TAB label (label -1 marks a plain
// history event). An optional leading header line is skipped.
LabeledDataset ingest_tsv(const std::filesystem::path& interactions,
                          const std::optional<std::filesystem::path>& embeddings,
                          std::size_t max_sequence);

// Writes interactions.tsv, meta.txt, and, when ground truth exists,
// item_themes.tsv and item_vectors.bin into `dir`.
void export_dataset(const LabeledDataset& data, const std::filesystem::path& dir);
// Reads a directory written by export_dataset. Ground-truth themes and
// vectors are restored when present; sessions are not.
LabeledDataset load_dataset(const std::filesystem::path& dir);

struct SplitRatios {
  double train = 0.8;
  double validation = 0.1;
  double test = 0.1;
};

struct DatasetSplit {
  std::vector<Impression> train;
  std::vector<Impression> validation;
  std::vector<Impression> test;
};

// Temporal split per user: earliest impressions train, latest test.
DatasetSplit split(std::span<const Impression> impressions, const SplitRatios& ratios);

// Embedding file: magic "MOSEMB\0\0", u64 count, u64 dim, f64 row-major.
void write_embeddings(const std::filesystem::path& path, const Matrix& m);
Matrix read_embeddings(const std::filesystem::path& path);

}  // namespace mos
