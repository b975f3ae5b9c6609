#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "mos/data.hpp"
#include "mos/model.hpp"

namespace mos {

struct SimilarityMatrix {
  Matrix values;                        // t x t cosines
  std::vector<std::size_t> boundaries;  // positions where a session starts
};

// M[i][j] = cos(x_i, x_j). Throws DomainError naming a zero-norm position.
SimilarityMatrix self_similarity(std::span<const Vector> seq_embeddings);

// Throws DomainError unless M is symmetric with unit diagonal (1e-12).
void check_similarity_invariants(const SimilarityMatrix& m);

// Position p is a candidate when the mean cosine between [p-w, p) and
// [p, p+w) is below tau; candidates fewer than w positions apart are merged
// onto the one with the lowest contrast.
std::vector<std::size_t> detect_sessions(const SimilarityMatrix& m, std::size_t w = 3, double tau = 0.35);

struct BoundaryMatch {
  std::size_t truth = 0;
  std::size_t detected = 0;
  std::size_t recovered = 0;  // truth boundaries with a detection within tolerance
  std::size_t false_detections = 0;  // detections with no truth boundary within tolerance

  double recall() const { return truth == 0 ? 1.0 : static_cast<double>(recovered) / static_cast<double>(truth); }
  double false_rate() const {
    return detected == 0 ? 0.0 : static_cast<double>(false_detections) / static_cast<double>(detected);
  }
};

BoundaryMatch match_boundaries(std::span<const std::size_t> detected, std::span<const std::size_t> truth,
                               std::size_t tolerance = 1);

struct RoutingHistogram {
  ItemId item = 0;
  std::uint64_t occurrences = 0;
  std::vector<std::uint64_t> dispatch;  // per expert

  std::size_t modal_expert() const;
  double modal_share() const;
};

struct RoutingReport {
  std::vector<RoutingHistogram> items;  // qualifying items, ascending id
  std::optional<std::size_t> most_frequent;   // index into items
  std::optional<std::size_t> least_frequent;  // index into items
};

inline constexpr std::uint64_t kDefaultMinOccurrences = 8;

// Tallies item-router gate support over every interaction in the log.
RoutingReport routing_histogram(const MosModel& model, const LabeledDataset& data,
                                std::uint64_t min_occurrences = kDefaultMinOccurrences);

// Per ground-truth theme, share of its item occurrences dispatched to the
// theme's modal expert; returns the mean over themes that occur.
double theme_routing_purity(const MosModel& model, const LabeledDataset& data,
                            std::span<const std::uint32_t> item_theme);

// Writes <stem>.csv and an 8-bit binary PGM <stem>.pgm. Values map linearly
// from [-1, 1] to [0, 255]; a black row and column precede every boundary.
void export_heatmap(const SimilarityMatrix& m, const std::filesystem::path& stem);
Matrix read_matrix_csv(const std::filesystem::path& path);

}  // namespace mos
