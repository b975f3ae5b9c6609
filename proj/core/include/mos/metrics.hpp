#pragma once

#include <span>
#include <vector>

namespace mos {

// Rank-sum AUC with average ranks for tied scores. Throws
// MetricUndefinedError unless both classes are present.
double auc(std::span<const double> scores, std::span<const int> labels);

struct ScoredGroup {
  std::vector<double> scores;
  std::vector<int> labels;
};

// Per-group AUC weighted by n_pos * n_neg. Groups missing a class are
// skipped; throws MetricUndefinedError when none remain.
double gauc(std::span<const ScoredGroup> groups);

}  // namespace mos
