#include "mos/metrics.hpp"

#include <algorithm>
#include <numeric>

#include "mos/errors.hpp"

namespace mos {
namespace {

struct Counts {
  double positives = 0.0;
  double negatives = 0.0;
};

Counts count_classes(std::span<const int> labels) {
  Counts c;
  for (int l : labels) {
    if (l == 1) {
      c.positives += 1.0;
    } else if (l == 0) {
      c.negatives += 1.0;
    } else {
      throw ArgumentError("metric labels must be 0 or 1");
    }
  }
  return c;
}

double rank_auc(std::span<const double> scores, std::span<const int> labels, const Counts& c) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double positive_rank_sum = 0.0;
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    // Ranks i+1 .. j share their average.
    const double avg = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t p = i; p < j; ++p) {
      if (labels[order[p]] == 1) positive_rank_sum += avg;
    }
    i = j;
  }
  return (positive_rank_sum - c.positives * (c.positives + 1.0) / 2.0) / (c.positives * c.negatives);
}

}  // namespace

double auc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw ArgumentError("auc: scores and labels differ in length");
  const Counts c = count_classes(labels);
  if (c.positives == 0.0 || c.negatives == 0.0) {
    throw MetricUndefinedError("AUC is undefined without both positive and negative labels");
  }
  return rank_auc(scores, labels, c);
}

double gauc(std::span<const ScoredGroup> groups) {
  double weighted = 0.0;
  double total = 0.0;
  for (const ScoredGroup& g : groups) {
    if (g.scores.size() != g.labels.size()) throw ArgumentError("gauc: group scores and labels differ in length");
    const Counts c = count_classes(g.labels);
    if (c.positives == 0.0 || c.negatives == 0.0) continue;
    const double w = c.positives * c.negatives;
    weighted += w * rank_auc(g.scores, g.labels, c);
    total += w;
  }
  if (total == 0.0) throw MetricUndefinedError("GAUC is undefined: no group has both classes");
  return weighted / total;
}

}  // namespace mos
