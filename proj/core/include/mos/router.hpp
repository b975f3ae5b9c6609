#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mos/nn.hpp"
#include "mos/numerics.hpp"

namespace mos {

inline constexpr double kDefaultEmaDecay = 0.999;
inline constexpr double kCollapseWarningThreshold = 0.95;

// Theme vectors, one row per expert. Maintained only by ema_update; never a
// trainable parameter.
struct Codebook {
  Matrix rows;  // n x D
  double decay = kDefaultEmaDecay;
  std::vector<std::uint64_t> usage;

  std::size_t num_experts() const { return rows.rows(); }
  std::size_t dim() const { return rows.cols(); }
};

// Random unit rows; a placeholder until k-means initialization runs.
Codebook make_random_codebook(std::size_t experts, std::size_t dim, double decay, RngStream& rng);

struct ThemeRouter {
  MlpParams projection;  // h: d -> D
  Codebook codebook;
  std::size_t k = 1;

  std::size_t num_experts() const { return codebook.num_experts(); }
  // Gradient-trained tensors only (the projection); the codebook is a buffer.
  void collect(const std::string& prefix, std::vector<TensorView>& out) { projection.collect(prefix, out); }
};

// Two-layer projection (d -> D -> D, ReLU hidden, linear output), random
// codebook.
ThemeRouter make_theme_router(std::size_t input_dim, std::size_t theme_dim, std::size_t hidden,
                              std::size_t experts, std::size_t k, double decay, RngStream& rng);

struct GateVector {
  Vector weights;
  std::vector<std::size_t> support;  // ascending indices of positive weights

  bool selects(std::size_t expert) const { return weights[expert] > 0.0; }
};

// Cosine of `projected` against every codebook row.
Vector codebook_scores(const Codebook& codebook, std::span<const double> projected);

// H(x)[i] = cos(h(x), W_i). Throws RoutingError when h(x) has zero norm.
Vector theme_scores(const ThemeRouter& router, std::span<const double> x);

// softmax(keep_top_k(scores, k)).
GateVector gate(std::span<const double> scores, std::size_t k);

// Full routing decision for one input, with what the backward pass needs.
struct Route {
  Vector projected;  // h(x)
  Vector scores;
  GateVector gate;
  MlpCache projection_cache;
};

Route route(const ThemeRouter& router, std::span<const double> x, bool keep_cache = false);

// Backpropagates dL/dgate.weights through softmax over the (fixed) support,
// cosine scoring and the projection. Accumulates projection gradients into
// `grad`; returns dL/dx.
Vector route_backward(const ThemeRouter& router, const Route& r, std::span<const double> dgate,
                      MlpParams& grad);

// Batch statistics for one EMA step: per-expert sums and counts of h(x) over
// inputs whose gate selects the expert.
class EmaAccumulator {
 public:
  EmaAccumulator(std::size_t experts, std::size_t dim);
  void add(std::span<const double> projected, const GateVector& g, std::uint64_t weight = 1);
  const std::vector<std::uint64_t>& counts() const { return counts_; }
  const Matrix& sums() const { return sums_; }
  void merge(const EmaAccumulator& other);

 private:
  Matrix sums_;
  std::vector<std::uint64_t> counts_;
};

struct RoutedSample {
  Vector projected;
  GateVector gate;
};

// W_i <- decay * W_i + (1 - decay) * mean{h(x) : G(x)[i] > 0}. Experts that
// received nothing keep their row.
void ema_update(Codebook& codebook, std::span<const RoutedSample> batch);
void ema_update(Codebook& codebook, const EmaAccumulator& stats);

// Projects the sample through the router's current h, runs k-means with
// k = n and returns a codebook whose rows are the centroids.
Codebook init_codebook_kmeans(const std::vector<Vector>& item_embeddings, const ThemeRouter& router,
                              RngStream& rng);

// Largest pairwise cosine between codebook rows.
double collapse_metric(const Codebook& codebook);

// k-th largest score minus (k+1)-th largest score.
double stability_margin(std::span<const double> scores, std::size_t k);

struct StabilityCheck {
  double delta = 0.0;   // 1 - u1.u2
  double margin = 0.0;  // top-k margin at u1
  bool applicable = false;
  bool same_support = false;
};

// Checks the cosine-proximity routing stability property for two unit
// directions in theme space against the router's row-normalized codebook.
StabilityCheck verify_stability(const ThemeRouter& router, std::span<const double> u1,
                                std::span<const double> u2, std::size_t k);

// Plain linear scores W x for the comparison baseline router.
Vector dense_baseline_scores(const Matrix& weights, std::span<const double> x);

// One CSV row "batch,router,count_0..count_{n-1},collapse".
std::string router_diagnostics_header(std::size_t experts);
std::string router_diagnostics_row(std::size_t batch, const std::string& router_name,
                                   std::span<const std::uint64_t> counts, double collapse);

}  // namespace mos
