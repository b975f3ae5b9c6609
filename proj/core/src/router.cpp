#include "mos/router.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "mos/errors.hpp"

namespace mos {

Codebook make_random_codebook(std::size_t experts, std::size_t dim, double decay, RngStream& rng) {
  if (experts < 1 || dim < 1) throw ArgumentError("make_random_codebook: empty shape");
  if (!(decay > 0.0 && decay < 1.0)) throw ArgumentError("codebook decay must lie in (0, 1)");
  Codebook cb;
  cb.rows = Matrix(experts, dim);
  cb.decay = decay;
  cb.usage.assign(experts, 0);
  for (std::size_t i = 0; i < experts; ++i) {
    auto row = cb.rows.row(i);
    double n = 0.0;
    while (!(n > 1e-6)) {
      for (double& v : row) v = rng.normal();
      n = norm(row);
    }
    for (double& v : row) v /= n;
  }
  return cb;
}

ThemeRouter make_theme_router(std::size_t input_dim, std::size_t theme_dim, std::size_t hidden,
                              std::size_t experts, std::size_t k, double decay, RngStream& rng) {
  if (k < 1 || k > experts) {
    throw ArgumentError("router k=" + std::to_string(k) + " must lie in [1, " +
                        std::to_string(experts) + "]");
  }
  ThemeRouter r;
  r.projection = make_mlp({input_dim, hidden, theme_dim}, Activation::kIdentity, rng);
  r.codebook = make_random_codebook(experts, theme_dim, decay, rng);
  r.k = k;
  return r;
}

Vector codebook_scores(const Codebook& codebook, std::span<const double> projected) {
  if (projected.size() != codebook.dim()) {
    throw ArgumentError("codebook_scores: theme vector has length " +
                        std::to_string(projected.size()) + ", codebook dim is " +
                        std::to_string(codebook.dim()));
  }
  const double pn = norm(projected);
  if (!(pn > 1e-12)) throw RoutingError("theme vector has zero norm");
  Vector scores(codebook.num_experts());
  for (std::size_t i = 0; i < scores.size(); ++i) {
    auto row = codebook.rows.row(i);
    const double rn = norm(row);
    if (!(rn > 1e-12)) throw RoutingError("codebook row " + std::to_string(i) + " has zero norm");
    scores[i] = std::clamp(dot(projected, row) / (pn * rn), -1.0, 1.0);
  }
  return scores;
}

Vector theme_scores(const ThemeRouter& router, std::span<const double> x) {
  const Vector h = mlp_forward(router.projection, x);
  if (!(norm(h) > 1e-12)) {
    throw RoutingError("router projection h(x) has zero norm for an input of dimension " +
                       std::to_string(x.size()));
  }
  return codebook_scores(router.codebook, h);
}

GateVector gate(std::span<const double> scores, std::size_t k) {
  GateVector g;
  g.weights = softmax(keep_top_k(scores, k));
  g.support = top_k_indices(scores, k);
  std::sort(g.support.begin(), g.support.end());
  return g;
}

Route route(const ThemeRouter& router, std::span<const double> x, bool keep_cache) {
  Route r;
  r.projected = mlp_forward(router.projection, x, keep_cache ? &r.projection_cache : nullptr);
  if (!(norm(r.projected) > 1e-12)) {
    throw RoutingError("router projection h(x) has zero norm for an input of dimension " +
                       std::to_string(x.size()));
  }
  r.scores = codebook_scores(router.codebook, r.projected);
  r.gate = gate(r.scores, router.k);
  return r;
}

Vector route_backward(const ThemeRouter& router, const Route& r, std::span<const double> dgate,
                      MlpParams& grad) {
  const std::size_t dim = r.projected.size();
  // Softmax restricted to the support; masked entries carry no gradient.
  double weighted = 0.0;
  for (std::size_t i : r.gate.support) weighted += r.gate.weights[i] * dgate[i];
  const double pn = norm(r.projected);
  Vector unit = scaled(r.projected, 1.0 / pn);
  Vector du(dim, 0.0);
  for (std::size_t i : r.gate.support) {
    const double dscore = r.gate.weights[i] * (dgate[i] - weighted);
    if (dscore == 0.0) continue;
    auto row = router.codebook.rows.row(i);
    const double rn = norm(row);
    for (std::size_t c = 0; c < dim; ++c) {
      du[c] += dscore * (row[c] / rn - r.scores[i] * unit[c]) / pn;
    }
  }
  return mlp_backward(router.projection, r.projection_cache, du, grad);
}

EmaAccumulator::EmaAccumulator(std::size_t experts, std::size_t dim)
    : sums_(experts, dim), counts_(experts, 0) {}

void EmaAccumulator::add(std::span<const double> projected, const GateVector& g,
                         std::uint64_t weight) {
  if (projected.size() != sums_.cols()) throw ArgumentError("EmaAccumulator: dimension mismatch");
  for (std::size_t i : g.support) {
    axpy(static_cast<double>(weight), projected, sums_.row(i));
    counts_[i] += weight;
  }
}

void EmaAccumulator::merge(const EmaAccumulator& other) {
  if (other.sums_.rows() != sums_.rows() || other.sums_.cols() != sums_.cols()) {
    throw ArgumentError("EmaAccumulator::merge: shape mismatch");
  }
  axpy(1.0, other.sums_.data(), sums_.data());
  for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
}

void ema_update(Codebook& codebook, const EmaAccumulator& stats) {
  if (stats.sums().rows() != codebook.num_experts() || stats.sums().cols() != codebook.dim()) {
    throw ArgumentError("ema_update: statistics shape does not match codebook");
  }
  const double g = codebook.decay;
  for (std::size_t i = 0; i < codebook.num_experts(); ++i) {
    const std::uint64_t c = stats.counts()[i];
    if (c == 0) continue;
    auto row = codebook.rows.row(i);
    auto sum = stats.sums().row(i);
    const double inv = 1.0 / static_cast<double>(c);
    for (std::size_t j = 0; j < row.size(); ++j) row[j] = g * row[j] + (1.0 - g) * (sum[j] * inv);
    codebook.usage[i] += c;
  }
}

void ema_update(Codebook& codebook, std::span<const RoutedSample> batch) {
  EmaAccumulator acc(codebook.num_experts(), codebook.dim());
  for (const RoutedSample& s : batch) acc.add(s.projected, s.gate);
  ema_update(codebook, acc);
}

Codebook init_codebook_kmeans(const std::vector<Vector>& item_embeddings, const ThemeRouter& router,
                              RngStream& rng) {
  const std::size_t n = router.num_experts();
  std::vector<Vector> projected;
  projected.reserve(item_embeddings.size());
  for (const Vector& x : item_embeddings) projected.push_back(mlp_forward(router.projection, x));
  const std::set<Vector> distinct(projected.begin(), projected.end());
  if (distinct.size() < n) {
    throw InitializationError("k-means codebook initialization needs " + std::to_string(n) +
                              " distinct projected points, got " +
                              std::to_string(distinct.size()));
  }
  KMeansResult km = kmeans(projected, n, kDefaultKMeansIters, rng);
  Codebook cb;
  cb.rows = Matrix::from_rows(km.centroids);
  cb.decay = router.codebook.decay;
  cb.usage.assign(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    if (!(norm(cb.rows.row(i)) > 1e-12)) {
      throw InitializationError("k-means produced a zero-norm centroid for expert " +
                                std::to_string(i));
    }
  }
  return cb;
}

double collapse_metric(const Codebook& codebook) {
  const std::size_t n = codebook.num_experts();
  if (n < 2) throw ArgumentError("collapse_metric: need at least two codebook rows");
  double worst = -1.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      worst = std::max(worst, cosine_similarity(codebook.rows.row(i), codebook.rows.row(j)));
    }
  }
  return worst;
}

double stability_margin(std::span<const double> scores, std::size_t k) {
  if (k < 1 || k >= scores.size()) {
    throw ArgumentError("stability_margin: k=" + std::to_string(k) + " must lie in [1, " +
                        std::to_string(scores.size()) + ")");
  }
  Vector sorted(scores.begin(), scores.end());
  std::sort(sorted.begin(), sorted.end(), std::greater<>());
  return sorted[k - 1] - sorted[k];
}

StabilityCheck verify_stability(const ThemeRouter& router, std::span<const double> u1,
                                std::span<const double> u2, std::size_t k) {
  if (std::abs(norm(u1) - 1.0) > 1e-9) throw ArgumentError("verify_stability: u1 is not unit norm");
  if (std::abs(norm(u2) - 1.0) > 1e-9) throw ArgumentError("verify_stability: u2 is not unit norm");
  const Vector s1 = codebook_scores(router.codebook, u1);
  const Vector s2 = codebook_scores(router.codebook, u2);
  StabilityCheck c;
  c.delta = 1.0 - dot(u1, u2);
  c.margin = stability_margin(s1, k);
  c.applicable = c.margin > 0.0 && c.delta < c.margin * c.margin / 8.0;
  auto a = top_k_indices(s1, k);
  auto b = top_k_indices(s2, k);
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  c.same_support = a == b;
  return c;
}

Vector dense_baseline_scores(const Matrix& weights, std::span<const double> x) {
  return matvec(weights, x);
}

std::string router_diagnostics_header(std::size_t experts) {
  std::string h = "batch,router";
  for (std::size_t i = 0; i < experts; ++i) h += ",count_" + std::to_string(i);
  h += ",collapse";
  return h;
}

std::string router_diagnostics_row(std::size_t batch, const std::string& router_name,
                                   std::span<const std::uint64_t> counts, double collapse) {
  std::string row = std::to_string(batch) + "," + router_name;
  for (std::uint64_t c : counts) row += "," + std::to_string(c);
  row += "," + format_real(collapse);
  return row;
}

}  // namespace mos
