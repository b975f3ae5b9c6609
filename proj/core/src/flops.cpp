#include "mos/flops.hpp"

#include <algorithm>

#include "mos/errors.hpp"

namespace mos {

std::uint64_t matvec_flops(std::uint64_t rows, std::uint64_t cols) {
  return cols == 0 ? 0 : 2 * rows * cols - rows;
}

std::uint64_t dense_layer_flops(std::uint64_t out, std::uint64_t in) { return matvec_flops(out, in) + out; }

std::uint64_t mlp_flops(const MlpParams& params) {
  std::uint64_t f = 0;
  for (const DenseLayer& l : params.layers) f += dense_layer_flops(l.weight.rows(), l.weight.cols());
  return f;
}

std::uint64_t layer_norm_flops(std::uint64_t dim) { return 7 * dim; }

std::uint64_t attention_block_flops(std::uint64_t l, std::uint64_t d, std::uint64_t h) {
  if (l == 0) return 0;
  const std::uint64_t projections = 3 * l * matvec_flops(d, d);
  const std::uint64_t scores = l * l * (2 * d - 1) + l * l;  // dots, then 1/sqrt(d)
  const std::uint64_t softmax = 3 * l * l;
  const std::uint64_t mixing = l * d * (2 * l - 1);
  const std::uint64_t output = l * matvec_flops(d, d);
  const std::uint64_t residuals = 2 * l * d;
  const std::uint64_t norms = 2 * l * layer_norm_flops(d);
  const std::uint64_t ffn = l * (dense_layer_flops(h, d) + dense_layer_flops(d, h));
  return projections + scores + softmax + mixing + output + residuals + norms + ffn;
}

std::uint64_t route_flops(const ThemeRouter& router) {
  const std::uint64_t n = router.num_experts();
  const std::uint64_t dim = router.codebook.dim();
  const std::uint64_t projected_norm = 2 * dim;            // squares, sum, sqrt
  const std::uint64_t cosines = n * ((2 * dim - 1) + 2 * dim + 2);  // dot, row norm, two divides
  return mlp_flops(router.projection) + projected_norm + cosines + 3 * router.k;
}

FlopsReport count_flops(const MosModel& model, const ForwardTrace& trace) {
  const std::uint64_t d = model.config.dim;
  const std::uint64_t h = model.config.ffn_hidden;
  const double a_item = trace.alphas.item;
  const double a_window = trace.alphas.window;
  FlopsReport r;
  std::uint64_t active_terms = 0;
  if (1.0 - a_item - a_window != 0.0) {
    r.global = attention_block_flops(trace.sequence_length, d, h);
    ++active_terms;
  }
  if (trace.item_active) {
    for (std::size_t len : trace.item.evaluated_sizes) r.item_experts += attention_block_flops(len, d, h);
    r.item_block_calls = trace.item.evaluated.size();
    r.item_experts += 2 * d * r.item_block_calls;  // gate-weighted sum
    r.routers += trace.item.routed_elements * route_flops(model.item.router);
    ++active_terms;
  }
  if (trace.window_active) {
    // window means: (L - 1) adds and one divide per coordinate
    r.window_experts += trace.window_count * model.config.window.length * d;
    for (std::size_t len : trace.window.evaluated_sizes) r.window_experts += attention_block_flops(len, d, h);
    r.window_block_calls = trace.window.evaluated.size();
    r.window_experts += 2 * d * r.window_block_calls;
    r.routers += trace.window.routed_elements * route_flops(model.window.router);
    ++active_terms;
  }
  // One scale per term, one add per extra term.
  r.fusion = active_terms * d + (active_terms - 1) * d;
  r.classifier = mlp_flops(model.head) + 3;
  return r;
}

std::uint64_t dispatched_expert_flops(std::span<const std::size_t> dispatch_sizes, std::uint64_t dim,
                                      std::uint64_t ffn_hidden) {
  std::uint64_t f = 0;
  for (std::size_t len : dispatch_sizes) f += attention_block_flops(len, dim, ffn_hidden);
  return f;
}

double moe_complexity_ratio(double k1, double k2, double n1, double n2, double s) {
  if (!(k1 > 0 && k2 > 0 && n1 > 0 && n2 > 0 && s > 0) || k1 > n1 || k2 > n2) {
    throw ArgumentError("moe_complexity_ratio: need positive arguments with k1 <= n1 and k2 <= n2");
  }
  const double mos = k1 * k1 / n1 + k2 * k2 / (s * s * n2);
  const double moe = (k1 + k2) * (k1 + k2) / (n1 + n2);
  return mos / moe;
}

ComplexityMeasurement measure_complexity(const MosModel& model, std::span<const Vector> seq,
                                         const Matrix& shared_router_weights) {
  const ModelConfig& c = model.config;
  const std::size_t shared_experts = 2 * c.experts;
  const std::size_t shared_k = 2 * c.k;
  if (shared_router_weights.rows() != shared_experts || shared_router_weights.cols() != c.dim) {
    throw ArgumentError("measure_complexity: shared router must be (2n x d)");
  }
  GroupTrace item;
  routed_group_forward(model.item, seq, {}, &item);
  const WindowSequence windows = window_transform(seq, c.window);
  GroupTrace window;
  routed_group_forward(model.window, windows.embeddings, {}, &window);

  std::vector<std::size_t> shared_sizes(shared_experts, 0);
  for (const Vector& x : seq) {
    const GateVector g = gate(dense_baseline_scores(shared_router_weights, x), shared_k);
    for (std::size_t i : g.support) ++shared_sizes[i];
  }
  ComplexityMeasurement m;
  m.mos_extra = dispatched_expert_flops(item.dispatch_sizes, c.dim, c.ffn_hidden) +
                dispatched_expert_flops(window.dispatch_sizes, c.dim, c.ffn_hidden);
  m.shared_moe = dispatched_expert_flops(shared_sizes, c.dim, c.ffn_hidden);
  m.measured_ratio = static_cast<double>(m.mos_extra) / static_cast<double>(m.shared_moe);
  m.theoretical_ratio = moe_complexity_ratio(static_cast<double>(c.k), static_cast<double>(c.k),
                                             static_cast<double>(c.experts),
                                             static_cast<double>(c.experts),
                                             static_cast<double>(c.window.stride));
  return m;
}

ComplexityMeasurement sampled_complexity(const ModelConfig& config, std::size_t length, std::size_t trials,
                                         RngStream& rng) {
  if (trials == 0 || length == 0) throw ArgumentError("sampled_complexity: need at least one trial and position");
  ModelConfig c = config;
  c.vocab_size = std::max<std::size_t>(c.vocab_size, 1);
  ComplexityMeasurement total;
  for (std::size_t t = 0; t < trials; ++t) {
    MosModel model = make_mos_model(c, rng);
    Matrix shared(2 * c.experts, c.dim);
    for (double& v : shared.data()) v = rng.normal();
    std::vector<Vector> seq(length, Vector(c.dim));
    for (Vector& x : seq) {
      for (double& v : x) v = rng.normal();
    }
    // Codebooks start from k-means over the routed elements, as in training.
    model.item.router.codebook = init_codebook_kmeans(seq, model.item.router, rng);
    model.window.router.codebook =
        init_codebook_kmeans(window_transform(seq, c.window).embeddings, model.window.router, rng);
    const ComplexityMeasurement m = measure_complexity(model, seq, shared);
    total.mos_extra += m.mos_extra;
    total.shared_moe += m.shared_moe;
    total.theoretical_ratio = m.theoretical_ratio;
  }
  total.measured_ratio = static_cast<double>(total.mos_extra) / static_cast<double>(total.shared_moe);
  return total;
}

}  // namespace mos
