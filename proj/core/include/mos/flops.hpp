#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "mos/model.hpp"

namespace mos {

// One multiply or add is one operation. Softmax costs 3 per entry; sigmoid 3.
std::uint64_t matvec_flops(std::uint64_t rows, std::uint64_t cols);  // 2mn - m
std::uint64_t dense_layer_flops(std::uint64_t out, std::uint64_t in);  // matvec + bias
std::uint64_t mlp_flops(const MlpParams& params);
std::uint64_t layer_norm_flops(std::uint64_t dim);  // 7 per element
// Nominal cost of the attention block over a length-l input: full l x l
// attention (projections, scores, scaling, softmax, value mixing, output
// projection) plus residuals, layer norms and feedforward at every position.
std::uint64_t attention_block_flops(std::uint64_t length, std::uint64_t dim, std::uint64_t ffn_hidden);
// h(x), cosine against n rows, softmax over the k kept entries.
std::uint64_t route_flops(const ThemeRouter& router);

struct FlopsReport {
  std::uint64_t embedding = 0;
  std::uint64_t global = 0;
  std::uint64_t item_experts = 0;
  std::uint64_t window_experts = 0;
  std::uint64_t routers = 0;
  std::uint64_t fusion = 0;
  std::uint64_t classifier = 0;
  std::uint64_t item_block_calls = 0;
  std::uint64_t window_block_calls = 0;

  std::uint64_t total() const {
    return embedding + global + item_experts + window_experts + routers + fusion + classifier;
  }
};

// Cost of the forward recorded in `trace`. Only evaluated experts count.
FlopsReport count_flops(const MosModel& model, const ForwardTrace& trace);

// Cost of running every expert on its full dispatched subsequence, the
// setting the leading-order complexity comparison refers to.
std::uint64_t dispatched_expert_flops(std::span<const std::size_t> dispatch_sizes, std::uint64_t dim,
                                      std::uint64_t ffn_hidden);

// (k1^2/n1 + k2^2/(s^2 n2)) / ((k1+k2)^2/(n1+n2)).
double moe_complexity_ratio(double k1, double k2, double n1, double n2, double s);

struct ComplexityMeasurement {
  std::uint64_t mos_extra = 0;   // item + window experts, all dispatched
  std::uint64_t shared_moe = 0;  // n1+n2 experts, top-(k1+k2), full sequence
  double measured_ratio = 0.0;
  double theoretical_ratio = 0.0;
};

// Routes `seq` through the model's item and window groups and through a
// dense-scoring shared MoE with the combined expert count, and compares the
// dispatched expert cost of both.
ComplexityMeasurement measure_complexity(const MosModel& model, std::span<const Vector> seq,
                                         const Matrix& shared_router_weights);

// Sums measure_complexity over `trials` freshly initialized models, each with
// its own Gaussian sequence of length `length`, k-means-initialized codebooks
// and shared router, and reports the ratio of the summed costs.
ComplexityMeasurement sampled_complexity(const ModelConfig& config, std::size_t length, std::size_t trials,
                                         RngStream& rng);

}  // namespace mos
