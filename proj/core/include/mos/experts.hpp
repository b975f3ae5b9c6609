#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "mos/nn.hpp"
#include "mos/numerics.hpp"
#include "mos/router.hpp"

namespace mos {

struct Subsequence {
  std::size_t expert = 0;
  std::vector<std::size_t> positions;  // ascending
  std::vector<Vector> embeddings;      // parallel to positions
};

// One subsequence per expert: position p joins subsequence i iff the gate of
// element p selects i.
std::vector<Subsequence> extract_subsequences(const ThemeRouter& router,
                                              std::span<const Vector> seq_embeddings);
std::vector<Subsequence> subsequences_from_gates(std::span<const GateVector> gates,
                                                 std::span<const Vector> seq_embeddings,
                                                 std::size_t experts);

struct WindowSpec {
  std::size_t length = 8;  // L
  std::size_t stride = 4;  // s
};

struct WindowSequence {
  std::vector<Vector> embeddings;
  std::vector<std::size_t> starts;   // 0-based first position
  std::vector<std::size_t> lengths;  // member count
};

// Windows start at 0, s, 2s, ... while s*m + L <= t. A sequence shorter than
// L yields one window over all of it; if the last regular window ends before
// t, a tail window over the final L items is appended. Requires s <= L so
// every position lies in some window.
WindowSequence window_transform(std::span<const Vector> seq_embeddings, const WindowSpec& spec);
// Distributes window gradients back onto the t item positions.
std::vector<Vector> window_transform_backward(const WindowSequence& windows,
                                              std::span<const Vector> dwindows, std::size_t t);

Vector global_expert_forward(const AttentionBlockParams& block,
                             std::span<const Vector> seq_embeddings,
                             AttentionCache* cache = nullptr);

// A router plus its n experts: the item group or the window group.
struct ExpertGroup {
  ThemeRouter router;
  std::vector<AttentionBlockParams> experts;

  std::size_t num_experts() const { return experts.size(); }
};

ExpertGroup make_expert_group(std::size_t dim, std::size_t theme_dim, std::size_t router_hidden,
                              std::size_t ffn_hidden, std::size_t experts, std::size_t k,
                              double decay, RngStream& rng);
ExpertGroup zeros_like(const ExpertGroup& group);

struct GroupTrace {
  GateVector aggregation;                    // gate of the final element
  std::vector<std::size_t> dispatch_sizes;   // per expert, all n
  std::vector<std::size_t> evaluated;        // experts actually run, ascending
  std::vector<std::size_t> evaluated_sizes;  // their input lengths
  std::size_t routed_elements = 0;
};

struct GroupCache {
  Route last_route;
  std::vector<Subsequence> subsequences;
  std::vector<AttentionCache> expert_caches;  // parallel to trace.evaluated
  std::vector<Vector> expert_outputs;         // parallel to trace.evaluated
  // Per-element routes, filled only when the group routed the elements itself.
  std::vector<Vector> projected;
  std::vector<GateVector> gates;
  std::size_t length = 0;
};

// y = sum over the aggregation support of g[i] * F_i(S^(i)). `gates`, when
// non-empty, supplies precomputed per-element gates (they must match what
// the router would compute); otherwise each element is routed here.
Vector routed_group_forward(const ExpertGroup& group, std::span<const Vector> elements,
                            std::span<const GateVector> gates, GroupTrace* trace = nullptr,
                            GroupCache* cache = nullptr);

// Accumulates expert and router-projection gradients; returns dL/d element.
// Dispatch membership is treated as constant.
std::vector<Vector> routed_group_backward(const ExpertGroup& group, const GroupCache& cache,
                                          std::span<const double> dy, ExpertGroup& grad);

Vector item_experts_forward(const ExpertGroup& group, std::span<const Vector> seq_embeddings,
                            GroupTrace* trace = nullptr);
Vector window_experts_forward(const ExpertGroup& group, const WindowSequence& windows,
                              GroupTrace* trace = nullptr);

}  // namespace mos
