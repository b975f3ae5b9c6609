#include "mos/experts.hpp"

#include <algorithm>

#include "mos/errors.hpp"

namespace mos {

std::vector<Subsequence> subsequences_from_gates(std::span<const GateVector> gates,
                                                 std::span<const Vector> seq_embeddings,
                                                 std::size_t experts) {
  if (gates.size() != seq_embeddings.size()) {
    throw ArgumentError("subsequences_from_gates: one gate per element required");
  }
  std::vector<Subsequence> subs(experts);
  for (std::size_t i = 0; i < experts; ++i) subs[i].expert = i;
  for (std::size_t p = 0; p < gates.size(); ++p) {
    for (std::size_t i : gates[p].support) {
      subs[i].positions.push_back(p);
      subs[i].embeddings.push_back(seq_embeddings[p]);
    }
  }
  return subs;
}

std::vector<Subsequence> extract_subsequences(const ThemeRouter& router,
                                              std::span<const Vector> seq_embeddings) {
  if (seq_embeddings.empty()) throw ArgumentError("extract_subsequences: empty sequence");
  std::vector<GateVector> gates;
  gates.reserve(seq_embeddings.size());
  for (const Vector& x : seq_embeddings) gates.push_back(route(router, x).gate);
  return subsequences_from_gates(gates, seq_embeddings, router.num_experts());
}

WindowSequence window_transform(std::span<const Vector> seq_embeddings, const WindowSpec& spec) {
  if (seq_embeddings.empty()) throw ArgumentError("window_transform: empty sequence");
  if (spec.length < 1 || spec.stride < 1) throw ArgumentError("window size and stride must be >= 1");
  // A stride beyond the window size would leave items outside every window.
  if (spec.stride > spec.length) throw ArgumentError("window stride must not exceed the window size");
  const std::size_t t = seq_embeddings.size();
  const std::size_t dim = seq_embeddings.front().size();
  WindowSequence w;
  auto emit = [&](std::size_t start, std::size_t len) {
    Vector mean(dim, 0.0);
    for (std::size_t p = start; p < start + len; ++p) axpy(1.0, seq_embeddings[p], mean);
    for (double& v : mean) v /= static_cast<double>(len);
    w.embeddings.push_back(std::move(mean));
    w.starts.push_back(start);
    w.lengths.push_back(len);
  };
  if (t < spec.length) {
    emit(0, t);
    return w;
  }
  std::size_t start = 0;
  for (; start + spec.length <= t; start += spec.stride) emit(start, spec.length);
  if (w.starts.back() + spec.length < t) emit(t - spec.length, spec.length);
  return w;
}

std::vector<Vector> window_transform_backward(const WindowSequence& windows,
                                              std::span<const Vector> dwindows, std::size_t t) {
  if (dwindows.size() != windows.embeddings.size()) {
    throw ArgumentError("window_transform_backward: gradient count mismatch");
  }
  const std::size_t dim = windows.embeddings.empty() ? 0 : windows.embeddings.front().size();
  std::vector<Vector> dx(t, Vector(dim, 0.0));
  for (std::size_t m = 0; m < dwindows.size(); ++m) {
    const double inv = 1.0 / static_cast<double>(windows.lengths[m]);
    for (std::size_t p = windows.starts[m]; p < windows.starts[m] + windows.lengths[m]; ++p) {
      axpy(inv, dwindows[m], dx[p]);
    }
  }
  return dx;
}

Vector global_expert_forward(const AttentionBlockParams& block,
                             std::span<const Vector> seq_embeddings, AttentionCache* cache) {
  if (seq_embeddings.empty()) throw ArgumentError("global_expert_forward: empty sequence");
  return expert_block_forward(block, seq_embeddings, cache);
}

ExpertGroup make_expert_group(std::size_t dim, std::size_t theme_dim, std::size_t router_hidden,
                              std::size_t ffn_hidden, std::size_t experts, std::size_t k,
                              double decay, RngStream& rng) {
  ExpertGroup g;
  g.router = make_theme_router(dim, theme_dim, router_hidden, experts, k, decay, rng);
  for (std::size_t i = 0; i < experts; ++i) g.experts.push_back(make_attention_block(dim, ffn_hidden, rng));
  return g;
}

ExpertGroup zeros_like(const ExpertGroup& group) {
  ExpertGroup z;
  z.router = group.router;
  z.router.projection = zeros_like(group.router.projection);
  for (const AttentionBlockParams& e : group.experts) z.experts.push_back(zeros_like(e));
  return z;
}

Vector routed_group_forward(const ExpertGroup& group, std::span<const Vector> elements,
                            std::span<const GateVector> gates, GroupTrace* trace,
                            GroupCache* cache) {
  if (elements.empty()) throw ArgumentError("routed expert group: empty input sequence");
  const std::size_t n = group.num_experts();
  if (group.router.num_experts() != n) {
    throw ArgumentError("routed expert group: router and expert counts differ");
  }
  std::vector<GateVector> own;
  std::vector<Vector> own_projected;
  const bool self_routed = gates.empty();
  if (self_routed) {
    own.reserve(elements.size());
    for (std::size_t p = 0; p + 1 < elements.size(); ++p) {
      Route r = route(group.router, elements[p]);
      own.push_back(std::move(r.gate));
      if (cache != nullptr) own_projected.push_back(std::move(r.projected));
    }
  } else if (gates.size() != elements.size()) {
    throw ArgumentError("routed expert group: one precomputed gate per element required");
  }
  Route last = route(group.router, elements.back(), cache != nullptr);
  if (self_routed) {
    own.push_back(last.gate);
    if (cache != nullptr) own_projected.push_back(last.projected);
    gates = own;
  }
  const GateVector& agg = last.gate;
  std::vector<Subsequence> subs = subsequences_from_gates(gates, elements, n);

  const std::size_t dim = elements.front().size();
  Vector y(dim, 0.0);
  std::vector<std::size_t> evaluated;
  std::vector<std::size_t> evaluated_sizes;
  std::vector<AttentionCache> caches;
  std::vector<Vector> outputs;
  for (std::size_t i : agg.support) {
    const Subsequence& s = subs[i];
    if (s.positions.empty() || s.positions.back() != elements.size() - 1) {
      throw RoutingError("selected expert " + std::to_string(i) +
                         " was not dispatched the final element");
    }
    AttentionCache c;
    Vector out = expert_block_forward(group.experts[i], s.embeddings, cache != nullptr ? &c : nullptr);
    axpy(agg.weights[i], out, y);
    evaluated.push_back(i);
    evaluated_sizes.push_back(s.positions.size());
    if (cache != nullptr) {
      caches.push_back(std::move(c));
      outputs.push_back(std::move(out));
    }
  }
  if (trace != nullptr) {
    trace->aggregation = agg;
    trace->dispatch_sizes.assign(n, 0);
    for (std::size_t i = 0; i < n; ++i) trace->dispatch_sizes[i] = subs[i].positions.size();
    trace->evaluated = evaluated;
    trace->evaluated_sizes = evaluated_sizes;
    trace->routed_elements = elements.size();
  }
  if (cache != nullptr) {
    cache->last_route = std::move(last);
    cache->subsequences = std::move(subs);
    cache->expert_caches = std::move(caches);
    cache->expert_outputs = std::move(outputs);
    cache->length = elements.size();
    cache->projected = std::move(own_projected);
    cache->gates = self_routed ? std::move(own) : std::vector<GateVector>{};
  }
  return y;
}

std::vector<Vector> routed_group_backward(const ExpertGroup& group, const GroupCache& cache,
                                          std::span<const double> dy, ExpertGroup& grad) {
  const std::size_t dim = dy.size();
  const std::size_t n = group.num_experts();
  std::vector<Vector> dx(cache.length, Vector(dim, 0.0));
  const GateVector& agg = cache.last_route.gate;
  Vector dgate(n, 0.0);
  for (std::size_t e = 0; e < agg.support.size(); ++e) {
    const std::size_t i = agg.support[e];
    dgate[i] = dot(dy, cache.expert_outputs[e]);
    Vector dout = scaled(dy, agg.weights[i]);
    std::vector<Vector> dsub =
        expert_block_backward(group.experts[i], cache.expert_caches[e], dout, grad.experts[i]);
    const Subsequence& s = cache.subsequences[i];
    for (std::size_t j = 0; j < s.positions.size(); ++j) axpy(1.0, dsub[j], dx[s.positions[j]]);
  }
  Vector dlast = route_backward(group.router, cache.last_route, dgate, grad.router.projection);
  axpy(1.0, dlast, dx.back());
  return dx;
}

Vector item_experts_forward(const ExpertGroup& group, std::span<const Vector> seq_embeddings,
                            GroupTrace* trace) {
  return routed_group_forward(group, seq_embeddings, {}, trace);
}

Vector window_experts_forward(const ExpertGroup& group, const WindowSequence& windows,
                              GroupTrace* trace) {
  return routed_group_forward(group, windows.embeddings, {}, trace);
}

}  // namespace mos
