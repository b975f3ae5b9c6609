#include "mos/nn.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "mos/errors.hpp"

namespace mos {
namespace {

void push_matrix(const std::string& name, Matrix& m, std::vector<TensorView>& out) {
  out.push_back({name, std::span<double>(m.data()), {m.rows(), m.cols()}});
}

void push_vector(const std::string& name, Vector& v, std::vector<TensorView>& out) {
  out.push_back({name, std::span<double>(v), {v.size()}});
}

Matrix uniform_matrix(std::size_t rows, std::size_t cols, RngStream& rng) {
  Matrix m(rows, cols);
  const double bound = 1.0 / std::sqrt(static_cast<double>(cols));
  for (double& v : m.data()) v = rng.uniform(-bound, bound);
  return m;
}

Vector layer_norm(std::span<const double> x, const Vector& scale, const Vector& shift,
                  LayerNormCache* cache) {
  const double n = static_cast<double>(x.size());
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= n;
  double var = 0.0;
  for (double v : x) var += (v - mean) * (v - mean);
  var /= n;
  const double inv_std = 1.0 / std::sqrt(var + kLayerNormEpsilon);
  Vector normalized(x.size());
  Vector y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    normalized[i] = (x[i] - mean) * inv_std;
    y[i] = scale[i] * normalized[i] + shift[i];
  }
  if (cache != nullptr) {
    cache->normalized = std::move(normalized);
    cache->inv_std = inv_std;
  }
  return y;
}

Vector layer_norm_backward(const LayerNormCache& cache, const Vector& scale,
                           std::span<const double> dy, Vector& dscale, Vector& dshift) {
  const std::size_t n = dy.size();
  Vector dn(n);
  double mean_dn = 0.0;
  double mean_dn_n = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    dscale[i] += dy[i] * cache.normalized[i];
    dshift[i] += dy[i];
    dn[i] = dy[i] * scale[i];
    mean_dn += dn[i];
    mean_dn_n += dn[i] * cache.normalized[i];
  }
  mean_dn /= static_cast<double>(n);
  mean_dn_n /= static_cast<double>(n);
  Vector dx(n);
  for (std::size_t i = 0; i < n; ++i) {
    dx[i] = cache.inv_std * (dn[i] - mean_dn - cache.normalized[i] * mean_dn_n);
  }
  return dx;
}

}  // namespace

// ---- embedding ----------------------------------------------------------------

void ItemEmbeddingTable::collect(const std::string& prefix, std::vector<TensorView>& out) {
  push_matrix(prefix, weights, out);
}

std::vector<Vector> embed(const ItemEmbeddingTable& table, std::span<const ItemId> items) {
  std::vector<Vector> out;
  out.reserve(items.size());
  for (ItemId id : items) {
    if (id >= table.vocab_size()) {
      throw LookupError("embed: item id " + std::to_string(id) + " outside vocabulary of size " +
                        std::to_string(table.vocab_size()));
    }
    out.push_back(table.weights.row_vector(id));
  }
  return out;
}

// ---- MLP ----------------------------------------------------------------------

void MlpParams::collect(const std::string& prefix, std::vector<TensorView>& out) {
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const std::string base = prefix + ".layer" + std::to_string(i);
    push_matrix(base + ".weight", layers[i].weight, out);
    push_vector(base + ".bias", layers[i].bias, out);
  }
}

MlpParams make_mlp(const std::vector<std::size_t>& dims, Activation last_activation,
                   RngStream& rng) {
  if (dims.size() < 2) throw ArgumentError("make_mlp: need at least input and output dims");
  MlpParams p;
  for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
    DenseLayer layer;
    layer.weight = uniform_matrix(dims[i + 1], dims[i], rng);
    layer.bias.resize(dims[i + 1]);
    const double bound = 1.0 / std::sqrt(static_cast<double>(dims[i]));
    for (double& b : layer.bias) b = rng.uniform(-bound, bound);
    layer.activation = (i + 2 == dims.size()) ? last_activation : Activation::kRelu;
    p.layers.push_back(std::move(layer));
  }
  return p;
}

MlpParams zeros_like(const MlpParams& params) {
  MlpParams z = params;
  for (DenseLayer& layer : z.layers) {
    std::fill(layer.weight.data().begin(), layer.weight.data().end(), 0.0);
    std::fill(layer.bias.begin(), layer.bias.end(), 0.0);
  }
  return z;
}

Vector mlp_forward(const MlpParams& params, std::span<const double> x, MlpCache* cache) {
  if (params.layers.empty()) throw ArgumentError("mlp_forward: no layers");
  if (x.size() != params.input_dim()) {
    throw ArgumentError("mlp_forward: input has length " + std::to_string(x.size()) +
                        ", expected " + std::to_string(params.input_dim()));
  }
  if (cache != nullptr) {
    cache->inputs.clear();
    cache->activations.clear();
  }
  Vector h(x.begin(), x.end());
  for (const DenseLayer& layer : params.layers) {
    if (layer.weight.cols() != h.size() || layer.bias.size() != layer.weight.rows()) {
      throw ArgumentError("mlp_forward: layer dimensions do not chain");
    }
    Vector z = matvec(layer.weight, h);
    for (std::size_t i = 0; i < z.size(); ++i) z[i] += layer.bias[i];
    if (cache != nullptr) {
      cache->inputs.push_back(h);
      cache->activations.push_back(z);
    }
    if (layer.activation == Activation::kRelu) {
      for (double& v : z) v = v > 0.0 ? v : 0.0;
    }
    h = std::move(z);
  }
  return h;
}

Vector mlp_backward(const MlpParams& params, const MlpCache& cache, std::span<const double> dy,
                    MlpParams& grad) {
  Vector delta(dy.begin(), dy.end());
  for (std::size_t li = params.layers.size(); li-- > 0;) {
    const DenseLayer& layer = params.layers[li];
    if (layer.activation == Activation::kRelu) {
      const Vector& z = cache.activations[li];
      for (std::size_t i = 0; i < delta.size(); ++i) {
        if (!(z[i] > 0.0)) delta[i] = 0.0;
      }
    }
    add_outer(grad.layers[li].weight, delta, cache.inputs[li]);
    axpy(1.0, delta, grad.layers[li].bias);
    delta = matvec_transposed(layer.weight, delta);
  }
  return delta;
}

// ---- attention expert block -----------------------------------------------------

void AttentionBlockParams::collect(const std::string& prefix, std::vector<TensorView>& out) {
  push_matrix(prefix + ".query", query, out);
  push_matrix(prefix + ".key", key, out);
  push_matrix(prefix + ".value", value, out);
  push_matrix(prefix + ".output", output, out);
  push_vector(prefix + ".norm1.scale", norm1_scale, out);
  push_vector(prefix + ".norm1.shift", norm1_shift, out);
  push_vector(prefix + ".norm2.scale", norm2_scale, out);
  push_vector(prefix + ".norm2.shift", norm2_shift, out);
  feedforward.collect(prefix + ".ffn", out);
}

AttentionBlockParams make_attention_block(std::size_t dim, std::size_t hidden, RngStream& rng) {
  AttentionBlockParams p;
  p.query = uniform_matrix(dim, dim, rng);
  p.key = uniform_matrix(dim, dim, rng);
  p.value = uniform_matrix(dim, dim, rng);
  p.output = uniform_matrix(dim, dim, rng);
  p.norm1_scale.assign(dim, 1.0);
  p.norm1_shift.assign(dim, 0.0);
  p.norm2_scale.assign(dim, 1.0);
  p.norm2_shift.assign(dim, 0.0);
  p.feedforward = make_mlp({dim, hidden, dim}, Activation::kIdentity, rng);
  return p;
}

AttentionBlockParams zeros_like(const AttentionBlockParams& params) {
  AttentionBlockParams z;
  z.query = Matrix(params.query.rows(), params.query.cols());
  z.key = Matrix(params.key.rows(), params.key.cols());
  z.value = Matrix(params.value.rows(), params.value.cols());
  z.output = Matrix(params.output.rows(), params.output.cols());
  z.norm1_scale.assign(params.norm1_scale.size(), 0.0);
  z.norm1_shift.assign(params.norm1_shift.size(), 0.0);
  z.norm2_scale.assign(params.norm2_scale.size(), 0.0);
  z.norm2_shift.assign(params.norm2_shift.size(), 0.0);
  z.feedforward = zeros_like(params.feedforward);
  return z;
}

Vector expert_block_forward(const AttentionBlockParams& params, std::span<const Vector> seq,
                            AttentionCache* cache) {
  if (seq.empty()) throw ArgumentError("expert_block_forward: empty sequence");
  const std::size_t d = params.dim();
  for (const Vector& x : seq) {
    if (x.size() != d) throw ArgumentError("expert_block_forward: input dimension mismatch");
  }
  const std::size_t t = seq.size();
  const Vector& last = seq.back();
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));

  Vector q = matvec(params.query, last);
  std::vector<Vector> keys(t);
  std::vector<Vector> values(t);
  Vector scores(t);
  for (std::size_t j = 0; j < t; ++j) {
    keys[j] = matvec(params.key, seq[j]);
    values[j] = matvec(params.value, seq[j]);
    scores[j] = dot(q, keys[j]) * inv_sqrt_d;
  }
  Vector attention = softmax(scores);
  Vector context(d, 0.0);
  for (std::size_t j = 0; j < t; ++j) axpy(attention[j], values[j], context);

  Vector residual1 = matvec(params.output, context);
  for (std::size_t i = 0; i < d; ++i) residual1[i] += last[i];
  LayerNormCache* n1 = cache != nullptr ? &cache->norm1 : nullptr;
  Vector hidden1 = layer_norm(residual1, params.norm1_scale, params.norm1_shift, n1);

  Vector residual2 =
      mlp_forward(params.feedforward, hidden1, cache != nullptr ? &cache->feedforward : nullptr);
  for (std::size_t i = 0; i < d; ++i) residual2[i] += hidden1[i];
  LayerNormCache* n2 = cache != nullptr ? &cache->norm2 : nullptr;
  Vector out = layer_norm(residual2, params.norm2_scale, params.norm2_shift, n2);

  if (cache != nullptr) {
    cache->inputs.assign(seq.begin(), seq.end());
    cache->query = std::move(q);
    cache->keys = std::move(keys);
    cache->values = std::move(values);
    cache->attention = std::move(attention);
    cache->context = std::move(context);
    cache->hidden1 = std::move(hidden1);
  }
  return out;
}

std::vector<Vector> expert_block_backward(const AttentionBlockParams& params,
                                          const AttentionCache& cache,
                                          std::span<const double> dout,
                                          AttentionBlockParams& grad) {
  const std::size_t d = params.dim();
  const std::size_t t = cache.inputs.size();
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
  std::vector<Vector> dx(t, Vector(d, 0.0));

  Vector dres2 =
      layer_norm_backward(cache.norm2, params.norm2_scale, dout, grad.norm2_scale, grad.norm2_shift);
  Vector dhidden1 = mlp_backward(params.feedforward, cache.feedforward, dres2, grad.feedforward);
  axpy(1.0, dres2, dhidden1);
  Vector dres1 = layer_norm_backward(cache.norm1, params.norm1_scale, dhidden1, grad.norm1_scale,
                                     grad.norm1_shift);
  axpy(1.0, dres1, dx[t - 1]);

  add_outer(grad.output, dres1, cache.context);
  Vector dcontext = matvec_transposed(params.output, dres1);

  Vector dattn(t);
  double weighted = 0.0;
  for (std::size_t j = 0; j < t; ++j) {
    dattn[j] = dot(dcontext, cache.values[j]);
    weighted += cache.attention[j] * dattn[j];
  }
  Vector dq(d, 0.0);
  for (std::size_t j = 0; j < t; ++j) {
    const double dscore = cache.attention[j] * (dattn[j] - weighted) * inv_sqrt_d;
    // value path
    Vector dv = scaled(dcontext, cache.attention[j]);
    add_outer(grad.value, dv, cache.inputs[j]);
    axpy(1.0, matvec_transposed(params.value, dv), dx[j]);
    // key path
    Vector dk = scaled(cache.query, dscore);
    add_outer(grad.key, dk, cache.inputs[j]);
    axpy(1.0, matvec_transposed(params.key, dk), dx[j]);
    axpy(dscore, cache.keys[j], dq);
  }
  add_outer(grad.query, dq, cache.inputs[t - 1]);
  axpy(1.0, matvec_transposed(params.query, dq), dx[t - 1]);
  return dx;
}

// ---- classifier and loss ----------------------------------------------------------

double classifier_forward(const MlpParams& head, std::span<const double> user_repr,
                          std::span<const double> target_emb, ClassifierCache* cache) {
  if (head.input_dim() != user_repr.size() + target_emb.size()) {
    throw ArgumentError("classifier_forward: head expects input " +
                        std::to_string(head.input_dim()) + ", got " +
                        std::to_string(user_repr.size() + target_emb.size()));
  }
  if (head.output_dim() != 1) throw ArgumentError("classifier_forward: head must emit a scalar");
  Vector joined(user_repr.begin(), user_repr.end());
  joined.insert(joined.end(), target_emb.begin(), target_emb.end());
  if (cache != nullptr) cache->user_dim = user_repr.size();
  return mlp_forward(head, joined, cache != nullptr ? &cache->mlp : nullptr)[0];
}

ClassifierGrad classifier_backward(const MlpParams& head, const ClassifierCache& cache,
                                   double dlogit, MlpParams& grad) {
  const double dy[1] = {dlogit};
  Vector dx = mlp_backward(head, cache.mlp, dy, grad);
  const std::size_t split = cache.user_dim;
  ClassifierGrad g;
  g.d_user.assign(dx.begin(), dx.begin() + static_cast<std::ptrdiff_t>(split));
  g.d_target.assign(dx.begin() + static_cast<std::ptrdiff_t>(split), dx.end());
  return g;
}

double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

BceResult bce_loss(double logit, int label) {
  if (label != 0 && label != 1) throw ArgumentError("bce_loss: label must be 0 or 1");
  const double margin = -(2.0 * label - 1.0) * logit;
  // softplus(margin) without overflow
  const double loss = std::max(margin, 0.0) + std::log1p(std::exp(-std::abs(margin)));
  return {loss, sigmoid(logit) - static_cast<double>(label)};
}

// ---- Adam -----------------------------------------------------------------------

AdamState make_adam_state(const AdamConfig& config, std::size_t size) {
  AdamState s;
  s.config = config;
  s.first_moment.assign(size, 0.0);
  s.second_moment.assign(size, 0.0);
  return s;
}

void adam_step(AdamState& state, std::span<double> params, std::span<const double> grads) {
  if (params.size() != grads.size() || params.size() != state.first_moment.size() ||
      params.size() != state.second_moment.size()) {
    throw ArgumentError("adam_step: shape mismatch between parameters, gradients and moments");
  }
  const AdamConfig& c = state.config;
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double correction1 = 1.0 - std::pow(c.beta1, t);
  const double correction2 = 1.0 - std::pow(c.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    double& m = state.first_moment[i];
    double& v = state.second_moment[i];
    m = c.beta1 * m + (1.0 - c.beta1) * grads[i];
    v = c.beta2 * v + (1.0 - c.beta2) * grads[i] * grads[i];
    const double m_hat = m / correction1;
    const double v_hat = v / correction2;
    params[i] -= c.learning_rate * m_hat / (std::sqrt(v_hat) + c.epsilon);
  }
}

}  // namespace mos
