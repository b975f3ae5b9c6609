#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mos/numerics.hpp"

namespace mos {

using ItemId = std::uint32_t;

// Mutable view of one named parameter tensor. Shapes are {n} for vectors and
// {rows, cols} for matrices.
struct TensorView {
  std::string name;
  std::span<double> values;
  std::vector<std::uint64_t> shape;
};

// ---- embedding ----------------------------------------------------------------

struct ItemEmbeddingTable {
  Matrix weights;  // vocab_size x dim

  std::size_t vocab_size() const { return weights.rows(); }
  std::size_t dim() const { return weights.cols(); }
  void collect(const std::string& prefix, std::vector<TensorView>& out);
};

// Rows for `items` in sequence order. Throws LookupError naming the first
// out-of-range id.
std::vector<Vector> embed(const ItemEmbeddingTable& table, std::span<const ItemId> items);

// ---- MLP ----------------------------------------------------------------------

enum class Activation { kIdentity, kRelu };

struct DenseLayer {
  Matrix weight;  // out x in
  Vector bias;    // out
  Activation activation = Activation::kRelu;
};

struct MlpParams {
  std::vector<DenseLayer> layers;

  std::size_t input_dim() const { return layers.empty() ? 0 : layers.front().weight.cols(); }
  std::size_t output_dim() const { return layers.empty() ? 0 : layers.back().bias.size(); }
  void collect(const std::string& prefix, std::vector<TensorView>& out);
};

struct MlpCache {
  std::vector<Vector> inputs;       // input to each layer
  std::vector<Vector> activations;  // pre-activation of each layer
};

// Layer dims: {in, h1, ..., out}. Uniform init in +-1/sqrt(fan_in); the last
// layer uses `last_activation`, the others ReLU.
MlpParams make_mlp(const std::vector<std::size_t>& dims, Activation last_activation,
                   RngStream& rng);
MlpParams zeros_like(const MlpParams& params);

Vector mlp_forward(const MlpParams& params, std::span<const double> x, MlpCache* cache = nullptr);
// Accumulates parameter gradients into `grad`; returns dL/dx.
Vector mlp_backward(const MlpParams& params, const MlpCache& cache, std::span<const double> dy,
                    MlpParams& grad);

// ---- attention expert block -----------------------------------------------------

struct AttentionBlockParams {
  Matrix query;   // d x d
  Matrix key;     // d x d
  Matrix value;   // d x d
  Matrix output;  // d x d
  Vector norm1_scale, norm1_shift;
  Vector norm2_scale, norm2_shift;
  MlpParams feedforward;  // d -> hidden -> d

  std::size_t dim() const { return query.rows(); }
  void collect(const std::string& prefix, std::vector<TensorView>& out);
};

AttentionBlockParams make_attention_block(std::size_t dim, std::size_t hidden, RngStream& rng);
AttentionBlockParams zeros_like(const AttentionBlockParams& params);

struct LayerNormCache {
  Vector normalized;
  double inv_std = 0.0;
};

struct AttentionCache {
  std::vector<Vector> inputs;
  Vector query;
  std::vector<Vector> keys;
  std::vector<Vector> values;
  Vector attention;  // weights of the final query over all positions
  Vector context;
  LayerNormCache norm1;
  Vector hidden1;
  MlpCache feedforward;
  LayerNormCache norm2;
};

// Single-head scaled dot-product self-attention, residual + layer norm,
// position-wise feedforward, residual + layer norm, pooled at the final
// position. Only the final query row is materialized: the other rows never
// reach the pooled output.
Vector expert_block_forward(const AttentionBlockParams& params, std::span<const Vector> seq,
                            AttentionCache* cache = nullptr);
// Accumulates parameter gradients; returns dL/dx for every input position.
std::vector<Vector> expert_block_backward(const AttentionBlockParams& params,
                                          const AttentionCache& cache,
                                          std::span<const double> dout,
                                          AttentionBlockParams& grad);

inline constexpr double kLayerNormEpsilon = 1e-5;

// ---- classifier and loss ----------------------------------------------------------

struct ClassifierCache {
  MlpCache mlp;
  std::size_t user_dim = 0;
};

// Logit of head([user_repr ; target_emb]).
double classifier_forward(const MlpParams& head, std::span<const double> user_repr,
                          std::span<const double> target_emb, ClassifierCache* cache = nullptr);

struct ClassifierGrad {
  Vector d_user;
  Vector d_target;
};
ClassifierGrad classifier_backward(const MlpParams& head, const ClassifierCache& cache,
                                   double dlogit, MlpParams& grad);

struct BceResult {
  double loss = 0.0;
  double dloss_dlogit = 0.0;
};
BceResult bce_loss(double logit, int label);

double sigmoid(double z);

// ---- Adam -----------------------------------------------------------------------

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct AdamState {
  AdamConfig config;
  Vector first_moment;
  Vector second_moment;
  std::uint64_t step = 0;
};

AdamState make_adam_state(const AdamConfig& config, std::size_t size);
// Bias-corrected Adam update of `params` in place.
void adam_step(AdamState& state, std::span<double> params, std::span<const double> grads);

}  // namespace mos
