#pragma once

#include <cstdint>
#include <string>
#include <variant>
#include <vector>

#include "gradinv/autodiff.hpp"
#include "gradinv/tensor.hpp"

namespace gradinv::nn {

struct ConvDesc {
  int out_channels = 0;
  int kernel = 3;
  int stride = 1;
  int padding = 1;
  bool relu = true;
  int skip_from = -1;  // layer index whose output is added before activation
};

struct PoolDesc {
  int kernel = 2;
  int stride = 2;
};

struct FcDesc {
  int out_features = 0;
};

using LayerDesc = std::variant<ConvDesc, PoolDesc, FcDesc>;

/// Layer-structured CNN description. Shapes are validated and derived
/// metadata filled by finalize(); the model zoo helpers return specs
/// already finalized.
struct ModelSpec {
  int in_channels = 3;
  int in_height = 0;
  int in_width = 0;
  int num_classes = 0;
  std::vector<LayerDesc> layers;

  // Derived by finalize().
  bool finalized = false;
  int n_conv = 0;
  std::vector<int> conv_ordinal;       // per layer; -1 for non-conv layers
  std::vector<Shape> out_shapes;       // per layer, without the batch dimension

  void finalize();

  /// 3 conv layers (8, 16, 16 channels) plus a classifier head, for small
  /// square inputs (8x8 or 16x16).
  static ModelSpec tiny_cnn(int hw, int classes);

  /// 6 conv layers with two identity skip connections, for 32x32 inputs.
  static ModelSpec mini_resnet(int classes);
};

enum class ParamKind : std::uint8_t { kConvWeight, kConvBias, kFcWeight, kFcBias };

struct ParamTag {
  int layer = 0;
  ParamKind kind = ParamKind::kConvWeight;
};

/// Trainable parameters with per-layer identity. Immutable after
/// construction except through apply_sgd_step, which returns a new state.
struct ModelState {
  std::vector<Tensor> params;
  std::vector<ParamTag> tags;
  std::uint64_t init_seed = 0;
};

/// Parameter tags in declaration order, without materializing values.
std::vector<ParamTag> param_tags(const ModelSpec& spec);

/// Kaiming-uniform weights, zero biases, fully determined by seed.
ModelState init_model(const ModelSpec& spec, std::uint64_t seed);

/// Interns every parameter as a graph leaf, preserving order.
std::vector<Tensor> bind_params(ad::Graph& g, const std::vector<Tensor>& params);

/// Forward pass producing [B, num_classes] logits. Parameters may be plain
/// values or nodes of g (for differentiable unrolling).
Tensor model_forward(ad::Graph& g, const ModelSpec& spec, const std::vector<Tensor>& params,
                     const Tensor& x);

/// Mean-reduction cross-entropy gradients w.r.t. every parameter, aligned
/// with the tagged parameter list and returned as differentiable nodes.
std::vector<Tensor> batch_gradient(ad::Graph& g, const ModelSpec& spec,
                                   const std::vector<Tensor>& params, const Tensor& x,
                                   const std::vector<int>& labels);

/// Fraction of exactly-zero entries per conv layer (weights and biases of
/// the layer pooled), in conv-ordinal order.
std::vector<double> zero_fraction_per_layer(const ModelSpec& spec,
                                            const std::vector<Tensor>& grads);

/// W <- W - mu * grads, plain numeric update; returns a new state.
ModelState apply_sgd_step(const ModelState& state, const std::vector<Tensor>& grads, double mu);

std::vector<double> flatten_params(const std::vector<Tensor>& params);
std::vector<Tensor> unflatten_params(const std::vector<Tensor>& like,
                                     const std::vector<double>& flat);

/// Pool index used by the layer-weighted objective: conv ordinal for conv
/// parameters, n_conv for every fully connected parameter.
int objective_pool_index(const ModelSpec& spec, const ParamTag& tag);

}  // namespace gradinv::nn
