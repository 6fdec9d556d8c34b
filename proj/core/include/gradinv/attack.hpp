#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "gradinv/autodiff.hpp"
#include "gradinv/flsim.hpp"
#include "gradinv/nn.hpp"
#include "gradinv/normalize.hpp"

namespace gradinv::attack {

enum class Objective : std::uint8_t { kL2Dlg, kCosineInvg, kAgic };
enum class FedAvgMode : std::uint8_t { kNone, kOneBatch, kSimulation };

struct AttackConfig {
  Objective objective = Objective::kAgic;
  FedAvgMode fedavg_mode = FedAvgMode::kNone;
  int iterations = 10000;
  double lr = 0.1;
  double zeta_tv = 1e-4;
  double beta = 50.0;
  bool relu_modifier = true;
  double mu = 1e-4;  // local SGD rate, assumed known to the attacker
  std::uint64_t init_seed = 0;

  void validate() const;
};

struct ReconstructionResult {
  Tensor images;  // [B,C,H,W] de-normalized; clamped only at export
  std::vector<int> labels;
  double best_objective = 0.0;
  double last_objective = 0.0;
  int best_iteration = -1;
  std::vector<std::pair<int, double>> trace;  // (iteration, objective), subsampled
  double seconds_per_iteration = 0.0;
  double total_seconds = 0.0;
  int iterations_run = 0;
};

/// Analytic label recovery from the final fully connected layer's weight
/// gradient: negative row sum for a single label, most-negative per-row
/// minima for larger batches. Returned sorted ascending, duplicate-free.
std::vector<int> infer_labels(const std::vector<Tensor>& grads, const nn::ModelSpec& spec,
                              int n_labels);

/// Convenience overload; applies the one-batch approximation first for
/// model-delta records.
std::vector<int> infer_labels(const fl::UpdateRecord& record, const nn::ModelSpec& spec,
                              int n_labels);

/// One-batch approximation: delta W / -mu, shape-aligned with parameters.
/// The reconstruction target batch size becomes B*T.
std::vector<Tensor> one_batch_gradients(const fl::UpdateRecord& record, double mu);

/// Per-layer weights for the weighted cosine objective. Entry i < n_conv is
/// the linearly assigned l_i (optionally multiplied by the capped ReLU
/// zero-proportion modifier); the final entry is the fully connected pool
/// weight, the mean of the l_i.
std::vector<double> layer_weights(int n_conv, double beta,
                                  const std::vector<double>* zero_fractions = nullptr);

/// 1 - weighted cosine of two per-parameter gradient lists, pooling each
/// layer's parameters. alpha has n_conv + 1 entries (the last pools all fc
/// parameters). Throws ValueError on a zero-norm side.
Tensor weighted_cosine_distance(ad::Graph& g, const std::vector<Tensor>& dummy_grads,
                                const std::vector<Tensor>& target_grads,
                                const std::vector<double>& alpha, const nn::ModelSpec& spec);

/// Layer-weighted negative cosine objective plus TV regularization.
/// alpha has n_conv + 1 entries (the last pools all fc parameters).
Tensor agic_objective(ad::Graph& g, const Tensor& dummy, const std::vector<int>& labels,
                      const std::vector<Tensor>& target_grads, const std::vector<double>& alpha,
                      double zeta_tv, const nn::ModelSpec& spec,
                      const std::vector<Tensor>& params);

/// Sum of squared gradient differences over all parameters; no TV term.
Tensor l2_objective(ad::Graph& g, const Tensor& dummy, const std::vector<int>& labels,
                    const std::vector<Tensor>& target_grads, const nn::ModelSpec& spec,
                    const std::vector<Tensor>& params);

/// Plain negative cosine objective plus TV (equal layer weights).
Tensor cosine_objective(ad::Graph& g, const Tensor& dummy, const std::vector<int>& labels,
                        const std::vector<Tensor>& target_grads, double zeta_tv,
                        const nn::ModelSpec& spec, const std::vector<Tensor>& params);

/// Unrolls T differentiable SGD steps from the record's base model over the
/// per-step dummy batches and matches the resulting model delta by cosine
/// distance. Gradient flows through the whole chain.
Tensor simulation_objective(ad::Graph& g, const std::vector<Tensor>& step_dummies,
                            const std::vector<std::vector<int>>& step_labels,
                            const fl::UpdateRecord& record, double zeta_tv,
                            const nn::ModelSpec& spec);

/// Adam-driven reconstruction of one update record. Labels are inferred
/// before optimization except in simulation mode, which is incompatible
/// with label inference and receives the per-step ground-truth labels.
ReconstructionResult reconstruct(const fl::UpdateRecord& record, const AttackConfig& config,
                                 const nn::ModelSpec& spec, const Normalization& norm,
                                 const std::vector<std::vector<int>>* simulation_labels = nullptr);

}  // namespace gradinv::attack
