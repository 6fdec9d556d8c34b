#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "gradinv/nn.hpp"
#include "gradinv/tensor.hpp"

namespace gradinv::fl {

enum class UpdateKind : std::uint8_t { kGradient, kModelDelta };

/// One observed client-to-server message: a single-step gradient or a
/// FedAvg model delta, plus the base model it was computed from. This is
/// everything the attack path is allowed to see; the ground-truth sample
/// indices live in RoundTruth and are consumed only by evaluation.
struct UpdateRecord {
  UpdateKind kind = UpdateKind::kGradient;
  std::vector<Tensor> payload;      // grad W or delta W, aligned with base params
  nn::ModelState base;              // model snapshot at round start
  int round_index = 0;
  int epoch_index = 0;
  int local_steps = 1;              // T; 1 for gradient records
  int batch_size = 1;               // B
  double mu = 0.0;
};

/// Hidden per-round ground truth: the dataset indices of each local step's
/// mini-batch, in step order.
struct RoundTruth {
  int round_index = 0;
  int epoch_index = 0;
  std::vector<std::vector<int>> step_indices;

  /// Indices concatenated in step order; aligns with the one-batch view.
  std::vector<int> flat() const;
};

struct TrainingSchedule {
  int n_samples = 0;
  int epochs = 1;
  int batch_size = 1;
  int local_steps = 1;
  double mu = 1e-4;
  std::optional<std::uint64_t> shuffle_seed;  // nullopt = identity order
  bool freeze_model = false;                  // keep epoch-1 weights for later epochs
};

struct TrainingLog {
  std::vector<UpdateRecord> records;
  std::vector<RoundTruth> truths;  // aligned with records
  bool truncated_last_round = false;
  nn::ModelState final_model;
};

/// A seeded permutation of 0..n-1 chunked into batches of B, grouped T per
/// round. Incomplete trailing rounds are dropped (the caller learns about it
/// via the truncated flag of run_training).
std::vector<std::vector<std::vector<int>>> schedule_batches(int n_samples, int batch_size,
                                                            int local_steps,
                                                            std::optional<std::uint64_t> seed);

/// Stacks per-sample [C,H,W] tensors into one [B,C,H,W] batch.
Tensor stack_batch(const std::vector<Tensor>& images, const std::vector<int>& idx);

/// Runs one round: a single gradient step (gradient kind) or T local SGD
/// steps (model-delta kind). The released state is base + payload, applied
/// elementwise, so the conservation invariant is exact by construction.
std::pair<nn::ModelState, UpdateRecord> run_round(const nn::ModelSpec& spec,
                                                  const nn::ModelState& state,
                                                  const std::vector<Tensor>& images,
                                                  const std::vector<int>& labels,
                                                  const std::vector<std::vector<int>>& batches,
                                                  double mu, UpdateKind kind);

/// Runs E epochs of rounds, model evolving continuously (unless frozen).
TrainingLog run_training(const nn::ModelSpec& spec, const nn::ModelState& initial,
                         const std::vector<Tensor>& images, const std::vector<int>& labels,
                         const TrainingSchedule& schedule, UpdateKind kind);

/// Self-describing JSON container for observation logs (shapes plus 64-bit
/// floats; doubles round-trip exactly).
std::string serialize_log(const TrainingLog& log);
TrainingLog deserialize_log(const std::string& text);

}  // namespace gradinv::fl
