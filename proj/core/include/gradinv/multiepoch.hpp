#pragma once

#include <span>
#include <vector>

#include "gradinv/attack.hpp"
#include "gradinv/flsim.hpp"

namespace gradinv::multiepoch {

struct SlotRef {
  int record = 0;  // index into the record span handed to pre_reconstruct
  int slot = 0;    // sample slot within that record's reconstruction
  bool operator==(const SlotRef&) const = default;
};

/// One pre-reconstructed sample: its image, the inferred label list of its
/// record (the matching filter works on whole-record lists) and the label
/// bound to this slot.
struct Slot {
  SlotRef ref;
  Tensor image;  // de-normalized [C,H,W]
  std::vector<int> record_labels;
  int slot_label = -1;
};

struct MatchPair {
  SlotRef a;
  SlotRef b;
  double score = 0.0;
  bool fallback = false;  // matched outside the label filter
};

/// Perfect matching between the slots of two epochs.
struct MatchResult {
  std::vector<MatchPair> pairs;
};

struct PreReconstruction {
  std::vector<attack::ReconstructionResult> per_record;
  std::vector<Slot> slots;  // record-major, slot-minor
};

/// Runs the configured attack per record with a reduced iteration budget.
/// Per-record init seeds are derived from (config seed, round index).
PreReconstruction pre_reconstruct(std::span<const fl::UpdateRecord> records,
                                  const attack::AttackConfig& config, int budget,
                                  const nn::ModelSpec& spec, const Normalization& norm);

/// MSE between 2x2/stride-2 average-pooled copies of both images
/// (lower = more similar).
double pooled_similarity(const Tensor& img_a, const Tensor& img_b);

/// Raw MSE, no pooling; used for the pooling ablation.
double unpooled_similarity(const Tensor& img_a, const Tensor& img_b);

/// Greedy one-to-one matching by ascending score; with the label filter on,
/// only slots whose record label lists intersect are paired in the first
/// phase, and any leftovers are completed without the filter (flagged).
MatchResult greedy_match(const std::vector<Slot>& slots_a, const std::vector<Slot>& slots_b,
                         bool label_filter, bool use_pooling = true);

struct JointMember {
  int record = 0;
  int slot = 0;
};

/// One matched sample: the record/slot it occupies in each epoch, ordered
/// by epoch.
struct JointGroup {
  std::vector<JointMember> members;
};

/// Chains per-consecutive-epoch matchings into per-sample groups. epochs is
/// the per-epoch slot lists; matches[i] joins epochs[i] and epochs[i+1].
std::vector<JointGroup> chain_groups(const std::vector<std::vector<Slot>>& epochs,
                                     const std::vector<MatchResult>& matches);

/// Joint reconstruction of one matched sample against all its updates, with
/// epoch weights gamma. The shared sample is pinned to its bound slot in
/// every record; other slots hold that record's own dummy variables.
attack::ReconstructionResult joint_reconstruct_group(
    const JointGroup& group, std::span<const fl::UpdateRecord> records,
    const attack::AttackConfig& config, const std::vector<double>& gammas,
    const nn::ModelSpec& spec, const Normalization& norm, std::uint64_t group_key);

/// Runs every group and stacks the shared-sample images into one result.
attack::ReconstructionResult joint_reconstruct(const std::vector<JointGroup>& groups,
                                               std::span<const fl::UpdateRecord> records,
                                               const attack::AttackConfig& config,
                                               const std::vector<double>& gammas,
                                               const nn::ModelSpec& spec,
                                               const Normalization& norm);

}  // namespace gradinv::multiepoch
