#include "gradinv/multiepoch.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>

#include "gradinv/adam.hpp"
#include "gradinv/rng.hpp"

namespace gradinv::multiepoch {

PreReconstruction pre_reconstruct(std::span<const fl::UpdateRecord> records,
                                  const attack::AttackConfig& config, int budget,
                                  const nn::ModelSpec& spec, const Normalization& norm) {
  if (budget < 1) throw ValueError("pre_reconstruct: budget must be >= 1");
  PreReconstruction out;
  out.per_record.reserve(records.size());
  for (std::size_t r = 0; r < records.size(); ++r) {
    attack::AttackConfig cfg = config;
    cfg.iterations = budget;
    cfg.init_seed = Rng::mix(config.init_seed, static_cast<std::uint64_t>(records[r].round_index));
    attack::ReconstructionResult res = attack::reconstruct(records[r], cfg, spec, norm);
    int n_slots = res.images.shape[0];
    std::int64_t row = res.images.size() / n_slots;
    for (int s = 0; s < n_slots; ++s) {
      Slot slot;
      slot.ref = {static_cast<int>(r), s};
      Shape img_shape(res.images.shape.begin() + 1, res.images.shape.end());
      Tensor img = Tensor::zeros(img_shape);
      for (std::int64_t k = 0; k < row; ++k) img[k] = res.images[static_cast<std::int64_t>(s) * row + k];
      slot.image = std::move(img);
      slot.record_labels = res.labels;
      slot.slot_label = res.labels[static_cast<std::size_t>(s)];
      out.slots.push_back(std::move(slot));
    }
    out.per_record.push_back(std::move(res));
  }
  return out;
}

namespace {

double mse(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "similarity");
  double acc = 0.0;
  for (std::int64_t i = 0; i < a.size(); ++i) {
    double d = a[i] - b[i];
    acc += d * d;
  }
  return acc / static_cast<double>(a.size());
}

Tensor as_nchw(const Tensor& img) {
  if (img.shape.size() == 4) return img;
  if (img.shape.size() == 3) {
    Tensor t = img;
    t.shape.insert(t.shape.begin(), 1);
    return Tensor(t.shape, *img.data);
  }
  throw ShapeError("similarity: expected image of 3 or 4 dims, got " + shape_str(img.shape));
}

Tensor pooled(const Tensor& img) {
  ad::Graph g;
  return ad::avgpool2d(g, as_nchw(img), 2, 2).detached_copy();
}

}  // namespace

double pooled_similarity(const Tensor& img_a, const Tensor& img_b) {
  require_same_shape(img_a, img_b, "pooled_similarity");
  return mse(pooled(img_a), pooled(img_b));
}

double unpooled_similarity(const Tensor& img_a, const Tensor& img_b) {
  return mse(img_a, img_b);
}

namespace {

bool labels_intersect(const std::vector<int>& a, const std::vector<int>& b) {
  for (int x : a) {
    if (std::find(b.begin(), b.end(), x) != b.end()) return true;
  }
  return false;
}

struct Candidate {
  double score;
  int ai;
  int bi;
};

void greedy_sweep(const std::vector<Candidate>& cands, std::vector<int>& match_a,
                  std::vector<int>& match_b, std::vector<MatchPair>& pairs,
                  const std::vector<Slot>& slots_a, const std::vector<Slot>& slots_b,
                  bool fallback) {
  for (const Candidate& c : cands) {
    if (match_a[static_cast<std::size_t>(c.ai)] >= 0 || match_b[static_cast<std::size_t>(c.bi)] >= 0)
      continue;
    match_a[static_cast<std::size_t>(c.ai)] = c.bi;
    match_b[static_cast<std::size_t>(c.bi)] = c.ai;
    pairs.push_back({slots_a[static_cast<std::size_t>(c.ai)].ref,
                     slots_b[static_cast<std::size_t>(c.bi)].ref, c.score, fallback});
  }
}

}  // namespace

MatchResult greedy_match(const std::vector<Slot>& slots_a, const std::vector<Slot>& slots_b,
                         bool label_filter, bool use_pooling) {
  if (slots_a.size() != slots_b.size()) {
    throw ShapeError("greedy_match: slot counts differ, " + std::to_string(slots_a.size()) +
                     " vs " + std::to_string(slots_b.size()));
  }
  const int n = static_cast<int>(slots_a.size());
  std::vector<std::vector<double>> score(static_cast<std::size_t>(n),
                                         std::vector<double>(static_cast<std::size_t>(n), 0.0));
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      score[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] =
          use_pooling
              ? pooled_similarity(slots_a[static_cast<std::size_t>(i)].image,
                                  slots_b[static_cast<std::size_t>(j)].image)
              : unpooled_similarity(slots_a[static_cast<std::size_t>(i)].image,
                                    slots_b[static_cast<std::size_t>(j)].image);
    }
  }

  auto sorted_candidates = [&](bool filtered) {
    std::vector<Candidate> cands;
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < n; ++j) {
        if (filtered && label_filter &&
            !labels_intersect(slots_a[static_cast<std::size_t>(i)].record_labels,
                              slots_b[static_cast<std::size_t>(j)].record_labels)) {
          continue;
        }
        cands.push_back({score[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)], i, j});
      }
    }
    // Ascending score; ties broken by (a index, b index).
    std::stable_sort(cands.begin(), cands.end(), [](const Candidate& x, const Candidate& y) {
      if (x.score != y.score) return x.score < y.score;
      if (x.ai != y.ai) return x.ai < y.ai;
      return x.bi < y.bi;
    });
    return cands;
  };

  MatchResult result;
  std::vector<int> match_a(static_cast<std::size_t>(n), -1);
  std::vector<int> match_b(static_cast<std::size_t>(n), -1);
  greedy_sweep(sorted_candidates(true), match_a, match_b, result.pairs, slots_a, slots_b, false);
  if (static_cast<int>(result.pairs.size()) < n) {
    // The filter left some slots unmatched (possible with mis-inferred
    // labels); complete the bijection ignoring it and flag those pairs.
    greedy_sweep(sorted_candidates(false), match_a, match_b, result.pairs, slots_a, slots_b, true);
  }
  return result;
}

std::vector<JointGroup> chain_groups(const std::vector<std::vector<Slot>>& epochs,
                                     const std::vector<MatchResult>& matches) {
  if (epochs.size() < 2 || matches.size() != epochs.size() - 1) {
    throw ValueError("chain_groups: need k epochs and k-1 matchings");
  }
  std::vector<JointGroup> groups;
  const std::vector<Slot>& first = epochs[0];
  for (const Slot& s : first) {
    JointGroup group;
    group.members.push_back({s.ref.record, s.ref.slot});
    SlotRef cur = s.ref;
    for (std::size_t m = 0; m < matches.size(); ++m) {
      const MatchPair* next = nullptr;
      for (const MatchPair& p : matches[m].pairs) {
        if (p.a == cur) {
          next = &p;
          break;
        }
      }
      if (!next) throw ValueError("chain_groups: matching is not a bijection over epoch slots");
      group.members.push_back({next->b.record, next->b.slot});
      cur = next->b;
    }
    groups.push_back(std::move(group));
  }
  return groups;
}

namespace {

struct MemberCtx {
  const fl::UpdateRecord* record;
  int bound_slot = 0;
  int n_slots = 1;
  std::vector<Tensor> targets;       // gradients (one-batch for deltas)
  std::vector<int> labels;           // sorted inferred labels, slot order
  std::vector<double> alpha;         // per-layer weights
  Tensor others;                     // [n_slots-1, C,H,W] dummy variables, or empty
};

}  // namespace

attack::ReconstructionResult joint_reconstruct_group(
    const JointGroup& group, std::span<const fl::UpdateRecord> records,
    const attack::AttackConfig& config, const std::vector<double>& gammas,
    const nn::ModelSpec& spec, const Normalization& norm, std::uint64_t group_key) {
  if (group.members.empty()) throw ValueError("joint_reconstruct_group: empty group");
  if (gammas.empty()) throw ValueError("joint_reconstruct_group: no epoch weights");

  std::vector<MemberCtx> members;
  members.reserve(group.members.size());
  for (std::size_t k = 0; k < group.members.size(); ++k) {
    const JointMember& m = group.members[k];
    if (m.record < 0 || m.record >= static_cast<int>(records.size())) {
      throw ValueError("joint_reconstruct_group: member record out of range");
    }
    MemberCtx ctx;
    ctx.record = &records[static_cast<std::size_t>(m.record)];
    ctx.n_slots = ctx.record->kind == fl::UpdateKind::kGradient
                      ? ctx.record->batch_size
                      : ctx.record->batch_size * ctx.record->local_steps;
    if (m.slot < 0 || m.slot >= ctx.n_slots) {
      throw ValueError("joint_reconstruct_group: inconsistent slot binding for record " +
                       std::to_string(m.record));
    }
    ctx.bound_slot = m.slot;
    ctx.targets = ctx.record->kind == fl::UpdateKind::kGradient
                      ? ctx.record->payload
                      : attack::one_batch_gradients(*ctx.record, config.mu);
    ctx.labels = attack::infer_labels(ctx.targets, spec, ctx.n_slots);
    if (config.objective == attack::Objective::kAgic) {
      if (config.relu_modifier) {
        std::vector<double> p = nn::zero_fraction_per_layer(spec, ctx.targets);
        ctx.alpha = attack::layer_weights(spec.n_conv, config.beta, &p);
      } else {
        ctx.alpha = attack::layer_weights(spec.n_conv, config.beta);
      }
    } else {
      ctx.alpha.assign(static_cast<std::size_t>(spec.n_conv) + 1, 1.0);
    }
    members.push_back(std::move(ctx));
  }

  const Shape img_shape{1, spec.in_channels, spec.in_height, spec.in_width};
  Tensor shared = Tensor::zeros(img_shape);
  {
    Rng rng(Rng::mix(Rng::mix(config.init_seed, group_key), 0));
    for (std::int64_t i = 0; i < shared.size(); ++i) shared[i] = rng.normal();
  }
  std::size_t var_count = static_cast<std::size_t>(shared.size());
  for (std::size_t k = 0; k < members.size(); ++k) {
    MemberCtx& ctx = members[k];
    if (ctx.n_slots > 1) {
      ctx.others = Tensor::zeros({ctx.n_slots - 1, spec.in_channels, spec.in_height, spec.in_width});
      Rng rng(Rng::mix(Rng::mix(config.init_seed, group_key), 1 + static_cast<std::uint64_t>(k)));
      for (std::int64_t i = 0; i < ctx.others.size(); ++i) ctx.others[i] = rng.normal();
      var_count += static_cast<std::size_t>(ctx.others.size());
    }
  }

  Adam opt(var_count, config.lr);
  const int iters = config.iterations;
  const int trace_stride = std::max(1, iters / 200);

  attack::ReconstructionResult result;
  Tensor best = shared.detached_copy();
  double best_obj = std::numeric_limits<double>::infinity();
  double last_obj = std::numeric_limits<double>::quiet_NaN();
  int best_iter = -1;

  auto t0 = std::chrono::steady_clock::now();
  for (int it = 0; it < iters; ++it) {
    ad::Graph g;
    Tensor shared_node = g.bind(shared);
    std::vector<Tensor> wrt{shared_node};
    std::vector<Tensor> other_nodes(members.size());
    Tensor obj;
    bool have_obj = false;
    for (std::size_t k = 0; k < members.size(); ++k) {
      MemberCtx& ctx = members[k];
      Tensor batch;
      if (ctx.n_slots == 1) {
        batch = shared_node;
      } else {
        other_nodes[k] = g.bind(ctx.others);
        wrt.push_back(other_nodes[k]);
        std::vector<Tensor> parts;
        int other_row = 0;
        for (int s = 0; s < ctx.n_slots; ++s) {
          if (s == ctx.bound_slot) {
            parts.push_back(shared_node);
          } else {
            parts.push_back(ad::slice_batch(g, other_nodes[k], other_row, 1));
            ++other_row;
          }
        }
        batch = ad::concat_batch(g, parts);
      }
      std::vector<Tensor> dgrads =
          nn::batch_gradient(g, spec, ctx.record->base.params, batch, ctx.labels);
      Tensor term = attack::weighted_cosine_distance(g, dgrads, ctx.targets, ctx.alpha, spec);
      double gamma = k < gammas.size() ? gammas[k] : gammas.back();
      Tensor weighted = ad::scale(g, term, gamma);
      obj = have_obj ? ad::add(g, obj, weighted) : weighted;
      have_obj = true;
    }
    if (config.zeta_tv != 0.0) {
      Tensor tv = ad::total_variation(g, shared_node);
      for (std::size_t k = 0; k < members.size(); ++k) {
        if (members[k].n_slots > 1) {
          tv = ad::add(g, tv, ad::total_variation(g, other_nodes[k]));
        }
      }
      obj = ad::add(g, obj, ad::scale(g, tv, config.zeta_tv));
    }

    double value = obj[0];
    if (!std::isfinite(value)) {
      throw NumericError("joint_reconstruct: objective diverged at iteration " +
                         std::to_string(it));
    }
    last_obj = value;
    if (value < best_obj) {
      best_obj = value;
      best = shared.detached_copy();
      best_iter = it;
    }
    if (it % trace_stride == 0 || it == iters - 1) result.trace.emplace_back(it, value);

    std::vector<Tensor> grads = ad::backward(g, obj, wrt);
    opt.set_lr(staged_lr(config.lr, it, iters));
    std::vector<double> flat;
    flat.reserve(var_count);
    for (const Tensor& t : grads) flat.insert(flat.end(), t.data->begin(), t.data->end());

    std::vector<double> vars;
    vars.reserve(var_count);
    vars.insert(vars.end(), shared.data->begin(), shared.data->end());
    for (const MemberCtx& ctx : members) {
      if (ctx.n_slots > 1) vars.insert(vars.end(), ctx.others.data->begin(), ctx.others.data->end());
    }
    opt.step(vars.data(), flat.data(), var_count);
    std::size_t off = 0;
    for (std::int64_t i = 0; i < shared.size(); ++i) shared[i] = vars[off++];
    for (MemberCtx& ctx : members) {
      if (ctx.n_slots > 1) {
        for (std::int64_t i = 0; i < ctx.others.size(); ++i) ctx.others[i] = vars[off++];
      }
    }
  }
  auto t1 = std::chrono::steady_clock::now();

  result.total_seconds = std::chrono::duration<double>(t1 - t0).count();
  result.seconds_per_iteration = iters > 0 ? result.total_seconds / iters : 0.0;
  result.iterations_run = iters;
  result.best_objective = best_obj;
  result.last_objective = last_obj;
  result.best_iteration = best_iter;
  result.labels = {members[0].labels[static_cast<std::size_t>(members[0].bound_slot)]};
  result.images = denormalize(iters > 0 ? best : shared, norm);
  return result;
}

attack::ReconstructionResult joint_reconstruct(const std::vector<JointGroup>& groups,
                                               std::span<const fl::UpdateRecord> records,
                                               const attack::AttackConfig& config,
                                               const std::vector<double>& gammas,
                                               const nn::ModelSpec& spec,
                                               const Normalization& norm) {
  if (groups.empty()) throw ValueError("joint_reconstruct: no groups");
  attack::ReconstructionResult stacked;
  Tensor images = Tensor::zeros({static_cast<int>(groups.size()), spec.in_channels,
                                 spec.in_height, spec.in_width});
  std::int64_t row = images.size() / static_cast<int>(groups.size());
  double obj_sum = 0.0;
  double total_seconds = 0.0;
  for (std::size_t i = 0; i < groups.size(); ++i) {
    attack::ReconstructionResult r = joint_reconstruct_group(
        groups[i], records, config, gammas, spec, norm, static_cast<std::uint64_t>(i));
    for (std::int64_t k = 0; k < row; ++k) images[static_cast<std::int64_t>(i) * row + k] = r.images[k];
    stacked.labels.push_back(r.labels[0]);
    obj_sum += r.best_objective;
    total_seconds += r.total_seconds;
    if (i == 0) stacked.trace = r.trace;
    stacked.iterations_run = r.iterations_run;
  }
  stacked.images = std::move(images);
  stacked.best_objective = obj_sum / static_cast<double>(groups.size());
  stacked.last_objective = stacked.best_objective;
  stacked.total_seconds = total_seconds;
  stacked.seconds_per_iteration =
      stacked.iterations_run > 0
          ? total_seconds / (static_cast<double>(stacked.iterations_run) * groups.size())
          : 0.0;
  return stacked;
}

}  // namespace gradinv::multiepoch
