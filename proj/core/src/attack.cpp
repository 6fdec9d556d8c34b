#include "gradinv/attack.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

#include "gradinv/adam.hpp"
#include "gradinv/rng.hpp"

namespace gradinv::attack {

void AttackConfig::validate() const {
  if (iterations < 1) throw ConfigError("attack.iterations: must be >= 1");
  if (lr <= 0.0) throw ConfigError("attack.lr: must be > 0");
  if (zeta_tv < 0.0) throw ConfigError("attack.zeta_tv: must be >= 0");
  if (beta <= 0.0) throw ConfigError("attack.beta: must be > 0");
  if (mu <= 0.0) throw ConfigError("attack.mu: must be > 0");
}

namespace {

const Tensor& final_fc_weight_grad(const std::vector<Tensor>& grads, const nn::ModelSpec& spec) {
  std::vector<nn::ParamTag> tags = nn::param_tags(spec);
  if (grads.size() != tags.size()) {
    throw ShapeError("infer_labels: gradient list not aligned with model spec");
  }
  int found = -1;
  for (std::size_t i = 0; i < tags.size(); ++i) {
    if (tags[i].kind == nn::ParamKind::kFcWeight) found = static_cast<int>(i);
  }
  if (found < 0) throw ValueError("infer_labels: model has no fully connected layer");
  return grads[static_cast<std::size_t>(found)];
}

}  // namespace

std::vector<int> infer_labels(const std::vector<Tensor>& grads, const nn::ModelSpec& spec,
                              int n_labels) {
  if (n_labels < 1) throw ValueError("infer_labels: need at least one label");
  if (n_labels > spec.num_classes) {
    throw ValueError("infer_labels: " + std::to_string(n_labels) + " labels requested but model has " +
                     std::to_string(spec.num_classes) + " classes");
  }
  const Tensor& fcw = final_fc_weight_grad(grads, spec);
  int classes = fcw.shape[0];
  std::int64_t cols = fcw.shape[1];

  if (n_labels == 1) {
    // iDLG rule: the true class is the one whose weight-gradient row sums
    // negative; argmin keeps the pick deterministic if several rows dip.
    int best = 0;
    double best_sum = std::numeric_limits<double>::infinity();
    for (int c = 0; c < classes; ++c) {
      double s = 0.0;
      for (std::int64_t k = 0; k < cols; ++k) s += fcw[c * cols + k];
      if (s < best_sum) {
        best_sum = s;
        best = c;
      }
    }
    return {best};
  }

  // Batch rule: classes whose rows contain the most negative minima.
  std::vector<std::pair<double, int>> row_min(static_cast<std::size_t>(classes));
  for (int c = 0; c < classes; ++c) {
    double m = fcw[c * cols];
    for (std::int64_t k = 1; k < cols; ++k) m = std::min(m, fcw[c * cols + k]);
    row_min[static_cast<std::size_t>(c)] = {m, c};
  }
  std::sort(row_min.begin(), row_min.end());
  std::vector<int> labels;
  labels.reserve(static_cast<std::size_t>(n_labels));
  for (int i = 0; i < n_labels; ++i) labels.push_back(row_min[static_cast<std::size_t>(i)].second);
  std::sort(labels.begin(), labels.end());
  return labels;
}

std::vector<int> infer_labels(const fl::UpdateRecord& record, const nn::ModelSpec& spec,
                              int n_labels) {
  if (record.kind == fl::UpdateKind::kModelDelta) {
    return infer_labels(one_batch_gradients(record, record.mu), spec, n_labels);
  }
  return infer_labels(record.payload, spec, n_labels);
}

std::vector<Tensor> one_batch_gradients(const fl::UpdateRecord& record, double mu) {
  if (record.kind != fl::UpdateKind::kModelDelta) {
    throw ValueError("one_batch_gradients: record does not carry a model delta");
  }
  if (mu == 0.0) throw ValueError("one_batch_gradients: mu must be nonzero");
  std::vector<Tensor> out;
  out.reserve(record.payload.size());
  for (const Tensor& d : record.payload) {
    Tensor t = Tensor::zeros(d.shape);
    for (std::int64_t k = 0; k < d.size(); ++k) t[k] = d[k] / -mu;
    out.push_back(std::move(t));
  }
  return out;
}

std::vector<double> layer_weights(int n_conv, double beta,
                                  const std::vector<double>* zero_fractions) {
  if (n_conv < 1) throw ValueError("layer_weights: need at least one conv layer");
  if (beta <= 0.0) throw ValueError("layer_weights: beta must be > 0");
  if (zero_fractions && static_cast<int>(zero_fractions->size()) != n_conv) {
    throw ShapeError("layer_weights: zero-fraction list does not match conv layer count");
  }
  std::vector<double> weights(static_cast<std::size_t>(n_conv) + 1, 1.0);
  double lsum = 0.0;
  for (int i = 1; i <= n_conv; ++i) {
    double li = n_conv == 1 ? 1.0 : 1.0 + (beta - 1.0) * (i - 1) / (n_conv - 1);
    lsum += li;
    double alpha = li;
    if (zero_fractions) {
      double p = (*zero_fractions)[static_cast<std::size_t>(i - 1)];
      if (p < 0.0 || p > 1.0) throw ValueError("layer_weights: zero fraction outside [0,1]");
      // Cap keeps degenerate all-zero layers from blowing up the objective.
      double z = p >= 1.0 ? 100.0 : std::min(1.0 / (1.0 - p), 100.0);
      alpha *= z;
    }
    weights[static_cast<std::size_t>(i - 1)] = alpha;
  }
  weights[static_cast<std::size_t>(n_conv)] = lsum / n_conv;  // fc pool, unmodified
  return weights;
}

namespace {

struct PooledTerms {
  Tensor num;  // sum_p alpha_p * (dg_p . tg_p)
  Tensor na;   // sum_p alpha_p * ||dg_p||^2
  Tensor nb;   // sum_p alpha_p * ||tg_p||^2
};

PooledTerms weighted_cosine_terms(ad::Graph& g, const std::vector<Tensor>& dgrads,
                                  const std::vector<Tensor>& targets,
                                  const std::vector<double>& alpha, const nn::ModelSpec& spec) {
  std::vector<nn::ParamTag> tags = nn::param_tags(spec);
  if (dgrads.size() != tags.size() || targets.size() != tags.size()) {
    throw ShapeError("weighted cosine: gradient lists not aligned with model spec");
  }
  if (static_cast<int>(alpha.size()) != spec.n_conv + 1) {
    throw ShapeError("weighted cosine: expected " + std::to_string(spec.n_conv + 1) +
                     " layer weights, got " + std::to_string(alpha.size()));
  }
  int pools = spec.n_conv + 1;
  std::vector<Tensor> dot(static_cast<std::size_t>(pools));
  std::vector<Tensor> na(static_cast<std::size_t>(pools));
  std::vector<Tensor> nb(static_cast<std::size_t>(pools));
  std::vector<bool> seen(static_cast<std::size_t>(pools), false);
  for (std::size_t i = 0; i < dgrads.size(); ++i) {
    require_same_shape(dgrads[i], targets[i], "weighted cosine");
    std::size_t p = static_cast<std::size_t>(nn::objective_pool_index(spec, tags[i]));
    Tensor tg = g.bind(targets[i]);
    Tensor d = ad::sum_all(g, ad::mul(g, dgrads[i], tg));
    Tensor a2 = ad::sum_all(g, ad::mul(g, dgrads[i], dgrads[i]));
    Tensor b2 = ad::sum_all(g, ad::mul(g, tg, tg));
    if (!seen[p]) {
      dot[p] = d;
      na[p] = a2;
      nb[p] = b2;
      seen[p] = true;
    } else {
      dot[p] = ad::add(g, dot[p], d);
      na[p] = ad::add(g, na[p], a2);
      nb[p] = ad::add(g, nb[p], b2);
    }
  }
  PooledTerms out;
  bool first = true;
  for (int p = 0; p < pools; ++p) {
    if (!seen[static_cast<std::size_t>(p)]) continue;
    Tensor wn = ad::scale(g, dot[static_cast<std::size_t>(p)], alpha[static_cast<std::size_t>(p)]);
    Tensor wa = ad::scale(g, na[static_cast<std::size_t>(p)], alpha[static_cast<std::size_t>(p)]);
    Tensor wb = ad::scale(g, nb[static_cast<std::size_t>(p)], alpha[static_cast<std::size_t>(p)]);
    if (first) {
      out.num = wn;
      out.na = wa;
      out.nb = wb;
      first = false;
    } else {
      out.num = ad::add(g, out.num, wn);
      out.na = ad::add(g, out.na, wa);
      out.nb = ad::add(g, out.nb, wb);
    }
  }
  return out;
}

}  // namespace

Tensor weighted_cosine_distance(ad::Graph& g, const std::vector<Tensor>& dummy_grads,
                                const std::vector<Tensor>& target_grads,
                                const std::vector<double>& alpha, const nn::ModelSpec& spec) {
  PooledTerms t = weighted_cosine_terms(g, dummy_grads, target_grads, alpha, spec);
  if (t.na[0] == 0.0) {
    throw ValueError("weighted cosine: zero-norm dummy gradients, objective degenerate");
  }
  if (t.nb[0] == 0.0) {
    throw ValueError("weighted cosine: zero-norm target gradients, objective degenerate");
  }
  Tensor cosv = ad::mul(
      g, t.num, ad::recip(g, ad::mul(g, ad::sqrt_t(g, t.na), ad::sqrt_t(g, t.nb))));
  return ad::sub(g, g.leaf(Tensor::scalar(1.0)), cosv);
}

Tensor agic_objective(ad::Graph& g, const Tensor& dummy, const std::vector<int>& labels,
                      const std::vector<Tensor>& target_grads, const std::vector<double>& alpha,
                      double zeta_tv, const nn::ModelSpec& spec,
                      const std::vector<Tensor>& params) {
  Tensor dummy_node = g.bind(dummy);
  std::vector<Tensor> dgrads = nn::batch_gradient(g, spec, params, dummy_node, labels);
  Tensor obj = weighted_cosine_distance(g, dgrads, target_grads, alpha, spec);
  if (zeta_tv != 0.0) {
    obj = ad::add(g, obj, ad::scale(g, ad::total_variation(g, dummy_node), zeta_tv));
  }
  return obj;
}

Tensor cosine_objective(ad::Graph& g, const Tensor& dummy, const std::vector<int>& labels,
                        const std::vector<Tensor>& target_grads, double zeta_tv,
                        const nn::ModelSpec& spec, const std::vector<Tensor>& params) {
  Tensor dummy_node = g.bind(dummy);
  std::vector<Tensor> dgrads = nn::batch_gradient(g, spec, params, dummy_node, labels);
  std::vector<Tensor> targets;
  targets.reserve(target_grads.size());
  for (const Tensor& t : target_grads) targets.push_back(g.bind(t));
  Tensor cosv = ad::cosine_similarity_flat(g, dgrads, targets);
  Tensor obj = ad::sub(g, g.leaf(Tensor::scalar(1.0)), cosv);
  if (zeta_tv != 0.0) {
    obj = ad::add(g, obj, ad::scale(g, ad::total_variation(g, dummy_node), zeta_tv));
  }
  return obj;
}

Tensor l2_objective(ad::Graph& g, const Tensor& dummy, const std::vector<int>& labels,
                    const std::vector<Tensor>& target_grads, const nn::ModelSpec& spec,
                    const std::vector<Tensor>& params) {
  Tensor dummy_node = g.bind(dummy);
  std::vector<Tensor> dgrads = nn::batch_gradient(g, spec, params, dummy_node, labels);
  if (dgrads.size() != target_grads.size()) {
    throw ShapeError("l2_objective: gradient list sizes differ");
  }
  Tensor obj;
  for (std::size_t i = 0; i < dgrads.size(); ++i) {
    Tensor diff = ad::sub(g, dgrads[i], g.bind(target_grads[i]));
    Tensor term = ad::sum_all(g, ad::mul(g, diff, diff));
    obj = i == 0 ? term : ad::add(g, obj, term);
  }
  return obj;
}

Tensor simulation_objective(ad::Graph& g, const std::vector<Tensor>& step_dummies,
                            const std::vector<std::vector<int>>& step_labels,
                            const fl::UpdateRecord& record, double zeta_tv,
                            const nn::ModelSpec& spec) {
  if (record.kind != fl::UpdateKind::kModelDelta) {
    throw ValueError("simulation_objective: record does not carry a model delta");
  }
  if (static_cast<int>(step_dummies.size()) != record.local_steps ||
      step_labels.size() != step_dummies.size()) {
    throw ShapeError("simulation_objective: need one dummy batch and label list per local step");
  }
  std::vector<Tensor> w0 = nn::bind_params(g, record.base.params);
  std::vector<Tensor> cur = w0;
  for (std::size_t t = 0; t < step_dummies.size(); ++t) {
    Tensor dummy = g.bind(step_dummies[t]);
    std::vector<Tensor> grads = nn::batch_gradient(g, spec, cur, dummy, step_labels[t]);
    for (std::size_t i = 0; i < cur.size(); ++i) {
      cur[i] = ad::sub(g, cur[i], ad::scale(g, grads[i], record.mu));
    }
  }
  std::vector<Tensor> delta;
  delta.reserve(cur.size());
  for (std::size_t i = 0; i < cur.size(); ++i) delta.push_back(ad::sub(g, cur[i], w0[i]));
  std::vector<Tensor> targets;
  targets.reserve(record.payload.size());
  for (const Tensor& t : record.payload) targets.push_back(g.bind(t));
  Tensor cosv = ad::cosine_similarity_flat(g, delta, targets);
  Tensor obj = ad::sub(g, g.leaf(Tensor::scalar(1.0)), cosv);
  if (zeta_tv != 0.0) {
    for (const Tensor& d : step_dummies) {
      obj = ad::add(g, obj, ad::scale(g, ad::total_variation(g, g.bind(d)), zeta_tv));
    }
  }
  return obj;
}

ReconstructionResult reconstruct(const fl::UpdateRecord& record, const AttackConfig& config,
                                 const nn::ModelSpec& spec, const Normalization& norm,
                                 const std::vector<std::vector<int>>* simulation_labels) {
  if (config.iterations < 0) throw ConfigError("reconstruct: negative iteration count");
  const bool simulation = config.fedavg_mode == FedAvgMode::kSimulation;

  // Resolve targets and labels per mode.
  std::vector<Tensor> targets;
  int total_samples = record.batch_size;
  std::vector<int> labels;
  std::vector<std::vector<int>> step_labels;
  if (record.kind == fl::UpdateKind::kGradient) {
    if (config.fedavg_mode != FedAvgMode::kNone) {
      throw ValueError("reconstruct: gradient records use fedavg-mode none");
    }
    targets = record.payload;
    labels = infer_labels(targets, spec, record.batch_size);
  } else {
    switch (config.fedavg_mode) {
      case FedAvgMode::kNone:
        throw ValueError("reconstruct: model-delta records need fedavg-mode one-batch or simulation");
      case FedAvgMode::kOneBatch:
        targets = one_batch_gradients(record, config.mu);
        total_samples = record.batch_size * record.local_steps;
        labels = infer_labels(targets, spec, total_samples);
        break;
      case FedAvgMode::kSimulation: {
        if (!simulation_labels) {
          throw ValueError(
              "reconstruct: simulation mode is incompatible with label inference and needs "
              "per-step labels");
        }
        step_labels = *simulation_labels;
        if (static_cast<int>(step_labels.size()) != record.local_steps) {
          throw ValueError("reconstruct: simulation labels do not match local step count");
        }
        total_samples = record.batch_size * record.local_steps;
        for (const auto& s : step_labels) {
          if (static_cast<int>(s.size()) != record.batch_size) {
            throw ValueError("reconstruct: simulation labels do not match batch size");
          }
          labels.insert(labels.end(), s.begin(), s.end());
        }
        break;
      }
    }
  }

  // Dummy batch initialized from a seeded standard normal in normalized space.
  Tensor dummy = Tensor::zeros({total_samples, spec.in_channels, spec.in_height, spec.in_width});
  {
    Rng rng(config.init_seed);
    for (std::int64_t i = 0; i < dummy.size(); ++i) dummy[i] = rng.normal();
  }

  std::vector<double> alpha;
  if (config.objective == Objective::kAgic) {
    if (config.relu_modifier) {
      std::vector<double> p = nn::zero_fraction_per_layer(spec, targets.empty() ? record.payload : targets);
      alpha = layer_weights(spec.n_conv, config.beta, &p);
    } else {
      alpha = layer_weights(spec.n_conv, config.beta);
    }
  }

  const int iters = config.iterations;
  const int trace_stride = std::max(1, iters / 200);
  ReconstructionResult result;
  result.labels = labels;

  Tensor best = dummy.detached_copy();
  double best_obj = std::numeric_limits<double>::infinity();
  double last_obj = std::numeric_limits<double>::quiet_NaN();
  int best_iter = -1;

  Adam opt(static_cast<std::size_t>(dummy.size()), config.lr);
  auto t0 = std::chrono::steady_clock::now();

  for (int it = 0; it < iters; ++it) {
    ad::Graph g;
    Tensor obj;
    std::vector<Tensor> wrt;
    if (simulation) {
      std::vector<Tensor> step_dummies;
      for (int t = 0; t < record.local_steps; ++t) {
        Tensor slice = Tensor::zeros({record.batch_size, spec.in_channels, spec.in_height,
                                      spec.in_width});
        std::int64_t row = slice.size();
        for (std::int64_t k = 0; k < row; ++k) {
          slice[k] = dummy[static_cast<std::int64_t>(t) * row + k];
        }
        step_dummies.push_back(g.bind(slice));
      }
      obj = simulation_objective(g, step_dummies, step_labels, record, config.zeta_tv, spec);
      wrt = step_dummies;
    } else {
      Tensor dummy_node = g.bind(dummy);
      switch (config.objective) {
        case Objective::kAgic:
          obj = agic_objective(g, dummy_node, labels, targets, alpha, config.zeta_tv, spec,
                               record.base.params);
          break;
        case Objective::kCosineInvg:
          obj = cosine_objective(g, dummy_node, labels, targets, config.zeta_tv, spec,
                                 record.base.params);
          break;
        case Objective::kL2Dlg:
          obj = l2_objective(g, dummy_node, labels, targets, spec, record.base.params);
          break;
      }
      wrt = {dummy_node};
    }

    double value = obj[0];
    if (!std::isfinite(value)) {
      throw NumericError("reconstruct: objective diverged to non-finite value at iteration " +
                         std::to_string(it));
    }
    last_obj = value;
    if (value < best_obj) {
      best_obj = value;
      best = dummy.detached_copy();
      best_iter = it;
    }
    if (it % trace_stride == 0 || it == iters - 1) {
      result.trace.emplace_back(it, value);
    }

    std::vector<Tensor> grads = ad::backward(g, obj, wrt);
    opt.set_lr(staged_lr(config.lr, it, iters));
    if (simulation) {
      std::vector<double> flat;
      flat.reserve(static_cast<std::size_t>(dummy.size()));
      for (const Tensor& t : grads) flat.insert(flat.end(), t.data->begin(), t.data->end());
      opt.step(dummy.ptr(), flat.data(), flat.size());
    } else {
      opt.step(dummy.ptr(), grads[0].ptr(), static_cast<std::size_t>(dummy.size()));
    }
  }

  auto t1 = std::chrono::steady_clock::now();
  result.total_seconds = std::chrono::duration<double>(t1 - t0).count();
  result.seconds_per_iteration = iters > 0 ? result.total_seconds / iters : 0.0;
  result.iterations_run = iters;
  result.best_objective = best_obj;
  result.last_objective = last_obj;
  result.best_iteration = best_iter;

  const Tensor& chosen = iters > 0 ? best : dummy;
  result.images = denormalize(chosen, norm);
  return result;
}

}  // namespace gradinv::attack
