#include "gradinv/flsim.hpp"

#include <nlohmann/json.hpp>

#include "gradinv/rng.hpp"

namespace gradinv::fl {

using nlohmann::json;

std::vector<int> RoundTruth::flat() const {
  std::vector<int> out;
  for (const auto& step : step_indices) out.insert(out.end(), step.begin(), step.end());
  return out;
}

std::vector<std::vector<std::vector<int>>> schedule_batches(int n_samples, int batch_size,
                                                            int local_steps,
                                                            std::optional<std::uint64_t> seed) {
  if (batch_size < 1) throw ValueError("schedule_batches: batch size must be >= 1");
  if (local_steps < 1) throw ValueError("schedule_batches: local steps must be >= 1");
  if (n_samples < batch_size * local_steps) {
    throw ValueError("schedule_batches: dataset of " + std::to_string(n_samples) +
                     " cannot fill one round of " + std::to_string(batch_size) + "x" +
                     std::to_string(local_steps));
  }
  std::vector<int> perm;
  if (seed.has_value()) {
    Rng rng(*seed);
    perm = rng.permutation(n_samples);
  } else {
    perm.resize(static_cast<std::size_t>(n_samples));
    for (int i = 0; i < n_samples; ++i) perm[static_cast<std::size_t>(i)] = i;
  }
  int per_round = batch_size * local_steps;
  int rounds = n_samples / per_round;
  std::vector<std::vector<std::vector<int>>> out;
  out.reserve(static_cast<std::size_t>(rounds));
  int pos = 0;
  for (int r = 0; r < rounds; ++r) {
    std::vector<std::vector<int>> round(static_cast<std::size_t>(local_steps));
    for (int t = 0; t < local_steps; ++t) {
      round[static_cast<std::size_t>(t)].assign(perm.begin() + pos, perm.begin() + pos + batch_size);
      pos += batch_size;
    }
    out.push_back(std::move(round));
  }
  return out;
}

Tensor stack_batch(const std::vector<Tensor>& images, const std::vector<int>& idx) {
  if (idx.empty()) throw ValueError("stack_batch: empty batch");
  const Shape& s = images.at(static_cast<std::size_t>(idx[0])).shape;
  Shape out_shape{static_cast<int>(idx.size())};
  out_shape.insert(out_shape.end(), s.begin(), s.end());
  Tensor out = Tensor::zeros(out_shape);
  std::int64_t row = numel(s);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const Tensor& img = images.at(static_cast<std::size_t>(idx[i]));
    if (img.shape != s) throw ShapeError("stack_batch: mixed image shapes");
    for (std::int64_t k = 0; k < row; ++k) out[static_cast<std::int64_t>(i) * row + k] = img[k];
  }
  return out;
}

namespace {

std::vector<Tensor> numeric_batch_gradient(const nn::ModelSpec& spec, const nn::ModelState& state,
                                           const Tensor& batch, const std::vector<int>& labels) {
  ad::Graph g;
  std::vector<Tensor> grads = nn::batch_gradient(g, spec, state.params, batch, labels);
  std::vector<Tensor> out;
  out.reserve(grads.size());
  for (const Tensor& t : grads) out.push_back(t.detached_copy());
  return out;
}

std::vector<int> pick_labels(const std::vector<int>& labels, const std::vector<int>& idx) {
  std::vector<int> out;
  out.reserve(idx.size());
  for (int i : idx) out.push_back(labels.at(static_cast<std::size_t>(i)));
  return out;
}

}  // namespace

std::pair<nn::ModelState, UpdateRecord> run_round(const nn::ModelSpec& spec,
                                                  const nn::ModelState& state,
                                                  const std::vector<Tensor>& images,
                                                  const std::vector<int>& labels,
                                                  const std::vector<std::vector<int>>& batches,
                                                  double mu, UpdateKind kind) {
  if (batches.empty()) throw ValueError("run_round: no batches");
  UpdateRecord rec;
  rec.kind = kind;
  rec.base = state;  // states are immutable; sharing the snapshot is safe
  rec.mu = mu;
  rec.batch_size = static_cast<int>(batches[0].size());
  rec.local_steps = static_cast<int>(batches.size());

  if (kind == UpdateKind::kGradient) {
    if (batches.size() != 1) {
      throw ValueError("run_round: gradient updates carry exactly one local step");
    }
    Tensor batch = stack_batch(images, batches[0]);
    std::vector<Tensor> grads =
        numeric_batch_gradient(spec, state, batch, pick_labels(labels, batches[0]));
    rec.payload = grads;
    nn::ModelState next = nn::apply_sgd_step(state, grads, mu);
    return {std::move(next), std::move(rec)};
  }

  // Model delta: T chained SGD steps. The per-step deltas are accumulated
  // elementwise into the payload, and the released state is base + payload,
  // which makes the conservation invariant hold bit-exactly.
  std::vector<Tensor> delta;
  delta.reserve(state.params.size());
  for (const Tensor& p : state.params) delta.push_back(Tensor::zeros(p.shape));

  nn::ModelState cur = state;
  bool first_step = true;
  for (const std::vector<int>& step : batches) {
    if (static_cast<int>(step.size()) != rec.batch_size) {
      throw ValueError("run_round: ragged batch sizes within a round");
    }
    Tensor batch = stack_batch(images, step);
    std::vector<Tensor> grads = numeric_batch_gradient(spec, cur, batch, pick_labels(labels, step));
    for (std::size_t i = 0; i < grads.size(); ++i) {
      for (std::int64_t k = 0; k < grads[i].size(); ++k) {
        double d = (-mu) * grads[i][k];
        // Assign on the first step so a one-step delta is the scaled
        // gradient bit-for-bit (accumulating into 0.0 would flip -0.0).
        if (first_step) {
          delta[i][k] = d;
        } else {
          delta[i][k] += d;
        }
      }
    }
    cur = nn::apply_sgd_step(cur, grads, mu);
    first_step = false;
  }
  rec.payload = delta;

  nn::ModelState released;
  released.tags = state.tags;
  released.init_seed = state.init_seed;
  released.params.reserve(state.params.size());
  for (std::size_t i = 0; i < state.params.size(); ++i) {
    Tensor p = state.params[i].detached_copy();
    for (std::int64_t k = 0; k < p.size(); ++k) p[k] += delta[i][k];
    released.params.push_back(std::move(p));
  }
  return {std::move(released), std::move(rec)};
}

TrainingLog run_training(const nn::ModelSpec& spec, const nn::ModelState& initial,
                         const std::vector<Tensor>& images, const std::vector<int>& labels,
                         const TrainingSchedule& schedule, UpdateKind kind) {
  if (schedule.epochs < 1) throw ValueError("run_training: epochs must be >= 1");
  if (static_cast<int>(images.size()) != schedule.n_samples ||
      images.size() != labels.size()) {
    throw ValueError("run_training: dataset size does not match schedule");
  }
  TrainingLog log;
  nn::ModelState model = initial;
  int round_counter = 0;
  int per_round = schedule.batch_size * schedule.local_steps;
  log.truncated_last_round = schedule.n_samples % per_round != 0;
  for (int epoch = 0; epoch < schedule.epochs; ++epoch) {
    if (schedule.freeze_model && epoch > 0) model = initial;
    std::optional<std::uint64_t> seed;
    if (schedule.shuffle_seed.has_value()) seed = Rng::mix(*schedule.shuffle_seed, static_cast<std::uint64_t>(epoch));
    auto rounds = schedule_batches(schedule.n_samples, schedule.batch_size, schedule.local_steps, seed);
    for (const auto& round : rounds) {
      auto [next, rec] = run_round(spec, model, images, labels, round, schedule.mu, kind);
      rec.round_index = round_counter;
      rec.epoch_index = epoch;
      RoundTruth truth;
      truth.round_index = round_counter;
      truth.epoch_index = epoch;
      truth.step_indices = round;
      log.records.push_back(std::move(rec));
      log.truths.push_back(std::move(truth));
      model = std::move(next);
      ++round_counter;
    }
  }
  log.final_model = std::move(model);
  return log;
}

// ---------------------------------------------------------------------------
// serialization
// ---------------------------------------------------------------------------

namespace {

json tensor_to_json(const Tensor& t) {
  return json{{"shape", t.shape}, {"data", *t.data}};
}

Tensor tensor_from_json(const json& j) {
  Shape shape = j.at("shape").get<Shape>();
  std::vector<double> data = j.at("data").get<std::vector<double>>();
  return Tensor(std::move(shape), std::move(data));
}

const char* kind_name(nn::ParamKind k) {
  switch (k) {
    case nn::ParamKind::kConvWeight: return "conv_w";
    case nn::ParamKind::kConvBias: return "conv_b";
    case nn::ParamKind::kFcWeight: return "fc_w";
    case nn::ParamKind::kFcBias: return "fc_b";
  }
  return "?";
}

nn::ParamKind kind_from_name(const std::string& s) {
  if (s == "conv_w") return nn::ParamKind::kConvWeight;
  if (s == "conv_b") return nn::ParamKind::kConvBias;
  if (s == "fc_w") return nn::ParamKind::kFcWeight;
  if (s == "fc_b") return nn::ParamKind::kFcBias;
  throw IoError("observation log: unknown param kind '" + s + "'");
}

json state_to_json(const nn::ModelState& s) {
  json params = json::array();
  json tags = json::array();
  for (std::size_t i = 0; i < s.params.size(); ++i) {
    params.push_back(tensor_to_json(s.params[i]));
    tags.push_back(json{{"layer", s.tags[i].layer}, {"kind", kind_name(s.tags[i].kind)}});
  }
  return json{{"seed", s.init_seed}, {"params", params}, {"tags", tags}};
}

nn::ModelState state_from_json(const json& j) {
  nn::ModelState s;
  s.init_seed = j.at("seed").get<std::uint64_t>();
  for (const json& p : j.at("params")) s.params.push_back(tensor_from_json(p));
  for (const json& t : j.at("tags")) {
    s.tags.push_back({t.at("layer").get<int>(), kind_from_name(t.at("kind").get<std::string>())});
  }
  if (s.params.size() != s.tags.size()) throw IoError("observation log: params/tags mismatch");
  return s;
}

}  // namespace

std::string serialize_log(const TrainingLog& log) {
  json j;
  j["version"] = 1;
  j["truncated_last_round"] = log.truncated_last_round;
  json records = json::array();
  for (const UpdateRecord& r : log.records) {
    json payload = json::array();
    for (const Tensor& t : r.payload) payload.push_back(tensor_to_json(t));
    records.push_back(json{{"kind", r.kind == UpdateKind::kGradient ? "gradient" : "model-delta"},
                           {"round", r.round_index},
                           {"epoch", r.epoch_index},
                           {"T", r.local_steps},
                           {"B", r.batch_size},
                           {"mu", r.mu},
                           {"base", state_to_json(r.base)},
                           {"payload", payload}});
  }
  j["records"] = std::move(records);
  json truths = json::array();
  for (const RoundTruth& t : log.truths) {
    truths.push_back(json{{"round", t.round_index}, {"epoch", t.epoch_index},
                          {"steps", t.step_indices}});
  }
  j["truths"] = std::move(truths);
  j["final_model"] = state_to_json(log.final_model);
  return j.dump();
}

TrainingLog deserialize_log(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw IoError(std::string("observation log: invalid JSON: ") + e.what());
  }
  TrainingLog log;
  log.truncated_last_round = j.at("truncated_last_round").get<bool>();
  for (const json& r : j.at("records")) {
    UpdateRecord rec;
    std::string kind = r.at("kind").get<std::string>();
    if (kind == "gradient") {
      rec.kind = UpdateKind::kGradient;
    } else if (kind == "model-delta") {
      rec.kind = UpdateKind::kModelDelta;
    } else {
      throw IoError("observation log: unknown record kind '" + kind + "'");
    }
    rec.round_index = r.at("round").get<int>();
    rec.epoch_index = r.at("epoch").get<int>();
    rec.local_steps = r.at("T").get<int>();
    rec.batch_size = r.at("B").get<int>();
    rec.mu = r.at("mu").get<double>();
    rec.base = state_from_json(r.at("base"));
    for (const json& p : r.at("payload")) rec.payload.push_back(tensor_from_json(p));
    log.records.push_back(std::move(rec));
  }
  for (const json& t : j.at("truths")) {
    RoundTruth truth;
    truth.round_index = t.at("round").get<int>();
    truth.epoch_index = t.at("epoch").get<int>();
    truth.step_indices = t.at("steps").get<std::vector<std::vector<int>>>();
    log.truths.push_back(std::move(truth));
  }
  log.final_model = state_from_json(j.at("final_model"));
  return log;
}

}  // namespace gradinv::fl
