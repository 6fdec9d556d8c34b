#include "gradinv/nn.hpp"

#include <cmath>

#include "gradinv/rng.hpp"

namespace gradinv::nn {

void ModelSpec::finalize() {
  if (in_channels < 1 || in_height < 1 || in_width < 1) {
    throw ShapeError("model spec: invalid input shape");
  }
  if (num_classes < 2) throw ValueError("model spec: need at least 2 classes");
  if (layers.empty()) throw ValueError("model spec: no layers");

  n_conv = 0;
  conv_ordinal.assign(layers.size(), -1);
  out_shapes.clear();

  Shape cur{in_channels, in_height, in_width};  // spatial, or {features} after flatten
  bool in_head = false;
  for (std::size_t li = 0; li < layers.size(); ++li) {
    const LayerDesc& layer = layers[li];
    if (const auto* cd = std::get_if<ConvDesc>(&layer)) {
      if (in_head) throw ValueError("model spec: conv layer after the classifier head");
      if (cur.size() != 3) throw ShapeError("model spec: conv layer needs spatial input");
      if (cd->out_channels < 1 || cd->kernel < 1 || cd->stride < 1 || cd->padding < 0) {
        throw ValueError("model spec: bad conv descriptor at layer " + std::to_string(li));
      }
      int oh = (cur[1] + 2 * cd->padding - cd->kernel) / cd->stride + 1;
      int ow = (cur[2] + 2 * cd->padding - cd->kernel) / cd->stride + 1;
      if (cur[1] + 2 * cd->padding < cd->kernel || oh < 1 || ow < 1) {
        throw ShapeError("model spec: conv layer " + std::to_string(li) + " does not fit input " +
                         shape_str(cur));
      }
      cur = {cd->out_channels, oh, ow};
      if (cd->skip_from >= 0) {
        if (cd->skip_from >= static_cast<int>(li)) {
          throw ValueError("model spec: skip source must precede layer " + std::to_string(li));
        }
        if (out_shapes[static_cast<std::size_t>(cd->skip_from)] != cur) {
          throw ShapeError("model spec: skip from layer " + std::to_string(cd->skip_from) +
                           " shape " + shape_str(out_shapes[static_cast<std::size_t>(cd->skip_from)]) +
                           " does not match layer " + std::to_string(li) + " output " +
                           shape_str(cur));
        }
      }
      conv_ordinal[li] = n_conv++;
    } else if (const auto* pd = std::get_if<PoolDesc>(&layer)) {
      if (in_head) throw ValueError("model spec: pool layer after the classifier head");
      if (cur.size() != 3) throw ShapeError("model spec: pool layer needs spatial input");
      if (pd->kernel > cur[1] || pd->kernel > cur[2]) {
        throw ShapeError("model spec: pool window larger than input " + shape_str(cur));
      }
      cur = {cur[0], (cur[1] - pd->kernel) / pd->stride + 1, (cur[2] - pd->kernel) / pd->stride + 1};
    } else {
      const auto& fd = std::get<FcDesc>(layer);
      if (fd.out_features < 1) throw ValueError("model spec: bad fc descriptor");
      int features = 1;
      for (int d : cur) features *= d;
      cur = {fd.out_features};
      (void)features;
      in_head = true;
    }
    out_shapes.push_back(cur);
  }
  if (n_conv < 1) throw ValueError("model spec: at least one conv layer required");
  if (!in_head) throw ValueError("model spec: missing terminal fully connected classifier");
  if (cur != Shape{num_classes}) {
    throw ShapeError("model spec: final layer produces " + shape_str(cur) + ", expected [" +
                     std::to_string(num_classes) + "]");
  }
  finalized = true;
}

ModelSpec ModelSpec::tiny_cnn(int hw, int classes) {
  ModelSpec spec;
  spec.in_channels = 3;
  spec.in_height = hw;
  spec.in_width = hw;
  spec.num_classes = classes;
  spec.layers = {
      ConvDesc{8, 3, 1, 1, true, -1},
      ConvDesc{16, 3, 2, 1, true, -1},
      ConvDesc{16, 3, 1, 1, true, -1},
      FcDesc{classes},
  };
  spec.finalize();
  return spec;
}

ModelSpec ModelSpec::mini_resnet(int classes) {
  ModelSpec spec;
  spec.in_channels = 3;
  spec.in_height = 32;
  spec.in_width = 32;
  spec.num_classes = classes;
  spec.layers = {
      ConvDesc{8, 3, 1, 1, true, -1},
      ConvDesc{8, 3, 1, 1, true, -1},
      ConvDesc{8, 3, 1, 1, true, 0},
      ConvDesc{16, 3, 2, 1, true, -1},
      ConvDesc{16, 3, 1, 1, true, -1},
      ConvDesc{16, 3, 1, 1, true, 3},
      PoolDesc{2, 2},
      FcDesc{classes},
  };
  spec.finalize();
  return spec;
}

namespace {

void require_finalized(const ModelSpec& spec) {
  if (!spec.finalized) throw ValueError("model spec must be finalized before use");
}

Tensor uniform_tensor(Rng& rng, Shape shape, double bound) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (std::int64_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(-bound, bound);
  return t;
}

}  // namespace

std::vector<ParamTag> param_tags(const ModelSpec& spec) {
  require_finalized(spec);
  std::vector<ParamTag> tags;
  for (std::size_t li = 0; li < spec.layers.size(); ++li) {
    if (std::holds_alternative<ConvDesc>(spec.layers[li])) {
      tags.push_back({static_cast<int>(li), ParamKind::kConvWeight});
      tags.push_back({static_cast<int>(li), ParamKind::kConvBias});
    } else if (std::holds_alternative<FcDesc>(spec.layers[li])) {
      tags.push_back({static_cast<int>(li), ParamKind::kFcWeight});
      tags.push_back({static_cast<int>(li), ParamKind::kFcBias});
    }
  }
  return tags;
}

ModelState init_model(const ModelSpec& spec, std::uint64_t seed) {
  require_finalized(spec);
  ModelState state;
  state.init_seed = seed;
  Rng rng(seed);
  Shape cur{spec.in_channels, spec.in_height, spec.in_width};
  for (std::size_t li = 0; li < spec.layers.size(); ++li) {
    if (const auto* cd = std::get_if<ConvDesc>(&spec.layers[li])) {
      int fan_in = cur[0] * cd->kernel * cd->kernel;
      double bound = std::sqrt(6.0 / fan_in);
      state.params.push_back(
          uniform_tensor(rng, {cd->out_channels, cur[0], cd->kernel, cd->kernel}, bound));
      state.tags.push_back({static_cast<int>(li), ParamKind::kConvWeight});
      state.params.push_back(Tensor::zeros({cd->out_channels}));
      state.tags.push_back({static_cast<int>(li), ParamKind::kConvBias});
    } else if (std::get_if<PoolDesc>(&spec.layers[li])) {
      // no parameters
    } else {
      const auto& fd = std::get<FcDesc>(spec.layers[li]);
      int features = 1;
      for (int d : cur) features *= d;
      double bound = std::sqrt(6.0 / features);
      state.params.push_back(uniform_tensor(rng, {fd.out_features, features}, bound));
      state.tags.push_back({static_cast<int>(li), ParamKind::kFcWeight});
      state.params.push_back(Tensor::zeros({fd.out_features}));
      state.tags.push_back({static_cast<int>(li), ParamKind::kFcBias});
    }
    cur = spec.out_shapes[li];
  }
  return state;
}

std::vector<Tensor> bind_params(ad::Graph& g, const std::vector<Tensor>& params) {
  std::vector<Tensor> bound;
  bound.reserve(params.size());
  for (const Tensor& p : params) bound.push_back(g.bind(p));
  return bound;
}

Tensor model_forward(ad::Graph& g, const ModelSpec& spec, const std::vector<Tensor>& params,
                     const Tensor& x_in) {
  require_finalized(spec);
  if (x_in.shape.size() != 4 || x_in.shape[1] != spec.in_channels ||
      x_in.shape[2] != spec.in_height || x_in.shape[3] != spec.in_width) {
    throw ShapeError("model_forward: input " + shape_str(x_in.shape) + " does not match spec [" +
                     std::to_string(spec.in_channels) + "x" + std::to_string(spec.in_height) +
                     "x" + std::to_string(spec.in_width) + "]");
  }
  Tensor x = g.bind(x_in);
  const int batch = x.shape[0];

  std::size_t pi = 0;
  auto next_param = [&](ParamKind kind, int layer) -> Tensor {
    if (pi >= params.size()) throw ShapeError("model_forward: parameter list too short");
    (void)kind;
    (void)layer;
    return g.bind(params[pi++]);
  };

  std::vector<Tensor> layer_out(spec.layers.size());
  Tensor cur = x;
  bool flat = false;
  int fc_remaining = 0;
  for (const LayerDesc& layer : spec.layers) {
    if (std::holds_alternative<FcDesc>(layer)) ++fc_remaining;
  }

  for (std::size_t li = 0; li < spec.layers.size(); ++li) {
    if (const auto* cd = std::get_if<ConvDesc>(&spec.layers[li])) {
      Tensor w = next_param(ParamKind::kConvWeight, static_cast<int>(li));
      Tensor b = next_param(ParamKind::kConvBias, static_cast<int>(li));
      Tensor y = ad::conv2d(g, cur, w, cd->stride, cd->padding);
      y = ad::add(g, y, ad::broadcast_nhw(g, b, y.shape[0], y.shape[2], y.shape[3]));
      if (cd->skip_from >= 0) {
        y = ad::add(g, y, layer_out[static_cast<std::size_t>(cd->skip_from)]);
      }
      if (cd->relu) y = ad::relu(g, y);
      cur = y;
    } else if (const auto* pd = std::get_if<PoolDesc>(&spec.layers[li])) {
      cur = ad::avgpool2d(g, cur, pd->kernel, pd->stride);
    } else {
      if (!flat) {
        std::int64_t features = cur.size() / batch;
        cur = ad::reshape(g, cur, {batch, static_cast<int>(features)});
        flat = true;
      }
      Tensor w = next_param(ParamKind::kFcWeight, static_cast<int>(li));
      Tensor b = next_param(ParamKind::kFcBias, static_cast<int>(li));
      cur = ad::fully_connected(g, cur, w, b);
      --fc_remaining;
      if (fc_remaining > 0) cur = ad::relu(g, cur);
    }
    layer_out[li] = cur;
  }
  if (pi != params.size()) throw ShapeError("model_forward: parameter list too long");
  return cur;
}

std::vector<Tensor> batch_gradient(ad::Graph& g, const ModelSpec& spec,
                                   const std::vector<Tensor>& params, const Tensor& x,
                                   const std::vector<int>& labels) {
  std::vector<Tensor> bound = bind_params(g, params);
  Tensor logits = model_forward(g, spec, bound, x);
  Tensor loss = ad::softmax_cross_entropy(g, logits, labels);
  return ad::backward(g, loss, bound);
}

std::vector<double> zero_fraction_per_layer(const ModelSpec& spec,
                                            const std::vector<Tensor>& grads) {
  require_finalized(spec);
  std::vector<ParamTag> tags = param_tags(spec);
  if (grads.size() != tags.size()) {
    throw ShapeError("zero_fraction_per_layer: got " + std::to_string(grads.size()) +
                     " gradients, spec has " + std::to_string(tags.size()) + " parameters");
  }
  std::vector<std::int64_t> zeros(static_cast<std::size_t>(spec.n_conv), 0);
  std::vector<std::int64_t> total(static_cast<std::size_t>(spec.n_conv), 0);
  for (std::size_t i = 0; i < grads.size(); ++i) {
    const ParamTag& tag = tags[i];
    int ord = spec.conv_ordinal[static_cast<std::size_t>(tag.layer)];
    if (ord < 0) continue;
    const Tensor& t = grads[i];
    total[static_cast<std::size_t>(ord)] += t.size();
    for (std::int64_t k = 0; k < t.size(); ++k) {
      if (t[k] == 0.0) ++zeros[static_cast<std::size_t>(ord)];
    }
  }
  std::vector<double> p(static_cast<std::size_t>(spec.n_conv), 0.0);
  for (int i = 0; i < spec.n_conv; ++i) {
    p[static_cast<std::size_t>(i)] =
        static_cast<double>(zeros[static_cast<std::size_t>(i)]) /
        static_cast<double>(total[static_cast<std::size_t>(i)]);
  }
  return p;
}

ModelState apply_sgd_step(const ModelState& state, const std::vector<Tensor>& grads, double mu) {
  if (grads.size() != state.params.size()) {
    throw ShapeError("apply_sgd_step: gradient count mismatch");
  }
  ModelState out;
  out.tags = state.tags;
  out.init_seed = state.init_seed;
  out.params.reserve(state.params.size());
  for (std::size_t i = 0; i < state.params.size(); ++i) {
    require_same_shape(state.params[i], grads[i], "apply_sgd_step");
    Tensor p = state.params[i].detached_copy();
    for (std::int64_t k = 0; k < p.size(); ++k) p[k] += (-mu) * grads[i][k];
    out.params.push_back(std::move(p));
  }
  return out;
}

std::vector<double> flatten_params(const std::vector<Tensor>& params) {
  std::vector<double> flat;
  std::int64_t n = 0;
  for (const Tensor& p : params) n += p.size();
  flat.reserve(static_cast<std::size_t>(n));
  for (const Tensor& p : params) {
    flat.insert(flat.end(), p.data->begin(), p.data->end());
  }
  return flat;
}

std::vector<Tensor> unflatten_params(const std::vector<Tensor>& like,
                                     const std::vector<double>& flat) {
  std::int64_t n = 0;
  for (const Tensor& p : like) n += p.size();
  if (n != static_cast<std::int64_t>(flat.size())) {
    throw ShapeError("unflatten_params: flat vector of length " + std::to_string(flat.size()) +
                     " does not match parameter count " + std::to_string(n));
  }
  std::vector<Tensor> out;
  out.reserve(like.size());
  std::size_t off = 0;
  for (const Tensor& p : like) {
    Tensor t = Tensor::zeros(p.shape);
    for (std::int64_t k = 0; k < t.size(); ++k) t[k] = flat[off++];
    out.push_back(std::move(t));
  }
  return out;
}

int objective_pool_index(const ModelSpec& spec, const ParamTag& tag) {
  require_finalized(spec);
  int ord = spec.conv_ordinal[static_cast<std::size_t>(tag.layer)];
  return ord >= 0 ? ord : spec.n_conv;
}

}  // namespace gradinv::nn
