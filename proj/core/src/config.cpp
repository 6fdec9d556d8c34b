#include "gradinv/config.hpp"

#include <nlohmann/json.hpp>

namespace gradinv::cli {

using ordered_json = nlohmann::ordered_json;

namespace {

[[noreturn]] void bad_key(const std::string& path, const std::string& what) {
  throw ConfigError(path + ": " + what);
}

/// Wraps a JSON object, tracking which keys were consumed so leftovers can
/// be rejected with a full key path.
class Section {
 public:
  Section(const ordered_json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) bad_key(path_, "expected an object");
  }

  bool has(const std::string& key) {
    consumed_.push_back(key);
    return j_.contains(key);
  }

  template <typename T>
  T get(const std::string& key, T fallback) {
    consumed_.push_back(key);
    if (!j_.contains(key)) return fallback;
    try {
      return j_.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
      bad_key(path_ + "." + key, "invalid value");
    }
  }

  template <typename T>
  T require(const std::string& key) {
    consumed_.push_back(key);
    if (!j_.contains(key)) bad_key(path_ + "." + key, "missing required key");
    try {
      return j_.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
      bad_key(path_ + "." + key, "invalid value");
    }
  }

  const ordered_json* sub(const std::string& key) {
    consumed_.push_back(key);
    if (!j_.contains(key)) return nullptr;
    return &j_.at(key);
  }

  void finish() {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      bool known = false;
      for (const std::string& k : consumed_) {
        if (k == it.key()) {
          known = true;
          break;
        }
      }
      if (!known) bad_key(path_.empty() ? it.key() : path_ + "." + it.key(), "unknown key");
    }
  }

  const std::string& path() const { return path_; }

 private:
  const ordered_json& j_;
  std::string path_;
  std::vector<std::string> consumed_;
};

DatasetConfig parse_dataset(const ordered_json& j) {
  Section s(j, "dataset");
  DatasetConfig cfg;
  cfg.type = s.get<std::string>("type", cfg.type);
  if (cfg.type != "synthetic" && cfg.type != "cifar10") {
    bad_key("dataset.type", "must be 'synthetic' or 'cifar10'");
  }
  cfg.n = s.get<int>("n", cfg.n);
  cfg.size = s.get<int>("size", cfg.size);
  cfg.seed = s.get<std::uint64_t>("seed", cfg.seed);
  cfg.path = s.get<std::string>("path", cfg.path);
  cfg.indices = s.get<std::vector<int>>("indices", cfg.indices);
  s.finish();
  if (cfg.type == "synthetic") {
    if (cfg.n < 1) bad_key("dataset.n", "must be >= 1");
    if (cfg.size < 4) bad_key("dataset.size", "must be >= 4");
  } else {
    if (cfg.path.empty()) bad_key("dataset.path", "missing dataset file path");
    if (cfg.indices.empty()) bad_key("dataset.indices", "missing record indices");
  }
  return cfg;
}

nn::LayerDesc parse_layer(const ordered_json& j, const std::string& path) {
  Section s(j, path);
  int kinds = 0;
  nn::LayerDesc out = nn::FcDesc{};
  if (const ordered_json* c = s.sub("conv")) {
    Section cs(*c, path + ".conv");
    nn::ConvDesc d;
    d.out_channels = cs.require<int>("channels");
    d.kernel = cs.get<int>("kernel", d.kernel);
    d.stride = cs.get<int>("stride", d.stride);
    d.padding = cs.get<int>("padding", d.padding);
    d.relu = cs.get<bool>("relu", d.relu);
    d.skip_from = cs.get<int>("skip_from", d.skip_from);
    cs.finish();
    out = d;
    ++kinds;
  }
  if (const ordered_json* p = s.sub("avgpool")) {
    Section ps(*p, path + ".avgpool");
    nn::PoolDesc d;
    d.kernel = ps.get<int>("kernel", d.kernel);
    d.stride = ps.get<int>("stride", d.stride);
    ps.finish();
    out = d;
    ++kinds;
  }
  if (const ordered_json* f = s.sub("fc")) {
    Section fs(*f, path + ".fc");
    nn::FcDesc d;
    d.out_features = fs.require<int>("features");
    fs.finish();
    out = d;
    ++kinds;
  }
  s.finish();
  if (kinds != 1) bad_key(path, "layer must hold exactly one of conv/avgpool/fc");
  return out;
}

ModelConfig parse_model(const ordered_json& j) {
  Section s(j, "model");
  ModelConfig cfg;
  cfg.name = s.get<std::string>("name", cfg.name);
  cfg.classes = s.get<int>("classes", cfg.classes);
  cfg.seed = s.get<std::uint64_t>("seed", cfg.seed);
  if (const ordered_json* layers = s.sub("layers")) {
    if (!layers->is_array()) bad_key("model.layers", "expected an array");
    int i = 0;
    for (const ordered_json& l : *layers) {
      cfg.layers.push_back(parse_layer(l, "model.layers[" + std::to_string(i) + "]"));
      ++i;
    }
  }
  s.finish();
  if (cfg.name != "tiny-cnn" && cfg.name != "mini-resnet" && cfg.name != "custom") {
    bad_key("model.name", "must be 'tiny-cnn', 'mini-resnet' or 'custom'");
  }
  if (cfg.name == "custom" && cfg.layers.empty()) bad_key("model.layers", "custom model needs layers");
  if (cfg.name != "custom" && !cfg.layers.empty()) {
    bad_key("model.layers", "layers are only valid for custom models");
  }
  if (cfg.classes < 2) bad_key("model.classes", "must be >= 2");
  return cfg;
}

ScheduleConfig parse_schedule(const ordered_json& j) {
  Section s(j, "schedule");
  ScheduleConfig cfg;
  cfg.epochs = s.get<int>("epochs", cfg.epochs);
  cfg.batch_size = s.get<int>("batch_size", cfg.batch_size);
  cfg.local_steps = s.get<int>("local_steps", cfg.local_steps);
  cfg.mu = s.get<double>("mu", cfg.mu);
  cfg.shuffle = s.get<bool>("shuffle", cfg.shuffle);
  cfg.seed = s.get<std::uint64_t>("seed", cfg.seed);
  cfg.emit = s.get<std::string>("emit", cfg.emit);
  cfg.freeze_model = s.get<bool>("freeze_model", cfg.freeze_model);
  s.finish();
  if (cfg.epochs < 1) bad_key("schedule.epochs", "must be >= 1");
  if (cfg.batch_size < 1) bad_key("schedule.batch_size", "must be >= 1");
  if (cfg.local_steps < 1) bad_key("schedule.local_steps", "must be >= 1");
  if (cfg.mu <= 0.0) bad_key("schedule.mu", "must be > 0");
  if (cfg.emit != "gradient" && cfg.emit != "model-delta") {
    bad_key("schedule.emit", "must be 'gradient' or 'model-delta'");
  }
  if (cfg.emit == "gradient" && cfg.local_steps != 1) {
    bad_key("schedule.local_steps", "gradient updates imply one local step");
  }
  return cfg;
}

std::pair<attack::AttackConfig, bool> parse_attack(const ordered_json& j, double schedule_mu) {
  Section s(j, "attack");
  attack::AttackConfig cfg;
  std::string objective = s.get<std::string>("objective", "agic");
  if (objective == "agic") {
    cfg.objective = attack::Objective::kAgic;
  } else if (objective == "cosine-invg") {
    cfg.objective = attack::Objective::kCosineInvg;
  } else if (objective == "l2-dlg") {
    cfg.objective = attack::Objective::kL2Dlg;
  } else {
    bad_key("attack.objective", "must be 'l2-dlg', 'cosine-invg' or 'agic'");
  }
  std::string mode = s.get<std::string>("fedavg_mode", "none");
  if (mode == "none") {
    cfg.fedavg_mode = attack::FedAvgMode::kNone;
  } else if (mode == "one-batch") {
    cfg.fedavg_mode = attack::FedAvgMode::kOneBatch;
  } else if (mode == "simulation") {
    cfg.fedavg_mode = attack::FedAvgMode::kSimulation;
  } else {
    bad_key("attack.fedavg_mode", "must be 'none', 'one-batch' or 'simulation'");
  }
  cfg.iterations = s.get<int>("iterations", cfg.iterations);
  cfg.lr = s.get<double>("lr", cfg.lr);
  cfg.zeta_tv = s.get<double>("zeta_tv", cfg.zeta_tv);
  cfg.beta = s.get<double>("beta", cfg.beta);
  cfg.relu_modifier = s.get<bool>("relu_modifier", cfg.relu_modifier);
  bool mu_given = s.has("mu");
  cfg.mu = s.get<double>("mu", schedule_mu);
  cfg.init_seed = s.get<std::uint64_t>("seed", cfg.init_seed);
  s.finish();
  try {
    cfg.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(std::string(e.what()));
  }
  return {cfg, mu_given};
}

MultiepochConfig parse_multiepoch(const ordered_json& j) {
  Section s(j, "multiepoch");
  MultiepochConfig cfg;
  cfg.enabled = s.get<bool>("enabled", cfg.enabled);
  cfg.pre_iterations = s.get<int>("pre_iterations", cfg.pre_iterations);
  cfg.label_filter = s.get<bool>("label_filter", cfg.label_filter);
  cfg.pooling = s.get<bool>("pooling", cfg.pooling);
  cfg.gammas = s.get<std::vector<double>>("gammas", cfg.gammas);
  s.finish();
  if (cfg.pre_iterations < 1) bad_key("multiepoch.pre_iterations", "must be >= 1");
  if (cfg.gammas.empty()) bad_key("multiepoch.gammas", "must not be empty");
  for (double g : cfg.gammas) {
    if (g < 0.0) bad_key("multiepoch.gammas", "weights must be >= 0");
  }
  return cfg;
}

}  // namespace

ExperimentConfig parse_config(const std::string& text) {
  ordered_json j;
  try {
    j = ordered_json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string("config: invalid JSON: ") + e.what());
  }
  Section root(j, "");
  ExperimentConfig cfg;
  bool have_dataset = false;
  if (const ordered_json* d = root.sub("dataset")) {
    cfg.dataset = parse_dataset(*d);
    have_dataset = true;
  }
  if (const ordered_json* m = root.sub("model")) cfg.model = parse_model(*m);
  if (const ordered_json* s = root.sub("schedule")) cfg.schedule = parse_schedule(*s);
  if (const ordered_json* a = root.sub("attack")) {
    auto [ac, given] = parse_attack(*a, cfg.schedule.mu);
    cfg.attack = ac;
    cfg.attack_mu_given = given;
  } else {
    cfg.attack.mu = cfg.schedule.mu;
  }
  if (const ordered_json* me = root.sub("multiepoch")) cfg.multiepoch = parse_multiepoch(*me);
  if (root.has("attack_records")) {
    try {
      cfg.attack_records = j.at("attack_records").get<std::vector<int>>();
    } catch (const nlohmann::json::exception&) {
      throw ConfigError("attack_records: invalid value");
    }
  }
  cfg.output_dir = root.has("output_dir") ? j.at("output_dir").get<std::string>() : cfg.output_dir;
  root.finish();
  if (!have_dataset) throw ConfigError("dataset: missing section");
  if (!cfg.attack_mu_given) cfg.attack.mu = cfg.schedule.mu;
  return cfg;
}

namespace {

ordered_json layer_to_json(const nn::LayerDesc& layer) {
  ordered_json j;
  if (const auto* c = std::get_if<nn::ConvDesc>(&layer)) {
    j["conv"] = ordered_json{{"channels", c->out_channels}, {"kernel", c->kernel},
                             {"stride", c->stride},         {"padding", c->padding},
                             {"relu", c->relu},             {"skip_from", c->skip_from}};
  } else if (const auto* p = std::get_if<nn::PoolDesc>(&layer)) {
    j["avgpool"] = ordered_json{{"kernel", p->kernel}, {"stride", p->stride}};
  } else {
    const auto& f = std::get<nn::FcDesc>(layer);
    j["fc"] = ordered_json{{"features", f.out_features}};
  }
  return j;
}

}  // namespace

std::string serialize_config(const ExperimentConfig& config) {
  ordered_json j;
  ordered_json d{{"type", config.dataset.type}};
  if (config.dataset.type == "synthetic") {
    d["n"] = config.dataset.n;
    d["size"] = config.dataset.size;
    d["seed"] = config.dataset.seed;
  } else {
    d["path"] = config.dataset.path;
    d["indices"] = config.dataset.indices;
  }
  j["dataset"] = d;

  ordered_json m{{"name", config.model.name},
                 {"classes", config.model.classes},
                 {"seed", config.model.seed}};
  if (config.model.name == "custom") {
    ordered_json layers = ordered_json::array();
    for (const nn::LayerDesc& l : config.model.layers) layers.push_back(layer_to_json(l));
    m["layers"] = layers;
  }
  j["model"] = m;

  j["schedule"] = ordered_json{{"epochs", config.schedule.epochs},
                               {"batch_size", config.schedule.batch_size},
                               {"local_steps", config.schedule.local_steps},
                               {"mu", config.schedule.mu},
                               {"shuffle", config.schedule.shuffle},
                               {"seed", config.schedule.seed},
                               {"emit", config.schedule.emit},
                               {"freeze_model", config.schedule.freeze_model}};

  const attack::AttackConfig& a = config.attack;
  const char* objective = a.objective == attack::Objective::kAgic
                              ? "agic"
                              : a.objective == attack::Objective::kCosineInvg ? "cosine-invg"
                                                                              : "l2-dlg";
  const char* mode = a.fedavg_mode == attack::FedAvgMode::kNone
                         ? "none"
                         : a.fedavg_mode == attack::FedAvgMode::kOneBatch ? "one-batch"
                                                                          : "simulation";
  j["attack"] = ordered_json{{"objective", objective},
                             {"fedavg_mode", mode},
                             {"iterations", a.iterations},
                             {"lr", a.lr},
                             {"zeta_tv", a.zeta_tv},
                             {"beta", a.beta},
                             {"relu_modifier", a.relu_modifier},
                             {"mu", a.mu},
                             {"seed", a.init_seed}};

  j["multiepoch"] = ordered_json{{"enabled", config.multiepoch.enabled},
                                 {"pre_iterations", config.multiepoch.pre_iterations},
                                 {"label_filter", config.multiepoch.label_filter},
                                 {"pooling", config.multiepoch.pooling},
                                 {"gammas", config.multiepoch.gammas}};
  j["attack_records"] = config.attack_records;
  j["output_dir"] = config.output_dir;
  return j.dump(2);
}

nn::ModelSpec build_model_spec(const ModelConfig& model, const DatasetConfig& dataset) {
  if (model.name == "tiny-cnn") {
    int hw = dataset.type == "cifar10" ? 32 : dataset.size;
    return nn::ModelSpec::tiny_cnn(hw, model.classes);
  }
  if (model.name == "mini-resnet") {
    int hw = dataset.type == "cifar10" ? 32 : dataset.size;
    if (hw != 32) throw ConfigError("model.name: mini-resnet expects 32x32 inputs");
    return nn::ModelSpec::mini_resnet(model.classes);
  }
  nn::ModelSpec spec;
  spec.in_channels = 3;
  spec.in_height = dataset.type == "cifar10" ? 32 : dataset.size;
  spec.in_width = spec.in_height;
  spec.num_classes = model.classes;
  spec.layers = model.layers;
  spec.finalize();
  return spec;
}

data::Dataset load_dataset(const DatasetConfig& dataset) {
  if (dataset.type == "synthetic") {
    return data::gen_synthetic(dataset.n, dataset.size, dataset.seed);
  }
  return data::load_cifar10_binary(dataset.path, dataset.indices);
}

}  // namespace gradinv::cli
