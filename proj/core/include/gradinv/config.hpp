#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "gradinv/attack.hpp"
#include "gradinv/data.hpp"
#include "gradinv/nn.hpp"

namespace gradinv::cli {

struct DatasetConfig {
  std::string type = "synthetic";  // synthetic | cifar10
  int n = 20;
  int size = 16;
  std::uint64_t seed = 1;
  std::string path;          // cifar10
  std::vector<int> indices;  // cifar10
};

struct ModelConfig {
  std::string name = "tiny-cnn";  // tiny-cnn | mini-resnet | custom
  int classes = 10;
  std::uint64_t seed = 11;
  // custom models only:
  std::vector<nn::LayerDesc> layers;
};

struct ScheduleConfig {
  int epochs = 1;
  int batch_size = 1;
  int local_steps = 1;
  double mu = 1e-4;
  bool shuffle = true;
  std::uint64_t seed = 7;
  std::string emit = "gradient";  // gradient | model-delta
  bool freeze_model = false;
};

struct MultiepochConfig {
  bool enabled = false;
  int pre_iterations = 2000;
  bool label_filter = true;
  bool pooling = true;
  std::vector<double> gammas{1.0, 0.1};
};

struct ExperimentConfig {
  DatasetConfig dataset;
  ModelConfig model;
  ScheduleConfig schedule;
  attack::AttackConfig attack;
  bool attack_mu_given = false;  // otherwise attack.mu mirrors schedule.mu
  MultiepochConfig multiepoch;
  std::vector<int> attack_records;  // empty = all records
  std::string output_dir = "out";
};

/// Parses and validates a JSON experiment config: defaults applied,
/// unknown keys rejected with their key path.
ExperimentConfig parse_config(const std::string& text);

/// Canonical JSON with every default materialized; parse(serialize(c))
/// round-trips losslessly.
std::string serialize_config(const ExperimentConfig& config);

/// Builds the (finalized) model spec the config describes. The dataset
/// config supplies the input geometry for the named zoo models.
nn::ModelSpec build_model_spec(const ModelConfig& model, const DatasetConfig& dataset);

/// Loads or generates the dataset the config describes.
data::Dataset load_dataset(const DatasetConfig& dataset);

}  // namespace gradinv::cli
