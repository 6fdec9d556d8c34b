#include "gradinv/experiment.hpp"

#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <sstream>
#include <thread>

#include <nlohmann/json.hpp>

#include "gradinv/attack.hpp"
#include "gradinv/image_io.hpp"
#include "gradinv/metrics.hpp"
#include "gradinv/multiepoch.hpp"
#include "gradinv/rng.hpp"

namespace gradinv::cli {

namespace fs = std::filesystem;
using nlohmann::json;

void parallel_for(int n, int workers, const std::function<void(int)>& fn) {
  if (n <= 0) return;
  workers = std::max(1, std::min(workers, n));
  if (workers == 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  std::vector<std::thread> pool;
  std::exception_ptr error;
  std::mutex error_mutex;
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      while (true) {
        int i = next.fetch_add(1);
        if (i >= n) return;
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(error_mutex);
          if (!error) error = std::current_exception();
          return;
        }
      }
    });
  }
  for (std::thread& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

namespace {

int hardware_workers() {
  unsigned int n = std::thread::hardware_concurrency();
  return n == 0 ? 1 : static_cast<int>(n);
}

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out << text;
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Append-as-you-go stage log; every run finishes with a status line.
class Manifest {
 public:
  explicit Manifest(fs::path dir) : path_(dir / "MANIFEST") {}

  void stage_ok(const std::string& name, const std::string& detail = "") {
    lines_.push_back("stage " + name + " ok" + (detail.empty() ? "" : " " + detail));
    flush("running");
  }

  void stage_failed(const std::string& name, const std::string& why) {
    lines_.push_back("stage " + name + " failed " + why);
    flush("failed");
  }

  void done() { flush("ok"); }

 private:
  void flush(const std::string& status) {
    std::string text;
    for (const std::string& l : lines_) text += l + "\n";
    text += "status " + status + "\n";
    write_file(path_, text);
  }

  fs::path path_;
  std::vector<std::string> lines_;
};

struct RunArtifacts {
  fl::TrainingLog log;
  nn::ModelSpec spec;
  data::Dataset dataset;
};

RunArtifacts simulate(const ExperimentConfig& config) {
  RunArtifacts art;
  art.dataset = load_dataset(config.dataset);
  art.spec = build_model_spec(config.model, config.dataset);
  if (art.spec.in_height != art.dataset.height || art.spec.in_width != art.dataset.width) {
    throw ConfigError("model/dataset geometry mismatch");
  }
  nn::ModelState model = nn::init_model(art.spec, config.model.seed);
  fl::TrainingSchedule schedule;
  schedule.n_samples = static_cast<int>(art.dataset.images.size());
  schedule.epochs = config.schedule.epochs;
  schedule.batch_size = config.schedule.batch_size;
  schedule.local_steps = config.schedule.local_steps;
  schedule.mu = config.schedule.mu;
  schedule.freeze_model = config.schedule.freeze_model;
  if (config.schedule.shuffle) schedule.shuffle_seed = config.schedule.seed;
  fl::UpdateKind kind = config.schedule.emit == "gradient" ? fl::UpdateKind::kGradient
                                                           : fl::UpdateKind::kModelDelta;
  art.log = fl::run_training(art.spec, model, art.dataset.images, art.dataset.labels, schedule, kind);
  return art;
}

std::vector<int> records_to_attack(const ExperimentConfig& config, std::size_t n_records) {
  std::vector<int> idx = config.attack_records;
  if (idx.empty()) {
    for (std::size_t i = 0; i < n_records; ++i) idx.push_back(static_cast<int>(i));
  }
  for (int i : idx) {
    if (i < 0 || i >= static_cast<int>(n_records)) {
      throw ConfigError("attack_records: index " + std::to_string(i) + " out of range");
    }
  }
  return idx;
}

std::vector<std::vector<int>> step_labels_for(const fl::RoundTruth& truth,
                                              const std::vector<int>& labels) {
  std::vector<std::vector<int>> out;
  for (const std::vector<int>& step : truth.step_indices) {
    std::vector<int> l;
    l.reserve(step.size());
    for (int i : step) l.push_back(labels.at(static_cast<std::size_t>(i)));
    out.push_back(std::move(l));
  }
  return out;
}

/// Maps each reconstruction slot of a record to a dataset sample id. Slots
/// are label-sorted, so the record's true samples are ranked by (label,
/// dataset index) to mirror the assignment.
std::vector<int> slot_truth_ids(const fl::RoundTruth& truth, const std::vector<int>& labels) {
  std::vector<int> flat = truth.flat();
  std::vector<std::pair<int, int>> ranked;  // (label, dataset id)
  ranked.reserve(flat.size());
  for (int id : flat) ranked.push_back({labels.at(static_cast<std::size_t>(id)), id});
  std::sort(ranked.begin(), ranked.end());
  std::vector<int> out;
  out.reserve(ranked.size());
  for (const auto& [label, id] : ranked) out.push_back(id);
  return out;
}

std::string results_header(bool multiepoch) {
  std::string h = "run-id,slot,truth-index,psnr-db,ssim";
  if (multiepoch) h += ",phase";
  return h;
}

struct ResultRow {
  std::string run_id;
  int slot;
  int truth_index;
  double psnr_db;
  double ssim;
  std::string phase;
};

std::string results_csv(const std::vector<ResultRow>& rows, bool multiepoch) {
  std::string text = results_header(multiepoch) + "\r\n";
  for (const ResultRow& r : rows) {
    text += r.run_id + "," + std::to_string(r.slot) + "," + std::to_string(r.truth_index) + "," +
            fmt_double(r.psnr_db) + "," + fmt_double(r.ssim);
    if (multiepoch) text += "," + r.phase;
    text += "\r\n";
  }
  return text;
}

std::vector<Tensor> split_batch(const Tensor& batch) {
  int n = batch.shape[0];
  Shape tail(batch.shape.begin() + 1, batch.shape.end());
  std::int64_t row = batch.size() / n;
  std::vector<Tensor> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    Tensor t = Tensor::zeros(tail);
    for (std::int64_t k = 0; k < row; ++k) t[k] = batch[static_cast<std::int64_t>(i) * row + k];
    out.push_back(std::move(t));
  }
  return out;
}

json recon_to_json(const std::string& run_id, const attack::ReconstructionResult& r) {
  json j;
  j["run_id"] = run_id;
  j["images"] = json{{"shape", r.images.shape}, {"data", *r.images.data}};
  j["labels"] = r.labels;
  j["best_objective"] = r.best_objective;
  j["last_objective"] = r.last_objective;
  j["best_iteration"] = r.best_iteration;
  j["iterations"] = r.iterations_run;
  return j;
}

std::string trace_csv(const attack::ReconstructionResult& r) {
  std::string text = "iteration,objective\r\n";
  for (const auto& [it, value] : r.trace) {
    text += std::to_string(it) + "," + fmt_double(value) + "\r\n";
  }
  return text;
}

}  // namespace

void stage_simulate(const ExperimentConfig& config) {
  fs::create_directories(config.output_dir);
  RunArtifacts art = simulate(config);
  write_file(fs::path(config.output_dir) / "log.json", fl::serialize_log(art.log));
  write_file(fs::path(config.output_dir) / "config.json", serialize_config(config));
}

namespace {

struct AttackOutcome {
  std::vector<ResultRow> rows;
  std::vector<std::string> timing_rows;
  std::vector<attack::ReconstructionResult> results;  // per attacked record
  std::vector<int> record_indices;
};

AttackOutcome attack_records(const ExperimentConfig& config, const RunArtifacts& art) {
  AttackOutcome out;
  out.record_indices = records_to_attack(config, art.log.records.size());
  const int n = static_cast<int>(out.record_indices.size());
  out.results.resize(static_cast<std::size_t>(n));
  const char* mode = config.attack.fedavg_mode == attack::FedAvgMode::kNone
                         ? "none"
                         : config.attack.fedavg_mode == attack::FedAvgMode::kOneBatch
                               ? "one-batch"
                               : "simulation";

  parallel_for(n, hardware_workers(), [&](int i) {
    const fl::UpdateRecord& rec =
        art.log.records[static_cast<std::size_t>(out.record_indices[static_cast<std::size_t>(i)])];
    attack::AttackConfig cfg = config.attack;
    cfg.init_seed = Rng::mix(config.attack.init_seed, static_cast<std::uint64_t>(rec.round_index));
    if (config.attack.fedavg_mode == attack::FedAvgMode::kSimulation) {
      auto labels = step_labels_for(
          art.log.truths[static_cast<std::size_t>(out.record_indices[static_cast<std::size_t>(i)])],
          art.dataset.labels);
      out.results[static_cast<std::size_t>(i)] =
          attack::reconstruct(rec, cfg, art.spec, art.dataset.norm, &labels);
    } else {
      out.results[static_cast<std::size_t>(i)] =
          attack::reconstruct(rec, cfg, art.spec, art.dataset.norm);
    }
  });

  for (int i = 0; i < n; ++i) {
    int rec_idx = out.record_indices[static_cast<std::size_t>(i)];
    const fl::UpdateRecord& rec = art.log.records[static_cast<std::size_t>(rec_idx)];
    const attack::ReconstructionResult& res = out.results[static_cast<std::size_t>(i)];
    std::string run_id = "r" + std::to_string(rec.round_index);

    std::vector<Tensor> recon = split_batch(res.images);
    std::vector<int> flat = art.log.truths[static_cast<std::size_t>(rec_idx)].flat();
    std::vector<Tensor> truth;
    truth.reserve(flat.size());
    for (int id : flat) {
      truth.push_back(denormalize(art.dataset.images[static_cast<std::size_t>(id)], art.dataset.norm));
    }
    metrics::EvalReport report = metrics::evaluate_batch(recon, truth);
    for (const metrics::SampleEval& s : report.samples) {
      out.rows.push_back({run_id, s.slot, flat[static_cast<std::size_t>(s.truth_index)], s.psnr_db,
                          s.ssim, "single"});
    }
    out.timing_rows.push_back(run_id + "," + mode + "," + std::to_string(rec.local_steps) + "," +
                              std::to_string(res.iterations_run) + "," +
                              fmt_double(res.seconds_per_iteration));
  }
  return out;
}

}  // namespace

void stage_attack(const ExperimentConfig& config) {
  fs::path dir(config.output_dir);
  RunArtifacts art;
  art.dataset = load_dataset(config.dataset);
  art.spec = build_model_spec(config.model, config.dataset);
  art.log = fl::deserialize_log(read_file(dir / "log.json"));
  AttackOutcome outcome = attack_records(config, art);

  json recon = json::array();
  for (std::size_t i = 0; i < outcome.results.size(); ++i) {
    int rec_idx = outcome.record_indices[i];
    std::string run_id =
        "r" + std::to_string(art.log.records[static_cast<std::size_t>(rec_idx)].round_index);
    recon.push_back(recon_to_json(run_id, outcome.results[i]));
    write_file(dir / ("trace-" + run_id + ".csv"), trace_csv(outcome.results[i]));
  }
  write_file(dir / "recon.json", recon.dump());
  std::string timing = "run-id,mode,local-steps,iterations,seconds-per-iteration\r\n";
  for (const std::string& row : outcome.timing_rows) timing += row + "\r\n";
  write_file(dir / "timing.csv", timing);
}

void stage_match(const ExperimentConfig& config) {
  fs::path dir(config.output_dir);
  RunArtifacts art;
  art.dataset = load_dataset(config.dataset);
  art.spec = build_model_spec(config.model, config.dataset);
  art.log = fl::deserialize_log(read_file(dir / "log.json"));
  if (!config.multiepoch.enabled) throw ConfigError("multiepoch.enabled: match stage needs it");

  // Pre-reconstruct per epoch, then match consecutive epochs.
  int epochs = 0;
  for (const fl::UpdateRecord& r : art.log.records) epochs = std::max(epochs, r.epoch_index + 1);
  if (epochs < 2) throw ConfigError("schedule.epochs: matching needs at least two epochs");

  std::vector<std::vector<int>> epoch_records(static_cast<std::size_t>(epochs));
  for (std::size_t i = 0; i < art.log.records.size(); ++i) {
    epoch_records[static_cast<std::size_t>(art.log.records[i].epoch_index)].push_back(
        static_cast<int>(i));
  }

  std::string csv = "epoch-a,epoch-b,a-record,a-slot,b-record,b-slot,score,fallback,correct\r\n";
  for (int e = 0; e + 1 < epochs; ++e) {
    std::vector<fl::UpdateRecord> recs_a, recs_b;
    for (int i : epoch_records[static_cast<std::size_t>(e)])
      recs_a.push_back(art.log.records[static_cast<std::size_t>(i)]);
    for (int i : epoch_records[static_cast<std::size_t>(e + 1)])
      recs_b.push_back(art.log.records[static_cast<std::size_t>(i)]);
    multiepoch::PreReconstruction pre_a =
        multiepoch::pre_reconstruct(recs_a, config.attack, config.multiepoch.pre_iterations,
                                    art.spec, art.dataset.norm);
    multiepoch::PreReconstruction pre_b =
        multiepoch::pre_reconstruct(recs_b, config.attack, config.multiepoch.pre_iterations,
                                    art.spec, art.dataset.norm);
    multiepoch::MatchResult match = multiepoch::greedy_match(
        pre_a.slots, pre_b.slots, config.multiepoch.label_filter, config.multiepoch.pooling);
    std::vector<std::vector<int>> truth_a, truth_b;
    for (int i : epoch_records[static_cast<std::size_t>(e)])
      truth_a.push_back(slot_truth_ids(art.log.truths[static_cast<std::size_t>(i)], art.dataset.labels));
    for (int i : epoch_records[static_cast<std::size_t>(e + 1)])
      truth_b.push_back(slot_truth_ids(art.log.truths[static_cast<std::size_t>(i)], art.dataset.labels));
    for (const multiepoch::MatchPair& p : match.pairs) {
      int ta = truth_a[static_cast<std::size_t>(p.a.record)][static_cast<std::size_t>(p.a.slot)];
      int tb = truth_b[static_cast<std::size_t>(p.b.record)][static_cast<std::size_t>(p.b.slot)];
      csv += std::to_string(e) + "," + std::to_string(e + 1) + "," + std::to_string(p.a.record) +
             "," + std::to_string(p.a.slot) + "," + std::to_string(p.b.record) + "," +
             std::to_string(p.b.slot) + "," + fmt_double(p.score) + "," +
             (p.fallback ? "1" : "0") + "," + (ta == tb ? "1" : "0") + "\r\n";
    }
  }
  write_file(dir / "matches.csv", csv);
}

void stage_evaluate(const ExperimentConfig& config) {
  fs::path dir(config.output_dir);
  RunArtifacts art;
  art.dataset = load_dataset(config.dataset);
  art.spec = build_model_spec(config.model, config.dataset);
  art.log = fl::deserialize_log(read_file(dir / "log.json"));
  json recon;
  try {
    recon = json::parse(read_file(dir / "recon.json"));
  } catch (const json::parse_error& e) {
    throw IoError(std::string("recon.json: invalid JSON: ") + e.what());
  }

  std::vector<ResultRow> rows;
  for (const json& r : recon) {
    std::string run_id = r.at("run_id").get<std::string>();
    int round_index = std::stoi(run_id.substr(1));
    int rec_idx = -1;
    for (std::size_t i = 0; i < art.log.records.size(); ++i) {
      if (art.log.records[i].round_index == round_index) rec_idx = static_cast<int>(i);
    }
    if (rec_idx < 0) throw IoError("recon.json: run " + run_id + " not present in log.json");
    Shape shape = r.at("images").at("shape").get<Shape>();
    std::vector<double> data = r.at("images").at("data").get<std::vector<double>>();
    Tensor images(shape, std::move(data));
    std::vector<Tensor> reconstructions = split_batch(images);
    std::vector<int> flat = art.log.truths[static_cast<std::size_t>(rec_idx)].flat();
    std::vector<Tensor> truth;
    for (int id : flat) {
      truth.push_back(denormalize(art.dataset.images[static_cast<std::size_t>(id)], art.dataset.norm));
    }
    metrics::EvalReport report = metrics::evaluate_batch(reconstructions, truth);
    for (const metrics::SampleEval& s : report.samples) {
      rows.push_back({run_id, s.slot, flat[static_cast<std::size_t>(s.truth_index)], s.psnr_db,
                      s.ssim, "single"});
    }
  }
  write_file(dir / "results.csv", results_csv(rows, config.multiepoch.enabled));
}

void run_experiment(const ExperimentConfig& config) {
  fs::create_directories(config.output_dir);
  fs::path dir(config.output_dir);
  Manifest manifest(dir);

  RunArtifacts art;
  try {
    write_file(dir / "config.json", serialize_config(config));
    art = simulate(config);
    write_file(dir / "log.json", fl::serialize_log(art.log));
    manifest.stage_ok("simulate", std::to_string(art.log.records.size()) + " records");
  } catch (const std::exception& e) {
    manifest.stage_failed("simulate", e.what());
    throw;
  }

  std::vector<ResultRow> rows;
  AttackOutcome outcome;
  try {
    outcome = attack_records(config, art);
    rows = outcome.rows;
    json recon = json::array();
    for (std::size_t i = 0; i < outcome.results.size(); ++i) {
      int rec_idx = outcome.record_indices[i];
      const fl::UpdateRecord& rec = art.log.records[static_cast<std::size_t>(rec_idx)];
      std::string run_id = "r" + std::to_string(rec.round_index);
      recon.push_back(recon_to_json(run_id, outcome.results[i]));
      write_file(dir / ("trace-" + run_id + ".csv"), trace_csv(outcome.results[i]));

      // Reconstruction row above the matching ground-truth row.
      std::vector<Tensor> recon_tiles;
      for (Tensor& t : split_batch(outcome.results[i].images)) recon_tiles.push_back(clamp01(t));
      std::vector<Tensor> truth_tiles;
      for (int id : art.log.truths[static_cast<std::size_t>(rec_idx)].flat()) {
        truth_tiles.push_back(clamp01(
            denormalize(art.dataset.images[static_cast<std::size_t>(id)], art.dataset.norm)));
      }
      io::write_image_grid({recon_tiles, truth_tiles}, (dir / ("grid-" + run_id + ".ppm")).string());
    }
    write_file(dir / "recon.json", recon.dump());
    std::string timing = "run-id,mode,local-steps,iterations,seconds-per-iteration\r\n";
    for (const std::string& row : outcome.timing_rows) timing += row + "\r\n";
    write_file(dir / "timing.csv", timing);
    manifest.stage_ok("attack", std::to_string(outcome.results.size()) + " reconstructions");
  } catch (const std::exception& e) {
    manifest.stage_failed("attack", e.what());
    throw;
  }

  if (config.multiepoch.enabled) {
    try {
      int epochs = 0;
      for (const fl::UpdateRecord& r : art.log.records) epochs = std::max(epochs, r.epoch_index + 1);
      if (epochs < 2) throw ConfigError("schedule.epochs: multiepoch needs at least two epochs");

      std::vector<std::vector<int>> epoch_records(static_cast<std::size_t>(epochs));
      for (std::size_t i = 0; i < art.log.records.size(); ++i) {
        epoch_records[static_cast<std::size_t>(art.log.records[i].epoch_index)].push_back(
            static_cast<int>(i));
      }
      std::vector<std::vector<multiepoch::Slot>> epoch_slots;
      for (int e = 0; e < epochs; ++e) {
        std::vector<fl::UpdateRecord> recs;
        for (int i : epoch_records[static_cast<std::size_t>(e)])
          recs.push_back(art.log.records[static_cast<std::size_t>(i)]);
        multiepoch::PreReconstruction pre = multiepoch::pre_reconstruct(
            recs, config.attack, config.multiepoch.pre_iterations, art.spec, art.dataset.norm);
        // Rebase slot record indices onto the global record list.
        for (multiepoch::Slot& s : pre.slots) {
          s.ref.record = epoch_records[static_cast<std::size_t>(e)][static_cast<std::size_t>(s.ref.record)];
        }
        epoch_slots.push_back(std::move(pre.slots));
      }
      std::vector<multiepoch::MatchResult> matches;
      std::string csv = "epoch-a,epoch-b,a-record,a-slot,b-record,b-slot,score,fallback,correct\r\n";
      double success_sum = 0.0;
      for (int e = 0; e + 1 < epochs; ++e) {
        multiepoch::MatchResult match =
            multiepoch::greedy_match(epoch_slots[static_cast<std::size_t>(e)],
                                     epoch_slots[static_cast<std::size_t>(e + 1)],
                                     config.multiepoch.label_filter, config.multiepoch.pooling);
        int correct = 0;
        for (const multiepoch::MatchPair& p : match.pairs) {
          int ta = slot_truth_ids(art.log.truths[static_cast<std::size_t>(p.a.record)],
                                  art.dataset.labels)[static_cast<std::size_t>(p.a.slot)];
          int tb = slot_truth_ids(art.log.truths[static_cast<std::size_t>(p.b.record)],
                                  art.dataset.labels)[static_cast<std::size_t>(p.b.slot)];
          if (ta == tb) ++correct;
          csv += std::to_string(e) + "," + std::to_string(e + 1) + "," +
                 std::to_string(p.a.record) + "," + std::to_string(p.a.slot) + "," +
                 std::to_string(p.b.record) + "," + std::to_string(p.b.slot) + "," +
                 fmt_double(p.score) + "," + (p.fallback ? "1" : "0") + "," +
                 (ta == tb ? "1" : "0") + "\r\n";
        }
        success_sum += static_cast<double>(correct) / static_cast<double>(match.pairs.size());
        matches.push_back(std::move(match));
      }
      write_file(dir / "matches.csv", csv);
      manifest.stage_ok("match",
                        "success-rate " + fmt_double(success_sum / (epochs - 1)));

      std::vector<multiepoch::JointGroup> groups = multiepoch::chain_groups(epoch_slots, matches);
      attack::ReconstructionResult joint = multiepoch::joint_reconstruct(
          groups, art.log.records, config.attack, config.multiepoch.gammas, art.spec,
          art.dataset.norm);
      std::vector<Tensor> joint_tiles;
      for (Tensor& t : split_batch(joint.images)) joint_tiles.push_back(clamp01(t));
      std::vector<Tensor> truth_tiles;
      std::vector<Tensor> truth_images;
      for (std::size_t gi = 0; gi < groups.size(); ++gi) {
        const multiepoch::JointMember& m0 = groups[gi].members[0];
        int truth_id = slot_truth_ids(art.log.truths[static_cast<std::size_t>(m0.record)],
                                      art.dataset.labels)[static_cast<std::size_t>(m0.slot)];
        Tensor truth = denormalize(art.dataset.images[static_cast<std::size_t>(truth_id)],
                                   art.dataset.norm);
        truth_tiles.push_back(clamp01(truth));
        truth_images.push_back(truth);
        metrics::EvalReport one = metrics::evaluate_batch({joint_tiles[gi]}, {truth});
        rows.push_back({"joint-" + std::to_string(gi), 0, truth_id, one.samples[0].psnr_db,
                        one.samples[0].ssim, "joint"});
      }
      io::write_image_grid({joint_tiles, truth_tiles}, (dir / "grid-joint.ppm").string());
      manifest.stage_ok("joint", std::to_string(groups.size()) + " samples");
    } catch (const std::exception& e) {
      manifest.stage_failed("multiepoch", e.what());
      throw;
    }
  }

  try {
    write_file(dir / "results.csv", results_csv(rows, config.multiepoch.enabled));
    manifest.stage_ok("evaluate", std::to_string(rows.size()) + " rows");
  } catch (const std::exception& e) {
    manifest.stage_failed("evaluate", e.what());
    throw;
  }
  manifest.done();
}

// ---------------------------------------------------------------------------
// selftest
// ---------------------------------------------------------------------------

namespace {

bool check(std::ostream& out, const std::string& name, bool ok) {
  out << (ok ? "[ok]   " : "[FAIL] ") << name << "\n";
  return ok;
}

}  // namespace

bool run_selftest(std::ostream& out) {
  bool all = true;

  // conv2d against a directly indexed nested-loop evaluation
  {
    Rng rng(42);
    Tensor x = Tensor::zeros({1, 2, 5, 5});
    Tensor k = Tensor::zeros({3, 2, 3, 3});
    for (std::int64_t i = 0; i < x.size(); ++i) x[i] = rng.normal();
    for (std::int64_t i = 0; i < k.size(); ++i) k[i] = rng.normal();
    ad::Graph g;
    Tensor y = ad::conv2d(g, x, k, 1, 0);
    double worst = 0.0;
    for (int o = 0; o < 3; ++o) {
      for (int oy = 0; oy < 3; ++oy) {
        for (int ox = 0; ox < 3; ++ox) {
          double acc = 0.0;
          for (int c = 0; c < 2; ++c)
            for (int ky = 0; ky < 3; ++ky)
              for (int kx = 0; kx < 3; ++kx)
                acc += x[(static_cast<std::int64_t>(c) * 5 + oy + ky) * 5 + ox + kx] *
                       k[((static_cast<std::int64_t>(o) * 2 + c) * 3 + ky) * 3 + kx];
          worst = std::max(worst, std::fabs(acc - y[(static_cast<std::int64_t>(o) * 3 + oy) * 3 + ox]));
        }
      }
    }
    all &= check(out, "conv2d matches nested-loop evaluation", worst < 1e-12);
  }

  // analytic gradient vs central finite differences on a tiny model
  {
    nn::ModelSpec spec = nn::ModelSpec::tiny_cnn(8, 10);
    nn::ModelState state = nn::init_model(spec, 7);
    Rng rng(3);
    Tensor x = Tensor::zeros({1, 3, 8, 8});
    for (std::int64_t i = 0; i < x.size(); ++i) x[i] = rng.normal();
    std::vector<int> labels{4};
    ad::Graph g;
    Tensor xb = g.bind(x);
    Tensor logits = nn::model_forward(g, spec, state.params, xb);
    Tensor loss = ad::softmax_cross_entropy(g, logits, labels);
    std::vector<Tensor> grad = ad::backward(g, loss, std::vector<Tensor>{xb});
    auto eval = [&](const Tensor& probe) {
      ad::Graph g2;
      Tensor logits2 = nn::model_forward(g2, spec, state.params, probe);
      return ad::softmax_cross_entropy(g2, logits2, labels)[0];
    };
    double worst = 0.0;
    const double h = 1e-5;
    for (std::int64_t i = 0; i < x.size(); i += 37) {
      Tensor hi = x.detached_copy(), lo = x.detached_copy();
      hi[i] += h;
      lo[i] -= h;
      double fd = (eval(hi) - eval(lo)) / (2 * h);
      worst = std::max(worst, std::fabs(fd - grad[0][i]) / std::max(1.0, std::fabs(fd)));
    }
    all &= check(out, "input gradient matches finite differences", worst < 1e-4);
  }

  // one-batch approximation is exact for a single local step
  {
    data::Dataset ds = data::gen_synthetic(4, 8, 5);
    nn::ModelSpec spec = nn::ModelSpec::tiny_cnn(8, 10);
    nn::ModelState state = nn::init_model(spec, 9);
    double mu = 0x1p-13;
    auto [next, rec] = fl::run_round(spec, state, ds.images, ds.labels, {{0}}, mu,
                                     fl::UpdateKind::kModelDelta);
    std::vector<Tensor> approx = attack::one_batch_gradients(rec, mu);
    ad::Graph g;
    std::vector<Tensor> direct =
        nn::batch_gradient(g, spec, state.params, fl::stack_batch(ds.images, {0}), {ds.labels[0]});
    bool equal = true;
    for (std::size_t i = 0; i < approx.size(); ++i) {
      equal = equal && bit_equal(approx[i], direct[i].detached_copy());
    }
    all &= check(out, "one-batch gradients exact for T=1", equal);
  }

  // metric formulas
  {
    Tensor a = Tensor::full({1, 4, 4}, 0.5);
    Tensor b = Tensor::full({1, 4, 4}, 0.6);
    double expected = 10.0 * std::log10(1.0 / 0.01);
    bool ok = std::fabs(metrics::psnr(a, b) - expected) < 1e-9 && metrics::psnr(a, a) == 100.0;
    Tensor img = Tensor::zeros({3, 16, 16});
    Rng rng(8);
    for (std::int64_t i = 0; i < img.size(); ++i) img[i] = rng.uniform01();
    ok = ok && std::fabs(metrics::ssim(img, img) - 1.0) < 1e-12;
    all &= check(out, "psnr/ssim closed-form values", ok);
  }

  // cosine identities
  {
    Rng rng(11);
    Tensor a = Tensor::zeros({30});
    for (std::int64_t i = 0; i < a.size(); ++i) a[i] = rng.normal();
    ad::Graph g;
    double self = ad::cosine_similarity_flat(g, {a}, {a})[0];
    Tensor b = a.detached_copy();
    for (std::int64_t i = 0; i < b.size(); ++i) b[i] *= 3.5;
    double scaled = ad::cosine_similarity_flat(g, {b}, {a})[0];
    all &= check(out, "cosine self-similarity and scale invariance",
                 std::fabs(self - 1.0) < 1e-12 && std::fabs(scaled - self) < 1e-12);
  }

  out << (all ? "selftest passed" : "selftest FAILED") << "\n";
  return all;
}

}  // namespace gradinv::cli
