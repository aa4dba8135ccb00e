#pragma once

// Datasets, AdamW, checkpoints, and the unified / two-stage training loop.
//
// Output directory layout:
//   config.snapshot   every config key, replayable with `train --config`
//   train.log         one line per epoch
//   last.ckpt         written after every epoch (resume point)
//   stage1.ckpt       end of stage 1 (two-stage plan)
//   final.ckpt        end of training
//   report.txt / report.json   final metrics

#include <array>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "seld/config.hpp"
#include "seld/container.hpp"
#include "seld/metrics.hpp"
#include "seld/model.hpp"
#include "seld/objective.hpp"

namespace seld {

struct Example {
  std::string name;
  BranchFeatures features;
  FrameTargets targets;  // batch of one
  EventList refs;
};

struct Dataset {
  std::vector<Example> items;
};

/// data.synth_count scenes with seeds data.synth.seed + i.
Dataset synthetic_dataset(const RunConfig& cfg);
/// Clips are cut into data.segment_seconds windows (the last one zero-padded)
/// with their label frames. Features are cached under data.feature_cache
/// when it is set.
Dataset manifest_dataset(const std::filesystem::path& manifest, const RunConfig& cfg);

struct InputStats {
  std::array<Tensor, 3> mean;
  std::array<Tensor, 3> std;
};

/// Per (channel, mel bin) mean and standard deviation over every frame of
/// every item. Deviations below 1e-6 are raised to 1e-6.
InputStats compute_input_stats(const Dataset& data);
void apply_input_stats(Model& model, const InputStats& stats);

class AdamW {
 public:
  explicit AdamW(const OptimConfig& cfg) : cfg_(cfg) {}

  /// One update of every trainable parameter from Parameter::grad with
  /// decoupled weight decay: p -= lr (m_hat / (sqrt(v_hat) + eps) + wd p).
  void step(ParameterStore& store, double lr);
  void reset();
  std::size_t steps() const { return t_; }

  void save(Container& c) const;
  void load(const Container& c, const ParameterStore& store);

 private:
  OptimConfig cfg_;
  std::size_t t_ = 0;
  std::map<std::string, Tensor> m_;
  std::map<std::string, Tensor> v_;
};

struct EpochLog {
  Stage stage = Stage::unified;
  std::size_t epoch = 0;  // 1-based within the stage
  double lr = 0.0;
  LossWeights weights;
  double loss = 0.0;
  ComponentLosses components;
  std::optional<MetricReport> metrics;
  double seconds = 0.0;

  std::string to_line() const;
};

struct StageReport {
  Stage stage = Stage::unified;
  MetricReport metrics;
};

struct TrainReport {
  std::vector<EpochLog> epochs;
  std::vector<StageReport> stages;
  MetricReport final_metrics;
  bool finished = false;
};

/// Forward pass in inference mode on already-normalized inputs.
TrackTensors predict(const Model& model, const std::array<Tensor, 3>& inputs);

/// Thresholded track decoding over every item, scored against the references.
MetricReport evaluate(const Model& model, const Dataset& data, double threshold, std::size_t batch_size = 8,
                      const MetricOptions& opts = {});

void save_checkpoint(const std::filesystem::path& path, const Model& model, const RunConfig& cfg,
                     const AdamW* optimizer = nullptr, const std::map<std::string, std::string>& progress = {});

struct LoadedCheckpoint {
  RunConfig config;
  std::unique_ptr<Model> model;
  Container raw;
};

/// Rebuilds the model from the checkpoint's own config snapshot.
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

class Trainer {
 public:
  /// `eval` scores validation metrics; without it the training set is scored.
  Trainer(RunConfig cfg, Dataset train, std::optional<Dataset> eval = std::nullopt);

  /// Continues from a last.ckpt written by a run with the same architecture.
  void resume(const std::filesystem::path& checkpoint);

  /// Runs up to `max_epochs` further epochs (stopping early simulates an
  /// interruption). Writes checkpoints, the log and the report into
  /// train.output_dir. `log` receives a copy of every log line.
  TrainReport run(std::ostream* log = nullptr, std::size_t max_epochs = std::numeric_limits<std::size_t>::max());

  Model& model() { return *model_; }
  const RunConfig& config() const { return cfg_; }

 private:
  std::vector<Stage> stages() const;
  std::size_t stage_epochs(Stage s) const;
  EpochLog run_epoch(Stage stage, std::size_t epoch, std::size_t global_epoch);
  const Dataset& scored() const { return eval_ ? *eval_ : train_; }

  RunConfig cfg_;
  Dataset train_;
  std::optional<Dataset> eval_;
  std::unique_ptr<Model> model_;
  AdamW optim_;
  std::size_t stage_index_ = 0;
  std::size_t epochs_done_ = 0;  // within the current stage
  std::vector<StageReport> stage_reports_;
};

}  // namespace seld
