#pragma once

// Run configuration as plain-text "key = value" lines with dotted keys.
//
//   # comment
//   model.d_model = 16
//   model.conv_channels = 4,8,16,16
//   train.stage_plan = two-stage
//
// Every key may be overridden from the environment: SELD_ followed by the
// key upper-cased with dots replaced by underscores (SELD_OPTIM_LR=1e-3).
// A snapshot lists every key and re-parses to an identical config.

#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "seld/data.hpp"
#include "seld/features.hpp"
#include "seld/model.hpp"

namespace seld {

struct OptimConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

enum class StagePlan { unified, two_stage };
StagePlan parse_stage_plan(const std::string& s);
std::string stage_plan_name(StagePlan p);

struct TrainConfig {
  StagePlan stage_plan = StagePlan::unified;
  std::size_t epochs = 80;          // unified plan
  std::size_t stage1_epochs = 80;   // two-stage plan
  std::size_t stage2_epochs = 80;
  std::size_t halve_after = 65;     // lr halves once this many epochs of a stage have run
  double stage2_lr_scale = 1.0;     // stage-2 lr relative to optim.lr
  std::size_t batch_size = 8;
  std::uint64_t seed = 0;
  std::size_t eval_every = 1;       // epochs between metric passes; 0 scores stage ends only
  double threshold = 0.5;
  std::string output_dir = "runs/default";
};

struct DataConfig {
  /// Empty selects the synthetic generator.
  std::string train_manifest;
  std::string eval_manifest;
  std::string feature_cache;
  std::size_t synth_count = 200;
  SceneSpec synth;
  double segment_seconds = 5.0;
};

struct RunConfig {
  ModelConfig model;
  FeatureConfig features;
  OptimConfig optim;
  TrainConfig train;
  DataConfig data;

  /// Propagates shared settings (mel count, IV use, class count, sample rate)
  /// and validates.
  void finalize();
  std::string snapshot() const;
  /// Keys that fix the parameter layout; a checkpoint must match them to resume.
  std::map<std::string, std::string> architecture() const;
};

/// Known keys in snapshot order.
std::vector<std::string> config_keys();

void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value);
std::string get_config_value(const RunConfig& cfg, const std::string& key);

/// Parses text; errors carry "source:line". Unknown keys are errors.
RunConfig parse_config(const std::string& text, const std::string& source = "<config>");
RunConfig load_config(const std::filesystem::path& path);
/// Applies SELD_* variables through `lookup` (defaults to getenv).
void apply_env_overrides(RunConfig& cfg, const std::function<const char*(const char*)>& lookup = {});

/// Named starting points: "paper" (defaults) and "desk" (tiny model on
/// 200 synthetic segments, sized for a single CPU core).
RunConfig preset(const std::string& name);

}  // namespace seld
