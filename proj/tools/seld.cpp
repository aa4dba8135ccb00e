// seld: train, evaluate, benchmark and describe SELD-Mamba models.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "seld/bench.hpp"
#include "seld/config.hpp"
#include "seld/data.hpp"
#include "seld/train.hpp"

namespace fs = std::filesystem;
using namespace seld;

namespace {

struct ConfigSource {
  std::string config_path;
  std::string preset_name;
  std::vector<std::string> overrides;
};

void add_config_options(CLI::App* cmd, ConfigSource& src) {
  cmd->add_option("--config", src.config_path, "key=value run configuration file");
  cmd->add_option("--preset", src.preset_name, "start from a named preset (paper, desk)");
  cmd->add_option("--set", src.overrides, "override one key, e.g. --set optim.lr=1e-3");
}

RunConfig resolve_config(const ConfigSource& src) {
  if (!src.config_path.empty() && !src.preset_name.empty()) {
    throw std::invalid_argument("--config and --preset are mutually exclusive");
  }
  RunConfig cfg = src.config_path.empty() ? preset(src.preset_name.empty() ? "paper" : src.preset_name)
                                          : load_config(src.config_path);
  apply_env_overrides(cfg);
  for (const std::string& kv : src.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw std::invalid_argument("--set expects key=value, got '" + kv + "'");
    set_config_value(cfg, kv.substr(0, eq), kv.substr(eq + 1));
  }
  cfg.finalize();
  return cfg;
}

Dataset load_data(const RunConfig& cfg, const std::string& manifest) {
  return manifest.empty() ? synthetic_dataset(cfg) : manifest_dataset(manifest, cfg);
}

std::string millions(std::size_t n) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(2) << static_cast<double>(n) / 1e6;
  return os.str();
}

void describe(const RunConfig& cfg, const Model* model, bool manifest) {
  const Complexity c = count_params_macs(cfg.model, cfg.features, 1.0);
  std::cout << "Params(M)  " << millions(c.params) << "  (" << c.params << ")\n";
  std::cout << "MACs(G/s)  " << std::fixed << std::setprecision(2) << static_cast<double>(c.macs) / 1e9 << "  ("
            << c.macs << ")\n";
  if (manifest) {
    if (model) {
      std::cout << describe_parameters(model->params());
    } else {
      std::cout << describe_parameters(Model(cfg.model, cfg.train.seed).params());
    }
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"SELD-Mamba: sound event localization and detection with bidirectional Mamba decoders"};
  app.require_subcommand(1);

  ConfigSource train_src;
  std::string stage_plan, output_dir, resume;
  std::size_t max_epochs = 0;
  auto* train_cmd = app.add_subcommand("train", "train a model (unified or two-stage)");
  add_config_options(train_cmd, train_src);
  train_cmd->add_option("--stage-plan", stage_plan, "unified or two-stage")
      ->check(CLI::IsMember({"unified", "two-stage"}));
  train_cmd->add_option("--output", output_dir, "output directory (overrides train.output_dir)");
  train_cmd->add_option("--resume", resume, "continue from a last.ckpt");
  train_cmd->add_option("--max-epochs", max_epochs, "stop after this many epochs in this invocation");

  std::string eval_ckpt, eval_data, eval_json;
  double eval_threshold = -1.0;
  bool eval_synthetic = false;
  auto* eval_cmd = app.add_subcommand("evaluate", "score a checkpoint against labelled clips");
  eval_cmd->add_option("--ckpt", eval_ckpt, "checkpoint file")->required();
  eval_cmd->add_option("--data", eval_data, "dataset manifest");
  eval_cmd->add_flag("--synthetic", eval_synthetic, "score the checkpoint's own synthetic training set");
  eval_cmd->add_option("--threshold", eval_threshold, "SED decision threshold (default from the checkpoint)");
  eval_cmd->add_option("--json", eval_json, "also write the report as JSON to this file");

  ScalingOptions bench_opts;
  bool bench_json = false;
  auto* bench_cmd = app.add_subcommand("bench", "time the selective scan against sequence length");
  bench_cmd->add_option("--repeats", bench_opts.repeats, "timed runs per length")->check(CLI::PositiveNumber);
  bench_cmd->add_option("--channels", bench_opts.channels, "inner width E")->check(CLI::PositiveNumber);
  bench_cmd->add_option("--state", bench_opts.state, "state size N")->check(CLI::PositiveNumber);
  bench_cmd->add_flag("--json", bench_json, "print JSON instead of a table");

  ConfigSource desc_src;
  std::string desc_ckpt;
  bool desc_params = false;
  auto* desc_cmd = app.add_subcommand("describe", "print parameter and MAC counts");
  add_config_options(desc_cmd, desc_src);
  desc_cmd->add_option("--ckpt", desc_ckpt, "checkpoint file");
  desc_cmd->add_flag("--params", desc_params, "list every parameter tensor");

  ConfigSource synth_src;
  std::string synth_out;
  auto* synth_cmd = app.add_subcommand("synth", "write a synthetic dataset (WAV, label CSV, manifest)");
  add_config_options(synth_cmd, synth_src);
  synth_cmd->add_option("--out", synth_out, "output directory")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train_cmd) {
      RunConfig cfg = resolve_config(train_src);
      if (!stage_plan.empty()) cfg.train.stage_plan = parse_stage_plan(stage_plan);
      if (!output_dir.empty()) cfg.train.output_dir = output_dir;
      std::cout << "loading data\n";
      Dataset train = load_data(cfg, cfg.data.train_manifest);
      std::optional<Dataset> eval;
      if (!cfg.data.eval_manifest.empty()) eval = manifest_dataset(cfg.data.eval_manifest, cfg);
      Trainer trainer(cfg, std::move(train), std::move(eval));
      if (!resume.empty()) trainer.resume(resume);
      const TrainReport rep = trainer.run(&std::cout, max_epochs ? max_epochs : static_cast<std::size_t>(-1));
      if (rep.finished) std::cout << rep.final_metrics.to_text();
    } else if (*eval_cmd) {
      if (eval_data.empty() == !eval_synthetic) throw std::invalid_argument("evaluate needs exactly one of --data or --synthetic");
      LoadedCheckpoint ck = load_checkpoint(eval_ckpt);
      const Dataset data = eval_synthetic ? synthetic_dataset(ck.config) : manifest_dataset(eval_data, ck.config);
      const double thr = eval_threshold > 0.0 ? eval_threshold : ck.config.train.threshold;
      const MetricReport rep = evaluate(*ck.model, data, thr, ck.config.train.batch_size);
      std::cout << rep.to_text();
      if (!eval_json.empty()) std::ofstream(eval_json) << rep.to_json() << "\n";
    } else if (*bench_cmd) {
      const ScalingReport rep = scan_scaling(bench_opts);
      std::cout << (bench_json ? rep.to_json() + "\n" : rep.to_text());
    } else if (*desc_cmd) {
      if (!desc_ckpt.empty()) {
        LoadedCheckpoint ck = load_checkpoint(desc_ckpt);
        describe(ck.config, ck.model.get(), desc_params);
      } else {
        describe(resolve_config(desc_src), nullptr, desc_params);
      }
    } else if (*synth_cmd) {
      const RunConfig cfg = resolve_config(synth_src);
      const fs::path manifest = generate_dataset(synth_out, cfg.data.synth_count, cfg.data.synth);
      std::cout << "wrote " << cfg.data.synth_count << " clips, manifest " << manifest.string() << "\n";
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
