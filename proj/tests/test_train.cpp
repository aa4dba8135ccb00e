#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "doctest.h"
#include "seld/train.hpp"

using namespace seld;
namespace fs = std::filesystem;

namespace {

RunConfig toy_run(const fs::path& out) {
  RunConfig cfg = preset("desk");
  cfg.model.n_classes = 2;
  cfg.model.conv_channels = {2, 2, 2, 8};
  cfg.model.d_model = 8;
  cfg.train.epochs = 3;
  cfg.train.stage1_epochs = 2;
  cfg.train.stage2_epochs = 2;
  cfg.train.halve_after = 1;
  cfg.train.batch_size = 2;
  cfg.train.eval_every = 1;
  cfg.train.output_dir = out.string();
  cfg.data.synth_count = 4;
  cfg.data.synth.n_events = 1;
  cfg.finalize();
  return cfg;
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("seld_train_test_" + name);
  fs::remove_all(p);
  return p;
}

bool same_params(Model& a, Model& b) {
  for (std::size_t i = 0; i < a.params().size(); ++i) {
    if (!(a.params().all()[i].value == b.params().all()[i].value)) return false;
  }
  return true;
}

}  // namespace

TEST_SUITE("train") {
  TEST_CASE("AdamW first step matches the closed form") {
    ParameterStore store;
    Parameter& p = store.add("w", Tensor({3}, {1.0, -2.0, 0.5}));
    Parameter& frozen = store.add("buf", Tensor({1}, {7.0}), false);
    p.grad = Tensor({3}, {0.1, -0.4, 0.0});
    OptimConfig oc;
    oc.weight_decay = 0.1;
    AdamW opt(oc);
    const double lr = 0.01;
    opt.step(store, lr);
    // Bias-corrected moments after one step are g and g^2.
    const double expect[3] = {1.0 - lr * (0.1 / (0.1 + 1e-8) + 0.1 * 1.0),
                              -2.0 - lr * (-0.4 / (0.4 + 1e-8) + 0.1 * -2.0), 0.5 - lr * (0.0 + 0.1 * 0.5)};
    for (int i = 0; i < 3; ++i) CHECK(p.value[i] == doctest::Approx(expect[i]).epsilon(1e-12));
    CHECK(frozen.value[0] == 7.0);
    CHECK(opt.steps() == 1);
  }

  TEST_CASE("AdamW second step uses bias-corrected running moments") {
    ParameterStore store;
    Parameter& p = store.add("w", Tensor({1}, {0.0}));
    OptimConfig oc;
    oc.weight_decay = 0.0;
    AdamW opt(oc);
    p.grad = Tensor({1}, {1.0});
    opt.step(store, 1.0);
    p.grad = Tensor({1}, {-1.0});
    opt.step(store, 1.0);
    const double m = 0.9 * 0.1 + 0.1 * -1.0, v = 0.999 * 0.001 + 0.001 * 1.0;
    const double first = 1.0 / (1.0 + 1e-8);
    const double second = (m / (1 - 0.81)) / (std::sqrt(v / (1 - 0.999 * 0.999)) + 1e-8);
    CHECK(p.value[0] == doctest::Approx(-first - second).epsilon(1e-12));
  }

  TEST_CASE("optimizer state round-trips through a container") {
    ParameterStore store;
    Parameter& p = store.add("w", Tensor({2}, {1.0, 2.0}));
    p.grad = Tensor({2}, {0.3, -0.2});
    AdamW a(OptimConfig{}), b(OptimConfig{});
    a.step(store, 0.1);
    Container c;
    a.save(c);
    b.load(c, store);
    ParameterStore s2;
    Parameter& q = s2.add("w", p.value);
    q.grad = p.grad;
    a.step(store, 0.1);
    b.step(s2, 0.1);
    CHECK(p.value == q.value);
  }

  TEST_CASE("input statistics are per channel and mel bin over all frames") {
    Dataset d;
    for (int i = 0; i < 2; ++i) {
      Example e;
      e.features.sed = Tensor({4, 2, 16}, 0.0);
      e.features.doa = Tensor({7, 2, 16}, 1.0 + i);
      e.features.sde = Tensor({4, 2, 16}, 0.0);
      e.features.sed.at({1, 0, 3}) = 4.0 * (i + 1);
      d.items.push_back(e);
    }
    const InputStats s = compute_input_stats(d);
    // Channel 1, bin 3 sees {4, 0, 8, 0}: mean 3, population std sqrt(11).
    CHECK(s.mean[0].at({1, 3}) == doctest::Approx(3.0));
    CHECK(s.std[0].at({1, 3}) == doctest::Approx(std::sqrt(11.0)));
    CHECK(s.mean[1].at({6, 15}) == doctest::Approx(1.5));
    CHECK(s.std[1].at({6, 15}) == doctest::Approx(0.5));
    CHECK(s.std[0].at({0, 0}) == 1e-6);
  }

  TEST_CASE("oracle predictions score perfectly through the evaluation path") {
    const RunConfig cfg = toy_run(scratch("oracle"));
    const Dataset d = synthetic_dataset(cfg);
    EventList preds, refs;
    for (const Example& e : d.items) {
      TrackTensors oracle{e.targets.sed, e.targets.doa, e.targets.dist};
      const EventList p = decode_tracks(oracle, 0, cfg.train.threshold);
      preds.insert(preds.end(), p.begin(), p.end());
      refs.insert(refs.end(), e.refs.begin(), e.refs.end());
    }
    const MetricReport r = evaluate_events(preds, refs);
    CHECK(r.f20 == 1.0);
    CHECK(r.doae == doctest::Approx(0.0).epsilon(1e-9));
    CHECK(r.rde == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(r.seld_score == doctest::Approx(0.0).epsilon(1e-9));
    CHECK(r.matched > 0);
  }

  TEST_CASE("synthetic examples have aligned feature and label frames") {
    const RunConfig cfg = toy_run(scratch("shapes"));
    const Dataset d = synthetic_dataset(cfg);
    REQUIRE(d.items.size() == 4);
    CHECK(d.items[0].features.doa.shape() == Shape{7, 400, 16});
    CHECK(d.items[0].targets.frames() == 50);
    CHECK(d.items[0].refs.size() == 50);
  }

  TEST_CASE("training is deterministic and reduces the loss") {
    const RunConfig cfg = toy_run(scratch("det_a"));
    RunConfig cfg_b = cfg;
    cfg_b.train.output_dir = scratch("det_b").string();
    Trainer a(cfg, synthetic_dataset(cfg)), b(cfg_b, synthetic_dataset(cfg_b));
    const TrainReport ra = a.run(), rb = b.run();
    REQUIRE(ra.epochs.size() == 3);
    CHECK(ra.epochs[0].loss == rb.epochs[0].loss);
    CHECK(ra.epochs[2].loss == rb.epochs[2].loss);
    CHECK(ra.epochs[2].loss < ra.epochs[0].loss);
    CHECK(ra.epochs[0].lr == cfg.optim.lr);
    CHECK(ra.epochs[1].lr == cfg.optim.lr / 2);
    CHECK(ra.finished);
    for (const char* f : {"config.snapshot", "train.log", "last.ckpt", "final.ckpt", "report.txt", "report.json"}) {
      INFO(f);
      CHECK(fs::exists(fs::path(cfg.train.output_dir) / f));
    }
  }

  TEST_CASE("two-stage plan switches the loss weights at the transition") {
    RunConfig cfg = toy_run(scratch("two_stage"));
    cfg.train.stage_plan = StagePlan::two_stage;
    Trainer t(cfg, synthetic_dataset(cfg));
    std::ostringstream log;
    const TrainReport r = t.run(&log);
    REQUIRE(r.epochs.size() == 4);
    CHECK(r.epochs[1].weights.dist == 0.0);
    CHECK(r.epochs[2].weights.dist == 3.0);
    CHECK(r.epochs[2].weights.sed == 25.0);
    CHECK(r.epochs[2].weights.doa == 5.0);
    CHECK(r.epochs[2].epoch == 1);
    CHECK(r.epochs[1].lr == cfg.optim.lr / 2);
    CHECK(r.epochs[2].lr == cfg.optim.lr * cfg.train.stage2_lr_scale);
    CHECK(r.epochs[3].lr == cfg.optim.lr * cfg.train.stage2_lr_scale / 2);
    CHECK(log.str().find("lambda=(25.0000,5.0000,0.0000)") != std::string::npos);
    CHECK(log.str().find("lambda=(25.0000,5.0000,3.0000)") != std::string::npos);
    REQUIRE(r.stages.size() == 2);
    CHECK(r.stages[0].stage == Stage::stage1);
    CHECK(fs::exists(fs::path(cfg.train.output_dir) / "stage1.ckpt"));
  }

  TEST_CASE("interrupt and resume reproduces the uninterrupted run") {
    RunConfig whole = toy_run(scratch("whole"));
    whole.train.stage_plan = StagePlan::two_stage;
    RunConfig split = whole;
    split.train.output_dir = scratch("split").string();

    Trainer full(whole, synthetic_dataset(whole));
    const TrainReport ref = full.run();

    Trainer first(split, synthetic_dataset(split));
    const TrainReport partial = first.run(nullptr, 3);
    CHECK_FALSE(partial.finished);
    Trainer second(split, synthetic_dataset(split));
    second.resume(fs::path(split.train.output_dir) / "last.ckpt");
    const TrainReport rest = second.run();
    REQUIRE(rest.finished);
    CHECK(rest.epochs.size() == 1);
    CHECK(rest.final_metrics.f20 == ref.final_metrics.f20);
    CHECK(rest.final_metrics.doae == ref.final_metrics.doae);
    CHECK(rest.final_metrics.rde == ref.final_metrics.rde);
    CHECK(rest.stages.size() == 2);
    CHECK(same_params(full.model(), second.model()));
  }

  TEST_CASE("resume refuses a checkpoint with a different architecture") {
    RunConfig cfg = toy_run(scratch("arch_a"));
    cfg.train.epochs = 1;
    Trainer a(cfg, synthetic_dataset(cfg));
    a.run();
    RunConfig other = cfg;
    other.model.d_state = 8;
    other.train.output_dir = scratch("arch_b").string();
    Trainer b(other, synthetic_dataset(other));
    CHECK_THROWS_WITH_AS(b.resume(fs::path(cfg.train.output_dir) / "last.ckpt"),
                         doctest::Contains("model.d_state"), std::runtime_error);
  }

  TEST_CASE("checkpoints restore the model and its config") {
    RunConfig cfg = toy_run(scratch("ckpt"));
    cfg.train.epochs = 1;
    Trainer t(cfg, synthetic_dataset(cfg));
    t.run();
    LoadedCheckpoint ck = load_checkpoint(fs::path(cfg.train.output_dir) / "final.ckpt");
    CHECK(ck.config.snapshot() == t.config().snapshot());
    CHECK(same_params(t.model(), *ck.model));
    const Dataset d = synthetic_dataset(cfg);
    const MetricReport a = evaluate(t.model(), d, 0.5), b = evaluate(*ck.model, d, 0.5);
    CHECK(a.f20 == b.f20);
    CHECK(a.doae == b.doae);
    CHECK_THROWS_WITH_AS(load_checkpoint("/nonexistent/x.ckpt"), doctest::Contains("does not exist"),
                         std::runtime_error);
  }

  TEST_CASE("manifest datasets read WAV clips and label files") {
    RunConfig cfg = toy_run(scratch("manifest"));
    const fs::path dir = scratch("manifest_data");
    const fs::path manifest = generate_dataset(dir, 2, cfg.data.synth);
    const Dataset from_disk = manifest_dataset(manifest, cfg);
    const Dataset in_memory = synthetic_dataset(cfg);
    REQUIRE(from_disk.items.size() == 2);
    CHECK(from_disk.items[0].refs.size() == 50);
    CHECK(max_abs_diff(from_disk.items[0].targets.active, in_memory.items[0].targets.active) == 0.0);
    CHECK(max_abs_diff(from_disk.items[0].features.sed, in_memory.items[0].features.sed) < 1e-3);

    cfg.data.feature_cache = (dir / "cache").string();
    const Dataset cached = manifest_dataset(manifest, cfg);
    const Dataset again = manifest_dataset(manifest, cfg);
    CHECK(fs::exists(dir / "cache"));
    CHECK(again.items[1].features.doa == cached.items[1].features.doa);

    std::ofstream(dir / "broken.txt") << "missing.wav missing.csv\n";
    CHECK_THROWS_AS(manifest_dataset(dir / "broken.txt", cfg), std::runtime_error);
  }
}
