#include <map>
#include <string>

#include "doctest.h"
#include "seld/config.hpp"

using namespace seld;

TEST_SUITE("config") {
  TEST_CASE("defaults match the reference training setup") {
    RunConfig cfg;
    cfg.finalize();
    CHECK(cfg.optim.lr == 3e-4);
    CHECK(cfg.train.halve_after == 65);
    CHECK(cfg.train.epochs == 80);
    CHECK(cfg.optim.beta1 == 0.9);
    CHECK(cfg.optim.beta2 == 0.999);
    CHECK(cfg.optim.weight_decay == 0.01);
    CHECK(cfg.train.batch_size == 8);
    CHECK(cfg.train.threshold == 0.5);
  }

  TEST_CASE("key = value text with comments parses") {
    const RunConfig cfg = parse_config(
        "# tiny\n"
        "model.conv_channels = 4, 8, 16, 16   # widths\n"
        "model.d_model=16\n"
        "\n"
        "model.discretization = zoh\n"
        "train.stage_plan = two-stage\n"
        "optim.lr = 0.001\n"
        "features.sde_use_ivs = true\n");
    CHECK(cfg.model.conv_channels[2] == 16);
    CHECK(cfg.model.d_model == 16);
    CHECK(cfg.model.discretization == Discretization::zoh);
    CHECK(cfg.train.stage_plan == StagePlan::two_stage);
    CHECK(cfg.optim.lr == 1e-3);
    CHECK(cfg.features.sde_use_ivs);
  }

  TEST_CASE("errors carry the source line") {
    CHECK_THROWS_WITH_AS(parse_config("model.d_model = 8\nmodel.bogus = 1\n", "run.cfg"),
                         doctest::Contains("run.cfg:2"), std::invalid_argument);
    CHECK_THROWS_WITH_AS(parse_config("optim.lr = fast\n"), doctest::Contains("expected a number"),
                         std::invalid_argument);
    CHECK_THROWS_WITH_AS(parse_config("no equals sign\n"), doctest::Contains(":1"), std::invalid_argument);
    CHECK_THROWS_AS(parse_config("train.stage_plan = three-stage\n"), std::invalid_argument);
    CHECK_THROWS_AS(parse_config("model.conv_channels = 1,2,3\n"), std::invalid_argument);
  }

  TEST_CASE("snapshot re-parses to an identical configuration") {
    RunConfig cfg = preset("desk");
    cfg.optim.lr = 1.0 / 3.0;
    cfg.data.synth.distance_max = 2.75;
    cfg.train.output_dir = "some/dir";
    cfg.finalize();
    const std::string snap = cfg.snapshot();
    RunConfig back = parse_config(snap);
    back.finalize();
    CHECK(back.snapshot() == snap);
    CHECK(back.optim.lr == cfg.optim.lr);
    for (const std::string& key : config_keys()) CHECK(snap.find(key + " = ") != std::string::npos);
  }

  TEST_CASE("environment overrides use the SELD_ prefix") {
    std::map<std::string, std::string> env{{"SELD_OPTIM_LR", "0.002"},
                                           {"SELD_MODEL_D_MODEL", "32"},
                                           {"SELD_DATA_SYNTH_N_EVENTS", "1"},
                                           {"UNRELATED", "x"}};
    RunConfig cfg;
    apply_env_overrides(cfg, [&](const char* name) -> const char* {
      auto it = env.find(name);
      return it == env.end() ? nullptr : it->second.c_str();
    });
    CHECK(cfg.optim.lr == 0.002);
    CHECK(cfg.model.d_model == 32);
    CHECK(cfg.data.synth.n_events == 1);
    env["SELD_TRAIN_BATCH_SIZE"] = "-3";
    CHECK_THROWS_WITH_AS(apply_env_overrides(cfg, [&](const char* name) -> const char* {
                           auto it = env.find(name);
                           return it == env.end() ? nullptr : it->second.c_str();
                         }),
                         doctest::Contains("SELD_TRAIN_BATCH_SIZE"), std::invalid_argument);
  }

  TEST_CASE("finalize propagates shared settings and validates") {
    RunConfig cfg = preset("desk");
    cfg.features.sde_use_ivs = true;
    cfg.finalize();
    CHECK(cfg.model.n_mels == cfg.features.n_mels);
    CHECK(cfg.model.sde_use_ivs);
    CHECK(cfg.data.synth.n_classes == cfg.model.n_classes);
    CHECK(cfg.data.synth.duration == cfg.data.segment_seconds);

    RunConfig bad = preset("desk");
    bad.data.segment_seconds = 4.95;
    CHECK_THROWS_AS(bad.finalize(), std::invalid_argument);
    bad = preset("desk");
    bad.train.batch_size = 0;
    CHECK_THROWS_AS(bad.finalize(), std::invalid_argument);
    bad = preset("desk");
    bad.model.d_model = 8;
    CHECK_THROWS_AS(bad.finalize(), std::invalid_argument);
    bad = preset("desk");
    bad.train.stage2_lr_scale = 0.0;
    CHECK_THROWS_AS(bad.finalize(), std::invalid_argument);
  }

  TEST_CASE("architecture keys identify the parameter layout") {
    RunConfig a = preset("desk"), b = preset("desk");
    b.optim.lr = 0.5;
    b.train.epochs = 3;
    CHECK(a.architecture() == b.architecture());
    b.model.d_state = 8;
    CHECK(a.architecture() != b.architecture());
  }

  TEST_CASE("presets") {
    CHECK(preset("paper").snapshot() == RunConfig{}.snapshot());
    const RunConfig desk = preset("desk");
    CHECK(desk.model.d_model == 16);
    CHECK(desk.data.synth_count == 200);
    CHECK(desk.train.epochs == 30);
    CHECK(desk.data.synth.max_overlap == 1);
    CHECK(desk.train.stage2_lr_scale == 0.25);
    CHECK_THROWS_AS(preset("huge"), std::invalid_argument);
  }
}
