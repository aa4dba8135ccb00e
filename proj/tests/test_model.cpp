#include <cmath>
#include <random>

#include "doctest.h"
#include "seld/gradcheck.hpp"
#include "seld/model.hpp"
#include "test_util.hpp"

using namespace seld;
using seld::testing::random_tensor;

namespace {

ModelConfig toy_config() {
  ModelConfig cfg;
  cfg.n_classes = 2;
  cfg.conv_channels = {2, 2, 2, 8};
  cfg.d_model = 8;
  cfg.d_state = 4;
  cfg.n_mels = 16;
  return cfg;
}

std::array<Tensor, 3> random_inputs(const ModelConfig& cfg, std::size_t batch, std::size_t frames,
                                    std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::array<Tensor, 3> x;
  for (std::size_t b = 0; b < 3; ++b) x[b] = random_tensor(rng, {batch, cfg.input_channels(b), frames, cfg.n_mels});
  return x;
}

struct Run {
  Graph g;
  Binder bind{g};
  TrackOutput out;
};

void run(Run& r, const Model& m, const std::array<Tensor, 3>& x, BatchNormMode mode = BatchNormMode::training) {
  std::array<Var, 3> in;
  for (std::size_t b = 0; b < 3; ++b) in[b] = r.g.constant(x[b]);
  r.out = m.forward(r.bind, in, mode);
  r.g.forward_eval();
}

Var weighted_total(const TrackOutput& o, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Graph& g = *o.sed.graph;
  Var total = sum(mul(o.sed, g.constant(random_tensor(rng, o.sed.shape(), 0.5, 1.5))));
  total = add(total, sum(mul(o.doa, g.constant(random_tensor(rng, o.doa.shape(), 0.5, 1.5)))));
  return add(total, sum(mul(o.dist, g.constant(random_tensor(rng, o.dist.shape(), 0.5, 1.5)))));
}

}  // namespace

TEST_SUITE("model") {
  TEST_CASE("outputs are track-wise with the expected shapes and ranges") {
    const ModelConfig cfg = toy_config();
    Model m(cfg, 1);
    Run r;
    run(r, m, random_inputs(cfg, 2, 24, 2));
    CHECK(r.out.sed.shape() == Shape{2, 3, 3, 2});
    CHECK(r.out.doa.shape() == Shape{2, 3, 3, 3});
    CHECK(r.out.dist.shape() == Shape{2, 3, 3, 1});
    for (double v : r.g.value(r.out.sed).data()) CHECK((v > 0.0 && v < 1.0));
    for (double v : r.g.value(r.out.doa).data()) CHECK((v > -1.0 && v < 1.0));
    for (double v : r.g.value(r.out.dist).data()) CHECK(v >= 0.0);
  }

  TEST_CASE("SDE branch takes seven channels when intensity vectors are enabled") {
    ModelConfig cfg = toy_config();
    cfg.sde_use_ivs = true;
    Model m(cfg, 1);
    CHECK(m.stage(2, 0).first.weight->value.shape() == Shape{2, 7, 3, 3});
    Run r;
    run(r, m, random_inputs(cfg, 1, 16, 3));
    CHECK(r.out.dist.shape() == Shape{1, 3, 2, 1});
  }

  TEST_CASE("parameter count of a toy configuration matches a hand count") {
    // Encoder, per stage: 9 C_in C_out + 9 C_out^2 + 4 C_out (two BN affine pairs).
    //   SED / SDE (4 in): 116 + 80 + 80 + 752 = 1028, DoA (7 in): 170 + 80 + 80 + 752 = 1082.
    // Cross-stitch: 4 x 9 = 36.
    // Mamba layer (D 8, E 16, N 4, K 4, R 1):
    //   in 144, gate 144, conv 80, a_log 64, dt_in 16, dt_proj 32, B 64, C 64, out 136 = 744.
    // BMamba: 4 x 744 + 2 x 8 = 2992, nine blocks = 26928.
    // Heads: 3 x (2 x 8 + 2) + 3 x (3 x 8 + 3) + 3 x (8 + 1) = 162.
    const std::size_t expected = 1028 + 1082 + 1028 + 36 + 26928 + 162;
    CHECK(expected == 30264);
    const ModelConfig cfg = toy_config();
    Model m(cfg, 7);
    CHECK(m.params().trainable_count() == expected);
    CHECK(count_params_macs(cfg, FeatureConfig{}, 1.0).params == expected);
  }

  TEST_CASE("closed-form count agrees with the built model on a wider configuration") {
    ModelConfig cfg;
    cfg.n_classes = 5;
    cfg.conv_channels = {4, 8, 16, 32};
    cfg.d_model = 32;
    cfg.d_state = 8;
    cfg.n_mels = 32;
    cfg.sde_use_ivs = true;
    Model m(cfg, 3);
    CHECK(m.params().trainable_count() == count_params_macs(cfg, FeatureConfig{}, 1.0).params);
  }

  TEST_CASE("default configuration has about 75 million parameters") {
    const Complexity c = count_params_macs(ModelConfig{}, FeatureConfig{}, 1.0);
    CHECK(std::abs(static_cast<double>(c.params) - 75.14e6) / 75.14e6 < 0.01);
    CHECK(c.macs > 0);
  }

  TEST_CASE("toy MAC count matches a hand count") {
    // 1 s at hop 300 is 80 frames, 16 mels; decoder runs at 10 steps.
    // Conv SED: 9(4*2+4)*80*16 + 9(8)*40*8 + 9(8)*20*4 + 9(16+64)*10*2 = 138240+23040+5760+14400 = 181440.
    // Conv DoA: 9(7*2+4)*80*16 + 23040 + 5760 + 14400 = 207360+43200 = 250560.
    // Cross-stitch: 9 * (2*40*8 + 2*20*4 + 2*10*2 + 8*10*1) = 9 * 920 = 8280.
    // Mamba layer per step: 2*16*8 + 16*4 + 2*16*1 + 2*4*16 + 2*16*4 + 8*16 = 256+64+32+128+128+128 = 736.
    // Decoders: 9 blocks * 4 layers * 736 * 10 = 264960. Heads: 3 * (2+3+1) * 8 * 10 = 1440.
    const std::size_t expected = 2 * 181440 + 250560 + 8280 + 264960 + 1440;
    CHECK(count_params_macs(toy_config(), FeatureConfig{}, 1.0).macs == expected);
  }

  TEST_CASE("identity cross-stitch decouples the branches") {
    const ModelConfig cfg = toy_config();
    Model m(cfg, 5);
    for (std::size_t s = 0; s < 4; ++s) {
      Tensor& a = m.stitch(s).value;
      a.fill(0.0);
      for (std::size_t i = 0; i < 3; ++i) a[i * 3 + i] = 1.0;
    }
    auto base = random_inputs(cfg, 2, 16, 9);
    auto moved = base;
    std::mt19937_64 rng(11);
    moved[1] = random_tensor(rng, moved[1].shape());
    Run r0, r1;
    run(r0, m, base, BatchNormMode::inference);
    run(r1, m, moved, BatchNormMode::inference);
    CHECK(max_abs_diff(r0.g.value(r0.out.sed), r1.g.value(r1.out.sed)) == 0.0);
    CHECK(max_abs_diff(r0.g.value(r0.out.dist), r1.g.value(r1.out.dist)) == 0.0);
    CHECK(max_abs_diff(r0.g.value(r0.out.doa), r1.g.value(r1.out.doa)) > 1e-6);
  }

  TEST_CASE("default cross-stitch shares information between branches") {
    const ModelConfig cfg = toy_config();
    Model m(cfg, 5);
    auto base = random_inputs(cfg, 2, 16, 9);
    auto moved = base;
    std::mt19937_64 rng(11);
    moved[1] = random_tensor(rng, moved[1].shape());
    Run r0, r1;
    run(r0, m, base, BatchNormMode::inference);
    run(r1, m, moved, BatchNormMode::inference);
    CHECK(max_abs_diff(r0.g.value(r0.out.sed), r1.g.value(r1.out.sed)) > 1e-9);
  }

  TEST_CASE("every learnable parameter receives a gradient") {
    const ModelConfig cfg = toy_config();
    Model m(cfg, 13);
    Graph g;
    Binder bind(g);
    const auto x = random_inputs(cfg, 2, 16, 14);
    const TrackOutput out = m.forward(bind, {g.constant(x[0]), g.constant(x[1]), g.constant(x[2])},
                                      BatchNormMode::training);
    Var total = weighted_total(out, 15);
    g.forward_eval();
    g.backward(total);
    m.params().zero_grad();
    g.accumulate_parameter_grads();
    for (const Parameter& p : m.params().all()) {
      if (!p.trainable) continue;
      double norm = 0.0;
      for (double v : p.grad.data()) norm += v * v;
      INFO(p.name);
      CHECK(norm > 0.0);
    }
  }

  TEST_CASE("construction and forward are deterministic for a seed") {
    const ModelConfig cfg = toy_config();
    Model a(cfg, 21), b(cfg, 21), c(cfg, 22);
    bool differs = false;
    for (std::size_t i = 0; i < a.params().size(); ++i) {
      CHECK(a.params().all()[i].value == b.params().all()[i].value);
      differs = differs || !(a.params().all()[i].value == c.params().all()[i].value);
    }
    CHECK(differs);
    const auto x = random_inputs(cfg, 1, 16, 4);
    Run ra, rb;
    run(ra, a, x);
    run(rb, b, x);
    CHECK(ra.g.value(ra.out.sed) == rb.g.value(rb.out.sed));
    CHECK(ra.g.value(ra.out.dist) == rb.g.value(rb.out.dist));
  }

  TEST_CASE("parameter names follow the module path") {
    Model m(toy_config(), 1);
    for (const char* name :
         {"encoder.sed.stage1.conv1.weight", "encoder.doa.stage4.bn2.running_var", "encoder.stitch3",
          "decoder.sde.track2.fwd.layer1.linear_input.weight", "decoder.doa.track0.rmsnorm_bwd.gain",
          "head.sed.track1.weight", "head.sde.track0.bias", "input.doa.mean"}) {
      INFO(name);
      CHECK(m.params().find(name) != nullptr);
    }
    CHECK(m.params().get("head.sde.track1.bias").value[0] == 1.0);
    CHECK(m.stitch(0).value.at({0, 0}) == doctest::Approx(0.9));
    CHECK(m.stitch(0).value.at({0, 2}) == doctest::Approx(0.05));
    CHECK_FALSE(m.params().get("input.sed.std").trainable);
  }

  TEST_CASE("cross-stitch gradients match finite differences") {
    std::mt19937_64 rng(31);
    const auto f = [](Graph& g, const std::vector<Var>& v) {
      auto y = cross_stitch({v[0], v[1], v[2]}, v[3]);
      std::mt19937_64 w(32);
      Var total = g.constant(Tensor::scalar(0.0));
      for (Var yi : y) total = add(total, sum(mul(mul(yi, yi), g.constant(random_tensor(w, yi.shape(), 0.5, 1.5)))));
      return total;
    };
    for (int trial = 0; trial < 10; ++trial) {
      std::vector<Tensor> point;
      for (int i = 0; i < 3; ++i) point.push_back(random_tensor(rng, {2, 3, 4, 2}));
      point.push_back(random_tensor(rng, {3, 3}));
      CHECK(finite_diff_check(f, point) < 1e-4);
    }
  }

  TEST_CASE("cross-stitch computes the documented linear combination") {
    Graph g;
    Var a = g.constant(Tensor({2}, {1.0, 2.0}));
    Var b = g.constant(Tensor({2}, {10.0, 20.0}));
    Var c = g.constant(Tensor({2}, {100.0, 200.0}));
    Var alpha = g.constant(Tensor({3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9}));
    auto y = cross_stitch({a, b, c}, alpha);
    g.forward_eval();
    CHECK(g.value(y[0]) == Tensor({2}, {321.0, 642.0}));
    CHECK(g.value(y[1]) == Tensor({2}, {654.0, 1308.0}));
    CHECK(g.value(y[2]) == Tensor({2}, {987.0, 1974.0}));
  }

  TEST_CASE("dual conv stage pools time and frequency or frequency only") {
    ModelConfig cfg = toy_config();
    Model m(cfg, 1);
    Graph g;
    Binder bind(g);
    std::mt19937_64 rng(3);
    Var x = g.constant(random_tensor(rng, {1, 4, 8, 16}));
    CHECK(dual_conv_stage(bind, x, m.stage(0, 0), Pool::tf, BatchNormMode::training).shape() == Shape{1, 2, 4, 8});
    CHECK(dual_conv_stage(bind, x, m.stage(0, 0), Pool::f, BatchNormMode::training).shape() == Shape{1, 2, 8, 8});
  }

  TEST_CASE("input standardization uses per channel and bin statistics") {
    const ModelConfig cfg = toy_config();
    Model m(cfg, 1);
    Tensor mean({4, 16}), sd({4, 16});
    for (std::size_t i = 0; i < mean.size(); ++i) {
      mean[i] = static_cast<double>(i);
      sd[i] = 2.0 + static_cast<double>(i % 3);
    }
    m.set_input_stats(0, mean, sd);
    Tensor x({2, 4, 3, 16}, 5.0);
    const Tensor y = m.normalize_input(0, x);
    CHECK(y.at({1, 2, 1, 7}) == doctest::Approx((5.0 - mean.at({2, 7})) / sd.at({2, 7})));
    CHECK_THROWS_AS(m.set_input_stats(1, mean, sd), std::invalid_argument);
    sd[0] = 0.0;
    CHECK_THROWS_AS(m.set_input_stats(0, mean, sd), std::invalid_argument);
  }

  TEST_CASE("invalid configurations and inputs are rejected") {
    ModelConfig cfg = toy_config();
    cfg.d_model = 4;
    CHECK_THROWS_WITH_AS(Model(cfg, 1), doctest::Contains("d_model"), std::invalid_argument);
    cfg = toy_config();
    cfg.n_mels = 24;
    CHECK_THROWS_AS(Model(cfg, 1), std::invalid_argument);
    Model m(toy_config(), 1);
    auto x = random_inputs(toy_config(), 1, 12, 1);
    Run r;
    CHECK_THROWS_AS(run(r, m, x), std::invalid_argument);
  }

  TEST_CASE("stacked features gain a batch axis") {
    BranchFeatures a{Tensor({4, 8, 16}, 1.0), Tensor({7, 8, 16}, 2.0), Tensor({4, 8, 16}, 3.0)};
    BranchFeatures b{Tensor({4, 8, 16}, 4.0), Tensor({7, 8, 16}, 5.0), Tensor({4, 8, 16}, 6.0)};
    auto s = stack_features({&a, &b});
    CHECK(s[1].shape() == Shape{2, 7, 8, 16});
    CHECK(s[1].at({1, 6, 7, 15}) == 5.0);
    CHECK(s[2].at({0, 0, 0, 0}) == 3.0);
  }
}
