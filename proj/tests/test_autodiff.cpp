#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>

#include "doctest.h"
#include "seld/container.hpp"
#include "seld/gradcheck.hpp"
#include "seld/ops.hpp"
#include "test_util.hpp"

using namespace seld;
using seld::testing::random_away_from_zero;
using seld::testing::random_tensor;

namespace {

// Scalarizes an arbitrary output with fixed random weights so that every
// output coordinate contributes with an O(1) coefficient.
Var weighted_sum(Var y, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto w = y.graph->constant(random_tensor(rng, y.shape(), 0.5, 1.5));
  return sum(mul(y, w));
}

double check_unary(Var (*op)(Var), Tensor point) {
  return finite_diff_check([op](Graph&, const std::vector<Var>& v) { return weighted_sum(op(v[0]), 7); },
                           {std::move(point)});
}

}  // namespace

TEST_CASE("forward_eval: elementwise add") {
  Graph g;
  auto a = g.input("a", {2});
  auto b = g.input("b", {2});
  auto y = add(a, b);
  auto out = g.forward_eval({{"a", Tensor({2}, {1, 2})}, {"b", Tensor({2}, {3, 4})}}, {{"y", y}});
  CHECK(out["y"] == Tensor({2}, {4, 6}));
}

TEST_CASE("forward_eval: matmul of zeros") {
  Graph g;
  auto a = g.constant(Tensor({2, 3}, 0.0));
  auto b = g.constant(Tensor({3, 1}, 0.0));
  auto y = matmul(a, b);
  g.forward_eval();
  CHECK(g.value(y) == Tensor({2, 1}, 0.0));
}

TEST_CASE("forward_eval: silu at zero") {
  Graph g;
  auto y = silu(g.constant(Tensor::scalar(0.0)));
  g.forward_eval();
  CHECK(g.value(y).item() == 0.0);
}

TEST_CASE("shape mismatch names the primitive and both shapes") {
  Graph g;
  auto a = g.constant(Tensor({2, 3}));
  auto b = g.constant(Tensor({3, 2}));
  try {
    add(a, b);
    FAIL("expected throw");
  } catch (const std::invalid_argument& e) {
    std::string msg = e.what();
    CHECK(msg.find("add") != std::string::npos);
    CHECK(msg.find("(2,3)") != std::string::npos);
    CHECK(msg.find("(3,2)") != std::string::npos);
  }
  CHECK_THROWS_AS(matmul(a, a), std::invalid_argument);
}

TEST_CASE("unbound input and bound-shape mismatch are rejected") {
  Graph g;
  auto x = g.input("x", {2});
  auto y = scale(x, 2.0);
  (void)y;
  CHECK_THROWS(g.forward_eval());
  CHECK_THROWS(g.forward_eval({{"x", Tensor({3})}}));
  CHECK_THROWS(g.forward_eval({{"nope", Tensor({2})}}));
}

TEST_CASE("backward: square") {
  Graph g;
  auto x = g.variable(Tensor::scalar(3.0));
  auto y = mul(x, x);
  g.forward_eval();
  g.backward(y, Tensor::scalar(1.0));
  CHECK(g.grad(x).item() == doctest::Approx(6.0));
}

TEST_CASE("backward: bilinear sum") {
  Graph g;
  auto a = g.variable(Tensor({2}, {1, 2}));
  auto b = g.variable(Tensor({2}, {3, 4}));
  auto y = sum(mul(a, b));
  g.forward_eval();
  g.backward(y);
  CHECK(g.grad(a) == Tensor({2}, {3, 4}));
  CHECK(g.grad(b) == Tensor({2}, {1, 2}));
}

TEST_CASE("backward errors") {
  Graph g;
  auto x = g.variable(Tensor({2}, 1.0));
  auto y = scale(x, 2.0);
  CHECK_THROWS_AS(g.backward(y, Tensor({2}, 1.0)), std::logic_error);
  g.forward_eval();
  CHECK_THROWS_AS(g.backward(y, Tensor({3}, 1.0)), std::invalid_argument);
  CHECK_THROWS_AS(g.backward(y), std::invalid_argument);
}

TEST_CASE("non-grad leaves stay untouched") {
  Graph g;
  auto x = g.variable(Tensor({2}, 1.0), true);
  auto c = g.variable(Tensor({2}, 2.0), false);
  auto y = sum(mul(x, c));
  g.forward_eval();
  g.backward(y);
  CHECK_THROWS(g.grad(c));
  CHECK(g.grad(x) == Tensor({2}, 2.0));
}

TEST_CASE("finite_diff_check: sum of squares is exact up to rounding") {
  auto f = [](Graph&, const std::vector<Var>& v) { return sum(mul(v[0], v[0])); };
  CHECK(finite_diff_check(f, {Tensor({3}, {1, 2, 3})}, 1e-5) < 1e-7);
}

TEST_CASE("finite_diff_check: preconditions") {
  auto f = [](Graph&, const std::vector<Var>& v) { return v[0]; };
  CHECK_THROWS(finite_diff_check(f, {Tensor({3}, 1.0)}));
  auto s = [](Graph&, const std::vector<Var>& v) { return sum(v[0]); };
  CHECK_THROWS(finite_diff_check(s, {Tensor({3}, 1.0)}, 0.0));
  CHECK_THROWS(finite_diff_check(s, {Tensor({3}, 1.0)}, 0.1));
}

TEST_CASE("gradient accumulation is linear across graph copies") {
  std::mt19937_64 rng(3);
  Tensor p = random_tensor(rng, {4});
  auto body = [](Var x) { return sum(mul(tanh(x), silu(x))); };
  Graph g1;
  auto x1 = g1.variable(p);
  auto y1 = body(x1);
  g1.forward_eval();
  g1.backward(y1);
  Graph g2;
  auto x2 = g2.variable(p);
  auto y2 = add(body(x2), body(x2));
  g2.forward_eval();
  g2.backward(y2);
  for (std::size_t i = 0; i < 4; ++i) CHECK(g2.grad(x2)[i] == doctest::Approx(2.0 * g1.grad(x1)[i]).epsilon(1e-14));
}

TEST_CASE("leaf gradients accumulate until zero_grad") {
  Graph g;
  auto x = g.variable(Tensor({2}, {1, 2}));
  auto y = sum(scale(x, 3.0));
  g.forward_eval();
  g.backward(y);
  g.backward(y);
  CHECK(g.grad(x) == Tensor({2}, 6.0));
  g.zero_grad();
  g.backward(y);
  CHECK(g.grad(x) == Tensor({2}, 3.0));
}

TEST_CASE("parameters are shared leaves") {
  ParameterStore store;
  auto& p = store.add("w", Tensor({2}, {1, 2}));
  Graph g;
  auto w = g.parameter(p);
  auto y = sum(mul(w, w));
  g.forward_eval();
  CHECK(g.value(y).item() == 5.0);
  p.value = Tensor({2}, {2, 2});
  g.forward_eval();
  CHECK(g.value(y).item() == 8.0);
  g.backward(y);
  g.accumulate_parameter_grads();
  CHECK(p.grad == Tensor({2}, 4.0));
  CHECK(store.trainable_count() == 2);
  CHECK_THROWS(store.add("w", Tensor({1})));
}

TEST_CASE("flip is an exact involution") {
  std::mt19937_64 rng(11);
  for (std::size_t axis = 0; axis < 3; ++axis) {
    Graph g;
    auto x = g.constant(random_tensor(rng, {3, 4, 5}));
    auto y = flip(flip(x, axis), axis);
    g.forward_eval();
    CHECK(g.value(y) == g.value(x));
  }
}

TEST_CASE("shape primitives forward values") {
  Graph g;
  Tensor t({2, 3}, {0, 1, 2, 3, 4, 5});
  auto x = g.constant(t);
  auto tr = transpose(x, {1, 0});
  auto fl = flip(x, 1);
  auto sl = slice(x, 1, 1, 2);
  auto cc = concat({x, x}, 0);
  auto sa = sum_axis(x, 0);
  auto ma = mean_axis(x, 1);
  g.forward_eval();
  CHECK(g.value(tr) == Tensor({3, 2}, {0, 3, 1, 4, 2, 5}));
  CHECK(g.value(fl) == Tensor({2, 3}, {2, 1, 0, 5, 4, 3}));
  CHECK(g.value(sl) == Tensor({2, 2}, {1, 2, 4, 5}));
  CHECK(g.value(cc).shape() == Shape{4, 3});
  CHECK(g.value(sa) == Tensor({3}, {3, 5, 7}));
  CHECK(g.value(ma) == Tensor({2}, {1, 4}));
  CHECK_THROWS(slice(x, 1, 2, 2));
  CHECK_THROWS(avg_pool2d(g.constant(Tensor({1, 1, 3, 4})), 2, 2));
}

TEST_CASE("causal conv1d only looks backward") {
  Graph g;
  Tensor x({1, 1, 5}, {1, 0, 0, 0, 0});
  auto xv = g.constant(x);
  auto w = g.constant(Tensor({1, 1, 3}, {0.5, 0.25, 1.0}));
  auto y = conv1d(xv, w, std::nullopt, 1, true);
  g.forward_eval();
  // y[t] = w0 x[t-2] + w1 x[t-1] + w2 x[t]
  CHECK(g.value(y) == Tensor({1, 1, 5}, {1.0, 0.25, 0.5, 0, 0}));
}

TEST_CASE("conv2d with identity kernel reproduces the input") {
  std::mt19937_64 rng(5);
  Graph g;
  auto x = g.constant(random_tensor(rng, {2, 1, 4, 5}));
  Tensor k({1, 1, 3, 3}, 0.0);
  k.at({0, 0, 1, 1}) = 1.0;
  auto y = conv2d(x, g.constant(k), std::nullopt);
  g.forward_eval();
  CHECK(g.value(y) == g.value(x));
}

// Every primitive at 10 random points, 64-bit, central differences.
TEST_CASE("gradient suite: primitive catalog") {
  std::mt19937_64 rng(2024);
  const double tol = 1e-4;
  for (int trial = 0; trial < 10; ++trial) {
    CAPTURE(trial);
    CHECK(check_unary(sigmoid, random_tensor(rng, {6}, -3, 3)) < tol);
    CHECK(check_unary(silu, random_tensor(rng, {6}, -3, 3)) < tol);
    CHECK(check_unary(softplus, random_tensor(rng, {6}, -3, 3)) < tol);
    CHECK(check_unary(exp, random_tensor(rng, {6}, -2, 2)) < tol);
    CHECK(check_unary(tanh, random_tensor(rng, {6}, -2, 2)) < tol);
    CHECK(check_unary(relu, random_away_from_zero(rng, {6}, 1e-2, 2)) < tol);

    auto a = random_tensor(rng, {2, 3});
    auto b = random_tensor(rng, {2, 3});
    auto s = random_tensor(rng, {1});
    auto binary = [&](Var (*op)(Var, Var), const Tensor& l, const Tensor& r) {
      return finite_diff_check([op](Graph&, const std::vector<Var>& v) { return weighted_sum(op(v[0], v[1]), 9); },
                               {l, r});
    };
    CHECK(binary(add, a, b) < tol);
    CHECK(binary(sub, a, b) < tol);
    CHECK(binary(mul, a, b) < tol);
    CHECK(binary(mul, s, b) < tol);
    CHECK(binary(add, a, s) < tol);
    CHECK(binary(matmul, random_tensor(rng, {3, 4}), random_tensor(rng, {4, 2})) < tol);

    CHECK(finite_diff_check(
              [](Graph&, const std::vector<Var>& v) { return weighted_sum(linear(v[0], v[1], v[2]), 1); },
              {random_tensor(rng, {2, 3, 4}), random_tensor(rng, {5, 4}), random_tensor(rng, {5})}) < tol);
    CHECK(finite_diff_check(
              [](Graph&, const std::vector<Var>& v) { return weighted_sum(conv1d(v[0], v[1], v[2], 3, true), 2); },
              {random_tensor(rng, {2, 3, 6}), random_tensor(rng, {3, 1, 4}), random_tensor(rng, {3})}) < tol);
    CHECK(finite_diff_check(
              [](Graph&, const std::vector<Var>& v) { return weighted_sum(conv1d(v[0], v[1], v[2], 1, false), 3); },
              {random_tensor(rng, {2, 2, 5}), random_tensor(rng, {4, 2, 3}), random_tensor(rng, {4})}) < tol);
    CHECK(finite_diff_check(
              [](Graph&, const std::vector<Var>& v) { return weighted_sum(conv2d(v[0], v[1], v[2]), 4); },
              {random_tensor(rng, {2, 2, 4, 5}), random_tensor(rng, {3, 2, 3, 3}), random_tensor(rng, {3})}) < tol);
    CHECK(finite_diff_check(
              [](Graph&, const std::vector<Var>& v) { return weighted_sum(avg_pool2d(v[0], 2, 2), 5); },
              {random_tensor(rng, {1, 2, 4, 6})}) < tol);
    CHECK(finite_diff_check([](Graph&, const std::vector<Var>& v) { return mean(mul(v[0], v[0])); },
                            {random_tensor(rng, {3, 2})}) < tol);
    CHECK(finite_diff_check(
              [](Graph&, const std::vector<Var>& v) { return weighted_sum(mean_axis(v[0], 1), 6); },
              {random_tensor(rng, {2, 3, 4})}) < tol);
    CHECK(finite_diff_check(
              [](Graph&, const std::vector<Var>& v) { return weighted_sum(sum_axis(v[0], 2), 6); },
              {random_tensor(rng, {2, 3, 4})}) < tol);
    CHECK(finite_diff_check(
              [](Graph&, const std::vector<Var>& v) {
                return weighted_sum(transpose(reshape(v[0], {2, 3, 2}), {2, 0, 1}), 8);
              },
              {random_tensor(rng, {3, 4})}) < tol);
    CHECK(finite_diff_check([](Graph&, const std::vector<Var>& v) { return weighted_sum(flip(v[0], 1), 10); },
                            {random_tensor(rng, {2, 5})}) < tol);
    CHECK(finite_diff_check(
              [](Graph&, const std::vector<Var>& v) {
                return weighted_sum(concat({slice(v[0], 1, 1, 3), v[1]}, 1), 12);
              },
              {random_tensor(rng, {2, 5}), random_tensor(rng, {2, 2})}) < tol);
    auto bn = [](BatchNormMode mode) {
      return [mode](Graph& g, const std::vector<Var>& v) {
        if (mode == BatchNormMode::training) return weighted_sum(batch_norm(v[0], v[1], v[2], mode), 13);
        // Inference mode reads fixed statistics from buffers.
        static ParameterStore stats;
        if (!stats.find("m")) {
          stats.add("m", Tensor({2}, {0.1, -0.2}), false);
          stats.add("v", Tensor({2}, {0.5, 2.0}), false);
        }
        (void)g;
        return weighted_sum(
            batch_norm(v[0], v[1], v[2], mode, BatchNormBuffers{&stats.get("m"), &stats.get("v"), 0.1}), 13);
      };
    };
    CHECK(finite_diff_check(bn(BatchNormMode::training),
                            {random_tensor(rng, {3, 2, 2, 3}), random_tensor(rng, {2}, 0.5, 1.5),
                             random_tensor(rng, {2})}) < tol);
    CHECK(finite_diff_check(bn(BatchNormMode::inference),
                            {random_tensor(rng, {3, 2, 2, 3}), random_tensor(rng, {2}, 0.5, 1.5),
                             random_tensor(rng, {2})}) < tol);
  }
}

TEST_CASE("batch norm training mode updates running statistics") {
  ParameterStore store;
  auto& m = store.add("m", Tensor({1}, 0.0), false);
  auto& v = store.add("v", Tensor({1}, 1.0), false);
  Graph g;
  auto x = g.constant(Tensor({4, 1}, {1, 2, 3, 4}));
  auto y = batch_norm(x, g.constant(Tensor({1}, 1.0)), g.constant(Tensor({1}, 0.0)), BatchNormMode::training,
                      BatchNormBuffers{&m, &v, 0.5});
  g.forward_eval();
  CHECK(m.value[0] == doctest::Approx(1.25));
  // unbiased variance of 1..4 is 5/3
  CHECK(v.value[0] == doctest::Approx(0.5 + 0.5 * 5.0 / 3.0));
  double s = 0.0;
  for (auto e : g.value(y).data()) s += e;
  CHECK(s == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("container round trip is bit exact") {
  std::mt19937_64 rng(99);
  Container c;
  c.set_meta("kind", "checkpoint");
  c.set_meta("note", "a b=c");
  Tensor a = random_tensor(rng, {3, 4}, -1e10, 1e10);
  a[0] = -0.0;
  a[1] = 5e-324;
  c.put("encoder.sed.stage1.conv1.weight", a);
  c.put("b", Tensor({1}, {1.0 / 3.0}));
  auto path = std::filesystem::temp_directory_path() / "seld_container_test.bin";
  write_container(path, c);
  auto r = read_container(path);
  CHECK(r.meta("kind") == "checkpoint");
  CHECK(r.meta("note") == "a b=c");
  CHECK(r.get("b") == c.get("b"));
  const auto& ra = r.get("encoder.sed.stage1.conv1.weight");
  REQUIRE(ra.shape() == a.shape());
  CHECK(std::memcmp(ra.ptr(), a.ptr(), a.size() * sizeof(double)) == 0);
  CHECK(r.manifest() == c.manifest());
  std::filesystem::remove(path);
}

TEST_CASE("container rejects garbage") {
  auto path = std::filesystem::temp_directory_path() / "seld_container_bad.bin";
  {
    std::ofstream(path) << "not a container\n";
  }
  CHECK_THROWS(read_container(path));
  CHECK_THROWS(read_container(std::filesystem::temp_directory_path() / "does_not_exist.bin"));
  std::filesystem::remove(path);
}
