#include <doctest.h>

#include <cmath>

#include "advbyte/error.hpp"
#include "advbyte/graph.hpp"
#include "advbyte/optim.hpp"
#include "advbyte/params.hpp"
#include "fixtures.hpp"

using namespace advbyte;
using namespace advbyte::ad;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  std::uniform_real_distribution<double> u(lo, hi);
  for (auto& v : t.values()) v = u(rng);
  return t;
}

}  // namespace

TEST_CASE("identity and matmul by I") {
  Graph g;
  const Var x = g.input(Tensor::matrix(2, 3, {1, 2, 3, 4, 5, 6}));
  const Var same = identity(g, x);
  CHECK(g.value(same) == g.value(x));
  const Var eye = g.input(Tensor::matrix(2, 2, {1, 0, 0, 1}));
  const Var product = matmul(g, eye, x);
  CHECK(g.value(product) == g.value(x));
}

TEST_CASE("softmax of uniform logits") {
  Graph g;
  const Var p = softmax_rows(g, g.input(Tensor::vector({2.5, 2.5, 2.5, 2.5, 2.5})));
  for (double v : g.value(p).values()) CHECK(v == doctest::Approx(0.2).epsilon(1e-15));
}

TEST_CASE("softmax rows sum to one") {
  Rng rng(5);
  Graph g;
  const Var p = softmax_rows(g, g.input(random_tensor({7, 9}, rng, -40, 40)));
  const Tensor& t = g.value(p);
  for (std::size_t r = 0; r < 7; ++r) {
    double s = 0;
    for (std::size_t c = 0; c < 9; ++c) s += t.at(r, c);
    CHECK(std::abs(s - 1.0) < 1e-9);
  }
}

TEST_CASE("gradient of sum is all ones") {
  Graph g;
  const Var x = g.input(Tensor::matrix(2, 2, {3, -1, 0.5, 7}), true);
  g.backward(sum(g, x));
  for (double v : g.grad(x).values()) CHECK(v == 1.0);
}

TEST_CASE("CE through softmax has gradient p - onehot") {
  Rng rng(8);
  const Tensor z = random_tensor({6}, rng, -3, 3);
  for (std::size_t y = 0; y < 6; ++y) {
    Graph g;
    const Var zv = g.input(z, true);
    const Var p = softmax_rows(g, zv);
    Tensor onehot({6});
    onehot[y] = -1.0;
    const Var loss = dot(g, log(g, p), g.input(onehot));
    g.backward(loss);
    const Tensor& pv = g.value(p);
    for (std::size_t j = 0; j < 6; ++j) {
      CHECK(g.grad(zv)[j] == doctest::Approx(pv[j] - (j == y ? 1.0 : 0.0)).epsilon(1e-12));
    }
  }
}

TEST_CASE("max over rows sends the gradient to the lowest tied row") {
  Graph g;
  const Var x = g.input(Tensor::matrix(3, 2, {1, 5, 4, 5, 4, 2}), true);
  const Var m = max_rows(g, x);
  CHECK(g.value(m) == Tensor::vector({4, 5}));
  g.backward(sum(g, m));
  CHECK(g.grad(x) == Tensor::matrix(3, 2, {0, 1, 1, 0, 0, 0}));
}

TEST_CASE("affine layer passes the finite-difference check") {
  Rng rng(21);
  Tensor x = random_tensor({4, 5}, rng), w = random_tensor({5, 3}, rng), b = random_tensor({3}, rng);
  const Tensor readout = random_tensor({4, 3}, rng);
  auto forward = [&](Graph& g, Var& xv, Var& wv, Var& bv) {
    xv = g.input(x, true);
    wv = g.input(w, true);
    bv = g.input(b, true);
    return sum(g, mul(g, affine(g, xv, wv, bv), g.input(readout)));
  };
  Graph g;
  Var xv, wv, bv;
  g.backward(forward(g, xv, wv, bv));
  const std::vector<Tensor> analytic = {g.grad(xv), g.grad(wv), g.grad(bv)};
  std::vector<Tensor*> inputs = {&x, &w, &b};
  const auto report = grad_check(
      [&] {
        Graph h;
        Var a, c, d;
        return h.value(forward(h, a, c, d)).item();
      },
      inputs, analytic);
  CHECK(report.checked == 4 * 5 + 5 * 3 + 3);
  CHECK(report.max_rel_error < 1e-6);
}

TEST_CASE("random composite graph matches finite differences") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(100 + seed);
    Tensor a = random_tensor({6, 4}, rng), v = random_tensor({4}, rng);
    auto forward = [&](Graph& g, Var& av, Var& vv) {
      av = g.input(a, true);
      vv = g.input(v, true);
      const Var gated = mul(g, sigmoid(g, mul_rowwise(g, av, vv)), relu(g, av));
      const Var pooled = add(g, max_rows(g, gated), mean_rows(g, exp(g, scale(g, av, 0.3))));
      const Var n = l2_normalize_rows(g, reshape(g, pooled, {1, 4}));
      return add(g, sum(g, log(g, softmax_rows(g, n))), l2_norm(g, vv));
    };
    Graph g;
    Var av, vv;
    g.backward(forward(g, av, vv));
    const std::vector<Tensor> analytic = {g.grad(av), g.grad(vv)};
    std::vector<Tensor*> inputs = {&a, &v};
    const auto report = grad_check(
        [&] {
          Graph h;
          Var x, y;
          return h.value(forward(h, x, y)).item();
        },
        inputs, analytic);
    CHECK(report.passed(1e-4));
  }
}

TEST_CASE("non-finite values are errors") {
  Graph g;
  CHECK_THROWS_AS(g.input(Tensor::vector({1.0, NAN})), Error);
  const Var x = g.input(Tensor::vector({-1.0, 2.0}));
  CHECK_THROWS_AS(log(g, x), Error);
  const Var big = g.input(Tensor::vector({800.0}));
  CHECK_THROWS_AS(exp(g, big), Error);
}

TEST_CASE("shape mismatches are errors") {
  Graph g;
  const Var a = g.input(Tensor::matrix(2, 3, {1, 2, 3, 4, 5, 6}));
  const Var b = g.input(Tensor::matrix(2, 2, {1, 2, 3, 4}));
  CHECK_THROWS_AS(add(g, a, b), Error);
  CHECK_THROWS_AS(matmul(g, a, b), Error);
}

TEST_CASE("Adam") {
  ParamSet params;
  params.add("w", Tensor::vector({1.0, -2.0, 0.5}));
  AdamState state({1e-3, 0.9, 0.999, 1e-8}, params, {"w"});

  SUBCASE("zero gradient leaves parameters") {
    ParamSet grads = params.zeros_like();
    const Tensor before = params.at("w");
    adam_step(state, params, grads);
    CHECK(params.at("w") == before);
    CHECK(state.step == 1);
  }
  SUBCASE("first step moves by -lr * sign(g)") {
    ParamSet grads;
    grads.add("w", Tensor::vector({0.3, -7.0, 1e-3}));
    adam_step(state, params, grads);
    CHECK(params.at("w")[0] == doctest::Approx(1.0 - 1e-3).epsilon(1e-6));
    CHECK(params.at("w")[1] == doctest::Approx(-2.0 + 1e-3).epsilon(1e-6));
    CHECK(params.at("w")[2] == doctest::Approx(0.5 - 1e-3).epsilon(1e-4));
  }
  SUBCASE("deterministic") {
    ParamSet p2 = params;
    AdamState s2 = state;
    ParamSet grads;
    grads.add("w", Tensor::vector({0.3, -0.1, 2.0}));
    for (int i = 0; i < 3; ++i) {
      adam_step(state, params, grads);
      adam_step(s2, p2, grads);
    }
    CHECK(params == p2);
  }
  SUBCASE("shape mismatch") {
    ParamSet grads;
    grads.add("w", Tensor::vector({1.0}));
    CHECK_THROWS_AS(adam_step(state, params, grads), Error);
  }
}

TEST_CASE("checkpoint round trip is bit exact") {
  Rng rng(3);
  ParamSet params;
  params.add("a.weight", random_tensor({3, 4}, rng));
  params.add("b", Tensor::scalar(-0.0));
  params.add("c", random_tensor({2, 2, 2}, rng, -1e300, 1e300));
  const auto bytes = serialize_checkpoint(params);
  CHECK(std::string(bytes.begin(), bytes.begin() + 8) == "ADVBCKPT");
  const ParamSet back = deserialize_checkpoint(bytes);
  CHECK(back == params);
  CHECK(std::signbit(back.at("b")[0]));

  const auto path = fixtures::temp_dir("ckpt") / "c.bin";
  save_checkpoint(path, params);
  CHECK(load_checkpoint(path) == params);

  auto truncated = bytes;
  truncated.pop_back();
  CHECK_THROWS_AS(deserialize_checkpoint(truncated), Error);
  auto bad = bytes;
  bad[0] = 'X';
  CHECK_THROWS_AS(deserialize_checkpoint(bad), Error);
  auto trailing = bytes;
  trailing.push_back(0);
  CHECK_THROWS_AS(deserialize_checkpoint(trailing), Error);
}
