#include <cmath>
#include <string>

#include "doctest.h"
#include "ssmlab/autodiff.hpp"
#include "primitive_cases.hpp"
#include "ssmlab/rng.hpp"

using namespace ssmlab;

using namespace ssmlab::testing;

TEST_CASE("forward examples") {
  Tape tape;
  CHECK(softplus(tape.leaf(Tensor::scalar(0.0))).value().item() == doctest::Approx(std::log(2.0)).epsilon(1e-15));
  CHECK(sigmoid(tape.leaf(Tensor::scalar(0.0))).value().item() == 0.5);
  Var m = matmul(tape.leaf(Tensor(Shape{2, 3}, 1.0)), tape.leaf(Tensor(Shape{3, 1}, 1.0)));
  CHECK(m.shape() == Shape{2, 1});
  CHECK(m.value()[0] == 3.0);
  CHECK(m.value()[1] == 3.0);
}

TEST_CASE("shape errors name the primitive and both shapes") {
  Tape tape;
  Var a = tape.leaf(Tensor(Shape{2, 3}));
  Var b = tape.leaf(Tensor(Shape{2, 3}));
  try {
    matmul(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("matmul") != std::string::npos);
    CHECK(msg.find("[2x3] vs [2x3]") != std::string::npos);
  }
  // only leading-dimension broadcasting is allowed
  CHECK_THROWS_AS(a + tape.leaf(Tensor(Shape{2})), ShapeError);
  CHECK_NOTHROW(a + tape.leaf(Tensor(Shape{3})));
}

TEST_CASE("non-finite inputs are rejected") {
  Tape tape;
  Var bad = tape.leaf(Tensor::vector({1.0, std::nan("")}));
  CHECK_THROWS_AS(exp(bad), NonFiniteError);
}

TEST_CASE("gradient examples") {
  SUBCASE("product rule") {
    Tape tape;
    Var x = tape.leaf(Tensor::scalar(2.0));
    Var y = tape.leaf(Tensor::scalar(3.0));
    Var out = x * y;
    const Var params[] = {x, y};
    auto g = gradient(tape, out, params);
    CHECK(g.at(x.id()).item() == 3.0);
    CHECK(g.at(y.id()).item() == 2.0);
  }
  SUBCASE("softplus derivative is sigmoid") {
    Tape tape;
    Var x = tape.leaf(Tensor::scalar(0.0));
    const Var params[] = {x};
    CHECK(gradient(tape, softplus(x), params).at(x.id()).item() == 0.5);
  }
  SUBCASE("scan loss vs central differences, 2 states, 6 steps") {
    Rng rng(17);
    std::vector<Tensor> params = {rng.normal_tensor({6, 3}), rng.normal_tensor({6, 3}),
                                  rng.normal_tensor({3, 2}), rng.normal_tensor({6, 2}),
                                  rng.normal_tensor({6, 2}), rng.normal_tensor({3})};
    ScalarGraph f = [](Tape&, std::span<const Var> v) {
      Var y = selective_scan(v[0], softplus(v[1]), -exp(v[2]), v[3], v[4], v[5]);
      return weighted_sum(y, 99);
    };
    CHECK(finite_diff_check(f, params, 1e-5) <= 1e-4);
  }
}

TEST_CASE("gradient error paths") {
  Tape tape;
  Var x = tape.leaf(Tensor::vector({1.0, 2.0}));
  Var e = exp(x);
  const Var px[] = {x};
  CHECK_THROWS_AS(gradient(tape, e, px), ShapeError);
  const Var pe[] = {e};
  CHECK_THROWS_AS(gradient(tape, sum(e), pe), Error);
  Tape other;
  Var stranger = other.leaf(Tensor::scalar(1.0));
  const Var ps[] = {stranger};
  CHECK_THROWS_AS(gradient(tape, sum(e), ps), Error);
}

TEST_CASE("parameters the output ignores get zero gradients") {
  Tape tape;
  Var x = tape.leaf(Tensor::vector({1.0, 2.0}));
  Var unused = tape.leaf(Tensor(Shape{2, 2}, 7.0));
  Var out = sum(exp(x));
  const Var params[] = {x, unused};
  auto g = gradient(tape, out, params);
  CHECK(g.at(unused.id()) == Tensor(Shape{2, 2}));
}

TEST_CASE("finite_diff_check examples") {
  ScalarGraph square = [](Tape&, std::span<const Var> v) { return sum(v[0] * v[0]); };
  CHECK(finite_diff_check(square, {Tensor::scalar(3.0)}, 1e-5) <= 1e-6);

  Rng rng(3);
  ScalarGraph sig = [](Tape&, std::span<const Var> v) { return sum(sigmoid(matmul(v[0], v[1]))); };
  CHECK(finite_diff_check(sig, {rng.normal_tensor({4, 4}), rng.normal_tensor({4, 1})}, 1e-5) <= 1e-4);

  ScalarGraph constant = [](Tape& tape, std::span<const Var>) { return tape.constant(Tensor::scalar(4.0)); };
  CHECK(finite_diff_check(constant, {Tensor::vector({1.0, 2.0})}, 1e-5) == 0.0);

  CHECK_THROWS_AS(finite_diff_check(square, {Tensor::scalar(3.0)}, 0.0), Error);
}

TEST_CASE("every primitive matches central differences on 100 random instances") {
  const auto cases = primitive_cases();
  double worst = 0.0;
  for (std::uint64_t trial = 0; trial < 100; ++trial) {
    const auto& c = cases[trial % cases.size()];
    Rng rng(1000 + trial);
    const auto inputs = c.inputs(rng);
    ScalarGraph f = [&](Tape&, std::span<const Var> v) { return weighted_sum(c.build(v), trial); };
    const double err = finite_diff_check(f, inputs, 1e-5);
    INFO(c.name << " trial " << trial << " error " << err);
    CHECK(err <= 1e-4);
    worst = std::max(worst, err);
  }
  MESSAGE("worst primitive relative error " << worst);
}

TEST_CASE("grad_scale scales gradients only") {
  Tape tape;
  Var x = tape.leaf(Tensor::vector({0.3, -1.2}));
  Var a = grad_scale(x, 2.0);
  CHECK(a.value() == x.value());
  const Var params[] = {x};
  auto g = gradient(tape, sum(a), params);
  CHECK(g.at(x.id()) == Tensor::vector({2.0, 2.0}));
}

TEST_CASE("tape replay is bit-identical") {
  Rng rng(5);
  Tape tape;
  Var w = tape.leaf(rng.normal_tensor({4, 3}));
  Var x = tape.leaf(rng.normal_tensor({5, 4}));
  Var out = sum(softplus(layer_norm(matmul(x, w))));
  const auto values = tape.replay();
  for (std::size_t i = 0; i < tape.size(); ++i) CHECK(values[i] == tape.value(i));

  // substituting a leaf equals rebuilding with that value
  Tensor w2 = rng.normal_tensor({4, 3});
  const auto replayed = tape.replay({{w.id(), w2}});
  Tape fresh;
  Var out2 = sum(softplus(layer_norm(matmul(fresh.leaf(x.value()), fresh.leaf(w2)))));
  CHECK(replayed[out.id()] == out2.value());
}

TEST_CASE("non-recording tapes keep values but not graph structure") {
  Tape tape;
  tape.set_recording(false);
  Var x = tape.leaf(Tensor::scalar(1.0));
  Var y = exp(x);
  CHECK(y.value().item() == doctest::Approx(std::exp(1.0)));
  CHECK(tape.op(y.id()) == Op::kConstant);
  const Var params[] = {x};
  CHECK(gradient(tape, y, params).at(x.id()).item() == 0.0);
}

TEST_CASE("gradients are linear in the objective") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(seed);
    const Tensor w0 = rng.normal_tensor({3, 3});
    const Tensor x0 = rng.normal_tensor({4, 3});
    const double a = rng.uniform(-2, 2);
    const double b = rng.uniform(-2, 2);
    auto grad_of = [&](auto build) {
      Tape tape;
      Var w = tape.leaf(w0);
      Var x = tape.leaf(x0);
      Var out = build(w, x);
      const Var params[] = {w};
      return gradient(tape, out, params).at(w.id());
    };
    auto f = [](Var w, Var x) { return sum(sigmoid(matmul(x, w))); };
    auto h = [](Var w, Var x) { return mean(softplus(matmul(x, w)) * matmul(x, w)); };
    const Tensor gf = grad_of(f);
    const Tensor gh = grad_of(h);
    const Tensor gc = grad_of([&](Var w, Var x) { return scale(f(w, x), a) + scale(h(w, x), b); });
    for (std::size_t i = 0; i < gc.size(); ++i) CHECK(std::abs(gc[i] - (a * gf[i] + b * gh[i])) <= 1e-10);
  }
}
