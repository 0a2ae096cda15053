#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "detrend/autograd.hpp"
#include "detrend/cell_check.hpp"
#include "detrend/cells.hpp"
#include "detrend/gradcheck.hpp"
#include "detrend/prng.hpp"

using namespace detrend;

TEST_CASE("gradient of sum is ones") {
  ag::Tape tape;
  Prng prng(1);
  ag::Var x = tape.parameter("x", gaussian_init(prng, {2, 3}, 1.0));
  tape.backward(ag::sum(x));
  for (double g : tape.grad(x)->data()) CHECK(g == 1.0);
}

TEST_CASE("sigmoid derivative at zero is 0.25") {
  ag::Tape tape;
  ag::Var w = tape.parameter("w", Tensor({1, 1}, {0.0}));
  ag::Var x = tape.constant(Tensor({1, 1}, {1.5}));
  tape.backward(ag::sum(ag::sigmoid(ag::matmul(x, w))));
  CHECK(tape.grad(w)->values()[0] == doctest::Approx(0.25 * 1.5).epsilon(1e-15));
}

TEST_CASE("unreached parameters get zero gradients") {
  ag::Tape tape;
  ag::Var a = tape.parameter("a", Tensor({2}, {1, 2}));
  tape.parameter("b", Tensor({3}, {1, 2, 3}));
  tape.backward(ag::sum(a));
  auto grads = tape.parameter_grads();
  CHECK(grads.at("b").values() == std::vector<double>{0, 0, 0});
}

TEST_CASE("softmax cross entropy gradient is p - onehot") {
  ag::Tape tape;
  ag::Var z = tape.parameter("z", Tensor({1, 3}, {0.2, -0.4, 1.0}));
  tape.backward(ag::softmax_cross_entropy(z, {2}, {1.0}));
  const double e0 = std::exp(0.2), e1 = std::exp(-0.4), e2 = std::exp(1.0), s = e0 + e1 + e2;
  const auto& g = tape.grad(z)->values();
  CHECK(g[0] == doctest::Approx(e0 / s));
  CHECK(g[1] == doctest::Approx(e1 / s));
  CHECK(g[2] == doctest::Approx(e2 / s - 1.0));
}

TEST_CASE("quadratic loss on a dense layer") {
  Prng prng(2);
  const Tensor x = gaussian_init(prng, {4, 3}, 1.0);
  ag::ParamSet p{{"W", gaussian_init(prng, {3, 2}, 1.0)}, {"b", gaussian_init(prng, {2}, 1.0)}};
  auto loss = [&](ag::Tape& tape, const ag::VarMap& v) {
    ag::Var y = ag::add_bias(ag::matmul(tape.constant(x), v.at("W")), v.at("b"));
    return ag::sum(ag::mul(y, y));
  };
  GradReport r = gradcheck(loss, p, 1e-4, 1e-9);
  CHECK(r.pass);
  CHECK(r.worst() < 1e-9);
}

TEST_CASE("three-step scalar GRU chain") {
  CellConfig c;
  c.kind = CellKind::gru;
  c.input_size = 1;
  c.hidden_size = 1;
  RecurrentCell cell(c);
  Prng prng(4);
  ag::ParamSet p = cell.init_params(prng, 0.8);
  for (auto& [_, t] : p) t[0] += 0.3 * prng.normal();
  std::vector<Tensor> xs;
  for (int t = 0; t < 3; ++t) xs.push_back(gaussian_init(prng, {1, 1}, 1.0));
  auto loss = [&](ag::Tape& tape, const ag::VarMap& v) {
    CellNormState st;
    std::vector<ag::Var> in;
    for (const auto& x : xs) in.push_back(tape.constant(x));
    return ag::sum(run_sequence(cell, v, in, st, norm::Mode::train).final_h);
  };
  GradReport r = gradcheck(loss, p, 1e-4, 1e-6);
  CHECK(r.pass);
  CHECK(r.worst() < 1e-6);
}

TEST_CASE("two-layer GRU with detrending, T = 5") {
  CellConfig c1;
  c1.kind = CellKind::gru;
  c1.norm = NormMethod::ad;
  c1.input_size = 2;
  c1.hidden_size = 3;
  CellConfig c2 = c1;
  c2.input_size = 3;
  c2.hidden_size = 2;
  RecurrentCell l1(c1), l2(c2);
  Prng prng(8);
  ag::ParamSet p;
  for (auto& [k, t] : l1.init_params(prng, 0.5)) p.emplace("l1." + k, t);
  for (auto& [k, t] : l2.init_params(prng, 0.5)) p.emplace("l2." + k, t);
  std::vector<Tensor> xs;
  for (int t = 0; t < 5; ++t) xs.push_back(gaussian_init(prng, {2, 2}, 1.0));
  const Tensor coeff = gaussian_init(prng, {2, 2}, 1.0);
  auto loss = [&](ag::Tape& tape, const ag::VarMap& v) {
    CellNormState s1, s2;
    std::vector<ag::Var> in;
    for (const auto& x : xs) in.push_back(tape.constant(x));
    auto lower = run_sequence(l1, scoped(v, "l1."), in, s1, norm::Mode::train);
    auto upper = run_sequence(l2, scoped(v, "l2."), lower.outputs, s2, norm::Mode::train);
    return ag::weighted_sum(upper.outputs.back(), coeff);
  };
  GradReport r = gradcheck(loss, p, 1e-4, 1e-4);
  CHECK(r.pass);
}

TEST_CASE("corrupted adjoints are caught") {
  CellCheckSpec spec;
  spec.kind = CellKind::gru;
  spec.norm = NormMethod::ad;
  GradReport good = cell_gradcheck(spec);
  GradReport bad = cell_gradcheck(spec, 1e-4, 1e-4, true);
  CHECK(good.pass);
  CHECK_FALSE(bad.pass);
  CHECK(bad.worst() > 1e-4);
}

TEST_CASE("relative error") {
  CHECK(relative_error(1.0, 1.0) == 0.0);
  CHECK(relative_error(2.0, 1.0) == 0.5);
  CHECK(relative_error(0.0, 0.0) == 0.0);
  CHECK(relative_error(1e-9, 0.0) == doctest::Approx(0.1));
}

TEST_CASE("tape rejects ops without adjoints on tracked inputs") {
  ag::Tape tape;
  ag::Var a = tape.parameter("a", Tensor({1}, {1.0}));
  CHECK_THROWS_AS(tape.record("bad", Tensor({1}, {1.0}), {a}, nullptr), std::logic_error);
}
