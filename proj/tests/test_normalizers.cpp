#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "detrend/gradcheck.hpp"
#include "detrend/normalizers.hpp"
#include "detrend/prng.hpp"

using namespace detrend;
using namespace detrend::norm;

TEST_CASE("batch norm of {1, 3}") {
  Tensor x({2, 1}, {1.0, 3.0});
  auto r = bn_forward(x, AffineParams::identity(1, true), nullptr, Mode::train, {}, 0);
  const double s = 1.0 / std::sqrt(1.0 + kEpsilon);
  CHECK(r.mean[0] == 2.0);
  CHECK(r.output[0] == doctest::Approx(-s).epsilon(1e-15));
  CHECK(r.output[1] == doctest::Approx(s).epsilon(1e-15));

  AffineParams a{Tensor({1}, {2.0}), Tensor({1}, {1.0})};
  auto q = bn_forward(x, a, nullptr, Mode::train, {}, 0);
  CHECK(q.output[0] == doctest::Approx(1.0 - 2.0 * s));
  CHECK(q.output[1] == doctest::Approx(1.0 + 2.0 * s));
}

TEST_CASE("batch norm of a constant batch returns beta") {
  Tensor x = Tensor::filled({4, 2, 3, 3}, 0.7);
  AffineParams a{Tensor::filled({2}, 1.0), Tensor({2}, {0.25, -2.0})};
  auto r = bn_forward(x, a, nullptr, Mode::train, {}, 0);
  for (std::size_t i = 0; i < r.output.size(); ++i) {
    const std::size_t c = (i / 9) % 2;
    CHECK(r.output[i] == doctest::Approx(c == 0 ? 0.25 : -2.0).epsilon(1e-9));
  }
}

TEST_CASE("batch norm excludes padded samples") {
  Tensor x({3, 1}, {1.0, 3.0, 100.0});
  auto r = bn_forward(x, AffineParams::identity(1, true), nullptr, Mode::train, {1, 1, 0}, 0);
  CHECK(r.mean[0] == 2.0);
  CHECK(r.output[2] == 0.0);
  CHECK_THROWS(bn_forward(x, AffineParams::identity(1, true), nullptr, Mode::train, {1, 0, 0}, 0));
}

TEST_CASE("running statistics per timestep") {
  BnRunningStats st(1);
  Tensor x({2, 1}, {1.0, 3.0});
  CHECK_THROWS(bn_forward(x, AffineParams::identity(1, true), &st, Mode::eval, {}, 0));
  bn_forward(x, AffineParams::identity(1, true), &st, Mode::train, {}, 0);
  REQUIRE(st.initialized(0));
  // Starts from mean 0, variance 1 and blends with momentum 0.1.
  CHECK(st.mean(0)[0] == doctest::Approx(0.1 * 2.0));
  bn_forward(Tensor({2, 1}, {3.0, 5.0}), AffineParams::identity(1, true), &st, Mode::train, {}, 0);
  CHECK(st.mean(0)[0] == doctest::Approx(0.9 * 0.2 + 0.1 * 4.0));
  CHECK(st.count(0) == 4);
  // Later timesteps reuse the last entry.
  auto e = bn_forward(Tensor({1, 1}, {2.2}), AffineParams::identity(1, true), &st, Mode::eval, {}, 5);
  const double expect = (2.2 - st.mean(0)[0]) / std::sqrt(st.var(0)[0] + kEpsilon);
  CHECK(e.output[0] == doctest::Approx(expect));
}

TEST_CASE("layer norm of {0, 2, 4}") {
  Tensor x({1, 3}, {0.0, 2.0, 4.0});
  auto r = ln_forward(x, AffineParams::identity(3, true));
  const double s = 2.0 / std::sqrt(8.0 / 3.0 + kEpsilon);
  CHECK(r.output[0] == doctest::Approx(-s).epsilon(1e-15));
  CHECK(r.output[1] == 0.0);
  CHECK(r.output[2] == doctest::Approx(s).epsilon(1e-15));
  CHECK(s == doctest::Approx(1.2247).epsilon(1e-4));
}

TEST_CASE("layer norm of a constant layer returns beta") {
  AffineParams a{Tensor::filled({3}, 1.0), Tensor({3}, {0.5, 0.5, 0.5})};
  const Tensor out = ln_forward(Tensor::filled({1, 3}, 4.0), a).output;
  for (double v : out.data()) CHECK(v == doctest::Approx(0.5).epsilon(1e-9));
}

TEST_CASE("layer norm is shift invariant") {
  Prng prng(3);
  Tensor x = gaussian_init(prng, {2, 3, 2, 2}, 1.0);
  Tensor shifted = x;
  for (auto& v : shifted.data()) v += 3.5;
  auto a = ln_forward(x, AffineParams::identity(3, true));
  auto b = ln_forward(shifted, AffineParams::identity(3, true));
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(a.output[i] == doctest::Approx(b.output[i]).epsilon(1e-9));
}

TEST_CASE("ema recursion") {
  const std::vector<double> ones{1, 1, 1};
  CHECK(ema(ones, 0.5, 0.0) == std::vector<double>{0.5, 0.75, 0.875});
  const std::vector<double> x{0.3, -1.0, 2.0};
  CHECK(ema(x, 1.0, 5.0) == x);
  CHECK(ema(x, 0.0, 5.0) == std::vector<double>{5.0, 5.0, 5.0});
  CHECK_THROWS(ema(x, 1.5, 0.0));
}

TEST_CASE("differentiable batch and layer norm gradients") {
  Prng prng(7);
  const Tensor x = gaussian_init(prng, {4, 3, 2, 2}, 1.0);
  const Tensor c = gaussian_init(prng, {4, 3, 2, 2}, 1.0);
  const ag::RowMask valid{1, 1, 0, 1};
  ag::ParamSet p{{"x", x},
                 {"gamma", gaussian_init(prng, {3}, 1.0)},
                 {"beta", gaussian_init(prng, {3}, 1.0)}};
  auto bn = [&](ag::Tape&, const ag::VarMap& v) {
    BnRunningStats st(3);
    return ag::weighted_sum(batch_norm(v.at("x"), v.at("gamma"), v.at("beta"), st, Mode::train, valid, 0), c);
  };
  CHECK(gradcheck(bn, p).pass);
  auto ln = [&](ag::Tape&, const ag::VarMap& v) {
    return ag::weighted_sum(layer_norm(v.at("x"), v.at("gamma"), v.at("beta")), c);
  };
  CHECK(gradcheck(ln, p).pass);
}

TEST_CASE("affine identity initialization") {
  auto a = AffineParams::identity(4, true, -2.0);
  for (double g : a.gamma.data()) CHECK(g == 1.0);
  REQUIRE(a.beta);
  for (double b : a.beta->data()) CHECK(b == -2.0);
  CHECK_FALSE(AffineParams::identity(4, false).beta.has_value());
}
