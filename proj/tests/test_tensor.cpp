#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <limits>

#include "detrend/prng.hpp"
#include "detrend/tensor.hpp"
#include "test_util.hpp"

using namespace detrend;

namespace {

// Direct cross-correlation used as an independent oracle.
Tensor naive_conv(const Tensor& x, const ConvSpec& s, const Tensor& w) {
  const std::size_t n = x.dim(0), h = x.dim(2), wd = x.dim(3);
  const std::size_t oh = s.out_h(h), ow = s.out_w(wd);
  Tensor out({n, s.out_channels, oh, ow});
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t o = 0; o < s.out_channels; ++o)
      for (std::size_t i = 0; i < oh; ++i)
        for (std::size_t j = 0; j < ow; ++j) {
          double acc = 0.0;
          for (std::size_t c = 0; c < s.in_channels; ++c)
            for (std::size_t u = 0; u < s.kernel_h; ++u)
              for (std::size_t v = 0; v < s.kernel_w; ++v) {
                const long r = static_cast<long>(i * s.stride_h + u) - static_cast<long>(s.pad_h);
                const long q = static_cast<long>(j * s.stride_w + v) - static_cast<long>(s.pad_w);
                if (r < 0 || q < 0 || r >= static_cast<long>(h) || q >= static_cast<long>(wd)) continue;
                acc += x.at({b, c, static_cast<std::size_t>(r), static_cast<std::size_t>(q)}) *
                       w.at({o, c, u, v});
              }
          out.at({b, o, i, j}) = acc;
        }
  return out;
}

}  // namespace

TEST_CASE("conv2d output extents follow the shape formula") {
  ConvSpec s{7, 7, 3, 32, 3, 3, 0, 0};
  CHECK(s.out_h(112) == 36);
  CHECK(s.out_w(112) == 36);
  Tensor x({3, 112, 112});
  Tensor w(s.weight_shape());
  CHECK(conv2d(x, s, w).shape() == Shape{32, 36, 36});
  CHECK_THROWS_AS(ConvSpec({7, 7, 1, 1, 1, 1, 0, 0}).out_h(5), ShapeError);
}

TEST_CASE("1x1 identity convolution returns the input") {
  Prng prng(3);
  Tensor x = gaussian_init(prng, {2, 3, 4, 4}, 1.0);
  ConvSpec s{1, 1, 3, 3, 1, 1, 0, 0};
  Tensor w(s.weight_shape());
  for (std::size_t c = 0; c < 3; ++c) w.at({c, c, 0, 0}) = 1.0;
  CHECK(conv2d(x, s, w).bit_equal(x));
}

TEST_CASE("ones kernel over ones input sums to 9") {
  ConvSpec s{3, 3, 1, 1, 1, 1, 0, 0};
  Tensor out = conv2d(Tensor::filled({1, 3, 3}, 1.0), s, Tensor::filled(s.weight_shape(), 1.0));
  REQUIRE(out.size() == 1);
  CHECK(out[0] == 9.0);
}

TEST_CASE("conv2d and its gradients agree with a direct implementation") {
  Prng prng(11);
  ConvSpec s{3, 3, 2, 3, 2, 2, 1, 1};
  Tensor x = gaussian_init(prng, {2, 2, 7, 6}, 1.0);
  Tensor w = gaussian_init(prng, s.weight_shape(), 1.0);
  Tensor y = conv2d(x, s, w);
  CHECK(testing::max_abs_diff(y, naive_conv(x, s, w)) < 1e-12);

  // Loss = sum(g * conv(x, w)); gradients by central differences.
  Tensor g = gaussian_init(prng, y.shape(), 1.0);
  auto loss = [&](const Tensor& xi, const Tensor& wi) {
    Tensor o = naive_conv(xi, s, wi);
    double l = 0.0;
    for (std::size_t i = 0; i < o.size(); ++i) l += g[i] * o[i];
    return l;
  };
  Tensor gx = conv2d_grad_input(g, s, w, x.shape());
  Tensor gw = conv2d_grad_weights(g, s, x);
  const double h = 1e-6;
  for (std::size_t i = 0; i < x.size(); i += 5) {
    Tensor xp = x, xm = x;
    xp[i] += h;
    xm[i] -= h;
    CHECK(gx[i] == doctest::Approx((loss(xp, w) - loss(xm, w)) / (2 * h)).epsilon(1e-6));
  }
  for (std::size_t i = 0; i < w.size(); i += 3) {
    Tensor wp = w, wm = w;
    wp[i] += h;
    wm[i] -= h;
    CHECK(gw[i] == doctest::Approx((loss(x, wp) - loss(x, wm)) / (2 * h)).epsilon(1e-6));
  }
}

TEST_CASE("conv2d results do not depend on the thread count") {
  Prng prng(5);
  ConvSpec s{3, 3, 4, 6, 1, 1, 1, 1};
  Tensor x = gaussian_init(prng, {3, 4, 8, 8}, 1.0, Precision::f32);
  Tensor w = gaussian_init(prng, s.weight_shape(), 1.0, Precision::f32);
  set_num_threads(1);
  Tensor a = conv2d(x, s, w);
  set_num_threads(4);
  Tensor b = conv2d(x, s, w);
  set_num_threads(1);
  CHECK(a.bit_equal(b));
}

TEST_CASE("max pooling") {
  PoolSpec p{3, 3, 3, 3};
  CHECK(maxpool2d(Tensor({32, 36, 36}), p).output.shape() == Shape{32, 12, 12});
  Tensor c = Tensor::filled({2, 4, 4}, 0.7);
  const Tensor pooled = maxpool2d(c, PoolSpec{}).output;
  for (double v : pooled.data()) CHECK(v == 0.7);
  Tensor x({1, 2, 2}, {1, 2, 3, 4});
  auto r = maxpool2d(x, PoolSpec{});
  CHECK(r.output[0] == 4.0);
  CHECK(r.argmax[0] == 3);
  Tensor g = maxpool2d_grad(Tensor::filled({1, 1, 1}, 1.0), r.argmax, x.shape());
  CHECK(g.values() == std::vector<double>{0, 0, 0, 1});
}

TEST_CASE("global average pooling") {
  CHECK(global_avg_pool(Tensor({128, 6, 6})).shape() == Shape{128});
  CHECK(global_avg_pool(Tensor::filled({1, 5, 5}, 2.5))[0] == 2.5);
  CHECK(global_avg_pool(Tensor({1, 2, 2}, {0, 2, 4, 6}))[0] == 3.0);
}

TEST_CASE("dense layer") {
  Tensor eye({2, 2}, {1, 0, 0, 1});
  Tensor x({2}, {0.3, -1.2});
  CHECK(dense(x, eye, Tensor({2})).values() == x.values());
  CHECK(dense(Tensor({2}, {2, 3}), Tensor({2, 1}, {1, 1}), Tensor({1}, {1}))[0] == 6.0);
  CHECK(dense(x, Tensor({2, 1}), Tensor({1}, {0.25}))[0] == 0.25);
}

TEST_CASE("activations") {
  CHECK(sigmoid(0.0) == 0.5);
  CHECK(sigmoid(-2.0) == doctest::Approx(0.11920292).epsilon(1e-8));
  CHECK(tanh(Tensor({1}, {0.0}))[0] == 0.0);
  CHECK(relu(Tensor({2}, {-1.0, 2.0})).values() == std::vector<double>{0.0, 2.0});
}

TEST_CASE("non-finite values are rejected") {
  Tensor a({1}, {std::numeric_limits<double>::max()});
  CHECK_THROWS_AS(add(a, a), NumericError);
  CHECK_THROWS_AS(Tensor({1}, {std::nan("")}), NumericError);
}

TEST_CASE("f32 mode rounds every value to float") {
  Tensor a({1}, {0.1}, Precision::f32);
  CHECK(a[0] == static_cast<double>(0.1f));
  Tensor b = add(a, Tensor({1}, {0.2}, Precision::f32));
  CHECK(b[0] == static_cast<double>(0.1f + 0.2f));
}

TEST_CASE("shape errors") {
  CHECK_THROWS_AS(add(Tensor({2}), Tensor({3})), ShapeError);
  CHECK_THROWS_AS(dense(Tensor({3}), Tensor({2, 2})), ShapeError);
}

TEST_CASE("gaussian init matches the requested standard deviation") {
  Prng prng(42);
  Tensor t = gaussian_init(prng, {1000000}, 0.05);
  double mean = 0.0, sq = 0.0;
  for (double v : t.data()) mean += v;
  mean /= 1e6;
  for (double v : t.data()) sq += (v - mean) * (v - mean);
  const double sd = std::sqrt(sq / 1e6);
  CHECK(std::abs(sd - 0.05) < 0.01 * 0.05);
  CHECK(std::abs(mean) < 1e-3);
}

TEST_CASE("prng streams are reproducible") {
  Prng a(9), b(9);
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
  Prng c(9);
  Prng d = c.derive(1), e = c.derive(1), f = c.derive(2);
  CHECK(d.next_u64() == e.next_u64());
  CHECK(d.next_u64() != f.next_u64());
  Prng g(1);
  for (int i = 0; i < 1000; ++i) {
    const double u = g.uniform();
    CHECK((u >= 0.0 && u < 1.0));
    CHECK(g.below(7) < 7);
  }
}
