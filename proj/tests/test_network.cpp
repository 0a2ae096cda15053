#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>

#include "detrend/network.hpp"
#include "test_util.hpp"

using namespace detrend;
using detrend::testing::tiny_network;

namespace {

VideoBatch random_batch(Prng& prng, std::size_t n, std::size_t t, std::size_t size) {
  VideoBatch b;
  for (std::size_t i = 0; i < t; ++i) {
    b.steps.push_back(gaussian_init(prng, {n, 1, size, size}, 0.5));
    b.masks.push_back(ag::RowMask(n, 1));
  }
  b.lengths.assign(n, t);
  return b;
}

std::vector<Tensor> logits(ModelState& m, const VideoBatch& b) {
  ag::Tape tape;
  auto vars = ag::register_constants(tape, m.params);
  auto r = forward(m, tape, vars, b, norm::Mode::train);
  std::vector<Tensor> out;
  for (const auto& l : r.logits) out.push_back(l.value());
  return out;
}

}  // namespace

TEST_CASE("Table I shape chain") {
  auto chain = shape_chain(NetworkConfig::table1({15}));
  REQUIRE(chain.size() == 6);
  CHECK(chain[0].channels == 32);
  CHECK(chain[0].height == 36);
  CHECK(chain[1].height == 12);
  CHECK(chain[2].channels == 64);
  CHECK(chain[2].height == 12);
  CHECK(chain[3].height == 6);
  CHECK(chain[4].channels == 128);
  CHECK(chain[5].height == 6);
  CHECK(chain[5].width == 6);
}

TEST_CASE("desk shape chain") {
  auto chain = shape_chain(NetworkConfig::desk({2, 2, 3}));
  // (28 - 7) / 3 + 1 = 8, pooled by 2 twice.
  CHECK(chain[0].channels == 8);
  CHECK(chain[0].height == 8);
  CHECK(chain[1].height == 4);
  CHECK(chain[2].channels == 16);
  CHECK(chain[4].channels == 32);
  CHECK(chain[5].height == 2);
}

TEST_CASE("invalid geometry is rejected") {
  NetworkConfig c = NetworkConfig::desk({2});
  c.pool2 = 5;
  CHECK_THROWS_AS(c.validate(), ShapeError);
  c = NetworkConfig::desk({1});
  CHECK_THROWS(c.validate());
}

TEST_CASE("one FC block per head") {
  auto count_heads = [](const NetworkConfig& c) {
    auto names = parameter_names(c);
    return std::count_if(names.begin(), names.end(), [](const std::string& n) {
      return n.rfind("layer7.", 0) == 0 && n.size() > 2 && n.substr(n.size() - 2) == ".W";
    });
  };
  CHECK(count_heads(NetworkConfig::table1({15})) == 1);
  CHECK(count_heads(NetworkConfig::table1({4, 9})) == 2);
}

TEST_CASE("weight classification") {
  CHECK(is_weight("layer1.W"));
  CHECK(is_weight("layer3.U_z"));
  CHECK(is_weight("layer7.head0.W"));
  CHECK_FALSE(is_weight("layer3.b_z"));
  CHECK_FALSE(is_weight("layer5.gamma_x_h"));
  CHECK_FALSE(is_weight("layer5.beta_x_h"));
}

TEST_CASE("forward pass") {
  Prng prng(1);
  ModelState m = build(tiny_network({2, 2, 3}), 5);

  SUBCASE("a one-frame sequence runs a single step per layer") {
    ag::Tape tape;
    auto vars = ag::register_constants(tape, m.params);
    auto r = forward_video(m, tape, vars, random_batch(prng, 2, 1, 14), norm::Mode::train);
    REQUIRE(r.layers.size() == 2);
    CHECK(r.layers[0].steps.size() == 1);
    CHECK(r.layers[1].steps.size() == 1);
    CHECK(r.logits.size() == 3);
  }
  SUBCASE("softmax outputs sum to one") {
    auto probs = predict(m, random_batch(prng, 3, 4, 14), norm::Mode::train, Precision::f64);
    for (const auto& p : probs) {
      for (std::size_t n = 0; n < 3; ++n) {
        double s = 0.0;
        for (std::size_t c = 0; c < p.dim(1); ++c) s += p.at({n, c});
        CHECK(std::abs(s - 1.0) <= 1e-6);
      }
    }
  }
  SUBCASE("same seed gives bit-identical logits") {
    ModelState other = build(tiny_network({2, 2, 3}), 5);
    const VideoBatch b = random_batch(prng, 2, 3, 14);
    auto a = logits(m, b), c = logits(other, b);
    for (std::size_t h = 0; h < a.size(); ++h) CHECK(a[h].bit_equal(c[h]));
  }
  SUBCASE("readout uses each sample's last valid step") {
    VideoBatch b = random_batch(prng, 2, 4, 14);
    VideoBatch shorter = b;
    shorter.steps.resize(2);
    shorter.masks.resize(2);
    shorter.lengths = {2, 2};
    b.lengths = {2, 4};
    b.masks[2][0] = b.masks[3][0] = 0;
    auto full = logits(m, b), cut = logits(m, shorter);
    for (std::size_t h = 0; h < full.size(); ++h) {
      for (std::size_t c = 0; c < full[h].dim(1); ++c) {
        CHECK(full[h].at({0, c}) == doctest::Approx(cut[h].at({0, c})).epsilon(1e-12));
      }
    }
  }
}

TEST_CASE("frame-average baseline") {
  NetworkConfig c = tiny_network({2, 2, 3}, NormMethod::none);
  c.model = ModelKind::frame_cnn;
  c.sampled_frames = 4;
  ModelState m = build(c, 3);
  Prng prng(9);
  const VideoBatch single = random_batch(prng, 2, 1, 14);

  SUBCASE("identical frames equal the single-frame output") {
    VideoBatch rep = single;
    for (int t = 0; t < 5; ++t) {
      rep.steps.push_back(single.steps[0]);
      rep.masks.push_back(single.masks[0]);
    }
    rep.lengths.assign(2, rep.steps.size());
    auto a = logits(m, single), b = logits(m, rep);
    for (std::size_t h = 0; h < a.size(); ++h)
      for (std::size_t i = 0; i < a[h].size(); ++i) CHECK(b[h][i] == doctest::Approx(a[h][i]).epsilon(1e-12));
  }
  SUBCASE("frame order does not matter") {
    VideoBatch b = random_batch(prng, 2, 4, 14);
    VideoBatch p = b;
    std::reverse(p.steps.begin(), p.steps.end());
    auto x = logits(m, b), y = logits(m, p);
    for (std::size_t h = 0; h < x.size(); ++h)
      for (std::size_t i = 0; i < x[h].size(); ++i) CHECK(y[h][i] == doctest::Approx(x[h][i]).epsilon(1e-12));
  }
}

TEST_CASE("equally spaced frame sampling") {
  auto idx = sampled_frame_indices(100, 25);
  REQUIRE(idx.size() == 25);
  CHECK(idx.front() == 0);
  CHECK(idx.back() == 99);
  for (std::size_t k = 1; k < idx.size(); ++k) {
    const auto gap = idx[k] - idx[k - 1];
    CHECK((gap == 4 || gap == 5));
  }
  auto few = sampled_frame_indices(10, 25);
  CHECK(few.size() == 25);
  CHECK(few.back() == 9);
}
