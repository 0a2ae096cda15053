#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <sstream>

#include "detrend/trainer.hpp"
#include "test_util.hpp"

using namespace detrend;
using namespace detrend::testing;

TEST_CASE("negative log likelihood") {
  CHECK(nll_loss({{0.5, 0.5}}, {0}) == doctest::Approx(std::log(2.0)).epsilon(1e-15));
  CHECK(nll_loss({{0.5, 0.5}, {0.25, 0.5, 0.25}}, {1, 1}) ==
        doctest::Approx(2.0 * std::log(2.0)).epsilon(1e-15));
  CHECK(nll_loss({{1.0, 0.0}}, {1}) == doctest::Approx(-std::log(1e-12)));
}

TEST_CASE("length weight") {
  CHECK(length_weight(30, 60) == 2.0);
  CHECK(length_weight(60, 60) == 1.0);
}

TEST_CASE("gradient clipping") {
  ag::ParamSet g{{"a", Tensor({1}, {15.0})}, {"b", Tensor({1}, {20.0})}};
  CHECK(clip_gradient(g, 10.0) == 25.0);
  CHECK(global_norm(g) == doctest::Approx(10.0).epsilon(1e-15));
  CHECK(g.at("a")[0] == doctest::Approx(6.0));
  CHECK(g.at("b")[0] == doctest::Approx(8.0));

  ag::ParamSet small{{"a", Tensor({2}, {3.0, 4.0})}};
  CHECK(clip_gradient(small, 10.0) == 5.0);
  CHECK(small.at("a")[1] == 4.0);

  ag::ParamSet zero{{"a", Tensor({2}, {0.0, 0.0})}};
  CHECK(clip_gradient(zero, 10.0) == 0.0);
  CHECK(zero.at("a")[0] == 0.0);
}

TEST_CASE("weight decay touches weights only") {
  ag::ParamSet p{{"layer3.W_z", Tensor({1}, {2.0})}, {"layer3.b_z", Tensor({1}, {2.0})}};
  ag::ParamSet g{{"layer3.W_z", Tensor({1}, {1.0})}, {"layer3.b_z", Tensor({1}, {1.0})}};
  add_weight_decay(g, p, 0.5);
  CHECK(g.at("layer3.W_z")[0] == 2.0);
  CHECK(g.at("layer3.b_z")[0] == 1.0);
}

TEST_CASE("Nesterov momentum under a constant gradient") {
  const double lr = 0.1, g = 0.5, theta0 = 1.0;
  ag::ParamSet p{{"w", Tensor({1}, {theta0})}};
  ag::ParamSet grad{{"w", Tensor({1}, {g})}};
  OptState opt = OptState::zeros_like(p);
  nag_update(p, grad, opt, lr, 0.9);
  CHECK(opt.velocity.at("w")[0] == doctest::Approx(-lr * g));
  CHECK(p.at("w")[0] == doctest::Approx(theta0 - 1.9 * lr * g));
  nag_update(p, grad, opt, lr, 0.9);
  CHECK(opt.velocity.at("w")[0] == doctest::Approx(-1.9 * lr * g));
  CHECK(p.at("w")[0] == doctest::Approx(theta0 - 4.61 * lr * g));

  ag::ParamSet q{{"w", Tensor({1}, {theta0})}};
  OptState plain = OptState::zeros_like(q);
  nag_update(q, grad, plain, lr, 0.0);
  nag_update(q, grad, plain, lr, 0.0);
  CHECK(q.at("w")[0] == doctest::Approx(theta0 - 2.0 * lr * g));
}

TEST_CASE("padded batches") {
  tasks::Dataset data = tasks::gen_oam(tiny_spec(), 3);
  std::vector<std::size_t> idx{0, 1, 2};
  std::vector<tasks::CropFlip> aug(3, tasks::center_crop(16, 16, 14, 14));
  BatchLabels labels;
  VideoBatch b = make_batch(data, idx, aug, 14, Precision::f64, &labels);
  std::size_t longest = 0;
  for (std::size_t i : idx) longest = std::max(longest, data.samples[i].length);
  CHECK(b.steps.size() == longest);
  for (std::size_t n = 0; n < 3; ++n) {
    CHECK(b.lengths[n] == data.samples[n].length);
    for (std::size_t t = 0; t < longest; ++t) CHECK(b.masks[t][n] == (t < b.lengths[n] ? 1 : 0));
  }
  CHECK(b.steps[0].shape() == Shape{3, 1, 14, 14});
  REQUIRE(labels.per_head.size() == 3);
  CHECK(labels.per_head[2][1] == data.samples[1].labels[2]);
}

TEST_CASE("training loop") {
  tasks::Dataset data = tasks::gen_oam(tiny_spec(), 3);
  const tasks::Split sp = tasks::split(data, 1);
  const NetworkConfig net = tiny_network(data.head_classes);

  SUBCASE("zero learning rate leaves parameters untouched") {
    ModelState m = build(net, 2);
    const ag::ParamSet before = m.params;
    TrainConfig tc = tiny_train(1);
    tc.learning_rate = 0.0;
    tc.precision = Precision::f64;
    Trainer tr(m, data, sp, tc);
    tr.train_epoch();
    for (const auto& [name, t] : before) CHECK(m.params.at(name).bit_equal(t));
  }
  SUBCASE("identical seeds give identical metrics") {
    auto run = [&] {
      ModelState m = build(net, 2);
      Trainer tr(m, data, sp, tiny_train(2));
      std::ostringstream os;
      write_metrics_header(os, data.head_names);
      for (int e = 0; e < 2; ++e) write_metrics_row(os, tr.train_epoch());
      return os.str();
    };
    const std::string a = run();
    CHECK(a == run());
    CHECK(a.rfind("epoch,split,train_loss,train_acc_object", 0) == 0);
  }
  SUBCASE("joint accuracy never exceeds a head accuracy") {
    ModelState m = build(net, 4);
    Trainer tr(m, data, sp, tiny_train(2));
    for (int e = 0; e < 2; ++e) {
      EpochMetrics em = tr.train_epoch();
      CHECK(em.epoch == static_cast<std::size_t>(e + 1));
      CHECK(em.train_joint <= *std::min_element(em.train_acc.begin(), em.train_acc.end()));
      CHECK(em.test_joint <= *std::min_element(em.test_acc.begin(), em.test_acc.end()));
      CHECK(std::isfinite(em.train_loss));
    }
    EvalResult r = tr.evaluate(sp.test);
    CHECK(r.samples == sp.test.size());
  }
  SUBCASE("heads must match the dataset") {
    ModelState m = build(tiny_network({2, 2}), 2);
    CHECK_THROWS_AS(Trainer(m, data, sp, tiny_train()), std::invalid_argument);
  }
}

TEST_CASE("epochs to accuracy") {
  std::vector<EpochMetrics> ms(4);
  const double joint[] = {0.2, 0.85, 0.9, 0.95};
  for (std::size_t i = 0; i < 4; ++i) {
    ms[i].epoch = i + 1;
    ms[i].train_joint = joint[i];
  }
  CHECK(epochs_to_accuracy(ms, 0.9) == 3);
  CHECK(epochs_to_accuracy(ms, 0.99) == 5);
}
