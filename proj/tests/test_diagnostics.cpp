#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <sstream>

#include "detrend/cells.hpp"
#include "detrend/diagnostics.hpp"
#include "test_util.hpp"

using namespace detrend;
using namespace detrend::diag;

TEST_CASE("histogram bins") {
  CHECK(Histogram::bin_of(0.005) == 100);
  CHECK(Histogram::bin_lo(100) == doctest::Approx(0.0));
  CHECK(Histogram::bin_of(-1.0) == 0);
  CHECK(Histogram::bin_of(-0.995) == 0);
  CHECK(Histogram::bin_of(0.999) == 199);
  CHECK(Histogram::bin_of(1.0) == 199);
  CHECK(Histogram::bin_of(-7.0) == 0);
  CHECK(Histogram::bin_of(7.0) == 199);
  CHECK_THROWS_AS(Histogram::bin_of(std::nan("")), NumericError);
}

TEST_CASE("uniform samples fill the bins evenly") {
  Prng prng(5);
  Histogram h;
  const std::size_t n = 1000000;
  for (std::size_t i = 0; i < n; ++i) h.add(prng.uniform(-1.0, 1.0));
  CHECK(h.total == n);
  const double expect = static_cast<double>(n) / kBins;
  for (auto c : h.counts) CHECK(std::abs(static_cast<double>(c) - expect) <= 0.05 * expect);
}

TEST_CASE("total variation distance") {
  Histogram a, b, c;
  for (int i = 0; i < 10; ++i) {
    a.add(-0.5);
    b.add(0.5);
  }
  for (int i = 0; i < 5; ++i) {
    c.add(-0.5);
    c.add(0.5);
  }
  CHECK(shift_metric(a, a) == 0.0);
  CHECK(shift_metric(a, b) == 1.0);
  CHECK(shift_metric(a, c) == 0.5);
  CHECK_THROWS(shift_metric(a, Histogram{}));
}

TEST_CASE("smoothed norm trace") {
  NormTrace t;
  t.push(1, 1.0);
  t.push(2, 0.0);
  t.push(3, 0.0);
  const auto& e = t.entries();
  CHECK(e[0].smoothed == 1.0);
  CHECK(e[1].smoothed == doctest::Approx(0.99).epsilon(1e-15));
  CHECK(e[2].smoothed == doctest::Approx(0.9801).epsilon(1e-15));
  CHECK(e[2].raw == 0.0);
  std::ostringstream os;
  write_trace_csv(os, t);
  CHECK(os.str().rfind("iter,raw,smoothed\n", 0) == 0);
}

TEST_CASE("neuron selectors") {
  const NeuronSelector s = NeuronSelector::parse("layer5:3:1:2");
  CHECK(s.layer == 5);
  CHECK(s.channel == 3);
  CHECK(s.row == 1);
  CHECK(s.col == 2);
  CHECK(s.label() == "layer5:3:1:2");
  CHECK_THROWS(NeuronSelector::parse("layer5:3:1"));
  CHECK_THROWS(NeuronSelector::parse("neuron5:3:1:2"));

  const NetworkConfig net = NetworkConfig::desk({2, 2, 3});
  const auto sel = default_selectors(net);
  REQUIRE(sel.size() == 8);
  CHECK(sel[7].channel == 7);
  CHECK(sel[0].row == 2);
  CHECK(sel[0].layer == 3);
  CHECK_THROWS(validate_selector(net, {3, 16, 0, 0}));
  CHECK_THROWS(validate_selector(net, {5, 0, 2, 0}));
  CHECK_THROWS(validate_selector(net, {4, 0, 0, 0}));
  CHECK_NOTHROW(validate_selector(net, {5, 31, 1, 1}));
}

TEST_CASE("a step in the input drives the detrended output towards 2") {
  CellConfig c;
  c.kind = CellKind::gru;
  c.norm = NormMethod::ad;
  c.input_size = 1;
  c.hidden_size = 1;
  RecurrentCell cell(c);
  Prng prng(0);
  ag::ParamSet p = cell.init_params(prng, 1.0);
  for (auto& [_, t] : p) t[0] = 0.0;
  p.at("W_h")[0] = 50.0;
  p.at("b_z")[0] = -2.0;
  Tensor h({1, 1}, {0.0});
  for (int t = 0; t < 400; ++t) h = gru_step(cell, p, Tensor({1, 1}, {-1.0}), h).h;
  CHECK(h[0] == doctest::Approx(-1.0).epsilon(1e-9));
  const StepRecord step = gru_step(cell, p, Tensor({1, 1}, {1.0}), h);
  const double z = 1.0 / (1.0 + std::exp(2.0));
  CHECK(step.y->at({0, 0}) == doctest::Approx(2.0 * (1.0 - z)).epsilon(1e-9));

  // A closed update gate holds h, so y reaches the full swing of 2.
  p.at("b_z")[0] = -50.0;
  const StepRecord held = gru_step(cell, p, Tensor({1, 1}, {1.0}), h);
  CHECK(held.y->at({0, 0}) == doctest::Approx(2.0).epsilon(1e-9));

  // With a constant input the detrended output decays back to zero.
  p.at("b_z")[0] = -2.0;
  Tensor g = h;
  double y = 0.0;
  for (int t = 0; t < 200; ++t) {
    const StepRecord r = gru_step(cell, p, Tensor({1, 1}, {1.0}), g);
    g = r.h;
    y = r.y->at({0, 0});
  }
  CHECK(std::abs(y) < 1e-9);
}

TEST_CASE("recorded traces and histograms") {
  const tasks::Dataset data = tasks::gen_oam(testing::tiny_spec(), 4);
  ModelState m = build(testing::tiny_network(data.head_classes), 3);
  const auto sel = default_selectors(m.config, 2);
  REQUIRE(sel.size() == 2);

  const auto rows = record_neuron_trace(m, data, 0, sel[0], 14, Precision::f64);
  REQUIRE(rows.size() == data.samples[0].length);
  for (const auto& r : rows) CHECK(r.y == doctest::Approx(r.h_tilde - r.h).epsilon(1e-12));
  std::ostringstream os;
  write_neuron_trace_csv(os, rows);
  CHECK(os.str().rfind("t,h_tilde,h,z,y\n", 0) == 0);

  const std::vector<std::size_t> idx{0, 1, 2};
  const auto hists = record_histograms(m, data, idx, 1, sel, 14, Precision::f64, 2);
  REQUIRE(hists.size() == 2);
  std::size_t steps = 0;
  for (std::size_t i : idx) steps += data.samples[i].length;
  CHECK(hists[0].hidden.total == steps);
  CHECK(hists[0].detrended.total == steps);
  CHECK(hists[0].hidden.neuron == sel[0].label() + ":h");
  CHECK(hists[0].detrended.neuron == sel[0].label() + ":y");
  CHECK(hists[0].hidden.epoch == 1);
}
