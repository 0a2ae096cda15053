#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "detrend/checkpoint.hpp"
#include "detrend/config.hpp"
#include "detrend/experiment.hpp"
#include "test_util.hpp"

using namespace detrend;
namespace fs = std::filesystem;

namespace {

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Checkpoint bytes with the wall-clock entries blanked.
std::vector<std::uint8_t> reproducible_bytes(const fs::path& p) {
  Checkpoint c = Checkpoint::load(p);
  c.put_f64("timing/wall_time", std::vector<double>(c.get_f64("timing/wall_time").size(), 0.0));
  return c.serialize();
}

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("detrend_test_" + name);
  fs::remove_all(dir);
  return dir;
}

const char* kTinyExperiment = R"(
# small OA-M run on 16x16 frames
network.input = 1x14x14
network.conv1_kernel = 5
network.conv1_stride = 2
network.pool1 = 1
network.pool2 = 2
network.scale = 0.125
norm.method = ad
train.lr = 0.05
train.batch_size = 4
train.crop = 14
train.epochs = 4
diag.neurons = 2
seed = 3
)";

}  // namespace

TEST_CASE("configuration text round trip") {
  const ExperimentConfig c = config_from_text(kTinyExperiment);
  CHECK(c.network.conv1_kernel == 5);
  CHECK(c.train.batch_size == 4);
  CHECK(c.train.seed == 3);
  const std::string text = c.to_text();
  CHECK(config_from_text(text).to_text() == text);
}

TEST_CASE("configuration errors") {
  try {
    config_from_text("train.learning = 0.1\n");
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).rfind("train.learning", 0) == 0);
  }
  CHECK_THROWS_AS(config_from_text("not a pair\n"), ConfigError);
  CHECK_THROWS_AS(config_from_text("train.lr = fast\n"), ConfigError);
  CHECK_THROWS_AS(config_from_text("", {"train.lr"}), ConfigError);
}

TEST_CASE("overrides replace file values") {
  const ExperimentConfig c = config_from_text(kTinyExperiment, {"train.lr=0.2", "norm.method = none,ad"});
  CHECK(c.train.learning_rate == 0.2);
  CHECK(c.norms == std::vector<NormMethod>{NormMethod::none, NormMethod::ad});
}

TEST_CASE("checkpoint container") {
  Checkpoint c;
  c.put_tensor("a/t64", Tensor({2, 2}, {1.0, -2.5, 3.25, 1e-300}));
  Tensor f({3}, {0.1, 0.2, 0.3});
  f.set_precision(Precision::f32);
  c.put_tensor("a/t32", f);
  c.put_u64("b/u", {1, 2, 0xffffffffffffffffULL});
  c.put_text("c", "hello");
  const auto bytes = c.serialize();
  const Checkpoint d = Checkpoint::deserialize(bytes);
  CHECK(d.serialize() == bytes);
  CHECK(d.get_tensor("a/t64").bit_equal(c.get_tensor("a/t64")));
  CHECK(d.get_tensor("a/t32").bit_equal(f));
  CHECK(d.get_u64("b/u")[2] == 0xffffffffffffffffULL);
  CHECK(d.get_text("c") == "hello");
  CHECK(d.names("a/") == std::vector<std::string>{"a/t32", "a/t64"});
  CHECK_THROWS(d.get_f64("c"));
  CHECK_THROWS(d.get_text("missing"));

  auto broken = bytes;
  broken[0] = 'X';
  CHECK_THROWS(Checkpoint::deserialize(broken));
  broken = bytes;
  broken.resize(bytes.size() - 3);
  CHECK_THROWS(Checkpoint::deserialize(broken));
}

TEST_CASE("model checkpoints") {
  const tasks::Dataset data = tasks::gen_oam(testing::tiny_spec(), 2);
  const NetworkConfig net = testing::tiny_network(data.head_classes);
  ModelState m = build(net, 4);
  const fs::path dir = scratch("ckpt");
  snapshot(m, "x = 1\n").save(dir / "m.ckpt");
  const Checkpoint loaded = Checkpoint::load(dir / "m.ckpt");
  loaded.save(dir / "again.ckpt");
  CHECK(read_file(dir / "m.ckpt") == read_file(dir / "again.ckpt"));

  ModelState other = build(net, 9);
  restore(loaded, other);
  for (const auto& [name, t] : m.params) CHECK(other.params.at(name).bit_equal(t));

  ModelState wrong = build(testing::tiny_network(data.head_classes, NormMethod::ln_ad), 4);
  CHECK_THROWS_AS(restore(loaded, wrong), std::invalid_argument);
  fs::remove_all(dir);
}

TEST_CASE("runs are reproducible and resume bit-exactly") {
  const tasks::Dataset data = tasks::gen_oam(testing::tiny_spec(), 2);
  ExperimentConfig c = config_from_text(kTinyExperiment, {"train.checkpoint_every=2"});
  const fs::path root = scratch("resume");

  RunSpec a;
  a.dir = root / "a";
  run_training(c, data, a);
  RunSpec b;
  b.dir = root / "b";
  run_training(c, data, b);
  CHECK(read_file(a.dir / "metrics.csv") == read_file(b.dir / "metrics.csv"));
  CHECK(reproducible_bytes(a.dir / "checkpoints/final.ckpt") ==
        reproducible_bytes(b.dir / "checkpoints/final.ckpt"));

  RunSpec r;
  r.dir = root / "r";
  r.resume = a.dir / "checkpoints/epoch_2.ckpt";
  run_training(c, data, r);
  CHECK(read_file(a.dir / "metrics.csv") == read_file(r.dir / "metrics.csv"));
  CHECK(reproducible_bytes(a.dir / "checkpoints/final.ckpt") ==
        reproducible_bytes(r.dir / "checkpoints/final.ckpt"));
  CHECK(read_file(a.dir / "tv.csv") == read_file(r.dir / "tv.csv"));

  ExperimentConfig changed = c;
  changed.train.learning_rate = 0.01;
  CHECK_THROWS_AS(run_training(changed, data, r), ConfigError);
  fs::remove_all(root);
}
