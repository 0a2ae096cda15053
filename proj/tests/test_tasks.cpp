#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <set>

#include "detrend/tasks.hpp"
#include "test_util.hpp"

using namespace detrend;
using namespace detrend::tasks;

namespace {

std::set<std::size_t> subjects_of(const Dataset& d, const std::vector<std::size_t>& idx) {
  std::set<std::size_t> s;
  for (std::size_t i : idx) s.insert(d.samples[i].subject);
  return s;
}

// Column centroid of the bright pixels of frame t.
double centroid_x(const Sample& s, std::size_t t, std::size_t h, std::size_t w) {
  double sum = 0.0, n = 0.0;
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      if (s.frames[(t * h + y) * w + x] > -0.5f) {
        sum += static_cast<double>(x);
        n += 1.0;
      }
    }
  }
  return sum / n;
}

}  // namespace

TEST_CASE("OA dataset size and labels") {
  const Dataset d = gen_oa(oa_spec(), 1);
  CHECK(d.samples.size() == 300);
  CHECK(d.head_classes == std::vector<std::size_t>{4, 7});
  std::set<std::pair<std::size_t, std::size_t>> classes;
  for (const auto& s : d.samples) {
    CHECK(s.length == 20);
    classes.insert({s.labels[0], s.labels[1]});
  }
  CHECK(classes.size() == 15);
}

TEST_CASE("OA-M dataset") {
  const Dataset d = gen_oam(oam_spec(), 1);
  CHECK(d.head_classes == std::vector<std::size_t>{2, 2, 3});
  CHECK(d.head_names.back() == "modifier");
  std::set<std::vector<std::size_t>> classes;
  for (const auto& s : d.samples) {
    CHECK(s.length >= 30);
    CHECK(s.length <= 60);
    CHECK(s.frames.size() == s.length * d.height * d.width);
    classes.insert(s.labels);
  }
  CHECK(classes.size() == 12);
  for (const auto& s : d.samples) {
    for (float v : s.frames) {
      REQUIRE(v >= -1.0f);
      REQUIRE(v <= 1.0f);
    }
  }
}

TEST_CASE("generation is deterministic in the seed") {
  const auto spec = testing::tiny_spec();
  const Dataset a = gen_oam(spec, 5), b = gen_oam(spec, 5), c = gen_oam(spec, 6);
  REQUIRE(a.samples.size() == b.samples.size());
  bool differs = false;
  for (std::size_t i = 0; i < a.samples.size(); ++i) {
    CHECK(a.samples[i].frames == b.samples[i].frames);
    differs = differs || a.samples[i].frames != c.samples[i].frames;
  }
  CHECK(differs);
}

TEST_CASE("invalid specs are rejected") {
  auto spec = testing::tiny_spec();
  spec.motion_frames = 6;  // shares a factor with counts 2 and 3
  CHECK_THROWS_AS(spec.validate(), std::invalid_argument);
  spec = testing::tiny_spec();
  spec.motion_frames = 9;  // longer than the shortest video
  CHECK_THROWS_AS(spec.validate(), std::invalid_argument);
  CHECK_THROWS_AS(gen_oa(testing::tiny_spec(), 1), std::invalid_argument);
}

TEST_CASE("the set of target positions does not depend on the count") {
  GridVideoSpec spec = oam_spec();
  spec.height = spec.width = 24;
  spec.subjects = 1;
  spec.repetitions = 1;
  spec.distractors = 0;
  spec.noise = 0.0;
  spec.min_length = spec.max_length = 12;
  spec.motion_frames = 7;
  spec.amplitude = 3.0;
  const Dataset d = gen_oam(spec, 11);
  // offsets[object][action][count] = sorted centroid displacements
  std::map<std::vector<std::size_t>, std::vector<double>> offsets;
  for (const auto& s : d.samples) {
    const double base = centroid_x(s, 0, d.height, d.width);
    std::vector<double> o;
    for (std::size_t t = 0; t < s.length; ++t) o.push_back(centroid_x(s, t, d.height, d.width) - base);
    std::sort(o.begin(), o.end());
    offsets[s.labels] = o;
  }
  for (std::size_t obj = 0; obj < 2; ++obj) {
    const auto& ref = offsets.at({obj, 0, 0});
    CHECK(ref.back() > 0.0);
    for (std::size_t k = 1; k < 3; ++k) {
      const auto& other = offsets.at({obj, 0, k});
      for (std::size_t i = 0; i < ref.size(); ++i) CHECK(other[i] == doctest::Approx(ref[i]).epsilon(1e-12));
    }
  }
}

TEST_CASE("horizontal flip label remap is an involution") {
  const Dataset d = gen_oa(oa_spec(), 1);
  CHECK(d.flip_map[1][0] == 1);
  CHECK(d.flip_map[1][1] == 0);
  CHECK(d.flip_map[1][2] == 2);
  for (const auto& s : d.samples) CHECK(flipped_labels(d, flipped_labels(d, s.labels)) == s.labels);
}

TEST_CASE("crop and flip") {
  std::vector<float> f(2 * 4 * 5);
  for (std::size_t i = 0; i < f.size(); ++i) f[i] = static_cast<float>(i);
  const auto c = augment(f, 2, 4, 5, 2, 3, CropFlip{1, 2, false});
  CHECK(c == std::vector<float>{7, 8, 9, 12, 13, 14, 27, 28, 29, 32, 33, 34});
  const auto flipped = augment(f, 2, 4, 5, 2, 3, CropFlip{1, 2, true});
  CHECK(flipped[0] == 9.0f);
  CHECK(flipped[2] == 7.0f);
  CHECK(augment(f, 2, 4, 5, 4, 5, CropFlip{}) == f);
  CHECK_THROWS(augment(f, 2, 4, 5, 4, 5, CropFlip{1, 0, false}));

  Prng prng(3);
  for (int i = 0; i < 100; ++i) {
    const CropFlip a = draw_augmentation(prng, 32, 32, 28, 28);
    CHECK(a.top <= 4);
    CHECK(a.left <= 4);
  }
  const CropFlip cc = center_crop(32, 32, 28, 28);
  CHECK(cc.top == 2);
  CHECK_FALSE(cc.flip);
}

TEST_CASE("subject splits") {
  const Dataset d = gen_oa(oa_spec(), 1);
  std::set<std::size_t> seen;
  for (std::size_t fold = 1; fold <= 3; ++fold) {
    const Split s = split(d, fold);
    const auto train = subjects_of(d, s.train), test = subjects_of(d, s.test);
    CHECK(train.size() == 8);
    CHECK(test.size() == 2);
    for (std::size_t t : test) {
      CHECK(train.count(t) == 0);
      CHECK(seen.insert(t).second);
    }
    CHECK(s.train.size() + s.test.size() == d.samples.size());
  }
  const Dataset small = gen_oam(testing::tiny_spec(), 1);
  const Split s = split(small, 2);
  CHECK(subjects_of(small, s.train).size() == 4);
  CHECK(s.test_subjects == std::vector<std::size_t>{1});
  CHECK_THROWS(split(small, 4));
}

TEST_CASE("export and import round trip") {
  const Dataset d = gen_oam(testing::tiny_spec(), 2);
  const auto dir = std::filesystem::temp_directory_path() / "detrend_test_tasks_roundtrip";
  std::filesystem::remove_all(dir);
  export_dataset(d, dir);
  const Dataset e = import_dataset(dir);
  CHECK(e.name == d.name);
  CHECK(e.head_names == d.head_names);
  CHECK(e.head_classes == d.head_classes);
  CHECK(e.flip_map == d.flip_map);
  REQUIRE(e.samples.size() == d.samples.size());
  for (std::size_t i = 0; i < d.samples.size(); ++i) {
    CHECK(e.samples[i].labels == d.samples[i].labels);
    CHECK(e.samples[i].subject == d.samples[i].subject);
    CHECK(e.samples[i].frames == d.samples[i].frames);
  }
  std::filesystem::remove_all(dir);
}
