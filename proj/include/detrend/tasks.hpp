#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "detrend/prng.hpp"

namespace detrend::tasks {

enum class Motion { translate_left, translate_right, translate_up, shake_h, shake_v, sweep, circle };

std::string_view to_string(Motion m);
Motion parse_motion(std::string_view s);

// Glyph names: square, plus, cross, ring, tee, bar, corner, dot.
const std::vector<std::string>& glyph_names();

struct ClassEntry {
  std::size_t object = 0;    // index into GridVideoSpec::objects
  std::size_t action = 0;    // index into GridVideoSpec::actions
  std::size_t modifier = 0;  // index into GridVideoSpec::counts (ignored without modifiers)
};

struct GridVideoSpec {
  std::size_t height = 32;  // raw frame size before cropping
  std::size_t width = 32;
  std::vector<std::string> objects;
  std::vector<Motion> actions;
  std::vector<std::size_t> counts;  // repetition modifiers; empty disables the head
  std::vector<ClassEntry> classes;
  std::size_t subjects = 10;
  std::size_t repetitions = 2;
  std::size_t distractors = 1;  // static glyphs per video (0 or 1 supported by the renderer)
  std::size_t min_length = 20;
  std::size_t max_length = 20;
  std::size_t motion_frames = 15;  // frames spanned by the target's motion
  std::size_t max_trailing = 0;    // most rest frames after the motion; 0 = no limit
  double amplitude = 5.0;          // pixels
  double noise = 0.05;

  void validate() const;
  bool has_modifiers() const { return !counts.empty(); }
};

// 4 objects x 7 motions, 15-class partial table, fixed length.
GridVideoSpec oa_spec();
// 2 objects x {shake_h, shake_v} x counts {1,2,3}, lengths 30..60.
GridVideoSpec oam_spec();

struct Sample {
  std::size_t id = 0;
  std::size_t subject = 0;
  std::size_t length = 0;
  std::vector<std::size_t> labels;  // one per head
  std::vector<float> frames;        // [length, height, width], values in [-1, 1]
};

struct Dataset {
  std::string name;
  std::size_t height = 0, width = 0;
  std::size_t subjects = 0;
  std::vector<std::string> head_names;
  std::vector<std::size_t> head_classes;
  // Label remap under horizontal flip, per head.
  std::vector<std::vector<std::size_t>> flip_map;
  std::vector<Sample> samples;

  std::size_t max_length() const;
};

Dataset generate(const GridVideoSpec& spec, std::uint64_t seed, const std::string& name);
Dataset gen_oa(const GridVideoSpec& spec, std::uint64_t seed);
Dataset gen_oam(const GridVideoSpec& spec, std::uint64_t seed);

struct Split {
  std::vector<std::size_t> train;  // sample indices
  std::vector<std::size_t> test;
  std::vector<std::size_t> test_subjects;
};

// Fold f in {1,2,3}: n_test = max(1, round(0.2 * subjects)) consecutive
// subjects starting at (f-1) * n_test, wrapping around.
Split split(const Dataset& data, std::size_t fold);

struct CropFlip {
  std::size_t top = 0, left = 0;
  bool flip = false;
};

CropFlip draw_augmentation(Prng& prng, std::size_t height, std::size_t width, std::size_t crop_h,
                           std::size_t crop_w, double flip_probability = 0.5);
CropFlip center_crop(std::size_t height, std::size_t width, std::size_t crop_h, std::size_t crop_w);

// Crops/flips every frame of [T, H, W] the same way.
std::vector<float> augment(const std::vector<float>& frames, std::size_t length, std::size_t height,
                           std::size_t width, std::size_t crop_h, std::size_t crop_w,
                           const CropFlip& a);

std::vector<std::size_t> flipped_labels(const Dataset& data, const std::vector<std::size_t>& labels);

// Manifest (text) + frames.bin (little-endian float32, samples back to back).
void export_dataset(const Dataset& data, const std::filesystem::path& dir);
Dataset import_dataset(const std::filesystem::path& dir);

}  // namespace detrend::tasks
