#include "detrend/tasks.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace detrend::tasks {

namespace {

constexpr std::size_t kGlyph = 7;

struct GlyphArt {
  const char* name;
  const char* rows[kGlyph];
};

const GlyphArt kGlyphs[] = {
    {"square", {"#######", "#.....#", "#.....#", "#.....#", "#.....#", "#.....#", "#######"}},
    {"plus", {"...#...", "...#...", "...#...", "#######", "...#...", "...#...", "...#..."}},
    {"cross", {"#.....#", ".#...#.", "..#.#..", "...#...", "..#.#..", ".#...#.", "#.....#"}},
    {"ring", {"..###..", ".#...#.", "#.....#", "#.....#", "#.....#", ".#...#.", "..###.."}},
    {"tee", {"#######", "#######", "...#...", "...#...", "...#...", "...#...", "...#..."}},
    {"bar", {".......", ".......", "#######", "#######", "#######", ".......", "......."}},
    {"corner", {"#######", "#######", "##.....", "##.....", "##.....", "##.....", "##....."}},
    {"dot", {".......", "..###..", ".#####.", ".#####.", ".#####.", "..###..", "......."}},
};

std::size_t glyph_index(const std::string& name) {
  for (std::size_t i = 0; i < std::size(kGlyphs); ++i) {
    if (name == kGlyphs[i].name) return i;
  }
  throw std::invalid_argument("unknown glyph '" + name + "'");
}

struct Offset {
  long dx = 0, dy = 0;
};

// Displacement of the target at motion frame m of M (m in [0, M)).
Offset motion_offset(Motion motion, std::size_t m, std::size_t M, std::size_t k, double a) {
  const double two_pi = 2.0 * std::numbers::pi;
  const double phase = two_pi * static_cast<double>((k * m) % M) / static_cast<double>(M);
  const double ramp = M > 1 ? static_cast<double>(m) / static_cast<double>(M - 1) : 1.0;
  double dx = 0.0, dy = 0.0;
  switch (motion) {
    case Motion::translate_left: dx = -a * (2.0 * ramp - 1.0); break;
    case Motion::translate_right: dx = a * (2.0 * ramp - 1.0); break;
    case Motion::translate_up: dy = -a * (2.0 * ramp - 1.0); break;
    case Motion::shake_h: dx = a * std::sin(phase); break;
    case Motion::shake_v: dy = a * std::sin(phase); break;
    case Motion::sweep: dx = a * std::sin(std::numbers::pi * ramp); break;
    case Motion::circle:
      dx = a * std::sin(phase);
      dy = a * (std::cos(phase) - 1.0);
      break;
  }
  return {std::lround(dx), std::lround(dy)};
}

// Resting displacement before and after the motion window.
Offset rest_offset(Motion motion, bool after, double a) {
  const double s = after ? 1.0 : -1.0;
  switch (motion) {
    case Motion::translate_left: return {std::lround(-a * s), 0};
    case Motion::translate_right: return {std::lround(a * s), 0};
    case Motion::translate_up: return {0, std::lround(-a * s)};
    default: return {0, 0};
  }
}

void draw_glyph(std::vector<float>& frame, std::size_t h, std::size_t w, std::size_t glyph,
                long top, long left, float value) {
  for (std::size_t r = 0; r < kGlyph; ++r) {
    for (std::size_t c = 0; c < kGlyph; ++c) {
      if (kGlyphs[glyph].rows[r][c] != '#') continue;
      const long y = top + static_cast<long>(r), x = left + static_cast<long>(c);
      if (y < 0 || x < 0 || y >= static_cast<long>(h) || x >= static_cast<long>(w)) continue;
      float& px = frame[static_cast<std::size_t>(y) * w + static_cast<std::size_t>(x)];
      px = std::max(px, value);
    }
  }
}

std::size_t count_for(const GridVideoSpec& spec, const ClassEntry& c) {
  return spec.has_modifiers() ? spec.counts[c.modifier] : 2;
}

std::uint32_t swap_bytes(std::uint32_t u) {
  return (u >> 24) | ((u >> 8) & 0xff00u) | ((u << 8) & 0xff0000u) | (u << 24);
}

}  // namespace

std::string_view to_string(Motion m) {
  switch (m) {
    case Motion::translate_left: return "translate_left";
    case Motion::translate_right: return "translate_right";
    case Motion::translate_up: return "translate_up";
    case Motion::shake_h: return "shake_h";
    case Motion::shake_v: return "shake_v";
    case Motion::sweep: return "sweep";
    case Motion::circle: return "circle";
  }
  return "?";
}

Motion parse_motion(std::string_view s) {
  for (Motion m : {Motion::translate_left, Motion::translate_right, Motion::translate_up,
                   Motion::shake_h, Motion::shake_v, Motion::sweep, Motion::circle}) {
    if (to_string(m) == s) return m;
  }
  throw std::invalid_argument("unknown motion '" + std::string(s) + "'");
}

const std::vector<std::string>& glyph_names() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> v;
    for (const auto& g : kGlyphs) v.emplace_back(g.name);
    return v;
  }();
  return names;
}

void GridVideoSpec::validate() const {
  if (objects.empty() || actions.empty() || classes.empty()) {
    throw std::invalid_argument("video spec: objects, actions and classes must be non-empty");
  }
  for (const auto& o : objects) glyph_index(o);
  if (classes.size() > objects.size() * actions.size() * std::max<std::size_t>(1, counts.size())) {
    throw std::invalid_argument("video spec: class table exceeds the combination product");
  }
  for (const auto& c : classes) {
    if (c.object >= objects.size() || c.action >= actions.size() ||
        (has_modifiers() && c.modifier >= counts.size())) {
      throw std::invalid_argument("video spec: class entry out of range");
    }
  }
  for (std::size_t i = 0; i < classes.size(); ++i) {
    for (std::size_t j = i + 1; j < classes.size(); ++j) {
      const auto &a = classes[i], &b = classes[j];
      if (a.object == b.object && a.action == b.action &&
          (!has_modifiers() || a.modifier == b.modifier)) {
        throw std::invalid_argument("video spec: duplicate class entry");
      }
    }
  }
  if (subjects == 0 || repetitions == 0) {
    throw std::invalid_argument("video spec: subjects and repetitions must be positive");
  }
  if (distractors > 1) throw std::invalid_argument("video spec: at most one distractor");
  if (min_length == 0 || min_length > max_length) {
    throw std::invalid_argument("video spec: invalid length range");
  }
  if (motion_frames < 2 || motion_frames > min_length) {
    throw std::invalid_argument("video spec: min_length " + std::to_string(min_length) +
                                " cannot hold a " + std::to_string(motion_frames) +
                                "-frame motion");
  }
  for (std::size_t k : counts) {
    if (k == 0 || 2 * k > motion_frames) {
      throw std::invalid_argument("video spec: motion_frames too short for " +
                                  std::to_string(k) + " repetitions");
    }
    if (std::gcd(k, motion_frames) != 1) {
      throw std::invalid_argument("video spec: motion_frames must be coprime to every count");
    }
  }
  if (height < kGlyph + 8 || width < kGlyph + 8) {
    throw std::invalid_argument("video spec: frame too small");
  }
}

GridVideoSpec oa_spec() {
  GridVideoSpec s;
  s.objects = {"square", "plus", "ring", "tee"};
  s.actions = {Motion::translate_left, Motion::translate_right, Motion::translate_up,
               Motion::shake_h,        Motion::shake_v,         Motion::sweep,
               Motion::circle};
  const std::size_t table[15][2] = {{0, 0}, {0, 1}, {0, 5}, {0, 6}, {1, 2}, {1, 3}, {1, 4}, {1, 6},
                                    {2, 0}, {2, 3}, {2, 5}, {3, 1}, {3, 2}, {3, 4}, {3, 5}};
  for (const auto& row : table) s.classes.push_back({row[0], row[1], 0});
  s.min_length = s.max_length = 20;
  s.motion_frames = 15;
  return s;
}

GridVideoSpec oam_spec() {
  GridVideoSpec s;
  s.objects = {"square", "plus"};
  s.actions = {Motion::shake_h, Motion::shake_v};
  s.counts = {1, 2, 3};
  for (std::size_t o = 0; o < 2; ++o) {
    for (std::size_t a = 0; a < 2; ++a) {
      for (std::size_t m = 0; m < 3; ++m) s.classes.push_back({o, a, m});
    }
  }
  s.min_length = 30;
  s.max_length = 60;
  s.motion_frames = 25;
  return s;
}

std::size_t Dataset::max_length() const {
  std::size_t m = 0;
  for (const auto& s : samples) m = std::max(m, s.length);
  return m;
}

Dataset generate(const GridVideoSpec& spec, std::uint64_t seed, const std::string& name) {
  spec.validate();
  Dataset d;
  d.name = name;
  d.height = spec.height;
  d.width = spec.width;
  d.subjects = spec.subjects;
  d.head_names = {"object", "action"};
  d.head_classes = {spec.objects.size(), spec.actions.size()};
  if (spec.has_modifiers()) {
    d.head_names.push_back("modifier");
    d.head_classes.push_back(spec.counts.size());
  }
  d.flip_map.resize(d.head_classes.size());
  for (std::size_t h = 0; h < d.head_classes.size(); ++h) {
    d.flip_map[h].resize(d.head_classes[h]);
    std::iota(d.flip_map[h].begin(), d.flip_map[h].end(), 0);
  }
  for (std::size_t a = 0; a < spec.actions.size(); ++a) {
    for (std::size_t b = 0; b < spec.actions.size(); ++b) {
      if (spec.actions[a] == Motion::translate_left && spec.actions[b] == Motion::translate_right) {
        d.flip_map[1][a] = b;
        d.flip_map[1][b] = a;
      }
    }
  }

  // Distractors come from glyphs that are not objects.
  std::vector<std::size_t> distractor_glyphs;
  for (std::size_t g = 0; g < std::size(kGlyphs); ++g) {
    if (std::find(spec.objects.begin(), spec.objects.end(), kGlyphs[g].name) == spec.objects.end()) {
      distractor_glyphs.push_back(g);
    }
  }

  const Prng root(seed);
  const std::size_t h = spec.height, w = spec.width, M = spec.motion_frames;
  std::size_t id = 0;
  for (std::size_t ci = 0; ci < spec.classes.size(); ++ci) {
    const ClassEntry& cls = spec.classes[ci];
    for (std::size_t subj = 0; subj < spec.subjects; ++subj) {
      Prng style = root.derive(0x5ab1ec7000ULL + subj);
      const float intensity = static_cast<float>(style.uniform(0.6, 1.0));
      const double amp = spec.amplitude * style.uniform(0.8, 1.2);
      const long style_dx = static_cast<long>(style.below(3)) - 1;
      const long style_dy = static_cast<long>(style.below(3)) - 1;
      for (std::size_t rep = 0; rep < spec.repetitions; ++rep, ++id) {
        Prng rng = root.derive(id);
        Sample s;
        s.id = id;
        s.subject = subj;
        s.length = spec.min_length + rng.below(spec.max_length - spec.min_length + 1);
        s.labels = {cls.object, cls.action};
        if (spec.has_modifiers()) s.labels.push_back(cls.modifier);
        const std::size_t slack = s.length - M;
        const std::size_t earliest =
            spec.max_trailing && slack > spec.max_trailing ? slack - spec.max_trailing : 0;
        const std::size_t start = earliest + rng.below(slack - earliest + 1);
        const long cy = static_cast<long>(h / 2) - 3 + style_dy + static_cast<long>(rng.below(3)) - 1;
        const long cx = static_cast<long>(w / 2) - 3 + style_dx + static_cast<long>(rng.below(3)) - 1;
        const std::size_t glyph = glyph_index(spec.objects[cls.object]);
        std::size_t dglyph = 0;
        long dy = 0, dx = 0;
        if (spec.distractors > 0 && !distractor_glyphs.empty()) {
          dglyph = distractor_glyphs[rng.below(distractor_glyphs.size())];
          const std::size_t corner = rng.below(4);
          dy = (corner / 2 == 0) ? 1 : static_cast<long>(h - kGlyph) - 1;
          dx = (corner % 2 == 0) ? 1 : static_cast<long>(w - kGlyph) - 1;
        }
        const std::size_t k = count_for(spec, cls);
        const Motion motion = spec.actions[cls.action];
        s.frames.assign(s.length * h * w, -1.0f);
        for (std::size_t t = 0; t < s.length; ++t) {
          std::vector<float> frame(h * w, -1.0f);
          Offset off;
          if (t < start) {
            off = rest_offset(motion, false, amp);
          } else if (t >= start + M) {
            off = rest_offset(motion, true, amp);
          } else {
            off = motion_offset(motion, t - start, M, k, amp);
          }
          draw_glyph(frame, h, w, glyph, cy + off.dy, cx + off.dx, intensity);
          if (spec.distractors > 0) draw_glyph(frame, h, w, dglyph, dy, dx, intensity);
          for (std::size_t i = 0; i < h * w; ++i) {
            double v = frame[i] + spec.noise * rng.normal();
            s.frames[t * h * w + i] = static_cast<float>(std::clamp(v, -1.0, 1.0));
          }
        }
        d.samples.push_back(std::move(s));
      }
    }
  }
  return d;
}

Dataset gen_oa(const GridVideoSpec& spec, std::uint64_t seed) {
  if (spec.min_length != spec.max_length) {
    throw std::invalid_argument("gen_oa: sequences have a fixed length");
  }
  return generate(spec, seed, "oa");
}

Dataset gen_oam(const GridVideoSpec& spec, std::uint64_t seed) {
  if (!spec.has_modifiers()) throw std::invalid_argument("gen_oam: modifiers required");
  return generate(spec, seed, "oam");
}

Split split(const Dataset& data, std::size_t fold) {
  if (fold < 1 || fold > 3) throw std::invalid_argument("split: fold must be 1, 2 or 3");
  const std::size_t n = data.subjects;
  const std::size_t n_test =
      std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(0.2 * static_cast<double>(n))));
  if (n_test >= n) throw std::invalid_argument("split: need more subjects than test subjects");
  Split s;
  std::vector<bool> is_test(n, false);
  for (std::size_t i = 0; i < n_test; ++i) {
    const std::size_t subj = ((fold - 1) * n_test + i) % n;
    is_test[subj] = true;
    s.test_subjects.push_back(subj);
  }
  for (std::size_t i = 0; i < data.samples.size(); ++i) {
    (is_test[data.samples[i].subject] ? s.test : s.train).push_back(i);
  }
  return s;
}

CropFlip draw_augmentation(Prng& prng, std::size_t height, std::size_t width, std::size_t crop_h,
                           std::size_t crop_w, double flip_probability) {
  if (crop_h > height || crop_w > width) throw std::invalid_argument("augment: crop exceeds frame");
  CropFlip a;
  a.top = prng.below(height - crop_h + 1);
  a.left = prng.below(width - crop_w + 1);
  a.flip = prng.bernoulli(flip_probability);
  return a;
}

CropFlip center_crop(std::size_t height, std::size_t width, std::size_t crop_h, std::size_t crop_w) {
  if (crop_h > height || crop_w > width) throw std::invalid_argument("augment: crop exceeds frame");
  return {(height - crop_h) / 2, (width - crop_w) / 2, false};
}

std::vector<float> augment(const std::vector<float>& frames, std::size_t length, std::size_t height,
                           std::size_t width, std::size_t crop_h, std::size_t crop_w,
                           const CropFlip& a) {
  if (frames.size() != length * height * width) {
    throw std::invalid_argument("augment: frame buffer size mismatch");
  }
  if (a.top + crop_h > height || a.left + crop_w > width) {
    throw std::invalid_argument("augment: crop exceeds frame");
  }
  std::vector<float> out(length * crop_h * crop_w);
  for (std::size_t t = 0; t < length; ++t) {
    for (std::size_t y = 0; y < crop_h; ++y) {
      const float* src = frames.data() + (t * height + a.top + y) * width + a.left;
      float* dst = out.data() + (t * crop_h + y) * crop_w;
      for (std::size_t x = 0; x < crop_w; ++x) dst[x] = src[a.flip ? crop_w - 1 - x : x];
    }
  }
  return out;
}

std::vector<std::size_t> flipped_labels(const Dataset& data, const std::vector<std::size_t>& labels) {
  std::vector<std::size_t> out(labels.size());
  for (std::size_t h = 0; h < labels.size(); ++h) out[h] = data.flip_map.at(h).at(labels[h]);
  return out;
}

void export_dataset(const Dataset& data, const std::filesystem::path& dir) {
  static_assert(sizeof(float) == 4);
  std::filesystem::create_directories(dir);
  std::ofstream man(dir / "manifest.txt");
  man << "name " << data.name << "\n";
  man << "frame " << data.height << " " << data.width << "\n";
  man << "subjects " << data.subjects << "\n";
  for (std::size_t h = 0; h < data.head_names.size(); ++h) {
    man << "head " << data.head_names[h] << " " << data.head_classes[h] << " flip";
    for (std::size_t v : data.flip_map[h]) man << " " << v;
    man << "\n";
  }
  man << "# id subject length labels...\n";
  std::ofstream bin(dir / "frames.bin", std::ios::binary);
  for (const auto& s : data.samples) {
    man << "sample " << s.id << " " << s.subject << " " << s.length;
    for (std::size_t l : s.labels) man << " " << l;
    man << "\n";
    for (float f : s.frames) {
      std::uint32_t u = std::bit_cast<std::uint32_t>(f);
      if constexpr (std::endian::native == std::endian::big) u = swap_bytes(u);
      bin.write(reinterpret_cast<const char*>(&u), 4);
    }
  }
  if (!man || !bin) throw std::runtime_error("export_dataset: write failed in " + dir.string());
}

Dataset import_dataset(const std::filesystem::path& dir) {
  std::ifstream man(dir / "manifest.txt");
  std::ifstream bin(dir / "frames.bin", std::ios::binary);
  if (!man || !bin) throw std::runtime_error("import_dataset: missing files in " + dir.string());
  Dataset d;
  std::string line;
  while (std::getline(man, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream in(line);
    std::string key;
    in >> key;
    if (key == "name") {
      in >> d.name;
    } else if (key == "frame") {
      in >> d.height >> d.width;
    } else if (key == "subjects") {
      in >> d.subjects;
    } else if (key == "head") {
      std::string name, flip;
      std::size_t classes = 0;
      in >> name >> classes >> flip;
      d.head_names.push_back(name);
      d.head_classes.push_back(classes);
      std::vector<std::size_t> map(classes);
      for (auto& v : map) in >> v;
      d.flip_map.push_back(map);
    } else if (key == "sample") {
      Sample s;
      in >> s.id >> s.subject >> s.length;
      s.labels.resize(d.head_names.size());
      for (auto& l : s.labels) in >> l;
      s.frames.resize(s.length * d.height * d.width);
      for (auto& f : s.frames) {
        std::uint32_t u = 0;
        bin.read(reinterpret_cast<char*>(&u), 4);
        if constexpr (std::endian::native == std::endian::big) u = swap_bytes(u);
        f = std::bit_cast<float>(u);
      }
      d.samples.push_back(std::move(s));
    } else {
      throw std::runtime_error("import_dataset: unknown manifest key '" + key + "'");
    }
    if (!in && !in.eof()) throw std::runtime_error("import_dataset: malformed line: " + line);
  }
  if (!bin) throw std::runtime_error("import_dataset: frames.bin truncated");
  return d;
}

}  // namespace detrend::tasks
