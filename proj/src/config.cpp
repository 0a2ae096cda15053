#include "detrend/config.hpp"

#include "detrend/diagnostics.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>

namespace detrend {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream in(s);
  for (std::string item; std::getline(in, item, ',');) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

template <typename T>
std::string join(const std::vector<T>& v, const std::function<std::string(const T&)>& f) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + f(v[i]);
  return out;
}

double as_double(const std::string& key, const std::string& v) {
  double out = 0.0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) {
    throw ConfigError(key + ": expected a number, got '" + v + "'");
  }
  return out;
}

std::uint64_t as_u64(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) {
    throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
  }
  return out;
}

bool as_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError(key + ": expected true or false, got '" + v + "'");
}

template <typename F>
auto wrap(const std::string& key, F&& f) {
  try {
    return f();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(key + ": " + e.what());
  }
}

}  // namespace

std::string format_double(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

tasks::GridVideoSpec TaskConfig::spec() const {
  tasks::GridVideoSpec s;
  if (name == "oa") {
    s = tasks::oa_spec();
  } else if (name == "oam") {
    s = tasks::oam_spec();
  } else {
    throw ConfigError("task.name: expected oa or oam, got '" + name + "'");
  }
  s.subjects = subjects;
  s.repetitions = repetitions;
  if (min_length) s.min_length = min_length;
  if (max_length) s.max_length = max_length;
  if (motion_frames) s.motion_frames = motion_frames;
  s.max_trailing = max_trailing;
  s.amplitude = amplitude;
  s.noise = noise;
  s.distractors = distractors;
  return s;
}

NetworkConfig ExperimentConfig::network_for(NormMethod m,
                                            const std::vector<std::size_t>& heads) const {
  NetworkConfig c = network;
  c.norm = m;
  c.heads = heads;
  return c;
}

std::map<std::string, std::string> ExperimentConfig::to_map() const {
  const NetworkConfig& n = network;
  std::map<std::string, std::string> kv;
  kv["task.name"] = task.name;
  kv["task.seed"] = std::to_string(task.seed);
  kv["task.subjects"] = std::to_string(task.subjects);
  kv["task.repetitions"] = std::to_string(task.repetitions);
  kv["task.min_length"] = std::to_string(task.min_length);
  kv["task.max_length"] = std::to_string(task.max_length);
  kv["task.motion_frames"] = std::to_string(task.motion_frames);
  kv["task.max_trailing"] = std::to_string(task.max_trailing);
  kv["task.amplitude"] = format_double(task.amplitude);
  kv["task.noise"] = format_double(task.noise);
  kv["task.distractors"] = std::to_string(task.distractors);
  kv["network.preset"] = preset;
  kv["network.model"] = std::string(to_string(n.model));
  kv["network.input"] =
      std::to_string(n.channels) + "x" + std::to_string(n.height) + "x" + std::to_string(n.width);
  kv["network.conv1_channels"] = std::to_string(n.conv1_channels);
  kv["network.conv1_kernel"] = std::to_string(n.conv1_kernel);
  kv["network.conv1_stride"] = std::to_string(n.conv1_stride);
  kv["network.conv1_pad"] = std::to_string(n.conv1_pad);
  kv["network.pool1"] = std::to_string(n.pool1);
  kv["network.gru1_channels"] = std::to_string(n.gru1_channels);
  kv["network.gru2_channels"] = std::to_string(n.gru2_channels);
  kv["network.gru_kernel"] = std::to_string(n.gru_kernel);
  kv["network.pool2"] = std::to_string(n.pool2);
  kv["network.scale"] = format_double(n.scale);
  kv["network.sigma"] = format_double(n.sigma);
  kv["network.sampled_frames"] = std::to_string(n.sampled_frames);
  kv["norm.method"] = join<NormMethod>(norms, [](const NormMethod& m) {
    return std::string(to_string(m));
  });
  kv["norm.placement"] = std::string(to_string(n.placement));
  kv["norm.update_bias"] = format_double(n.update_bias);
  kv["train.lr"] = format_double(train.learning_rate);
  kv["train.momentum"] = format_double(train.momentum);
  kv["train.batch_size"] = std::to_string(train.batch_size);
  kv["train.weight_decay"] = format_double(train.weight_decay);
  kv["train.clip"] = format_double(train.clip_threshold);
  kv["train.epochs"] = std::to_string(train.epochs);
  kv["train.precision"] = std::string(to_string(train.precision));
  kv["train.augment"] = train.augment ? "true" : "false";
  kv["train.crop"] = std::to_string(train.crop);
  kv["train.folds"] = join<std::size_t>(folds, [](const std::size_t& f) { return std::to_string(f); });
  kv["train.checkpoint_every"] = std::to_string(checkpoint_every);
  kv["diag.neurons"] = std::to_string(diag.neurons);
  kv["diag.selectors"] = join<std::string>(diag.selectors, [](const std::string& s) { return s; });
  kv["diag.histograms"] = diag.histograms ? "true" : "false";
  kv["diag.traces"] = diag.traces ? "true" : "false";
  kv["seed"] = std::to_string(train.seed);
  kv["out"] = out;
  kv["threads"] = std::to_string(threads);
  return kv;
}

std::string ExperimentConfig::to_text() const {
  std::string out;
  for (const auto& [k, v] : to_map()) out += k + " = " + v + "\n";
  return out;
}

ExperimentConfig ExperimentConfig::from_map(const std::map<std::string, std::string>& kv) {
  ExperimentConfig c;
  if (auto it = kv.find("network.preset"); it != kv.end()) {
    c.preset = it->second;
    if (c.preset == "table1") {
      c.network = NetworkConfig::table1({15});
    } else if (c.preset != "desk") {
      throw ConfigError("network.preset: expected desk or table1, got '" + c.preset + "'");
    }
  }
  NetworkConfig& n = c.network;
  using Setter = std::function<void(const std::string&, const std::string&)>;
  auto sz = [](std::size_t& f) -> Setter {
    return [&f](const std::string& k, const std::string& v) { f = as_u64(k, v); };
  };
  auto dbl = [](double& f) -> Setter {
    return [&f](const std::string& k, const std::string& v) { f = as_double(k, v); };
  };
  auto flag = [](bool& f) -> Setter {
    return [&f](const std::string& k, const std::string& v) { f = as_bool(k, v); };
  };
  const std::map<std::string, Setter> setters = {
      {"task.name", [&](const std::string&, const std::string& v) { c.task.name = v; }},
      {"task.seed", [&](const std::string& k, const std::string& v) { c.task.seed = as_u64(k, v); }},
      {"task.subjects", sz(c.task.subjects)},
      {"task.repetitions", sz(c.task.repetitions)},
      {"task.min_length", sz(c.task.min_length)},
      {"task.max_length", sz(c.task.max_length)},
      {"task.motion_frames", sz(c.task.motion_frames)},
      {"task.max_trailing", sz(c.task.max_trailing)},
      {"task.amplitude", dbl(c.task.amplitude)},
      {"task.noise", dbl(c.task.noise)},
      {"task.distractors", sz(c.task.distractors)},
      {"network.preset", [](const std::string&, const std::string&) {}},
      {"network.model",
       [&](const std::string& k, const std::string& v) {
         n.model = wrap(k, [&] { return parse_model_kind(v); });
       }},
      {"network.input",
       [&](const std::string& k, const std::string& v) {
         std::size_t a = 0, b = 0, d = 0;
         char x1 = 0, x2 = 0;
         std::istringstream in(v);
         if (!(in >> a >> x1 >> b >> x2 >> d) || x1 != 'x' || x2 != 'x' || in.peek() != EOF) {
           throw ConfigError(k + ": expected CxHxW, got '" + v + "'");
         }
         n.channels = a;
         n.height = b;
         n.width = d;
       }},
      {"network.conv1_channels", sz(n.conv1_channels)},
      {"network.conv1_kernel", sz(n.conv1_kernel)},
      {"network.conv1_stride", sz(n.conv1_stride)},
      {"network.conv1_pad", sz(n.conv1_pad)},
      {"network.pool1", sz(n.pool1)},
      {"network.gru1_channels", sz(n.gru1_channels)},
      {"network.gru2_channels", sz(n.gru2_channels)},
      {"network.gru_kernel", sz(n.gru_kernel)},
      {"network.pool2", sz(n.pool2)},
      {"network.scale", dbl(n.scale)},
      {"network.sigma", dbl(n.sigma)},
      {"network.sampled_frames", sz(n.sampled_frames)},
      {"norm.method",
       [&](const std::string& k, const std::string& v) {
         c.norms.clear();
         for (const auto& item : split_list(v)) {
           c.norms.push_back(wrap(k, [&] { return parse_norm_method(item); }));
         }
       }},
      {"norm.placement",
       [&](const std::string& k, const std::string& v) {
         n.placement = wrap(k, [&] { return parse_placement(v); });
       }},
      {"norm.update_bias", dbl(n.update_bias)},
      {"train.lr", dbl(c.train.learning_rate)},
      {"train.momentum", dbl(c.train.momentum)},
      {"train.batch_size", sz(c.train.batch_size)},
      {"train.weight_decay", dbl(c.train.weight_decay)},
      {"train.clip", dbl(c.train.clip_threshold)},
      {"train.epochs", sz(c.train.epochs)},
      {"train.precision",
       [&](const std::string& k, const std::string& v) {
         c.train.precision = wrap(k, [&] { return parse_precision(v); });
       }},
      {"train.augment", flag(c.train.augment)},
      {"train.crop", sz(c.train.crop)},
      {"train.folds",
       [&](const std::string& k, const std::string& v) {
         c.folds.clear();
         for (const auto& item : split_list(v)) c.folds.push_back(as_u64(k, item));
       }},
      {"train.checkpoint_every", sz(c.checkpoint_every)},
      {"diag.neurons", sz(c.diag.neurons)},
      {"diag.selectors",
       [&](const std::string&, const std::string& v) { c.diag.selectors = split_list(v); }},
      {"diag.histograms", flag(c.diag.histograms)},
      {"diag.traces", flag(c.diag.traces)},
      {"seed", [&](const std::string& k, const std::string& v) { c.train.seed = as_u64(k, v); }},
      {"out", [&](const std::string&, const std::string& v) { c.out = v; }},
      {"threads", sz(c.threads)},
  };
  for (const auto& [k, v] : kv) {
    auto it = setters.find(k);
    if (it == setters.end()) throw ConfigError(k + ": unknown key");
    it->second(k, v);
  }
  c.validate();
  return c;
}

void ExperimentConfig::validate() const {
  wrap("task", [&] {
    task.spec().validate();
    return 0;
  });
  if (norms.empty()) throw ConfigError("norm.method: at least one method required");
  if (folds.empty()) throw ConfigError("train.folds: at least one fold required");
  for (std::size_t f : folds) {
    if (f < 1 || f > 3) throw ConfigError("train.folds: folds are 1, 2 or 3");
  }
  if (threads == 0) throw ConfigError("threads: must be positive");
  wrap("train", [&] {
    train.validate();
    return 0;
  });
  NetworkConfig probe = network;
  probe.heads = {2};
  wrap("network", [&] {
    probe.validate();
    return 0;
  });
  if (probe.height != train.crop) {
    throw ConfigError("train.crop: must equal the network input height (" +
                      std::to_string(probe.height) + ")");
  }
  if (probe.height != probe.width) throw ConfigError("network.input: frames must be square");
  for (const auto& s : diag.selectors) {
    wrap("diag.selectors", [&] {
      diag::NeuronSelector::parse(s);
      return 0;
    });
  }
}

std::map<std::string, std::string> parse_key_values(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::istringstream in(text);
  std::size_t line_no = 0;
  for (std::string line; std::getline(in, line);) {
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(line_no) + ": expected key = value");
    }
    const std::string key = trim(line.substr(0, eq));
    if (key.empty()) throw ConfigError("line " + std::to_string(line_no) + ": empty key");
    kv[key] = trim(line.substr(eq + 1));
  }
  return kv;
}

void apply_override(std::map<std::string, std::string>& kv, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || trim(assignment.substr(0, eq)).empty()) {
    throw ConfigError("--set " + assignment + ": expected key=value");
  }
  kv[trim(assignment.substr(0, eq))] = trim(assignment.substr(eq + 1));
}

ExperimentConfig config_from_text(const std::string& text, const std::vector<std::string>& overrides) {
  auto kv = parse_key_values(text);
  for (const auto& o : overrides) apply_override(kv, o);
  return ExperimentConfig::from_map(kv);
}

ExperimentConfig load_config(const std::filesystem::path& path,
                             const std::vector<std::string>& overrides) {
  std::ifstream in(path);
  if (!in) throw ConfigError("--config: cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return config_from_text(ss.str(), overrides);
}

tasks::Dataset load_or_generate(const TaskConfig& task, const std::filesystem::path& cache_dir) {
  const auto spec = task.spec();
  auto make = [&] {
    return task.name == "oa" ? tasks::gen_oa(spec, task.seed) : tasks::gen_oam(spec, task.seed);
  };
  if (cache_dir.empty()) return make();
  // Cache key: the full task configuration.
  std::string key = task.name + "-s" + std::to_string(task.seed) + "-n" +
                    std::to_string(task.subjects) + "x" + std::to_string(task.repetitions) +
                    "-t" + std::to_string(spec.min_length) + "_" + std::to_string(spec.max_length) +
                    "-m" + std::to_string(spec.motion_frames) + "r" +
                    std::to_string(spec.max_trailing) + "-a" + format_double(task.amplitude) +
                    "-z" + format_double(task.noise) + "-d" + std::to_string(task.distractors);
  const auto dir = cache_dir / key;
  if (std::filesystem::exists(dir / "manifest.txt")) return tasks::import_dataset(dir);
  auto data = make();
  tasks::export_dataset(data, dir);
  return data;
}

}  // namespace detrend
