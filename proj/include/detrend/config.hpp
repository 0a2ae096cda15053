#pragma once

#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "detrend/network.hpp"
#include "detrend/tasks.hpp"
#include "detrend/trainer.hpp"

namespace detrend {

// Invalid configuration; the message starts with the offending key.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct TaskConfig {
  std::string name = "oam";  // oa | oam
  std::uint64_t seed = 7;
  std::size_t subjects = 10;
  std::size_t repetitions = 2;
  std::size_t min_length = 0;     // 0 keeps the task default
  std::size_t max_length = 0;
  std::size_t motion_frames = 0;
  std::size_t max_trailing = 5;   // rest frames after the motion; 0 = no limit
  double amplitude = 7.0;
  double noise = 0.05;
  std::size_t distractors = 1;

  tasks::GridVideoSpec spec() const;
};

struct DiagConfig {
  std::size_t neurons = 8;                // default selectors when `selectors` is empty
  std::vector<std::string> selectors;     // layerL:channel:row:col
  bool histograms = true;                 // epoch-1 and final-epoch histograms
  bool traces = true;                     // per-iteration gradient / detrended norms
};

struct ExperimentConfig {
  TaskConfig task;
  NetworkConfig network = NetworkConfig::desk({2, 2, 3});
  std::string preset = "desk";  // desk | table1
  std::vector<NormMethod> norms{NormMethod::ad};
  TrainConfig train{.learning_rate = 0.03, .epochs = 30};
  std::vector<std::size_t> folds{1};
  std::size_t checkpoint_every = 0;  // epochs; 0 = final only
  DiagConfig diag;
  std::string out = "runs/default";
  std::size_t threads = 1;

  // Network configuration for one entry of `norms`.
  NetworkConfig network_for(NormMethod m, const std::vector<std::size_t>& heads) const;

  std::map<std::string, std::string> to_map() const;
  std::string to_text() const;
  static ExperimentConfig from_map(const std::map<std::string, std::string>& kv);
  void validate() const;
};

// Parses "key = value" lines ('#' starts a comment).
std::map<std::string, std::string> parse_key_values(const std::string& text);
void apply_override(std::map<std::string, std::string>& kv, const std::string& assignment);

ExperimentConfig load_config(const std::filesystem::path& path,
                             const std::vector<std::string>& overrides = {});
ExperimentConfig config_from_text(const std::string& text,
                                  const std::vector<std::string>& overrides = {});

// Dataset for a task config, cached under `cache_dir` when non-empty.
tasks::Dataset load_or_generate(const TaskConfig& task, const std::filesystem::path& cache_dir);

std::string format_double(double v);  // shortest round-tripping text

}  // namespace detrend
