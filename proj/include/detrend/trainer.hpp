#pragma once

#include <functional>
#include <ostream>
#include <vector>

#include "detrend/network.hpp"
#include "detrend/tasks.hpp"

namespace detrend {

struct TrainConfig {
  double learning_rate = 0.01;
  double momentum = 0.9;
  std::size_t batch_size = 8;
  double weight_decay = 0.0005;
  double clip_threshold = 10.0;
  std::size_t epochs = 100;
  std::uint64_t seed = 1;
  Precision precision = Precision::f32;
  std::size_t fold = 1;
  bool augment = true;
  std::size_t crop = 28;  // square crop taken from each raw frame

  void validate() const;
};

struct OptState {
  ag::ParamSet velocity;  // zeros shaped like the parameters
  static OptState zeros_like(const ag::ParamSet& params);
  bool operator==(const OptState&) const;
};

// -sum_heads log p_hat[label], with p_hat floored at 1e-12.
double nll_loss(const std::vector<std::vector<double>>& predictions,
                const std::vector<std::size_t>& labels);

// T_max / T_i.
double length_weight(std::size_t t_i, std::size_t t_max);

// Rescales all gradients together when their global L2 norm exceeds the
// threshold. Returns the norm before clipping.
double clip_gradient(ag::ParamSet& grads, double threshold);
double global_norm(const ag::ParamSet& grads);

// Adds weight_decay * theta to the gradient of every weight tensor.
void add_weight_decay(ag::ParamSet& grads, const ag::ParamSet& params, double weight_decay);

// v <- mu v - lr g;  theta <- theta + mu v - lr g
void nag_update(ag::ParamSet& params, const ag::ParamSet& grads, OptState& opt, double lr,
                double momentum);

struct BatchLabels {
  std::vector<std::vector<std::size_t>> per_head;  // [head][sample]
};

// Crops (and optionally flips) every sample and pads to the longest length.
VideoBatch make_batch(const tasks::Dataset& data, const std::vector<std::size_t>& indices,
                      const std::vector<tasks::CropFlip>& aug, std::size_t crop,
                      Precision precision, BatchLabels* labels = nullptr);

struct EvalResult {
  std::size_t samples = 0;
  double loss = 0.0;             // mean nll
  std::vector<double> head_acc;  // fraction correct per head
  double joint_acc = 0.0;        // all heads correct
};

struct EpochMetrics {
  std::size_t epoch = 0;
  std::size_t fold = 1;
  double train_loss = 0.0;
  std::vector<double> train_acc;
  double train_joint = 0.0;
  std::vector<double> test_acc;
  double test_joint = 0.0;
  double wall_time = 0.0;
};

struct IterationInfo {
  std::size_t iteration = 0;  // 1-based, counted across epochs
  double loss = 0.0;
  double grad_norm = 0.0;     // before clipping
  bool has_detrended = false;
  double detrended_l2 = 0.0;  // mean over valid (sample, step) of ||y||
};

struct TrainHooks {
  std::function<void(const IterationInfo&)> on_iteration;
};

class Trainer {
 public:
  Trainer(ModelState& model, const tasks::Dataset& data, tasks::Split split, TrainConfig config);

  EpochMetrics train_epoch(const TrainHooks& hooks = {});
  EvalResult evaluate(const std::vector<std::size_t>& indices);

  const TrainConfig& config() const { return config_; }
  const tasks::Split& split() const { return split_; }
  ModelState& model() { return model_; }
  OptState& opt() { return opt_; }
  Prng& prng() { return prng_; }
  std::size_t epoch() const { return epoch_; }
  std::size_t iteration() const { return iteration_; }
  void restore_counters(std::size_t epoch, std::size_t iteration) {
    epoch_ = epoch;
    iteration_ = iteration;
  }

 private:
  std::vector<std::vector<std::size_t>> make_batches();

  ModelState& model_;
  const tasks::Dataset& data_;
  tasks::Split split_;
  TrainConfig config_;
  OptState opt_;
  Prng prng_;
  std::size_t epoch_ = 0;
  std::size_t iteration_ = 0;
};

// Epoch metrics CSV (deterministic; wall-clock time is written separately).
void write_metrics_header(std::ostream& os, const std::vector<std::string>& head_names);
void write_metrics_row(std::ostream& os, const EpochMetrics& m);

// First epoch whose joint training accuracy reaches `threshold`; returns
// metrics.size() + 1 when never reached.
std::size_t epochs_to_accuracy(const std::vector<EpochMetrics>& metrics, double threshold);

}  // namespace detrend
