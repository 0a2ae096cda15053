#pragma once

#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "detrend/checkpoint.hpp"
#include "detrend/config.hpp"
#include "detrend/diagnostics.hpp"

namespace detrend {

// One (norm method, fold) training run of an experiment.
struct RunSpec {
  NormMethod norm = NormMethod::ad;
  std::size_t fold = 1;
  std::filesystem::path dir;                      // output directory of this run
  std::optional<std::filesystem::path> resume;    // checkpoint to continue from
  std::ostream* log = nullptr;                    // per-epoch progress lines
};

struct TvRow {
  std::string neuron;
  double tv_hidden = 0.0;
  double tv_detrended = 0.0;
};

struct RunResult {
  std::vector<EpochMetrics> metrics;
  diag::NormTrace grad_norm;
  diag::NormTrace detrended_l2;
  std::vector<diag::NeuronHistograms> first_histograms;  // after epoch 1
  std::vector<diag::NeuronHistograms> final_histograms;  // after the last epoch
  std::vector<TvRow> tv;
};

// Directory name of a run below the experiment output directory.
std::string run_label(const ExperimentConfig& config, NormMethod norm);

// Trains one run and writes into spec.dir:
//   config.txt, metrics.csv, timing.csv,
//   traces/grad_norm.csv, traces/detrended_l2.csv        (diag.traces)
//   histograms.csv, tv.csv                               (diag.histograms, ConvGRU)
//   checkpoints/epoch_<n>.ckpt every checkpoint_every epochs, checkpoints/final.ckpt.
// A non-finite loss writes checkpoints/abort.ckpt and rethrows NumericError.
RunResult run_training(const ExperimentConfig& config, const tasks::Dataset& data,
                       const RunSpec& spec);

// Model of a run checkpoint, rebuilt from the configuration stored in it.
struct LoadedModel {
  ExperimentConfig config;
  NormMethod norm = NormMethod::none;
  std::size_t fold = 1;
  ModelState model;
};

ExperimentConfig checkpoint_config(const Checkpoint& ckpt);
LoadedModel load_model(const Checkpoint& ckpt, const tasks::Dataset& data);

// The run history stored alongside the trainer state in checkpoints.
void put_history(Checkpoint& ckpt, const RunResult& r);
void get_history(const Checkpoint& ckpt, RunResult& r);

void write_tv_csv(std::ostream& os, const std::vector<TvRow>& rows);
std::vector<TvRow> tv_rows(const std::vector<diag::NeuronHistograms>& first,
                           const std::vector<diag::NeuronHistograms>& last);

}  // namespace detrend
