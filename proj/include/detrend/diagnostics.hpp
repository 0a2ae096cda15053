#pragma once

#include <array>
#include <cstdint>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "detrend/network.hpp"
#include "detrend/tasks.hpp"

namespace detrend::diag {

inline constexpr std::size_t kBins = 200;  // width 0.01 on [-1, 1]

struct Histogram {
  std::size_t epoch = 0;
  std::string neuron;
  std::array<std::uint64_t, kBins> counts{};
  std::uint64_t total = 0;

  static std::size_t bin_of(double v);  // values outside [-1, 1] land in the edge bins
  static double bin_lo(std::size_t bin);
  void add(double v);
};

// Total-variation distance between the normalized histograms.
double shift_metric(const Histogram& a, const Histogram& b);

class NormTrace {
 public:
  struct Entry {
    std::size_t iteration;
    double raw;
    double smoothed;
  };

  explicit NormTrace(double decay = 0.99) : decay_(decay) {}

  // Smoothing starts at the first raw value.
  void push(std::size_t iteration, double raw);
  void restore(std::vector<Entry> entries) { entries_ = std::move(entries); }
  const std::vector<Entry>& entries() const { return entries_; }
  double decay() const { return decay_; }

 private:
  double decay_;
  std::vector<Entry> entries_;
};

// A unit of a recurrent layer: layer3 or layer5, channel, spatial position.
struct NeuronSelector {
  std::size_t layer = 3;
  std::size_t channel = 0;
  std::size_t row = 0, col = 0;

  std::string label() const;  // "layer3:c:r:c"
  static NeuronSelector parse(const std::string& text);
};

// First k channels of the lower recurrent layer at the centre position.
std::vector<NeuronSelector> default_selectors(const NetworkConfig& config, std::size_t k = 8);
void validate_selector(const NetworkConfig& config, const NeuronSelector& s);

struct NeuronHistograms {
  Histogram hidden;      // h
  Histogram detrended;   // y = h_tilde - h
};

// Histograms of h and y for each selected neuron over every valid step of
// the given samples (centre crop, evaluation mode).
std::vector<NeuronHistograms> record_histograms(ModelState& model, const tasks::Dataset& data,
                                                const std::vector<std::size_t>& indices,
                                                std::size_t epoch,
                                                const std::vector<NeuronSelector>& selectors,
                                                std::size_t crop, Precision precision,
                                                std::size_t batch_size = 8);

struct NeuronTraceRow {
  std::size_t t;
  double h_tilde, h, z, y;
};

std::vector<NeuronTraceRow> record_neuron_trace(ModelState& model, const tasks::Dataset& data,
                                                std::size_t sample, const NeuronSelector& s,
                                                std::size_t crop, Precision precision);

void write_histograms_csv(std::ostream& os, const std::vector<Histogram>& hists);
void write_trace_csv(std::ostream& os, const NormTrace& trace);
void write_neuron_trace_csv(std::ostream& os, const std::vector<NeuronTraceRow>& rows);

}  // namespace detrend::diag
