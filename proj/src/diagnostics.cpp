#include "detrend/diagnostics.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>
#include <stdexcept>

#include "detrend/trainer.hpp"

namespace detrend::diag {

std::size_t Histogram::bin_of(double v) {
  if (std::isnan(v)) throw NumericError("histogram: NaN observation");
  if (v <= -1.0) return 0;
  if (v >= 1.0) return kBins - 1;
  const auto b = static_cast<std::size_t>(std::floor((v + 1.0) * 100.0));
  return std::min(b, kBins - 1);
}

double Histogram::bin_lo(std::size_t bin) { return -1.0 + static_cast<double>(bin) * 0.01; }

void Histogram::add(double v) {
  ++counts[bin_of(v)];
  ++total;
}

double shift_metric(const Histogram& a, const Histogram& b) {
  if (a.total == 0 || b.total == 0) throw std::invalid_argument("shift_metric: empty histogram");
  double tv = 0.0;
  for (std::size_t i = 0; i < kBins; ++i) {
    tv += std::abs(static_cast<double>(a.counts[i]) / static_cast<double>(a.total) -
                   static_cast<double>(b.counts[i]) / static_cast<double>(b.total));
  }
  return 0.5 * tv;
}

void NormTrace::push(std::size_t iteration, double raw) {
  const double s =
      entries_.empty() ? raw : decay_ * entries_.back().smoothed + (1.0 - decay_) * raw;
  entries_.push_back({iteration, raw, s});
}

std::string NeuronSelector::label() const {
  return "layer" + std::to_string(layer) + ":" + std::to_string(channel) + ":" +
         std::to_string(row) + ":" + std::to_string(col);
}

NeuronSelector NeuronSelector::parse(const std::string& text) {
  std::vector<std::string> parts;
  std::istringstream in(text);
  for (std::string p; std::getline(in, p, ':');) parts.push_back(p);
  auto bad = [&] {
    return std::invalid_argument("selector '" + text + "': expected layerL:channel:row:col");
  };
  if (parts.size() != 4 || parts[0].rfind("layer", 0) != 0) throw bad();
  auto number = [&](const std::string& s) {
    if (s.empty() || s.find_first_not_of("0123456789") != std::string::npos) throw bad();
    return static_cast<std::size_t>(std::stoul(s));
  };
  return {number(parts[0].substr(5)), number(parts[1]), number(parts[2]), number(parts[3])};
}

void validate_selector(const NetworkConfig& config, const NeuronSelector& s) {
  if (config.model != ModelKind::convgru) {
    throw std::invalid_argument("selector: model has no recurrent layers");
  }
  if (s.layer != 3 && s.layer != 5) {
    throw std::invalid_argument("selector " + s.label() + ": recurrent layers are 3 and 5");
  }
  const auto chain = shape_chain(config);
  const LayerShape& shape = chain[s.layer == 3 ? 2 : 4];
  if (s.channel >= shape.channels || s.row >= shape.height || s.col >= shape.width) {
    throw std::invalid_argument("selector " + s.label() + " out of range for " +
                                std::to_string(shape.channels) + "x" +
                                std::to_string(shape.height) + "x" + std::to_string(shape.width));
  }
}

std::vector<NeuronSelector> default_selectors(const NetworkConfig& config, std::size_t k) {
  const auto chain = shape_chain(config);
  const LayerShape& shape = chain[2];
  std::vector<NeuronSelector> out;
  for (std::size_t c = 0; c < std::min(k, shape.channels); ++c) {
    out.push_back({3, c, shape.height / 2, shape.width / 2});
  }
  return out;
}

namespace {

struct Probe {
  double h_tilde, h, z, y;
};

// Runs the network on `indices` and calls fn(sample position, t, probe) for
// every selector at every valid step.
template <typename Fn>
void probe_batches(ModelState& model, const tasks::Dataset& data,
                   const std::vector<std::size_t>& indices,
                   const std::vector<NeuronSelector>& selectors, std::size_t crop,
                   Precision precision, std::size_t batch_size, Fn fn) {
  for (const auto& s : selectors) validate_selector(model.config, s);
  const auto cc = tasks::center_crop(data.height, data.width, crop, crop);
  ag::ParamSet params = model.params;
  for (auto& [_, t] : params) t.set_precision(precision);
  for (std::size_t i = 0; i < indices.size(); i += batch_size) {
    const std::vector<std::size_t> idx(
        indices.begin() + static_cast<long>(i),
        indices.begin() + static_cast<long>(std::min(indices.size(), i + batch_size)));
    VideoBatch batch =
        make_batch(data, idx, std::vector<tasks::CropFlip>(idx.size(), cc), crop, precision);
    ag::Tape tape(precision);
    auto vars = ag::register_constants(tape, params);
    ForwardResult r = forward_video(model, tape, vars, batch, norm::Mode::eval);
    for (std::size_t si = 0; si < selectors.size(); ++si) {
      const NeuronSelector& sel = selectors[si];
      const LayerTrace& layer = r.layers[sel.layer == 3 ? 0 : 1];
      for (std::size_t t = 0; t < layer.steps.size(); ++t) {
        const StepVars& st = layer.steps[t];
        const Shape& shape = st.h.shape();
        for (std::size_t k = 0; k < idx.size(); ++k) {
          if (!batch.masks[t][k]) continue;
          const std::size_t off = ((k * shape[1] + sel.channel) * shape[2] + sel.row) * shape[3] + sel.col;
          Probe p;
          p.h_tilde = st.h_tilde.value()[off];
          p.h = st.h.value()[off];
          p.z = st.z.value()[off];
          p.y = st.y.valid() ? st.y.value()[off] : round_to(precision, p.h_tilde - p.h);
          fn(i + k, si, t, p);
        }
      }
    }
  }
}

}  // namespace

std::vector<NeuronHistograms> record_histograms(ModelState& model, const tasks::Dataset& data,
                                                const std::vector<std::size_t>& indices,
                                                std::size_t epoch,
                                                const std::vector<NeuronSelector>& selectors,
                                                std::size_t crop, Precision precision,
                                                std::size_t batch_size) {
  std::vector<NeuronHistograms> out(selectors.size());
  for (std::size_t i = 0; i < selectors.size(); ++i) {
    out[i].hidden.epoch = out[i].detrended.epoch = epoch;
    out[i].hidden.neuron = selectors[i].label() + ":h";
    out[i].detrended.neuron = selectors[i].label() + ":y";
  }
  probe_batches(model, data, indices, selectors, crop, precision, batch_size,
                [&](std::size_t, std::size_t si, std::size_t, const Probe& p) {
                  out[si].hidden.add(p.h);
                  out[si].detrended.add(p.y);
                });
  return out;
}

std::vector<NeuronTraceRow> record_neuron_trace(ModelState& model, const tasks::Dataset& data,
                                                std::size_t sample, const NeuronSelector& s,
                                                std::size_t crop, Precision precision) {
  if (sample >= data.samples.size()) throw std::out_of_range("neuron trace: sample out of range");
  std::vector<NeuronTraceRow> rows;
  probe_batches(model, data, {sample}, {s}, crop, precision, 1,
                [&](std::size_t, std::size_t, std::size_t t, const Probe& p) {
                  rows.push_back({t, p.h_tilde, p.h, p.z, p.y});
                });
  return rows;
}

namespace {
std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}
}  // namespace

void write_histograms_csv(std::ostream& os, const std::vector<Histogram>& hists) {
  os << "epoch,neuron,bin_lo,count\n";
  for (const auto& h : hists) {
    for (std::size_t b = 0; b < kBins; ++b) {
      os << h.epoch << "," << h.neuron << "," << num(Histogram::bin_lo(b)) << "," << h.counts[b]
         << "\n";
    }
  }
}

void write_trace_csv(std::ostream& os, const NormTrace& trace) {
  os << "iter,raw,smoothed\n";
  for (const auto& e : trace.entries()) {
    os << e.iteration << "," << num(e.raw) << "," << num(e.smoothed) << "\n";
  }
}

void write_neuron_trace_csv(std::ostream& os, const std::vector<NeuronTraceRow>& rows) {
  os << "t,h_tilde,h,z,y\n";
  for (const auto& r : rows) {
    os << r.t << "," << num(r.h_tilde) << "," << num(r.h) << "," << num(r.z) << "," << num(r.y)
       << "\n";
  }
}

}  // namespace detrend::diag
