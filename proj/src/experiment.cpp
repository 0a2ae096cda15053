#include "detrend/experiment.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

namespace detrend {

namespace fs = std::filesystem;

namespace {

// Keys that may differ between a run and the run it resumes.
bool resumable_difference(const std::string& key) {
  return key == "out" || key == "threads" || key == "train.epochs" ||
         key == "train.checkpoint_every";
}

void check_resume_config(const std::string& saved, const ExperimentConfig& current) {
  const auto a = parse_key_values(saved);
  const auto b = current.to_map();
  for (const auto& [k, v] : b) {
    if (resumable_difference(k)) continue;
    auto it = a.find(k);
    if (it == a.end() || it->second != v) {
      throw ConfigError("--resume: checkpoint was written with a different " + k);
    }
  }
}

std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

template <typename Fn>
void write_file(const fs::path& path, Fn fn) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  fn(os);
}

std::vector<diag::NeuronSelector> selectors_for(const ExperimentConfig& config,
                                                const NetworkConfig& net) {
  if (config.diag.selectors.empty()) return diag::default_selectors(net, config.diag.neurons);
  std::vector<diag::NeuronSelector> out;
  for (const auto& s : config.diag.selectors) out.push_back(diag::NeuronSelector::parse(s));
  return out;
}

void put_histograms(Checkpoint& c, const std::string& prefix,
                    const std::vector<diag::NeuronHistograms>& hs) {
  std::string labels;
  for (std::size_t i = 0; i < hs.size(); ++i) {
    const std::string p = prefix + std::to_string(i) + "/";
    c.put_u64(p + "h", {hs[i].hidden.counts.begin(), hs[i].hidden.counts.end()});
    c.put_u64(p + "y", {hs[i].detrended.counts.begin(), hs[i].detrended.counts.end()});
    c.put_u64(p + "epoch", {hs[i].hidden.epoch});
    labels += hs[i].hidden.neuron + "\n" + hs[i].detrended.neuron + "\n";
  }
  c.put_text(prefix + "labels", labels);
}

std::vector<diag::NeuronHistograms> get_histograms(const Checkpoint& c, const std::string& prefix) {
  std::vector<diag::NeuronHistograms> out;
  if (!c.has(prefix + "labels")) return out;
  std::istringstream labels(c.get_text(prefix + "labels"));
  auto fill = [&](diag::Histogram& h, const std::string& key, std::size_t epoch) {
    const auto counts = c.get_u64(key);
    if (counts.size() != diag::kBins) throw std::runtime_error("checkpoint: bad histogram " + key);
    std::getline(labels, h.neuron);
    h.epoch = epoch;
    h.total = 0;
    for (std::size_t b = 0; b < diag::kBins; ++b) {
      h.counts[b] = counts[b];
      h.total += counts[b];
    }
  };
  for (std::size_t i = 0; c.has(prefix + std::to_string(i) + "/h"); ++i) {
    const std::string p = prefix + std::to_string(i) + "/";
    const auto epoch = c.get_u64(p + "epoch").at(0);
    diag::NeuronHistograms nh;
    fill(nh.hidden, p + "h", epoch);
    fill(nh.detrended, p + "y", epoch);
    out.push_back(std::move(nh));
  }
  return out;
}

void put_trace(Checkpoint& c, const std::string& name, const diag::NormTrace& t) {
  std::vector<double> v;
  for (const auto& e : t.entries()) v.insert(v.end(), {static_cast<double>(e.iteration), e.raw, e.smoothed});
  c.put_f64(name, v);
}

void get_trace(const Checkpoint& c, const std::string& name, diag::NormTrace& t) {
  const auto v = c.get_f64(name);
  if (v.size() % 3 != 0) throw std::runtime_error("checkpoint: bad trace " + name);
  std::vector<diag::NormTrace::Entry> entries;
  for (std::size_t i = 0; i < v.size(); i += 3) {
    entries.push_back({static_cast<std::size_t>(v[i]), v[i + 1], v[i + 2]});
  }
  t.restore(std::move(entries));
}

void write_outputs(const fs::path& dir, const RunResult& r, const std::vector<std::string>& heads,
                   bool traces, bool histograms) {
  write_file(dir / "metrics.csv", [&](std::ostream& os) {
    write_metrics_header(os, heads);
    for (const auto& m : r.metrics) write_metrics_row(os, m);
  });
  write_file(dir / "timing.csv", [&](std::ostream& os) {
    os << "epoch,wall_time\n";
    for (const auto& m : r.metrics) os << m.epoch << "," << num(m.wall_time) << "\n";
  });
  if (traces) {
    fs::create_directories(dir / "traces");
    write_file(dir / "traces" / "grad_norm.csv",
               [&](std::ostream& os) { diag::write_trace_csv(os, r.grad_norm); });
    write_file(dir / "traces" / "detrended_l2.csv",
               [&](std::ostream& os) { diag::write_trace_csv(os, r.detrended_l2); });
  }
  if (histograms && !r.first_histograms.empty()) {
    std::vector<diag::Histogram> all;
    for (const auto* set : {&r.first_histograms, &r.final_histograms}) {
      for (const auto& nh : *set) all.insert(all.end(), {nh.hidden, nh.detrended});
    }
    write_file(dir / "histograms.csv",
               [&](std::ostream& os) { diag::write_histograms_csv(os, all); });
  }
  if (!r.tv.empty()) {
    write_file(dir / "tv.csv", [&](std::ostream& os) { write_tv_csv(os, r.tv); });
  }
}

}  // namespace

std::string run_label(const ExperimentConfig& config, NormMethod norm) {
  if (config.network.model == ModelKind::frame_cnn) return "frame_cnn";
  return std::string(to_string(norm));
}

ExperimentConfig checkpoint_config(const Checkpoint& ckpt) {
  return config_from_text(ckpt.get_text("meta/config"));
}

LoadedModel load_model(const Checkpoint& ckpt, const tasks::Dataset& data) {
  LoadedModel m;
  m.config = checkpoint_config(ckpt);
  m.norm = parse_norm_method(ckpt.get_text("meta/norm"));
  m.fold = ckpt.get_u64("meta/fold").at(0);
  NetworkConfig net = m.config.network_for(m.norm, data.head_classes);
  m.model = build(net, m.config.train.seed);
  for (auto& [_, t] : m.model.params) t.set_precision(m.config.train.precision);
  restore(ckpt, m.model);
  return m;
}

void put_history(Checkpoint& c, const RunResult& r) {
  std::vector<double> rows, wall;
  std::size_t heads = 0;
  for (const auto& m : r.metrics) {
    heads = m.train_acc.size();
    rows.insert(rows.end(), {static_cast<double>(m.epoch), static_cast<double>(m.fold), m.train_loss});
    rows.insert(rows.end(), m.train_acc.begin(), m.train_acc.end());
    rows.push_back(m.train_joint);
    rows.push_back(m.test_acc.empty() ? 0.0 : 1.0);
    if (m.test_acc.empty()) {
      rows.insert(rows.end(), heads + 1, 0.0);
    } else {
      rows.insert(rows.end(), m.test_acc.begin(), m.test_acc.end());
      rows.push_back(m.test_joint);
    }
    wall.push_back(m.wall_time);
  }
  c.put_u64("history/heads", {heads});
  c.put_f64("history/metrics", rows);
  // Kept apart so that everything outside timing/ is reproducible bit for bit.
  c.put_f64("timing/wall_time", wall);
  put_trace(c, "history/grad_norm", r.grad_norm);
  put_trace(c, "history/detrended_l2", r.detrended_l2);
  put_histograms(c, "history/first/", r.first_histograms);
}

void get_history(const Checkpoint& c, RunResult& r) {
  const std::size_t heads = c.get_u64("history/heads").at(0);
  const auto rows = c.get_f64("history/metrics");
  const auto wall = c.get_f64("timing/wall_time");
  const std::size_t width = 2 * heads + 6;
  if (rows.size() != width * wall.size()) throw std::runtime_error("checkpoint: bad metric history");
  r.metrics.clear();
  for (std::size_t i = 0; i < rows.size(); i += width) {
    const double* p = rows.data() + i;
    EpochMetrics m;
    m.epoch = static_cast<std::size_t>(p[0]);
    m.fold = static_cast<std::size_t>(p[1]);
    m.train_loss = p[2];
    m.train_acc.assign(p + 3, p + 3 + heads);
    m.train_joint = p[3 + heads];
    if (p[4 + heads] != 0.0) {
      m.test_acc.assign(p + 5 + heads, p + 5 + 2 * heads);
      m.test_joint = p[5 + 2 * heads];
    }
    m.wall_time = wall[i / width];
    r.metrics.push_back(std::move(m));
  }
  get_trace(c, "history/grad_norm", r.grad_norm);
  get_trace(c, "history/detrended_l2", r.detrended_l2);
  r.first_histograms = get_histograms(c, "history/first/");
}

std::vector<TvRow> tv_rows(const std::vector<diag::NeuronHistograms>& first,
                           const std::vector<diag::NeuronHistograms>& last) {
  if (first.size() != last.size()) throw std::invalid_argument("tv_rows: neuron sets differ");
  std::vector<TvRow> out;
  for (std::size_t i = 0; i < first.size(); ++i) {
    std::string label = first[i].hidden.neuron;
    label.resize(label.size() - 2);  // drop ":h"
    out.push_back({label, diag::shift_metric(first[i].hidden, last[i].hidden),
                   diag::shift_metric(first[i].detrended, last[i].detrended)});
  }
  return out;
}

void write_tv_csv(std::ostream& os, const std::vector<TvRow>& rows) {
  os << "neuron,tv_h,tv_y\n";
  double sh = 0.0, sy = 0.0;
  for (const auto& r : rows) {
    os << r.neuron << "," << num(r.tv_hidden) << "," << num(r.tv_detrended) << "\n";
    sh += r.tv_hidden;
    sy += r.tv_detrended;
  }
  if (!rows.empty()) {
    const double n = static_cast<double>(rows.size());
    os << "mean," << num(sh / n) << "," << num(sy / n) << "\n";
  }
}

RunResult run_training(const ExperimentConfig& config, const tasks::Dataset& data,
                       const RunSpec& spec) {
  config.validate();
  NetworkConfig net = config.network_for(spec.norm, data.head_classes);
  if (net.model == ModelKind::frame_cnn) net.norm = NormMethod::none;
  if (config.train.crop > data.height || config.train.crop > data.width) {
    throw ConfigError("train.crop: larger than the task frames");
  }
  ModelState model = build(net, config.train.seed);
  TrainConfig tc = config.train;
  tc.fold = spec.fold;
  Trainer trainer(model, data, tasks::split(data, spec.fold), tc);

  const bool recurrent = net.model == ModelKind::convgru;
  const bool histograms = config.diag.histograms && recurrent && uses_detrending(net.norm);
  const auto selectors = histograms ? selectors_for(config, net) : std::vector<diag::NeuronSelector>{};
  for (const auto& s : selectors) diag::validate_selector(net, s);
  const std::string config_text = config.to_text();

  RunResult r;
  if (spec.resume) {
    const Checkpoint ckpt = Checkpoint::load(*spec.resume);
    check_resume_config(ckpt.get_text("meta/config"), config);
    restore(ckpt, trainer);
    get_history(ckpt, r);
  }

  fs::create_directories(spec.dir / "checkpoints");
  write_file(spec.dir / "config.txt", [&](std::ostream& os) { os << config_text; });

  TrainHooks hooks;
  hooks.on_iteration = [&](const IterationInfo& info) {
    r.grad_norm.push(info.iteration, info.grad_norm);
    if (info.has_detrended) r.detrended_l2.push(info.iteration, info.detrended_l2);
  };
  auto save = [&](const std::string& name) {
    Checkpoint c = snapshot(trainer, config_text);
    c.put_text("meta/norm", std::string(to_string(net.norm)));
    c.put_u64("meta/fold", {spec.fold});
    put_history(c, r);
    c.save(spec.dir / "checkpoints" / name);
  };
  auto histogram_pass = [&](std::size_t epoch) {
    return diag::record_histograms(model, data, trainer.split().train, epoch, selectors, tc.crop,
                                   tc.precision, tc.batch_size);
  };

  while (trainer.epoch() < tc.epochs) {
    EpochMetrics m;
    try {
      m = trainer.train_epoch(hooks);
    } catch (const NumericError&) {
      save("abort.ckpt");
      write_outputs(spec.dir, r, data.head_names, config.diag.traces, histograms);
      throw;
    }
    r.metrics.push_back(m);
    if (histograms && m.epoch == 1) r.first_histograms = histogram_pass(1);
    if (spec.log) {
      *spec.log << run_label(config, spec.norm) << " fold " << spec.fold << " epoch " << m.epoch
                << " loss " << num(m.train_loss) << " train_joint " << num(m.train_joint)
                << " test_joint " << num(m.test_joint) << "\n";
      spec.log->flush();
    }
    if (config.checkpoint_every && m.epoch % config.checkpoint_every == 0) {
      save("epoch_" + std::to_string(m.epoch) + ".ckpt");
    }
    write_outputs(spec.dir, r, data.head_names, config.diag.traces, histograms);
  }
  if (histograms && !r.first_histograms.empty()) {
    r.final_histograms = histogram_pass(trainer.epoch());
    r.tv = tv_rows(r.first_histograms, r.final_histograms);
  }
  save("final.ckpt");
  write_outputs(spec.dir, r, data.head_names, config.diag.traces, histograms);
  return r;
}

}  // namespace detrend
