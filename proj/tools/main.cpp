#include <CLI11.hpp>

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>

#include "detrend/cell_check.hpp"
#include "detrend/experiment.hpp"
#include "plot.hpp"

namespace fs = std::filesystem;
using namespace detrend;

namespace {

enum Exit { kOk = 0, kCheckFailed = 1, kConfigError = 2, kNumericAbort = 3 };

struct CommonOptions {
  std::string config;
  std::vector<std::string> sets;
  std::string out;
  std::string precision;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> threads;
};

void add_common(CLI::App* cmd, CommonOptions& o) {
  cmd->add_option("--config", o.config, "experiment config file (key = value lines)");
  cmd->add_option("--set", o.sets, "override key=value (repeatable)");
  cmd->add_option("--out", o.out, "output directory");
  cmd->add_option("--seed", o.seed, "training seed");
  cmd->add_option("--precision", o.precision, "f32 or f64")->check(CLI::IsMember({"f32", "f64"}));
  cmd->add_option("--threads", o.threads, "worker threads");
}

ExperimentConfig resolve_config(const CommonOptions& o) {
  std::vector<std::string> overrides = o.sets;
  if (!o.out.empty()) overrides.push_back("out=" + o.out);
  if (o.seed) overrides.push_back("seed=" + std::to_string(*o.seed));
  if (!o.precision.empty()) overrides.push_back("train.precision=" + o.precision);
  if (o.threads) overrides.push_back("threads=" + std::to_string(*o.threads));
  ExperimentConfig c = o.config.empty() ? config_from_text("", overrides)
                                        : load_config(o.config, overrides);
  set_num_threads(c.threads);
  return c;
}

fs::path data_dir(const std::string& out) {
  if (const char* env = std::getenv("DETREND_DATA_DIR"); env && *env) return env;
  return fs::path(out) / "data";
}

std::string pct(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", 100.0 * v);
  return buf;
}

int cmd_train(const CommonOptions& o, const std::string& resume) {
  const ExperimentConfig config = resolve_config(o);
  const tasks::Dataset data = load_or_generate(config.task, data_dir(config.out));
  const bool frame = config.network.model == ModelKind::frame_cnn;
  const std::vector<NormMethod> norms = frame ? std::vector<NormMethod>{NormMethod::none} : config.norms;
  if (!resume.empty() && (norms.size() != 1 || config.folds.size() != 1)) {
    throw ConfigError("--resume: needs a single norm method and fold");
  }
  for (NormMethod m : norms) {
    for (std::size_t fold : config.folds) {
      RunSpec spec;
      spec.norm = m;
      spec.fold = fold;
      spec.dir = fs::path(config.out) / run_label(config, m) / ("fold" + std::to_string(fold));
      if (!resume.empty()) spec.resume = resume;
      spec.log = &std::cout;
      const RunResult r = run_training(config, data, spec);
      const EpochMetrics& last = r.metrics.back();
      std::cout << run_label(config, m) << " fold " << fold << ": test joint " << pct(last.test_joint)
                << "%, epochs to 90% train joint "
                << epochs_to_accuracy(r.metrics, 0.9) << " -> " << spec.dir.string() << "\n";
    }
  }
  return kOk;
}

int cmd_eval(const std::string& checkpoint, std::optional<std::size_t> fold) {
  const Checkpoint ckpt = Checkpoint::load(checkpoint);
  const ExperimentConfig config = checkpoint_config(ckpt);
  set_num_threads(config.threads);
  const tasks::Dataset data = load_or_generate(config.task, data_dir(config.out));
  LoadedModel lm = load_model(ckpt, data);
  TrainConfig tc = config.train;
  tc.fold = fold.value_or(lm.fold);
  Trainer trainer(lm.model, data, tasks::split(data, tc.fold), tc);
  const EvalResult e = trainer.evaluate(trainer.split().test);
  std::cout << "fold " << tc.fold << " samples " << e.samples << " loss " << e.loss << "\n";
  for (std::size_t h = 0; h < data.head_names.size(); ++h) {
    std::cout << data.head_names[h] << " " << pct(e.head_acc[h]) << "%\n";
  }
  std::cout << "joint " << pct(e.joint_acc) << "%\n";
  return kOk;
}

struct GradcheckOptions {
  std::string cell = "convgru", norm = "ad", placement = "hidden";
  std::size_t steps = 3;
  double tolerance = 1e-4, step = 1e-4;
  std::uint64_t seed = 1;
  bool corrupt = false;
  std::string csv;
};

int cmd_gradcheck(const GradcheckOptions& o) {
  CellCheckSpec spec;
  try {
    spec.kind = parse_cell_kind(o.cell);
    spec.norm = parse_norm_method(o.norm);
    spec.placement = parse_placement(o.placement);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  spec.steps = o.steps;
  spec.seed = o.seed;
  const GradReport report = cell_gradcheck(spec, o.step, o.tolerance, o.corrupt);
  for (const auto& [name, err] : report.max_rel_error) {
    std::cout << name << " max_rel_err " << err << "\n";
  }
  std::cout << (report.pass ? "PASS" : "FAIL") << " worst " << report.worst() << " (tolerance "
            << o.tolerance << ", " << cell_check_parameter_count(spec) << " parameters)\n";
  if (!o.csv.empty()) {
    std::ofstream os(o.csv);
    report.write_csv(os);
  }
  return report.pass ? kOk : kCheckFailed;
}

struct DiagnoseOptions {
  std::string checkpoint, reference, out = "diagnostics";
  std::vector<std::string> selectors;
  std::optional<std::size_t> sample;
};

int cmd_diagnose(const DiagnoseOptions& o) {
  const Checkpoint ckpt = Checkpoint::load(o.checkpoint);
  const ExperimentConfig config = checkpoint_config(ckpt);
  set_num_threads(config.threads);
  const tasks::Dataset data = load_or_generate(config.task, data_dir(config.out));
  LoadedModel lm = load_model(ckpt, data);
  if (lm.model.config.model != ModelKind::convgru) {
    throw ConfigError("diagnose: checkpoint has no recurrent layers");
  }
  std::vector<diag::NeuronSelector> selectors;
  try {
    for (const auto& s : o.selectors) selectors.push_back(diag::NeuronSelector::parse(s));
    if (selectors.empty()) selectors = diag::default_selectors(lm.model.config, config.diag.neurons);
    for (const auto& s : selectors) diag::validate_selector(lm.model.config, s);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  const tasks::Split split = tasks::split(data, lm.fold);
  const std::size_t sample = o.sample.value_or(split.test.front());
  const Precision precision = config.train.precision;
  const std::size_t crop = config.train.crop;
  const fs::path out(o.out);
  fs::create_directories(out);

  const std::size_t epoch = ckpt.get_u64("meta/epoch").at(0);
  auto hists = diag::record_histograms(lm.model, data, split.train, epoch, selectors, crop, precision);
  std::vector<diag::Histogram> all;
  std::vector<diag::NeuronHistograms> ref;
  if (!o.reference.empty()) {
    const Checkpoint rc = Checkpoint::load(o.reference);
    LoadedModel rm = load_model(rc, data);
    ref = diag::record_histograms(rm.model, data, split.train, rc.get_u64("meta/epoch").at(0),
                                  selectors, crop, precision);
    for (const auto& nh : ref) all.insert(all.end(), {nh.hidden, nh.detrended});
  }
  for (const auto& nh : hists) all.insert(all.end(), {nh.hidden, nh.detrended});
  {
    std::ofstream os(out / "histograms.csv");
    diag::write_histograms_csv(os, all);
  }
  plot::write_svg(out / "histograms.svg",
                  plot::chart_for(plot::read_csv(out / "histograms.csv"), "activation histograms", "", {}));
  if (!ref.empty()) {
    const auto rows = tv_rows(ref, hists);
    std::ofstream os(out / "tv.csv");
    write_tv_csv(os, rows);
    for (const auto& r : rows) {
      std::cout << r.neuron << " tv_h " << r.tv_hidden << " tv_y " << r.tv_detrended << "\n";
    }
  }
  for (const auto& s : selectors) {
    const auto rows = diag::record_neuron_trace(lm.model, data, sample, s, crop, precision);
    std::string name = s.label();
    std::replace(name.begin(), name.end(), ':', '_');
    const fs::path csv = out / ("neuron_" + name + ".csv");
    {
      std::ofstream os(csv);
      diag::write_neuron_trace_csv(os, rows);
    }
    plot::write_svg(out / ("neuron_" + name + ".svg"),
                    plot::chart_for(plot::read_csv(csv), s.label() + " sample " + std::to_string(sample),
                                    "t", {}));
  }
  std::cout << "wrote " << out.string() << "\n";
  return kOk;
}

int cmd_gen_data(const CommonOptions& o) {
  const ExperimentConfig config = resolve_config(o);
  const fs::path dir = o.out.empty() ? data_dir(config.out) : fs::path(o.out);
  const tasks::Dataset data = config.task.name == "oa" ? tasks::gen_oa(config.task.spec(), config.task.seed)
                                                       : tasks::gen_oam(config.task.spec(), config.task.seed);
  tasks::export_dataset(data, dir);
  std::cout << data.samples.size() << " samples (" << data.name << ") -> " << dir.string() << "\n";
  return kOk;
}

int cmd_plot(const std::string& csv, const std::string& out, const std::string& x,
             const std::vector<std::string>& y, const std::string& title) {
  const plot::Chart chart = plot::chart_for(plot::read_csv(csv), title.empty() ? csv : title, x, y);
  plot::write_svg(out.empty() ? fs::path(csv).replace_extension(".svg") : fs::path(out), chart);
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Adaptive-detrending GRU laboratory"};
  app.require_subcommand(1);

  CommonOptions train_opts;
  std::string resume;
  auto* train = app.add_subcommand("train", "train every configured norm method and fold");
  add_common(train, train_opts);
  train->add_option("--resume", resume, "continue from a run checkpoint");

  std::string eval_ckpt;
  std::optional<std::size_t> eval_fold;
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a fold's test subjects");
  eval->add_option("--checkpoint", eval_ckpt)->required();
  eval->add_option("--fold", eval_fold);

  GradcheckOptions gc;
  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference check of a miniature cell");
  gradcheck->add_option("--cell", gc.cell, "gru or convgru");
  gradcheck->add_option("--norm", gc.norm, "none, ad, bn, ln, bn_ad, ln_ad");
  gradcheck->add_option("--placement", gc.placement, "all, hidden or gates");
  gradcheck->add_option("--T", gc.steps, "sequence length");
  gradcheck->add_option("--tolerance", gc.tolerance);
  gradcheck->add_option("--step", gc.step);
  gradcheck->add_option("--seed", gc.seed);
  gradcheck->add_option("--csv", gc.csv, "per-entry report");
  gradcheck->add_flag("--corrupt-adjoints", gc.corrupt, "negative control");

  DiagnoseOptions dg;
  auto* diagnose = app.add_subcommand("diagnose", "histograms, shift metric and neuron traces");
  diagnose->add_option("--checkpoint", dg.checkpoint)->required();
  diagnose->add_option("--reference", dg.reference, "earlier checkpoint for the shift metric");
  diagnose->add_option("--selectors", dg.selectors, "layerL:channel:row:col");
  diagnose->add_option("--sample", dg.sample, "sample id for neuron traces");
  diagnose->add_option("--out", dg.out);

  CommonOptions gen_opts;
  auto* gen = app.add_subcommand("gen-data", "generate and export a task dataset");
  add_common(gen, gen_opts);

  std::string plot_csv, plot_out, plot_x, plot_title;
  std::vector<std::string> plot_y;
  auto* plot_cmd = app.add_subcommand("plot", "render a CSV as an SVG chart");
  plot_cmd->add_option("--csv", plot_csv)->required();
  plot_cmd->add_option("--out", plot_out);
  plot_cmd->add_option("--x", plot_x);
  plot_cmd->add_option("--y", plot_y);
  plot_cmd->add_option("--title", plot_title);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfigError;
  }

  try {
    if (*train) return cmd_train(train_opts, resume);
    if (*eval) return cmd_eval(eval_ckpt, eval_fold);
    if (*gradcheck) return cmd_gradcheck(gc);
    if (*diagnose) return cmd_diagnose(dg);
    if (*gen) return cmd_gen_data(gen_opts);
    if (*plot_cmd) return cmd_plot(plot_csv, plot_out, plot_x, plot_y, plot_title);
  } catch (const NumericError& e) {
    std::cerr << "numeric abort: " << e.what() << "\n";
    return kNumericAbort;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kConfigError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kCheckFailed;
  }
  return kOk;
}
