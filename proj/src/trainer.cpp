#include "detrend/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <stdexcept>

namespace detrend {

void TrainConfig::validate() const {
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
    throw std::invalid_argument("train.lr must be a non-negative number");
  }
  if (!(momentum >= 0.0 && momentum < 1.0)) {
    throw std::invalid_argument("train.momentum must be in [0, 1)");
  }
  if (batch_size == 0) throw std::invalid_argument("train.batch_size must be positive");
  if (!(weight_decay >= 0.0)) throw std::invalid_argument("train.weight_decay must be >= 0");
  if (!(clip_threshold > 0.0)) throw std::invalid_argument("train.clip must be positive");
  if (epochs == 0) throw std::invalid_argument("train.epochs must be positive");
  if (fold < 1 || fold > 3) throw std::invalid_argument("train.fold must be 1, 2 or 3");
  if (crop == 0) throw std::invalid_argument("train.crop must be positive");
}

OptState OptState::zeros_like(const ag::ParamSet& params) {
  OptState o;
  for (const auto& [name, t] : params) o.velocity.emplace(name, Tensor::zeros_like(t));
  return o;
}

bool OptState::operator==(const OptState& other) const {
  if (velocity.size() != other.velocity.size()) return false;
  for (const auto& [name, t] : velocity) {
    auto it = other.velocity.find(name);
    if (it == other.velocity.end() || !t.bit_equal(it->second)) return false;
  }
  return true;
}

double nll_loss(const std::vector<std::vector<double>>& predictions,
                const std::vector<std::size_t>& labels) {
  if (predictions.size() != labels.size()) {
    throw std::invalid_argument("nll_loss: one label per head required");
  }
  double loss = 0.0;
  for (std::size_t h = 0; h < labels.size(); ++h) {
    if (labels[h] >= predictions[h].size()) throw std::out_of_range("nll_loss: label out of range");
    loss -= std::log(std::max(predictions[h][labels[h]], 1e-12));
  }
  return loss;
}

double length_weight(std::size_t t_i, std::size_t t_max) {
  if (t_i == 0 || t_i > t_max) throw std::invalid_argument("length_weight: need 1 <= T_i <= T_max");
  return static_cast<double>(t_max) / static_cast<double>(t_i);
}

double global_norm(const ag::ParamSet& grads) {
  double ss = 0.0;
  for (const auto& [_, g] : grads) {
    for (double v : g.data()) ss += v * v;
  }
  return std::sqrt(ss);
}

double clip_gradient(ag::ParamSet& grads, double threshold) {
  const double norm = global_norm(grads);
  if (!std::isfinite(norm)) throw NumericError("clip_gradient: non-finite gradient norm");
  if (norm > threshold) {
    const double s = threshold / norm;
    for (auto& [_, g] : grads) {
      for (double& v : g.data()) v = round_to(g.precision(), v * s);
    }
  }
  return norm;
}

void add_weight_decay(ag::ParamSet& grads, const ag::ParamSet& params, double weight_decay) {
  if (weight_decay == 0.0) return;
  for (auto& [name, g] : grads) {
    if (!is_weight(name)) continue;
    const Tensor& p = params.at(name);
    for (std::size_t i = 0; i < g.size(); ++i) {
      g[i] = round_to(g.precision(), g[i] + weight_decay * p[i]);
    }
  }
}

void nag_update(ag::ParamSet& params, const ag::ParamSet& grads, OptState& opt, double lr,
                double momentum) {
  for (auto& [name, p] : params) {
    auto git = grads.find(name);
    if (git == grads.end()) continue;
    const Tensor& g = git->second;
    auto vit = opt.velocity.find(name);
    if (vit == opt.velocity.end()) vit = opt.velocity.emplace(name, Tensor::zeros_like(p)).first;
    Tensor& v = vit->second;
    if (!g.same_shape(p) || !v.same_shape(p)) throw ShapeError("nag_update: shape mismatch for " + name);
    const Precision pr = p.precision();
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double step = round_to(pr, lr * g[i]);
      v[i] = round_to(pr, momentum * v[i] - step);
      p[i] = round_to(pr, p[i] + round_to(pr, momentum * v[i] - step));
    }
  }
}

VideoBatch make_batch(const tasks::Dataset& data, const std::vector<std::size_t>& indices,
                      const std::vector<tasks::CropFlip>& aug, std::size_t crop,
                      Precision precision, BatchLabels* labels) {
  if (indices.empty()) throw std::invalid_argument("make_batch: empty batch");
  if (aug.size() != indices.size()) throw std::invalid_argument("make_batch: one crop per sample");
  const std::size_t n = indices.size();
  VideoBatch b;
  std::size_t t_max = 0;
  for (std::size_t i : indices) {
    b.lengths.push_back(data.samples.at(i).length);
    t_max = std::max(t_max, data.samples[i].length);
  }
  const std::size_t frame = crop * crop;
  for (std::size_t t = 0; t < t_max; ++t) {
    b.steps.emplace_back(Shape{n, 1, crop, crop}, precision);
    ag::RowMask m(n);
    for (std::size_t k = 0; k < n; ++k) m[k] = t < b.lengths[k];
    b.masks.push_back(std::move(m));
  }
  if (labels) labels->per_head.assign(data.head_classes.size(), std::vector<std::size_t>(n));
  for (std::size_t k = 0; k < n; ++k) {
    const auto& s = data.samples[indices[k]];
    const auto frames = tasks::augment(s.frames, s.length, data.height, data.width, crop, crop, aug[k]);
    for (std::size_t t = 0; t < s.length; ++t) {
      auto dst = b.steps[t].data().subspan(k * frame, frame);
      for (std::size_t i = 0; i < frame; ++i) dst[i] = round_to(precision, frames[t * frame + i]);
    }
    if (labels) {
      const auto l = aug[k].flip ? tasks::flipped_labels(data, s.labels) : s.labels;
      for (std::size_t h = 0; h < l.size(); ++h) labels->per_head[h][k] = l[h];
    }
  }
  return b;
}

namespace {

struct Tally {
  std::size_t samples = 0, joint = 0;
  std::vector<std::size_t> correct;
  double loss = 0.0;

  void add(const std::vector<Tensor>& probs, const BatchLabels& labels) {
    const std::size_t heads = probs.size(), n = labels.per_head.front().size();
    correct.resize(heads, 0);
    for (std::size_t k = 0; k < n; ++k) {
      bool all = true;
      std::vector<std::vector<double>> pred(heads);
      std::vector<std::size_t> lab(heads);
      for (std::size_t h = 0; h < heads; ++h) {
        const std::size_t c = probs[h].dim(1);
        const auto row = probs[h].data().subspan(k * c, c);
        pred[h].assign(row.begin(), row.end());
        lab[h] = labels.per_head[h][k];
        const std::size_t arg = static_cast<std::size_t>(
            std::max_element(row.begin(), row.end()) - row.begin());
        if (arg == lab[h]) {
          ++correct[h];
        } else {
          all = false;
        }
      }
      joint += all;
      loss += nll_loss(pred, lab);
      ++samples;
    }
  }

  std::vector<double> accuracy() const {
    std::vector<double> a;
    for (std::size_t c : correct) a.push_back(static_cast<double>(c) / static_cast<double>(samples));
    return a;
  }
};

double detrended_norm(const ForwardResult& r, const VideoBatch& batch, bool& found) {
  found = false;
  const std::size_t n = batch.size();
  std::vector<double> ss;  // per (t, k)
  for (const auto& layer : r.layers) {
    for (std::size_t t = 0; t < layer.steps.size(); ++t) {
      const auto& s = layer.steps[t];
      if (!s.y.valid()) continue;
      found = true;
      if (ss.empty()) ss.assign(layer.steps.size() * n, 0.0);
      const Tensor& y = s.y.value();
      const std::size_t per = y.size() / n;
      for (std::size_t k = 0; k < n; ++k) {
        if (!batch.masks[t][k]) continue;
        for (std::size_t i = 0; i < per; ++i) ss[t * n + k] += y[k * per + i] * y[k * per + i];
      }
    }
  }
  if (!found) return 0.0;
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t t = 0; t < batch.steps.size(); ++t) {
    for (std::size_t k = 0; k < n; ++k) {
      if (!batch.masks[t][k]) continue;
      total += std::sqrt(ss[t * n + k]);
      ++count;
    }
  }
  return count ? total / static_cast<double>(count) : 0.0;
}

}  // namespace

Trainer::Trainer(ModelState& model, const tasks::Dataset& data, tasks::Split split,
                 TrainConfig config)
    : model_(model),
      data_(data),
      split_(std::move(split)),
      config_(config),
      prng_(Prng(config.seed).derive(0x7a41e5)) {
  config_.validate();
  if (split_.train.empty()) throw std::invalid_argument("trainer: empty training split");
  if (model_.config.heads != data_.head_classes) {
    throw std::invalid_argument("trainer: network heads do not match the dataset");
  }
  if (uses_batch_norm(model_.config.norm)) {
    for (const auto& s : data_.samples) {
      if (s.length != data_.samples.front().length) {
        throw std::invalid_argument(
            "trainer: batch normalization needs fixed-length sequences (set norm.method or task)");
      }
    }
  }
  for (auto& [_, t] : model_.params) t.set_precision(config_.precision);
  opt_ = OptState::zeros_like(model_.params);
}

std::vector<std::vector<std::size_t>> Trainer::make_batches() {
  std::vector<std::size_t> order = split_.train;
  for (std::size_t i = order.size(); i > 1; --i) {
    std::swap(order[i - 1], order[prng_.below(i)]);
  }
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t i = 0; i < order.size(); i += config_.batch_size) {
    const std::size_t end = std::min(order.size(), i + config_.batch_size);
    batches.emplace_back(order.begin() + static_cast<long>(i), order.begin() + static_cast<long>(end));
  }
  // Batch statistics need two samples; fold a trailing singleton into its predecessor.
  if (batches.size() > 1 && batches.back().size() == 1) {
    batches[batches.size() - 2].push_back(batches.back().front());
    batches.pop_back();
  }
  return batches;
}

EpochMetrics Trainer::train_epoch(const TrainHooks& hooks) {
  const auto start = std::chrono::steady_clock::now();
  const Precision pr = config_.precision;
  Tally tally;
  for (const auto& idx : make_batches()) {
    std::vector<tasks::CropFlip> aug;
    for (std::size_t i = 0; i < idx.size(); ++i) {
      aug.push_back(config_.augment
                        ? tasks::draw_augmentation(prng_, data_.height, data_.width, config_.crop,
                                                   config_.crop)
                        : tasks::center_crop(data_.height, data_.width, config_.crop, config_.crop));
    }
    BatchLabels labels;
    VideoBatch batch = make_batch(data_, idx, aug, config_.crop, pr, &labels);
    const std::size_t t_max = batch.steps.size();
    std::vector<double> weights;
    for (std::size_t len : batch.lengths) {
      weights.push_back(length_weight(len, t_max) / static_cast<double>(idx.size()));
    }

    ag::Tape tape(pr);
    auto vars = ag::register_parameters(tape, model_.params);
    ForwardResult r = forward(model_, tape, vars, batch, norm::Mode::train);
    ag::Var loss;
    std::vector<Tensor> probs;
    for (std::size_t h = 0; h < r.logits.size(); ++h) {
      ag::Var l = ag::softmax_cross_entropy(r.logits[h], labels.per_head[h], weights);
      loss = loss.valid() ? ag::add(loss, l) : l;
      probs.push_back(ag::softmax_rows(r.logits[h].value()));
    }
    if (!std::isfinite(loss.value()[0])) throw NumericError("non-finite training loss");
    tally.add(probs, labels);
    tape.backward(loss);
    ag::ParamSet grads = tape.parameter_grads();
    add_weight_decay(grads, model_.params, config_.weight_decay);
    IterationInfo info;
    info.iteration = ++iteration_;
    info.loss = loss.value()[0];
    info.grad_norm = clip_gradient(grads, config_.clip_threshold);
    info.detrended_l2 = detrended_norm(r, batch, info.has_detrended);
    nag_update(model_.params, grads, opt_, config_.learning_rate, config_.momentum);
    if (hooks.on_iteration) hooks.on_iteration(info);
  }
  ++epoch_;
  EpochMetrics m;
  m.epoch = epoch_;
  m.fold = config_.fold;
  m.train_loss = tally.loss / static_cast<double>(tally.samples);
  m.train_acc = tally.accuracy();
  m.train_joint = static_cast<double>(tally.joint) / static_cast<double>(tally.samples);
  if (!split_.test.empty()) {
    EvalResult e = evaluate(split_.test);
    m.test_acc = e.head_acc;
    m.test_joint = e.joint_acc;
  }
  m.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return m;
}

EvalResult Trainer::evaluate(const std::vector<std::size_t>& indices) {
  Tally tally;
  const auto crop = tasks::center_crop(data_.height, data_.width, config_.crop, config_.crop);
  for (std::size_t i = 0; i < indices.size(); i += config_.batch_size) {
    const std::vector<std::size_t> idx(
        indices.begin() + static_cast<long>(i),
        indices.begin() + static_cast<long>(std::min(indices.size(), i + config_.batch_size)));
    BatchLabels labels;
    VideoBatch batch = make_batch(data_, idx, std::vector<tasks::CropFlip>(idx.size(), crop),
                                  config_.crop, config_.precision, &labels);
    tally.add(predict(model_, batch, norm::Mode::eval, config_.precision), labels);
  }
  EvalResult e;
  e.samples = tally.samples;
  if (tally.samples == 0) return e;
  e.loss = tally.loss / static_cast<double>(tally.samples);
  e.head_acc = tally.accuracy();
  e.joint_acc = static_cast<double>(tally.joint) / static_cast<double>(tally.samples);
  return e;
}

void write_metrics_header(std::ostream& os, const std::vector<std::string>& head_names) {
  os << "epoch,split,train_loss";
  for (const auto& h : head_names) os << ",train_acc_" << h;
  os << ",train_joint_acc";
  for (const auto& h : head_names) os << ",test_acc_" << h;
  os << ",joint_acc\n";
}

void write_metrics_row(std::ostream& os, const EpochMetrics& m) {
  char buf[64];
  auto num = [&](double v) {
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return std::string(buf);
  };
  os << m.epoch << "," << m.fold << "," << num(m.train_loss);
  for (double a : m.train_acc) os << "," << num(a);
  os << "," << num(m.train_joint);
  if (m.test_acc.empty()) {
    for (std::size_t h = 0; h <= m.train_acc.size(); ++h) os << ",nan";
    os << "\n";
    return;
  }
  for (double a : m.test_acc) os << "," << num(a);
  os << "," << num(m.test_joint) << "\n";
}

std::size_t epochs_to_accuracy(const std::vector<EpochMetrics>& metrics, double threshold) {
  for (const auto& m : metrics) {
    if (m.train_joint >= threshold) return m.epoch;
  }
  return metrics.size() + 1;
}

}  // namespace detrend
