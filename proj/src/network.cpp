#include "detrend/network.hpp"

#include <cmath>
#include <stdexcept>

namespace detrend {

std::string_view to_string(ModelKind k) {
  return k == ModelKind::convgru ? "convgru" : "frame_cnn";
}

ModelKind parse_model_kind(std::string_view s) {
  if (s == "convgru") return ModelKind::convgru;
  if (s == "frame_cnn") return ModelKind::frame_cnn;
  throw std::invalid_argument("unknown model '" + std::string(s) + "'");
}

NetworkConfig NetworkConfig::table1(std::vector<std::size_t> heads) {
  NetworkConfig c;
  c.heads = std::move(heads);
  return c;
}

NetworkConfig NetworkConfig::desk(std::vector<std::size_t> heads) {
  NetworkConfig c;
  c.channels = 1;
  c.height = c.width = 28;
  c.conv1_kernel = 7;
  c.conv1_stride = 3;
  c.pool1 = 2;
  c.pool2 = 2;
  c.scale = 0.25;
  c.sigma = 0.1;
  c.heads = std::move(heads);
  return c;
}

std::size_t NetworkConfig::width_of(std::size_t base) const {
  if (!(scale > 0.0)) throw std::invalid_argument("network: scale must be positive");
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(base * scale)));
}

CellConfig NetworkConfig::cell(std::size_t layer) const {
  CellConfig c;
  c.kind = CellKind::convgru;
  c.norm = norm;
  c.placement = placement;
  c.kernel = gru_kernel;
  c.update_bias = update_bias;
  if (layer == 3) {
    c.input_size = width_of(conv1_channels);
    c.hidden_size = width_of(gru1_channels);
  } else if (layer == 5) {
    c.input_size = width_of(gru1_channels);
    c.hidden_size = width_of(gru2_channels);
  } else {
    throw std::invalid_argument("network: no recurrent layer " + std::to_string(layer));
  }
  return c;
}

void NetworkConfig::validate() const {
  if (heads.empty()) throw std::invalid_argument("network: at least one head required");
  for (std::size_t c : heads) {
    if (c < 2) throw std::invalid_argument("network: every head needs at least 2 classes");
  }
  if (channels == 0 || height == 0 || width == 0) {
    throw ShapeError("network: input extents must be positive");
  }
  if (gru_kernel % 2 == 0) throw ShapeError("network: recurrent kernel must be odd");
  if (!(sigma > 0.0)) throw std::invalid_argument("network: sigma must be positive");
  if (model == ModelKind::frame_cnn && sampled_frames == 0) {
    throw std::invalid_argument("network: sampled_frames must be positive");
  }
  shape_chain(*this);
}

namespace {

ConvSpec conv1_spec(const NetworkConfig& c) {
  return ConvSpec{c.conv1_kernel, c.conv1_kernel, c.channels, c.width_of(c.conv1_channels),
                  c.conv1_stride, c.conv1_stride, c.conv1_pad, c.conv1_pad};
}

// Same-padded 3x3 (or gru_kernel) convolution of the frame baseline.
ConvSpec plain_conv_spec(const NetworkConfig& c, std::size_t in, std::size_t out) {
  const std::size_t k = c.gru_kernel;
  return ConvSpec{k, k, in, out, 1, 1, k / 2, k / 2};
}

std::size_t pooled(std::size_t extent, std::size_t window, const char* layer) {
  if (window == 0 || window > extent) {
    throw ShapeError(std::string("network: ") + layer + " window " + std::to_string(window) +
                     " does not fit extent " + std::to_string(extent));
  }
  return conv_extent(extent, window, window, 0);
}

std::string layer_name(std::size_t i) { return "layer" + std::to_string(i) + "."; }

}  // namespace

std::vector<LayerShape> shape_chain(const NetworkConfig& c) {
  std::vector<LayerShape> chain;
  const ConvSpec s1 = conv1_spec(c);
  std::size_t h = s1.out_h(c.height), w = s1.out_w(c.width);
  chain.push_back({"conv1", s1.out_channels, h, w});
  h = pooled(h, c.pool1, "pool1");
  w = pooled(w, c.pool1, "pool1");
  chain.push_back({"pool1", s1.out_channels, h, w});
  const std::size_t c1 = c.width_of(c.gru1_channels), c2 = c.width_of(c.gru2_channels);
  const char* mid = c.model == ModelKind::convgru ? "convgru1" : "conv3";
  const char* top = c.model == ModelKind::convgru ? "convgru2" : "conv5";
  chain.push_back({mid, c1, h, w});
  h = pooled(h, c.pool2, "pool2");
  w = pooled(w, c.pool2, "pool2");
  chain.push_back({"pool2", c1, h, w});
  chain.push_back({top, c2, h, w});
  chain.push_back({"global_avg", c2, h, w});
  return chain;
}

std::vector<std::string> parameter_names(const NetworkConfig& c) {
  std::vector<std::string> names{"layer1.W", "layer1.b"};
  if (c.model == ModelKind::convgru) {
    for (std::size_t layer : {3, 5}) {
      for (const auto& n : RecurrentCell(c.cell(layer)).parameter_names()) {
        names.push_back(layer_name(layer) + n);
      }
    }
  } else {
    names.insert(names.end(), {"layer3.W", "layer3.b", "layer5.W", "layer5.b"});
  }
  for (std::size_t h = 0; h < c.heads.size(); ++h) {
    const std::string p = "layer7.head" + std::to_string(h) + ".";
    names.push_back(p + "W");
    names.push_back(p + "b");
  }
  return names;
}

bool is_weight(const std::string& name) {
  const auto dot = name.rfind('.');
  const char first = name[dot == std::string::npos ? 0 : dot + 1];
  return first == 'W' || first == 'U';
}

ModelState build(const NetworkConfig& config, std::uint64_t seed) {
  Prng prng(seed);
  ModelState m = build(config, prng);
  m.seed = seed;
  return m;
}

ModelState build(const NetworkConfig& config, Prng& prng) {
  config.validate();
  ModelState m;
  m.config = config;
  const Precision p = Precision::f64;
  const bool cnn = config.model == ModelKind::frame_cnn;
  // The frame baseline draws its biases from the same Gaussian as its weights.
  auto bias = [&](std::size_t n) {
    return cnn ? gaussian_init(prng, {n}, config.sigma, p) : Tensor({n}, p);
  };
  const ConvSpec s1 = conv1_spec(config);
  m.params.emplace("layer1.W", gaussian_init(prng, s1.weight_shape(), config.sigma, p));
  m.params.emplace("layer1.b", bias(s1.out_channels));
  const std::size_t c1 = config.width_of(config.gru1_channels);
  const std::size_t c2 = config.width_of(config.gru2_channels);
  if (cnn) {
    const ConvSpec s3 = plain_conv_spec(config, s1.out_channels, c1);
    const ConvSpec s5 = plain_conv_spec(config, c1, c2);
    m.params.emplace("layer3.W", gaussian_init(prng, s3.weight_shape(), config.sigma, p));
    m.params.emplace("layer3.b", bias(c1));
    m.params.emplace("layer5.W", gaussian_init(prng, s5.weight_shape(), config.sigma, p));
    m.params.emplace("layer5.b", bias(c2));
  } else {
    for (std::size_t layer : {3, 5}) {
      RecurrentCell cell(config.cell(layer));
      for (auto& [name, t] : cell.init_params(prng, config.sigma, p)) {
        m.params.emplace(layer_name(layer) + name, std::move(t));
      }
      m.norm.emplace("layer" + std::to_string(layer), cell.init_norm_state());
    }
  }
  for (std::size_t h = 0; h < config.heads.size(); ++h) {
    const std::string pre = "layer7.head" + std::to_string(h) + ".";
    m.params.emplace(pre + "W", gaussian_init(prng, {c2, config.heads[h]}, config.sigma, p));
    m.params.emplace(pre + "b", bias(config.heads[h]));
  }
  return m;
}

namespace {

void check_batch(const NetworkConfig& c, const VideoBatch& batch) {
  if (batch.steps.empty() || batch.size() == 0) {
    throw std::invalid_argument("forward: empty sequence");
  }
  if (batch.masks.size() != batch.steps.size()) {
    throw ShapeError("forward: one mask per timestep required");
  }
  const Shape expect{batch.size(), c.channels, c.height, c.width};
  for (const auto& s : batch.steps) {
    if (s.shape() != expect) {
      throw ShapeError("forward: frame batch " + shape_string(s.shape()) + " expected " +
                       shape_string(expect));
    }
  }
  for (std::size_t len : batch.lengths) {
    if (len == 0 || len > batch.steps.size()) throw ShapeError("forward: invalid sample length");
  }
}

const ag::Var& var(const ag::VarMap& v, const std::string& name) {
  auto it = v.find(name);
  if (it == v.end()) throw std::out_of_range("missing parameter '" + name + "'");
  return it->second;
}

std::vector<ag::Var> heads(const NetworkConfig& c, const ag::VarMap& vars, ag::Var features) {
  std::vector<ag::Var> out;
  for (std::size_t h = 0; h < c.heads.size(); ++h) {
    const std::string pre = "layer7.head" + std::to_string(h) + ".";
    out.push_back(ag::add_bias(ag::matmul(features, var(vars, pre + "W")), var(vars, pre + "b")));
  }
  return out;
}

ag::Var conv_relu(const ag::VarMap& vars, const std::string& layer, ag::Var x,
                  const ConvSpec& spec) {
  return ag::relu(
      ag::add_bias(ag::conv2d(x, var(vars, layer + "W"), spec), var(vars, layer + "b")));
}

}  // namespace

ForwardResult forward_video(ModelState& model, ag::Tape& tape, const ag::VarMap& vars,
                            const VideoBatch& batch, norm::Mode mode) {
  const NetworkConfig& c = model.config;
  if (c.model != ModelKind::convgru) throw std::logic_error("forward_video: not a recurrent model");
  check_batch(c, batch);
  const ConvSpec s1 = conv1_spec(c);
  const PoolSpec p1{c.pool1, c.pool1, c.pool1, c.pool1};
  const PoolSpec p2{c.pool2, c.pool2, c.pool2, c.pool2};
  RecurrentCell cell3(c.cell(3)), cell5(c.cell(5));
  const ag::VarMap v3 = scoped(vars, "layer3."), v5 = scoped(vars, "layer5.");
  CellNormState& n3 = model.norm.at("layer3");
  CellNormState& n5 = model.norm.at("layer5");
  const std::size_t n = batch.size();

  ForwardResult r;
  r.layers = {{"layer3", {}}, {"layer5", {}}};
  ag::Var h3, h5;
  for (std::size_t t = 0; t < batch.steps.size(); ++t) {
    const ag::RowMask& mask = batch.masks[t];
    ag::Var x = tape.constant(batch.steps[t]);
    x = ag::maxpool2d(conv_relu(vars, "layer1.", x, s1), p1);
    if (!h3.valid()) h3 = tape.constant(Tensor(cell3.hidden_shape(x.shape()), tape.precision()));
    StepVars a = cell3.step(v3, x, h3, n3, {mode, mask, t});
    h3 = a.carry;
    ag::Var x5 = ag::maxpool2d(a.upward, p2);
    if (!h5.valid()) h5 = tape.constant(Tensor(cell5.hidden_shape(x5.shape()), tape.precision()));
    StepVars b = cell5.step(v5, x5, h5, n5, {mode, mask, t});
    h5 = b.carry;
    r.layers[0].steps.push_back(a);
    r.layers[1].steps.push_back(b);

    ag::RowMask last(n, 0);
    bool any = false;
    for (std::size_t i = 0; i < n; ++i) {
      last[i] = batch.lengths[i] == t + 1;
      any = any || last[i];
    }
    if (!r.readout.valid()) r.readout = tape.constant(Tensor(b.upward.shape(), tape.precision()));
    if (any) r.readout = ag::blend(last, b.upward, r.readout);
  }
  r.logits = heads(c, vars, ag::global_avg_pool(r.readout));
  return r;
}

std::vector<std::size_t> sampled_frame_indices(std::size_t length, std::size_t n) {
  if (length == 0 || n == 0) throw std::invalid_argument("sampled_frame_indices: empty");
  std::vector<std::size_t> idx(n);
  for (std::size_t k = 0; k < n; ++k) {
    idx[k] = n == 1 ? 0
                    : static_cast<std::size_t>(std::lround(static_cast<double>(k) *
                                                           static_cast<double>(length - 1) /
                                                           static_cast<double>(n - 1)));
  }
  return idx;
}

ForwardResult forward_frame_baseline(const ModelState& model, ag::Tape& tape,
                                     const ag::VarMap& vars, const VideoBatch& batch) {
  const NetworkConfig& c = model.config;
  if (c.model != ModelKind::frame_cnn) throw std::logic_error("forward_frame_baseline: not a frame model");
  check_batch(c, batch);
  const ConvSpec s1 = conv1_spec(c);
  const std::size_t c1 = c.width_of(c.gru1_channels), c2 = c.width_of(c.gru2_channels);
  const ConvSpec s3 = plain_conv_spec(c, s1.out_channels, c1);
  const ConvSpec s5 = plain_conv_spec(c, c1, c2);
  const PoolSpec p1{c.pool1, c.pool1, c.pool1, c.pool1};
  const PoolSpec p2{c.pool2, c.pool2, c.pool2, c.pool2};
  const std::size_t n = batch.size();
  const std::size_t frame = c.channels * c.height * c.width;

  std::vector<std::vector<std::size_t>> picks(n);
  for (std::size_t i = 0; i < n; ++i) picks[i] = sampled_frame_indices(batch.lengths[i], c.sampled_frames);

  ForwardResult r;
  std::vector<std::vector<ag::Var>> per_head(c.heads.size());
  for (std::size_t k = 0; k < c.sampled_frames; ++k) {
    Tensor frames({n, c.channels, c.height, c.width}, tape.precision());
    for (std::size_t i = 0; i < n; ++i) {
      const Tensor& src = batch.steps[picks[i][k]];
      std::copy_n(src.data().begin() + i * frame, frame, frames.data().begin() + i * frame);
    }
    ag::Var x = ag::maxpool2d(conv_relu(vars, "layer1.", tape.constant(frames), s1), p1);
    x = ag::maxpool2d(conv_relu(vars, "layer3.", x, s3), p2);
    x = conv_relu(vars, "layer5.", x, s5);
    auto logits = heads(c, vars, ag::global_avg_pool(x));
    for (std::size_t h = 0; h < logits.size(); ++h) per_head[h].push_back(logits[h]);
  }
  for (auto& v : per_head) r.logits.push_back(ag::mean_of(v));
  return r;
}

ForwardResult forward(ModelState& model, ag::Tape& tape, const ag::VarMap& vars,
                      const VideoBatch& batch, norm::Mode mode) {
  if (model.config.model == ModelKind::frame_cnn) {
    return forward_frame_baseline(model, tape, vars, batch);
  }
  return forward_video(model, tape, vars, batch, mode);
}

std::vector<Tensor> predict(ModelState& model, const VideoBatch& batch, norm::Mode mode,
                            Precision precision) {
  ag::Tape tape(precision);
  ag::ParamSet params = model.params;
  for (auto& [_, t] : params) t.set_precision(precision);
  auto vars = ag::register_constants(tape, params);
  auto r = forward(model, tape, vars, batch, mode);
  std::vector<Tensor> out;
  for (const auto& l : r.logits) out.push_back(ag::softmax_rows(l.value()));
  return out;
}

}  // namespace detrend
