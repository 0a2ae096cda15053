#include "detrend/cells.hpp"

#include <stdexcept>

namespace detrend {

std::string_view to_string(CellKind k) {
  switch (k) {
    case CellKind::rnn: return "rnn";
    case CellKind::gru: return "gru";
    case CellKind::convgru: return "convgru";
  }
  return "?";
}

std::string_view to_string(NormMethod m) {
  switch (m) {
    case NormMethod::none: return "none";
    case NormMethod::ad: return "ad";
    case NormMethod::bn: return "bn";
    case NormMethod::ln: return "ln";
    case NormMethod::bn_ad: return "bn_ad";
    case NormMethod::ln_ad: return "ln_ad";
  }
  return "?";
}

std::string_view to_string(Placement p) {
  switch (p) {
    case Placement::all: return "all";
    case Placement::hidden: return "hidden";
    case Placement::gates: return "gates";
  }
  return "?";
}

CellKind parse_cell_kind(std::string_view s) {
  if (s == "rnn") return CellKind::rnn;
  if (s == "gru") return CellKind::gru;
  if (s == "convgru") return CellKind::convgru;
  throw std::invalid_argument("unknown cell '" + std::string(s) + "'");
}

NormMethod parse_norm_method(std::string_view s) {
  if (s == "none") return NormMethod::none;
  if (s == "ad") return NormMethod::ad;
  if (s == "bn") return NormMethod::bn;
  if (s == "ln") return NormMethod::ln;
  if (s == "bn_ad" || s == "bn+ad") return NormMethod::bn_ad;
  if (s == "ln_ad" || s == "ln+ad") return NormMethod::ln_ad;
  throw std::invalid_argument("unknown normalization '" + std::string(s) + "'");
}

Placement parse_placement(std::string_view s) {
  if (s == "all") return Placement::all;
  if (s == "hidden") return Placement::hidden;
  if (s == "gates") return Placement::gates;
  throw std::invalid_argument("unknown placement '" + std::string(s) + "'");
}

bool uses_detrending(NormMethod m) {
  return m == NormMethod::ad || m == NormMethod::bn_ad || m == NormMethod::ln_ad;
}
bool uses_batch_norm(NormMethod m) { return m == NormMethod::bn || m == NormMethod::bn_ad; }
bool uses_layer_norm(NormMethod m) { return m == NormMethod::ln || m == NormMethod::ln_ad; }

bool CellConfig::normalizes_candidate() const {
  return uses_spatial_norm(norm) && placement != Placement::gates;
}

bool CellConfig::normalizes_gates() const {
  return uses_spatial_norm(norm) && placement != Placement::hidden;
}

ConvSpec CellConfig::forward_conv() const {
  return ConvSpec{kernel, kernel, input_size, hidden_size, 1, 1, kernel / 2, kernel / 2};
}

ConvSpec CellConfig::recurrent_conv() const {
  return ConvSpec{kernel, kernel, hidden_size, hidden_size, 1, 1, kernel / 2, kernel / 2};
}

RecurrentCell::RecurrentCell(CellConfig config) : config_(config) {
  if (config_.input_size == 0 || config_.hidden_size == 0) {
    throw std::invalid_argument("RecurrentCell: sizes must be positive");
  }
  if (config_.kind == CellKind::rnn && config_.norm != NormMethod::none) {
    throw std::invalid_argument("RecurrentCell: rnn supports no normalization");
  }
  if (config_.kind == CellKind::convgru && config_.kernel % 2 == 0) {
    throw ShapeError("RecurrentCell: recurrent convolution with even kernel " +
                     std::to_string(config_.kernel) + " changes the spatial extent");
  }
}

std::vector<std::string> RecurrentCell::parameter_names() const {
  if (config_.kind == CellKind::rnn) return {"W_h", "U_h", "b_h"};
  std::vector<std::string> names{"W_h", "W_z", "W_r", "U_h", "U_z", "U_r"};
  if (config_.normalizes_candidate()) {
    names.insert(names.end(), {"gamma_x_h", "beta_x_h", "gamma_u_h"});
  } else {
    names.push_back("b_h");
  }
  if (config_.normalizes_gates()) {
    names.insert(names.end(), {"gamma_x_z", "beta_x_z", "gamma_u_z", "gamma_x_r",
                               "beta_x_r", "gamma_u_r"});
  } else {
    names.insert(names.end(), {"b_z", "b_r"});
  }
  return names;
}

ag::ParamSet RecurrentCell::init_params(Prng& prng, double sigma, Precision precision) const {
  const std::size_t in = config_.input_size, hid = config_.hidden_size;
  const bool conv = config_.kind == CellKind::convgru;
  const Shape w_shape = conv ? config_.forward_conv().weight_shape() : Shape{in, hid};
  const Shape u_shape = conv ? config_.recurrent_conv().weight_shape() : Shape{hid, hid};
  ag::ParamSet p;
  for (const auto& name : parameter_names()) {
    if (name[0] == 'W') {
      p.emplace(name, gaussian_init(prng, w_shape, sigma, precision));
    } else if (name[0] == 'U') {
      p.emplace(name, gaussian_init(prng, u_shape, sigma, precision));
    } else if (name == "b_z" || name == "beta_x_z") {
      p.emplace(name, Tensor::filled({hid}, config_.update_bias, precision));
    } else if (name.rfind("gamma", 0) == 0) {
      p.emplace(name, Tensor::filled({hid}, 1.0, precision));
    } else {
      p.emplace(name, Tensor({hid}, precision));
    }
  }
  return p;
}

CellNormState RecurrentCell::init_norm_state() const {
  CellNormState st;
  if (!uses_batch_norm(config_.norm)) return st;
  std::vector<std::string> terms;
  if (config_.normalizes_candidate()) terms.insert(terms.end(), {"x_h", "u_h"});
  if (config_.normalizes_gates()) terms.insert(terms.end(), {"x_z", "u_z", "x_r", "u_r"});
  for (const auto& t : terms) st.stats.emplace(t, norm::BnRunningStats(config_.hidden_size));
  return st;
}

Shape RecurrentCell::hidden_shape(const Shape& input_shape) const {
  if (config_.kind == CellKind::convgru) {
    if (input_shape.size() != 4 || input_shape[1] != config_.input_size) {
      throw ShapeError("convgru: input " + shape_string(input_shape) + " is not [N," +
                       std::to_string(config_.input_size) + ",H,W]");
    }
    const auto fwd = config_.forward_conv();
    return {input_shape[0], config_.hidden_size, fwd.out_h(input_shape[2]),
            fwd.out_w(input_shape[3])};
  }
  if (input_shape.size() != 2 || input_shape[1] != config_.input_size) {
    throw ShapeError(std::string(to_string(config_.kind)) + ": input " +
                     shape_string(input_shape) + " is not [N," +
                     std::to_string(config_.input_size) + "]");
  }
  return {input_shape[0], config_.hidden_size};
}

static const ag::Var& param(const ag::VarMap& p, const std::string& name) {
  auto it = p.find(name);
  if (it == p.end()) throw std::out_of_range("missing cell parameter '" + name + "'");
  return it->second;
}

ag::Var RecurrentCell::linear_x(const ag::VarMap& p, const std::string& w, ag::Var x) const {
  if (config_.kind == CellKind::convgru) return ag::conv2d(x, param(p, w), config_.forward_conv());
  return ag::matmul(x, param(p, w));
}

ag::Var RecurrentCell::linear_h(const ag::VarMap& p, const std::string& u, ag::Var h) const {
  if (config_.kind == CellKind::convgru) {
    ag::Var out = ag::conv2d(h, param(p, u), config_.recurrent_conv());
    if (out.shape() != h.shape()) {
      throw ShapeError("convgru: recurrent convolution changes spatial extent");
    }
    return out;
  }
  return ag::matmul(h, param(p, u));
}

ag::Var RecurrentCell::normalize(const ag::VarMap& p, const std::string& term, ag::Var v,
                                 bool with_beta, CellNormState& st,
                                 const StepContext& ctx) const {
  ag::Var gamma = param(p, "gamma_" + term);
  std::optional<ag::Var> beta;
  if (with_beta) beta = param(p, "beta_" + term);
  if (uses_batch_norm(config_.norm)) {
    auto it = st.stats.find(term);
    if (it == st.stats.end()) throw std::logic_error("missing batch-norm state for " + term);
    return norm::batch_norm(v, gamma, beta, it->second, ctx.mode, ctx.mask, ctx.t);
  }
  return norm::layer_norm(v, gamma, beta);
}

ag::Var RecurrentCell::gate_preactivation(const ag::VarMap& p, char gate, ag::Var x,
                                          ag::Var h_prev, CellNormState& st,
                                          const StepContext& ctx) const {
  const std::string g(1, gate);
  ag::Var wx = linear_x(p, "W_" + g, x);
  ag::Var uh = linear_h(p, "U_" + g, h_prev);
  if (config_.normalizes_gates()) {
    return ag::add(normalize(p, "x_" + g, wx, true, st, ctx),
                   normalize(p, "u_" + g, uh, false, st, ctx));
  }
  return ag::add_bias(ag::add(wx, uh), param(p, "b_" + g));
}

StepVars RecurrentCell::step(const ag::VarMap& p, ag::Var x, ag::Var h_prev,
                             CellNormState& st, const StepContext& ctx) const {
  ag::Tape& tape = x.tape();
  const Shape hshape = hidden_shape(x.shape());
  if (h_prev.shape() != hshape) {
    throw ShapeError("cell step: h_prev " + shape_string(h_prev.shape()) + " expected " +
                     shape_string(hshape));
  }
  if (!ctx.mask.empty() && ctx.mask.size() != hshape[0]) {
    throw ShapeError("cell step: mask length does not match batch");
  }

  StepVars s;
  if (config_.kind == CellKind::rnn) {
    ag::Var pre = ag::add_bias(ag::add(linear_x(p, "W_h", x), linear_h(p, "U_h", h_prev)),
                               param(p, "b_h"));
    s.h = ag::tanh(pre);
    s.h_tilde = s.h;
  } else {
    s.r = ag::sigmoid(gate_preactivation(p, 'r', x, h_prev, st, ctx));
    s.z = ag::sigmoid(gate_preactivation(p, 'z', x, h_prev, st, ctx));
    ag::Var wx = linear_x(p, "W_h", x);
    ag::Var uh = linear_h(p, "U_h", h_prev);
    ag::Var pre;
    if (config_.normalizes_candidate()) {
      pre = ag::add(normalize(p, "x_h", wx, true, st, ctx),
                    ag::mul(s.r, normalize(p, "u_h", uh, false, st, ctx)));
    } else {
      pre = ag::add_bias(ag::add(wx, ag::mul(s.r, uh)), param(p, "b_h"));
    }
    s.h_tilde = ag::tanh(pre);
    s.h = ag::add(ag::mul(s.z, s.h_tilde), ag::mul(ag::one_minus(s.z), h_prev));
    if (uses_detrending(config_.norm)) s.y = ag::sub(s.h_tilde, s.h);
  }

  ag::Var up = s.y.valid() ? s.y : s.h;
  if (ctx.mask.empty()) {
    s.carry = s.h;
    s.upward = up;
  } else {
    s.carry = ag::blend(ctx.mask, s.h, h_prev);
    s.upward = ag::blend(ctx.mask, up, tape.constant(Tensor(hshape, tape.precision())));
  }
  return s;
}

ag::VarMap scoped(const ag::VarMap& vars, const std::string& prefix) {
  ag::VarMap out;
  for (auto it = vars.lower_bound(prefix); it != vars.end(); ++it) {
    if (it->first.compare(0, prefix.size(), prefix) != 0) break;
    out.emplace(it->first.substr(prefix.size()), it->second);
  }
  return out;
}

SequenceVars run_sequence(const RecurrentCell& cell, const ag::VarMap& params,
                          const std::vector<ag::Var>& inputs, CellNormState& norm_state,
                          norm::Mode mode, const std::vector<ag::RowMask>& masks) {
  if (inputs.empty()) throw std::invalid_argument("run_sequence: empty sequence");
  if (!masks.empty() && masks.size() != inputs.size()) {
    throw ShapeError("run_sequence: one mask per step required");
  }
  ag::Tape& tape = inputs.front().tape();
  SequenceVars out;
  ag::Var h = tape.constant(Tensor(cell.hidden_shape(inputs.front().shape()), tape.precision()));
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    StepContext ctx{mode, masks.empty() ? ag::RowMask{} : masks[t], t};
    StepVars s = cell.step(params, inputs[t], h, norm_state, ctx);
    h = s.carry;
    out.outputs.push_back(s.upward);
    out.steps.push_back(s);
  }
  out.final_h = h;
  return out;
}

StepRecord to_record(const StepVars& s) {
  StepRecord r;
  r.h_tilde = s.h_tilde.value();
  r.h = s.h.value();
  if (s.z.valid()) r.z = s.z.value();
  if (s.r.valid()) r.r = s.r.value();
  if (s.y.valid()) r.y = s.y.value();
  return r;
}

StepRecord gru_step(const RecurrentCell& cell, const ag::ParamSet& params, const Tensor& x,
                    const Tensor& h_prev, CellNormState* norm_state, norm::Mode mode) {
  ag::Tape tape(x.precision());
  auto vars = ag::register_constants(tape, params);
  CellNormState local = cell.init_norm_state();
  CellNormState& st = norm_state ? *norm_state : local;
  StepVars s = cell.step(vars, tape.constant(x), tape.constant(h_prev), st, {mode, {}, 0});
  return to_record(s);
}

Tensor rnn_step(const RecurrentCell& cell, const ag::ParamSet& params, const Tensor& x,
                const Tensor& h_prev) {
  if (cell.config().kind != CellKind::rnn) throw std::invalid_argument("rnn_step: not an rnn cell");
  return gru_step(cell, params, x, h_prev).h;
}

SequenceRecord run_sequence(const RecurrentCell& cell, const ag::ParamSet& params,
                            const std::vector<Tensor>& inputs, bool record,
                            CellNormState* norm_state, norm::Mode mode,
                            const std::vector<ag::RowMask>& masks) {
  if (inputs.empty()) throw std::invalid_argument("run_sequence: empty sequence");
  ag::Tape tape(inputs.front().precision());
  auto vars = ag::register_constants(tape, params);
  std::vector<ag::Var> xs;
  for (const auto& x : inputs) xs.push_back(tape.constant(x));
  CellNormState local = cell.init_norm_state();
  auto seq = run_sequence(cell, vars, xs, norm_state ? *norm_state : local, mode, masks);
  SequenceRecord out;
  out.final_h = seq.final_h.value();
  for (const auto& o : seq.outputs) out.outputs.push_back(o.value());
  if (record) {
    for (const auto& s : seq.steps) out.steps.push_back(to_record(s));
  }
  return out;
}

}  // namespace detrend
