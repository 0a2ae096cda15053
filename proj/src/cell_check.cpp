#include "detrend/cell_check.hpp"

namespace detrend {

namespace {

constexpr std::size_t kBatch = 6;
constexpr std::size_t kFrame = 3;

Shape input_shape(const CellConfig& c) {
  if (c.kind == CellKind::convgru) return {kBatch, c.input_size, kFrame, kFrame};
  return {kBatch, c.input_size};
}

Tensor random_tensor(Prng& prng, const Shape& shape, double sigma) {
  return gaussian_init(prng, shape, sigma, Precision::f64);
}

}  // namespace

CellConfig cell_check_config(const CellCheckSpec& spec) {
  if (spec.kind == CellKind::rnn) throw std::invalid_argument("cell_gradcheck: gru or convgru only");
  if (spec.steps == 0) throw std::invalid_argument("cell_gradcheck: at least one step");
  CellConfig c;
  c.kind = spec.kind;
  c.norm = spec.norm;
  c.placement = spec.placement;
  c.kernel = 3;
  c.input_size = spec.kind == CellKind::convgru ? 1 : 3;
  c.hidden_size = spec.kind == CellKind::convgru ? 2 : 5;
  return c;
}

std::size_t cell_check_parameter_count(const CellCheckSpec& spec) {
  RecurrentCell cell(cell_check_config(spec));
  Prng prng(spec.seed);
  std::size_t n = 0;
  for (const auto& [_, t] : cell.init_params(prng, 0.5)) n += t.size();
  return n;
}

GradReport cell_gradcheck(const CellCheckSpec& spec, double step, double tolerance,
                          bool corrupt_adjoints) {
  const CellConfig config = cell_check_config(spec);
  RecurrentCell cell(config);
  Prng prng(spec.seed);
  ag::ParamSet params = cell.init_params(prng, 1.5);
  // Move every parameter off its initial value so gains and shifts are exercised.
  for (auto& [_, t] : params) {
    for (auto& v : t.data()) v += 0.3 * prng.normal();
  }
  std::vector<Tensor> inputs, coeffs;
  std::vector<ag::RowMask> masks;
  const Shape hidden = cell.hidden_shape(input_shape(config));
  for (std::size_t t = 0; t < spec.steps; ++t) {
    inputs.push_back(random_tensor(prng, input_shape(config), 1.0));
    coeffs.push_back(random_tensor(prng, hidden, 1.0));
    ag::RowMask m(kBatch, 1);
    if (spec.steps > 1 && t + 1 == spec.steps) m[kBatch - 1] = 0;
    masks.push_back(m);
  }
  const Tensor final_coeffs = random_tensor(prng, hidden, 1.0);

  auto loss = [&](ag::Tape& tape, const ag::VarMap& vars) {
    CellNormState st = cell.init_norm_state();
    std::vector<ag::Var> xs;
    for (const auto& x : inputs) xs.push_back(tape.constant(x));
    SequenceVars seq = run_sequence(cell, vars, xs, st, norm::Mode::train, masks);
    ag::Var total = ag::weighted_sum(seq.final_h, final_coeffs);
    for (std::size_t t = 0; t < seq.outputs.size(); ++t) {
      total = ag::add(total, ag::weighted_sum(seq.outputs[t], coeffs[t]));
    }
    return total;
  };
  return gradcheck(loss, params, step, tolerance, corrupt_adjoints);
}

}  // namespace detrend
