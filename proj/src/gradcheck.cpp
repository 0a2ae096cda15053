#include "detrend/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <ostream>

namespace detrend {

double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), kRelErrorFloor});
  return std::abs(analytic - numeric) / denom;
}

double GradReport::worst() const {
  double w = 0.0;
  for (const auto& [_, e] : max_rel_error) w = std::max(w, e);
  return w;
}

void GradReport::write_csv(std::ostream& os) const {
  os << "parameter,index,analytic,numeric,rel_err\n";
  os << std::setprecision(17);
  for (const auto& e : entries) {
    os << e.parameter << ',' << e.index << ',' << e.analytic << ',' << e.numeric << ','
       << e.rel_error << '\n';
  }
}

namespace {

ag::ParamSet as_f64(const ag::ParamSet& params) {
  ag::ParamSet out = params;
  for (auto& [_, t] : out) t.set_precision(Precision::f64);
  return out;
}

double evaluate(const LossBuilder& loss, const ag::ParamSet& params) {
  ag::Tape tape(Precision::f64);
  auto vars = ag::register_constants(tape, params);
  ag::Var out = loss(tape, vars);
  const double v = out.value()[0];
  if (!std::isfinite(v)) throw NumericError("gradcheck: non-finite loss at perturbed point");
  return v;
}

}  // namespace

GradReport gradcheck(const LossBuilder& loss, const ag::ParamSet& params, double step,
                     double tolerance, bool corrupt_adjoints) {
  GradReport report;
  report.step = step;
  report.tolerance = tolerance;

  ag::ParamSet base = as_f64(params);
  ag::Tape tape(Precision::f64);
  tape.set_corrupt_adjoints(corrupt_adjoints);
  auto vars = ag::register_parameters(tape, base);
  ag::Var out = loss(tape, vars);
  if (out.value().size() != 1) throw ShapeError("gradcheck: loss must be scalar");
  tape.backward(out);
  const auto grads = tape.parameter_grads();

  for (auto& [name, tensor] : base) {
    const Tensor& analytic = grads.at(name);
    double worst = 0.0;
    for (std::size_t i = 0; i < tensor.size(); ++i) {
      const double saved = tensor[i];
      tensor[i] = saved + step;
      const double up = evaluate(loss, base);
      tensor[i] = saved - step;
      const double down = evaluate(loss, base);
      tensor[i] = saved;
      const double numeric = (up - down) / (2.0 * step);
      const double err = relative_error(analytic[i], numeric);
      worst = std::max(worst, err);
      report.entries.push_back({name, i, analytic[i], numeric, err});
    }
    report.max_rel_error[name] = worst;
  }
  report.pass = report.worst() < tolerance;
  return report;
}

}  // namespace detrend
