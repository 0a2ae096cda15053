#pragma once

#include <functional>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "detrend/autograd.hpp"

namespace detrend {

inline constexpr double kRelErrorFloor = 1e-8;

// |a - n| / max(|a|, |n|, 1e-8)
double relative_error(double analytic, double numeric);

struct GradEntry {
  std::string parameter;
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
};

struct GradReport {
  std::map<std::string, double> max_rel_error;
  std::vector<GradEntry> entries;
  double step = 1e-4;
  double tolerance = 1e-4;
  bool pass = false;

  double worst() const;
  // parameter,index,analytic,numeric,rel_err
  void write_csv(std::ostream& os) const;
};

// Builds a scalar loss on the given tape from the registered parameters.
// Must be a pure function of the parameter values.
using LossBuilder =
    std::function<ag::Var(ag::Tape& tape, const ag::VarMap& params)>;

// Compares reverse-mode gradients against central differences
// (f(p+s) - f(p-s)) / 2s for every scalar of every parameter. Always runs in
// 64-bit mode.
GradReport gradcheck(const LossBuilder& loss, const ag::ParamSet& params,
                     double step = 1e-4, double tolerance = 1e-4,
                     bool corrupt_adjoints = false);

}  // namespace detrend
