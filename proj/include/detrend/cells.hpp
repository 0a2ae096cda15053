#pragma once

#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "detrend/autograd.hpp"
#include "detrend/normalizers.hpp"
#include "detrend/prng.hpp"

namespace detrend {

enum class CellKind { rnn, gru, convgru };
enum class NormMethod { none, ad, bn, ln, bn_ad, ln_ad };
enum class Placement { all, hidden, gates };

std::string_view to_string(CellKind k);
std::string_view to_string(NormMethod m);
std::string_view to_string(Placement p);
CellKind parse_cell_kind(std::string_view s);
NormMethod parse_norm_method(std::string_view s);
Placement parse_placement(std::string_view s);

bool uses_detrending(NormMethod m);
bool uses_batch_norm(NormMethod m);
bool uses_layer_norm(NormMethod m);
inline bool uses_spatial_norm(NormMethod m) {
  return uses_batch_norm(m) || uses_layer_norm(m);
}

struct CellConfig {
  CellKind kind = CellKind::gru;
  NormMethod norm = NormMethod::none;
  Placement placement = Placement::hidden;
  std::size_t input_size = 1;   // features (dense) or channels (conv)
  std::size_t hidden_size = 1;
  std::size_t kernel = 3;       // convgru: square kernel, stride 1, pad kernel/2
  double update_bias = -2.0;    // initial b_z, or beta of the normalized z term

  bool normalizes_candidate() const;
  bool normalizes_gates() const;
  ConvSpec forward_conv() const;
  ConvSpec recurrent_conv() const;
};

// Per-step values of one layer. `y` is only set when detrending is active.
struct StepVars {
  ag::Var h_tilde, h, z, r, y;
  ag::Var carry;   // recurrent state passed on (h, frozen on padded steps)
  ag::Var upward;  // what the next layer receives
};

struct StepRecord {
  Tensor h_tilde, h, z, r;
  std::optional<Tensor> y;
};

// Running statistics of every batch-normalized term of a cell, keyed by term
// ("x_h", "u_h", "x_z", ...).
struct CellNormState {
  std::map<std::string, norm::BnRunningStats> stats;
  bool operator==(const CellNormState&) const = default;
};

struct StepContext {
  norm::Mode mode = norm::Mode::train;
  ag::RowMask mask;  // empty = all samples valid
  std::size_t t = 0;
};

class RecurrentCell {
 public:
  explicit RecurrentCell(CellConfig config);

  const CellConfig& config() const { return config_; }

  // Parameter names for this configuration, e.g. W_h, U_z, b_r, gamma_x_h.
  std::vector<std::string> parameter_names() const;
  ag::ParamSet init_params(Prng& prng, double sigma,
                           Precision precision = Precision::f64) const;
  CellNormState init_norm_state() const;

  // Hidden state shape for a batch given the input shape [N, in, ...].
  Shape hidden_shape(const Shape& input_shape) const;

  // One step. `params` holds this cell's variables keyed by unprefixed name.
  StepVars step(const ag::VarMap& params, ag::Var x, ag::Var h_prev,
                CellNormState& norm_state, const StepContext& ctx) const;

 private:
  ag::Var linear_x(const ag::VarMap& p, const std::string& w, ag::Var x) const;
  ag::Var linear_h(const ag::VarMap& p, const std::string& u, ag::Var h) const;
  ag::Var normalize(const ag::VarMap& p, const std::string& term, ag::Var v, bool with_beta,
                    CellNormState& st, const StepContext& ctx) const;
  ag::Var gate_preactivation(const ag::VarMap& p, char gate, ag::Var x, ag::Var h_prev,
                             CellNormState& st, const StepContext& ctx) const;

  CellConfig config_;
};

// Returns `prefix + name` entries of `vars` with the prefix stripped.
ag::VarMap scoped(const ag::VarMap& vars, const std::string& prefix);

struct SequenceVars {
  ag::Var final_h;
  std::vector<ag::Var> outputs;  // upward output per step
  std::vector<StepVars> steps;
};

// Runs the cell over inputs[t] with h0 = 0. masks may be empty (all valid)
// or hold one RowMask per step; padded samples keep h frozen and emit zero.
SequenceVars run_sequence(const RecurrentCell& cell, const ag::VarMap& params,
                          const std::vector<ag::Var>& inputs, CellNormState& norm_state,
                          norm::Mode mode, const std::vector<ag::RowMask>& masks = {});

// Tensor-level conveniences (no gradient tracking).
StepRecord gru_step(const RecurrentCell& cell, const ag::ParamSet& params, const Tensor& x,
                    const Tensor& h_prev, CellNormState* norm_state = nullptr,
                    norm::Mode mode = norm::Mode::train);
Tensor rnn_step(const RecurrentCell& cell, const ag::ParamSet& params, const Tensor& x,
                const Tensor& h_prev);

struct SequenceRecord {
  Tensor final_h;
  std::vector<Tensor> outputs;
  std::vector<StepRecord> steps;
};

SequenceRecord run_sequence(const RecurrentCell& cell, const ag::ParamSet& params,
                            const std::vector<Tensor>& inputs, bool record = true,
                            CellNormState* norm_state = nullptr,
                            norm::Mode mode = norm::Mode::train,
                            const std::vector<ag::RowMask>& masks = {});

StepRecord to_record(const StepVars& s);

}  // namespace detrend
