#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "detrend/tensor.hpp"

namespace detrend::ag {

class Tape;

// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;

  bool valid() const { return tape_ != nullptr; }
  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

// Adds the contribution of grad_out into each non-null input accumulator.
using Adjoint =
    std::function<void(const Tensor& grad_out, std::span<Tensor* const> grad_in)>;

// Per-sample validity (1 = real step, 0 = padding). Empty means all valid.
using RowMask = std::vector<std::uint8_t>;

class Tape {
 public:
  explicit Tape(Precision precision = Precision::f64);
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Precision precision() const { return precision_; }

  Var constant(Tensor value);
  Var parameter(const std::string& name, Tensor value);

  // Throws std::logic_error when an input needs a gradient and no adjoint is
  // supplied.
  Var record(const char* op, Tensor value, std::vector<Var> inputs, Adjoint adjoint);

  // Reverse sweep from `output`; every node is visited at most once.
  void backward(Var output, const Tensor& seed);
  void backward(Var scalar_output);

  const Tensor& value(Var v) const { return nodes_[v.id()].value; }
  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(Var v) const { return nodes_[v.id()].requires_grad; }
  const Tensor* grad(Var v) const;

  const std::vector<std::pair<std::string, Var>>& parameters() const {
    return parameters_;
  }
  // Gradient for every registered parameter (zeros when unreached).
  std::map<std::string, Tensor> parameter_grads() const;

  std::size_t size() const { return nodes_.size(); }
  const char* op_name(Var v) const { return nodes_[v.id()].op; }

  // Negative-control switch used by gradient checking: perturbs the
  // sigmoid adjoint so analytic gradients are deliberately wrong.
  void set_corrupt_adjoints(bool on) { corrupt_ = on; }
  bool corrupt_adjoints() const { return corrupt_; }

 private:
  struct Node {
    const char* op;
    Tensor value;
    std::vector<std::size_t> inputs;
    Adjoint adjoint;
    bool requires_grad = false;
    std::optional<Tensor> grad;
  };

  Var push(Node node);

  Precision precision_;
  bool corrupt_ = false;
  std::vector<Node> nodes_;
  std::vector<std::pair<std::string, Var>> parameters_;
};

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double factor);
Var one_minus(Var a);
Var sigmoid(Var a);
Var tanh(Var a);
Var relu(Var a);

// Adds a per-feature bias b[C] to x[N,C,...].
Var add_bias(Var x, Var b);

// x[N,K] . w[K,M]
Var matmul(Var x, Var w);
Var conv2d(Var x, Var w, const ConvSpec& spec);
Var maxpool2d(Var x, const PoolSpec& spec);
Var global_avg_pool(Var x);

// Row-wise select: out[n] = mask[n] ? a[n] : b[n].
Var blend(const RowMask& mask, Var a, Var b);

// Scalar [1] results.
Var sum(Var x);
Var weighted_sum(Var x, const Tensor& coeffs);

// Mean of equally shaped inputs.
Var mean_of(const std::vector<Var>& xs);

// sum_n weight[n] * -log softmax(logits[n])[label[n]], logits [N,C].
Var softmax_cross_entropy(Var logits, const std::vector<std::size_t>& labels,
                          const std::vector<double>& weights);

Tensor softmax_rows(const Tensor& logits);

using ParamSet = std::map<std::string, Tensor>;
using VarMap = std::map<std::string, Var>;

// Registers every tensor as a named parameter on the tape.
VarMap register_parameters(Tape& tape, const ParamSet& params);
// Registers every tensor as a constant (no gradient tracking).
VarMap register_constants(Tape& tape, const ParamSet& params);

}  // namespace detrend::ag
