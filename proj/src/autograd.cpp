#include "detrend/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

namespace detrend::ag {

const Tensor& Var::value() const { return tape_->value(*this); }

Tape::Tape(Precision precision) : precision_(precision) { nodes_.reserve(1024); }

Var Tape::push(Node node) {
  if (node.value.precision() != precision_) node.value.set_precision(precision_);
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Var Tape::constant(Tensor value) {
  return push(Node{"constant", std::move(value), {}, {}, false, std::nullopt});
}

Var Tape::parameter(const std::string& name, Tensor value) {
  Var v = push(Node{"parameter", std::move(value), {}, {}, true, std::nullopt});
  parameters_.emplace_back(name, v);
  return v;
}

Var Tape::record(const char* op, Tensor value, std::vector<Var> inputs,
                 Adjoint adjoint) {
  Node node{op, std::move(value), {}, {}, false, std::nullopt};
  node.inputs.reserve(inputs.size());
  for (const auto& in : inputs) {
    if (in.tape_ != this) throw std::logic_error(std::string(op) + ": input from another tape");
    node.inputs.push_back(in.id_);
    node.requires_grad = node.requires_grad || nodes_[in.id_].requires_grad;
  }
  if (node.requires_grad) {
    if (!adjoint) throw std::logic_error(std::string(op) + ": no adjoint registered");
    node.adjoint = std::move(adjoint);
  }
  node.value.finalize(op);
  return push(std::move(node));
}

const Tensor* Tape::grad(Var v) const {
  const auto& g = nodes_[v.id()].grad;
  return g ? &*g : nullptr;
}

void Tape::backward(Var output, const Tensor& seed) {
  if (output.tape_ != this) throw std::logic_error("backward: foreign variable");
  auto& out = nodes_[output.id_];
  if (!seed.same_shape(out.value)) {
    throw ShapeError("backward: seed " + shape_string(seed.shape()) +
                     " does not match output " + shape_string(out.value.shape()));
  }
  for (auto& n : nodes_) n.grad.reset();
  out.grad = seed;
  out.grad->set_precision(precision_);

  std::vector<Tensor*> slots;
  for (std::size_t i = output.id_ + 1; i-- > 0;) {
    Node& node = nodes_[i];
    if (!node.requires_grad || !node.grad || !node.adjoint) continue;
    slots.assign(node.inputs.size(), nullptr);
    for (std::size_t k = 0; k < node.inputs.size(); ++k) {
      Node& in = nodes_[node.inputs[k]];
      if (!in.requires_grad) continue;
      if (!in.grad) in.grad = Tensor(in.value.shape(), precision_);
      slots[k] = &*in.grad;
    }
    node.adjoint(*node.grad, slots);
    for (auto* s : slots) {
      if (s) s->finalize(node.op);
    }
    // Interior gradients are not needed after their adjoint ran.
    if (!node.inputs.empty()) node.grad.reset();
  }
}

void Tape::backward(Var scalar_output) {
  const Tensor& v = value(scalar_output);
  if (v.size() != 1) throw ShapeError("backward: output is not a scalar");
  backward(scalar_output, Tensor::filled(v.shape(), 1.0, precision_));
}

std::map<std::string, Tensor> Tape::parameter_grads() const {
  std::map<std::string, Tensor> out;
  for (const auto& [name, v] : parameters_) {
    const auto& node = nodes_[v.id()];
    out.emplace(name, node.grad ? *node.grad : Tensor(node.value.shape(), precision_));
  }
  return out;
}

namespace {

void require_same(const Tensor& a, const Tensor& b, const char* op) {
  if (!a.same_shape(b)) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) +
                     " vs " + shape_string(b.shape()));
  }
}

void accumulate(Tensor* dst, const Tensor& src) {
  if (!dst) return;
  auto d = dst->data();
  auto s = src.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

std::size_t rows_of(const Tensor& t) { return t.dim(0); }

}  // namespace

Var add(Var a, Var b) {
  Tape& t = a.tape();
  require_same(a.value(), b.value(), "add");
  return t.record("add", detrend::add(a.value(), b.value()), {a, b},
                  [](const Tensor& g, std::span<Tensor* const> in) {
                    accumulate(in[0], g);
                    accumulate(in[1], g);
                  });
}

Var sub(Var a, Var b) {
  Tape& t = a.tape();
  require_same(a.value(), b.value(), "sub");
  return t.record("sub", detrend::sub(a.value(), b.value()), {a, b},
                  [](const Tensor& g, std::span<Tensor* const> in) {
                    accumulate(in[0], g);
                    if (in[1]) {
                      auto d = in[1]->data();
                      for (std::size_t i = 0; i < d.size(); ++i) d[i] -= g[i];
                    }
                  });
}

Var mul(Var a, Var b) {
  Tape& t = a.tape();
  require_same(a.value(), b.value(), "mul");
  const std::size_t ia = a.id(), ib = b.id();
  Tape* tp = &t;
  return t.record("mul", detrend::mul(a.value(), b.value()), {a, b},
                  [tp, ia, ib](const Tensor& g, std::span<Tensor* const> in) {
                    const Tensor& av = tp->value(ia);
                    const Tensor& bv = tp->value(ib);
                    if (in[0]) {
                      auto d = in[0]->data();
                      for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i] * bv[i];
                    }
                    if (in[1]) {
                      auto d = in[1]->data();
                      for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i] * av[i];
                    }
                  });
}

Var scale(Var a, double factor) {
  return a.tape().record("scale", detrend::scale(a.value(), factor), {a},
                         [factor](const Tensor& g, std::span<Tensor* const> in) {
                           auto d = in[0]->data();
                           for (std::size_t i = 0; i < d.size(); ++i) d[i] += factor * g[i];
                         });
}

Var one_minus(Var a) {
  Tensor out = Tensor::zeros_like(a.value());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = 1.0 - a.value()[i];
  return a.tape().record("one_minus", std::move(out), {a},
                         [](const Tensor& g, std::span<Tensor* const> in) {
                           auto d = in[0]->data();
                           for (std::size_t i = 0; i < d.size(); ++i) d[i] -= g[i];
                         });
}

Var sigmoid(Var a) {
  Tape& t = a.tape();
  Tape* tp = &t;
  Tensor out = detrend::sigmoid(a.value());
  const std::size_t self = t.size();
  const double corrupt = t.corrupt_adjoints() ? 1.1 : 1.0;
  return t.record("sigmoid", std::move(out), {a},
                  [tp, self, corrupt](const Tensor& g, std::span<Tensor* const> in) {
                    const Tensor& s = tp->value(self);
                    auto d = in[0]->data();
                    for (std::size_t i = 0; i < d.size(); ++i) {
                      d[i] += corrupt * g[i] * s[i] * (1.0 - s[i]);
                    }
                  });
}

Var tanh(Var a) {
  Tape& t = a.tape();
  Tape* tp = &t;
  const std::size_t self = t.size();
  return t.record("tanh", detrend::tanh(a.value()), {a},
                  [tp, self](const Tensor& g, std::span<Tensor* const> in) {
                    const Tensor& y = tp->value(self);
                    auto d = in[0]->data();
                    for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i] * (1.0 - y[i] * y[i]);
                  });
}

Var relu(Var a) {
  Tape& t = a.tape();
  Tape* tp = &t;
  const std::size_t ia = a.id();
  return t.record("relu", detrend::relu(a.value()), {a},
                  [tp, ia](const Tensor& g, std::span<Tensor* const> in) {
                    const Tensor& x = tp->value(ia);
                    auto d = in[0]->data();
                    for (std::size_t i = 0; i < d.size(); ++i) {
                      if (x[i] > 0.0) d[i] += g[i];
                    }
                  });
}

Var add_bias(Var x, Var b) {
  const Tensor& xv = x.value();
  const Tensor& bv = b.value();
  if (xv.rank() < 2 || bv.rank() != 1 || bv.dim(0) != xv.dim(1)) {
    throw ShapeError("add_bias: bias " + shape_string(bv.shape()) + " for input " +
                     shape_string(xv.shape()));
  }
  const std::size_t n = xv.dim(0), c = xv.dim(1);
  const std::size_t inner = xv.size() / (n * c);
  Tensor out = xv;
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t ch = 0; ch < c; ++ch) {
      double* p = out.data().data() + (r * c + ch) * inner;
      for (std::size_t i = 0; i < inner; ++i) p[i] += bv[ch];
    }
  return x.tape().record("add_bias", std::move(out), {x, b},
                         [n, c, inner](const Tensor& g, std::span<Tensor* const> in) {
                           accumulate(in[0], g);
                           if (in[1]) {
                             auto d = in[1]->data();
                             for (std::size_t r = 0; r < n; ++r)
                               for (std::size_t ch = 0; ch < c; ++ch) {
                                 const double* p = g.data().data() + (r * c + ch) * inner;
                                 double acc = 0.0;
                                 for (std::size_t i = 0; i < inner; ++i) acc += p[i];
                                 d[ch] += acc;
                               }
                           }
                         });
}

Var matmul(Var x, Var w) {
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  if (xv.rank() != 2) throw ShapeError("matmul: input must be [N,K]");
  Tensor out = detrend::dense(xv, wv);
  Tape* tp = &x.tape();
  const std::size_t ix = x.id(), iw = w.id();
  return x.tape().record("matmul", std::move(out), {x, w},
                         [tp, ix, iw](const Tensor& g, std::span<Tensor* const> in) {
                           const Tensor& xv = tp->value(ix);
                           const Tensor& wv = tp->value(iw);
                           const std::size_t n = xv.dim(0), k = wv.dim(0), m = wv.dim(1);
                           if (in[0]) {
                             auto d = in[0]->data();
                             for (std::size_t r = 0; r < n; ++r)
                               for (std::size_t i = 0; i < k; ++i) {
                                 double acc = 0.0;
                                 for (std::size_t j = 0; j < m; ++j)
                                   acc += g[r * m + j] * wv[i * m + j];
                                 d[r * k + i] += acc;
                               }
                           }
                           if (in[1]) {
                             auto d = in[1]->data();
                             for (std::size_t i = 0; i < k; ++i)
                               for (std::size_t j = 0; j < m; ++j) {
                                 double acc = 0.0;
                                 for (std::size_t r = 0; r < n; ++r)
                                   acc += xv[r * k + i] * g[r * m + j];
                                 d[i * m + j] += acc;
                               }
                           }
                         });
}

Var conv2d(Var x, Var w, const ConvSpec& spec) {
  Tensor out = detrend::conv2d(x.value(), spec, w.value());
  Tape* tp = &x.tape();
  const std::size_t ix = x.id(), iw = w.id();
  return x.tape().record(
      "conv2d", std::move(out), {x, w},
      [tp, ix, iw, spec](const Tensor& g, std::span<Tensor* const> in) {
        const Tensor& xv = tp->value(ix);
        if (in[0]) accumulate(in[0], conv2d_grad_input(g, spec, tp->value(iw), xv.shape()));
        if (in[1]) accumulate(in[1], conv2d_grad_weights(g, spec, xv));
      });
}

Var maxpool2d(Var x, const PoolSpec& spec) {
  auto pooled = detrend::maxpool2d(x.value(), spec);
  auto argmax = std::make_shared<std::vector<std::size_t>>(std::move(pooled.argmax));
  return x.tape().record("maxpool2d", std::move(pooled.output), {x},
                         [argmax](const Tensor& g, std::span<Tensor* const> in) {
                           auto d = in[0]->data();
                           for (std::size_t o = 0; o < argmax->size(); ++o)
                             d[(*argmax)[o]] += g[o];
                         });
}

Var global_avg_pool(Var x) {
  const Tensor& xv = x.value();
  if (xv.rank() != 4) throw ShapeError("global_avg_pool: expected [N,C,H,W]");
  const std::size_t area = xv.dim(2) * xv.dim(3);
  return x.tape().record("global_avg_pool", detrend::global_avg_pool(xv), {x},
                         [area](const Tensor& g, std::span<Tensor* const> in) {
                           auto d = in[0]->data();
                           const double inv = 1.0 / static_cast<double>(area);
                           for (std::size_t p = 0; p < g.size(); ++p)
                             for (std::size_t i = 0; i < area; ++i) d[p * area + i] += g[p] * inv;
                         });
}

Var blend(const RowMask& mask, Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_same(av, bv, "blend");
  const std::size_t n = rows_of(av);
  if (mask.size() != n) throw ShapeError("blend: mask length mismatch");
  const std::size_t inner = av.size() / n;
  Tensor out = bv;
  for (std::size_t r = 0; r < n; ++r) {
    if (!mask[r]) continue;
    std::copy_n(av.data().data() + r * inner, inner, out.data().data() + r * inner);
  }
  return a.tape().record("blend", std::move(out), {a, b},
                         [mask, inner](const Tensor& g, std::span<Tensor* const> in) {
                           for (std::size_t r = 0; r < mask.size(); ++r) {
                             Tensor* dst = mask[r] ? in[0] : in[1];
                             if (!dst) continue;
                             double* d = dst->data().data() + r * inner;
                             const double* s = g.data().data() + r * inner;
                             for (std::size_t i = 0; i < inner; ++i) d[i] += s[i];
                           }
                         });
}

Var sum(Var x) {
  Tensor out({1}, x.value().precision());
  out[0] = detrend::sum(x.value());
  return x.tape().record("sum", std::move(out), {x},
                         [](const Tensor& g, std::span<Tensor* const> in) {
                           for (auto& v : in[0]->data()) v += g[0];
                         });
}

Var weighted_sum(Var x, const Tensor& coeffs) {
  require_same(x.value(), coeffs, "weighted_sum");
  Tensor out({1}, x.value().precision());
  double acc = 0.0;
  for (std::size_t i = 0; i < coeffs.size(); ++i) acc += coeffs[i] * x.value()[i];
  out[0] = acc;
  return x.tape().record("weighted_sum", std::move(out), {x},
                         [coeffs](const Tensor& g, std::span<Tensor* const> in) {
                           auto d = in[0]->data();
                           for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[0] * coeffs[i];
                         });
}

Var mean_of(const std::vector<Var>& xs) {
  if (xs.empty()) throw std::invalid_argument("mean_of: no inputs");
  Tensor out = Tensor::zeros_like(xs.front().value());
  for (const auto& x : xs) {
    require_same(out, x.value(), "mean_of");
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += x.value()[i];
  }
  const double inv = 1.0 / static_cast<double>(xs.size());
  for (auto& v : out.data()) v *= inv;
  return xs.front().tape().record("mean_of", std::move(out), xs,
                                  [inv](const Tensor& g, std::span<Tensor* const> in) {
                                    for (auto* dst : in) {
                                      if (!dst) continue;
                                      auto d = dst->data();
                                      for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i] * inv;
                                    }
                                  });
}

Tensor softmax_rows(const Tensor& logits) {
  if (logits.rank() != 2) throw ShapeError("softmax_rows: expected [N,C]");
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  Tensor out(logits.shape(), logits.precision());
  for (std::size_t r = 0; r < n; ++r) {
    double mx = logits[r * c];
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, logits[r * c + j]);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      out[r * c + j] = std::exp(logits[r * c + j] - mx);
      z += out[r * c + j];
    }
    for (std::size_t j = 0; j < c; ++j) out[r * c + j] /= z;
  }
  out.finalize("softmax");
  return out;
}

Var softmax_cross_entropy(Var logits, const std::vector<std::size_t>& labels,
                          const std::vector<double>& weights) {
  const Tensor& lv = logits.value();
  if (lv.rank() != 2) throw ShapeError("softmax_cross_entropy: expected [N,C]");
  const std::size_t n = lv.dim(0), c = lv.dim(1);
  if (labels.size() != n || weights.size() != n) {
    throw ShapeError("softmax_cross_entropy: labels/weights length mismatch");
  }
  Tensor probs = softmax_rows(lv);
  Tensor out({1}, lv.precision());
  double loss = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    if (labels[r] >= c) throw std::out_of_range("softmax_cross_entropy: label out of range");
    double mx = lv[r * c];
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, lv[r * c + j]);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(lv[r * c + j] - mx);
    loss += weights[r] * -(lv[r * c + labels[r]] - mx - std::log(z));
  }
  out[0] = loss;
  return logits.tape().record(
      "softmax_cross_entropy", std::move(out), {logits},
      [probs, labels, weights, c](const Tensor& g, std::span<Tensor* const> in) {
        auto d = in[0]->data();
        for (std::size_t r = 0; r < labels.size(); ++r)
          for (std::size_t j = 0; j < c; ++j) {
            const double target = j == labels[r] ? 1.0 : 0.0;
            d[r * c + j] += g[0] * weights[r] * (probs[r * c + j] - target);
          }
      });
}

VarMap register_parameters(Tape& tape, const ParamSet& params) {
  VarMap vars;
  for (const auto& [name, value] : params) vars.emplace(name, tape.parameter(name, value));
  return vars;
}

VarMap register_constants(Tape& tape, const ParamSet& params) {
  VarMap vars;
  for (const auto& [name, value] : params) vars.emplace(name, tape.constant(value));
  return vars;
}

}  // namespace detrend::ag
