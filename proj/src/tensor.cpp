#include "detrend/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>
#include <thread>

namespace detrend {

std::string_view to_string(Precision p) {
  return p == Precision::f32 ? "f32" : "f64";
}

Precision parse_precision(std::string_view text) {
  if (text == "f32") return Precision::f32;
  if (text == "f64") return Precision::f64;
  throw std::invalid_argument("unknown precision '" + std::string(text) +
                              "' (expected f32 or f64)");
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_product(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

static void check_extents(const Shape& shape) {
  for (auto d : shape) {
    if (d == 0) throw ShapeError("zero extent in shape " + shape_string(shape));
  }
}

Tensor::Tensor(Shape shape, Precision precision)
    : shape_(std::move(shape)), precision_(precision) {
  check_extents(shape_);
  data_.assign(shape_product(shape_), 0.0);
}

Tensor::Tensor(Shape shape, std::vector<double> values, Precision precision)
    : shape_(std::move(shape)), data_(std::move(values)), precision_(precision) {
  check_extents(shape_);
  if (shape_product(shape_) != data_.size()) {
    throw ShapeError("shape " + shape_string(shape_) + " does not match " +
                     std::to_string(data_.size()) + " values");
  }
  finalize("tensor");
}

Tensor Tensor::filled(Shape shape, double value, Precision precision) {
  Tensor t(std::move(shape), precision);
  std::fill(t.data_.begin(), t.data_.end(), value);
  t.finalize("filled");
  return t;
}

Tensor Tensor::zeros_like(const Tensor& other) {
  return Tensor(other.shape_, other.precision_);
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= shape_.size()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for " +
                     shape_string(shape_));
  }
  return shape_[axis];
}

std::size_t Tensor::offset(std::initializer_list<std::size_t> index) const {
  if (index.size() != shape_.size()) {
    throw ShapeError("index rank mismatch for " + shape_string(shape_));
  }
  std::size_t off = 0;
  std::size_t axis = 0;
  for (auto i : index) {
    if (i >= shape_[axis]) throw ShapeError("index out of range");
    off = off * shape_[axis] + i;
    ++axis;
  }
  return off;
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
  return data_[offset(index)];
}

double& Tensor::at(std::initializer_list<std::size_t> index) {
  return data_[offset(index)];
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_product(shape) != data_.size()) {
    throw ShapeError("cannot reshape " + shape_string(shape_) + " to " +
                     shape_string(shape));
  }
  Tensor t = *this;
  t.shape_ = std::move(shape);
  return t;
}

void Tensor::set_precision(Precision p) {
  precision_ = p;
  finalize("set_precision");
}

double round_to(Precision p, double v) {
  return p == Precision::f32 ? static_cast<double>(static_cast<float>(v)) : v;
}

void Tensor::finalize(std::string_view op) {
  if (precision_ == Precision::f32) {
    for (auto& v : data_) v = static_cast<double>(static_cast<float>(v));
  }
  for (auto v : data_) {
    if (!std::isfinite(v)) {
      throw NumericError("non-finite value produced by " + std::string(op));
    }
  }
}

bool Tensor::bit_equal(const Tensor& other) const {
  if (shape_ != other.shape_) return false;
  for (std::size_t i = 0; i < data_.size(); ++i) {
    if (std::memcmp(&data_[i], &other.data_[i], sizeof(double)) != 0) return false;
  }
  return true;
}

Precision combine(Precision a, Precision b) {
  return (a == Precision::f32 || b == Precision::f32) ? Precision::f32
                                                      : Precision::f64;
}

std::size_t conv_extent(std::size_t in, std::size_t kernel, std::size_t stride,
                        std::size_t pad) {
  if (stride == 0) throw ShapeError("stride must be positive");
  const auto padded = static_cast<long long>(in + 2 * pad);
  const auto k = static_cast<long long>(kernel);
  if (padded < k) {
    throw ShapeError("kernel " + std::to_string(kernel) +
                     " larger than padded extent " + std::to_string(padded));
  }
  return static_cast<std::size_t>((padded - k) / static_cast<long long>(stride)) + 1;
}

std::size_t ConvSpec::out_h(std::size_t in_h) const {
  return conv_extent(in_h, kernel_h, stride_h, pad_h);
}

std::size_t ConvSpec::out_w(std::size_t in_w) const {
  return conv_extent(in_w, kernel_w, stride_w, pad_w);
}

namespace {

std::size_t g_threads = 1;

struct Nchw {
  std::size_t n, c, h, w;
  bool batched;
};

Nchw as_nchw(const Tensor& t, std::string_view op) {
  if (t.rank() == 3) return {1, t.dim(0), t.dim(1), t.dim(2), false};
  if (t.rank() == 4) return {t.dim(0), t.dim(1), t.dim(2), t.dim(3), true};
  throw ShapeError(std::string(op) + ": expected [C,H,W] or [N,C,H,W], got " +
                   shape_string(t.shape()));
}

// Output rows oy for which iy = oy*stride - pad + k lies inside [0, in).
void valid_range(std::size_t out, std::size_t in, std::size_t stride,
                 std::size_t pad, std::size_t k, std::size_t& lo, std::size_t& hi) {
  const long long s = static_cast<long long>(stride);
  const long long off = static_cast<long long>(k) - static_cast<long long>(pad);
  long long first = off >= 0 ? 0 : (-off + s - 1) / s;
  long long last = (static_cast<long long>(in) - 1 - off);
  last = last < 0 ? -1 : last / s;
  if (last > static_cast<long long>(out) - 1) last = static_cast<long long>(out) - 1;
  if (first > last) {
    lo = 1;
    hi = 0;
    return;
  }
  lo = static_cast<std::size_t>(first);
  hi = static_cast<std::size_t>(last);
}

}  // namespace

void set_num_threads(std::size_t n) { g_threads = std::max<std::size_t>(1, n); }
std::size_t num_threads() { return g_threads; }

void parallel_for(std::size_t count, const std::function<void(std::size_t)>& fn) {
  const std::size_t workers = std::min(g_threads, count);
  if (workers <= 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      for (std::size_t i = w; i < count; i += workers) fn(i);
    });
  }
  for (auto& t : pool) t.join();
}

namespace {

// Column matrix [ic*kh*kw, n*oh*ow]; out-of-range taps are zero.
struct Columns {
  std::size_t rows = 0, cols = 0, oh = 0, ow = 0;
  std::vector<double> data;
};

Columns im2col(const double* x, const Nchw& in, const ConvSpec& spec) {
  Columns c;
  c.oh = spec.out_h(in.h);
  c.ow = spec.out_w(in.w);
  const std::size_t kh = spec.kernel_h, kw = spec.kernel_w, plane = c.oh * c.ow;
  c.rows = in.c * kh * kw;
  c.cols = in.n * plane;
  c.data.assign(c.rows * c.cols, 0.0);
  for (std::size_t ic = 0; ic < in.c; ++ic) {
    for (std::size_t ky = 0; ky < kh; ++ky) {
      std::size_t y0, y1;
      valid_range(c.oh, in.h, spec.stride_h, spec.pad_h, ky, y0, y1);
      for (std::size_t kx = 0; kx < kw; ++kx) {
        std::size_t x0, x1;
        valid_range(c.ow, in.w, spec.stride_w, spec.pad_w, kx, x0, x1);
        if (y0 > y1 || x0 > x1) continue;
        double* row = c.data.data() + ((ic * kh + ky) * kw + kx) * c.cols;
        for (std::size_t n = 0; n < in.n; ++n) {
          const double* src = x + (n * in.c + ic) * in.h * in.w;
          for (std::size_t oy = y0; oy <= y1; ++oy) {
            const double* srow = src + (oy * spec.stride_h + ky - spec.pad_h) * in.w;
            double* dst = row + n * plane + oy * c.ow;
            for (std::size_t ox = x0; ox <= x1; ++ox) {
              dst[ox] = srow[ox * spec.stride_w + kx - spec.pad_w];
            }
          }
        }
      }
    }
  }
  return c;
}

// [n, c, p] -> [c, n*p]
std::vector<double> channels_major(const double* g, std::size_t n, std::size_t c, std::size_t p) {
  std::vector<double> out(n * c * p);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      std::copy_n(g + (i * c + ch) * p, p, out.data() + ch * n * p + i * p);
    }
  }
  return out;
}

}  // namespace

Tensor conv2d(const Tensor& input, const ConvSpec& spec, const Tensor& weights,
              const std::optional<Tensor>& bias) {
  const auto in = as_nchw(input, "conv2d");
  if (in.c != spec.in_channels) {
    throw ShapeError("conv2d: input has " + std::to_string(in.c) +
                     " channels, spec expects " + std::to_string(spec.in_channels));
  }
  if (weights.shape() != spec.weight_shape()) {
    throw ShapeError("conv2d: weights " + shape_string(weights.shape()) +
                     " do not match spec " + shape_string(spec.weight_shape()));
  }
  if (bias && bias->shape() != Shape{spec.out_channels}) {
    throw ShapeError("conv2d: bias shape " + shape_string(bias->shape()));
  }
  const Columns col = im2col(input.data().data(), in, spec);
  const std::size_t oc_n = spec.out_channels, plane = col.oh * col.ow;
  Shape out_shape =
      in.batched ? Shape{in.n, oc_n, col.oh, col.ow} : Shape{oc_n, col.oh, col.ow};
  Tensor out(out_shape, combine(input.precision(), weights.precision()));
  const double* w = weights.data().data();
  double* y = out.data().data();

  parallel_for(oc_n, [&](std::size_t oc) {
    std::vector<double> acc(col.cols, bias ? (*bias)[oc] : 0.0);
    const double* wrow = w + oc * col.rows;
    for (std::size_t k = 0; k < col.rows; ++k) {
      const double wv = wrow[k];
      if (wv == 0.0) continue;
      const double* c = col.data.data() + k * col.cols;
      for (std::size_t j = 0; j < col.cols; ++j) acc[j] += wv * c[j];
    }
    for (std::size_t n = 0; n < in.n; ++n) {
      std::copy_n(acc.data() + n * plane, plane, y + (n * oc_n + oc) * plane);
    }
  });
  out.finalize("conv2d");
  return out;
}

Tensor conv2d_grad_input(const Tensor& grad_out, const ConvSpec& spec,
                         const Tensor& weights, const Shape& input_shape) {
  Tensor gin(input_shape, grad_out.precision());
  const auto in = as_nchw(gin, "conv2d_grad_input");
  const auto go = as_nchw(grad_out, "conv2d_grad_input");
  const std::size_t kh = spec.kernel_h, kw = spec.kernel_w;
  const std::size_t plane = go.h * go.w, cols = go.n * plane, rows = in.c * kh * kw;
  const std::vector<double> g = channels_major(grad_out.data().data(), go.n, go.c, plane);
  const double* w = weights.data().data();

  std::vector<double> dcol(rows * cols, 0.0);
  parallel_for(rows, [&](std::size_t k) {
    double* d = dcol.data() + k * cols;
    for (std::size_t oc = 0; oc < go.c; ++oc) {
      const double wv = w[oc * rows + k];
      if (wv == 0.0) continue;
      const double* gr = g.data() + oc * cols;
      for (std::size_t j = 0; j < cols; ++j) d[j] += wv * gr[j];
    }
  });

  double* gx = gin.data().data();
  for (std::size_t ic = 0; ic < in.c; ++ic) {
    for (std::size_t ky = 0; ky < kh; ++ky) {
      std::size_t y0, y1;
      valid_range(go.h, in.h, spec.stride_h, spec.pad_h, ky, y0, y1);
      for (std::size_t kx = 0; kx < kw; ++kx) {
        std::size_t x0, x1;
        valid_range(go.w, in.w, spec.stride_w, spec.pad_w, kx, x0, x1);
        if (y0 > y1 || x0 > x1) continue;
        const double* row = dcol.data() + ((ic * kh + ky) * kw + kx) * cols;
        for (std::size_t n = 0; n < in.n; ++n) {
          double* dst = gx + (n * in.c + ic) * in.h * in.w;
          for (std::size_t oy = y0; oy <= y1; ++oy) {
            double* drow = dst + (oy * spec.stride_h + ky - spec.pad_h) * in.w;
            const double* src = row + n * plane + oy * go.w;
            for (std::size_t ox = x0; ox <= x1; ++ox) {
              drow[ox * spec.stride_w + kx - spec.pad_w] += src[ox];
            }
          }
        }
      }
    }
  }
  gin.finalize("conv2d_grad_input");
  return gin;
}

Tensor conv2d_grad_weights(const Tensor& grad_out, const ConvSpec& spec,
                           const Tensor& input) {
  Tensor gw(spec.weight_shape(), grad_out.precision());
  const auto in = as_nchw(input, "conv2d_grad_weights");
  const auto go = as_nchw(grad_out, "conv2d_grad_weights");
  const Columns col = im2col(input.data().data(), in, spec);
  const std::vector<double> g = channels_major(grad_out.data().data(), go.n, go.c, go.h * go.w);
  double* dw = gw.data().data();
  // One output channel per task; every entry is a fixed-order dot product.
  parallel_for(go.c, [&](std::size_t oc) {
    const double* gr = g.data() + oc * col.cols;
    for (std::size_t k = 0; k < col.rows; ++k) {
      const double* c = col.data.data() + k * col.cols;
      double acc = 0.0;
      for (std::size_t j = 0; j < col.cols; ++j) acc += gr[j] * c[j];
      dw[oc * col.rows + k] = acc;
    }
  });
  gw.finalize("conv2d_grad_weights");
  return gw;
}

PoolResult maxpool2d(const Tensor& input, const PoolSpec& spec) {
  const auto in = as_nchw(input, "maxpool2d");
  if (spec.window_h > in.h || spec.window_w > in.w) {
    throw ShapeError("maxpool2d: window larger than input " +
                     shape_string(input.shape()));
  }
  const std::size_t oh = conv_extent(in.h, spec.window_h, spec.stride_h, 0);
  const std::size_t ow = conv_extent(in.w, spec.window_w, spec.stride_w, 0);
  Shape out_shape = in.batched ? Shape{in.n, in.c, oh, ow} : Shape{in.c, oh, ow};
  PoolResult r{Tensor(out_shape, input.precision()), {}};
  r.argmax.resize(r.output.size());
  const double* x = input.data().data();
  for (std::size_t plane = 0; plane < in.n * in.c; ++plane) {
    const std::size_t base = plane * in.h * in.w;
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        std::size_t best = base + (oy * spec.stride_h) * in.w + ox * spec.stride_w;
        for (std::size_t wy = 0; wy < spec.window_h; ++wy) {
          for (std::size_t wx = 0; wx < spec.window_w; ++wx) {
            const std::size_t idx =
                base + (oy * spec.stride_h + wy) * in.w + ox * spec.stride_w + wx;
            // strict comparison keeps the first index in scan order on ties
            if (x[idx] > x[best]) best = idx;
          }
        }
        const std::size_t o = (plane * oh + oy) * ow + ox;
        r.output[o] = x[best];
        r.argmax[o] = best;
      }
    }
  }
  return r;
}

Tensor maxpool2d_grad(const Tensor& grad_out, const std::vector<std::size_t>& argmax,
                      const Shape& input_shape) {
  Tensor gin(input_shape, grad_out.precision());
  for (std::size_t o = 0; o < argmax.size(); ++o) gin[argmax[o]] += grad_out[o];
  gin.finalize("maxpool2d_grad");
  return gin;
}

Tensor global_avg_pool(const Tensor& input) {
  const auto in = as_nchw(input, "global_avg_pool");
  Shape out_shape = in.batched ? Shape{in.n, in.c} : Shape{in.c};
  Tensor out(out_shape, input.precision());
  const std::size_t area = in.h * in.w;
  for (std::size_t plane = 0; plane < in.n * in.c; ++plane) {
    double acc = 0.0;
    for (std::size_t i = 0; i < area; ++i) acc += input[plane * area + i];
    out[plane] = acc / static_cast<double>(area);
  }
  out.finalize("global_avg_pool");
  return out;
}

Tensor dense(const Tensor& input, const Tensor& weights,
             const std::optional<Tensor>& bias) {
  if (weights.rank() != 2) throw ShapeError("dense: weights must be [K,M]");
  const std::size_t k = weights.dim(0), m = weights.dim(1);
  std::size_t n = 0;
  Shape out_shape;
  if (input.rank() == 1 && input.dim(0) == k) {
    n = 1;
    out_shape = {m};
  } else if (input.rank() == 2 && input.dim(1) == k) {
    n = input.dim(0);
    out_shape = {n, m};
  } else {
    throw ShapeError("dense: input " + shape_string(input.shape()) +
                     " does not match weights " + shape_string(weights.shape()));
  }
  if (bias && bias->shape() != Shape{m}) {
    throw ShapeError("dense: bias shape " + shape_string(bias->shape()));
  }
  Tensor out(out_shape, combine(input.precision(), weights.precision()));
  for (std::size_t r = 0; r < n; ++r) {
    double* orow = out.data().data() + r * m;
    if (bias) {
      for (std::size_t j = 0; j < m; ++j) orow[j] = (*bias)[j];
    }
    for (std::size_t i = 0; i < k; ++i) {
      const double xv = input[r * k + i];
      const double* wrow = weights.data().data() + i * m;
      for (std::size_t j = 0; j < m; ++j) orow[j] += xv * wrow[j];
    }
  }
  out.finalize("dense");
  return out;
}

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

namespace {

template <typename F>
Tensor map_unary(const Tensor& x, F f, std::string_view op) {
  Tensor out = Tensor::zeros_like(x);
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = f(x[i]);
  out.finalize(op);
  return out;
}

template <typename F>
Tensor map_binary(const Tensor& a, const Tensor& b, F f, std::string_view op) {
  if (!a.same_shape(b)) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) +
                     " vs " + shape_string(b.shape()));
  }
  Tensor out(a.shape(), combine(a.precision(), b.precision()));
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i], b[i]);
  out.finalize(op);
  return out;
}

}  // namespace

Tensor sigmoid(const Tensor& x) {
  return map_unary(x, [](double v) { return sigmoid(v); }, "sigmoid");
}
Tensor tanh(const Tensor& x) {
  return map_unary(x, [](double v) { return std::tanh(v); }, "tanh");
}
Tensor relu(const Tensor& x) {
  return map_unary(x, [](double v) { return v > 0.0 ? v : 0.0; }, "relu");
}
Tensor add(const Tensor& a, const Tensor& b) {
  return map_binary(a, b, [](double u, double v) { return u + v; }, "add");
}
Tensor sub(const Tensor& a, const Tensor& b) {
  return map_binary(a, b, [](double u, double v) { return u - v; }, "sub");
}
Tensor mul(const Tensor& a, const Tensor& b) {
  return map_binary(a, b, [](double u, double v) { return u * v; }, "mul");
}
Tensor scale(const Tensor& a, double factor) {
  return map_unary(a, [factor](double v) { return v * factor; }, "scale");
}

double sum(const Tensor& x) {
  double acc = 0.0;
  for (auto v : x.data()) acc += v;
  return acc;
}

double l2_norm(const Tensor& x) {
  double acc = 0.0;
  for (auto v : x.data()) acc += v * v;
  return std::sqrt(acc);
}

}  // namespace detrend
