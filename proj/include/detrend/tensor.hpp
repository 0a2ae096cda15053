#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace detrend {

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Precision { f32, f64 };

std::string_view to_string(Precision p);
Precision parse_precision(std::string_view text);

using Shape = std::vector<std::size_t>;

std::string shape_string(const Shape& shape);
std::size_t shape_product(const Shape& shape);

// Dense row-major array. Values are held in double storage; in f32 mode every
// produced value is rounded to the nearest float so results match 32-bit
// storage exactly.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, Precision precision = Precision::f64);
  Tensor(Shape shape, std::vector<double> values,
         Precision precision = Precision::f64);

  static Tensor filled(Shape shape, double value,
                       Precision precision = Precision::f64);
  static Tensor zeros_like(const Tensor& other);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }
  Precision precision() const { return precision_; }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  const std::vector<double>& values() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double at(std::initializer_list<std::size_t> index) const;
  double& at(std::initializer_list<std::size_t> index);

  Tensor reshaped(Shape shape) const;
  void set_precision(Precision p);

  // Rounds to the storage precision and rejects NaN/Inf.
  void finalize(std::string_view op);

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
  bool bit_equal(const Tensor& other) const;

 private:
  std::size_t offset(std::initializer_list<std::size_t> index) const;

  Shape shape_;
  std::vector<double> data_;
  Precision precision_ = Precision::f64;
};

Precision combine(Precision a, Precision b);
double round_to(Precision p, double v);

struct ConvSpec {
  std::size_t kernel_h = 1;
  std::size_t kernel_w = 1;
  std::size_t in_channels = 1;
  std::size_t out_channels = 1;
  std::size_t stride_h = 1;
  std::size_t stride_w = 1;
  std::size_t pad_h = 0;
  std::size_t pad_w = 0;

  // floor((in + 2*pad - kernel) / stride) + 1; throws when it would be < 1.
  std::size_t out_h(std::size_t in_h) const;
  std::size_t out_w(std::size_t in_w) const;
  Shape weight_shape() const {
    return {out_channels, in_channels, kernel_h, kernel_w};
  }
  std::size_t weight_count() const {
    return out_channels * in_channels * kernel_h * kernel_w;
  }
};

std::size_t conv_extent(std::size_t in, std::size_t kernel, std::size_t stride,
                        std::size_t pad);

struct PoolSpec {
  std::size_t window_h = 2;
  std::size_t window_w = 2;
  std::size_t stride_h = 2;
  std::size_t stride_w = 2;
};

// Worker count used by the batched spatial kernels. Results are bit-identical
// for every value.
void set_num_threads(std::size_t n);
std::size_t num_threads();
void parallel_for(std::size_t count, const std::function<void(std::size_t)>& fn);

// Spatial kernels accept [C,H,W] or batched [N,C,H,W] input. Weights are
// laid out [out, in, kh, kw]. Convolution is cross-correlation.
Tensor conv2d(const Tensor& input, const ConvSpec& spec, const Tensor& weights,
              const std::optional<Tensor>& bias = std::nullopt);
Tensor conv2d_grad_input(const Tensor& grad_out, const ConvSpec& spec,
                         const Tensor& weights, const Shape& input_shape);
Tensor conv2d_grad_weights(const Tensor& grad_out, const ConvSpec& spec,
                           const Tensor& input);

struct PoolResult {
  Tensor output;
  std::vector<std::size_t> argmax;  // flat input index per output element
};

PoolResult maxpool2d(const Tensor& input, const PoolSpec& spec);
Tensor maxpool2d_grad(const Tensor& grad_out, const std::vector<std::size_t>& argmax,
                      const Shape& input_shape);

// [C,H,W] -> [C] or [N,C,H,W] -> [N,C].
Tensor global_avg_pool(const Tensor& input);

// input [K] or [N,K]; weights [K,M]; bias [M].
Tensor dense(const Tensor& input, const Tensor& weights,
             const std::optional<Tensor>& bias = std::nullopt);

Tensor sigmoid(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);

double sigmoid(double x);
double sum(const Tensor& x);
double l2_norm(const Tensor& x);

}  // namespace detrend
