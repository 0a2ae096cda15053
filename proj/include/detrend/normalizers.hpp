#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "detrend/autograd.hpp"

namespace detrend::norm {

inline constexpr double kEpsilon = 1e-5;
inline constexpr double kRunningMomentum = 0.1;

enum class Mode { train, eval };

struct AffineParams {
  Tensor gamma;
  std::optional<Tensor> beta;

  static AffineParams identity(std::size_t features, bool with_beta,
                               double beta_init = 0.0);
};

// Step-wise running statistics: one (mean, variance) vector per timestep up
// to the longest sequence seen in training. Later timesteps reuse the last
// entry.
class BnRunningStats {
 public:
  BnRunningStats() = default;
  explicit BnRunningStats(std::size_t features, double momentum = kRunningMomentum);

  std::size_t features() const { return features_; }
  double momentum() const { return momentum_; }
  std::size_t t_max() const { return mean_.size(); }

  void update(std::size_t t, std::span<const double> batch_mean,
              std::span<const double> batch_var, std::size_t valid_samples);

  bool initialized(std::size_t t) const;
  std::span<const double> mean(std::size_t t) const;
  std::span<const double> var(std::size_t t) const;
  std::uint64_t count(std::size_t t) const;

  // Flat views for checkpointing: [t_max * features] and [t_max].
  std::vector<double> flat_mean() const;
  std::vector<double> flat_var() const;
  std::vector<std::uint64_t> counts() const { return count_; }
  void restore(std::size_t features, double momentum, const std::vector<double>& mean,
               const std::vector<double>& var, const std::vector<std::uint64_t>& counts);

  bool operator==(const BnRunningStats&) const = default;

 private:
  std::size_t clamp(std::size_t t) const;

  std::size_t features_ = 0;
  double momentum_ = kRunningMomentum;
  std::vector<std::vector<double>> mean_;
  std::vector<std::vector<double>> var_;
  std::vector<std::uint64_t> count_;
};

struct NormResult {
  Tensor output;
  Tensor xhat;
  std::vector<double> mean;     // per feature (bn) or per sample (ln)
  std::vector<double> inv_std;
};

// x is [N, C, ...]; statistics per channel C pooled over valid samples and
// all trailing positions. In eval mode the running statistics for step t are
// used. Padded samples produce zeros.
NormResult bn_forward(const Tensor& x, const AffineParams& affine, BnRunningStats* stats,
                      Mode mode, const ag::RowMask& valid, std::size_t t);

// x is [N, C, ...] (or a single sample [C, ...] with batched=false);
// statistics per sample over every activation, affine per channel.
NormResult ln_forward(const Tensor& x, const AffineParams& affine, bool batched = true);

// mu_t = alpha * x_t + (1 - alpha) * mu_{t-1}
std::vector<double> ema(std::span<const double> x, double alpha, double mu0);

// Differentiable versions used inside recurrent cells. Statistics are part
// of the graph (full batch-norm backward).
ag::Var batch_norm(ag::Var x, ag::Var gamma, std::optional<ag::Var> beta,
                   BnRunningStats& stats, Mode mode, const ag::RowMask& valid,
                   std::size_t t);
ag::Var layer_norm(ag::Var x, ag::Var gamma, std::optional<ag::Var> beta);

}  // namespace detrend::norm
