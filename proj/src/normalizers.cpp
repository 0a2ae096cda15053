#include "detrend/normalizers.hpp"

#include <cmath>
#include <memory>
#include <stdexcept>

namespace detrend::norm {

AffineParams AffineParams::identity(std::size_t features, bool with_beta,
                                    double beta_init) {
  AffineParams a{Tensor::filled({features}, 1.0), std::nullopt};
  if (with_beta) a.beta = Tensor::filled({features}, beta_init);
  return a;
}

BnRunningStats::BnRunningStats(std::size_t features, double momentum)
    : features_(features), momentum_(momentum) {
  if (features == 0) throw std::invalid_argument("BnRunningStats: zero features");
  if (!(momentum > 0.0 && momentum <= 1.0)) {
    throw std::invalid_argument("BnRunningStats: momentum must be in (0, 1]");
  }
}

void BnRunningStats::update(std::size_t t, std::span<const double> batch_mean,
                            std::span<const double> batch_var, std::size_t valid_samples) {
  if (batch_mean.size() != features_ || batch_var.size() != features_) {
    throw ShapeError("BnRunningStats::update: feature count mismatch");
  }
  while (mean_.size() <= t) {
    mean_.emplace_back(features_, 0.0);
    var_.emplace_back(features_, 1.0);
    count_.push_back(0);
  }
  for (std::size_t f = 0; f < features_; ++f) {
    mean_[t][f] = (1.0 - momentum_) * mean_[t][f] + momentum_ * batch_mean[f];
    var_[t][f] = (1.0 - momentum_) * var_[t][f] + momentum_ * batch_var[f];
  }
  count_[t] += valid_samples;
}

std::size_t BnRunningStats::clamp(std::size_t t) const {
  if (mean_.empty()) throw std::logic_error("BnRunningStats: no statistics recorded");
  return t < mean_.size() ? t : mean_.size() - 1;
}

bool BnRunningStats::initialized(std::size_t t) const {
  if (mean_.empty()) return false;
  return count_[clamp(t)] > 0;
}

std::span<const double> BnRunningStats::mean(std::size_t t) const { return mean_[clamp(t)]; }
std::span<const double> BnRunningStats::var(std::size_t t) const { return var_[clamp(t)]; }
std::uint64_t BnRunningStats::count(std::size_t t) const { return count_[clamp(t)]; }

std::vector<double> BnRunningStats::flat_mean() const {
  std::vector<double> out;
  for (const auto& row : mean_) out.insert(out.end(), row.begin(), row.end());
  return out;
}

std::vector<double> BnRunningStats::flat_var() const {
  std::vector<double> out;
  for (const auto& row : var_) out.insert(out.end(), row.begin(), row.end());
  return out;
}

void BnRunningStats::restore(std::size_t features, double momentum,
                             const std::vector<double>& mean, const std::vector<double>& var,
                             const std::vector<std::uint64_t>& counts) {
  if (features == 0 || mean.size() != counts.size() * features ||
      var.size() != mean.size()) {
    throw std::invalid_argument("BnRunningStats::restore: inconsistent sizes");
  }
  features_ = features;
  momentum_ = momentum;
  mean_.clear();
  var_.clear();
  for (std::size_t t = 0; t < counts.size(); ++t) {
    mean_.emplace_back(mean.begin() + t * features, mean.begin() + (t + 1) * features);
    var_.emplace_back(var.begin() + t * features, var.begin() + (t + 1) * features);
  }
  count_ = counts;
}

namespace {

struct Layout {
  std::size_t n, c, inner;
};

Layout layout_of(const Tensor& x, const char* op) {
  if (x.rank() < 2) throw ShapeError(std::string(op) + ": expected [N, C, ...]");
  const std::size_t n = x.dim(0), c = x.dim(1);
  return {n, c, x.size() / (n * c)};
}

void check_affine(const AffineParams& a, std::size_t c, const char* op) {
  if (a.gamma.shape() != Shape{c} || (a.beta && a.beta->shape() != Shape{c})) {
    throw ShapeError(std::string(op) + ": affine parameters do not match " +
                     std::to_string(c) + " features");
  }
}

bool is_valid(const ag::RowMask& mask, std::size_t n) { return mask.empty() || mask[n]; }

}  // namespace

NormResult bn_forward(const Tensor& x, const AffineParams& affine, BnRunningStats* stats,
                      Mode mode, const ag::RowMask& valid, std::size_t t) {
  const auto L = layout_of(x, "bn_forward");
  check_affine(affine, L.c, "bn_forward");
  if (!valid.empty() && valid.size() != L.n) throw ShapeError("bn_forward: mask length");

  NormResult r{Tensor::zeros_like(x), Tensor::zeros_like(x),
               std::vector<double>(L.c, 0.0), std::vector<double>(L.c, 0.0)};
  std::size_t m = 0;
  for (std::size_t n = 0; n < L.n; ++n) m += is_valid(valid, n) ? 1 : 0;

  if (mode == Mode::train) {
    if (m < 2) {
      throw std::invalid_argument("bn_forward: train mode needs at least 2 valid samples, got " +
                                  std::to_string(m));
    }
    const double count = static_cast<double>(m * L.inner);
    std::vector<double> var(L.c, 0.0);
    for (std::size_t ch = 0; ch < L.c; ++ch) {
      double acc = 0.0;
      for (std::size_t n = 0; n < L.n; ++n) {
        if (!is_valid(valid, n)) continue;
        const double* p = x.data().data() + (n * L.c + ch) * L.inner;
        for (std::size_t i = 0; i < L.inner; ++i) acc += p[i];
      }
      const double mu = acc / count;
      double sq = 0.0;
      for (std::size_t n = 0; n < L.n; ++n) {
        if (!is_valid(valid, n)) continue;
        const double* p = x.data().data() + (n * L.c + ch) * L.inner;
        for (std::size_t i = 0; i < L.inner; ++i) sq += (p[i] - mu) * (p[i] - mu);
      }
      r.mean[ch] = mu;
      var[ch] = sq / count;
      r.inv_std[ch] = 1.0 / std::sqrt(var[ch] + kEpsilon);
    }
    if (stats) stats->update(t, r.mean, var, m);
  } else {
    if (!stats || !stats->initialized(t)) {
      throw std::logic_error("bn_forward: running statistics are not initialized");
    }
    if (stats->features() != L.c) throw ShapeError("bn_forward: running stats feature count");
    auto mu = stats->mean(t);
    auto var = stats->var(t);
    for (std::size_t ch = 0; ch < L.c; ++ch) {
      r.mean[ch] = mu[ch];
      r.inv_std[ch] = 1.0 / std::sqrt(var[ch] + kEpsilon);
    }
  }

  for (std::size_t n = 0; n < L.n; ++n) {
    if (!is_valid(valid, n)) continue;
    for (std::size_t ch = 0; ch < L.c; ++ch) {
      const std::size_t base = (n * L.c + ch) * L.inner;
      const double g = affine.gamma[ch];
      const double b = affine.beta ? (*affine.beta)[ch] : 0.0;
      for (std::size_t i = 0; i < L.inner; ++i) {
        const double xh = (x[base + i] - r.mean[ch]) * r.inv_std[ch];
        r.xhat[base + i] = xh;
        r.output[base + i] = g * xh + b;
      }
    }
  }
  r.output.finalize("bn_forward");
  return r;
}

NormResult ln_forward(const Tensor& x, const AffineParams& affine, bool batched) {
  const Tensor in = batched ? x : [&] {
    Shape s{1};
    s.insert(s.end(), x.shape().begin(), x.shape().end());
    return x.reshaped(s);
  }();
  const auto L = layout_of(in, "ln_forward");
  check_affine(affine, L.c, "ln_forward");
  const std::size_t d = L.c * L.inner;
  if (d < 2) throw std::invalid_argument("ln_forward: layer needs at least 2 activations");

  NormResult r{Tensor::zeros_like(in), Tensor::zeros_like(in),
               std::vector<double>(L.n, 0.0), std::vector<double>(L.n, 0.0)};
  for (std::size_t n = 0; n < L.n; ++n) {
    const double* p = in.data().data() + n * d;
    double acc = 0.0;
    for (std::size_t i = 0; i < d; ++i) acc += p[i];
    const double mu = acc / static_cast<double>(d);
    double sq = 0.0;
    for (std::size_t i = 0; i < d; ++i) sq += (p[i] - mu) * (p[i] - mu);
    const double inv = 1.0 / std::sqrt(sq / static_cast<double>(d) + kEpsilon);
    r.mean[n] = mu;
    r.inv_std[n] = inv;
    for (std::size_t ch = 0; ch < L.c; ++ch) {
      const double g = affine.gamma[ch];
      const double b = affine.beta ? (*affine.beta)[ch] : 0.0;
      for (std::size_t i = 0; i < L.inner; ++i) {
        const std::size_t k = n * d + ch * L.inner + i;
        const double xh = (in[k] - mu) * inv;
        r.xhat[k] = xh;
        r.output[k] = g * xh + b;
      }
    }
  }
  r.output.finalize("ln_forward");
  if (!batched) {
    r.output = r.output.reshaped(x.shape());
    r.xhat = r.xhat.reshaped(x.shape());
  }
  return r;
}

std::vector<double> ema(std::span<const double> x, double alpha, double mu0) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) {
    throw std::invalid_argument("ema: alpha must lie in [0, 1]");
  }
  std::vector<double> out;
  out.reserve(x.size());
  double mu = mu0;
  for (double v : x) {
    mu = alpha * v + (1.0 - alpha) * mu;
    out.push_back(mu);
  }
  return out;
}

ag::Var batch_norm(ag::Var x, ag::Var gamma, std::optional<ag::Var> beta,
                   BnRunningStats& stats, Mode mode, const ag::RowMask& valid,
                   std::size_t t) {
  AffineParams affine{gamma.value(), beta ? std::optional<Tensor>(beta->value()) : std::nullopt};
  auto res = bn_forward(x.value(), affine, &stats, mode, valid, t);
  const auto L = layout_of(x.value(), "batch_norm");
  std::size_t m = 0;
  for (std::size_t n = 0; n < L.n; ++n) m += is_valid(valid, n) ? 1 : 0;
  const double count = static_cast<double>(m * L.inner);

  std::vector<ag::Var> inputs{x, gamma};
  if (beta) inputs.push_back(*beta);
  ag::Tape* tp = &x.tape();
  const std::size_t gid = gamma.id();
  auto xhat = std::make_shared<Tensor>(std::move(res.xhat));
  auto inv_std = std::make_shared<std::vector<double>>(std::move(res.inv_std));
  const bool train = mode == Mode::train;
  return x.tape().record(
      "batch_norm", std::move(res.output), std::move(inputs),
      [tp, gid, xhat, inv_std, valid, L, count, train](const Tensor& g,
                                                       std::span<Tensor* const> in) {
        const Tensor& gam = tp->value(gid);
        for (std::size_t ch = 0; ch < L.c; ++ch) {
          double sum_g = 0.0, sum_gx = 0.0;
          for (std::size_t n = 0; n < L.n; ++n) {
            if (!is_valid(valid, n)) continue;
            const std::size_t base = (n * L.c + ch) * L.inner;
            for (std::size_t i = 0; i < L.inner; ++i) {
              sum_g += g[base + i];
              sum_gx += g[base + i] * (*xhat)[base + i];
            }
          }
          if (in[1]) (*in[1])[ch] += sum_gx;
          if (in.size() > 2 && in[2]) (*in[2])[ch] += sum_g;
          if (!in[0]) continue;
          const double gm = gam[ch];
          const double inv = (*inv_std)[ch];
          for (std::size_t n = 0; n < L.n; ++n) {
            if (!is_valid(valid, n)) continue;
            const std::size_t base = (n * L.c + ch) * L.inner;
            for (std::size_t i = 0; i < L.inner; ++i) {
              const double dxh = g[base + i] * gm;
              double dx;
              if (train) {
                // mean of dxhat is gm*sum_g/count; mean of dxhat*xhat is gm*sum_gx/count
                dx = inv * (dxh - gm * sum_g / count - (*xhat)[base + i] * gm * sum_gx / count);
              } else {
                dx = inv * dxh;
              }
              (*in[0])[base + i] += dx;
            }
          }
        }
      });
}

ag::Var layer_norm(ag::Var x, ag::Var gamma, std::optional<ag::Var> beta) {
  AffineParams affine{gamma.value(), beta ? std::optional<Tensor>(beta->value()) : std::nullopt};
  auto res = ln_forward(x.value(), affine, true);
  const auto L = layout_of(x.value(), "layer_norm");
  std::vector<ag::Var> inputs{x, gamma};
  if (beta) inputs.push_back(*beta);
  ag::Tape* tp = &x.tape();
  const std::size_t gid = gamma.id();
  auto xhat = std::make_shared<Tensor>(std::move(res.xhat));
  auto inv_std = std::make_shared<std::vector<double>>(std::move(res.inv_std));
  return x.tape().record(
      "layer_norm", std::move(res.output), std::move(inputs),
      [tp, gid, xhat, inv_std, L](const Tensor& g, std::span<Tensor* const> in) {
        const Tensor& gam = tp->value(gid);
        const std::size_t d = L.c * L.inner;
        for (std::size_t n = 0; n < L.n; ++n) {
          double sum_d = 0.0, sum_dx = 0.0;
          for (std::size_t ch = 0; ch < L.c; ++ch) {
            for (std::size_t i = 0; i < L.inner; ++i) {
              const std::size_t k = n * d + ch * L.inner + i;
              const double dxh = g[k] * gam[ch];
              sum_d += dxh;
              sum_dx += dxh * (*xhat)[k];
              if (in[1]) (*in[1])[ch] += g[k] * (*xhat)[k];
              if (in.size() > 2 && in[2]) (*in[2])[ch] += g[k];
            }
          }
          if (!in[0]) continue;
          const double inv = (*inv_std)[n];
          const double dd = static_cast<double>(d);
          for (std::size_t ch = 0; ch < L.c; ++ch) {
            for (std::size_t i = 0; i < L.inner; ++i) {
              const std::size_t k = n * d + ch * L.inner + i;
              const double dxh = g[k] * gam[ch];
              (*in[0])[k] += inv * (dxh - sum_d / dd - (*xhat)[k] * sum_dx / dd);
            }
          }
        }
      });
}

}  // namespace detrend::norm
