#pragma once

#include <array>
#include <cstdint>

#include "detrend/tensor.hpp"

namespace detrend {

// xoshiro256** seeded through splitmix64. Gaussian draws use Box-Muller on
// 53-bit uniforms so the stream depends only on the seed.
class Prng {
 public:
  struct State {
    std::array<std::uint64_t, 4> s{};
    bool has_spare = false;
    double spare = 0.0;
    bool operator==(const State&) const = default;
  };

  explicit Prng(std::uint64_t seed = 0);

  std::uint64_t next_u64();
  double uniform();  // [0, 1)
  double uniform(double lo, double hi);
  std::uint64_t below(std::uint64_t bound);  // [0, bound)
  bool bernoulli(double p);
  double normal();

  // Independent child stream; does not advance this generator.
  Prng derive(std::uint64_t key) const;

  const State& state() const { return state_; }
  void set_state(const State& s) { state_ = s; }

 private:
  State state_;
};

std::uint64_t splitmix64(std::uint64_t& x);

Tensor gaussian_init(Prng& prng, Shape shape, double sigma,
                     Precision precision = Precision::f64);

}  // namespace detrend
