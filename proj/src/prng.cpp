#include "detrend/prng.hpp"

#include <cmath>
#include <numbers>

namespace detrend {

std::uint64_t splitmix64(std::uint64_t& x) {
  std::uint64_t z = (x += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

Prng::Prng(std::uint64_t seed) {
  std::uint64_t x = seed;
  for (auto& word : state_.s) word = splitmix64(x);
}

std::uint64_t Prng::next_u64() {
  auto& s = state_.s;
  const std::uint64_t result = rotl(s[1] * 5, 7) * 9;
  const std::uint64_t t = s[1] << 17;
  s[2] ^= s[0];
  s[3] ^= s[1];
  s[1] ^= s[2];
  s[0] ^= s[3];
  s[2] ^= t;
  s[3] = rotl(s[3], 45);
  return result;
}

double Prng::uniform() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Prng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

std::uint64_t Prng::below(std::uint64_t bound) {
  if (bound == 0) return 0;
  // rejection sampling keeps the draw unbiased
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % bound;
  std::uint64_t v;
  do {
    v = next_u64();
  } while (v >= limit);
  return v % bound;
}

bool Prng::bernoulli(double p) { return uniform() < p; }

double Prng::normal() {
  if (state_.has_spare) {
    state_.has_spare = false;
    return state_.spare;
  }
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  const double radius = std::sqrt(-2.0 * std::log(u1));
  const double angle = 2.0 * std::numbers::pi * u2;
  state_.spare = radius * std::sin(angle);
  state_.has_spare = true;
  return radius * std::cos(angle);
}

Prng Prng::derive(std::uint64_t key) const {
  std::uint64_t x = state_.s[0] ^ rotl(state_.s[2], 17) ^ (key * 0xd1342543de82ef95ULL);
  Prng child;
  for (auto& word : child.state_.s) word = splitmix64(x);
  return child;
}

Tensor gaussian_init(Prng& prng, Shape shape, double sigma, Precision precision) {
  if (!(sigma > 0.0)) throw std::invalid_argument("gaussian_init: sigma must be > 0");
  Tensor t(std::move(shape), precision);
  for (auto& v : t.data()) v = sigma * prng.normal();
  t.finalize("gaussian_init");
  return t;
}

}  // namespace detrend
