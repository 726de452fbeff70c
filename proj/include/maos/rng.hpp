#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace maos {

// Counted, restorable random stream. Every draw goes through next_u64() so a
// stream's state is fully described by (seed, draws); restore() replays it.
// Distributions are hand-rolled on top of the raw engine because the
// std::uniform_* distributions are not bit-stable across standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed), seed_(seed) {}

  std::uint64_t next_u64() {
    ++draws_;
    return eng_();
  }

  // [0,1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // [0,n). Modulo bias is ~n/2^64, irrelevant at our scales.
  std::int64_t uniform_int(std::int64_t n) {
    return static_cast<std::int64_t>(next_u64() % static_cast<std::uint64_t>(n));
  }

  bool bernoulli(double p) { return uniform() < p; }

  // Box-Muller without the usual cached spare so the draw counter alone
  // captures the stream state.
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925287 * u2);
  }

  // Independent child stream; children depend only on (seed, salt), not on
  // how much the parent has drawn.
  Rng derive(std::uint64_t salt) const { return Rng(mix(seed_ ^ mix(salt))); }

  std::uint64_t seed() const { return seed_; }
  std::uint64_t draws() const { return draws_; }

  static Rng restore(std::uint64_t seed, std::uint64_t draws) {
    Rng r(seed);
    r.eng_.discard(draws);
    r.draws_ = draws;
    return r;
  }

  // splitmix64 finalizer
  static std::uint64_t mix(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  static std::uint64_t hash_name(const char* s) {
    std::uint64_t h = 1469598103934665603ULL;
    for (; *s; ++s) {
      h ^= static_cast<unsigned char>(*s);
      h *= 1099511628211ULL;
    }
    return h;
  }

 private:
  std::mt19937_64 eng_;
  std::uint64_t seed_ = 0;
  std::uint64_t draws_ = 0;
};

}  // namespace maos
